//! Knowledge-graph client: materialize entity dumps per relation property and
//! resolve surfaces to entity ids. A fixture mode replays recorded responses
//! from disk so every test runs with zero network I/O; live mode talks HTTP
//! with retries, a rate limiter, and an on-disk resolve cache.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::infer::SurfaceResolver;
use crate::schema::RelationSchema;
use crate::vocab_build::{EntityRecord, RecordSource};

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("transport error for {url}: {message} (after {attempts} attempts)")]
    Transport {
        url: String,
        message: String,
        attempts: u32,
    },
    #[error("bad response from {url}: {message}")]
    BadResponse { url: String, message: String },
    #[error("fixture file missing: {0}")]
    FixtureMissing(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FetchSpec {
    pub endpoint: String,
    /// relation name -> knowledge-graph property id. Ships empty; live mode
    /// needs a user-supplied mapping.
    #[serde(default)]
    pub properties: BTreeMap<String, String>,
    pub page_size: usize,
    /// Maximum live requests per second.
    pub rate_limit: f64,
    /// When set, all responses come from recorded files under this directory
    /// and the client never touches the network.
    #[serde(default)]
    pub fixture_dir: Option<PathBuf>,
}

impl FetchSpec {
    pub fn validate(&self) -> Result<(), KgError> {
        if self.page_size < 1 {
            return Err(KgError::InvalidSpec("page_size must be >= 1".into()));
        }
        if !(self.rate_limit > 0.0) {
            return Err(KgError::InvalidSpec("rate_limit must be > 0".into()));
        }
        Ok(())
    }
}

/// Wire format of a paged entity listing.
#[derive(Debug, Serialize, Deserialize)]
pub struct EntityPage {
    pub entities: Vec<EntityPageRow>,
    /// Whether another page follows.
    #[serde(default)]
    pub more: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EntityPageRow {
    pub surface: String,
    #[serde(default)]
    pub entity_id: Option<String>,
}

/// Wire format of a surface resolution response (and of cache files).
#[derive(Debug, Serialize, Deserialize)]
pub struct ResolveEntry {
    pub surface: String,
    pub entity_id: Option<String>,
}

/// Simple interval rate limiter: at most `rate` calls per second.
pub struct RateLimiter {
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
    log: Mutex<Vec<Instant>>,
}

impl RateLimiter {
    pub fn new(rate_per_sec: f64) -> Self {
        Self {
            min_interval: Duration::from_secs_f64(1.0 / rate_per_sec),
            last: Mutex::new(None),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Block until the next request is allowed, then record it.
    pub fn throttle(&self) {
        let mut last = self.last.lock().unwrap();
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        let now = Instant::now();
        *last = Some(now);
        self.log.lock().unwrap().push(now);
    }

    /// Timestamps of every throttled call, for rate verification.
    pub fn timestamps(&self) -> Vec<Instant> {
        self.log.lock().unwrap().clone()
    }
}

pub struct KgClient {
    spec: FetchSpec,
    cache_dir: Option<PathBuf>,
    limiter: RateLimiter,
    requests: AtomicU64,
}

#[derive(Debug, Clone, Default)]
pub struct FetchReport {
    pub records: usize,
    pub pages: usize,
    /// (relation, error message) for relations that failed after retries.
    pub failures: Vec<(String, String)>,
}

const RETRY_ATTEMPTS: u32 = 3;

impl KgClient {
    pub fn new(spec: FetchSpec, cache_dir: Option<PathBuf>) -> Result<Self, KgError> {
        spec.validate()?;
        let limiter = RateLimiter::new(spec.rate_limit);
        Ok(Self {
            spec,
            cache_dir,
            limiter,
            requests: AtomicU64::new(0),
        })
    }

    /// Number of live HTTP requests issued. Fixture mode keeps this at zero.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    fn fixture_mode(&self) -> bool {
        self.spec.fixture_dir.is_some()
    }

    fn http_get(&self, url: &str) -> Result<String, KgError> {
        let mut attempt = 0;
        let mut delay = Duration::from_millis(100);
        loop {
            attempt += 1;
            self.limiter.throttle();
            self.requests.fetch_add(1, Ordering::SeqCst);
            let result = ureq::get(url).call();
            match result {
                Ok(mut response) => {
                    return response.body_mut().read_to_string().map_err(|e| {
                        KgError::BadResponse {
                            url: url.to_string(),
                            message: e.to_string(),
                        }
                    });
                }
                Err(e) => {
                    if attempt >= RETRY_ATTEMPTS {
                        return Err(KgError::Transport {
                            url: url.to_string(),
                            message: e.to_string(),
                            attempts: attempt,
                        });
                    }
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }

    fn fetch_page(&self, property: &str, page: usize) -> Result<EntityPage, KgError> {
        let raw = if let Some(dir) = &self.spec.fixture_dir {
            let path = dir
                .join("fetch")
                .join(format!("{property}_page_{page}.json"));
            std::fs::read_to_string(&path)
                .map_err(|_| KgError::FixtureMissing(path.display().to_string()))?
        } else {
            let url = format!(
                "{}?property={}&page={}&page_size={}",
                self.spec.endpoint,
                urlencode(property),
                page,
                self.spec.page_size
            );
            self.http_get(&url)?
        };
        serde_json::from_str(&raw).map_err(|e| KgError::BadResponse {
            url: format!("{property} page {page}"),
            message: e.to_string(),
        })
    }

    /// Pull every entity of every mapped relation, typed by the relation's
    /// object type and deduplicated on (surface, type). Failed relations are
    /// reported; partial results are still returned.
    pub fn fetch_entities(
        &self,
        schema: &RelationSchema,
    ) -> Result<(Vec<EntityRecord>, FetchReport), KgError> {
        let mut seen: BTreeMap<(String, String), EntityRecord> = BTreeMap::new();
        let mut report = FetchReport::default();
        for (relation, property) in &self.spec.properties {
            let info = match schema.get(relation) {
                Ok(i) => i,
                Err(e) => {
                    report.failures.push((relation.clone(), e.to_string()));
                    continue;
                }
            };
            let mut page = 0usize;
            loop {
                match self.fetch_page(property, page) {
                    Ok(p) => {
                        report.pages += 1;
                        for row in p.entities {
                            if row.surface.trim().is_empty() {
                                continue;
                            }
                            let key = (row.surface.clone(), info.object_type.clone());
                            seen.entry(key).or_insert_with(|| EntityRecord {
                                surface: row.surface,
                                entity_type: info.object_type.clone(),
                                entity_id: row.entity_id,
                                source: RecordSource::KgDump,
                            });
                        }
                        if !p.more {
                            break;
                        }
                        page += 1;
                    }
                    Err(e) => {
                        report.failures.push((relation.clone(), e.to_string()));
                        break;
                    }
                }
            }
        }
        let records: Vec<EntityRecord> = seen.into_values().collect();
        report.records = records.len();
        if !report.failures.is_empty() {
            log::warn!(
                "fetch finished with {} failed relations: {:?}",
                report.failures.len(),
                report.failures
            );
        }
        Ok((records, report))
    }

    fn cache_path(&self, surface: &str) -> Option<PathBuf> {
        let dir = self
            .spec
            .fixture_dir
            .clone()
            .or_else(|| self.cache_dir.clone())?;
        let digest = Sha1::digest(surface.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        Some(dir.join("cache").join(format!("{hex}.json")))
    }

    /// Look up the entity id for an exact surface. Cache hits (and fixture
    /// mode) never touch the network; misses in fixture mode are `None`.
    pub fn resolve_surface(&self, surface: &str) -> Result<Option<String>, KgError> {
        if surface.trim().is_empty() {
            return Ok(None);
        }
        if let Some(path) = self.cache_path(surface) {
            if let Ok(text) = std::fs::read_to_string(&path) {
                let entry: ResolveEntry =
                    serde_json::from_str(&text).map_err(|e| KgError::BadResponse {
                        url: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                return Ok(entry.entity_id);
            }
        }
        if self.fixture_mode() {
            return Ok(None);
        }
        let url = format!("{}?search={}&limit=1", self.spec.endpoint, urlencode(surface));
        let raw = self.http_get(&url)?;
        let entry: ResolveEntry = serde_json::from_str(&raw).map_err(|e| KgError::BadResponse {
            url: url.clone(),
            message: e.to_string(),
        })?;
        if let Some(path) = self.cache_path(surface) {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|source| KgError::Io {
                    path: parent.display().to_string(),
                    source,
                })?;
            }
            let json = serde_json::to_string(&entry).expect("entry serializes");
            std::fs::write(&path, json).map_err(|source| KgError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(entry.entity_id)
    }
}

impl SurfaceResolver for KgClient {
    fn resolve(&self, surface: &str) -> Result<Option<String>, String> {
        self.resolve_surface(surface).map_err(|e| e.to_string())
    }
}

fn urlencode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => {
                out.push(b as char)
            }
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

/// Write records in the entity-dump format (vocabulary entity JSONL).
pub fn write_entity_dump(path: &Path, records: &[EntityRecord]) -> Result<(), KgError> {
    #[derive(Serialize)]
    struct Line<'a> {
        surface: &'a str,
        kind: &'a str,
        #[serde(rename = "type")]
        entity_type: &'a str,
        entity_id: &'a Option<String>,
    }
    let mut out = String::new();
    for r in records {
        let line = Line {
            surface: &r.surface,
            kind: "entity",
            entity_type: &r.entity_type,
            entity_id: &r.entity_id,
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_spec(dir: &Path) -> FetchSpec {
        FetchSpec {
            endpoint: "http://127.0.0.1:9".to_string(), // unreachable on purpose
            properties: [("PersonHasNoblePrize".to_string(), "P166".to_string())]
                .into_iter()
                .collect(),
            page_size: 4,
            rate_limit: 1000.0,
            fixture_dir: Some(dir.to_path_buf()),
        }
    }

    fn write_fixture_pages(dir: &Path) {
        let fetch = dir.join("fetch");
        std::fs::create_dir_all(&fetch).unwrap();
        // 7 prize entities over two pages.
        let page0 = EntityPage {
            entities: (0..4)
                .map(|i| EntityPageRow {
                    surface: format!("Prize {i}"),
                    entity_id: Some(format!("P{i}")),
                })
                .collect(),
            more: true,
        };
        let page1 = EntityPage {
            entities: (4..7)
                .map(|i| EntityPageRow {
                    surface: format!("Prize {i}"),
                    entity_id: Some(format!("P{i}")),
                })
                .chain(std::iter::once(EntityPageRow {
                    surface: "Prize 0".to_string(), // duplicate across pages
                    entity_id: Some("P0".to_string()),
                }))
                .collect(),
            more: false,
        };
        std::fs::write(
            fetch.join("P166_page_0.json"),
            serde_json::to_string(&page0).unwrap(),
        )
        .unwrap();
        std::fs::write(
            fetch.join("P166_page_1.json"),
            serde_json::to_string(&page1).unwrap(),
        )
        .unwrap();
    }

    #[test]
    fn fixture_fetch_yields_typed_records_with_zero_requests() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_pages(dir.path());
        let client = KgClient::new(fixture_spec(dir.path()), None).unwrap();
        let schema = RelationSchema::bundled();
        let (records, report) = client.fetch_entities(&schema).unwrap();
        assert_eq!(records.len(), 7, "duplicates collapse");
        assert!(records.iter().all(|r| r.entity_type == "Prize"));
        assert_eq!(report.pages, 2);
        assert!(report.failures.is_empty());
        assert_eq!(client.request_count(), 0, "fixture mode is offline");
    }

    #[test]
    fn fixture_fetch_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_pages(dir.path());
        let schema = RelationSchema::bundled();
        let out1 = {
            let client = KgClient::new(fixture_spec(dir.path()), None).unwrap();
            let (records, _) = client.fetch_entities(&schema).unwrap();
            let path = dir.path().join("dump1.jsonl");
            write_entity_dump(&path, &records).unwrap();
            std::fs::read(&path).unwrap()
        };
        let out2 = {
            let client = KgClient::new(fixture_spec(dir.path()), None).unwrap();
            let (records, _) = client.fetch_entities(&schema).unwrap();
            let path = dir.path().join("dump2.jsonl");
            write_entity_dump(&path, &records).unwrap();
            std::fs::read(&path).unwrap()
        };
        assert_eq!(out1, out2);
    }

    #[test]
    fn missing_fixture_page_is_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        // No pages written at all.
        let client = KgClient::new(fixture_spec(dir.path()), None).unwrap();
        let schema = RelationSchema::bundled();
        let (records, report) = client.fetch_entities(&schema).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.failures.len(), 1);
        assert_eq!(client.request_count(), 0);
    }

    #[test]
    fn resolve_replays_fixture_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache");
        std::fs::create_dir_all(&cache).unwrap();
        let digest = Sha1::digest("Greenland".as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        std::fs::write(
            cache.join(format!("{hex}.json")),
            r#"{"surface": "Greenland", "entity_id": "Q223"}"#,
        )
        .unwrap();
        let client = KgClient::new(fixture_spec(dir.path()), None).unwrap();
        assert_eq!(
            client.resolve_surface("Greenland").unwrap().as_deref(),
            Some("Q223")
        );
        // Unknown surface in fixture mode: null, still offline.
        assert_eq!(client.resolve_surface("Narnia").unwrap(), None);
        assert_eq!(client.request_count(), 0);
    }

    #[test]
    fn live_unreachable_endpoint_errors_after_three_attempts() {
        let spec = FetchSpec {
            endpoint: "http://127.0.0.1:9".to_string(),
            properties: BTreeMap::new(),
            page_size: 4,
            rate_limit: 1000.0,
            fixture_dir: None,
        };
        let client = KgClient::new(spec, None).unwrap();
        let err = client.resolve_surface("Greenland").unwrap_err();
        match err {
            KgError::Transport { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other}"),
        }
        assert_eq!(client.request_count(), 3);
    }

    #[test]
    fn live_resolve_uses_cache_before_network() {
        let dir = tempfile::tempdir().unwrap();
        let cache_root = dir.path().to_path_buf();
        let spec = FetchSpec {
            endpoint: "http://127.0.0.1:9".to_string(),
            properties: BTreeMap::new(),
            page_size: 4,
            rate_limit: 1000.0,
            fixture_dir: None,
        };
        // Pre-populate the live cache by hand.
        let digest = Sha1::digest("Canada".as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let cache = cache_root.join("cache");
        std::fs::create_dir_all(&cache).unwrap();
        std::fs::write(
            cache.join(format!("{hex}.json")),
            r#"{"surface": "Canada", "entity_id": "Q16"}"#,
        )
        .unwrap();
        let client = KgClient::new(spec, Some(cache_root)).unwrap();
        assert_eq!(
            client.resolve_surface("Canada").unwrap().as_deref(),
            Some("Q16")
        );
        assert_eq!(client.request_count(), 0, "cache hit avoids the network");
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let limiter = RateLimiter::new(50.0);
        for _ in 0..5 {
            limiter.throttle();
        }
        let stamps = limiter.timestamps();
        assert_eq!(stamps.len(), 5);
        for pair in stamps.windows(2) {
            let gap = pair[1].duration_since(pair[0]);
            assert!(
                gap >= Duration::from_millis(19),
                "requests {gap:?} apart exceed 50/s"
            );
        }
    }

    #[test]
    fn bad_spec_rejected() {
        let mut spec = FetchSpec {
            endpoint: "http://example.invalid".into(),
            properties: BTreeMap::new(),
            page_size: 0,
            rate_limit: 10.0,
            fixture_dir: None,
        };
        assert!(KgClient::new(spec.clone(), None).is_err());
        spec.page_size = 1;
        spec.rate_limit = 0.0;
        assert!(KgClient::new(spec, None).is_err());
    }
}
