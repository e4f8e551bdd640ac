//! Drives the C ABI end to end from Rust: build a tiny world with the vexlm
//! library, then load and query it exclusively through the extern "C"
//! surface.

use std::ffi::{CStr, CString};

use vexlm_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn build() -> Self {
        use vexlm::corpus::make_finetune_instances;
        use vexlm::corpus::TemplateSet;
        use vexlm::data::{write_jsonl, TripleSample};
        use vexlm::model::{save_checkpoint, MlmModel, ModelConfig};
        use vexlm::recode::{expand_model, ExpandInit, RecodePlan};
        use vexlm::tokenizer::Vocabulary;
        use vexlm::train::{train, Regime, TrainConfig};

        let dir = tempfile::tempdir().unwrap();
        let corpus = [
            "Canada shares a border with Greenland .",
            "People in Canada speak Frenglish .",
        ];
        let base = Vocabulary::build_base_vocab(corpus, 32).unwrap();
        let (vocab, out) = base.add_entity_atoms(&[
            ("Canada".into(), "Country".into(), Some("Q16".into())),
            ("Greenland".into(), "Country".into(), Some("Q223".into())),
        ]);
        assert_eq!(out.added, 2);
        vocab.save(&dir.path().join("vocab.jsonl")).unwrap();

        std::fs::write(
            dir.path().join("templates.json"),
            r#"{"CountryBordersCountry": "{subject} shares a border with {mask} ."}"#,
        )
        .unwrap();
        std::fs::write(
            dir.path().join("schema.json"),
            r#"{"CountryBordersCountry": {"subject_type": "Country", "object_type": "Country", "numeric": false}}"#,
        )
        .unwrap();
        #[derive(serde::Serialize)]
        struct DumpLine {
            surface: String,
            kind: String,
            #[serde(rename = "type")]
            entity_type: String,
            entity_id: Option<String>,
        }
        write_jsonl(
            &dir.path().join("entities.jsonl"),
            &[DumpLine {
                surface: "Greenland".into(),
                kind: "entity".into(),
                entity_type: "Country".into(),
                entity_id: Some("Q223".into()),
            }],
        )
        .unwrap();

        // Train a small model to memorize the single fact so predictions are
        // meaningful through the FFI.
        let cfg = ModelConfig {
            hidden: 32,
            layers: 1,
            heads: 2,
            ff: 64,
            max_seq_len: 32,
            vocab_size: vocab.base_size(),
            seed: 11,
        };
        let base_model: MlmModel<f32> = MlmModel::init(&cfg).unwrap();
        let plan = RecodePlan::for_vocab(&vocab, base_model.config.vocab_size);
        let (model, _) = expand_model(&base_model, &plan, ExpandInit::Recode).unwrap();

        let templates = TemplateSet::load(&dir.path().join("templates.json")).unwrap();
        let samples = vec![TripleSample {
            subject: "Canada".into(),
            relation: "CountryBordersCountry".into(),
            objects: vec!["Greenland".into()],
        }];
        let instances = make_finetune_instances(&samples, &templates, &vocab, 32).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-2,
            epochs: 120,
            batch_size: 1,
            seed: 11,
            regime: Regime::FineTune,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        };
        let outcome = train(model, &instances, &tc, None).unwrap();
        save_checkpoint(&outcome.model, &dir.path().join("ckpt")).unwrap();

        std::fs::write(
            dir.path().join("thresholds.json"),
            r#"{"CountryBordersCountry": 0.3, "__default__": 0.5}"#,
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> CString {
        c(self.dir.path().join(name).to_str().unwrap())
    }
}

#[test]
fn version_is_non_null() {
    let v = vexlm_version();
    assert!(!v.is_null());
    let s = unsafe { CStr::from_ptr(v) }.to_str().unwrap();
    assert!(!s.is_empty());
}

#[test]
fn vocab_load_tokenize_detokenize() {
    let fx = Fixture::build();
    unsafe {
        let mut vocab: *mut VexlmVocab = std::ptr::null_mut();
        let status = vexlm_vocab_load(fx.path("vocab.jsonl").as_ptr(), &mut vocab);
        assert_eq!(status, VexlmStatus::Ok);
        assert!(vexlm_vocab_size(vocab) > 5);

        let mut ids: *mut u32 = std::ptr::null_mut();
        let mut len: usize = 0;
        let text = c("Canada shares a border with Greenland .");
        let status = vexlm_vocab_tokenize(vocab, text.as_ptr(), true, &mut ids, &mut len);
        assert_eq!(status, VexlmStatus::Ok);
        assert!(len > 0);
        let id_slice = std::slice::from_raw_parts(ids, len);
        // Entity matching made "Greenland" a single atom somewhere in there.
        let mut round: *mut libc::c_char = std::ptr::null_mut();
        let status = vexlm_vocab_detokenize(vocab, id_slice.as_ptr(), len, &mut round);
        assert_eq!(status, VexlmStatus::Ok);
        let s = CStr::from_ptr(round).to_str().unwrap().to_string();
        assert!(s.contains("Greenland"));
        vexlm_string_free(round);
        vexlm_ids_free(ids, len);
        vexlm_vocab_free(vocab);
    }
}

#[test]
fn null_and_bad_paths_produce_status_and_message() {
    unsafe {
        let mut vocab: *mut VexlmVocab = std::ptr::null_mut();
        let status = vexlm_vocab_load(std::ptr::null(), &mut vocab);
        assert_eq!(status, VexlmStatus::NullArgument);
        let status = vexlm_vocab_load(c("/nonexistent/vocab.jsonl").as_ptr(), &mut vocab);
        assert_ne!(status, VexlmStatus::Ok);
        let err = vexlm_last_error();
        assert!(!err.is_null());
        let msg = CStr::from_ptr(err).to_str().unwrap().to_string();
        assert!(!msg.is_empty());
        vexlm_string_free(err);
    }
}

#[test]
fn predictor_end_to_end() {
    let fx = Fixture::build();
    unsafe {
        let mut pred: *mut VexlmPredictor = std::ptr::null_mut();
        let status = vexlm_predictor_load(
            fx.path("ckpt").as_ptr(),
            fx.path("vocab.jsonl").as_ptr(),
            fx.path("templates.json").as_ptr(),
            fx.path("schema.json").as_ptr(),
            fx.path("thresholds.json").as_ptr(),
            fx.path("entities.jsonl").as_ptr(),
            &mut pred,
        );
        assert_eq!(status, VexlmStatus::Ok);

        let subject = c("Canada");
        let relation = c("CountryBordersCountry");
        let mut json: *mut libc::c_char = std::ptr::null_mut();
        let status = vexlm_predict_json(pred, subject.as_ptr(), relation.as_ptr(), 5, true, &mut json);
        assert_eq!(status, VexlmStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_string();
        vexlm_string_free(json);
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        let arr = parsed.as_array().unwrap();
        assert!(!arr.is_empty(), "trained fact should clear its threshold");
        assert_eq!(arr[0]["surface"], "Greenland");
        assert_eq!(arr[0]["entity_id"], "Q223");

        // Unknown relation: clean error status plus message.
        let bad = c("NoSuchRelation");
        let mut json2: *mut libc::c_char = std::ptr::null_mut();
        let status = vexlm_predict_json(pred, subject.as_ptr(), bad.as_ptr(), 5, false, &mut json2);
        assert_eq!(status, VexlmStatus::Model);
        let err = vexlm_last_error();
        assert!(CStr::from_ptr(err)
            .to_str()
            .unwrap()
            .contains("NoSuchRelation"));
        vexlm_string_free(err);

        vexlm_predictor_free(pred);
    }
}

#[test]
fn score_sample_through_ffi() {
    unsafe {
        let pred = c(r#"["a", "b", "c"]"#);
        let gold = c(r#"["a", "d"]"#);
        let (mut p, mut r, mut f1) = (0.0f64, 0.0f64, 0.0f64);
        let status = vexlm_score_sample(pred.as_ptr(), gold.as_ptr(), &mut p, &mut r, &mut f1);
        assert_eq!(status, VexlmStatus::Ok);
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
        assert!((r - 0.5).abs() < 1e-12);
        assert!((f1 - 0.4).abs() < 1e-12);

        let bad = c("not json");
        let status = vexlm_score_sample(bad.as_ptr(), gold.as_ptr(), &mut p, &mut r, &mut f1);
        assert_eq!(status, VexlmStatus::Parse);
    }
}
