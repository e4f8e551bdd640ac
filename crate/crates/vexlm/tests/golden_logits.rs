//! Frozen forward-pass output: a fixture model and sentence recorded once,
//! guarding the encoder math against regressions.
//!
//! Regenerate after an intentional numeric change with:
//! `cargo test -p vexlm --test golden_logits -- --ignored regenerate`

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use vexlm::model::{MlmModel, ModelConfig};
use vexlm::tokenizer::TokenId;

#[derive(Serialize, Deserialize)]
struct Golden {
    config: ModelConfig,
    ids: Vec<TokenId>,
    logits: Vec<Vec<f32>>,
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
        .join("logits.json")
}

fn fixture() -> (ModelConfig, Vec<TokenId>) {
    let config = ModelConfig {
        hidden: 16,
        layers: 2,
        heads: 4,
        ff: 32,
        max_seq_len: 16,
        vocab_size: 18,
        seed: 123,
    };
    // "some tokens around a mask": ids 5..18 are ordinary, 2 is MASK.
    let ids = vec![5, 11, 2, 9, 13, 17];
    (config, ids)
}

#[test]
fn forward_matches_frozen_logits() {
    let (config, ids) = fixture();
    let model: MlmModel<f32> = MlmModel::init(&config).unwrap();
    let logits = model.forward_ids(&ids).unwrap();

    let text = std::fs::read_to_string(golden_path()).expect("golden file present");
    let golden: Golden = serde_json::from_str(&text).unwrap();
    assert_eq!(golden.config, config, "fixture drifted from golden file");
    assert_eq!(golden.ids, ids);
    assert_eq!(golden.logits.len(), ids.len());
    for (i, row) in golden.logits.iter().enumerate() {
        assert_eq!(row.len(), config.vocab_size);
        for (j, want) in row.iter().enumerate() {
            let got = logits[[i, j]];
            assert!(
                (got - want).abs() < 1e-6,
                "logit [{i},{j}]: got {got}, frozen {want}"
            );
        }
    }
}

#[test]
#[ignore = "writes the golden file; run manually after intentional changes"]
fn regenerate() {
    let (config, ids) = fixture();
    let model: MlmModel<f32> = MlmModel::init(&config).unwrap();
    let logits = model.forward_ids(&ids).unwrap();
    let golden = Golden {
        config,
        ids,
        logits: logits.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    let path = golden_path();
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, serde_json::to_string_pretty(&golden).unwrap()).unwrap();
    eprintln!("wrote {}", path.display());
}
