//! Optimization loop: Adam over hand-computed gradients, deterministic under
//! seed, with divergence detection and checkpointing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::MaskedInstance;
use crate::model::{save_checkpoint, MlmModel, ModelError, ParamSet};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("no training instances")]
    NoInstances,
    #[error("divergence at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::model::CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Pretrain,
    FineTune,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub regime: Regime,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub grad_clip: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Published pretraining recipe: lr 2e-5 for 20 epochs.
    pub fn paper_pretrain(seed: u64) -> Self {
        Self {
            learning_rate: 2e-5,
            epochs: 20,
            batch_size: 16,
            seed,
            regime: Regime::Pretrain,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: Some(1.0),
        }
    }

    /// Published fine-tuning recipe: lr 2e-5 for 5 epochs.
    pub fn paper_finetune(seed: u64) -> Self {
        Self {
            learning_rate: 2e-5,
            epochs: 5,
            batch_size: 16,
            seed,
            regime: Regime::FineTune,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam state aligned with the model's canonical tensor order.
struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &ParamSet<f32>, config: &TrainConfig) -> Self {
        let shapes: Vec<usize> = params.tensor_slices().iter().map(|s| s.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
        }
    }

    fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr: f64) {
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let eps = self.eps as f32;
        let bias1 = 1.0 - (self.beta1.powi(self.t as i32)) as f32;
        let bias2 = 1.0 - (self.beta2.powi(self.t as i32)) as f32;
        let lr = lr as f32;
        let mut slices = params.tensor_slices_mut();
        let gslices = grads.tensor_slices();
        for ((p, g), (m, v)) in slices
            .iter_mut()
            .zip(gslices)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn add_scaled(acc: &mut ParamSet<f32>, other: &ParamSet<f32>, scale: f32) {
    let mut a = acc.tensor_slices_mut();
    let b = other.tensor_slices();
    for (x, y) in a.iter_mut().zip(b) {
        for i in 0..x.len() {
            x[i] += scale * y[i];
        }
    }
}

fn global_norm(grads: &ParamSet<f32>) -> f64 {
    grads
        .tensor_slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

fn scale_params(p: &mut ParamSet<f32>, factor: f32) {
    for s in p.tensor_slices_mut() {
        for v in s.iter_mut() {
            *v *= factor;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MlmModel<f32>,
    pub history: Vec<EpochLoss>,
}

/// Train on masked instances. Shuffling and reduction order are fixed by the
/// seed, so equal inputs give bit-identical models. Per-sample gradients run
/// in parallel but reduce sequentially in sample order.
pub fn train(
    model: MlmModel<f32>,
    instances: &[MaskedInstance],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if instances.is_empty() {
        return Err(TrainError::NoInstances);
    }
    let mut model = model;
    for inst in instances {
        for &id in &inst.input.ids {
            if id as usize >= model.config.vocab_size {
                return Err(TrainError::Model(ModelError::IdOutOfRange {
                    id,
                    vocab: model.config.vocab_size,
                }));
            }
        }
    }

    let mut adam = Adam::new(&model.params, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<(f32, ParamSet<f32>), ModelError>> = chunk
                .par_iter()
                .map(|&i| {
                    let inst = &instances[i];
                    model.loss_and_grads(&inst.input.ids, &inst.targets)
                })
                .collect();

            let mut batch_grads = ParamSet::zeros(&model.config);
            let mut batch_loss = 0.0f64;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss as f64;
                add_scaled(&mut batch_grads, &grads, 1.0 / chunk.len() as f32);
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                });
            }
            if let Some(clip) = config.grad_clip {
                let norm = global_norm(&batch_grads);
                if norm > clip {
                    scale_params(&mut batch_grads, (clip / norm) as f32);
                }
            }
            adam.step(&mut model.params, &batch_grads, config.learning_rate);
            if !model.params.all_finite() {
                return Err(TrainError::Divergence {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                });
            }
            epoch_loss += batch_loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean = epoch_loss / seen as f64;
        log::info!("epoch {}: mean loss {mean:.6}", epoch + 1);
        history.push(EpochLoss {
            epoch: epoch + 1,
            loss: mean,
        });
    }

    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&model, dir)?;
    }
    Ok(TrainOutcome { model, history })
}

/// Mean loss over instances without updating anything.
pub fn evaluate_mlm(model: &MlmModel<f32>, instances: &[MaskedInstance]) -> Result<f64, TrainError> {
    if instances.is_empty() {
        return Err(TrainError::NoInstances);
    }
    let losses: Vec<Result<f32, ModelError>> = instances
        .par_iter()
        .map(|inst| model.loss_at_positions(&inst.input.ids, &inst.targets))
        .collect();
    let mut total = 0.0f64;
    for l in losses {
        total += l? as f64;
    }
    Ok(total / instances.len() as f64)
}

/// `epoch,split,loss` CSV rows.
pub fn write_loss_history(
    path: &Path,
    split: &str,
    history: &[EpochLoss],
) -> Result<(), std::io::Error> {
    let mut out = String::from("epoch,split,loss\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, split, h.loss));
    }
    std::fs::write(path, out)
}

/// Resolve a `--preset` name to its train config.
pub fn preset(name: &str, seed: u64) -> Option<TrainConfig> {
    match name {
        "paper-pretrain" => Some(TrainConfig::paper_pretrain(seed)),
        "paper-finetune" => Some(TrainConfig::paper_finetune(seed)),
        _ => None,
    }
}

/// Checkpoint path helper used by pipeline stages.
pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::InstanceOrigin;
    use crate::model::ModelConfig;
    use crate::tokenizer::{TokenSequence, MASK_ID};

    fn tiny_model(v: usize, seed: u64) -> MlmModel<f32> {
        let cfg = ModelConfig {
            hidden: 16,
            layers: 1,
            heads: 2,
            ff: 32,
            max_seq_len: 16,
            vocab_size: v,
            seed,
        };
        MlmModel::init(&cfg).unwrap()
    }

    fn instance(ids: Vec<u32>, targets: Vec<(usize, u32)>) -> MaskedInstance {
        let starts = vec![true; ids.len()];
        MaskedInstance {
            input: TokenSequence::new(ids, starts),
            targets,
            origin: InstanceOrigin::Pretrain,
        }
    }

    fn overfit_config(steps_as_epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: steps_as_epochs,
            batch_size: 1,
            seed: 3,
            regime: Regime::FineTune,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let model = tiny_model(12, 1);
        let insts = vec![instance(vec![5, MASK_ID, 7], vec![(1, 6)])];
        let cfg = overfit_config(0);
        assert!(matches!(
            train(model, &insts, &cfg, None).unwrap_err(),
            TrainError::InvalidConfig(_)
        ));
    }

    #[test]
    fn empty_instances_rejected() {
        let model = tiny_model(12, 1);
        let cfg = overfit_config(1);
        assert!(matches!(
            train(model, &[], &cfg, None).unwrap_err(),
            TrainError::NoInstances
        ));
    }

    #[test]
    fn single_instance_overfits() {
        // One instance, lr 1e-2, 200 steps: the model memorizes it.
        let model = tiny_model(12, 1);
        let insts = vec![instance(vec![5, MASK_ID, 7, 8], vec![(1, 6)])];
        let initial = evaluate_mlm(&model, &insts).unwrap();
        let out = train(model, &insts, &overfit_config(200), None).unwrap();
        let final_loss = evaluate_mlm(&out.model, &insts).unwrap();
        assert!(
            final_loss < 0.1 * initial,
            "final {final_loss} vs initial {initial}"
        );
        assert!(final_loss < 0.1);
    }

    #[test]
    fn loss_history_deterministic_under_seed() {
        let insts: Vec<MaskedInstance> = (0..8)
            .map(|i| instance(vec![5 + (i % 3), MASK_ID, 7], vec![(1, 6 + (i % 2))]))
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..overfit_config(3)
        };
        let a = train(tiny_model(12, 1), &insts, &cfg, None).unwrap();
        let b = train(tiny_model(12, 1), &insts, &cfg, None).unwrap();
        let la: Vec<f64> = a.history.iter().map(|h| h.loss).collect();
        let lb: Vec<f64> = b.history.iter().map(|h| h.loss).collect();
        assert_eq!(la, lb);
        // Bit-identical parameters too.
        for (x, y) in a
            .model
            .params
            .tensor_slices()
            .iter()
            .zip(b.model.params.tensor_slices())
        {
            let bx: Vec<u32> = x.iter().map(|v| v.to_bits()).collect();
            let by: Vec<u32> = y.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
    }

    #[test]
    fn evaluate_untrained_near_uniform() {
        let model = tiny_model(12, 5);
        let insts = vec![
            instance(vec![5, MASK_ID, 7], vec![(1, 6)]),
            instance(vec![8, MASK_ID, 9], vec![(1, 10)]),
        ];
        let loss = evaluate_mlm(&model, &insts).unwrap();
        let uniform = (12f64).ln();
        assert!(
            (loss - uniform).abs() / uniform < 0.15,
            "loss {loss} vs ln(12) {uniform}"
        );
    }

    #[test]
    fn evaluate_is_pure() {
        let model = tiny_model(12, 5);
        let insts = vec![instance(vec![5, MASK_ID, 7], vec![(1, 6)])];
        let a = evaluate_mlm(&model, &insts).unwrap();
        let b = evaluate_mlm(&model, &insts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_emits_checkpoint() {
        let model = tiny_model(12, 1);
        let insts = vec![instance(vec![5, MASK_ID, 7], vec![(1, 6)])];
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let out = train(model, &insts, &overfit_config(2), Some(&ckpt)).unwrap();
        let loaded = crate::model::load_checkpoint(&ckpt).unwrap();
        for (x, y) in out
            .model
            .params
            .tensor_slices()
            .iter()
            .zip(loaded.params.tensor_slices())
        {
            assert_eq!(
                x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn loss_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_history(
            &path,
            "pretrain",
            &[
                EpochLoss { epoch: 1, loss: 2.5 },
                EpochLoss { epoch: 2, loss: 1.25 },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,split,loss\n1,pretrain,2.5\n2,pretrain,1.25\n");
    }

    #[test]
    fn presets_match_published_recipe() {
        let p = preset("paper-pretrain", 1).unwrap();
        assert_eq!(p.learning_rate, 2e-5);
        assert_eq!(p.epochs, 20);
        let f = preset("paper-finetune", 1).unwrap();
        assert_eq!(f.learning_rate, 2e-5);
        assert_eq!(f.epochs, 5);
        assert!(preset("nonsense", 1).is_none());
    }
}
