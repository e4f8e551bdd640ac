//! Scratch probe: does the finite-difference estimate converge to the
//! analytic gradient as the step shrinks? Run with
//! `cargo run --release -p vexlm --example fd_probe`.

use vexlm::model::{MlmModel, ModelConfig, ParamSet};

fn main() {
    let cfg = ModelConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        ff: 16,
        max_seq_len: 12,
        vocab_size: 12,
        seed: 77,
    };
    let ids = vec![5u32, 2, 7, 2, 9, 10, 11, 6];
    let targets = vec![(1usize, 6u32), (3usize, 8u32)];

    for scale in [1.0f64, 10.0, 25.0] {
        let mut model: MlmModel<f64> = MlmModel::init(&cfg).unwrap();
        for s in model.params.tensor_slices_mut() {
            for v in s.iter_mut() {
                // Leave layer-norm scales at their init value of 1.
                if *v != 1.0 {
                    *v *= scale;
                }
            }
        }
        let (_, grads) = model.loss_and_grads(&ids, &targets).unwrap();
        let names = ParamSet::<f64>::tensor_names(cfg.layers);
        let ti = names.iter().position(|n| n == "layers.0.bo").unwrap();
        let ei = 7usize;
        let analytic = grads.tensor_slices()[ti][ei];
        println!("scale {scale}: analytic {analytic:.9e}");
        for h in [1e-3f64, 1e-4, 1e-5, 1e-6] {
            let mut probe = model.clone();
            probe.params.tensor_slices_mut()[ti][ei] += h;
            let up = probe.loss_at_positions(&ids, &targets).unwrap();
            probe.params.tensor_slices_mut()[ti][ei] -= 2.0 * h;
            let down = probe.loss_at_positions(&ids, &targets).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            println!("  h {h:e}: numeric {numeric:.9e} rel {rel:.3e}");
        }
    }
}
