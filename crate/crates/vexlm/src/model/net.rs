//! Encoder MLM: token+position embeddings, post-layer-norm transformer
//! blocks with bidirectional attention, and a linear projection back onto the
//! vocabulary. Forward and backward passes are hand-written over `ndarray`
//! and generic over `f32`/`f64` so gradient checks can run in double
//! precision against the same code path.

use ndarray::{s, Array1, Array2, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::tokenizer::{TokenId, TokenSequence, PAD_ID};

/// Element type of the model tensors.
pub trait Scalar: NdFloat {}
impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn fl<F: Scalar>(x: f64) -> F {
    F::from(x).expect("f64 convertible to scalar")
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {field}: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("sequence too long: {len} > max {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    IdOutOfRange { id: TokenId, vocab: usize },
    #[error("mask/target count mismatch: {masks} masks, {targets} targets")]
    TargetMismatch { masks: usize, targets: usize },
    #[error("shrinking unsupported: new vocab {new} < current {old}")]
    ShrinkUnsupported { new: usize, old: usize },
    #[error("target position {pos} out of range for sequence of {len}")]
    PositionOutOfRange { pos: usize, len: usize },
}

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LayerParams<F: Scalar> {
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln1_scale: Array1<F>,
    pub ln1_shift: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
    pub ln2_scale: Array1<F>,
    pub ln2_shift: Array1<F>,
}

impl<F: Scalar> LayerParams<F> {
    fn zeros(hidden: usize, ff: usize) -> Self {
        Self {
            wq: Array2::zeros((hidden, hidden)),
            bq: Array1::zeros(hidden),
            wk: Array2::zeros((hidden, hidden)),
            bk: Array1::zeros(hidden),
            wv: Array2::zeros((hidden, hidden)),
            bv: Array1::zeros(hidden),
            wo: Array2::zeros((hidden, hidden)),
            bo: Array1::zeros(hidden),
            ln1_scale: Array1::zeros(hidden),
            ln1_shift: Array1::zeros(hidden),
            w1: Array2::zeros((hidden, ff)),
            b1: Array1::zeros(ff),
            w2: Array2::zeros((ff, hidden)),
            b2: Array1::zeros(hidden),
            ln2_scale: Array1::zeros(hidden),
            ln2_shift: Array1::zeros(hidden),
        }
    }
}

/// All trainable tensors. Doubles as the gradient container.
#[derive(Debug, Clone)]
pub struct ParamSet<F: Scalar> {
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub out_proj: Array2<F>,
    pub out_bias: Array1<F>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            tok_emb: Array2::zeros((config.vocab_size, config.hidden)),
            pos_emb: Array2::zeros((config.max_seq_len, config.hidden)),
            layers: (0..config.layers)
                .map(|_| LayerParams::zeros(config.hidden, config.ff))
                .collect(),
            out_proj: Array2::zeros((config.vocab_size, config.hidden)),
            out_bias: Array1::zeros(config.vocab_size),
        }
    }

    /// Tensor names in canonical order (matches `tensor_slices`).
    pub fn tensor_names(layers: usize) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..layers {
            for t in [
                "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_scale", "ln1_shift", "w1",
                "b1", "w2", "b2", "ln2_scale", "ln2_shift",
            ] {
                names.push(format!("layers.{i}.{t}"));
            }
        }
        names.push("out_proj".to_string());
        names.push("out_bias".to_string());
        names
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![
            self.tok_emb.shape().to_vec(),
            self.pos_emb.shape().to_vec(),
        ];
        for l in &self.layers {
            shapes.extend([
                l.wq.shape().to_vec(),
                l.bq.shape().to_vec(),
                l.wk.shape().to_vec(),
                l.bk.shape().to_vec(),
                l.wv.shape().to_vec(),
                l.bv.shape().to_vec(),
                l.wo.shape().to_vec(),
                l.bo.shape().to_vec(),
                l.ln1_scale.shape().to_vec(),
                l.ln1_shift.shape().to_vec(),
                l.w1.shape().to_vec(),
                l.b1.shape().to_vec(),
                l.w2.shape().to_vec(),
                l.b2.shape().to_vec(),
                l.ln2_scale.shape().to_vec(),
                l.ln2_shift.shape().to_vec(),
            ]);
        }
        shapes.push(self.out_proj.shape().to_vec());
        shapes.push(self.out_bias.shape().to_vec());
        shapes
    }

    pub fn tensor_slices(&self) -> Vec<&[F]> {
        fn sl2<F: Scalar>(a: &Array2<F>) -> &[F] {
            a.as_slice().expect("standard layout")
        }
        fn sl1<F: Scalar>(a: &Array1<F>) -> &[F] {
            a.as_slice().expect("standard layout")
        }
        let mut out = vec![sl2(&self.tok_emb), sl2(&self.pos_emb)];
        for l in &self.layers {
            out.extend([
                sl2(&l.wq),
                sl1(&l.bq),
                sl2(&l.wk),
                sl1(&l.bk),
                sl2(&l.wv),
                sl1(&l.bv),
                sl2(&l.wo),
                sl1(&l.bo),
                sl1(&l.ln1_scale),
                sl1(&l.ln1_shift),
                sl2(&l.w1),
                sl1(&l.b1),
                sl2(&l.w2),
                sl1(&l.b2),
                sl1(&l.ln2_scale),
                sl1(&l.ln2_shift),
            ]);
        }
        out.push(sl2(&self.out_proj));
        out.push(sl1(&self.out_bias));
        out
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        out.push(self.tok_emb.as_slice_mut().expect("standard layout"));
        out.push(self.pos_emb.as_slice_mut().expect("standard layout"));
        for l in &mut self.layers {
            out.push(l.wq.as_slice_mut().expect("standard layout"));
            out.push(l.bq.as_slice_mut().expect("standard layout"));
            out.push(l.wk.as_slice_mut().expect("standard layout"));
            out.push(l.bk.as_slice_mut().expect("standard layout"));
            out.push(l.wv.as_slice_mut().expect("standard layout"));
            out.push(l.bv.as_slice_mut().expect("standard layout"));
            out.push(l.wo.as_slice_mut().expect("standard layout"));
            out.push(l.bo.as_slice_mut().expect("standard layout"));
            out.push(l.ln1_scale.as_slice_mut().expect("standard layout"));
            out.push(l.ln1_shift.as_slice_mut().expect("standard layout"));
            out.push(l.w1.as_slice_mut().expect("standard layout"));
            out.push(l.b1.as_slice_mut().expect("standard layout"));
            out.push(l.w2.as_slice_mut().expect("standard layout"));
            out.push(l.b2.as_slice_mut().expect("standard layout"));
            out.push(l.ln2_scale.as_slice_mut().expect("standard layout"));
            out.push(l.ln2_shift.as_slice_mut().expect("standard layout"));
        }
        out.push(self.out_proj.as_slice_mut().expect("standard layout"));
        out.push(self.out_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensor_slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensor_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct MlmModel<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
}

/// Cached activations for one forward pass.
struct LayerTrace<F: Scalar> {
    x_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    ln1: LnTrace<F>,
    y1: Array2<F>,
    h_pre: Array2<F>,
    h_act: Array2<F>,
    ln2: LnTrace<F>,
}

struct LnTrace<F: Scalar> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

pub struct Trace<F: Scalar> {
    ids: Vec<TokenId>,
    layers: Vec<LayerTrace<F>>,
    h: Array2<F>,
}

fn layer_norm<F: Scalar>(
    x: &Array2<F>,
    scale: &Array1<F>,
    shift: &Array1<F>,
) -> (Array2<F>, LnTrace<F>) {
    let (n, l) = x.dim();
    let mut xhat = Array2::zeros((n, l));
    let mut inv_std = Array1::zeros(n);
    let lf = fl::<F>(l as f64);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / lf;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / lf;
        let is = F::one() / (var + fl(LN_EPS)).sqrt();
        inv_std[i] = is;
        for j in 0..l {
            xhat[[i, j]] = (x[[i, j]] - mean) * is;
        }
    }
    let y = &xhat * &scale.view().insert_axis(Axis(0)) + &shift.view().insert_axis(Axis(0));
    (y, LnTrace { xhat, inv_std })
}

/// dL/dx for layer norm plus parameter gradient accumulation.
fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    trace: &LnTrace<F>,
    scale: &Array1<F>,
    dscale: &mut Array1<F>,
    dshift: &mut Array1<F>,
) -> Array2<F> {
    let (n, l) = dy.dim();
    let lf = fl::<F>(l as f64);
    *dscale = &*dscale + &(dy * &trace.xhat).sum_axis(Axis(0));
    *dshift = &*dshift + &dy.sum_axis(Axis(0));
    let dxhat = dy * &scale.view().insert_axis(Axis(0));
    let mut dx = Array2::zeros((n, l));
    for i in 0..n {
        let dxh = dxhat.row(i);
        let xh = trace.xhat.row(i);
        let mean_dxh = dxh.sum() / lf;
        let mean_dxh_xh = dxh
            .iter()
            .zip(xh.iter())
            .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
            / lf;
        for j in 0..l {
            dx[[i, j]] = trace.inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<F: Scalar>(x: F) -> F {
    let c = fl::<F>(GELU_C);
    let a = fl::<F>(GELU_A);
    let u = c * (x + a * x * x * x);
    fl::<F>(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = fl::<F>(GELU_C);
    let a = fl::<F>(GELU_A);
    let half = fl::<F>(0.5);
    let three = fl::<F>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

/// Numerically stable softmax over the last axis, in place.
fn softmax_rows<F: Scalar>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

impl<F: Scalar> MlmModel<F> {
    /// Deterministic scaled-normal initialization: equal seeds give
    /// bit-identical models.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = StandardNormal;
        let mut draw = |arr: &mut Array2<F>| {
            for v in arr.iter_mut() {
                let x: f64 = normal.sample(&mut rng);
                *v = fl(x * INIT_STD);
            }
        };
        let mut params = ParamSet::zeros(config);
        draw(&mut params.tok_emb);
        draw(&mut params.pos_emb);
        for l in &mut params.layers {
            draw(&mut l.wq);
            draw(&mut l.wk);
            draw(&mut l.wv);
            draw(&mut l.wo);
            draw(&mut l.w1);
            draw(&mut l.w2);
            l.ln1_scale.fill(F::one());
            l.ln2_scale.fill(F::one());
        }
        draw(&mut params.out_proj);
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::IdOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Full forward pass returning per-position logits over the vocabulary.
    pub fn forward_logits(&self, seq: &TokenSequence) -> Result<Array2<F>, ModelError> {
        Ok(self.forward_trace(&seq.ids)?.0)
    }

    pub fn forward_ids(&self, ids: &[TokenId]) -> Result<Array2<F>, ModelError> {
        Ok(self.forward_trace(ids)?.0)
    }

    fn forward_trace(&self, ids: &[TokenId]) -> Result<(Array2<F>, Trace<F>), ModelError> {
        self.check_ids(ids)?;
        let n = ids.len();
        let l = self.config.hidden;
        let heads = self.config.heads;
        let d = self.config.head_dim();
        let scale = fl::<F>(1.0 / (d as f64).sqrt());

        let mut x = Array2::zeros((n, l));
        for (i, &id) in ids.iter().enumerate() {
            let e = self.params.tok_emb.row(id as usize);
            let p = self.params.pos_emb.row(i);
            for j in 0..l {
                x[[i, j]] = e[j] + p[j];
            }
        }

        // Additive mask: PAD positions contribute nothing as keys.
        let key_mask: Vec<F> = ids
            .iter()
            .map(|&id| if id == PAD_ID { fl(MASK_NEG) } else { F::zero() })
            .collect();

        let mut layer_traces = Vec::with_capacity(self.config.layers);
        for lp in &self.params.layers {
            let x_in = x.clone();
            let q = x.dot(&lp.wq) + &lp.bq.view().insert_axis(Axis(0));
            let k = x.dot(&lp.wk) + &lp.bk.view().insert_axis(Axis(0));
            let v = x.dot(&lp.wv) + &lp.bv.view().insert_axis(Axis(0));

            let mut ctx = Array2::zeros((n, l));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * d..(h + 1) * d];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * scale);
                for mut row in scores.rows_mut() {
                    for (j, sv) in row.iter_mut().enumerate() {
                        *sv = *sv + key_mask[j];
                    }
                }
                softmax_rows(&mut scores);
                let ctx_h = scores.dot(&vh);
                ctx.slice_mut(cols).assign(&ctx_h);
                probs.push(scores);
            }

            let attn_out = ctx.dot(&lp.wo) + &lp.bo.view().insert_axis(Axis(0));
            let res1 = &x_in + &attn_out;
            let (y1, ln1) = layer_norm(&res1, &lp.ln1_scale, &lp.ln1_shift);

            let h_pre = y1.dot(&lp.w1) + &lp.b1.view().insert_axis(Axis(0));
            let h_act = h_pre.mapv(gelu);
            let ff_out = h_act.dot(&lp.w2) + &lp.b2.view().insert_axis(Axis(0));
            let res2 = &y1 + &ff_out;
            let (y2, ln2) = layer_norm(&res2, &lp.ln2_scale, &lp.ln2_shift);

            layer_traces.push(LayerTrace {
                x_in,
                q,
                k,
                v,
                probs,
                ctx,
                ln1,
                y1,
                h_pre,
                h_act,
                ln2,
            });
            x = y2;
        }

        let logits = x.dot(&self.params.out_proj.t()) + &self.params.out_bias.view().insert_axis(Axis(0));
        let trace = Trace {
            ids: ids.to_vec(),
            layers: layer_traces,
            h: x,
        };
        Ok((logits, trace))
    }

    /// Mean cross-entropy over the sequence's mask positions. `targets[i]`
    /// is the original token behind `seq.mask_positions[i]`.
    pub fn mlm_loss(&self, seq: &TokenSequence, targets: &[TokenId]) -> Result<F, ModelError> {
        if seq.mask_positions.len() != targets.len() {
            return Err(ModelError::TargetMismatch {
                masks: seq.mask_positions.len(),
                targets: targets.len(),
            });
        }
        let pairs: Vec<(usize, TokenId)> = seq
            .mask_positions
            .iter()
            .copied()
            .zip(targets.iter().copied())
            .collect();
        self.loss_at_positions(&seq.ids, &pairs)
    }

    /// Mean cross-entropy at arbitrary (position, target) pairs. Positions
    /// not listed contribute nothing.
    pub fn loss_at_positions(
        &self,
        ids: &[TokenId],
        targets: &[(usize, TokenId)],
    ) -> Result<F, ModelError> {
        let (logits, _) = self.forward_trace(ids)?;
        self.loss_from_logits(&logits, targets, ids.len())
    }

    fn loss_from_logits(
        &self,
        logits: &Array2<F>,
        targets: &[(usize, TokenId)],
        n: usize,
    ) -> Result<F, ModelError> {
        if targets.is_empty() {
            return Ok(F::zero());
        }
        let mut total = F::zero();
        for &(pos, target) in targets {
            if pos >= n {
                return Err(ModelError::PositionOutOfRange { pos, len: n });
            }
            if target as usize >= self.config.vocab_size {
                return Err(ModelError::IdOutOfRange {
                    id: target,
                    vocab: self.config.vocab_size,
                });
            }
            let row = logits.row(pos);
            let max = row.fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
            let lse = max
                + row
                    .fold(F::zero(), |acc, &v| acc + (v - max).exp())
                    .ln();
            total = total + (lse - row[target as usize]);
        }
        Ok(total / fl(targets.len() as f64))
    }

    /// Loss plus gradients for every parameter tensor.
    pub fn loss_and_grads(
        &self,
        ids: &[TokenId],
        targets: &[(usize, TokenId)],
    ) -> Result<(F, ParamSet<F>), ModelError> {
        let (logits, trace) = self.forward_trace(ids)?;
        let loss = self.loss_from_logits(&logits, targets, ids.len())?;

        let n = ids.len();
        let v = self.config.vocab_size;
        let mut dlogits = Array2::zeros((n, v));
        if !targets.is_empty() {
            let inv_m = fl::<F>(1.0 / targets.len() as f64);
            for &(pos, target) in targets {
                let prob = softmax_vec(logits.row(pos).as_slice().expect("row contiguous"));
                for j in 0..v {
                    dlogits[[pos, j]] = dlogits[[pos, j]] + prob[j] * inv_m;
                }
                dlogits[[pos, target as usize]] = dlogits[[pos, target as usize]] - inv_m;
            }
        }

        let grads = self.backward(&trace, &dlogits);
        Ok((loss, grads))
    }

    fn backward(&self, trace: &Trace<F>, dlogits: &Array2<F>) -> ParamSet<F> {
        let cfg = &self.config;
        let n = trace.ids.len();
        let l = cfg.hidden;
        let heads = cfg.heads;
        let d = cfg.head_dim();
        let scale = fl::<F>(1.0 / (d as f64).sqrt());
        let mut g = ParamSet::zeros(cfg);

        // Output projection: logits = h . out_projᵀ + bias
        g.out_proj = dlogits.t().dot(&trace.h);
        g.out_bias = dlogits.sum_axis(Axis(0));
        let mut dx = dlogits.dot(&self.params.out_proj);

        for (li, lp) in self.params.layers.iter().enumerate().rev() {
            let t = &trace.layers[li];
            let gl = &mut g.layers[li];

            // y2 = LN2(y1 + ff_out)
            let dres2 = layer_norm_backward(&dx, &t.ln2, &lp.ln2_scale, &mut gl.ln2_scale, &mut gl.ln2_shift);
            let mut dy1 = dres2.clone();
            let dff_out = dres2;

            // ff_out = gelu(y1 . w1 + b1) . w2 + b2
            let dh_act = dff_out.dot(&lp.w2.t());
            gl.w2 = t.h_act.t().dot(&dff_out);
            gl.b2 = dff_out.sum_axis(Axis(0));
            let dh_pre = &dh_act * &t.h_pre.mapv(gelu_grad);
            gl.w1 = t.y1.t().dot(&dh_pre);
            gl.b1 = dh_pre.sum_axis(Axis(0));
            dy1 = dy1 + dh_pre.dot(&lp.w1.t());

            // y1 = LN1(x_in + attn_out)
            let dres1 = layer_norm_backward(&dy1, &t.ln1, &lp.ln1_scale, &mut gl.ln1_scale, &mut gl.ln1_shift);
            let mut dx_in = dres1.clone();
            let dattn_out = dres1;

            // attn_out = ctx . wo + bo
            let dctx = dattn_out.dot(&lp.wo.t());
            gl.wo = t.ctx.t().dot(&dattn_out);
            gl.bo = dattn_out.sum_axis(Axis(0));

            let mut dq = Array2::zeros((n, l));
            let mut dk = Array2::zeros((n, l));
            let mut dv = Array2::zeros((n, l));
            for h in 0..heads {
                let cols = s![.., h * d..(h + 1) * d];
                let p = &t.probs[h];
                let qh = t.q.slice(cols);
                let kh = t.k.slice(cols);
                let vh = t.v.slice(cols);
                let dctx_h = dctx.slice(cols);

                let dp = dctx_h.dot(&vh.t());
                dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));

                // softmax backward per row: ds = p * (dp - <dp, p>)
                let mut ds = Array2::zeros((n, n));
                for i in 0..n {
                    let dot = dp
                        .row(i)
                        .iter()
                        .zip(p.row(i).iter())
                        .fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                    for j in 0..n {
                        ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
                    }
                }
                ds.mapv_inplace(|x| x * scale);
                dq.slice_mut(cols).assign(&ds.dot(&kh));
                dk.slice_mut(cols).assign(&ds.t().dot(&qh));
            }

            gl.wq = t.x_in.t().dot(&dq);
            gl.bq = dq.sum_axis(Axis(0));
            gl.wk = t.x_in.t().dot(&dk);
            gl.bk = dk.sum_axis(Axis(0));
            gl.wv = t.x_in.t().dot(&dv);
            gl.bv = dv.sum_axis(Axis(0));
            dx_in = dx_in + dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());

            dx = dx_in;
        }

        // Embeddings: x0[i] = tok_emb[ids[i]] + pos_emb[i]
        for (i, &id) in trace.ids.iter().enumerate() {
            for j in 0..l {
                g.tok_emb[[id as usize, j]] = g.tok_emb[[id as usize, j]] + dx[[i, j]];
                g.pos_emb[[i, j]] = g.pos_emb[[i, j]] + dx[[i, j]];
            }
        }
        g
    }

    /// Grow the vocabulary-indexed tensors. The first `old_v` rows are
    /// bit-identical; new rows are zero until a recode pass fills them.
    pub fn resize_vocab(&self, new_v: usize) -> Result<MlmModel<F>, ModelError> {
        let old_v = self.config.vocab_size;
        if new_v < old_v {
            return Err(ModelError::ShrinkUnsupported {
                new: new_v,
                old: old_v,
            });
        }
        let mut config = self.config.clone();
        config.vocab_size = new_v;
        let l = config.hidden;
        let mut tok_emb = Array2::zeros((new_v, l));
        tok_emb.slice_mut(s![..old_v, ..]).assign(&self.params.tok_emb);
        let mut out_proj = Array2::zeros((new_v, l));
        out_proj
            .slice_mut(s![..old_v, ..])
            .assign(&self.params.out_proj);
        let mut out_bias = Array1::zeros(new_v);
        out_bias.slice_mut(s![..old_v]).assign(&self.params.out_bias);
        Ok(MlmModel {
            config,
            params: ParamSet {
                tok_emb,
                pos_emb: self.params.pos_emb.clone(),
                layers: self.params.layers.clone(),
                out_proj,
                out_bias,
            },
        })
    }
}

/// Softmax probabilities of one logits row.
pub fn softmax_vec<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut out: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: F = out.iter().fold(F::zero(), |a, &b| a + b);
    for v in &mut out {
        *v = *v / sum;
    }
    out
}
