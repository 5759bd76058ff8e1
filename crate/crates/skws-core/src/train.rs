//! Manual backpropagation through the full model, the Adam optimizer, the
//! training loop, and a finite-difference gradient checker.
//!
//! The backward pass consumes the tape recorded by the forward pass and
//! mirrors it step for step in reverse. Gradients live in a second
//! `ModelParams`, so names and shapes line up with the parameters by
//! construction. Mask-blocked attention entries carry softmax weight zero,
//! which kills their gradient exactly; no separate masking is needed on the
//! way back.

use std::time::Instant;

use crate::attention::{AttentionProjections, AttnTape};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::layers::{Dense, Lstm, LstmTape};
use crate::losses::{CtcTarget, FrameCeTarget};
use crate::model::{
    forward_full, forward_with_tape, mtl_loss, phrase_positive_prob, EncoderLayerParams,
    ForwardOutput, LayerTape, ModelConfig, ModelParams, MtlBreakdown,
};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

fn col_sums<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, m.cols());
    for t in 0..m.rows() {
        let row = m.row(t);
        let acc = out.row_mut(0);
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    out
}

fn slice_cols<T: Scalar>(m: &Matrix<T>, lo: usize, hi: usize) -> Matrix<T> {
    Matrix::from_fn(m.rows(), hi - lo, |t, c| m.at(t, lo + c))
}

fn add_cols<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>, off: usize) {
    for t in 0..src.rows() {
        for c in 0..src.cols() {
            dst.set(t, off + c, dst.at(t, off + c) + src.at(t, c));
        }
    }
}

/// Dense backward: fills the weight and bias gradients, returns the input
/// gradient.
fn dense_backward<T: Scalar>(
    d_out: &Matrix<T>,
    input: &Matrix<T>,
    dense: &Dense<T>,
    g: &mut Dense<T>,
) -> Result<Matrix<T>> {
    g.w = input.transpose().matmul(d_out)?;
    g.b = col_sums(d_out);
    d_out.matmul(&dense.w.transpose())
}

/// LayerNorm backward from cached normalized rows and inverse stds:
/// `dx = inv_std * (dy*g - mean(dy*g) - x_hat * mean(dy*g * x_hat))`,
/// means over the feature axis. Returns `(d_x, d_gamma, d_beta)`.
fn ln_backward<T: Scalar>(
    d_y: &Matrix<T>,
    x_hat: &Matrix<T>,
    inv_std: &[T],
    gamma: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (rows, cols) = d_y.shape();
    let mut d_x = Matrix::zeros(rows, cols);
    let mut d_gamma = Matrix::zeros(1, cols);
    let mut d_beta = Matrix::zeros(1, cols);
    let n = T::from_f64(cols as f64);
    for t in 0..rows {
        let mut sum_dyg = T::zero();
        let mut sum_dyg_hat = T::zero();
        for c in 0..cols {
            let dy = d_y.at(t, c);
            let hat = x_hat.at(t, c);
            let dyg = dy * gamma.at(0, c);
            sum_dyg = sum_dyg + dyg;
            sum_dyg_hat = sum_dyg_hat + dyg * hat;
            d_gamma.set(0, c, d_gamma.at(0, c) + dy * hat);
            d_beta.set(0, c, d_beta.at(0, c) + dy);
        }
        let m1 = sum_dyg / n;
        let m2 = sum_dyg_hat / n;
        for c in 0..cols {
            let dyg = d_y.at(t, c) * gamma.at(0, c);
            d_x.set(t, c, inv_std[t] * (dyg - m1 - x_hat.at(t, c) * m2));
        }
    }
    (d_x, d_gamma, d_beta)
}

/// Multi-head attention backward. `d_out` is the gradient at the output
/// projection; returns the gradient at the attention input.
fn attention_backward<T: Scalar>(
    d_out: &Matrix<T>,
    tape: &AttnTape<T>,
    proj: &AttentionProjections<T>,
    attn_in: &Matrix<T>,
    g: &mut AttentionProjections<T>,
) -> Result<Matrix<T>> {
    let n_heads = proj.n_heads;
    let hd = proj.head_dim();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    g.w_o = tape.heads.transpose().matmul(d_out)?;
    let d_heads = d_out.matmul(&proj.w_o.transpose())?;

    let q_rows = tape.q.rows();
    let k_rows = tape.k.rows();
    let mut d_q = Matrix::zeros(q_rows, tape.q.cols());
    let mut d_k = Matrix::zeros(k_rows, tape.k.cols());
    let mut d_v = Matrix::zeros(k_rows, tape.v.cols());

    for h in 0..n_heads {
        let off = h * hd;
        let d_o_h = slice_cols(&d_heads, off, off + hd);
        let w = &tape.weights[h];
        let v_h = slice_cols(&tape.v, off, off + hd);
        let d_w = d_o_h.matmul(&v_h.transpose())?;
        let d_v_h = w.transpose().matmul(&d_o_h)?;

        // Softmax backward row by row. Blocked entries have weight exactly
        // zero, so their logit gradient is exactly zero.
        let mut d_s = Matrix::zeros(q_rows, k_rows);
        for t in 0..q_rows {
            let mut dot = T::zero();
            for u in 0..k_rows {
                dot = dot + d_w.at(t, u) * w.at(t, u);
            }
            for u in 0..k_rows {
                d_s.set(t, u, w.at(t, u) * (d_w.at(t, u) - dot));
            }
        }
        let q_h = slice_cols(&tape.q, off, off + hd);
        let k_h = slice_cols(&tape.k, off, off + hd);
        let d_q_h = d_s.matmul(&k_h)?.scale(scale);
        let d_k_h = d_s.transpose().matmul(&q_h)?.scale(scale);
        add_cols(&mut d_q, &d_q_h, off);
        add_cols(&mut d_k, &d_k_h, off);
        add_cols(&mut d_v, &d_v_h, off);
    }

    g.w_q = attn_in.transpose().matmul(&d_q)?;
    g.w_k = attn_in.transpose().matmul(&d_k)?;
    g.w_v = attn_in.transpose().matmul(&d_v)?;
    d_q.matmul(&proj.w_q.transpose())?
        .add(&d_k.matmul(&proj.w_k.transpose())?)?
        .add(&d_v.matmul(&proj.w_v.transpose())?)
}

/// One encoder layer backward: pre-norm block with two residual sums.
fn layer_backward<T: Scalar>(
    d_out: &Matrix<T>,
    tape: &LayerTape<T>,
    layer: &EncoderLayerParams<T>,
    g: &mut EncoderLayerParams<T>,
) -> Result<Matrix<T>> {
    // x_out = res1 + dropout(ffn(ln2(res1)))
    let d_ffn_out = match &tape.ffn_drop {
        Some(m) => d_out.hadamard(m)?,
        None => d_out.clone(),
    };
    let d_a = dense_backward(&d_ffn_out, &tape.ffn_a, &layer.ffn.outer, &mut g.ffn.outer)?;
    let mut d_z = d_a;
    for t in 0..d_z.rows() {
        for c in 0..d_z.cols() {
            if tape.ffn_z.at(t, c) <= T::zero() {
                d_z.set(t, c, T::zero());
            }
        }
    }
    let d_ln2_out = dense_backward(&d_z, &tape.ln2_out, &layer.ffn.inner, &mut g.ffn.inner)?;
    let (d_res1_ln, d_g2, d_b2) =
        ln_backward(&d_ln2_out, &tape.ln2_hat, &tape.ln2_inv, &layer.ln2.gamma);
    g.ln2.gamma = d_g2;
    g.ln2.beta = d_b2;
    let d_res1 = d_out.add(&d_res1_ln)?;

    // res1 = x_in + dropout(attn(ln1(x_in)))
    let d_attn_out = match &tape.attn_drop {
        Some(m) => d_res1.hadamard(m)?,
        None => d_res1.clone(),
    };
    let d_ln1_out =
        attention_backward(&d_attn_out, &tape.attn, &layer.attn, &tape.ln1_out, &mut g.attn)?;
    let (d_x_ln, d_g1, d_b1) =
        ln_backward(&d_ln1_out, &tape.ln1_hat, &tape.ln1_inv, &layer.ln1.gamma);
    g.ln1.gamma = d_g1;
    g.ln1.beta = d_b1;
    d_res1.add(&d_x_ln)
}

/// Backpropagation through time over the tape recorded by the forward pass.
/// `d_hidden` is the upstream gradient at every step's hidden output.
/// Returns the gradient at the LSTM inputs.
fn lstm_backward<T: Scalar>(
    d_hidden: &Matrix<T>,
    x: &Matrix<T>,
    lstm: &Lstm<T>,
    tape: &LstmTape<T>,
    g: &mut Lstm<T>,
) -> Result<Matrix<T>> {
    let frames = x.rows();
    let hidden = lstm.hidden();
    let mut d_x = Matrix::zeros(frames, x.cols());
    let mut dh_next = vec![T::zero(); hidden];
    let mut dc_next = vec![T::zero(); hidden];
    let mut d_z = vec![T::zero(); 4 * hidden];
    let one = T::one();
    for t in (0..frames).rev() {
        let gates = tape.gates.row(t);
        let c_row = tape.cells.row(t);
        let c_prev: &[T] = if t == 0 { &tape.c0 } else { tape.cells.row(t - 1) };
        let h_prev: &[T] = if t == 0 { &tape.h0 } else { tape.hiddens.row(t - 1) };
        for j in 0..hidden {
            let i = gates[j];
            let f = gates[hidden + j];
            let gg = gates[2 * hidden + j];
            let o = gates[3 * hidden + j];
            let tc = c_row[j].tanh();
            let dh = d_hidden.at(t, j) + dh_next[j];
            let dc = dc_next[j] + dh * o * (one - tc * tc);
            d_z[j] = dc * gg * i * (one - i);
            d_z[hidden + j] = dc * c_prev[j] * f * (one - f);
            d_z[2 * hidden + j] = dc * i * (one - gg * gg);
            d_z[3 * hidden + j] = dh * tc * o * (one - o);
            dc_next[j] = dc * f;
        }
        for (j, &xv) in x.row(t).iter().enumerate() {
            for (r, &dz) in g.w_ih.row_mut(j).iter_mut().zip(&d_z) {
                *r = *r + xv * dz;
            }
        }
        for (j, &hv) in h_prev.iter().enumerate() {
            for (r, &dz) in g.w_hh.row_mut(j).iter_mut().zip(&d_z) {
                *r = *r + hv * dz;
            }
        }
        for (b, &dz) in g.bias.row_mut(0).iter_mut().zip(&d_z) {
            *b = *b + dz;
        }
        for (j, slot) in d_x.row_mut(t).iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&w, &dz) in lstm.w_ih.row(j).iter().zip(&d_z) {
                acc = acc + w * dz;
            }
            *slot = acc;
        }
        for (j, slot) in dh_next.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&w, &dz) in lstm.w_hh.row(j).iter().zip(&d_z) {
                acc = acc + w * dz;
            }
            *slot = acc;
        }
    }
    Ok(d_x)
}

/// Forward pass, losses, and a full gradient set for one utterance.
#[derive(Debug, Clone)]
pub struct BackwardResult<T> {
    pub output: ForwardOutput<T>,
    pub losses: MtlBreakdown<T>,
    pub grads: ModelParams<T>,
}

/// One labeled utterance end to end: forward with tape, multi-task loss,
/// then manual backward. An infeasible CTC target yields an infinite loss
/// with all-zero gradients rather than an error.
pub fn backward<T: Scalar>(
    features: &Matrix<T>,
    ctc_target: &CtcTarget,
    phrase_target: FrameCeTarget,
    params: &ModelParams<T>,
    config: &ModelConfig,
    rng: Option<&mut SplitMix64>,
) -> Result<BackwardResult<T>> {
    let (output, tape) = forward_with_tape(features, params, config, true, rng)?;
    let losses = mtl_loss(&output, ctc_target, phrase_target, config)?;
    let mut grads = params.zeros_like();
    if !losses.total.as_f64().is_finite() {
        return Ok(BackwardResult {
            output,
            losses,
            grads,
        });
    }

    let d_phrase_in = {
        let phrase_in: &Matrix<T> = match &tape.lstm {
            Some(l) => &l.hiddens,
            None => &output.embeddings,
        };
        dense_backward(&losses.d_phrase_logits, phrase_in, &params.phrase, &mut grads.phrase)?
    };
    let mut d_emb = dense_backward(
        &losses.d_phonetic_logits,
        &output.embeddings,
        &params.phonetic,
        &mut grads.phonetic,
    )?;
    match (&tape.lstm, &params.lstm, &mut grads.lstm) {
        (Some(ltape), Some(lstm), Some(lg)) => {
            let d_x = lstm_backward(&d_phrase_in, &output.embeddings, lstm, ltape, lg)?;
            d_emb = d_emb.add(&d_x)?;
        }
        (None, None, None) => {
            d_emb = d_emb.add(&d_phrase_in)?;
        }
        _ => {
            return Err(Error::InvalidConfig(
                "lstm presence differs between tape and params".into(),
            ))
        }
    }

    let (mut d_x, d_gamma, d_beta) =
        ln_backward(&d_emb, &tape.final_hat, &tape.final_inv, &params.final_ln.gamma);
    grads.final_ln.gamma = d_gamma;
    grads.final_ln.beta = d_beta;

    for ((ltape, lparams), lgrads) in tape
        .layers
        .iter()
        .zip(params.layers.iter())
        .zip(grads.layers.iter_mut())
        .rev()
    {
        d_x = layer_backward(&d_x, ltape, lparams, lgrads)?;
    }

    // Positional encoding is additive and constant, so the projection sees
    // the block-stack gradient unchanged.
    grads.input_proj.w = tape.features.transpose().matmul(&d_x)?;
    grads.input_proj.b = col_sums(&d_x);

    Ok(BackwardResult {
        output,
        losses,
        grads,
    })
}

/// Euclidean norm over every gradient entry, accumulated in f64.
pub fn gradient_norm<T: Scalar>(grads: &ModelParams<T>) -> f64 {
    let mut sum = 0.0f64;
    grads.for_each(&mut |_, m| {
        for &v in m.data() {
            let x = v.as_f64();
            sum += x * x;
        }
    });
    sum.sqrt()
}

/// Scale gradients down to `max_norm` when they exceed it; returns the norm
/// before clipping. Gradients at or under the bound are untouched.
pub fn clip_gradients<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = gradient_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        grads.for_each_mut(&mut |_, m| {
            for v in m.data_mut() {
                *v = *v * s;
            }
        });
    }
    norm
}

#[derive(Debug, Clone, Copy)]
pub struct AdamOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        AdamOptions {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment estimates reuse the parameter
/// container, so every tensor is tracked by name and shape.
pub struct Adam<T> {
    opts: AdamOptions,
    steps: u64,
    m: ModelParams<T>,
    v: ModelParams<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(template: &ModelParams<T>, opts: AdamOptions) -> Self {
        Adam {
            opts,
            steps: 0,
            m: template.zeros_like(),
            v: template.zeros_like(),
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        self.steps += 1;
        let b1 = T::from_f64(self.opts.beta1);
        let b2 = T::from_f64(self.opts.beta2);
        let one = T::one();
        let lr = T::from_f64(self.opts.lr);
        let eps = T::from_f64(self.opts.eps);
        let c1 = T::from_f64(1.0 - self.opts.beta1.powi(self.steps as i32));
        let c2 = T::from_f64(1.0 - self.opts.beta2.powi(self.steps as i32));

        let mut p = params.flat_mut();
        let g = grads.flat();
        let mut m = self.m.flat_mut();
        let mut v = self.v.flat_mut();
        if p.len() != g.len() {
            return Err(Error::TensorMismatch {
                name: "<all>".into(),
                detail: format!("{} parameter tensors vs {} gradients", p.len(), g.len()),
            });
        }
        for idx in 0..p.len() {
            if p[idx].0 != g[idx].0 || p[idx].1.shape() != g[idx].1.shape() {
                return Err(Error::TensorMismatch {
                    name: g[idx].0.clone(),
                    detail: "gradient does not line up with parameter".into(),
                });
            }
            let pm = p[idx].1.data_mut();
            let gd = g[idx].1.data();
            let md = m[idx].1.data_mut();
            let vd = v[idx].1.data_mut();
            for s in 0..pm.len() {
                let gs = gd[s];
                md[s] = b1 * md[s] + (one - b1) * gs;
                vd[s] = b2 * vd[s] + (one - b2) * gs * gs;
                let m_hat = md[s] / c1;
                let v_hat = vd[s] / c2;
                pm[s] = pm[s] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

/// Per-epoch training metrics, averaged over the epoch's utterances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ctc_loss: f64,
    pub phrase_loss: f64,
    pub phrase_acc: f64,
    pub wall_seconds: f64,
}

/// Render metrics as CSV. Every column except `wall_seconds` is a pure
/// function of config, corpus, and seed.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,ctc_loss,phrase_loss,phrase_acc,wall_seconds\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.3}\n",
            m.epoch, m.ctc_loss, m.phrase_loss, m.phrase_acc, m.wall_seconds
        ));
    }
    out
}

struct Example<T> {
    id: String,
    features: Matrix<T>,
    ctc: CtcTarget,
    phrase: FrameCeTarget,
}

/// Utterance-level call: mean positive probability over frames, thresholded
/// at one half.
fn utterance_predicts_true<T: Scalar>(output: &ForwardOutput<T>, config: &ModelConfig) -> bool {
    let frames = output.phrase_logits.rows();
    let mut p = 0.0f64;
    for t in 0..frames {
        p += phrase_positive_prob(output.phrase_logits.row(t), config.phrase_loss).as_f64();
    }
    p / frames as f64 > 0.5
}

/// Mini-batch training with Adam, gradient averaging over the batch, and
/// global-norm clipping. Deterministic given config, corpus, and seed. A
/// non-finite loss aborts with the offending epoch and utterance.
pub fn train<T: Scalar>(
    config: &ModelConfig,
    corpus: &[Utterance],
    opts: &TrainOptions,
) -> Result<(ModelParams<T>, Vec<EpochMetrics>)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let rng = SplitMix64::new(opts.seed);
    let mut params = ModelParams::<T>::init(config, &mut rng.fork(0))?;
    let mut dropout_rng = rng.fork(1);
    let mut shuffle_rng = rng.fork(2);
    let mut adam = Adam::new(
        &params,
        AdamOptions {
            lr: opts.lr,
            ..AdamOptions::default()
        },
    );

    let examples: Vec<Example<T>> = corpus
        .iter()
        .map(|u| {
            Ok(Example {
                id: u.id.clone(),
                features: u.features.cast::<T>(),
                ctc: CtcTarget::new(u.tokens.clone(), config.vocab_size)?,
                phrase: FrameCeTarget::new(u.phrase_true as usize)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut metrics = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut ctc_sum = 0.0f64;
        let mut phrase_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let mut summed: Option<ModelParams<T>> = None;
            for &idx in batch {
                let ex = &examples[idx];
                let rng_opt = if config.dropout > 0.0 {
                    Some(&mut dropout_rng)
                } else {
                    None
                };
                let res = backward(&ex.features, &ex.ctc, ex.phrase, &params, config, rng_opt)?;
                let total = res.losses.total.as_f64();
                if !total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("utterance {}: total loss {total}", ex.id),
                    });
                }
                ctc_sum += res.losses.ctc.as_f64();
                phrase_sum += res.losses.phrase.as_f64();
                if utterance_predicts_true(&res.output, config) == (ex.phrase.class() == 1) {
                    correct += 1;
                }
                summed = Some(match summed {
                    None => res.grads,
                    Some(acc) => add_params(acc, &res.grads),
                });
            }
            let mut grads = summed.expect("chunks are never empty");
            scale_params(&mut grads, 1.0 / batch.len() as f64);
            clip_gradients(&mut grads, opts.clip_norm);
            adam.apply(&mut params, &grads)?;
        }
        let n = examples.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            ctc_loss: ctc_sum / n,
            phrase_loss: phrase_sum / n,
            phrase_acc: correct as f64 / n,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, metrics))
}

fn add_params<T: Scalar>(mut acc: ModelParams<T>, other: &ModelParams<T>) -> ModelParams<T> {
    {
        let mut lhs = acc.flat_mut();
        let rhs = other.flat();
        for ((_, l), (_, r)) in lhs.iter_mut().zip(rhs.iter()) {
            for (x, &y) in l.data_mut().iter_mut().zip(r.data()) {
                *x = *x + y;
            }
        }
    }
    acc
}

fn scale_params<T: Scalar>(p: &mut ModelParams<T>, s: f64) {
    let s = T::from_f64(s);
    p.for_each_mut(&mut |_, m| {
        for v in m.data_mut() {
            *v = *v * s;
        }
    });
}

/// Worst relative error between analytic and central finite-difference
/// gradients for one tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Central differences straddle a ReLU kink whenever a pre-activation sits
/// within the probe step of zero, which corrupts the estimate by O(1); a
/// probe is only usable when every kink clears this margin (the step h=1e-5
/// moves any pre-activation far less).
const KINK_MARGIN: f64 = 1e-3;

/// Exhaustive central finite-difference check of the backward pass, one
/// report entry per parameter tensor in traversal order. Runs in f64
/// regardless of the configured precision; dropout is honored by replaying
/// the same RNG stream for every evaluation, so the sampled masks match.
/// Probe inputs that leave any ReLU pre-activation within [`KINK_MARGIN`]
/// of zero are redrawn, since finite differences are only valid on a single
/// smooth piece of the loss.
pub fn gradcheck(config: &ModelConfig, frames: usize, seed: u64) -> Result<Vec<GradCheckEntry>> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let params = ModelParams::<f64>::init(config, &mut rng.fork(0))?;
    let labels = if config.vocab_size >= 2 {
        vec![0, 1]
    } else {
        vec![0]
    };
    let ctc = CtcTarget::new(labels, config.vocab_size)?;
    if !ctc.is_feasible(frames) {
        return Err(Error::InvalidInput(format!(
            "{frames} frames cannot align the gradcheck target"
        )));
    }
    let phrase = FrameCeTarget::new(1)?;
    let dropout_seed = rng.next_u64();
    let dropout = config.dropout > 0.0;

    let mut features = Matrix::zeros(0, 0);
    let mut clean = false;
    for _ in 0..100 {
        let candidate =
            Matrix::from_fn(frames, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));
        let mut r = SplitMix64::new(dropout_seed);
        let (_, tape) = forward_with_tape(
            &candidate,
            &params,
            config,
            true,
            dropout.then_some(&mut r),
        )?;
        // Exact zeros are structural (degenerate models pin pre-activations
        // at 0.0 with zero sensitivity), not near-kink hazards.
        let near_kink = tape
            .layers
            .iter()
            .flat_map(|l| l.ffn_z.data().iter())
            .map(|z| z.as_f64().abs())
            .any(|z| z != 0.0 && z < KINK_MARGIN);
        if !near_kink {
            features = candidate;
            clean = true;
            break;
        }
    }
    if !clean {
        return Err(Error::InvalidInput(
            "no kink-free gradcheck probe found in 100 draws".into(),
        ));
    }

    let analytic = {
        let mut r = SplitMix64::new(dropout_seed);
        backward(
            &features,
            &ctc,
            phrase,
            &params,
            config,
            dropout.then_some(&mut r),
        )?
    };
    if !analytic.losses.total.is_finite() {
        return Err(Error::NonFinite {
            context: "gradcheck loss".into(),
        });
    }

    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let mut r = SplitMix64::new(dropout_seed);
        let out = forward_full(&features, p, config, true, dropout.then_some(&mut r))?;
        Ok(mtl_loss(&out, &ctc, phrase, config)?.total)
    };

    let h = 1e-5;
    let mut work = params.clone();
    let analytic_flat = analytic.grads.flat();
    let mut report = Vec::with_capacity(analytic_flat.len());
    for (ti, (name, grad)) in analytic_flat.iter().enumerate() {
        let entries = grad.rows() * grad.cols();
        let mut max_rel = 0.0f64;
        for s in 0..entries {
            let orig = work.flat_mut()[ti].1.data()[s];
            work.flat_mut()[ti].1.data_mut()[s] = orig + h;
            let up = eval(&work)?;
            work.flat_mut()[ti].1.data_mut()[s] = orig - h;
            let down = eval(&work)?;
            work.flat_mut()[ti].1.data_mut()[s] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grad.data()[s];
            // The 1e-5 floor keeps roundoff on near-zero gradients from
            // reading as relative error: differencing a loss of magnitude
            // ~10..100 carries absolute noise around 1e-10.
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        report.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_rel,
            entries,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attend_full_tape, AttentionMask, BlockSpec};
    use crate::data::{generate_corpus, CorpusSpec};
    use crate::model::PhraseLoss;
    use crate::scalar::Precision;

    fn check_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            d_model: 4,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 6,
            vocab_size: 3,
            lstm_hidden: 3,
            block_shift: 2,
            precision: Precision::F64,
            ..ModelConfig::default()
        }
    }

    fn assert_gradcheck_clean(config: &ModelConfig, frames: usize) {
        let report = gradcheck(config, frames, 901).unwrap();
        let expected = ModelParams::<f64>::init(config, &mut SplitMix64::new(1))
            .unwrap()
            .tensor_count();
        assert_eq!(report.len(), expected, "every tensor reported once");
        for entry in &report {
            assert!(
                entry.max_rel_err < 1e-4,
                "{}: rel err {}",
                entry.name,
                entry.max_rel_err
            );
        }
    }

    #[test]
    fn finite_differences_confirm_every_tensor() {
        // 7 frames lands a partial final block under shift 2.
        assert_gradcheck_clean(&check_config(), 7);
    }

    #[test]
    fn finite_differences_hold_without_lstm() {
        let config = ModelConfig {
            lstm_in_phrase_branch: false,
            ..check_config()
        };
        assert_gradcheck_clean(&config, 7);
    }

    #[test]
    fn finite_differences_hold_for_ctc_seq_phrase_loss() {
        let config = ModelConfig {
            phrase_loss: PhraseLoss::CtcSeq,
            ..check_config()
        };
        assert_gradcheck_clean(&config, 7);
    }

    #[test]
    fn finite_differences_hold_under_dropout() {
        // The checker replays the dropout RNG per evaluation, so the same
        // masks apply on both sides of every difference.
        let config = ModelConfig {
            dropout: 0.4,
            ..check_config()
        };
        assert_gradcheck_clean(&config, 6);
    }

    #[test]
    fn finite_differences_hold_for_unblocked_attention() {
        let config = ModelConfig {
            block_shift: 0,
            ..check_config()
        };
        assert_gradcheck_clean(&config, 5);
    }

    #[test]
    fn degenerate_single_dim_model_passes_gradcheck() {
        let config = ModelConfig {
            feature_dim: 1,
            d_model: 1,
            n_heads: 1,
            n_layers: 1,
            ffn_dim: 1,
            vocab_size: 1,
            lstm_hidden: 1,
            block_shift: 1,
            precision: Precision::F64,
            ..ModelConfig::default()
        };
        assert_gradcheck_clean(&config, 4);
    }

    #[test]
    fn lambda_zero_kills_the_phrase_gradients() {
        let config = ModelConfig {
            lambda_phrase: 0.0,
            ..check_config()
        };
        let mut rng = SplitMix64::new(31);
        let params = ModelParams::<f64>::init(&config, &mut rng.fork(0)).unwrap();
        let features = Matrix::from_fn(6, 3, |_, _| rng.uniform(-1.0, 1.0));
        let ctc = CtcTarget::new(vec![0, 1], 3).unwrap();
        let res = backward(
            &features,
            &ctc,
            FrameCeTarget::new(1).unwrap(),
            &params,
            &config,
            None,
        )
        .unwrap();
        assert_eq!(res.losses.phrase, 0.0);
        for name in ["phrase.w", "phrase.b", "lstm.w_ih", "lstm.w_hh", "lstm.bias"] {
            let (_, m) = res
                .grads
                .flat()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap();
            assert_eq!(m.max_abs(), 0.0, "{name} should carry no gradient");
        }
        // The encoder still trains through the CTC branch.
        assert!(gradient_norm(&res.grads) > 0.0);
    }

    #[test]
    fn blocked_attention_positions_get_zero_gradient() {
        let spec = BlockSpec::new(2).unwrap();
        let frames = 6;
        let mask = AttentionMask::build(frames, spec);
        let mut rng = SplitMix64::new(32);
        let proj = AttentionProjections::random(4, 2, &mut rng).unwrap();
        let x = Matrix::from_fn(frames, 4, |_, _| rng.uniform(-1.0, 1.0));
        let (out, tape) = attend_full_tape(&x, &proj, Some(&mask)).unwrap();

        // Loss is the sum of the last query row's outputs.
        let t0 = frames - 1;
        let mut d_out = Matrix::zeros(frames, 4);
        for c in 0..4 {
            d_out.set(t0, c, 1.0);
        }
        let mut g = proj.clone();
        for m in [&mut g.w_q, &mut g.w_k, &mut g.w_v, &mut g.w_o] {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let d_x = attention_backward(&d_out, &tape, &proj, &x, &mut g).unwrap();

        let blocked: Vec<usize> = (0..frames).filter(|&u| !mask.is_allowed(t0, u)).collect();
        assert!(!blocked.is_empty(), "test needs blocked positions");
        for &u in &blocked {
            for c in 0..4 {
                assert_eq!(d_x.at(u, c), 0.0, "blocked key {u} leaked gradient");
            }
            // The finite story agrees: perturbing a blocked key leaves the
            // query's output untouched.
            let mut bumped = x.clone();
            bumped.set(u, 1, bumped.at(u, 1) + 0.5);
            let (out2, _) = attend_full_tape(&bumped, &proj, Some(&mask)).unwrap();
            let before: f64 = out.row(t0).iter().sum();
            let after: f64 = out2.row(t0).iter().sum();
            assert!((before - after).abs() <= 1e-12);
        }
        // Sanity: allowed keys do move the loss.
        let allowed_grad: f64 = (0..frames)
            .filter(|&u| mask.is_allowed(t0, u))
            .map(|u| d_x.row(u).iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(allowed_grad > 0.0);
    }

    #[test]
    fn infeasible_ctc_target_returns_infinite_loss_and_zero_grads() {
        let config = check_config();
        let mut rng = SplitMix64::new(33);
        let params = ModelParams::<f64>::init(&config, &mut rng.fork(0)).unwrap();
        let features = Matrix::from_fn(2, 3, |_, _| rng.uniform(-1.0, 1.0));
        let ctc = CtcTarget::new(vec![0, 0], 3).unwrap();
        assert!(!ctc.is_feasible(2));
        let res = backward(
            &features,
            &ctc,
            FrameCeTarget::new(0).unwrap(),
            &params,
            &config,
            None,
        )
        .unwrap();
        assert!(res.losses.total.is_infinite());
        assert_eq!(gradient_norm(&res.grads), 0.0);
    }

    #[test]
    fn adam_step_matches_hand_formula_on_constant_gradient() {
        let config = check_config();
        let mut rng = SplitMix64::new(34);
        let mut params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.for_each_mut(&mut |_, m| {
            for v in m.data_mut() {
                *v = 1.0;
            }
        });
        let opts = AdamOptions::default();
        let mut adam = Adam::new(&params, opts);
        adam.apply(&mut params, &grads).unwrap();
        // First step with g = 1 everywhere: m_hat = v_hat = 1, so every
        // parameter moves by exactly lr / (1 + eps).
        let expected = opts.lr / (1.0 + opts.eps);
        let after = params.flat();
        for ((name, b), (_, a)) in before.flat().iter().zip(after.iter()) {
            for (x, y) in b.data().iter().zip(a.data()) {
                assert!(((x - y) - expected).abs() < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn adam_with_zero_gradient_leaves_params_bit_identical() {
        let config = check_config();
        let mut rng = SplitMix64::new(35);
        let mut params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut adam = Adam::new(&params, AdamOptions::default());
        for _ in 0..3 {
            adam.apply(&mut params, &grads).unwrap();
        }
        for ((_, b), (_, a)) in before.flat().iter().zip(params.flat().iter()) {
            assert_eq!(b.data(), a.data());
        }
    }

    #[test]
    fn clipping_rescales_only_oversized_gradients() {
        let config = check_config();
        let mut rng = SplitMix64::new(36);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let mut grads = params.zeros_like();
        grads.flat_mut()[0].1.data_mut()[0] = 10.0;
        let norm = clip_gradients(&mut grads, 5.0);
        assert_eq!(norm, 10.0);
        assert!((grads.flat()[0].1.data()[0] - 5.0).abs() < 1e-12);
        assert!((gradient_norm(&grads) - 5.0).abs() < 1e-9);

        let mut small = params.zeros_like();
        small.flat_mut()[0].1.data_mut()[0] = 3.0;
        clip_gradients(&mut small, 5.0);
        assert_eq!(small.flat()[0].1.data()[0], 3.0);
    }

    fn train_corpus() -> Vec<Utterance> {
        let spec = CorpusSpec {
            n_true: 10,
            n_confusable: 10,
            n_negative: 5,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec).unwrap().train
    }

    fn train_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ffn_dim: 16,
            lstm_hidden: 8,
            block_shift: 4,
            precision: Precision::F64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn training_reduces_loss_and_is_seed_deterministic() {
        let config = train_config();
        let corpus = train_corpus();
        let opts = TrainOptions {
            epochs: 4,
            batch_size: 4,
            ..TrainOptions::default()
        };
        let (params_a, metrics_a) = train::<f64>(&config, &corpus, &opts).unwrap();
        let (params_b, metrics_b) = train::<f64>(&config, &corpus, &opts).unwrap();

        let first = metrics_a.first().unwrap();
        let last = metrics_a.last().unwrap();
        assert!(
            last.ctc_loss + last.phrase_loss < first.ctc_loss + first.phrase_loss,
            "loss should drop: {first:?} -> {last:?}"
        );

        for ((_, a), (_, b)) in params_a.flat().iter().zip(params_b.flat().iter()) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in metrics_a.iter().zip(metrics_b.iter()) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.ctc_loss, b.ctc_loss);
            assert_eq!(a.phrase_loss, b.phrase_loss);
            assert_eq!(a.phrase_acc, b.phrase_acc);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params_bit_identical_to_init() {
        let config = train_config();
        let corpus = train_corpus();
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 4,
            lr: 0.0,
            seed: 5,
            ..TrainOptions::default()
        };
        let (params, _) = train::<f64>(&config, &corpus, &opts).unwrap();
        let init =
            ModelParams::<f64>::init(&config, &mut SplitMix64::new(opts.seed).fork(0)).unwrap();
        for ((name, p), (_, i)) in params.flat().iter().zip(init.flat().iter()) {
            assert_eq!(p.data(), i.data(), "{name} moved under lr 0");
        }
    }

    #[test]
    fn training_aborts_on_unalignable_utterance() {
        let config = train_config();
        let mut corpus = train_corpus();
        corpus[0] = Utterance {
            id: "broken".into(),
            features: Matrix::from_fn(2, 16, |_, _| 0.1f32),
            tokens: vec![0, 0, 0],
            phrase_true: false,
            trigger_end_frame: 2,
        };
        let opts = TrainOptions {
            epochs: 1,
            ..TrainOptions::default()
        };
        match train::<f64>(&config, &corpus, &opts) {
            Err(Error::Diverged { epoch, detail }) => {
                assert_eq!(epoch, 1);
                assert!(detail.contains("broken"), "{detail}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn metrics_csv_has_header_and_one_row_per_epoch() {
        let metrics = vec![
            EpochMetrics {
                epoch: 1,
                ctc_loss: 2.5,
                phrase_loss: 0.7,
                phrase_acc: 0.5,
                wall_seconds: 0.01,
            },
            EpochMetrics {
                epoch: 2,
                ctc_loss: 2.1,
                phrase_loss: 0.6,
                phrase_acc: 0.75,
                wall_seconds: 0.01,
            },
        ];
        let csv = metrics_csv(&metrics);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,ctc_loss,phrase_loss,phrase_acc,wall_seconds");
        assert!(lines[1].starts_with("1,2.500000,0.700000,0.500000,"));
        assert!(lines[2].starts_with("2,2.100000,"));
    }
}
