//! Model assembly: configuration, the named-parameter container, forward
//! passes, and the multi-task loss.
//!
//! One architecture, two execution paths. `forward_full` runs the whole
//! sequence in a single pass; with a nonzero block shift it applies the
//! block-window attention mask, which simulates streaming exactly.
//! `forward_block` is the incremental path: per-layer attention caches plus
//! carried LSTM state. Tests hold the two equal; training reuses the full
//! pass through `forward_with_tape` so the function being optimized is the
//! function being deployed.

use crate::attention::{
    attend_full_tape, attend_streaming, AttentionMask, AttentionProjections, AttnTape, BlockSpec,
    LayerCache,
};
use crate::error::{Error, Result};
use crate::layers::{positional_encoding, relu, Dense, FeedForward, LayerNorm, Lstm, LstmState, LstmTape};
use crate::losses::{ctc_loss, frame_ce_loss, CtcTarget, FrameCeTarget};
use crate::rng::SplitMix64;
use crate::scalar::{Precision, Scalar};
use crate::tensor::{row_log_softmax, Matrix};

/// Loss used by the phrase discrimination branch.
///
/// `FrameCe` replicates the utterance label to every frame; `CtcSeq` treats
/// the whole phrase as a single CTC token (vocabulary of one, so the head
/// stays two-class: token then blank).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhraseLoss {
    FrameCe,
    CtcSeq,
}

impl PhraseLoss {
    pub fn name(self) -> &'static str {
        match self {
            PhraseLoss::FrameCe => "frame_ce",
            PhraseLoss::CtcSeq => "ctc_seq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frame_ce" => Ok(PhraseLoss::FrameCe),
            "ctc_seq" => Ok(PhraseLoss::CtcSeq),
            other => Err(Error::InvalidConfig(format!(
                "unknown phrase loss {other:?} (expected frame_ce or ctc_seq)"
            ))),
        }
    }

    /// Column of the phrase head output carrying positive-class evidence:
    /// the true-trigger logit under CE, the phrase-token column under CTC
    /// (whose other column is the blank).
    pub fn positive_column(self) -> usize {
        match self {
            PhraseLoss::FrameCe => 1,
            PhraseLoss::CtcSeq => 0,
        }
    }
}

/// Hyperparameters fixing every tensor shape plus the training weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub lstm_hidden: usize,
    /// 0 selects vanilla full-context attention; >= 1 selects streaming
    /// blocks of size `2 * block_shift`.
    pub block_shift: usize,
    pub phrase_loss: PhraseLoss,
    pub lstm_in_phrase_branch: bool,
    pub lambda_ctc: f64,
    pub lambda_phrase: f64,
    pub dropout: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 64,
            vocab_size: 8,
            lstm_hidden: 32,
            block_shift: 8,
            phrase_loss: PhraseLoss::FrameCe,
            lstm_in_phrase_branch: true,
            lambda_ctc: 1.0,
            lambda_phrase: 1.0,
            dropout: 0.0,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.ffn_dim == 0
            || self.vocab_size == 0
            || self.lstm_hidden == 0
        {
            return Err(Error::InvalidConfig("all dimensions must be >= 1".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        for (name, l) in [("lambda_ctc", self.lambda_ctc), ("lambda_phrase", self.lambda_phrase)]
        {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} = {l} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Streaming geometry, or `None` in vanilla mode.
    pub fn block_spec(&self) -> Option<BlockSpec> {
        if self.block_shift == 0 {
            None
        } else {
            Some(BlockSpec::new(self.block_shift).expect("nonzero shift"))
        }
    }

    /// Phonetic head classes: vocabulary plus blank.
    pub fn phonetic_classes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn phrase_input_dim(&self) -> usize {
        if self.lstm_in_phrase_branch {
            self.lstm_hidden
        } else {
            self.d_model
        }
    }

    /// Canonical key=value rendering: sorted keys, one per line. This exact
    /// text is embedded in checkpoints and accepted as a config file.
    pub fn to_text(&self) -> String {
        format!(
            "block_shift={}\nd_model={}\ndropout={}\nfeature_dim={}\nffn_dim={}\n\
             lambda_ctc={}\nlambda_phrase={}\nlstm_hidden={}\nlstm_in_phrase_branch={}\n\
             n_heads={}\nn_layers={}\nphrase_loss={}\nprecision={}\nvocab_size={}\n",
            self.block_shift,
            self.d_model,
            self.dropout,
            self.feature_dim,
            self.ffn_dim,
            self.lambda_ctc,
            self.lambda_phrase,
            self.lstm_hidden,
            self.lstm_in_phrase_branch,
            self.n_heads,
            self.n_layers,
            self.phrase_loss.name(),
            self.precision.name(),
            self.vocab_size,
        )
    }

    /// Parse `key=value` lines onto the defaults. Unknown or repeated keys
    /// are errors; omitted keys keep their default.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedLine {
                line: idx + 1,
                detail: format!("expected key=value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key.to_string()) {
                return Err(Error::MalformedLine {
                    line: idx + 1,
                    detail: format!("duplicate key {key}"),
                });
            }
            seen.push(key.to_string());
            let bad = |detail: String| Error::MalformedLine { line: idx + 1, detail };
            let parse_usize =
                |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            let parse_f64 = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "feature_dim" => cfg.feature_dim = parse_usize(value)?,
                "d_model" => cfg.d_model = parse_usize(value)?,
                "n_heads" => cfg.n_heads = parse_usize(value)?,
                "n_layers" => cfg.n_layers = parse_usize(value)?,
                "ffn_dim" => cfg.ffn_dim = parse_usize(value)?,
                "vocab_size" => cfg.vocab_size = parse_usize(value)?,
                "lstm_hidden" => cfg.lstm_hidden = parse_usize(value)?,
                "block_shift" => cfg.block_shift = parse_usize(value)?,
                "phrase_loss" => cfg.phrase_loss = PhraseLoss::parse(value)?,
                "lstm_in_phrase_branch" => {
                    cfg.lstm_in_phrase_branch = value
                        .parse::<bool>()
                        .map_err(|e| bad(format!("{key}: {e}")))?
                }
                "lambda_ctc" => cfg.lambda_ctc = parse_f64(value)?,
                "lambda_phrase" => cfg.lambda_phrase = parse_f64(value)?,
                "dropout" => cfg.dropout = parse_f64(value)?,
                "precision" => {
                    cfg.precision = Precision::parse(value)
                        .ok_or_else(|| bad(format!("unknown precision {value:?}")))?
                }
                other => return Err(bad(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One encoder layer: pre-norm self-attention then pre-norm feed-forward,
/// both with residual connections.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams<T> {
    pub ln1: LayerNorm<T>,
    pub attn: AttentionProjections<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

/// Every learnable tensor, grouped by site. `Gradients` in the training
/// module reuses this container so names and shapes match by construction.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub input_proj: Dense<T>,
    pub layers: Vec<EncoderLayerParams<T>>,
    pub final_ln: LayerNorm<T>,
    pub phonetic: Dense<T>,
    pub lstm: Option<Lstm<T>>,
    pub phrase: Dense<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Xavier-uniform weights, zero biases, unit layernorm scale; the LSTM
    /// forget-gate bias starts at one. The draw order is fixed, so a seed
    /// pins every tensor.
    pub fn init(config: &ModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let input_proj = Dense::xavier(config.feature_dim, d, rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(EncoderLayerParams {
                ln1: LayerNorm::new(d),
                attn: AttentionProjections::random(d, config.n_heads, rng)?,
                ln2: LayerNorm::new(d),
                ffn: FeedForward::xavier(d, config.ffn_dim, rng),
            });
        }
        let final_ln = LayerNorm::new(d);
        let phonetic = Dense::xavier(d, config.phonetic_classes(), rng);
        let lstm = if config.lstm_in_phrase_branch {
            Some(Lstm::xavier(d, config.lstm_hidden, rng))
        } else {
            None
        };
        let phrase = Dense::xavier(config.phrase_input_dim(), 2, rng);
        Ok(ModelParams {
            input_proj,
            layers,
            final_ln,
            phonetic,
            lstm,
            phrase,
        })
    }

    /// Same structure with every tensor zeroed; the gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(&mut |_, m| *m = Matrix::zeros(m.rows(), m.cols()));
        out
    }

    /// Tensor references in the fixed traversal order; the order defines
    /// tensor identity for checkpoints, optimizers, and gradient reports.
    pub fn flat(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::with_capacity(self.layers.len() * 12 + 9);
        out.push(("input_proj.w".to_string(), &self.input_proj.w));
        out.push(("input_proj.b".to_string(), &self.input_proj.b));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gamma"), &layer.ln1.gamma));
            out.push((format!("layers.{i}.ln1.beta"), &layer.ln1.beta));
            out.push((format!("layers.{i}.attn.w_q"), &layer.attn.w_q));
            out.push((format!("layers.{i}.attn.w_k"), &layer.attn.w_k));
            out.push((format!("layers.{i}.attn.w_v"), &layer.attn.w_v));
            out.push((format!("layers.{i}.attn.w_o"), &layer.attn.w_o));
            out.push((format!("layers.{i}.ln2.gamma"), &layer.ln2.gamma));
            out.push((format!("layers.{i}.ln2.beta"), &layer.ln2.beta));
            out.push((format!("layers.{i}.ffn.w1"), &layer.ffn.inner.w));
            out.push((format!("layers.{i}.ffn.b1"), &layer.ffn.inner.b));
            out.push((format!("layers.{i}.ffn.w2"), &layer.ffn.outer.w));
            out.push((format!("layers.{i}.ffn.b2"), &layer.ffn.outer.b));
        }
        out.push(("final_ln.gamma".to_string(), &self.final_ln.gamma));
        out.push(("final_ln.beta".to_string(), &self.final_ln.beta));
        out.push(("phonetic.w".to_string(), &self.phonetic.w));
        out.push(("phonetic.b".to_string(), &self.phonetic.b));
        if let Some(lstm) = &self.lstm {
            out.push(("lstm.w_ih".to_string(), &lstm.w_ih));
            out.push(("lstm.w_hh".to_string(), &lstm.w_hh));
            out.push(("lstm.bias".to_string(), &lstm.bias));
        }
        out.push(("phrase.w".to_string(), &self.phrase.w));
        out.push(("phrase.b".to_string(), &self.phrase.b));
        out
    }

    /// Mutable variant of `flat`, same order.
    pub fn flat_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::with_capacity(self.layers.len() * 12 + 9);
        out.push(("input_proj.w".to_string(), &mut self.input_proj.w));
        out.push(("input_proj.b".to_string(), &mut self.input_proj.b));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.ln1.gamma"), &mut layer.ln1.gamma));
            out.push((format!("layers.{i}.ln1.beta"), &mut layer.ln1.beta));
            out.push((format!("layers.{i}.attn.w_q"), &mut layer.attn.w_q));
            out.push((format!("layers.{i}.attn.w_k"), &mut layer.attn.w_k));
            out.push((format!("layers.{i}.attn.w_v"), &mut layer.attn.w_v));
            out.push((format!("layers.{i}.attn.w_o"), &mut layer.attn.w_o));
            out.push((format!("layers.{i}.ln2.gamma"), &mut layer.ln2.gamma));
            out.push((format!("layers.{i}.ln2.beta"), &mut layer.ln2.beta));
            out.push((format!("layers.{i}.ffn.w1"), &mut layer.ffn.inner.w));
            out.push((format!("layers.{i}.ffn.b1"), &mut layer.ffn.inner.b));
            out.push((format!("layers.{i}.ffn.w2"), &mut layer.ffn.outer.w));
            out.push((format!("layers.{i}.ffn.b2"), &mut layer.ffn.outer.b));
        }
        out.push(("final_ln.gamma".to_string(), &mut self.final_ln.gamma));
        out.push(("final_ln.beta".to_string(), &mut self.final_ln.beta));
        out.push(("phonetic.w".to_string(), &mut self.phonetic.w));
        out.push(("phonetic.b".to_string(), &mut self.phonetic.b));
        if let Some(lstm) = &mut self.lstm {
            out.push(("lstm.w_ih".to_string(), &mut lstm.w_ih));
            out.push(("lstm.w_hh".to_string(), &mut lstm.w_hh));
            out.push(("lstm.bias".to_string(), &mut lstm.bias));
        }
        out.push(("phrase.w".to_string(), &mut self.phrase.w));
        out.push(("phrase.b".to_string(), &mut self.phrase.b));
        out
    }

    /// Visit every tensor as `(name, matrix)` in the fixed traversal order.
    pub fn for_each(&self, f: &mut impl FnMut(&str, &Matrix<T>)) {
        for (name, m) in self.flat() {
            f(&name, m);
        }
    }

    /// Mutable variant of `for_each`, same order.
    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut Matrix<T>)) {
        for (name, m) in self.flat_mut() {
            f(&name, m);
        }
    }

    /// Tensors in traversal order with owned names.
    pub fn tensors(&self) -> Vec<(String, Matrix<T>)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, m| out.push((name.to_string(), m.clone())));
        out
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _| n += 1);
        n
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, m| n += m.rows() * m.cols());
        n
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            input_proj: Dense {
                w: self.input_proj.w.cast(),
                b: self.input_proj.b.cast(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayerParams {
                    ln1: LayerNorm {
                        gamma: l.ln1.gamma.cast(),
                        beta: l.ln1.beta.cast(),
                        eps: U::from_f64(l.ln1.eps.as_f64()),
                    },
                    attn: AttentionProjections {
                        w_q: l.attn.w_q.cast(),
                        w_k: l.attn.w_k.cast(),
                        w_v: l.attn.w_v.cast(),
                        w_o: l.attn.w_o.cast(),
                        n_heads: l.attn.n_heads,
                    },
                    ln2: LayerNorm {
                        gamma: l.ln2.gamma.cast(),
                        beta: l.ln2.beta.cast(),
                        eps: U::from_f64(l.ln2.eps.as_f64()),
                    },
                    ffn: FeedForward {
                        inner: Dense {
                            w: l.ffn.inner.w.cast(),
                            b: l.ffn.inner.b.cast(),
                        },
                        outer: Dense {
                            w: l.ffn.outer.w.cast(),
                            b: l.ffn.outer.b.cast(),
                        },
                    },
                })
                .collect(),
            final_ln: LayerNorm {
                gamma: self.final_ln.gamma.cast(),
                beta: self.final_ln.beta.cast(),
                eps: U::from_f64(self.final_ln.eps.as_f64()),
            },
            phonetic: Dense {
                w: self.phonetic.w.cast(),
                b: self.phonetic.b.cast(),
            },
            lstm: self.lstm.as_ref().map(|l| Lstm {
                w_ih: l.w_ih.cast(),
                w_hh: l.w_hh.cast(),
                bias: l.bias.cast(),
            }),
            phrase: Dense {
                w: self.phrase.w.cast(),
                b: self.phrase.b.cast(),
            },
        }
    }
}

/// Branch outputs of a forward pass over `T` frames.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Encoder embeddings after the final normalization, `T x D`.
    pub embeddings: Matrix<T>,
    /// Phonetic branch log-distributions, `T x (V+1)`, blank last.
    pub phonetic_log_probs: Matrix<T>,
    /// Phrase branch raw logits, `T x 2`.
    pub phrase_logits: Matrix<T>,
}

/// Positive-class probability of one phrase-logit row under the configured
/// loss mode.
pub fn phrase_positive_prob<T: Scalar>(logits_row: &[T], mode: PhraseLoss) -> T {
    let pos = logits_row[mode.positive_column()];
    let neg = logits_row[1 - mode.positive_column()];
    // Stable two-class softmax.
    (T::one() + (neg - pos).exp()).recip()
}

/// Intermediates of one layer's forward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape<T> {
    pub ln1_hat: Matrix<T>,
    pub ln1_inv: Vec<T>,
    pub ln1_out: Matrix<T>,
    pub attn: AttnTape<T>,
    pub attn_drop: Option<Matrix<T>>,
    pub ln2_hat: Matrix<T>,
    pub ln2_inv: Vec<T>,
    pub ln2_out: Matrix<T>,
    pub ffn_z: Matrix<T>,
    pub ffn_a: Matrix<T>,
    pub ffn_drop: Option<Matrix<T>>,
}

/// Everything backward needs from a full forward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTape<T> {
    pub features: Matrix<T>,
    pub layers: Vec<LayerTape<T>>,
    pub final_hat: Matrix<T>,
    pub final_inv: Vec<T>,
    pub lstm: Option<LstmTape<T>>,
}

fn dropout_mask<T: Scalar>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut SplitMix64,
) -> Matrix<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.next_f64() < rate {
            T::zero()
        } else {
            keep
        }
    })
}

/// Full-sequence forward pass; with a nonzero block shift the attention mask
/// simulates streaming. `train_mode` enables dropout, which then requires an
/// RNG.
pub fn forward_full<T: Scalar>(
    features: &Matrix<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    train_mode: bool,
    rng: Option<&mut SplitMix64>,
) -> Result<ForwardOutput<T>> {
    forward_with_tape(features, params, config, train_mode, rng).map(|(out, _)| out)
}

pub(crate) fn forward_with_tape<T: Scalar>(
    features: &Matrix<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    train_mode: bool,
    mut rng: Option<&mut SplitMix64>,
) -> Result<(ForwardOutput<T>, ForwardTape<T>)> {
    if features.cols() != config.feature_dim {
        return Err(Error::ShapeMismatch {
            op: "forward features",
            left: features.shape(),
            right: (features.rows(), config.feature_dim),
        });
    }
    if features.rows() == 0 {
        return Err(Error::InvalidInput("forward needs at least one frame".into()));
    }
    if params.layers.len() != config.n_layers {
        return Err(Error::InvalidConfig(format!(
            "params carry {} layers, config says {}",
            params.layers.len(),
            config.n_layers
        )));
    }
    let use_dropout = train_mode && config.dropout > 0.0;
    if use_dropout && rng.is_none() {
        return Err(Error::InvalidConfig(
            "dropout in train mode requires an RNG".into(),
        ));
    }
    let t_total = features.rows();
    let mask = config
        .block_spec()
        .map(|spec| AttentionMask::build(t_total, spec));

    let mut x = params
        .input_proj
        .forward(features)?
        .add(&positional_encoding(0, t_total, config.d_model))?;

    let mut layer_tapes = Vec::with_capacity(config.n_layers);
    for layer in &params.layers {
        let x_in = x;
        let (ln1_out, ln1_hat, ln1_inv) = layer.ln1.forward_with_stats(&x_in)?;
        let (mut attn_out, attn_tape) = attend_full_tape(&ln1_out, &layer.attn, mask.as_ref())?;
        let attn_drop = if use_dropout {
            let m = dropout_mask(
                attn_out.rows(),
                attn_out.cols(),
                config.dropout,
                rng.as_deref_mut().expect("checked above"),
            );
            attn_out = attn_out.hadamard(&m)?;
            Some(m)
        } else {
            None
        };
        let res1 = x_in.add(&attn_out)?;
        let (ln2_out, ln2_hat, ln2_inv) = layer.ln2.forward_with_stats(&res1)?;
        let ffn_z = layer.ffn.inner.forward(&ln2_out)?;
        let ffn_a = relu(&ffn_z);
        let mut ffn_out = layer.ffn.outer.forward(&ffn_a)?;
        let ffn_drop = if use_dropout {
            let m = dropout_mask(
                ffn_out.rows(),
                ffn_out.cols(),
                config.dropout,
                rng.as_deref_mut().expect("checked above"),
            );
            ffn_out = ffn_out.hadamard(&m)?;
            Some(m)
        } else {
            None
        };
        x = res1.add(&ffn_out)?;
        layer_tapes.push(LayerTape {
            ln1_hat,
            ln1_inv,
            ln1_out,
            attn: attn_tape,
            attn_drop,
            ln2_hat,
            ln2_inv,
            ln2_out,
            ffn_z,
            ffn_a,
            ffn_drop,
        });
    }

    let (embeddings, final_hat, final_inv) = params.final_ln.forward_with_stats(&x)?;
    let phonetic_log_probs = row_log_softmax(&params.phonetic.forward(&embeddings)?);

    let (phrase_in, lstm_tape) = match &params.lstm {
        Some(lstm) => {
            let mut state = LstmState::zeros(lstm.hidden());
            let (h, tape) = lstm.forward_with_tape(&embeddings, &mut state)?;
            (h, Some(tape))
        }
        None => (embeddings.clone(), None),
    };
    let phrase_logits = params.phrase.forward(&phrase_in)?;

    Ok((
        ForwardOutput {
            embeddings,
            phonetic_log_probs,
            phrase_logits,
        },
        ForwardTape {
            features: features.clone(),
            layers: layer_tapes,
            final_hat,
            final_inv,
            lstm: lstm_tape,
        },
    ))
}

/// Carried state of the incremental forward path: one attention cache per
/// layer, the LSTM state, and the absolute frame offset (for positional
/// encoding).
#[derive(Debug, Clone)]
pub struct BlockState<T> {
    caches: Vec<LayerCache<T>>,
    lstm: Option<LstmState<T>>,
    offset: usize,
}

impl<T: Scalar> BlockState<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let spec = config.block_spec().ok_or_else(|| {
            Error::InvalidConfig("streaming requires block_shift >= 1".into())
        })?;
        Ok(BlockState {
            caches: (0..config.n_layers)
                .map(|_| LayerCache::new(spec, config.d_model))
                .collect(),
            lstm: if config.lstm_in_phrase_branch {
                Some(LstmState::zeros(config.lstm_hidden))
            } else {
                None
            },
            offset: 0,
        })
    }

    /// Frames processed so far.
    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Resident state in bytes, analytically from the config: per-layer
    /// attention caches of `S x D` scalars plus the LSTM's two `H`-vectors.
    /// Independent of how many frames have streamed through.
    pub fn state_bytes(&self, config: &ModelConfig) -> usize {
        let sz = config.precision.bytes();
        let caches = config.n_layers * config.block_shift * config.d_model * sz;
        let lstm = if config.lstm_in_phrase_branch {
            2 * config.lstm_hidden * sz
        } else {
            0
        };
        caches + lstm
    }
}

/// One streaming block: the first call may carry up to `2S` frames, later
/// calls up to `S`. Returns the emissions for exactly the pushed frames;
/// they are final and equal the corresponding rows of `forward_full`.
pub fn forward_block<T: Scalar>(
    block: &Matrix<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    state: &mut BlockState<T>,
) -> Result<ForwardOutput<T>> {
    if block.cols() != config.feature_dim {
        return Err(Error::ShapeMismatch {
            op: "forward_block features",
            left: block.shape(),
            right: (block.rows(), config.feature_dim),
        });
    }
    if params.layers.len() != config.n_layers {
        return Err(Error::InvalidConfig(format!(
            "params carry {} layers, config says {}",
            params.layers.len(),
            config.n_layers
        )));
    }
    let k = block.rows();
    let mut x = params
        .input_proj
        .forward(block)?
        .add(&positional_encoding(state.offset, k, config.d_model))?;

    for (layer, cache) in params.layers.iter().zip(state.caches.iter_mut()) {
        let ln1_out = layer.ln1.forward(&x)?;
        let attn_out = attend_streaming(&ln1_out, cache, &layer.attn)?;
        let res1 = x.add(&attn_out)?;
        let ffn_out = layer.ffn.forward(&layer.ln2.forward(&res1)?)?;
        x = res1.add(&ffn_out)?;
    }

    let embeddings = params.final_ln.forward(&x)?;
    let phonetic_log_probs = row_log_softmax(&params.phonetic.forward(&embeddings)?);
    let phrase_in = match (&params.lstm, &mut state.lstm) {
        (Some(lstm), Some(lstm_state)) => lstm.forward(&embeddings, lstm_state)?,
        _ => embeddings.clone(),
    };
    let phrase_logits = params.phrase.forward(&phrase_in)?;
    state.offset += k;

    Ok(ForwardOutput {
        embeddings,
        phonetic_log_probs,
        phrase_logits,
    })
}

/// Multi-task loss breakdown with gradients at the two head outputs, ready
/// for the backward pass. Both gradients are with respect to pre-softmax
/// logits and already carry their lambda weights.
#[derive(Debug, Clone)]
pub struct MtlBreakdown<T> {
    pub total: T,
    pub ctc: T,
    pub phrase: T,
    pub d_phonetic_logits: Matrix<T>,
    pub d_phrase_logits: Matrix<T>,
}

/// Chain a gradient taken at log-softmax outputs back to the logits:
/// `dz_j = dy_j - p_j * sum_k dy_k`.
fn log_softmax_backward<T: Scalar>(log_probs: &Matrix<T>, d_log_probs: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(d_log_probs.rows(), d_log_probs.cols());
    for t in 0..d_log_probs.rows() {
        let mut total = T::zero();
        for &g in d_log_probs.row(t) {
            total = total + g;
        }
        let out_row = out.row_mut(t);
        for j in 0..d_log_probs.cols() {
            out_row[j] = d_log_probs.at(t, j) - log_probs.at(t, j).exp() * total;
        }
    }
    out
}

pub fn mtl_loss<T: Scalar>(
    out: &ForwardOutput<T>,
    ctc_target: &CtcTarget,
    phrase_target: FrameCeTarget,
    config: &ModelConfig,
) -> Result<MtlBreakdown<T>> {
    let lam_ctc = T::from_f64(config.lambda_ctc);
    let lam_phr = T::from_f64(config.lambda_phrase);
    let frames = out.phonetic_log_probs.rows();

    let (ctc, mut d_phonetic_logits) = if config.lambda_ctc == 0.0 {
        (T::zero(), Matrix::zeros(frames, out.phonetic_log_probs.cols()))
    } else {
        let (loss, d_logp) = ctc_loss(&out.phonetic_log_probs, ctc_target)?;
        (loss, log_softmax_backward(&out.phonetic_log_probs, &d_logp))
    };
    d_phonetic_logits = d_phonetic_logits.scale(lam_ctc);

    let (phrase, mut d_phrase_logits) = if config.lambda_phrase == 0.0 {
        (T::zero(), Matrix::zeros(frames, 2))
    } else {
        match config.phrase_loss {
            PhraseLoss::FrameCe => frame_ce_loss(&out.phrase_logits, phrase_target, None)?,
            PhraseLoss::CtcSeq => {
                // The whole phrase is one CTC token over a vocabulary of one:
                // target [0] for a true trigger, empty for a false one.
                let labels = if phrase_target.class() == 1 { vec![0] } else { vec![] };
                let target = CtcTarget::new(labels, 1)?;
                let log_probs = row_log_softmax(&out.phrase_logits);
                let (loss, d_logp) = ctc_loss(&log_probs, &target)?;
                (loss, log_softmax_backward(&log_probs, &d_logp))
            }
        }
    };
    d_phrase_logits = d_phrase_logits.scale(lam_phr);

    // 0 * inf would poison the total; a zero lambda disables its branch
    // entirely (handled above by never computing it).
    let total = lam_ctc * ctc + lam_phr * phrase;
    Ok(MtlBreakdown {
        total,
        ctc,
        phrase,
        d_phonetic_logits,
        d_phrase_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::block_ranges;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 5,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 12,
            vocab_size: 3,
            lstm_hidden: 6,
            block_shift: 3,
            precision: Precision::F64,
            ..ModelConfig::default()
        }
    }

    fn random_features(t: usize, f: usize, rng: &mut SplitMix64) -> Matrix<f64> {
        Matrix::from_fn(t, f, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn forward_shape_contract() {
        let config = toy_config();
        let mut rng = SplitMix64::new(51);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let x = random_features(11, 5, &mut rng);
        let out = forward_full(&x, &params, &config, false, None).unwrap();
        assert_eq!(out.embeddings.shape(), (11, 8));
        assert_eq!(out.phonetic_log_probs.shape(), (11, 4));
        assert_eq!(out.phrase_logits.shape(), (11, 2));
    }

    #[test]
    fn phonetic_rows_are_log_distributions() {
        let config = toy_config();
        let mut rng = SplitMix64::new(52);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let x = random_features(7, 5, &mut rng);
        let out = forward_full(&x, &params, &config, false, None).unwrap();
        for t in 0..7 {
            let s: f64 = out.phonetic_log_probs.row(t).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(out.embeddings.all_finite() && out.phrase_logits.all_finite());
    }

    #[test]
    fn vanilla_equals_single_block_mask() {
        let mut rng = SplitMix64::new(53);
        let vanilla = ModelConfig { block_shift: 0, ..toy_config() };
        // T = 9 fits in one block when 2S >= T.
        let single = ModelConfig { block_shift: 5, ..toy_config() };
        let params = ModelParams::<f64>::init(&vanilla, &mut rng).unwrap();
        let x = random_features(9, 5, &mut rng);
        let a = forward_full(&x, &params, &vanilla, false, None).unwrap();
        let b = forward_full(&x, &params, &single, false, None).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.phonetic_log_probs, b.phonetic_log_probs);
        assert_eq!(a.phrase_logits, b.phrase_logits);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let config = toy_config();
        let a = ModelParams::<f64>::init(&config, &mut SplitMix64::new(7)).unwrap();
        let b = ModelParams::<f64>::init(&config, &mut SplitMix64::new(7)).unwrap();
        let mut names = Vec::new();
        a.for_each(&mut |name, _| names.push(name.to_string()));
        let tensors_a = a.tensors();
        let tensors_b = b.tensors();
        assert_eq!(tensors_a.len(), tensors_b.len());
        for ((na, ma), (nb, mb)) in tensors_a.iter().zip(&tensors_b) {
            assert_eq!(na, nb);
            assert_eq!(ma, mb, "tensor {na}");
        }
    }

    #[test]
    fn streaming_blocks_reproduce_full_pass() {
        let config = toy_config();
        let mut rng = SplitMix64::new(54);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let t_total = 14; // 2S + S + S + partial 2 with S = 3
        let x = random_features(t_total, 5, &mut rng);
        let full = forward_full(&x, &params, &config, false, None).unwrap();

        let mut state = BlockState::new(&config).unwrap();
        let spec = config.block_spec().unwrap();
        let mut got_rows = 0;
        for range in block_ranges(t_total, spec) {
            let block = x.slice_rows(range.start, range.end);
            let out = forward_block(&block, &params, &config, &mut state).unwrap();
            for (i, t) in (range.start..range.end).enumerate() {
                for c in 0..config.d_model {
                    let diff = (out.embeddings.at(i, c) - full.embeddings.at(t, c)).abs();
                    assert!(diff < 1e-12, "frame {t} dim {c}: {diff}");
                }
                for c in 0..2 {
                    let diff = (out.phrase_logits.at(i, c) - full.phrase_logits.at(t, c)).abs();
                    assert!(diff < 1e-12, "frame {t} phrase col {c}: {diff}");
                }
                got_rows += 1;
            }
        }
        assert_eq!(got_rows, t_total);
        assert_eq!(state.offset(), t_total);
    }

    #[test]
    fn state_bytes_formula() {
        let config = toy_config();
        let state = BlockState::<f64>::new(&config).unwrap();
        // 2 layers x S=3 x D=8 doubles, plus 2 x H=6 doubles.
        assert_eq!(state.state_bytes(&config), (2 * 3 * 8 + 2 * 6) * 8);
        let no_lstm = ModelConfig { lstm_in_phrase_branch: false, ..config };
        let s2 = BlockState::<f64>::new(&no_lstm).unwrap();
        assert_eq!(s2.state_bytes(&no_lstm), 2 * 3 * 8 * 8);
    }

    #[test]
    fn config_text_round_trips() {
        let config = ModelConfig {
            lambda_phrase: 0.25,
            dropout: 0.1,
            phrase_loss: PhraseLoss::CtcSeq,
            ..toy_config()
        };
        let text = config.to_text();
        let parsed = ModelConfig::from_text(&text).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn config_text_rejects_junk() {
        assert!(ModelConfig::from_text("nonsense=1\n").is_err());
        assert!(ModelConfig::from_text("d_model\n").is_err());
        assert!(ModelConfig::from_text("d_model=8\nd_model=8\n").is_err());
        assert!(ModelConfig::from_text("d_model=7\nn_heads=2\n").is_err());
        assert!(ModelConfig::from_text("dropout=1.5\n").is_err());
    }

    #[test]
    fn forward_rejects_wrong_feature_dim() {
        let config = toy_config();
        let mut rng = SplitMix64::new(55);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let x = random_features(4, 6, &mut rng);
        assert!(forward_full(&x, &params, &config, false, None).is_err());
    }

    #[test]
    fn dropout_needs_rng_and_changes_output() {
        let config = ModelConfig { dropout: 0.5, ..toy_config() };
        let mut rng = SplitMix64::new(56);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let x = random_features(6, 5, &mut rng);
        assert!(forward_full(&x, &params, &config, true, None).is_err());
        let eval = forward_full(&x, &params, &config, false, None).unwrap();
        let mut drop_rng = SplitMix64::new(99);
        let train = forward_full(&x, &params, &config, true, Some(&mut drop_rng)).unwrap();
        assert!(eval
            .embeddings
            .max_abs_diff(&train.embeddings)
            .unwrap()
            > 1e-6);
    }

    #[test]
    fn ablation_variants_all_forward() {
        let mut rng = SplitMix64::new(57);
        let base = toy_config();
        let variants = [
            ModelConfig { block_shift: 0, phrase_loss: PhraseLoss::CtcSeq, lstm_in_phrase_branch: false, ..base.clone() },
            ModelConfig { block_shift: 3, phrase_loss: PhraseLoss::CtcSeq, lstm_in_phrase_branch: false, ..base.clone() },
            ModelConfig { block_shift: 0, phrase_loss: PhraseLoss::FrameCe, lstm_in_phrase_branch: true, ..base.clone() },
            ModelConfig { block_shift: 3, phrase_loss: PhraseLoss::FrameCe, lstm_in_phrase_branch: true, ..base.clone() },
        ];
        for (i, config) in variants.iter().enumerate() {
            let params = ModelParams::<f64>::init(config, &mut rng).unwrap();
            let x = random_features(10, 5, &mut rng);
            let out = forward_full(&x, &params, config, false, None).unwrap();
            assert!(out.phrase_logits.all_finite(), "variant {i}");
            let target = CtcTarget::new(vec![0, 2], config.vocab_size).unwrap();
            let mtl = mtl_loss(&out, &target, FrameCeTarget::new(1).unwrap(), config).unwrap();
            assert!(mtl.total.is_finite(), "variant {i}");
        }
    }

    #[test]
    fn mtl_zero_phrase_weight_zeroes_phrase_gradient() {
        let config = ModelConfig { lambda_phrase: 0.0, ..toy_config() };
        let mut rng = SplitMix64::new(58);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let x = random_features(9, 5, &mut rng);
        let out = forward_full(&x, &params, &config, false, None).unwrap();
        let target = CtcTarget::new(vec![1], 3).unwrap();
        let mtl = mtl_loss(&out, &target, FrameCeTarget::new(0).unwrap(), &config).unwrap();
        assert!(mtl.d_phrase_logits.data().iter().all(|&g| g == 0.0));
        assert!((mtl.total - mtl.ctc).abs() < 1e-15);
    }

    #[test]
    fn mtl_unit_weights_sum_losses() {
        let config = toy_config();
        let mut rng = SplitMix64::new(59);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let x = random_features(9, 5, &mut rng);
        let out = forward_full(&x, &params, &config, false, None).unwrap();
        let target = CtcTarget::new(vec![1, 0], 3).unwrap();
        let mtl = mtl_loss(&out, &target, FrameCeTarget::new(1).unwrap(), &config).unwrap();
        assert!(mtl.ctc.is_finite() && mtl.phrase.is_finite());
        assert!((mtl.total - (mtl.ctc + mtl.phrase)).abs() < 1e-12);
    }

    #[test]
    fn mtl_ctc_seq_matches_direct_composition() {
        let config = ModelConfig { phrase_loss: PhraseLoss::CtcSeq, ..toy_config() };
        let mut rng = SplitMix64::new(60);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let x = random_features(8, 5, &mut rng);
        let out = forward_full(&x, &params, &config, false, None).unwrap();
        let target = CtcTarget::new(vec![2], 3).unwrap();
        for class in [0usize, 1] {
            let mtl =
                mtl_loss(&out, &target, FrameCeTarget::new(class).unwrap(), &config).unwrap();
            let labels = if class == 1 { vec![0] } else { vec![] };
            let direct = ctc_loss(
                &row_log_softmax(&out.phrase_logits),
                &CtcTarget::new(labels, 1).unwrap(),
            )
            .unwrap()
            .0;
            assert!((mtl.phrase - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn mtl_gradients_match_finite_differences_at_heads() {
        // Finite differences through mtl_loss alone, treating the two logit
        // matrices as free inputs.
        let config = toy_config();
        let mut rng = SplitMix64::new(61);
        let frames = 7;
        let phonetic_logits = Matrix::from_fn(frames, 4, |_, _| rng.uniform(-1.5, 1.5));
        let phrase_logits = Matrix::from_fn(frames, 2, |_, _| rng.uniform(-1.5, 1.5));
        let target = CtcTarget::new(vec![0, 2], 3).unwrap();
        let phrase_t = FrameCeTarget::new(1).unwrap();

        let eval = |ph: &Matrix<f64>, pr: &Matrix<f64>| -> f64 {
            let out = ForwardOutput {
                embeddings: Matrix::zeros(frames, 1),
                phonetic_log_probs: row_log_softmax(ph),
                phrase_logits: pr.clone(),
            };
            mtl_loss(&out, &target, phrase_t, &config).unwrap().total
        };

        let out = ForwardOutput {
            embeddings: Matrix::zeros(frames, 1),
            phonetic_log_probs: row_log_softmax(&phonetic_logits),
            phrase_logits: phrase_logits.clone(),
        };
        let mtl = mtl_loss(&out, &target, phrase_t, &config).unwrap();
        let eps = 1e-6;
        for t in 0..frames {
            for k in 0..4 {
                let mut plus = phonetic_logits.clone();
                plus.set(t, k, plus.at(t, k) + eps);
                let mut minus = phonetic_logits.clone();
                minus.set(t, k, minus.at(t, k) - eps);
                let fd = (eval(&plus, &phrase_logits) - eval(&minus, &phrase_logits)) / (2.0 * eps);
                let an = mtl.d_phonetic_logits.at(t, k);
                assert!((fd - an).abs() < 1e-5, "phonetic t={t} k={k}: {fd} vs {an}");
            }
            for c in 0..2 {
                let mut plus = phrase_logits.clone();
                plus.set(t, c, plus.at(t, c) + eps);
                let mut minus = phrase_logits.clone();
                minus.set(t, c, minus.at(t, c) - eps);
                let fd =
                    (eval(&phonetic_logits, &plus) - eval(&phonetic_logits, &minus)) / (2.0 * eps);
                let an = mtl.d_phrase_logits.at(t, c);
                assert!((fd - an).abs() < 1e-5, "phrase t={t} c={c}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn phrase_positive_prob_modes() {
        let row = [2.0f64, -1.0];
        let ce = phrase_positive_prob(&row, PhraseLoss::FrameCe);
        let want_ce = (-1.0f64).exp() / (2.0f64.exp() + (-1.0f64).exp());
        assert!((ce - want_ce).abs() < 1e-12);
        let ctc = phrase_positive_prob(&row, PhraseLoss::CtcSeq);
        let want_ctc = 2.0f64.exp() / (2.0f64.exp() + (-1.0f64).exp());
        assert!((ctc - want_ctc).abs() < 1e-12);
        assert!((ce + ctc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_traversal_is_complete_and_stable() {
        let config = toy_config();
        let mut rng = SplitMix64::new(62);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let mut names = Vec::new();
        params.for_each(&mut |name, _| names.push(name.to_string()));
        // 2 proj + 2 layers x 12 + 2 final + 2 phonetic + 3 lstm + 2 phrase.
        assert_eq!(names.len(), 2 + 2 * 12 + 2 + 2 + 3 + 2);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "duplicate tensor names");
        let no_lstm = ModelConfig { lstm_in_phrase_branch: false, ..config };
        let p2 = ModelParams::<f64>::init(&no_lstm, &mut rng).unwrap();
        assert_eq!(p2.tensor_count(), names.len() - 3);
    }
}
