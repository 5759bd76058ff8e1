//! Multi-head self-attention in three interchangeable modes.
//!
//! - full context (no mask): every query attends to every key;
//! - masked simulation: a single full-sequence pass whose block-window mask
//!   reproduces streaming outputs exactly, used for training;
//! - iterative block streaming: incremental inference with a per-layer cache
//!   of the previous block shift.
//!
//! Block geometry: with shift `S` the block size is `B = 2S`. Block 1 covers
//! frames 1..2S and attends to keys 1..2S. Block `i >= 2` covers frames
//! `iS+1..(i+1)S` and attends to keys `(i-1)S+1..(i+1)S`, i.e. the newest
//! shift of queries against the current plus previous shift of keys/values.
//! The streaming path caches each layer's last `S` input frames and
//! recomputes key/value projections per block, which makes its outputs agree
//! with the masked pass bit for bit.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{row_softmax, Matrix};

/// Streaming geometry: block shift `S`, block size fixed at `2S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    shift: usize,
}

impl BlockSpec {
    pub fn new(shift: usize) -> Result<Self> {
        if shift == 0 {
            return Err(Error::InvalidConfig("block shift must be >= 1".into()));
        }
        Ok(BlockSpec { shift })
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn block_size(&self) -> usize {
        2 * self.shift
    }

    /// Block index (1-based) owning 1-based frame `t`: block 1 for `t <= 2S`,
    /// otherwise `ceil(t/S) - 1`.
    pub fn block_of(&self, t: usize) -> usize {
        debug_assert!(t >= 1);
        let s = self.shift;
        if t <= 2 * s {
            1
        } else {
            t.div_ceil(s) - 1
        }
    }

    /// Allowed key range for 1-based frame `t`, as a 0-based half-open range
    /// clipped to `frames`.
    pub fn key_window(&self, t: usize, frames: usize) -> std::ops::Range<usize> {
        let s = self.shift;
        let i = self.block_of(t);
        let (start, end) = if i == 1 {
            (1, 2 * s)
        } else {
            ((i - 1) * s + 1, (i + 1) * s)
        };
        (start - 1)..end.min(frames)
    }

    /// Number of blocks a stream of `frames` frames is split into.
    pub fn block_count(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else if frames <= 2 * self.shift {
            1
        } else {
            (frames - 2 * self.shift).div_ceil(self.shift) + 1
        }
    }
}

/// Boolean T x T attention mask that simulates block streaming in one pass.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    spec: BlockSpec,
    allowed: Matrix<bool>,
}

impl AttentionMask {
    /// Build the mask for a `frames`-long sequence under `spec`.
    pub fn build(frames: usize, spec: BlockSpec) -> Self {
        let mut allowed = Matrix::filled(frames, frames, false);
        for t in 1..=frames {
            for u in spec.key_window(t, frames) {
                allowed.set(t - 1, u, true);
            }
        }
        AttentionMask { spec, allowed }
    }

    pub fn frames(&self) -> usize {
        self.allowed.rows()
    }

    pub fn spec(&self) -> BlockSpec {
        self.spec
    }

    pub fn allowed(&self) -> &Matrix<bool> {
        &self.allowed
    }

    /// `true` if 0-based query `t` may attend to 0-based key `u`.
    pub fn is_allowed(&self, t: usize, u: usize) -> bool {
        self.allowed.at(t, u)
    }

    /// Text rendering: `#` allowed, `.` blocked, one line per query frame.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.frames() * (self.frames() + 1));
        for t in 0..self.frames() {
            for u in 0..self.frames() {
                out.push(if self.allowed.at(t, u) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

/// Projection weights of one self-attention layer (no biases).
#[derive(Debug, Clone)]
pub struct AttentionProjections<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub n_heads: usize,
}

impl<T: Scalar> AttentionProjections<T> {
    pub fn new(
        w_q: Matrix<T>,
        w_k: Matrix<T>,
        w_v: Matrix<T>,
        w_o: Matrix<T>,
        n_heads: usize,
    ) -> Result<Self> {
        let d = w_q.rows();
        for (name, m) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if m.shape() != (d, d) {
                return Err(Error::InvalidConfig(format!(
                    "attention projection {name} must be {d}x{d}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {d} not divisible by n_heads {n_heads}"
            )));
        }
        Ok(AttentionProjections {
            w_q,
            w_k,
            w_v,
            w_o,
            n_heads,
        })
    }

    pub fn random(d_model: usize, n_heads: usize, rng: &mut SplitMix64) -> Result<Self> {
        Self::new(
            Matrix::xavier(d_model, d_model, rng),
            Matrix::xavier(d_model, d_model, rng),
            Matrix::xavier(d_model, d_model, rng),
            Matrix::xavier(d_model, d_model, rng),
            n_heads,
        )
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }
}

/// Intermediates of one attention application, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct AttnTape<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Post-softmax weights, one `queries x keys` matrix per head.
    pub weights: Vec<Matrix<T>>,
    /// Concatenated head outputs before the output projection.
    pub heads: Matrix<T>,
}

/// Scaled dot-product attention over heads for queries `q_rows` of the
/// projected sequence, against keys/values `kv_rows`. `allowed` gives, per
/// query row, which kv rows participate (same row/col indexing as the
/// slices). Returns the concatenated head outputs before `w_o` plus the
/// per-head weights.
fn attend_heads<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    n_heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    let head_dim = q.cols() / n_heads;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut out = Matrix::zeros(q.rows(), q.cols());
    let mut per_head = Vec::with_capacity(n_heads);

    let mask = Matrix::from_fn(q.rows(), k.rows(), &allowed);
    for h in 0..n_heads {
        let off = h * head_dim;
        // Per-head logits: q_h k_h^T * scale.
        let mut logits = Matrix::zeros(q.rows(), k.rows());
        for t in 0..q.rows() {
            let q_row = &q.row(t)[off..off + head_dim];
            for u in 0..k.rows() {
                if !mask.at(t, u) {
                    continue;
                }
                let k_row = &k.row(u)[off..off + head_dim];
                let mut dot = T::zero();
                for (a, b) in q_row.iter().zip(k_row) {
                    dot = dot + *a * *b;
                }
                logits.set(t, u, dot * scale);
            }
        }
        let weights = row_softmax(&logits, Some(&mask))?;
        for t in 0..q.rows() {
            let out_row = &mut out.row_mut(t)[off..off + head_dim];
            for u in 0..k.rows() {
                let w = weights.at(t, u);
                if w == T::zero() {
                    continue;
                }
                let v_row = &v.row(u)[off..off + head_dim];
                for (o, &val) in out_row.iter_mut().zip(v_row) {
                    *o = *o + w * val;
                }
            }
        }
        per_head.push(weights);
    }
    Ok((out, per_head))
}

/// Full-sequence multi-head attention, optionally masked, returning the
/// intermediates training needs.
pub(crate) fn attend_full_tape<T: Scalar>(
    x: &Matrix<T>,
    proj: &AttentionProjections<T>,
    mask: Option<&AttentionMask>,
) -> Result<(Matrix<T>, AttnTape<T>)> {
    if x.cols() != proj.d_model() {
        return Err(Error::ShapeMismatch {
            op: "attend_full",
            left: x.shape(),
            right: proj.w_q.shape(),
        });
    }
    if let Some(m) = mask {
        if m.frames() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "attend_full mask",
                left: x.shape(),
                right: (m.frames(), m.frames()),
            });
        }
    }
    let q = x.matmul(&proj.w_q)?;
    let k = x.matmul(&proj.w_k)?;
    let v = x.matmul(&proj.w_v)?;
    let (heads, weights) = attend_heads(&q, &k, &v, proj.n_heads, |t, u| {
        mask.is_none_or(|m| m.is_allowed(t, u))
    })?;
    let out = heads.matmul(&proj.w_o)?;
    Ok((
        out,
        AttnTape {
            q,
            k,
            v,
            weights,
            heads,
        },
    ))
}

/// Full-sequence multi-head attention, optionally masked.
pub fn attend_full<T: Scalar>(
    x: &Matrix<T>,
    proj: &AttentionProjections<T>,
    mask: Option<&AttentionMask>,
) -> Result<Matrix<T>> {
    attend_full_tape(x, proj, mask).map(|(out, _)| out)
}

/// Per-layer streaming state: the last `shift` input frames of this layer.
///
/// Inputs are cached pre-projection; each block recomputes its key/value
/// projections from cache plus new frames, so streamed outputs match the
/// masked full pass exactly regardless of checkpoint layout.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    spec: BlockSpec,
    stored: Matrix<T>,
    frames_seen: usize,
    /// Set once a short (final) block has been processed; further calls error.
    closed: bool,
}

impl<T: Scalar> LayerCache<T> {
    pub fn new(spec: BlockSpec, d_model: usize) -> Self {
        LayerCache {
            spec,
            stored: Matrix::zeros(0, d_model),
            frames_seen: 0,
            closed: false,
        }
    }

    pub fn valid_len(&self) -> usize {
        self.stored.rows()
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn spec(&self) -> BlockSpec {
        self.spec
    }
}

/// One block of streaming attention.
///
/// The first call carries up to `2S` frames, later calls up to `S`; a call
/// shorter than its full block closes the cache (the stream has ended).
/// Queries are the new frames; keys/values are the cached shift plus the new
/// frames. Returns one output row per new frame.
pub fn attend_streaming<T: Scalar>(
    new_frames: &Matrix<T>,
    cache: &mut LayerCache<T>,
    proj: &AttentionProjections<T>,
) -> Result<Matrix<T>> {
    let s = cache.spec.shift();
    if cache.closed {
        return Err(Error::CacheMismatch(
            "stream already ended with a partial block".into(),
        ));
    }
    if new_frames.cols() != proj.d_model() {
        return Err(Error::CacheMismatch(format!(
            "block frames have dim {}, projections expect {}",
            new_frames.cols(),
            proj.d_model()
        )));
    }
    let expected = if cache.frames_seen == 0 { 2 * s } else { s };
    if new_frames.rows() > expected {
        return Err(Error::CacheMismatch(format!(
            "block carries {} frames, protocol allows at most {expected}",
            new_frames.rows()
        )));
    }
    if new_frames.rows() == 0 {
        return Ok(Matrix::zeros(0, proj.d_model()));
    }

    let window = cache.stored.vstack(new_frames)?;
    let q = new_frames.matmul(&proj.w_q)?;
    let k = window.matmul(&proj.w_k)?;
    let v = window.matmul(&proj.w_v)?;
    let (heads, _) = attend_heads(&q, &k, &v, proj.n_heads, |_, _| true)?;
    let out = heads.matmul(&proj.w_o)?;

    cache.frames_seen += new_frames.rows();
    if new_frames.rows() < expected {
        cache.closed = true;
    }
    // Keep the last S frames of everything seen so far.
    let keep = window.rows().min(s);
    cache.stored = window.slice_rows(window.rows() - keep, window.rows());
    Ok(out)
}

/// Split a full sequence into streaming blocks: one `2S` head block, then
/// `S`-frame blocks, with whatever remains as a final partial block.
pub fn block_ranges(frames: usize, spec: BlockSpec) -> Vec<std::ops::Range<usize>> {
    let s = spec.shift();
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < frames {
        let len = if start == 0 { 2 * s } else { s };
        let end = (start + len).min(frames);
        ranges.push(start..end);
        start = end;
    }
    ranges
}

/// Max abs difference between the masked full pass and the iterative
/// streamed pass over the same input. The two code paths are each other's
/// oracle; this should sit at numeric zero.
pub fn equivalence_report<T: Scalar>(
    x: &Matrix<T>,
    proj: &AttentionProjections<T>,
    spec: BlockSpec,
) -> Result<T> {
    let mask = AttentionMask::build(x.rows(), spec);
    let full = attend_full(x, proj, Some(&mask))?;

    let mut cache = LayerCache::new(spec, proj.d_model());
    let mut streamed = Matrix::zeros(0, proj.d_model());
    for range in block_ranges(x.rows(), spec) {
        let block = x.slice_rows(range.start, range.end);
        let out = attend_streaming(&block, &mut cache, proj)?;
        streamed = streamed.vstack(&out)?;
    }
    full.max_abs_diff(&streamed)
}
