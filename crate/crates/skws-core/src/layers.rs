//! Frame-local layers and the unidirectional LSTM.
//!
//! Everything here except the LSTM operates row by row, which is what makes
//! the streaming encoder exact: splitting a sequence into blocks and applying
//! these layers per block gives the same rows as one full pass. The LSTM is
//! sequential but carries its `(h, c)` state across block boundaries, so the
//! same argument applies.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Sinusoidal absolute positional encoding rows for positions
/// `offset .. offset + frames`:
/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(same)`.
///
/// Streaming blocks pass their running frame offset so the rows match a
/// full-sequence table exactly.
pub fn positional_encoding<T: Scalar>(offset: usize, frames: usize, d_model: usize) -> Matrix<T> {
    Matrix::from_fn(frames, d_model, |t, c| {
        let pos = (offset + t) as f64;
        let i = (c / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * i / d_model as f64);
        T::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Affine layer `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(w: Matrix<T>, b: Matrix<T>) -> Result<Self> {
        if b.shape() != (1, w.cols()) {
            return Err(Error::ShapeMismatch {
                op: "dense bias",
                left: w.shape(),
                right: b.shape(),
            });
        }
        Ok(Dense { w, b })
    }

    pub fn xavier(inputs: usize, outputs: usize, rng: &mut SplitMix64) -> Self {
        Dense {
            w: Matrix::xavier(inputs, outputs, rng),
            b: Matrix::zeros(1, outputs),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        x.matmul(&self.w)?.add_row_broadcast(&self.b)
    }
}

/// Layer normalization over the feature axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
    pub eps: T,
}

/// Variance epsilon shared by every normalization site.
pub const LN_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d_model: usize) -> Self {
        LayerNorm {
            gamma: Matrix::filled(1, d_model, T::one()),
            beta: Matrix::zeros(1, d_model),
            eps: T::from_f64(LN_EPS),
        }
    }

    /// Normalize each row to zero mean and unit variance (biased variance),
    /// then scale by gamma and shift by beta. Also returns the normalized
    /// rows and per-row inverse standard deviations for backpropagation.
    pub(crate) fn forward_with_stats(
        &self,
        x: &Matrix<T>,
    ) -> Result<(Matrix<T>, Matrix<T>, Vec<T>)> {
        let d = self.gamma.cols();
        if x.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: x.shape(),
                right: self.gamma.shape(),
            });
        }
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut out = Matrix::zeros(x.rows(), d);
        let mut x_hat = Matrix::zeros(x.rows(), d);
        let mut inv_stds = Vec::with_capacity(x.rows());
        for t in 0..x.rows() {
            let row = x.row(t);
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv_std = (var + self.eps).sqrt().recip();
            inv_stds.push(inv_std);
            let hat_row = x_hat.row_mut(t);
            for c in 0..d {
                hat_row[c] = (row[c] - mean) * inv_std;
            }
            let out_row = out.row_mut(t);
            for c in 0..d {
                out_row[c] = x_hat.at(t, c) * self.gamma.at(0, c) + self.beta.at(0, c);
            }
        }
        Ok((out, x_hat, inv_stds))
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward_with_stats(x).map(|(y, _, _)| y)
    }
}

/// Elementwise rectifier.
pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Position-wise feed-forward block: dense, ReLU, dense.
#[derive(Debug, Clone)]
pub struct FeedForward<T> {
    pub inner: Dense<T>,
    pub outer: Dense<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn xavier(d_model: usize, d_ff: usize, rng: &mut SplitMix64) -> Self {
        FeedForward {
            inner: Dense::xavier(d_model, d_ff, rng),
            outer: Dense::xavier(d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.outer.forward(&relu(&self.inner.forward(x)?))
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    (T::one() + (-v).exp()).recip()
}

/// Hidden and cell state of the LSTM, carried across streaming blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
        }
    }
}

/// Single-layer unidirectional LSTM.
///
/// Gate order in the stacked weight matrices is input, forget, candidate,
/// output: `w_ih: in x 4H`, `w_hh: H x 4H`, `bias: 1 x 4H`. The forget-gate
/// slice of the bias is initialized to one.
#[derive(Debug, Clone)]
pub struct Lstm<T> {
    pub w_ih: Matrix<T>,
    pub w_hh: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> Lstm<T> {
    pub fn xavier(inputs: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        let mut bias = Matrix::zeros(1, 4 * hidden);
        for g in hidden..2 * hidden {
            bias.set(0, g, T::one());
        }
        Lstm {
            w_ih: Matrix::xavier(inputs, 4 * hidden, rng),
            w_hh: Matrix::xavier(hidden, 4 * hidden, rng),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    /// One recurrence step. Mutates `state` in place; the new hidden vector
    /// is `state.h`. Returns the activated gate values `[i | f | g | o]`.
    pub fn step(&self, x_row: &[T], state: &mut LstmState<T>) -> Vec<T> {
        let hidden = self.hidden();
        // gates = x W_ih + h W_hh + b, laid out [i | f | g | o].
        let mut gates: Vec<T> = self.bias.row(0).to_vec();
        for (j, &xv) in x_row.iter().enumerate() {
            let w_row = self.w_ih.row(j);
            for (g, &w) in gates.iter_mut().zip(w_row) {
                *g = *g + xv * w;
            }
        }
        for (j, &hv) in state.h.iter().enumerate() {
            let w_row = self.w_hh.row(j);
            for (g, &w) in gates.iter_mut().zip(w_row) {
                *g = *g + hv * w;
            }
        }
        for k in 0..hidden {
            let i = sigmoid(gates[k]);
            let f = sigmoid(gates[hidden + k]);
            let g = gates[2 * hidden + k].tanh();
            let o = sigmoid(gates[3 * hidden + k]);
            let c = f * state.c[k] + i * g;
            state.h[k] = o * c.tanh();
            state.c[k] = c;
            gates[k] = i;
            gates[hidden + k] = f;
            gates[2 * hidden + k] = g;
            gates[3 * hidden + k] = o;
        }
        gates
    }

    /// Run over a sequence, mutating `state`, returning one hidden row per
    /// input frame.
    pub fn forward(&self, x: &Matrix<T>, state: &mut LstmState<T>) -> Result<Matrix<T>> {
        self.forward_with_tape(x, state).map(|(out, _)| out)
    }

    /// Like `forward`, also collecting the per-frame intermediates needed by
    /// backpropagation through time.
    pub(crate) fn forward_with_tape(
        &self,
        x: &Matrix<T>,
        state: &mut LstmState<T>,
    ) -> Result<(Matrix<T>, LstmTape<T>)> {
        if x.cols() != self.w_ih.rows() {
            return Err(Error::ShapeMismatch {
                op: "lstm",
                left: x.shape(),
                right: self.w_ih.shape(),
            });
        }
        let hidden = self.hidden();
        let mut tape = LstmTape {
            h0: state.h.clone(),
            c0: state.c.clone(),
            gates: Matrix::zeros(x.rows(), 4 * hidden),
            cells: Matrix::zeros(x.rows(), hidden),
            hiddens: Matrix::zeros(x.rows(), hidden),
        };
        let mut out = Matrix::zeros(x.rows(), hidden);
        for t in 0..x.rows() {
            let gates = self.step(x.row(t), state);
            tape.gates.row_mut(t).copy_from_slice(&gates);
            tape.cells.row_mut(t).copy_from_slice(&state.c);
            tape.hiddens.row_mut(t).copy_from_slice(&state.h);
            out.row_mut(t).copy_from_slice(&state.h);
        }
        Ok((out, tape))
    }
}

/// Per-frame LSTM intermediates for backpropagation through time: activated
/// gates `[i | f | g | o]`, cell states, hidden states, and the entry state.
#[derive(Debug, Clone)]
pub(crate) struct LstmTape<T> {
    pub h0: Vec<T>,
    pub c0: Vec<T>,
    pub gates: Matrix<T>,
    pub cells: Matrix<T>,
    pub hiddens: Matrix<T>,
}
