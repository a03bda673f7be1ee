use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

/// How a model's parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Gradients flow into the parameter store.
    Train,
    /// Parameters act as constants.
    Frozen,
}

pub(crate) fn bind(tape: &mut Tape, store: &ParamStore, id: ParamId, mode: Bind) -> Var {
    match mode {
        Bind::Train => tape.param(store, id),
        Bind::Frozen => tape.frozen_param(store, id),
    }
}

/// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

/// Affine layer `x W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), fan_in_uniform(rng, in_dim, in_dim, out_dim))?;
        let bias = store.insert(format!("{name}.bias"), fan_in_uniform(rng, in_dim, 1, out_dim))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Bind) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_dim {
            return shape_err(format!("linear expects {} inputs, got {cols}", self.in_dim));
        }
        let w = bind(tape, store, self.weight, mode);
        let b = bind(tape, store, self.bias, mode);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Perceptron with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Bind) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h, mode)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_dim).collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Recurrent state carried between [`LstmCell::step`] calls.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// Single-layer gated recurrent cell with input, forget and output gates
/// and a tanh candidate.
///
/// Gate pre-activations are computed in one fused product, column blocks
/// ordered `[input, forget, candidate, output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let w_input = store.insert(format!("{name}.w_input"), fan_in_uniform(rng, hidden_dim, in_dim, 4 * hidden_dim))?;
        let w_hidden = store.insert(format!("{name}.w_hidden"), fan_in_uniform(rng, hidden_dim, hidden_dim, 4 * hidden_dim))?;
        let bias = store.insert(format!("{name}.bias"), fan_in_uniform(rng, hidden_dim, 1, 4 * hidden_dim))?;
        Ok(Self { w_input, w_hidden, bias, in_dim, hidden_dim })
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        let hidden = tape.input(Tensor::zeros(batch, self.hidden_dim));
        let cell = tape.input(Tensor::zeros(batch, self.hidden_dim));
        LstmState { hidden, cell }
    }

    /// One step of the recurrence; the output is the new hidden state.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, state: LstmState, mode: Bind) -> Result<(Var, LstmState)> {
        let (batch, cols) = tape.shape(x);
        if cols != self.in_dim {
            return shape_err(format!("recurrent cell expects {} inputs, got {cols}", self.in_dim));
        }
        if tape.shape(state.hidden) != (batch, self.hidden_dim) || tape.shape(state.cell) != (batch, self.hidden_dim) {
            return shape_err(format!("recurrent state must be {batch}x{}", self.hidden_dim));
        }
        let h = self.hidden_dim;
        let wi = bind(tape, store, self.w_input, mode);
        let wh = bind(tape, store, self.w_hidden, mode);
        let b = bind(tape, store, self.bias, mode);
        let xi = tape.matmul(x, wi)?;
        let hh = tape.matmul(state.hidden, wh)?;
        let pre = tape.add(xi, hh)?;
        let pre = tape.add_row(pre, b)?;
        let i_pre = tape.slice_cols(pre, 0, h)?;
        let f_pre = tape.slice_cols(pre, h, 2 * h)?;
        let g_pre = tape.slice_cols(pre, 2 * h, 3 * h)?;
        let o_pre = tape.slice_cols(pre, 3 * h, 4 * h)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let g = tape.tanh(g_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let keep = tape.mul(f, state.cell)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell)?;
        let hidden = tape.mul(o, squashed)?;
        Ok((hidden, LstmState { hidden, cell }))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_input, self.w_hidden, self.bias]
    }
}

/// Layer normalization with learned per-feature scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::filled(1, dim, 1.0))?;
        let shift = store.insert(format!("{name}.shift"), Tensor::zeros(1, dim))?;
        Ok(Self { gain, shift, dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Bind) -> Result<Var> {
        let normed = tape.layer_norm(x, Self::EPS)?;
        let g = bind(tape, store, self.gain, mode);
        let s = bind(tape, store, self.shift, mode);
        let scaled = tape.mul_row(normed, g)?;
        tape.add_row(scaled, s)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.shift]
    }
}
