//! Stacked LSTM layers with a dense output head.
//!
//! Each cell follows the classic four-unit layout:
//!
//! ```text
//! f_t = σ(b^f + K^f h_{t-1} + V^f w_t)          forget gate
//! g_t = σ(b^g + K^g h_{t-1} + V^g w_t)          input gate
//! c̃_t = tanh(b^c + K^c h_{t-1} + V^c w_t)       candidate
//! o_t = σ(b^o + K^o h_{t-1} + V^o w_t)          output gate
//! C_t = f_t ⊙ C_{t-1} + g_t ⊙ c̃_t
//! h_t = o_t ⊙ tanh(C_t)
//! ```
//!
//! The four gates are stored stacked along the row axis in the order
//! forget, input, candidate, output, so `V` is `4H × D_in`, `K` is `4H × H`
//! and `b` has length `4H`. Sequences are batched as `(B, T, D)` arrays and
//! every sequence starts from `h_0 = C_0 = 0`. Outputs at step `t` only ever
//! read inputs at steps `≤ t`.
//!
//! [`LayerStack::forward`] records a [`ForwardTape`]; [`LayerStack::backward`]
//! replays it in reverse to produce exact gradients for every parameter and
//! for the inputs.
//!
//! # Checkpoint format (version 1)
//!
//! A checkpoint is a JSON object:
//!
//! ```text
//! {
//!   "format": "privrel-lstm-stack",
//!   "version": 1,
//!   "input_size": D_in,
//!   "hidden_sizes": [H_1, ..., H_L],
//!   "output_size": D_out,
//!   "head": "linear" | "softmax" | "sigmoid",
//!   "layers": [ { "bias": [4H], "input_weights": [4H*D], "recurrent_weights": [4H*H] }, ... ],
//!   "head_weight": [D_out*H_L],
//!   "head_bias": [D_out]
//! }
//! ```
//!
//! Matrices are flattened row-major; gate blocks follow the order above.
//! Floats are written in shortest round-trip form, so a reload is bit-exact.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    Linear,
    Softmax,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Forget,
    Input,
    Candidate,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Input, Gate::Candidate, Gate::Output];

    fn block(self) -> usize {
        match self {
            Gate::Forget => 0,
            Gate::Input => 1,
            Gate::Candidate => 2,
            Gate::Output => 3,
        }
    }
}

/// What a parameter tensor is, as far as the optimizer cares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    GateBias,
    InputWeights,
    RecurrentWeights,
    HeadWeights,
    HeadBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    pub bias: Array1<f64>,
    pub input_weights: Array2<f64>,
    pub recurrent_weights: Array2<f64>,
}

impl LstmCellParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            bias: Array1::zeros(4 * hidden_size),
            input_weights: Array2::zeros((4 * hidden_size, input_size)),
            recurrent_weights: Array2::zeros((4 * hidden_size, hidden_size)),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.recurrent_weights.ncols()
    }

    pub fn input_size(&self) -> usize {
        self.input_weights.ncols()
    }

    pub fn gate_bias(&self, gate: Gate) -> ArrayView1<'_, f64> {
        let h = self.hidden_size();
        self.bias.slice(s![gate.block() * h..(gate.block() + 1) * h])
    }

    pub fn gate_input_weights(&self, gate: Gate) -> ArrayView2<'_, f64> {
        let h = self.hidden_size();
        self.input_weights
            .slice(s![gate.block() * h..(gate.block() + 1) * h, ..])
    }

    pub fn gate_recurrent_weights(&self, gate: Gate) -> ArrayView2<'_, f64> {
        let h = self.hidden_size();
        self.recurrent_weights
            .slice(s![gate.block() * h..(gate.block() + 1) * h, ..])
    }

    fn validate(&self, layer: usize) -> Result<()> {
        let h = self.hidden_size();
        let d = self.input_size();
        if h == 0 || d == 0 {
            return Err(Error::config(format!(
                "layer {layer}: hidden and input sizes must be at least 1"
            )));
        }
        if self.bias.len() != 4 * h
            || self.input_weights.nrows() != 4 * h
            || self.recurrent_weights.nrows() != 4 * h
        {
            return Err(Error::config(format!(
                "layer {layer}: gate blocks inconsistent with hidden size {h}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl LstmState {
    pub fn zeros(hidden_size: usize) -> Self {
        Self {
            h: Array1::zeros(hidden_size),
            c: Array1::zeros(hidden_size),
        }
    }
}

/// Activated gate values of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub forget: Array1<f64>,
    pub input: Array1<f64>,
    pub candidate: Array1<f64>,
    pub output: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseHead {
    /// `D_out × H`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: HeadActivation,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackArch {
    pub input_size: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_size: usize,
    pub head: HeadActivation,
}

impl StackArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.output_size == 0 {
            return Err(Error::config("input and output sizes must be at least 1"));
        }
        if self.hidden_sizes.is_empty() {
            return Err(Error::config("a stack needs at least one LSTM layer"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::config("hidden sizes must be at least 1"));
        }
        if self.head == HeadActivation::Softmax && self.output_size < 2 {
            return Err(Error::config("a softmax head needs at least two outputs"));
        }
        Ok(())
    }
}

/// Parameters of an LSTM stack plus its dense head. The same type doubles as
/// the gradient container, since gradients mirror parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<LstmCellParams>,
    pub head: DenseHead,
}

/// Per step, per layer cache for the backward pass.
#[derive(Clone, Debug)]
struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Activated gates, `B × 4H`.
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    fingerprint: u64,
    batch: usize,
    steps: usize,
    /// `[t][layer]`.
    cells: Vec<Vec<StepCache>>,
    /// Top-layer hidden state per step, `B × H_L`.
    top_hidden: Vec<Array2<f64>>,
    outputs: Array3<f64>,
}

impl ForwardTape {
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn outputs(&self) -> &Array3<f64> {
        &self.outputs
    }

    /// Gate activations of `layer` at step `t` for batch row `row`.
    pub fn gate_record(&self, t: usize, layer: usize, row: usize) -> GateRecord {
        let g = &self.cells[t][layer].gates;
        let h = g.ncols() / 4;
        let r = g.row(row);
        GateRecord {
            forget: r.slice(s![0..h]).to_owned(),
            input: r.slice(s![h..2 * h]).to_owned(),
            candidate: r.slice(s![2 * h..3 * h]).to_owned(),
            output: r.slice(s![3 * h..4 * h]).to_owned(),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// One batched cell step. Returns the cache plus the new `(h, c)`.
fn cell_step(
    params: &LstmCellParams,
    x: ArrayView2<'_, f64>,
    h_prev: &Array2<f64>,
    c_prev: &Array2<f64>,
) -> (StepCache, Array2<f64>, Array2<f64>) {
    let hs = params.hidden_size();
    let batch = x.nrows();
    let mut pre = Array2::zeros((batch, 4 * hs));
    pre += &params.bias;
    general_mat_mul(1.0, &x, &params.input_weights.t(), 1.0, &mut pre);
    general_mat_mul(1.0, h_prev, &params.recurrent_weights.t(), 1.0, &mut pre);

    for mut row in pre.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if (2 * hs..3 * hs).contains(&j) {
                v.tanh()
            } else {
                sigmoid(*v)
            };
        }
    }
    let gates = pre;

    let mut c = Array2::zeros((batch, hs));
    let mut tanh_c = Array2::zeros((batch, hs));
    let mut h = Array2::zeros((batch, hs));
    for b in 0..batch {
        let g = gates.row(b);
        for j in 0..hs {
            let f = g[j];
            let i = g[hs + j];
            let cand = g[2 * hs + j];
            let o = g[3 * hs + j];
            let cv = f * c_prev[[b, j]] + i * cand;
            let tc = cv.tanh();
            c[[b, j]] = cv;
            tanh_c[[b, j]] = tc;
            h[[b, j]] = o * tc;
        }
    }
    let cache = StepCache {
        x: x.to_owned(),
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        gates,
        tanh_c,
    };
    (cache, h, c)
}

/// Advances a single LSTM cell by one step for one sample.
pub fn lstm_step(
    params: &LstmCellParams,
    state: &LstmState,
    w_t: &[f64],
) -> Result<(LstmState, GateRecord)> {
    params.validate(0)?;
    let hs = params.hidden_size();
    if w_t.len() != params.input_size() {
        return Err(Error::config(format!(
            "input has {} features, cell expects {}",
            w_t.len(),
            params.input_size()
        )));
    }
    if state.h.len() != hs || state.c.len() != hs {
        return Err(Error::config(format!(
            "state size does not match hidden size {hs}"
        )));
    }
    ensure_finite(w_t, || "lstm input w_t".into())?;
    ensure_finite(state.h.iter().chain(state.c.iter()), || {
        "lstm state".into()
    })?;

    let x = ArrayView2::from_shape((1, w_t.len()), w_t).expect("row vector");
    let h_prev = state.h.clone().insert_axis(Axis(0));
    let c_prev = state.c.clone().insert_axis(Axis(0));
    let (cache, h, c) = cell_step(params, x, &h_prev, &c_prev);
    let next = LstmState {
        h: h.row(0).to_owned(),
        c: c.row(0).to_owned(),
    };
    ensure_finite(next.h.iter().chain(next.c.iter()), || {
        "lstm state after step".into()
    })?;
    let g = cache.gates.row(0);
    let record = GateRecord {
        forget: g.slice(s![0..hs]).to_owned(),
        input: g.slice(s![hs..2 * hs]).to_owned(),
        candidate: g.slice(s![2 * hs..3 * hs]).to_owned(),
        output: g.slice(s![3 * hs..4 * hs]).to_owned(),
    };
    Ok((next, record))
}

impl LayerStack {
    /// All-zero parameters for `arch`.
    pub fn zeros(arch: &StackArch) -> Self {
        let mut layers = Vec::with_capacity(arch.hidden_sizes.len());
        let mut input = arch.input_size;
        for &h in &arch.hidden_sizes {
            layers.push(LstmCellParams::zeros(input, h));
            input = h;
        }
        Self {
            layers,
            head: DenseHead {
                weight: Array2::zeros((arch.output_size, input)),
                bias: Array1::zeros(arch.output_size),
                activation: arch.head,
            },
        }
    }

    /// Glorot-uniform weights, forget-gate bias 1, every other bias 0.
    pub fn init(arch: &StackArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut stack = Self::zeros(arch);
        for layer in &mut stack.layers {
            let h = layer.hidden_size();
            let d = layer.input_size();
            let s_in = (6.0 / (d + h) as f64).sqrt();
            let s_rec = (6.0 / (2 * h) as f64).sqrt();
            layer
                .input_weights
                .mapv_inplace(|_| rng.gen_range(-s_in..=s_in));
            layer
                .recurrent_weights
                .mapv_inplace(|_| rng.gen_range(-s_rec..=s_rec));
            layer.bias.slice_mut(s![0..h]).fill(1.0);
        }
        let (out, h) = stack.head.weight.dim();
        let s_head = (6.0 / (out + h) as f64).sqrt();
        stack
            .head
            .weight
            .mapv_inplace(|_| rng.gen_range(-s_head..=s_head));
        Ok(stack)
    }

    pub fn arch(&self) -> StackArch {
        StackArch {
            input_size: self.input_size(),
            hidden_sizes: self.layers.iter().map(|l| l.hidden_size()).collect(),
            output_size: self.output_size(),
            head: self.head.activation,
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_size())
    }

    pub fn output_size(&self) -> usize {
        self.head.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("a stack needs at least one LSTM layer"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate(l)?;
            if l > 0 && layer.input_size() != self.layers[l - 1].hidden_size() {
                return Err(Error::config(format!(
                    "layer {l} expects {} inputs but layer {} has {} cells",
                    layer.input_size(),
                    l - 1,
                    self.layers[l - 1].hidden_size()
                )));
            }
        }
        let top = self.layers.last().expect("nonempty").hidden_size();
        if self.head.weight.ncols() != top || self.head.bias.len() != self.head.weight.nrows() {
            return Err(Error::config(format!(
                "head shape {:?} does not fit top layer of {top} cells",
                self.head.weight.dim()
            )));
        }
        Ok(())
    }

    /// Parameter tensors in a fixed order, flattened row-major.
    pub fn tensors(&self) -> Vec<(ParamRole, &[f64])> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for layer in &self.layers {
            out.push((ParamRole::GateBias, layer.bias.as_slice().expect("contiguous")));
            out.push((
                ParamRole::InputWeights,
                layer.input_weights.as_slice().expect("contiguous"),
            ));
            out.push((
                ParamRole::RecurrentWeights,
                layer.recurrent_weights.as_slice().expect("contiguous"),
            ));
        }
        out.push((
            ParamRole::HeadWeights,
            self.head.weight.as_slice().expect("contiguous"),
        ));
        out.push((
            ParamRole::HeadBias,
            self.head.bias.as_slice().expect("contiguous"),
        ));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamRole, &mut [f64])> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for layer in &mut self.layers {
            out.push((
                ParamRole::GateBias,
                layer.bias.as_slice_mut().expect("contiguous"),
            ));
            out.push((
                ParamRole::InputWeights,
                layer.input_weights.as_slice_mut().expect("contiguous"),
            ));
            out.push((
                ParamRole::RecurrentWeights,
                layer.recurrent_weights.as_slice_mut().expect("contiguous"),
            ));
        }
        out.push((
            ParamRole::HeadWeights,
            self.head.weight.as_slice_mut().expect("contiguous"),
        ));
        out.push((
            ParamRole::HeadBias,
            self.head.bias.as_slice_mut().expect("contiguous"),
        ));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Hash of shapes and exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for (_, t) in self.tensors() {
            hasher.write_usize(t.len());
            for v in t {
                hasher.write_u64(v.to_bits());
            }
        }
        hasher.write_u8(self.head.activation as u8);
        hasher.finish()
    }

    /// Runs the stack over `(B, T, D_in)` inputs from zero initial states.
    pub fn forward(&self, inputs: ArrayView3<'_, f64>) -> Result<(Array3<f64>, ForwardTape)> {
        self.validate()?;
        let (batch, steps, dim) = inputs.dim();
        if steps == 0 || batch == 0 {
            return Err(Error::usage("forward needs at least one sequence and one step"));
        }
        if dim != self.input_size() {
            return Err(Error::config(format!(
                "inputs have {dim} features, stack expects {}",
                self.input_size()
            )));
        }
        ensure_finite(inputs.iter(), || "stack inputs".into())?;

        let out_dim = self.output_size();
        let mut h: Vec<Array2<f64>> = self
            .layers
            .iter()
            .map(|l| Array2::zeros((batch, l.hidden_size())))
            .collect();
        let mut c = h.clone();
        let mut cells = Vec::with_capacity(steps);
        let mut top_hidden = Vec::with_capacity(steps);
        let mut outputs = Array3::zeros((batch, steps, out_dim));

        for t in 0..steps {
            let mut step_caches = Vec::with_capacity(self.layers.len());
            for (l, layer) in self.layers.iter().enumerate() {
                let (cache, h_new, c_new) = if l == 0 {
                    cell_step(layer, inputs.index_axis(Axis(1), t), &h[0], &c[0])
                } else {
                    let below = h[l - 1].view();
                    cell_step(layer, below, &h[l], &c[l])
                };
                h[l] = h_new;
                c[l] = c_new;
                step_caches.push(cache);
            }
            let top = h.last().expect("nonempty");
            let mut y = Array2::zeros((batch, out_dim));
            y += &self.head.bias;
            general_mat_mul(1.0, top, &self.head.weight.t(), 1.0, &mut y);
            match self.head.activation {
                HeadActivation::Linear => {}
                HeadActivation::Sigmoid => y.mapv_inplace(sigmoid),
                HeadActivation::Softmax => softmax_rows(&mut y),
            }
            outputs.index_axis_mut(Axis(1), t).assign(&y);
            top_hidden.push(top.clone());
            cells.push(step_caches);
        }
        ensure_finite(outputs.iter(), || "stack outputs".into())?;

        let tape = ForwardTape {
            fingerprint: self.fingerprint(),
            batch,
            steps,
            cells,
            top_hidden,
            outputs: outputs.clone(),
        };
        Ok((outputs, tape))
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, inputs: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        self.forward(inputs).map(|(out, _)| out)
    }

    /// Reverse-mode pass through the recorded tape.
    ///
    /// `grad_outputs` is `∂L/∂outputs` with the same `(B, T, D_out)` shape as
    /// the forward outputs (post-activation). Returns parameter gradients in
    /// a `LayerStack` of identical shape and `∂L/∂inputs` as `(B, T, D_in)`.
    pub fn backward(
        &self,
        tape: &ForwardTape,
        grad_outputs: ArrayView3<'_, f64>,
    ) -> Result<(LayerStack, Array3<f64>)> {
        if tape.fingerprint != self.fingerprint() {
            return Err(Error::usage(
                "tape was recorded with different parameters (stale or mismatched tape)",
            ));
        }
        let (batch, steps, out_dim) = grad_outputs.dim();
        if batch != tape.batch || steps != tape.steps || out_dim != self.output_size() {
            return Err(Error::usage(format!(
                "output gradient shape {:?} does not match tape ({}, {}, {})",
                grad_outputs.dim(),
                tape.batch,
                tape.steps,
                self.output_size()
            )));
        }
        ensure_finite(grad_outputs.iter(), || "output gradients".into())?;

        let n_layers = self.layers.len();
        let mut grads = self.zeros_like();
        let mut input_grads = Array3::zeros((batch, steps, self.input_size()));
        let mut dh_next: Vec<Array2<f64>> = self
            .layers
            .iter()
            .map(|l| Array2::zeros((batch, l.hidden_size())))
            .collect();
        let mut dc_next = dh_next.clone();

        for t in (0..steps).rev() {
            let y = tape.outputs.index_axis(Axis(1), t);
            let g = grad_outputs.index_axis(Axis(1), t);
            let d_pre_head = match self.head.activation {
                HeadActivation::Linear => g.to_owned(),
                HeadActivation::Sigmoid => {
                    let mut d = g.to_owned();
                    Zip::from(&mut d).and(&y).for_each(|d, &y| *d *= y * (1.0 - y));
                    d
                }
                HeadActivation::Softmax => {
                    let mut d = Array2::zeros(g.raw_dim());
                    for ((mut d_row, g_row), y_row) in
                        d.rows_mut().into_iter().zip(g.rows()).zip(y.rows())
                    {
                        let dot = g_row.dot(&y_row);
                        Zip::from(&mut d_row)
                            .and(&g_row)
                            .and(&y_row)
                            .for_each(|d, &g, &y| *d = y * (g - dot));
                    }
                    d
                }
            };
            let top = &tape.top_hidden[t];
            general_mat_mul(1.0, &d_pre_head.t(), top, 1.0, &mut grads.head.weight);
            grads.head.bias += &d_pre_head.sum_axis(Axis(0));
            let mut dh = d_pre_head.dot(&self.head.weight);

            for l in (0..n_layers).rev() {
                let layer = &self.layers[l];
                let cache = &tape.cells[t][l];
                let hs = layer.hidden_size();
                dh += &dh_next[l];

                let mut d_pre = Array2::zeros((batch, 4 * hs));
                let mut dc_prev = Array2::zeros((batch, hs));
                for b in 0..batch {
                    let gates = cache.gates.row(b);
                    for j in 0..hs {
                        let f = gates[j];
                        let i = gates[hs + j];
                        let cand = gates[2 * hs + j];
                        let o = gates[3 * hs + j];
                        let tc = cache.tanh_c[[b, j]];
                        let dh_bj = dh[[b, j]];
                        let dc = dh_bj * o * (1.0 - tc * tc) + dc_next[l][[b, j]];
                        d_pre[[b, j]] = dc * cache.c_prev[[b, j]] * f * (1.0 - f);
                        d_pre[[b, hs + j]] = dc * cand * i * (1.0 - i);
                        d_pre[[b, 2 * hs + j]] = dc * i * (1.0 - cand * cand);
                        d_pre[[b, 3 * hs + j]] = dh_bj * tc * o * (1.0 - o);
                        dc_prev[[b, j]] = dc * f;
                    }
                }
                let lg = &mut grads.layers[l];
                lg.bias += &d_pre.sum_axis(Axis(0));
                general_mat_mul(1.0, &d_pre.t(), &cache.x, 1.0, &mut lg.input_weights);
                general_mat_mul(1.0, &d_pre.t(), &cache.h_prev, 1.0, &mut lg.recurrent_weights);
                let dx = d_pre.dot(&layer.input_weights);
                dh_next[l] = d_pre.dot(&layer.recurrent_weights);
                dc_next[l] = dc_prev;
                if l == 0 {
                    input_grads.index_axis_mut(Axis(1), t).assign(&dx);
                } else {
                    dh = dx;
                }
            }
        }
        for (_, tensor) in grads.tensors() {
            ensure_finite(tensor, || "parameter gradients".into())?;
        }
        Ok((grads, input_grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&StackCheckpoint::from(self))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&StackCheckpoint::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: StackCheckpoint = serde_json::from_str(text)?;
        ckpt.try_into()
    }
}

pub const CHECKPOINT_FORMAT: &str = "privrel-lstm-stack";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerCheckpoint {
    bias: Vec<f64>,
    input_weights: Vec<f64>,
    recurrent_weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackCheckpoint {
    format: String,
    version: u32,
    input_size: usize,
    hidden_sizes: Vec<usize>,
    output_size: usize,
    head: HeadActivation,
    layers: Vec<LayerCheckpoint>,
    head_weight: Vec<f64>,
    head_bias: Vec<f64>,
}

impl From<&LayerStack> for StackCheckpoint {
    fn from(stack: &LayerStack) -> Self {
        let arch = stack.arch();
        StackCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            input_size: arch.input_size,
            hidden_sizes: arch.hidden_sizes,
            output_size: arch.output_size,
            head: arch.head,
            layers: stack
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    bias: l.bias.to_vec(),
                    input_weights: l.input_weights.iter().copied().collect(),
                    recurrent_weights: l.recurrent_weights.iter().copied().collect(),
                })
                .collect(),
            head_weight: stack.head.weight.iter().copied().collect(),
            head_bias: stack.head.bias.to_vec(),
        }
    }
}

impl TryFrom<StackCheckpoint> for LayerStack {
    type Error = Error;

    fn try_from(ckpt: StackCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::config(format!(
                "unknown checkpoint format {:?}",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        if ckpt.layers.len() != ckpt.hidden_sizes.len() {
            return Err(Error::config("layer count does not match hidden_sizes"));
        }
        let shape_err = |what: &str| Error::config(format!("checkpoint {what} has the wrong length"));
        let mut layers = Vec::with_capacity(ckpt.layers.len());
        let mut input = ckpt.input_size;
        for (l, &h) in ckpt.layers.into_iter().zip(&ckpt.hidden_sizes) {
            layers.push(LstmCellParams {
                bias: Array1::from(l.bias),
                input_weights: Array2::from_shape_vec((4 * h, input), l.input_weights)
                    .map_err(|_| shape_err("input_weights"))?,
                recurrent_weights: Array2::from_shape_vec((4 * h, h), l.recurrent_weights)
                    .map_err(|_| shape_err("recurrent_weights"))?,
            });
            input = h;
        }
        let stack = LayerStack {
            layers,
            head: DenseHead {
                weight: Array2::from_shape_vec((ckpt.output_size, input), ckpt.head_weight)
                    .map_err(|_| shape_err("head_weight"))?,
                bias: Array1::from(ckpt.head_bias),
                activation: ckpt.head,
            },
        };
        stack.validate()?;
        for (_, t) in stack.tensors() {
            ensure_finite(t, || "checkpoint parameters".into())?;
        }
        Ok(stack)
    }
}
