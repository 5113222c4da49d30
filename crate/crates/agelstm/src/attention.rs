//! Attention head: one LSTM step over pooled backbone features produces a
//! location state; a sigmoid affine map turns it into a fractional bounding
//! box on the final feature map; a differentiable soft crop pools the boxed
//! region into a local feature vector for the local classifier head.
//!
//! The hard (integer) crop is kept alongside as an oracle and for region
//! visualization; training always goes through the soft mask so the location
//! weights receive gradients from the cross-entropy loss.

use crate::error::{Error, Result};
use crate::tape::{BoxEdges, Tape, TensorId};
use crate::tensor::Tensor;
use rand::Rng;

/// Cell/hidden width of the LSTM unit in the model presets.
pub const LSTM_HIDDEN: usize = 128;

/// Cell and hidden state carried across samples in a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: Vec<f32>,
    pub h: Vec<f32>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { c: vec![0.0; hidden], h: vec![0.0; hidden] }
    }

    pub fn reset(&mut self) {
        self.c.iter_mut().for_each(|v| *v = 0.0);
        self.h.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().chain(self.h.iter()).all(|v| v.is_finite())
    }
}

/// Gate weights/biases over the concatenated [h_prev, x_input], plus the
/// location weights mapping the 2*hidden state onto 4 box logits.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub w_loc: Tensor,
    pub input_dim: usize,
    pub hidden: usize,
}

impl AttentionParams {
    /// Model preset: hidden width 128, state vector 256.
    pub fn new<R: Rng>(input_dim: usize, rng: &mut R) -> Self {
        Self::with_dims(input_dim, LSTM_HIDDEN, rng)
    }

    /// Arbitrary dimensions (the scalar oracle uses hidden = 1).
    pub fn with_dims<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let cols = hidden + input_dim;
        let gate = |rng: &mut R| Tensor::glorot_uniform(vec![hidden, cols], cols, hidden, rng).param();
        let bias = |_: &mut R| Tensor::zeros(vec![hidden]).param();
        AttentionParams {
            w_i: gate(rng),
            b_i: bias(rng),
            w_f: gate(rng),
            b_f: bias(rng),
            w_o: gate(rng),
            b_o: bias(rng),
            w_c: gate(rng),
            b_c: bias(rng),
            w_loc: Tensor::glorot_uniform(vec![4, 2 * hidden], 2 * hidden, 4, rng).param(),
            input_dim,
            hidden,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionBinding {
        AttentionBinding {
            w_i: tape.leaf(&self.w_i),
            b_i: tape.leaf(&self.b_i),
            w_f: tape.leaf(&self.w_f),
            b_f: tape.leaf(&self.b_f),
            w_o: tape.leaf(&self.w_o),
            b_o: tape.leaf(&self.b_o),
            w_c: tape.leaf(&self.w_c),
            b_c: tape.leaf(&self.b_c),
            w_loc: tape.leaf(&self.w_loc),
        }
    }

    pub fn visit_params<'a, F: FnMut(String, &'a Tensor)>(&'a self, f: &mut F) {
        f("attn.w_i".into(), &self.w_i);
        f("attn.b_i".into(), &self.b_i);
        f("attn.w_f".into(), &self.w_f);
        f("attn.b_f".into(), &self.b_f);
        f("attn.w_o".into(), &self.w_o);
        f("attn.b_o".into(), &self.b_o);
        f("attn.w_c".into(), &self.w_c);
        f("attn.b_c".into(), &self.b_c);
        f("attn.w_loc".into(), &self.w_loc);
    }

    pub fn visit_params_mut<F: FnMut(String, &mut Tensor)>(&mut self, f: &mut F) {
        f("attn.w_i".into(), &mut self.w_i);
        f("attn.b_i".into(), &mut self.b_i);
        f("attn.w_f".into(), &mut self.w_f);
        f("attn.b_f".into(), &mut self.b_f);
        f("attn.w_o".into(), &mut self.w_o);
        f("attn.b_o".into(), &mut self.b_o);
        f("attn.w_c".into(), &mut self.w_c);
        f("attn.b_c".into(), &mut self.b_c);
        f("attn.w_loc".into(), &mut self.w_loc);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionBinding {
    pub w_i: TensorId,
    pub b_i: TensorId,
    pub w_f: TensorId,
    pub b_f: TensorId,
    pub w_o: TensorId,
    pub b_o: TensorId,
    pub w_c: TensorId,
    pub b_c: TensorId,
    pub w_loc: TensorId,
}

impl AttentionBinding {
    pub fn visit_ids<F: FnMut(TensorId)>(&self, f: &mut F) {
        f(self.w_i);
        f(self.b_i);
        f(self.w_f);
        f(self.b_f);
        f(self.w_o);
        f(self.b_o);
        f(self.w_c);
        f(self.b_c);
        f(self.w_loc);
    }
}

/// Tape-side results of one LSTM step.
pub struct LstmStepOut {
    pub c_next: TensorId,
    pub h_next: TensorId,
    /// concat(c_next, h_next), dimension 2*hidden.
    pub s_next: TensorId,
}

/// One LSTM update: gates are sigmoids of affine maps over [h_prev, x_input],
/// the candidate is tanh of its own affine map, and
/// c_next = forget * c_prev + input * candidate, h_next = out * tanh(c_next).
pub fn lstm_step(
    tape: &mut Tape,
    binding: &AttentionBinding,
    x_input: TensorId,
    c_prev: TensorId,
    h_prev: TensorId,
) -> Result<LstmStepOut> {
    let hx = tape.concat(h_prev, x_input)?;
    let zi = tape.linear(hx, binding.w_i, Some(binding.b_i))?;
    let gate_i = tape.sigmoid(zi);
    let zf = tape.linear(hx, binding.w_f, Some(binding.b_f))?;
    let gate_f = tape.sigmoid(zf);
    let zo = tape.linear(hx, binding.w_o, Some(binding.b_o))?;
    let gate_o = tape.sigmoid(zo);
    let zc = tape.linear(hx, binding.w_c, Some(binding.b_c))?;
    let cand = tape.tanh(zc);
    let keep = tape.mul(gate_f, c_prev)?;
    let write = tape.mul(gate_i, cand)?;
    let c_next = tape.add(keep, write)?;
    let c_t = tape.tanh(c_next);
    let h_next = tape.mul(gate_o, c_t)?;
    let s_next = tape.concat(c_next, h_next)?;
    Ok(LstmStepOut { c_next, h_next, s_next })
}

/// Location network: box = sigmoid(W * s_next), a 4-vector of fractions.
pub fn locate(tape: &mut Tape, w_loc: TensorId, s_next: TensorId) -> Result<TensorId> {
    let z = tape.linear(s_next, w_loc, None)?;
    Ok(tape.sigmoid(z))
}

/// Fractional box on the feature map: relative x, y, width, height, each in
/// (0,1) by construction (sigmoid outputs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionBox {
    pub l: [f64; 4],
}

impl AttentionBox {
    pub fn new(l1: f64, l2: f64, l3: f64, l4: f64) -> Self {
        AttentionBox { l: [l1, l2, l3, l4] }
    }

    pub fn from_tape(tape: &Tape, box4: TensorId) -> Self {
        let v = tape.value(box4);
        AttentionBox { l: [v[0], v[1], v[2], v[3]] }
    }
}

/// Integer rectangle on the feature grid: columns x0..x0+w, rows y0..y0+h.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

/// Continuous box edges in cell coordinates: width floors at one cell,
/// placement scales the leftover span, so edges always land in
/// [0,Wf] x [0,Hf].
pub fn box_to_edges(b: &AttentionBox, hf: usize, wf: usize) -> BoxEdges {
    BoxEdges::from_fractions(b.l[0], b.l[1], b.l[2], b.l[3], hf, wf)
}

/// Integer form: rounds edges half-up and clamps so the region stays in
/// bounds with area >= 1.
pub fn box_to_region(b: &AttentionBox, hf: usize, wf: usize) -> Region {
    let e = box_to_edges(b, hf, wf);
    let clamp_span = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        let mut s = (lo + 0.5).floor().max(0.0) as usize;
        let mut t = (hi + 0.5).floor().max(0.0) as usize;
        if t > n {
            t = n;
        }
        if s >= t {
            if t == n {
                s = n - 1;
            } else {
                t = s + 1;
            }
        }
        (s, t)
    };
    let (x0, x1) = clamp_span(e.x0, e.x1, wf);
    let (y0, y1) = clamp_span(e.y0, e.y1, hf);
    Region { x0, y0, w: x1 - x0, h: y1 - y0 }
}

/// Exact mean over an integer region of a [C,Hf,Wf] map. Oracle counterpart
/// of the soft crop, and the visualization form.
pub fn hard_crop_pool(map: &[f64], c: usize, hf: usize, wf: usize, region: Region) -> Result<Vec<f64>> {
    if region.w == 0 || region.h == 0 {
        return Err(Error::Input("crop region must have area >= 1".into()));
    }
    if region.x0 + region.w > wf || region.y0 + region.h > hf {
        return Err(Error::Input(format!(
            "region {region:?} out of bounds for {hf}x{wf} map"
        )));
    }
    if map.len() != c * hf * wf {
        return Err(Error::Input("map length disagrees with its stated shape".into()));
    }
    let norm = 1.0 / (region.w * region.h) as f64;
    let mut out = vec![0.0f64; c];
    for ci in 0..c {
        let base = ci * hf * wf;
        let mut acc = 0.0f64;
        for i in region.y0..region.y0 + region.h {
            for j in region.x0..region.x0 + region.w {
                acc += map[base + i * wf + j];
            }
        }
        out[ci] = acc * norm;
    }
    Ok(out)
}

/// Probability vector over K classes (age groups or discrete ages).
#[derive(Debug, Clone, PartialEq)]
pub struct AgeDistribution {
    pub probs: Vec<f64>,
    pub normalized: bool,
}

impl AgeDistribution {
    pub fn new_normalized(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Input("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("distribution sums to {sum}, not 1")));
        }
        Ok(AgeDistribution { probs, normalized: true })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Weighted fusion of the global and local predictions: raw = g + 0.5*l,
/// returned normalized by 1.5. The argmax of the raw sum and of the
/// normalized result are identical, so classification decisions are
/// unaffected by the rescaling.
pub fn fuse_predictions(global: &AgeDistribution, local: &AgeDistribution) -> Result<AgeDistribution> {
    if global.len() != local.len() {
        return Err(Error::Input(format!(
            "cannot fuse distributions of lengths {} and {}",
            global.len(),
            local.len()
        )));
    }
    if !global.normalized || !local.normalized {
        return Err(Error::Input("fusion expects normalized distributions".into()));
    }
    let probs = global
        .probs
        .iter()
        .zip(local.probs.iter())
        .map(|(g, l)| (g + 0.5 * l) / 1.5)
        .collect();
    Ok(AgeDistribution { probs, normalized: true })
}

/// Tape-side fusion for the fused-loss training mode.
pub fn fuse_on_tape(tape: &mut Tape, p_global: TensorId, p_local: TensorId) -> Result<TensorId> {
    let half_local = tape.scale(p_local, 0.5);
    let raw = tape.add(p_global, half_local)?;
    Ok(tape.scale(raw, 1.0 / 1.5))
}

/// Everything one attention pass produces on the tape.
pub struct AttentionForward {
    pub logits: TensorId,
    pub p_local: TensorId,
    pub box4: TensorId,
    pub s_next: TensorId,
    pub state_next: LstmState,
    pub local_features: TensorId,
}

/// Full attention pipeline over one feature map: pool to x_input, one LSTM
/// step, locate, soft-crop, local head, softmax. Returns the updated stream
/// state as plain values; gradients do not cross sample boundaries.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    tape: &mut Tape,
    binding: &AttentionBinding,
    head_w: TensorId,
    head_b: TensorId,
    fmap: TensorId,
    state: &LstmState,
    tau: f64,
) -> Result<AttentionForward> {
    let shape = tape.shape(fmap).to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Config(format!(
            "attention expects a square [C,S,S] feature map, got {shape:?}"
        )));
    }
    let (c, side) = (shape[0], shape[1]);
    let pooled = tape.avg_pool2d(fmap, side)?;
    let x_input = tape.reshape(pooled, vec![c])?;
    let c_prev = tape.constant_f32(vec![state.c.len()], &state.c);
    let h_prev = tape.constant_f32(vec![state.h.len()], &state.h);
    let step = lstm_step(tape, binding, x_input, c_prev, h_prev)?;
    let box4 = locate(tape, binding.w_loc, step.s_next)?;
    let local_features = tape.soft_crop_pool(fmap, box4, tau)?;
    let logits = tape.linear(local_features, head_w, Some(head_b))?;
    let p_local = tape.softmax(logits)?;
    let state_next = LstmState {
        c: tape.value_f32(step.c_next),
        h: tape.value_f32(step.h_next),
    };
    Ok(AttentionForward { logits, p_local, box4, s_next: step.s_next, state_next, local_features })
}
