//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! The tape is rebuilt for every forward pass (define-by-run). Leaves are
//! copied in from [`Tensor`] storage and upcast to `f64`; every recorded
//! operation keeps its output values so the backward sweep can replay the
//! chain rule in reverse topological order. Parameters registered with
//! `requires_grad = false` are skipped entirely during backward, which is how
//! frozen stages are expressed.
//!
//! Storage stays `f32` (tensors, checkpoints, datasets); tape arithmetic runs
//! in `f64` so reductions and finite-difference checks stay tight.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch statistics captured by a train-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone)]
struct SoftCropSaved {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    // d(width)/d(l3) and d(height)/d(l4); zero when the 1-cell floor is active
    dw_dl3: f64,
    dh_dl4: f64,
    l1: f64,
    l2: f64,
    mass: f64,
    clamped: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: TensorId, w: TensorId, b: Option<TensorId>, stride: usize, pad: usize },
    BnTrain { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, inv_std: Vec<f64> },
    BnEval { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, inv_std: Vec<f64> },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    AvgPool2d { x: TensorId, window: usize },
    Linear { x: TensorId, w: TensorId, b: Option<TensorId> },
    Softmax { x: TensorId },
    CrossEntropy { logits: TensorId, labels: Vec<usize>, probs: Vec<f64> },
    NllProbs { probs: TensorId, label: usize },
    Concat { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    Sum { x: TensorId },
    Mean { x: TensorId },
    Reshape { x: TensorId },
    SoftCropPool { fmap: TensorId, box4: TensorId, tau: f64, saved: SoftCropSaved },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Counters surfaced to callers for conditions that are data, not errors.
#[derive(Debug, Default, Clone)]
pub struct Diagnostics {
    /// Times a soft crop's membership mass hit the 1e-8 floor.
    pub soft_crop_mass_clamps: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

const BN_EPS: f64 = 1e-5;
const SOFT_CROP_MIN_MASS: f64 = 1e-8;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    // No finiteness assertion here: a diverging training run legitimately
    // pushes non-finite values, and the trainer reports that from the loss.
    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register persistent storage as a leaf; `requires_grad` carries over.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let data = t.data().iter().map(|&v| v as f64).collect();
        self.push(data, t.shape().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// A leaf that never takes gradients (inputs, cached activations).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, false, Op::Leaf)
    }

    pub fn constant_f32(&mut self, shape: Vec<usize>, data: &[f32]) -> TensorId {
        let d = data.iter().map(|&v| v as f64).collect();
        self.constant(shape, d)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value_f32(&self, id: TensorId) -> Vec<f32> {
        self.nodes[id.0].data.iter().map(|&v| v as f32).collect()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of the last backward pass; zeros for off-path nodes.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn grad_f32(&self, id: TensorId) -> Vec<f32> {
        self.grads[id.0].iter().map(|&v| v as f32).collect()
    }

    // ── shape utilities ─────────────────────────────────────────────

    /// Interpret a rank-3 map as batch size 1; rank-4 passes through.
    fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
        match shape.len() {
            3 => Ok((1, shape[0], shape[1], shape[2], true)),
            4 => Ok((shape[0], shape[1], shape[2], shape[3], false)),
            _ => Err(Error::Config(format!("expected rank-3 or rank-4 tensor, got {shape:?}"))),
        }
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (n, c_in, h, wdt, squeeze) = Self::nchw(self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Config(format!("conv weight must be [C_out,C_in,k,k], got {ws:?}")));
        }
        let (c_out, wc_in, k) = (ws[0], ws[1], ws[2]);
        if wc_in != c_in {
            return Err(Error::Config(format!(
                "conv input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        if k > h + 2 * pad || k > wdt + 2 * pad {
            return Err(Error::Config(format!(
                "kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                wdt + 2 * pad
            )));
        }
        if let Some(bid) = b {
            if self.shape(bid) != [c_out] {
                return Err(Error::Config(format!(
                    "conv bias must be [{c_out}], got {:?}",
                    self.shape(bid)
                )));
            }
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (wdt + 2 * pad - k) / stride + 1;

        // valid kernel index range so inner loops run branch-free on slices
        let kh_range = |o: usize, extent: usize| -> (usize, usize) {
            let lo = pad.saturating_sub(o * stride).min(k);
            let hi = (extent + pad - o * stride).min(k);
            (lo, hi.max(lo))
        };
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let mut out = vec![0.0f64; n * c_out * h_out * w_out];
        for ni in 0..n {
            for co in 0..c_out {
                let bias = b.map(|bid| self.nodes[bid.0].data[co]).unwrap_or(0.0);
                for oh in 0..h_out {
                    let (kh_lo, kh_hi) = kh_range(oh, h);
                    for ow in 0..w_out {
                        let (kw_lo, kw_hi) = kh_range(ow, wdt);
                        let iw0 = ow * stride + kw_lo - pad;
                        let width = kw_hi - kw_lo;
                        let mut acc = 0.0f64;
                        for ci in 0..c_in {
                            let xbase = ((ni * c_in + ci) * h) * wdt;
                            let wbase = ((co * c_in + ci) * k) * k;
                            for kh in kh_lo..kh_hi {
                                let ih = oh * stride + kh - pad;
                                let xrow = xbase + ih * wdt + iw0;
                                let wrow = wbase + kh * k + kw_lo;
                                let xs = &xd[xrow..xrow + width];
                                let ws = &wd[wrow..wrow + width];
                                for i in 0..width {
                                    acc += xs[i] * ws[i];
                                }
                            }
                        }
                        out[((ni * c_out + co) * h_out + oh) * w_out + ow] = acc + bias;
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || b.map(|bid| self.requires(bid)).unwrap_or(false);
        let shape = if squeeze {
            vec![c_out, h_out, w_out]
        } else {
            vec![n, c_out, h_out, w_out]
        };
        Ok(self.push(out, shape, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Train-mode batchnorm: normalize with the batch's own statistics over
    /// (N, H, W) per channel. Returns the batch stats so the owning layer can
    /// fold them into its running buffers.
    pub fn batchnorm2d_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(TensorId, BnBatchStats)> {
        let (n, c, h, w, squeeze) = Self::nchw(self.shape(x))?;
        self.check_bn_params(c, gamma, beta)?;
        let count = n * h * w;
        if count < 2 {
            return Err(Error::Input(
                "batchnorm train mode needs at least 2 elements per channel".into(),
            ));
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ci in 0..c {
            let mut acc = 0.0f64;
            for ni in 0..n {
                let base = ((ni * c + ci) * h) * w;
                for i in 0..h * w {
                    acc += xd[base + i];
                }
            }
            mean[ci] = acc / count as f64;
            let mut vacc = 0.0f64;
            for ni in 0..n {
                let base = ((ni * c + ci) * h) * w;
                for i in 0..h * w {
                    let d = xd[base + i] - mean[ci];
                    vacc += d * d;
                }
            }
            var[ci] = vacc / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = vec![0.0f64; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = ((ni * c + ci) * h) * w;
                for i in 0..h * w {
                    out[base + i] = (xd[base + i] - mean[ci]) * inv_std[ci] * gd[ci] + bd[ci];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let shape = if squeeze { vec![c, h, w] } else { vec![n, c, h, w] };
        let stats = BnBatchStats {
            mean: mean.iter().map(|&v| v as f32).collect(),
            var: var.iter().map(|&v| v as f32).collect(),
        };
        let id = self.push(out, shape, rg, Op::BnTrain { x, gamma, beta, mean, inv_std });
        Ok((id, stats))
    }

    /// Eval-mode batchnorm: a pure function of the input and stored stats.
    pub fn batchnorm2d_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f32],
        running_var: &[f32],
    ) -> Result<TensorId> {
        let (n, c, h, w, squeeze) = Self::nchw(self.shape(x))?;
        self.check_bn_params(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Config(format!(
                "running stats must have {c} channels, got {}/{}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let mean: Vec<f64> = running_mean.iter().map(|&v| v as f64).collect();
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v as f64 + BN_EPS).sqrt()).collect();
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut out = vec![0.0f64; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = ((ni * c + ci) * h) * w;
                for i in 0..h * w {
                    out[base + i] = (xd[base + i] - mean[ci]) * inv_std[ci] * gd[ci] + bd[ci];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let shape = if squeeze { vec![c, h, w] } else { vec![n, c, h, w] };
        Ok(self.push(out, shape, rg, Op::BnEval { x, gamma, beta, mean, inv_std }))
    }

    fn check_bn_params(&self, c: usize, gamma: TensorId, beta: TensorId) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Config(format!(
                "batchnorm gamma/beta must be [{c}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::Tanh { x })
    }

    /// Non-overlapping average pooling (stride = window). The global case
    /// (window = H = W) reduces each map to a single value.
    pub fn avg_pool2d(&mut self, x: TensorId, window: usize) -> Result<TensorId> {
        let (n, c, h, w, squeeze) = Self::nchw(self.shape(x))?;
        if window == 0 || window > h || window > w {
            return Err(Error::Config(format!(
                "pool window {window} does not fit input {h}x{w}"
            )));
        }
        let h_out = h / window;
        let w_out = w / window;
        let xd = &self.nodes[x.0].data;
        let norm = 1.0 / (window * window) as f64;
        let mut out = vec![0.0f64; n * c * h_out * w_out];
        for ni in 0..n {
            for ci in 0..c {
                let base = ((ni * c + ci) * h) * w;
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = 0.0f64;
                        for kh in 0..window {
                            let row = base + (oh * window + kh) * w + ow * window;
                            for kw in 0..window {
                                acc += xd[row + kw];
                            }
                        }
                        out[((ni * c + ci) * h_out + oh) * w_out + ow] = acc * norm;
                    }
                }
            }
        }
        let rg = self.requires(x);
        let shape = if squeeze {
            vec![c, h_out, w_out]
        } else {
            vec![n, c, h_out, w_out]
        };
        Ok(self.push(out, shape, rg, Op::AvgPool2d { x, window }))
    }

    /// y = W x + b for a vector, or X W^T + b row-wise for a batch.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(Error::Config(format!("linear weight must be rank 2, got {ws:?}")));
        }
        let (d_out, d_in) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        let (n, batched) = match xs.as_slice() {
            [d] if *d == d_in => (1, false),
            [n, d] if *d == d_in => (*n, true),
            _ => {
                return Err(Error::Config(format!(
                    "linear input {xs:?} incompatible with weight [{d_out},{d_in}]"
                )))
            }
        };
        if let Some(bid) = b {
            if self.shape(bid) != [d_out] {
                return Err(Error::Config(format!(
                    "linear bias must be [{d_out}], got {:?}",
                    self.shape(bid)
                )));
            }
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let mut out = vec![0.0f64; n * d_out];
        for ni in 0..n {
            for o in 0..d_out {
                let mut acc = 0.0f64;
                let wrow = o * d_in;
                let xrow = ni * d_in;
                for i in 0..d_in {
                    acc += wd[wrow + i] * xd[xrow + i];
                }
                if let Some(bid) = b {
                    acc += self.nodes[bid.0].data[o];
                }
                out[ni * d_out + o] = acc;
            }
        }
        let rg = self.requires(x) || self.requires(w) || b.map(|bid| self.requires(bid)).unwrap_or(false);
        let shape = if batched { vec![n, d_out] } else { vec![d_out] };
        Ok(self.push(out, shape, rg, Op::Linear { x, w, b }))
    }

    /// Max-subtracted softmax over the last axis (vector or rows of a matrix).
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let (n, k) = match xs.as_slice() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            _ => return Err(Error::Config(format!("softmax expects rank 1 or 2, got {xs:?}"))),
        };
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0f64; n * k];
        for ni in 0..n {
            let row = &xd[ni * k..(ni + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0f64;
            for i in 0..k {
                let e = (row[i] - max).exp();
                out[ni * k + i] = e;
                denom += e;
            }
            for i in 0..k {
                out[ni * k + i] /= denom;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, xs, rg, Op::Softmax { x }))
    }

    /// Stable cross-entropy from logits. Returns (probs, loss); the loss is
    /// the mean of per-row -log p[label].
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<(TensorId, TensorId)> {
        let xs = self.shape(logits).to_vec();
        let (n, k) = match xs.as_slice() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            _ => {
                return Err(Error::Config(format!(
                    "cross entropy expects rank-1 or rank-2 logits, got {xs:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(Error::Input(format!("{n} logit rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let probs = self.softmax(logits)?;
        let pd = self.nodes[probs.0].data.clone();
        let xd = &self.nodes[logits.0].data;
        let mut loss = 0.0f64;
        for ni in 0..n {
            let row = &xd[ni * k..(ni + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            loss -= row[labels[ni]] - lse;
        }
        loss /= n as f64;
        let rg = self.requires(logits);
        let id = self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs: pd },
        );
        Ok((probs, id))
    }

    /// -ln p[label] on an already-normalized distribution (fused-loss path).
    pub fn nll_from_probs(&mut self, probs: TensorId, label: usize) -> Result<TensorId> {
        let xs = self.shape(probs).to_vec();
        if xs.len() != 1 {
            return Err(Error::Config(format!("nll_from_probs expects a vector, got {xs:?}")));
        }
        if label >= xs[0] {
            return Err(Error::Input(format!("label {label} out of range for {} classes", xs[0])));
        }
        let p = self.nodes[probs.0].data[label].max(1e-300);
        let rg = self.requires(probs);
        Ok(self.push(vec![-p.ln()], vec![1], rg, Op::NllProbs { probs, label }))
    }

    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::Config(format!("concat expects vectors, got {sa:?} and {sb:?}")));
        }
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![sa[0] + sb[0]], rg, Op::Concat { a, b }))
    }

    fn elementwise(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Config(format!(
                "{name} requires matching shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.requires(x);
        self.push(vec![s], vec![1], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len() as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.requires(x);
        self.push(vec![s / n], vec![1], rg, Op::Mean { x })
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.nodes[x.0].data.len() {
            return Err(Error::Config(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.requires(x);
        Ok(self.push(data, shape, rg, Op::Reshape { x }))
    }

    /// Differentiable crop-and-average over a feature map.
    ///
    /// `box4` holds (l1, l2, l3, l4) in (0,1): relative x, y, width, height.
    /// Each cell's membership is a product of four sigmoids of sharpness
    /// `tau` against the box edges; the output per channel is the
    /// membership-weighted mean. Gradients flow to both the map and the box.
    pub fn soft_crop_pool(&mut self, fmap: TensorId, box4: TensorId, tau: f64) -> Result<TensorId> {
        if tau <= 0.0 {
            return Err(Error::Config("soft crop sharpness tau must be > 0".into()));
        }
        let fs = self.shape(fmap).to_vec();
        if fs.len() != 3 {
            return Err(Error::Config(format!("soft crop expects [C,H,W] map, got {fs:?}")));
        }
        if self.shape(box4) != [4] {
            return Err(Error::Config(format!(
                "soft crop expects a 4-vector box, got {:?}",
                self.shape(box4)
            )));
        }
        let (c, hf, wf) = (fs[0], fs[1], fs[2]);
        let b = &self.nodes[box4.0].data;
        let (l1, l2, l3, l4) = (b[0], b[1], b[2], b[3]);
        let edges = BoxEdges::from_fractions(l1, l2, l3, l4, hf, wf);

        let ax: Vec<f64> = (0..wf).map(|j| sigmoid(tau * (j as f64 + 0.5 - edges.x0))).collect();
        let bx: Vec<f64> = (0..wf).map(|j| sigmoid(tau * (edges.x1 - (j as f64 + 0.5)))).collect();
        let cy: Vec<f64> = (0..hf).map(|i| sigmoid(tau * (i as f64 + 0.5 - edges.y0))).collect();
        let dy: Vec<f64> = (0..hf).map(|i| sigmoid(tau * (edges.y1 - (i as f64 + 0.5)))).collect();

        let mut mass = 0.0f64;
        for i in 0..hf {
            let row = cy[i] * dy[i];
            for j in 0..wf {
                mass += row * ax[j] * bx[j];
            }
        }
        let clamped = mass < SOFT_CROP_MIN_MASS;
        if clamped {
            self.diagnostics.soft_crop_mass_clamps += 1;
            mass = SOFT_CROP_MIN_MASS;
        }

        let fd = &self.nodes[fmap.0].data;
        let mut out = vec![0.0f64; c];
        for ci in 0..c {
            let base = ci * hf * wf;
            let mut acc = 0.0f64;
            for i in 0..hf {
                let row = cy[i] * dy[i];
                for j in 0..wf {
                    acc += row * ax[j] * bx[j] * fd[base + i * wf + j];
                }
            }
            out[ci] = acc / mass;
        }
        let saved = SoftCropSaved {
            x0: edges.x0,
            x1: edges.x1,
            y0: edges.y0,
            y1: edges.y1,
            dw_dl3: edges.dw_dl3,
            dh_dl4: edges.dh_dl4,
            l1,
            l2,
            mass,
            clamped,
        };
        let rg = self.requires(fmap) || self.requires(box4);
        Ok(self.push(out, vec![c], rg, Op::SoftCropPool { fmap, box4, tau, saved }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; visits every recorded operation
    /// exactly once in reverse order. Nodes that do not require gradients
    /// (frozen parameters and anything derived only from them) are skipped.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0f64; n.data.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].clone();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            // Clone the op descriptor; payloads are small except saved probs.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => self.bw_conv2d(i, x, w, b, stride, pad, &g),
                Op::BnTrain { x, gamma, beta, ref mean, ref inv_std } => {
                    self.bw_bn_train(i, x, gamma, beta, mean, inv_std, &g)
                }
                Op::BnEval { x, gamma, beta, ref mean, ref inv_std } => {
                    self.bw_bn_eval(i, x, gamma, beta, mean, inv_std, &g)
                }
                Op::Relu { x } => {
                    if self.requires(x) {
                        let xd = &self.nodes[x.0].data;
                        let gx = &mut self.grads[x.0];
                        for (k, &gv) in g.iter().enumerate() {
                            if xd[k] > 0.0 {
                                gx[k] += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if self.requires(x) {
                        let od = &self.nodes[i].data;
                        let gx = &mut self.grads[x.0];
                        for (k, &gv) in g.iter().enumerate() {
                            gx[k] += gv * od[k] * (1.0 - od[k]);
                        }
                    }
                }
                Op::Tanh { x } => {
                    if self.requires(x) {
                        let od = &self.nodes[i].data;
                        let gx = &mut self.grads[x.0];
                        for (k, &gv) in g.iter().enumerate() {
                            gx[k] += gv * (1.0 - od[k] * od[k]);
                        }
                    }
                }
                Op::AvgPool2d { x, window } => self.bw_avg_pool(i, x, window, &g),
                Op::Linear { x, w, b } => self.bw_linear(x, w, b, &g),
                Op::Softmax { x } => {
                    if self.requires(x) {
                        let od = self.nodes[i].data.clone();
                        let k = *self.nodes[i].shape.last().unwrap();
                        let n = od.len() / k;
                        let gx = &mut self.grads[x.0];
                        for ni in 0..n {
                            let row = &od[ni * k..(ni + 1) * k];
                            let grow = &g[ni * k..(ni + 1) * k];
                            let dot: f64 = row.iter().zip(grow.iter()).map(|(s, gv)| s * gv).sum();
                            for j in 0..k {
                                gx[ni * k + j] += row[j] * (grow[j] - dot);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, ref labels, ref probs } => {
                    if self.requires(logits) {
                        let k = *self.nodes[logits.0].shape.last().unwrap();
                        let n = labels.len();
                        let scale = g[0] / n as f64;
                        let gx = &mut self.grads[logits.0];
                        for ni in 0..n {
                            for j in 0..k {
                                let onehot = if j == labels[ni] { 1.0 } else { 0.0 };
                                gx[ni * k + j] += scale * (probs[ni * k + j] - onehot);
                            }
                        }
                    }
                }
                Op::NllProbs { probs, label } => {
                    if self.requires(probs) {
                        let p = self.nodes[probs.0].data[label].max(1e-300);
                        self.grads[probs.0][label] -= g[0] / p;
                    }
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a.0].data.len();
                    if self.requires(a) {
                        let ga = &mut self.grads[a.0];
                        for k in 0..na {
                            ga[k] += g[k];
                        }
                    }
                    if self.requires(b) {
                        let gb = &mut self.grads[b.0];
                        for k in 0..gb.len() {
                            gb[k] += g[na + k];
                        }
                    }
                }
                Op::Add { a, b } => {
                    if self.requires(a) {
                        for (k, &gv) in g.iter().enumerate() {
                            self.grads[a.0][k] += gv;
                        }
                    }
                    if self.requires(b) {
                        for (k, &gv) in g.iter().enumerate() {
                            self.grads[b.0][k] += gv;
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if self.requires(a) {
                        for (k, &gv) in g.iter().enumerate() {
                            self.grads[a.0][k] += gv;
                        }
                    }
                    if self.requires(b) {
                        for (k, &gv) in g.iter().enumerate() {
                            self.grads[b.0][k] -= gv;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires(a) {
                        let bd = self.nodes[b.0].data.clone();
                        for (k, &gv) in g.iter().enumerate() {
                            self.grads[a.0][k] += gv * bd[k];
                        }
                    }
                    if self.requires(b) {
                        let ad = self.nodes[a.0].data.clone();
                        for (k, &gv) in g.iter().enumerate() {
                            self.grads[b.0][k] += gv * ad[k];
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.requires(x) {
                        for (k, &gv) in g.iter().enumerate() {
                            self.grads[x.0][k] += gv * c;
                        }
                    }
                }
                Op::Sum { x } => {
                    if self.requires(x) {
                        for v in self.grads[x.0].iter_mut() {
                            *v += g[0];
                        }
                    }
                }
                Op::Mean { x } => {
                    if self.requires(x) {
                        let n = self.nodes[x.0].data.len() as f64;
                        for v in self.grads[x.0].iter_mut() {
                            *v += g[0] / n;
                        }
                    }
                }
                Op::Reshape { x } => {
                    if self.requires(x) {
                        for (k, &gv) in g.iter().enumerate() {
                            self.grads[x.0][k] += gv;
                        }
                    }
                }
                Op::SoftCropPool { fmap, box4, tau, ref saved } => {
                    self.bw_soft_crop(i, fmap, box4, tau, saved, &g)
                }
            }
        }
        Ok(())
    }

    fn bw_conv2d(
        &mut self,
        _out: usize,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
        g: &[f64],
    ) {
        let (n, c_in, h, wdt, _) = Self::nchw(&self.nodes[x.0].shape).unwrap();
        let ws = &self.nodes[w.0].shape;
        let (c_out, k) = (ws[0], ws[2]);
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (wdt + 2 * pad - k) / stride + 1;

        if let Some(bid) = b {
            if self.requires(bid) {
                let gb = &mut self.grads[bid.0];
                for ni in 0..n {
                    for co in 0..c_out {
                        let base = ((ni * c_out + co) * h_out) * w_out;
                        let mut acc = 0.0;
                        for idx in 0..h_out * w_out {
                            acc += g[base + idx];
                        }
                        gb[co] += acc;
                    }
                }
            }
        }

        let need_x = self.requires(x);
        let need_w = self.requires(w);
        if !need_x && !need_w {
            return;
        }
        let kh_range = |o: usize, extent: usize| -> (usize, usize) {
            let lo = pad.saturating_sub(o * stride).min(k);
            let hi = (extent + pad - o * stride).min(k);
            (lo, hi.max(lo))
        };
        let xd = self.nodes[x.0].data.clone();
        let wd = self.nodes[w.0].data.clone();
        let mut gx = vec![0.0f64; if need_x { xd.len() } else { 0 }];
        let mut gw = vec![0.0f64; if need_w { wd.len() } else { 0 }];
        for ni in 0..n {
            for co in 0..c_out {
                for oh in 0..h_out {
                    let (kh_lo, kh_hi) = kh_range(oh, h);
                    for ow in 0..w_out {
                        let gv = g[((ni * c_out + co) * h_out + oh) * w_out + ow];
                        if gv == 0.0 {
                            continue;
                        }
                        let (kw_lo, kw_hi) = kh_range(ow, wdt);
                        let iw0 = ow * stride + kw_lo - pad;
                        let width = kw_hi - kw_lo;
                        for ci in 0..c_in {
                            let xbase = ((ni * c_in + ci) * h) * wdt;
                            let wbase = ((co * c_in + ci) * k) * k;
                            for kh in kh_lo..kh_hi {
                                let ih = oh * stride + kh - pad;
                                let xrow = xbase + ih * wdt + iw0;
                                let wrow = wbase + kh * k + kw_lo;
                                if need_x {
                                    let gxs = &mut gx[xrow..xrow + width];
                                    let ws = &wd[wrow..wrow + width];
                                    for i in 0..width {
                                        gxs[i] += gv * ws[i];
                                    }
                                }
                                if need_w {
                                    let gws = &mut gw[wrow..wrow + width];
                                    let xs = &xd[xrow..xrow + width];
                                    for i in 0..width {
                                        gws[i] += gv * xs[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            let dst = &mut self.grads[x.0];
            for (k, v) in gx.into_iter().enumerate() {
                dst[k] += v;
            }
        }
        if need_w {
            let dst = &mut self.grads[w.0];
            for (k, v) in gw.into_iter().enumerate() {
                dst[k] += v;
            }
        }
    }

    fn bw_bn_train(
        &mut self,
        _out: usize,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[f64],
        inv_std: &[f64],
        g: &[f64],
    ) {
        let (n, c, h, w, _) = Self::nchw(&self.nodes[x.0].shape).unwrap();
        let count = (n * h * w) as f64;
        let xd = self.nodes[x.0].data.clone();
        let gd = self.nodes[gamma.0].data.clone();
        let need_x = self.requires(x);
        for ci in 0..c {
            let mut sum_g = 0.0f64;
            let mut sum_g_xhat = 0.0f64;
            for ni in 0..n {
                let base = ((ni * c + ci) * h) * w;
                for idx in 0..h * w {
                    let xhat = (xd[base + idx] - mean[ci]) * inv_std[ci];
                    sum_g += g[base + idx];
                    sum_g_xhat += g[base + idx] * xhat;
                }
            }
            if self.requires(gamma) {
                self.grads[gamma.0][ci] += sum_g_xhat;
            }
            if self.requires(beta) {
                self.grads[beta.0][ci] += sum_g;
            }
            if need_x {
                let scale = gd[ci] * inv_std[ci];
                let mg = sum_g / count;
                let mgx = sum_g_xhat / count;
                for ni in 0..n {
                    let base = ((ni * c + ci) * h) * w;
                    for idx in 0..h * w {
                        let xhat = (xd[base + idx] - mean[ci]) * inv_std[ci];
                        self.grads[x.0][base + idx] += scale * (g[base + idx] - mg - xhat * mgx);
                    }
                }
            }
        }
    }

    fn bw_bn_eval(
        &mut self,
        _out: usize,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[f64],
        inv_std: &[f64],
        g: &[f64],
    ) {
        let (n, c, h, w, _) = Self::nchw(&self.nodes[x.0].shape).unwrap();
        let xd = self.nodes[x.0].data.clone();
        let gd = self.nodes[gamma.0].data.clone();
        for ci in 0..c {
            let mut sum_g = 0.0f64;
            let mut sum_g_xhat = 0.0f64;
            for ni in 0..n {
                let base = ((ni * c + ci) * h) * w;
                for idx in 0..h * w {
                    let xhat = (xd[base + idx] - mean[ci]) * inv_std[ci];
                    sum_g += g[base + idx];
                    sum_g_xhat += g[base + idx] * xhat;
                }
            }
            if self.requires(gamma) {
                self.grads[gamma.0][ci] += sum_g_xhat;
            }
            if self.requires(beta) {
                self.grads[beta.0][ci] += sum_g;
            }
            if self.requires(x) {
                let scale = gd[ci] * inv_std[ci];
                for ni in 0..n {
                    let base = ((ni * c + ci) * h) * w;
                    for idx in 0..h * w {
                        self.grads[x.0][base + idx] += scale * g[base + idx];
                    }
                }
            }
        }
    }

    fn bw_avg_pool(&mut self, out: usize, x: TensorId, window: usize, g: &[f64]) {
        if !self.requires(x) {
            return;
        }
        let (n, c, h, w, _) = Self::nchw(&self.nodes[x.0].shape).unwrap();
        let out_shape = self.nodes[out].shape.clone();
        let (h_out, w_out) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
        let norm = 1.0 / (window * window) as f64;
        let gx = &mut self.grads[x.0];
        for ni in 0..n {
            for ci in 0..c {
                let base = ((ni * c + ci) * h) * w;
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let gv = g[((ni * c + ci) * h_out + oh) * w_out + ow] * norm;
                        for kh in 0..window {
                            let row = base + (oh * window + kh) * w + ow * window;
                            for kw in 0..window {
                                gx[row + kw] += gv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn bw_linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>, g: &[f64]) {
        let ws = &self.nodes[w.0].shape;
        let (d_out, d_in) = (ws[0], ws[1]);
        let n = self.nodes[x.0].data.len() / d_in;
        let xd = self.nodes[x.0].data.clone();
        let wd = self.nodes[w.0].data.clone();
        if let Some(bid) = b {
            if self.requires(bid) {
                let gb = &mut self.grads[bid.0];
                for ni in 0..n {
                    for o in 0..d_out {
                        gb[o] += g[ni * d_out + o];
                    }
                }
            }
        }
        if self.requires(x) {
            let gx = &mut self.grads[x.0];
            for ni in 0..n {
                for o in 0..d_out {
                    let gv = g[ni * d_out + o];
                    if gv == 0.0 {
                        continue;
                    }
                    let wrow = o * d_in;
                    for i in 0..d_in {
                        gx[ni * d_in + i] += gv * wd[wrow + i];
                    }
                }
            }
        }
        if self.requires(w) {
            let gw = &mut self.grads[w.0];
            for ni in 0..n {
                for o in 0..d_out {
                    let gv = g[ni * d_out + o];
                    if gv == 0.0 {
                        continue;
                    }
                    let wrow = o * d_in;
                    for i in 0..d_in {
                        gw[wrow + i] += gv * xd[ni * d_in + i];
                    }
                }
            }
        }
    }

    fn bw_soft_crop(
        &mut self,
        out: usize,
        fmap: TensorId,
        box4: TensorId,
        tau: f64,
        saved: &SoftCropSaved,
        g: &[f64],
    ) {
        let fs = self.nodes[fmap.0].shape.clone();
        let (c, hf, wf) = (fs[0], fs[1], fs[2]);
        let ax: Vec<f64> = (0..wf).map(|j| sigmoid(tau * (j as f64 + 0.5 - saved.x0))).collect();
        let bx: Vec<f64> = (0..wf).map(|j| sigmoid(tau * (saved.x1 - (j as f64 + 0.5)))).collect();
        let cy: Vec<f64> = (0..hf).map(|i| sigmoid(tau * (i as f64 + 0.5 - saved.y0))).collect();
        let dy: Vec<f64> = (0..hf).map(|i| sigmoid(tau * (saved.y1 - (i as f64 + 0.5)))).collect();
        let mass = saved.mass;
        let out_vals = self.nodes[out].data.clone();
        let fd = self.nodes[fmap.0].data.clone();

        if self.requires(fmap) {
            let gf = &mut self.grads[fmap.0];
            for ci in 0..c {
                let gv = g[ci];
                if gv == 0.0 {
                    continue;
                }
                let base = ci * hf * wf;
                for i in 0..hf {
                    let row = cy[i] * dy[i];
                    for j in 0..wf {
                        gf[base + i * wf + j] += gv * row * ax[j] * bx[j] / mass;
                    }
                }
            }
        }

        if self.requires(box4) && !saved.clamped {
            // dL/dm_ij = (sum_c g_c F[c,i,j] - sum_c g_c out_c) / mass
            let g_dot_out: f64 = g.iter().zip(out_vals.iter()).map(|(a, b)| a * b).sum();
            let mut dl_dx0 = 0.0f64;
            let mut dl_dx1 = 0.0f64;
            let mut dl_dy0 = 0.0f64;
            let mut dl_dy1 = 0.0f64;
            for i in 0..hf {
                for j in 0..wf {
                    let mut gf_ij = 0.0f64;
                    for ci in 0..c {
                        gf_ij += g[ci] * fd[ci * hf * wf + i * wf + j];
                    }
                    let dl_dm = (gf_ij - g_dot_out) / mass;
                    let m_ij = ax[j] * bx[j] * cy[i] * dy[i];
                    if m_ij == 0.0 {
                        continue;
                    }
                    // d sigmoid(tau * s) / d s = tau * sig * (1 - sig)
                    dl_dx0 += dl_dm * (-tau * (1.0 - ax[j])) * m_ij;
                    dl_dx1 += dl_dm * (tau * (1.0 - bx[j])) * m_ij;
                    dl_dy0 += dl_dm * (-tau * (1.0 - cy[i])) * m_ij;
                    dl_dy1 += dl_dm * (tau * (1.0 - dy[i])) * m_ij;
                }
            }
            let w_box = saved.x1 - saved.x0;
            let h_box = saved.y1 - saved.y0;
            let gb = &mut self.grads[box4.0];
            gb[0] += (dl_dx0 + dl_dx1) * (wf as f64 - w_box);
            gb[1] += (dl_dy0 + dl_dy1) * (hf as f64 - h_box);
            gb[2] += (-saved.l1 * dl_dx0 + (1.0 - saved.l1) * dl_dx1) * saved.dw_dl3;
            gb[3] += (-saved.l2 * dl_dy0 + (1.0 - saved.l2) * dl_dy1) * saved.dh_dl4;
        }
    }
}

/// Continuous box edges on the feature grid, shared by the soft and hard
/// crop paths. Width/height floor at one cell so the box can never vanish.
#[derive(Debug, Clone, Copy)]
pub struct BoxEdges {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub dw_dl3: f64,
    pub dh_dl4: f64,
}

impl BoxEdges {
    pub fn from_fractions(l1: f64, l2: f64, l3: f64, l4: f64, hf: usize, wf: usize) -> Self {
        let wf_f = wf as f64;
        let hf_f = hf as f64;
        let (w, dw_dl3) = if l3 * wf_f > 1.0 { (l3 * wf_f, wf_f) } else { (1.0, 0.0) };
        let (h, dh_dl4) = if l4 * hf_f > 1.0 { (l4 * hf_f, hf_f) } else { (1.0, 0.0) };
        let x0 = l1 * (wf_f - w);
        let y0 = l2 * (hf_f - h);
        BoxEdges { x0, x1: x0 + w, y0, y1: y0 + h, dw_dl3, dh_dl4 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference oracle over a leaf tensor: rebuilds the graph per
    /// probe through `f`, which maps leaf data to a scalar loss value.
    fn numeric_grad<F: Fn(&[f32]) -> f64>(f: F, data: &[f32], h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let mut plus = data.to_vec();
            plus[i] = (plus[i] as f64 + h) as f32;
            let mut minus = data.to_vec();
            minus[i] = (minus[i] as f64 - h) as f32;
            let eff = plus[i] as f64 - minus[i] as f64;
            out.push((f(&plus) - f(&minus)) / eff);
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|(x, y)| {
                let d = (x - y).abs();
                d <= tol || d <= tol * x.abs().max(y.abs())
            })
    }

    fn rand_tensor<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::new(shape, data).unwrap().param()
    }

    // ── hand-value examples ─────────────────────────────────────────

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let xid = tape.leaf(&x);
        let w = tape.constant(vec![1, 1, 1, 1], vec![1.0]);
        let b = tape.constant(vec![1], vec![0.0]);
        let y = tape.conv2d(xid, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert_eq!(tape.value(y), tape.value(xid));
    }

    /// Independent dense convolution oracle, direct sum over the definition.
    fn conv_oracle(
        x: &[f64],
        (ci, h, w): (usize, usize, usize),
        wt: &[f64],
        (co, k): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    acc += x[(c * h + iy as usize) * w + ix as usize]
                                        * wt[((o * ci + c) * k + dy) * k + dx];
                                }
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_against_direct_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3, 3], vec![1.0; 9]);
        let w = tape.constant(vec![1, 1, 3, 3], vec![1.0; 9]);
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let expect = conv_oracle(&[1.0; 9], (1, 3, 3), &[1.0; 9], (1, 3), 1, 1);
        assert_eq!(tape.value(y), expect.as_slice());
        // center = full 3x3 neighborhood, corner = 2x2 neighborhood
        assert_eq!(tape.value(y)[4], 9.0);
        assert_eq!(tape.value(y)[0], 4.0);
    }

    #[test]
    fn conv_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (ci, co, k) = (rng.gen_range(1..3), rng.gen_range(1..3), [1, 3][rng.gen_range(0..2)]);
            let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            if k > h + 2 * pad || k > w + 2 * pad {
                continue;
            }
            let xd: Vec<f64> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wd: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(vec![ci, h, w], xd.clone());
            let wt = tape.constant(vec![co, ci, k, k], wd.clone());
            let y = tape.conv2d(x, wt, None, stride, pad).unwrap();
            let expect = conv_oracle(&xd, (ci, h, w), &wd, (co, k), stride, pad);
            assert!(close(tape.value(y), &expect, 1e-12));
        }
    }

    #[test]
    fn conv_stem_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3, 224, 224], vec![0.0; 3 * 224 * 224]);
        let w = tape.constant(vec![8, 3, 7, 7], vec![0.0; 8 * 3 * 49]);
        let y = tape.conv2d(x, w, None, 2, 3).unwrap();
        assert_eq!(tape.shape(y), &[8, 112, 112]);
    }

    #[test]
    fn conv_channel_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 4, 4], vec![0.0; 32]);
        let w = tape.constant(vec![1, 3, 3, 3], vec![0.0; 27]);
        assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn batchnorm_fixed_point_and_annihilation() {
        // channel already zero-mean unit-variance: output within eps effect
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 1, 1, 1], vec![-1.0, 1.0]);
        let gamma = tape.constant(vec![1], vec![1.0]);
        let beta = tape.constant(vec![1], vec![0.0]);
        let (y, stats) = tape.batchnorm2d_train(x, gamma, beta).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-4);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-4);
        assert!((stats.mean[0]).abs() < 1e-7);
        assert!((stats.var[0] - 1.0).abs() < 1e-6);

        // gamma = 0: output is beta everywhere
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 1, 2, 2], vec![5.0, -3.0, 2.0, 0.5]);
        let gamma = tape.constant(vec![1], vec![0.0]);
        let beta = tape.constant(vec![1], vec![0.7]);
        let (y, _) = tape.batchnorm2d_train(x, gamma, beta).unwrap();
        assert!(tape.value(y).iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn batchnorm_two_element_channel() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 1, 1, 1], vec![1.0, 3.0]);
        let gamma = tape.constant(vec![1], vec![1.0]);
        let beta = tape.constant(vec![1], vec![0.0]);
        let (y, _) = tape.batchnorm2d_train(x, gamma, beta).unwrap();
        // hand evaluation: mean 2, var 1, inv_std = 1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y)[0] + expect).abs() < 1e-9);
        assert!((tape.value(y)[1] - expect).abs() < 1e-9);
    }

    #[test]
    fn batchnorm_degenerate_batch_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 1, 1, 1], vec![1.0]);
        let gamma = tape.constant(vec![1], vec![1.0]);
        let beta = tape.constant(vec![1], vec![0.0]);
        assert!(matches!(tape.batchnorm2d_train(x, gamma, beta), Err(Error::Input(_))));
    }

    #[test]
    fn batchnorm_eval_is_pure() {
        let rm = vec![0.5f32];
        let rv = vec![2.0f32];
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 1, 1, 2], vec![1.0, -1.0]);
        let gamma = tape.constant(vec![1], vec![1.5]);
        let beta = tape.constant(vec![1], vec![0.25]);
        let a = tape.batchnorm2d_eval(x, gamma, beta, &rm, &rv).unwrap();
        let b = tape.batchnorm2d_eval(x, gamma, beta, &rm, &rv).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert_eq!(rm, vec![0.5f32]);
        assert_eq!(rv, vec![2.0f32]);
    }

    #[test]
    fn activations_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![-1.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0]);
        let z = tape.constant(vec![1], vec![0.0]);
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s), &[0.5]);
        let t = tape.tanh(z);
        assert_eq!(tape.value(t), &[0.0]);
    }

    #[test]
    fn avg_pool_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y), &[2.5]);

        let x = tape.constant(vec![1, 3, 3], vec![7.0; 9]);
        let y = tape.avg_pool2d(x, 3).unwrap();
        assert_eq!(tape.value(y), &[7.0]);

        let x = tape.constant(vec![512, 7, 7], vec![0.25; 512 * 49]);
        let y = tape.avg_pool2d(x, 7).unwrap();
        assert_eq!(tape.shape(y), &[512, 1, 1]);
        let v = tape.reshape(y, vec![512]).unwrap();
        assert_eq!(tape.value(v).len(), 512);

        let x = tape.constant(vec![1, 2, 2], vec![0.0; 4]);
        assert!(matches!(tape.avg_pool2d(x, 3), Err(Error::Config(_))));
    }

    #[test]
    fn linear_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![3.0, -1.5]);
        let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let zero_b = tape.constant(vec![2], vec![0.0, 0.0]);
        let y = tape.linear(x, eye, Some(zero_b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zeros = tape.constant(vec![2, 2], vec![0.0; 4]);
        let b = tape.constant(vec![2], vec![0.5, -0.5]);
        let y = tape.linear(x, zeros, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[0.5, -0.5]);

        let w = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let ones = tape.constant(vec![2], vec![1.0, 1.0]);
        let y = tape.linear(ones, w, Some(zero_b)).unwrap();
        assert_eq!(tape.value(y), &[3.0, 7.0]);

        let bad = tape.constant(vec![3], vec![0.0; 3]);
        assert!(matches!(tape.linear(bad, w, None), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_hand_values() {
        let mut tape = Tape::new();
        let uniform = tape.constant(vec![8], vec![0.3; 8]);
        let (probs, loss) = tape.softmax_cross_entropy(uniform, &[5]).unwrap();
        for &p in tape.value(probs) {
            assert!((p - 0.125).abs() < 1e-12);
        }
        assert!((tape.scalar(loss) - (8.0f64).ln()).abs() < 1e-12);

        let saturated = tape.constant(vec![2], vec![100.0, 0.0]);
        let (_, loss) = tape.softmax_cross_entropy(saturated, &[0]).unwrap();
        assert!(tape.scalar(loss) < 1e-6);

        let logits = tape.constant(vec![3], vec![1.0, 2.0, 3.0]);
        let (_, loss) = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        // hand softmax: ln(1 + e^-1 + e^-2)
        let expect = (1.0f64 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);
        assert!((tape.scalar(loss) - 0.40761).abs() < 1e-5);

        let logits = tape.constant(vec![3], vec![0.0; 3]);
        assert!(matches!(tape.softmax_cross_entropy(logits, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn softmax_sums_to_one_over_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let k = rng.gen_range(2..12);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(vec![k], logits);
            let s = tape.softmax(x).unwrap();
            let v = tape.value(s);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = rand_tensor(vec![5], &mut ChaCha8Rng::seed_from_u64(0));
        let xid = tape.leaf(&x);
        let s = tape.sum(xid);
        tape.backward(s).unwrap();
        assert!(tape.grad(xid).iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let t = Tensor::new(vec![1], vec![3.0]).unwrap().param();
        let xid = tape.leaf(&t);
        let sq = tape.mul(xid, xid).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xid), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_leaves_get_zero_grad_and_offpath_too() {
        let mut tape = Tape::new();
        let frozen = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(); // requires_grad = false
        let live = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().param();
        let offpath = Tensor::new(vec![2], vec![9.0, 9.0]).unwrap().param();
        let f = tape.leaf(&frozen);
        let l = tape.leaf(&live);
        let o = tape.leaf(&offpath);
        let y = tape.mul(f, l).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(f), &[0.0, 0.0]);
        assert_eq!(tape.grad(l), &[1.0, 2.0]);
        assert_eq!(tape.grad(o), &[0.0, 0.0]);
    }

    #[test]
    fn determinism_same_seed_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = rand_tensor(vec![2, 3, 5, 5], &mut rng);
            let w = rand_tensor(vec![4, 3, 3, 3], &mut rng);
            let mut tape = Tape::new();
            let xid = tape.leaf(&x);
            let wid = tape.leaf(&w);
            let y = tape.conv2d(xid, wid, None, 1, 1).unwrap();
            let r = tape.relu(y);
            let s = tape.mean(r);
            tape.backward(s).unwrap();
            (tape.value(s).to_vec(), tape.grad(wid).to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    // ── finite-difference property over every op (50 seeds each) ────

    #[test]
    fn fd_conv2d() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(vec![2, 4, 4], &mut rng);
            let w = rand_tensor(vec![3, 2, 3, 3], &mut rng);
            let b = rand_tensor(vec![3], &mut rng);
            let loss = |xv: &[f32], wv: &[f32], bv: &[f32]| {
                let mut tape = Tape::new();
                let xt = Tensor::new(vec![2, 4, 4], xv.to_vec()).unwrap().param();
                let wt = Tensor::new(vec![3, 2, 3, 3], wv.to_vec()).unwrap().param();
                let bt = Tensor::new(vec![3], bv.to_vec()).unwrap().param();
                let xi = tape.leaf(&xt);
                let wi = tape.leaf(&wt);
                let bi = tape.leaf(&bt);
                let y = tape.conv2d(xi, wi, Some(bi), 2, 1).unwrap();
                let s = tape.sum(y);
                (tape, xi, wi, bi, s)
            };
            let (mut tape, xi, wi, bi, s) = loss(x.data(), w.data(), b.data());
            tape.backward(s).unwrap();
            let gx = tape.grad(xi).to_vec();
            let gw = tape.grad(wi).to_vec();
            let gb = tape.grad(bi).to_vec();
            let nx = numeric_grad(|v| { let (t, _, _, _, s) = loss(v, w.data(), b.data()); t.scalar(s) }, x.data(), 1e-4);
            let nw = numeric_grad(|v| { let (t, _, _, _, s) = loss(x.data(), v, b.data()); t.scalar(s) }, w.data(), 1e-4);
            let nb = numeric_grad(|v| { let (t, _, _, _, s) = loss(x.data(), w.data(), v); t.scalar(s) }, b.data(), 1e-4);
            assert!(close(&gx, &nx, 1e-5), "conv dx seed {seed}");
            assert!(close(&gw, &nw, 1e-5), "conv dw seed {seed}");
            assert!(close(&gb, &nb, 1e-5), "conv db seed {seed}");
        }
    }

    #[test]
    fn fd_batchnorm_train_and_eval() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = rand_tensor(vec![3, 2, 2, 2], &mut rng);
            let gamma = rand_tensor(vec![2], &mut rng);
            let beta = rand_tensor(vec![2], &mut rng);
            let rm = vec![0.1f32, -0.2];
            let rv = vec![0.9f32, 1.3];
            for eval in [false, true] {
                let build = |xv: &[f32], gv: &[f32], bv: &[f32]| {
                    let mut tape = Tape::new();
                    let xt = Tensor::new(vec![3, 2, 2, 2], xv.to_vec()).unwrap().param();
                    let gt = Tensor::new(vec![2], gv.to_vec()).unwrap().param();
                    let bt = Tensor::new(vec![2], bv.to_vec()).unwrap().param();
                    let xi = tape.leaf(&xt);
                    let gi = tape.leaf(&gt);
                    let bi = tape.leaf(&bt);
                    let y = if eval {
                        tape.batchnorm2d_eval(xi, gi, bi, &rm, &rv).unwrap()
                    } else {
                        tape.batchnorm2d_train(xi, gi, bi).unwrap().0
                    };
                    // weighted sum so grads are not symmetric
                    let wts: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
                    let wid = tape.constant(vec![3, 2, 2, 2], wts);
                    let p = tape.mul(y, wid).unwrap();
                    let s = tape.sum(p);
                    (tape, xi, gi, bi, s)
                };
                let (mut tape, xi, gi, bi, s) = build(x.data(), gamma.data(), beta.data());
                tape.backward(s).unwrap();
                let gx = tape.grad(xi).to_vec();
                let gg = tape.grad(gi).to_vec();
                let gb = tape.grad(bi).to_vec();
                let nx = numeric_grad(|v| { let (t, _, _, _, s) = build(v, gamma.data(), beta.data()); t.scalar(s) }, x.data(), 1e-4);
                let ng = numeric_grad(|v| { let (t, _, _, _, s) = build(x.data(), v, beta.data()); t.scalar(s) }, gamma.data(), 1e-4);
                let nb = numeric_grad(|v| { let (t, _, _, _, s) = build(x.data(), gamma.data(), v); t.scalar(s) }, beta.data(), 1e-4);
                assert!(close(&gx, &nx, 1e-4), "bn dx seed {seed} eval {eval}");
                assert!(close(&gg, &ng, 1e-5), "bn dgamma seed {seed} eval {eval}");
                assert!(close(&gb, &nb, 1e-5), "bn dbeta seed {seed} eval {eval}");
            }
        }
    }

    #[test]
    fn fd_unary_pool_linear_softmax() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = rand_tensor(vec![2, 4, 4], &mut rng);
            let w = rand_tensor(vec![3, 8], &mut rng);
            let b = rand_tensor(vec![3], &mut rng);
            let label = rng.gen_range(0..3);
            let build = |xv: &[f32], wv: &[f32], bv: &[f32]| {
                let mut tape = Tape::new();
                let xt = Tensor::new(vec![2, 4, 4], xv.to_vec()).unwrap().param();
                let wt = Tensor::new(vec![3, 8], wv.to_vec()).unwrap().param();
                let bt = Tensor::new(vec![3], bv.to_vec()).unwrap().param();
                let xi = tape.leaf(&xt);
                let wi = tape.leaf(&wt);
                let bi = tape.leaf(&bt);
                let a = tape.tanh(xi);
                let r = tape.relu(a);
                let sg = tape.sigmoid(r);
                let p = tape.avg_pool2d(sg, 2).unwrap();
                let flat = tape.reshape(p, vec![8]).unwrap();
                let logits = tape.linear(flat, wi, Some(bi)).unwrap();
                let (_probs, loss) = tape.softmax_cross_entropy(logits, &[label]).unwrap();
                (tape, xi, wi, bi, loss)
            };
            let (mut tape, xi, wi, bi, loss) = build(x.data(), w.data(), b.data());
            tape.backward(loss).unwrap();
            let gx = tape.grad(xi).to_vec();
            let gw = tape.grad(wi).to_vec();
            let gb = tape.grad(bi).to_vec();
            let nx = numeric_grad(|v| { let (t, _, _, _, l) = build(v, w.data(), b.data()); t.scalar(l) }, x.data(), 1e-4);
            let nw = numeric_grad(|v| { let (t, _, _, _, l) = build(x.data(), v, b.data()); t.scalar(l) }, w.data(), 1e-4);
            let nb = numeric_grad(|v| { let (t, _, _, _, l) = build(x.data(), w.data(), v); t.scalar(l) }, b.data(), 1e-4);
            assert!(close(&gx, &nx, 1e-5), "chain dx seed {seed}");
            assert!(close(&gw, &nw, 1e-5), "chain dw seed {seed}");
            assert!(close(&gb, &nb, 1e-5), "chain db seed {seed}");
        }
    }

    #[test]
    fn fd_elementwise_concat_scale_nll() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let a = rand_tensor(vec![4], &mut rng);
            let b = rand_tensor(vec![4], &mut rng);
            let label = rng.gen_range(0..8);
            let build = |av: &[f32], bv: &[f32]| {
                let mut tape = Tape::new();
                let at = Tensor::new(vec![4], av.to_vec()).unwrap().param();
                let bt = Tensor::new(vec![4], bv.to_vec()).unwrap().param();
                let ai = tape.leaf(&at);
                let bi = tape.leaf(&bt);
                let sum = tape.add(ai, bi).unwrap();
                let dif = tape.sub(ai, bi).unwrap();
                let prod = tape.mul(sum, dif).unwrap();
                let cat = tape.concat(prod, sum).unwrap();
                let scaled = tape.scale(cat, 0.65);
                let probs = tape.softmax(scaled).unwrap();
                let loss = tape.nll_from_probs(probs, label).unwrap();
                (tape, ai, bi, loss)
            };
            let (mut tape, ai, bi, loss) = build(a.data(), b.data());
            tape.backward(loss).unwrap();
            let ga = tape.grad(ai).to_vec();
            let gb = tape.grad(bi).to_vec();
            let na = numeric_grad(|v| { let (t, _, _, l) = build(v, b.data()); t.scalar(l) }, a.data(), 1e-5);
            let nb = numeric_grad(|v| { let (t, _, _, l) = build(a.data(), v); t.scalar(l) }, b.data(), 1e-5);
            assert!(close(&ga, &na, 1e-5), "mix da seed {seed}");
            assert!(close(&gb, &nb, 1e-5), "mix db seed {seed}");
        }
    }

    #[test]
    fn fd_soft_crop_pool() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let fmap = rand_tensor(vec![3, 7, 7], &mut rng);
            // raw box logits kept away from the width/height kink at l*7 = 1
            let raw: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let tau = [5.0, 10.0, 25.0][rng.gen_range(0..3)];
            let build = |fv: &[f32], rv: &[f32]| {
                let mut tape = Tape::new();
                let ft = Tensor::new(vec![3, 7, 7], fv.to_vec()).unwrap().param();
                let rt = Tensor::new(vec![4], rv.to_vec()).unwrap().param();
                let fi = tape.leaf(&ft);
                let ri = tape.leaf(&rt);
                let box4 = tape.sigmoid(ri);
                let v = tape.soft_crop_pool(fi, box4, tau).unwrap();
                let wts = tape.constant(vec![3], vec![0.3, -1.1, 0.7]);
                let p = tape.mul(v, wts).unwrap();
                let s = tape.sum(p);
                (tape, fi, ri, s)
            };
            let (mut tape, fi, ri, s) = build(fmap.data(), &raw);
            tape.backward(s).unwrap();
            let gf = tape.grad(fi).to_vec();
            let gr = tape.grad(ri).to_vec();
            let nf = numeric_grad(|v| { let (t, _, _, s) = build(v, &raw); t.scalar(s) }, fmap.data(), 1e-4);
            let nr = numeric_grad(|v| { let (t, _, _, s) = build(fmap.data(), v); t.scalar(s) }, &raw, 1e-4);
            assert!(close(&gf, &nf, 1e-5), "soft crop dmap seed {seed}");
            assert!(close(&gr, &nr, 1e-4), "soft crop dbox seed {seed}: {gr:?} vs {nr:?}");
        }
    }
}
