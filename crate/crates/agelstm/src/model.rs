//! Full model assembly: backbone + global head + attention head + local
//! head, parameter registry, prediction, and the gradient checker.

use crate::attention::{
    attention_forward, box_to_region, fuse_predictions, AgeDistribution, AttentionBinding,
    AttentionBox, AttentionForward, AttentionParams, LstmState, Region,
};
use crate::backbone::{Backbone, BackboneBinding, BackboneConfig, BnUpdates};
use crate::error::{Error, Result};
use crate::estimation::{dex_expected_age, HeadConfig, HeadMode};
use crate::tape::{BnMode, Tape, TensorId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct LinearHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearHead {
    fn new<R: Rng>(d_out: usize, d_in: usize, rng: &mut R) -> Self {
        LinearHead {
            w: Tensor::glorot_uniform(vec![d_out, d_in], d_in, d_out, rng).param(),
            b: Tensor::zeros(vec![d_out]).param(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Soft-crop sharpness.
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct AgeModel {
    pub backbone: Backbone,
    pub global_head: LinearHead,
    pub attention: AttentionParams,
    pub local_head: LinearHead,
    pub head: HeadConfig,
    pub tau: f64,
}

pub struct ModelBinding {
    pub backbone: BackboneBinding,
    pub global_w: TensorId,
    pub global_b: TensorId,
    pub attn: AttentionBinding,
    pub local_w: TensorId,
    pub local_b: TensorId,
}

impl ModelBinding {
    /// Leaf ids in [`AgeModel::visit_params`] order.
    pub fn visit_ids<F: FnMut(TensorId)>(&self, f: &mut F) {
        self.backbone.visit_ids(f);
        f(self.global_w);
        f(self.global_b);
        self.attn.visit_ids(f);
        f(self.local_w);
        f(self.local_b);
    }
}

/// Everything the global branch produces for one forward.
pub struct GlobalForward {
    pub fmap: TensorId,
    pub logits: TensorId,
    pub probs: TensorId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    GlobalOnly,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictedValue {
    Age(f64),
    Group(usize),
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// The distribution the decision is made from (fused when available).
    pub dist: AgeDistribution,
    pub global_dist: AgeDistribution,
    pub local_dist: Option<AgeDistribution>,
    pub attention_box: Option<AttentionBox>,
    pub region: Option<Region>,
    pub value: PredictedValue,
}

impl AgeModel {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.head.validate()?;
        if cfg.tau <= 0.0 {
            return Err(Error::Config("soft-crop sharpness tau must be > 0".into()));
        }
        let backbone = Backbone::new(cfg.backbone.clone(), rng)?;
        let (c, _, _) = cfg.backbone.feature_map_shape()?;
        let global_head = LinearHead::new(cfg.head.k, c, rng);
        let attention = AttentionParams::new(c, rng);
        let local_head = LinearHead::new(cfg.head.k, c, rng);
        Ok(AgeModel {
            backbone,
            global_head,
            attention,
            local_head,
            head: cfg.head.clone(),
            tau: cfg.tau,
        })
    }

    /// Channel count of the final feature map (= attention input width).
    pub fn feature_channels(&self) -> usize {
        self.backbone.config.group_channels[crate::backbone::NUM_GROUPS - 1]
    }

    pub fn fresh_state(&self) -> LstmState {
        LstmState::zeros(self.attention.hidden)
    }

    /// Freeze the stage-A parameters (backbone and global head) so stage-B
    /// training can only move the attention and local head.
    pub fn freeze_global(&mut self) {
        self.backbone.freeze();
        self.global_head.w.requires_grad = false;
        self.global_head.b.requires_grad = false;
    }

    /// Freeze the stage-B parameters; stage-A training leaves the attention
    /// pipeline untouched (not even by weight decay).
    pub fn freeze_attention(&mut self) {
        self.attention.visit_params_mut(&mut |_, t| t.requires_grad = false);
        self.local_head.w.requires_grad = false;
        self.local_head.b.requires_grad = false;
    }

    pub fn visit_params<'a, F: FnMut(String, &'a Tensor)>(&'a self, f: &mut F) {
        self.backbone.visit_params(f);
        f("global_head.w".into(), &self.global_head.w);
        f("global_head.b".into(), &self.global_head.b);
        self.attention.visit_params(f);
        f("local_head.w".into(), &self.local_head.w);
        f("local_head.b".into(), &self.local_head.b);
    }

    pub fn visit_params_mut<F: FnMut(String, &mut Tensor)>(&mut self, f: &mut F) {
        self.backbone.visit_params_mut(f);
        f("global_head.w".into(), &mut self.global_head.w);
        f("global_head.b".into(), &mut self.global_head.b);
        self.attention.visit_params_mut(f);
        f("local_head.w".into(), &mut self.local_head.w);
        f("local_head.b".into(), &mut self.local_head.b);
    }

    pub fn visit_buffers<'a, F: FnMut(String, &'a Tensor)>(&'a self, f: &mut F) {
        self.backbone.visit_buffers(f);
    }

    pub fn visit_buffers_mut<F: FnMut(String, &mut Tensor)>(&mut self, f: &mut F) {
        self.backbone.visit_buffers_mut(f);
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        ModelBinding {
            backbone: self.backbone.bind(tape),
            global_w: tape.leaf(&self.global_head.w),
            global_b: tape.leaf(&self.global_head.b),
            attn: self.attention.bind(tape),
            local_w: tape.leaf(&self.local_head.w),
            local_b: tape.leaf(&self.local_head.b),
        }
    }

    /// Backbone + global head over a single [C,S,S] image or an [N,C,S,S]
    /// batch. The feature map comes back alongside the class distribution.
    pub fn forward_global(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        images: TensorId,
        mode: BnMode,
        updates: &mut BnUpdates,
    ) -> Result<GlobalForward> {
        let fmap = self.backbone.forward(tape, &binding.backbone, images, mode, updates)?;
        let shape = tape.shape(fmap).to_vec();
        let side = shape[shape.len() - 1];
        let pooled = tape.avg_pool2d(fmap, side)?;
        let flat = if shape.len() == 3 {
            tape.reshape(pooled, vec![shape[0]])?
        } else {
            tape.reshape(pooled, vec![shape[0], shape[1]])?
        };
        let logits = tape.linear(flat, binding.global_w, Some(binding.global_b))?;
        let probs = tape.softmax(logits)?;
        Ok(GlobalForward { fmap, logits, probs })
    }

    /// Attention pass over a single feature map with the local head.
    pub fn forward_attention(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        fmap: TensorId,
        state: &LstmState,
    ) -> Result<AttentionForward> {
        attention_forward(tape, &binding.attn, binding.local_w, binding.local_b, fmap, state, self.tau)
    }

    /// Turn a final distribution into the head's prediction.
    pub fn decide(&self, dist: &AgeDistribution) -> Result<PredictedValue> {
        match self.head.mode {
            HeadMode::GroupClassification => Ok(PredictedValue::Group(dist.argmax())),
            HeadMode::DexRegression => {
                Ok(PredictedValue::Age(dex_expected_age(dist, &self.head.age_values)?))
            }
        }
    }

    /// Evaluate one preprocessed image. Batchnorm runs in eval mode; the
    /// LSTM state advances only on the fused branch.
    pub fn predict(&self, image: &Tensor, state: &mut LstmState, branch: Branch) -> Result<Prediction> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let img = tape.leaf(image);
        let mut updates = BnUpdates::default();
        let global = self.forward_global(&mut tape, &binding, img, BnMode::Eval, &mut updates)?;
        let global_dist = AgeDistribution::new_normalized(tape.value(global.probs).to_vec())?;
        match branch {
            Branch::GlobalOnly => {
                let value = self.decide(&global_dist)?;
                Ok(Prediction {
                    dist: global_dist.clone(),
                    global_dist,
                    local_dist: None,
                    attention_box: None,
                    region: None,
                    value,
                })
            }
            Branch::Fused => {
                let attn = self.forward_attention(&mut tape, &binding, global.fmap, state)?;
                let local_dist = AgeDistribution::new_normalized(tape.value(attn.p_local).to_vec())?;
                let fused = fuse_predictions(&global_dist, &local_dist)?;
                let bx = AttentionBox::from_tape(&tape, attn.box4);
                let fshape = tape.shape(global.fmap);
                let region = box_to_region(&bx, fshape[1], fshape[2]);
                *state = attn.state_next;
                let value = self.decide(&fused)?;
                Ok(Prediction {
                    dist: fused,
                    global_dist,
                    local_dist: Some(local_dist),
                    attention_box: Some(bx),
                    region: Some(region),
                    value,
                })
            }
        }
    }
}

/// One coordinate where analytic and numeric derivatives disagree.
#[derive(Debug, Clone)]
pub struct GradFailure {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because both sides sat below the 1e-8 floor.
    pub skipped: usize,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Training loss used for gradient checking: global plus local cross
/// entropy, so every trainable part of the network is on the path.
fn check_loss(model: &AgeModel, input: &Tensor, label: usize) -> Result<(Tape, ModelBinding, TensorId)> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let img = tape.leaf(input);
    let mut updates = BnUpdates::default();
    let global = model.forward_global(&mut tape, &binding, img, BnMode::Train, &mut updates)?;
    let (_, g_loss) = tape.softmax_cross_entropy(global.logits, &[label])?;
    let state = model.fresh_state();
    let attn = model.forward_attention(&mut tape, &binding, global.fmap, &state)?;
    let (_, l_loss) = tape.softmax_cross_entropy(attn.logits, &[label])?;
    let loss = tape.add(g_loss, l_loss)?;
    Ok((tape, binding, loss))
}

/// Compare analytic gradients against central finite differences on
/// `samples` randomly chosen trainable coordinates.
pub fn grad_check(
    model: &AgeModel,
    input: &Tensor,
    label: usize,
    step: f64,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::Usage("gradient check step must be > 0".into()));
    }
    // analytic pass
    let (mut tape, binding, loss) = check_loss(model, input, label)?;
    tape.backward(loss)?;
    let mut names: Vec<String> = Vec::new();
    let mut trainable: Vec<bool> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    model.visit_params(&mut |n, t| {
        names.push(n);
        trainable.push(t.requires_grad);
        sizes.push(t.numel());
    });
    let mut grads: Vec<Vec<f64>> = Vec::new();
    binding.visit_ids(&mut |id| grads.push(tape.grad(id).to_vec()));
    drop(tape);

    // flat coordinate space over trainable tensors
    let total: usize = sizes
        .iter()
        .zip(trainable.iter())
        .filter(|(_, &t)| t)
        .map(|(&s, _)| s)
        .sum();
    if total == 0 {
        return Err(Error::Usage("model has no trainable parameters to check".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped: 0, failures: Vec::new() };

    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        loop {
            if trainable[ti] {
                if flat < sizes[ti] {
                    break;
                }
                flat -= sizes[ti];
            }
            ti += 1;
        }
        let probe = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            let mut idx = 0;
            m.visit_params_mut(&mut |_, t| {
                if idx == ti {
                    let old = t.data()[flat];
                    t.data_mut()[flat] = (old as f64 + delta) as f32;
                }
                idx += 1;
            });
            let (t, _, l) = check_loss(&m, input, label)?;
            Ok(t.scalar(l))
        };
        // effective step from the f32-realized parameter values
        let mut base = 0.0f32;
        let mut idx = 0;
        model.visit_params(&mut |_, t| {
            if idx == ti {
                base = t.data()[flat];
            }
            idx += 1;
        });
        let plus = (base as f64 + step) as f32;
        let minus = (base as f64 - step) as f32;
        let eff = (plus as f64 - minus as f64) / 2.0;
        if eff <= 0.0 {
            report.skipped += 1;
            continue;
        }
        let numeric = (probe(step)? - probe(-step)?) / (2.0 * eff);
        let analytic = grads[ti][flat];
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-8 {
            report.skipped += 1;
            continue;
        }
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel);
        if rel > tolerance {
            report.failures.push(GradFailure {
                name: names[ti].clone(),
                index: flat,
                analytic,
                numeric,
                rel_err: rel,
            });
        }
    }
    Ok(report)
}
