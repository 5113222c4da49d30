//! Two-stage optimization.
//!
//! Stage A (`global`) trains the backbone and global head with minibatch
//! SGD. Stage B (`local`) loads a stage-A checkpoint, freezes the backbone
//! and global head, and trains only the LSTM, location network and local
//! head; the backbone runs in eval mode there so its statistics cannot
//! drift, and the LSTM state flows across samples within an epoch and resets
//! at epoch boundaries.
//!
//! Weight decay applies to conv/linear/LSTM weight matrices but not to
//! biases or batchnorm parameters.


use crate::backbone::BnUpdates;
use crate::checkpoint::{checkpoint_of, model_from_checkpoint, Checkpoint};
use crate::config::FullConfig;
use crate::data::{preprocess, DatasetManifest, PreprocessConfig, PreprocessMode, SynthConfig};
use crate::error::{Error, Result};
use crate::estimation::{HeadConfig, HeadMode};
use crate::model::AgeModel;
use crate::tape::{BnMode, Tape, TensorId};
use crate::tensor::Tensor;
use crate::backbone::BackboneConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs at which the rate divides by `lr_drop_factor` (0-based).
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: f64,
    /// Supervise the fused distribution instead of the local softmax in
    /// stage B (experimental alternative; the default trains the local
    /// branch directly).
    pub fused_loss: bool,
    /// Re-augment stage-B inputs every epoch instead of caching the frozen
    /// backbone's feature maps.
    pub augment_stage_b: bool,
    pub head: HeadConfig,
    pub backbone: BackboneConfig,
    pub preprocess: PreprocessConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.lr_drop_factor <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr drop epochs must be strictly increasing".into()));
        }
        if let Some(&last) = self.lr_drop_epochs.last() {
            if last >= self.epochs && self.epochs > 0 {
                return Err(Error::Config(format!(
                    "lr drop at epoch {last} is outside the {} training epochs",
                    self.epochs
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must be in [0,1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        self.head.validate()?;
        self.backbone.validate()?;
        self.preprocess.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr / self.lr_drop_factor.powi(drops as i32)
    }

    fn full(&self) -> FullConfig {
        FullConfig { train: self.clone(), synth: SynthConfig::default() }
    }

    /// Checkpoint snapshot text for this configuration.
    pub fn snapshot_text(&self) -> String {
        self.full().canonical_text()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochStats {
    /// One plain-text log record: epoch, stage, lr, loss, accuracy.
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}",
            self.epoch,
            match self.stage {
                Stage::Global => "global",
                Stage::Local => "local",
            },
            self.lr,
            self.loss,
            self.accuracy
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochStats>,
}

/// Class label for a sample under the given head.
pub fn label_of(head: &HeadConfig, age: f64, group: Option<usize>) -> Result<usize> {
    match head.mode {
        HeadMode::GroupClassification => group.ok_or_else(|| {
            Error::Input("group-mode training needs a group label on every sample".into())
        }),
        HeadMode::DexRegression => {
            // nearest discrete age
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &a) in head.age_values.iter().enumerate() {
                let d = (a - age).abs();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            Ok(best)
        }
    }
}

/// Decay applies to weight matrices only (last name segment starts with
/// "w"): conv kernels, linear weights, LSTM gate and location weights.
fn decay_applies(name: &str) -> bool {
    name.rsplit('.').next().map(|s| s.starts_with('w')).unwrap_or(false)
}

/// Momentum buffers for the trainable parameter subset, in visit order.
struct Sgd {
    names: Vec<String>,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    fn fresh(model: &AgeModel) -> Self {
        let mut names = Vec::new();
        let mut velocity = Vec::new();
        model.visit_params(&mut |n, t| {
            if t.requires_grad {
                names.push(n);
                velocity.push(vec![0.0f32; t.numel()]);
            }
        });
        Sgd { names, velocity }
    }

    fn from_checkpoint(model: &AgeModel, ckpt: &Checkpoint) -> Result<Self> {
        let mut sgd = Sgd::fresh(model);
        if ckpt.momentum.len() != sgd.names.len() {
            return Err(Error::CheckpointShape(format!(
                "checkpoint has {} momentum buffers, expected {}",
                ckpt.momentum.len(),
                sgd.names.len()
            )));
        }
        for (i, (name, t)) in ckpt.momentum.iter().enumerate() {
            if *name != sgd.names[i] || t.numel() != sgd.velocity[i].len() {
                return Err(Error::CheckpointShape(format!("momentum buffer {name} misaligned")));
            }
            sgd.velocity[i].copy_from_slice(t.data());
        }
        Ok(sgd)
    }

    fn export(&self) -> Vec<(String, Vec<f32>)> {
        self.names.iter().cloned().zip(self.velocity.iter().cloned()).collect()
    }

    /// v = m*v + (g + wd*theta); theta -= lr*v, all in f32.
    fn step(&mut self, model: &mut AgeModel, grads: &[Option<Vec<f32>>], cfg: &TrainConfig, lr: f64) {
        let lr = lr as f32;
        let m = cfg.momentum as f32;
        let wd = cfg.weight_decay as f32;
        let mut slot = 0usize;
        let mut gi = 0usize;
        model.visit_params_mut(&mut |name, t| {
            let g = grads[gi].as_ref();
            gi += 1;
            if !t.requires_grad {
                return;
            }
            let v = &mut self.velocity[slot];
            slot += 1;
            let g = match g {
                Some(g) => g,
                None => return,
            };
            t.set_grad(g.clone()).expect("gradient shape");
            let decay = if decay_applies(&name) { wd } else { 0.0 };
            let data = t.data_mut();
            for i in 0..data.len() {
                let grad = g[i] + decay * data[i];
                v[i] = m * v[i] + grad;
                data[i] -= lr * v[i];
            }
        });
    }
}

/// Gradients per named parameter, read back from the tape.
fn collect_grads(
    tape: &Tape,
    ids: &[TensorId],
    trainable: &[bool],
) -> Vec<Option<Vec<f32>>> {
    ids.iter()
        .zip(trainable.iter())
        .map(|(&id, &t)| if t { Some(tape.grad_f32(id)) } else { None })
        .collect()
}

fn named_ids(model: &AgeModel, binding: &crate::model::ModelBinding) -> (Vec<TensorId>, Vec<bool>) {
    let mut ids = Vec::new();
    binding.visit_ids(&mut |id| ids.push(id));
    let mut trainable = Vec::new();
    model.visit_params(&mut |_, t| trainable.push(t.requires_grad));
    (ids, trainable)
}

/// Compare config snapshots ignoring the total epoch count, which is the
/// one knob a resume is allowed to extend.
fn resume_compatible(a: &str, b: &str) -> bool {
    let strip = |s: &str| -> Vec<String> {
        s.lines().filter(|l| !l.starts_with("train.epochs")).map(|l| l.to_string()).collect()
    };
    strip(a) == strip(b)
}

fn load_all_pixels(manifest: &DatasetManifest) -> Result<Vec<Tensor>> {
    (0..manifest.samples.len()).map(|i| manifest.load_pixels(i)).collect()
}

fn labels_for(manifest: &DatasetManifest, head: &HeadConfig) -> Result<Vec<usize>> {
    manifest
        .samples
        .iter()
        .map(|s| label_of(head, s.age, s.group))
        .collect()
}

/// Stage A: minibatch SGD over backbone + global head with cross entropy.
/// `init` may be a resume point (same config) or initial weights from an
/// earlier pretraining run (any config with matching tensor names/shapes).
pub fn train_global(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Global {
        return Err(Error::Usage("train_global requires train.stage = global".into()));
    }
    let snapshot = cfg.snapshot_text();
    let labels = labels_for(manifest, &cfg.head)?;
    let pixels = load_all_pixels(manifest)?;
    let n = pixels.len();

    let mut start_epoch = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED_0001));
    let resuming = init.map(|c| resume_compatible(&c.config_text, &snapshot)).unwrap_or(false);
    let mut model: AgeModel;
    match init {
        Some(ckpt) if resuming => {
            let (m, _) = model_from_checkpoint(ckpt)?;
            model = m;
            rng = ckpt.rng.restore();
            start_epoch = ckpt.epoch as usize;
        }
        Some(ckpt) => {
            // initialization-only: take the weights, start a fresh run
            let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            model = AgeModel::new(
                &FullConfig { train: cfg.clone(), synth: SynthConfig::default() }.model_config(),
                &mut init_rng,
            )?;
            let (src, _) = model_from_checkpoint(ckpt)?;
            let mut donor = Vec::new();
            src.visit_params(&mut |n, t| donor.push((n, t.clone())));
            src.visit_buffers(&mut |n, t| donor.push((n, t.clone())));
            let mut missing = Vec::new();
            let mut fill = |n: String, t: &mut Tensor| {
                match donor.iter().find(|(dn, dt)| *dn == n && dt.shape() == t.shape()) {
                    Some((_, dt)) => t.data_mut().copy_from_slice(dt.data()),
                    None => missing.push(n),
                }
            };
            model.visit_params_mut(&mut fill);
            model.visit_buffers_mut(&mut fill);
            if !missing.is_empty() {
                return Err(Error::CheckpointShape(format!(
                    "initial checkpoint incompatible with this config: {}",
                    missing.join(", ")
                )));
            }
        }
        None => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            model = AgeModel::new(
                &FullConfig { train: cfg.clone(), synth: SynthConfig::default() }.model_config(),
                &mut init_rng,
            )?;
        }
    }
    // stage A trains the backbone and global head only
    model.freeze_attention();
    let mut sgd = match init {
        Some(ckpt) if resuming => Sgd::from_checkpoint(&model, ckpt)?,
        _ => Sgd::fresh(&model),
    };

    let s = cfg.preprocess.crop;
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.gen()).collect();
            let mut batch = vec![0.0f32; chunk.len() * 3 * s * s];
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for (bi, (&idx, &seed)) in chunk.iter().zip(seeds.iter()).enumerate() {
                let img = preprocess(&pixels[idx], &cfg.preprocess, PreprocessMode::Train, seed)?;
                batch[bi * 3 * s * s..(bi + 1) * 3 * s * s].copy_from_slice(img.data());
                batch_labels.push(labels[idx]);
            }
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let imgs = tape.constant_f32(vec![chunk.len(), 3, s, s], &batch);
            let mut updates = BnUpdates::default();
            let fwd = model.forward_global(&mut tape, &binding, imgs, BnMode::Train, &mut updates)?;
            let (probs, loss) = tape.softmax_cross_entropy(fwd.logits, &batch_labels)?;
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_idx });
            }
            tape.backward(loss)?;
            let (ids, trainable) = named_ids(&model, &binding);
            let grads = collect_grads(&tape, &ids, &trainable);
            let k = cfg.head.k;
            let pv = tape.value(probs);
            for (bi, &lbl) in batch_labels.iter().enumerate() {
                let row = &pv[bi * k..(bi + 1) * k];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == lbl {
                    correct += 1;
                }
            }
            drop(tape);
            model.backbone.apply_bn_updates(&updates);
            sgd.step(&mut model, &grads, cfg, lr);
            loss_sum += loss_val * chunk.len() as f64;
        }
        log.push(EpochStats {
            epoch,
            stage: Stage::Global,
            lr,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }

    let checkpoint = checkpoint_of(&model, snapshot, cfg.epochs as u64, &rng, &sgd.export());
    Ok(TrainOutcome { checkpoint, log })
}

/// Stage B: freeze the stage-A weights and train the attention pipeline on
/// the local branch's cross entropy (or the fused loss when configured).
pub fn train_local(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    base: &Checkpoint,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Local {
        return Err(Error::Usage("train_local requires train.stage = local".into()));
    }
    let snapshot = cfg.snapshot_text();
    let labels = labels_for(manifest, &cfg.head)?;
    let pixels = load_all_pixels(manifest)?;
    let n = pixels.len();

    let resume = resume_compatible(&base.config_text, &snapshot);
    let (mut model, _) = model_from_checkpoint(base)?;
    model.freeze_global();
    let mut sgd;
    let mut rng;
    let mut start_epoch = 0usize;
    if resume {
        sgd = Sgd::from_checkpoint(&model, base)?;
        rng = base.rng.restore();
        start_epoch = base.epoch as usize;
    } else {
        sgd = Sgd::fresh(&model);
        rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED_00B2));
    }

    // frozen backbone + eval-mode batchnorm: deterministic feature maps,
    // cacheable whenever stage-B augmentation is off
    let (c, hf, wf) = cfg.backbone.feature_map_shape()?;
    let mut fmap_cache: Vec<Vec<f64>> = Vec::new();
    let mut gprob_cache: Vec<Vec<f64>> = Vec::new();
    if !cfg.augment_stage_b {
        for i in 0..n {
            let img = preprocess(&pixels[i], &cfg.preprocess, PreprocessMode::Eval, 0)?;
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let x = tape.leaf(&img);
            let mut upd = BnUpdates::default();
            let fwd = model.forward_global(&mut tape, &binding, x, BnMode::Eval, &mut upd)?;
            fmap_cache.push(tape.value(fwd.fmap).to_vec());
            gprob_cache.push(tape.value(fwd.probs).to_vec());
        }
    }

    let named: Vec<(String, bool)> = {
        let mut v = Vec::new();
        model.visit_params(&mut |n, t| v.push((n, t.requires_grad)));
        v
    };
    let n_params = named.len();

    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut state = model.fresh_state();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut accum: Vec<Option<Vec<f64>>> = vec![None; n_params];
        let mut accum_count = 0usize;

        let flush = |model: &mut AgeModel, accum: &mut Vec<Option<Vec<f64>>>, count: &mut usize, sgd: &mut Sgd| {
            if *count == 0 {
                return;
            }
            let scale = 1.0 / *count as f64;
            let grads: Vec<Option<Vec<f32>>> = accum
                .iter()
                .map(|o| o.as_ref().map(|v| v.iter().map(|&g| (g * scale) as f32).collect()))
                .collect();
            sgd.step(model, &grads, cfg, lr);
            accum.iter_mut().for_each(|o| *o = None);
            *count = 0;
        };

        for (pos, &idx) in order.iter().enumerate() {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let fmap = if cfg.augment_stage_b {
                let seed: u64 = rng.gen();
                let img = preprocess(&pixels[idx], &cfg.preprocess, PreprocessMode::Train, seed)?;
                let x = tape.leaf(&img);
                let mut upd = BnUpdates::default();
                let fwd = model.forward_global(&mut tape, &binding, x, BnMode::Eval, &mut upd)?;
                fwd.fmap
            } else {
                tape.constant(vec![c, hf, wf], fmap_cache[idx].clone())
            };
            let attn = model.forward_attention(&mut tape, &binding, fmap, &state)?;
            let label = labels[idx];
            let (loss, local_probs) = if cfg.fused_loss {
                let pg = if cfg.augment_stage_b {
                    // recompute global probabilities on this augmented view
                    let pooled = tape.avg_pool2d(fmap, hf)?;
                    let flat = tape.reshape(pooled, vec![c])?;
                    let logits = tape.linear(flat, binding.global_w, Some(binding.global_b))?;
                    tape.softmax(logits)?
                } else {
                    tape.constant(vec![cfg.head.k], gprob_cache[idx].clone())
                };
                let fused = crate::attention::fuse_on_tape(&mut tape, pg, attn.p_local)?;
                (tape.nll_from_probs(fused, label)?, attn.p_local)
            } else {
                let (p, l) = tape.softmax_cross_entropy(attn.logits, &[label])?;
                (l, p)
            };
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch, batch: pos / cfg.batch_size });
            }
            tape.backward(loss)?;
            let (ids, _) = named_ids(&model, &binding);
            for (pi, (_, trainable)) in named.iter().enumerate() {
                if !trainable {
                    continue;
                }
                let g = tape.grad(ids[pi]);
                match &mut accum[pi] {
                    Some(acc) => acc.iter_mut().zip(g.iter()).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g.to_vec()),
                }
            }
            accum_count += 1;
            let pl = tape.value(local_probs);
            let argmax = pl
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == label {
                correct += 1;
            }
            loss_sum += loss_val;
            state = attn.state_next;
            if accum_count == cfg.batch_size {
                flush(&mut model, &mut accum, &mut accum_count, &mut sgd);
            }
        }
        flush(&mut model, &mut accum, &mut accum_count, &mut sgd);
        log.push(EpochStats {
            epoch,
            stage: Stage::Local,
            lr,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }

    let checkpoint = checkpoint_of(&model, snapshot, cfg.epochs as u64, &rng, &sgd.export());
    Ok(TrainOutcome { checkpoint, log })
}
