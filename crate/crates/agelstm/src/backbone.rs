//! Residual backbone with optional multi-level (RoR) shortcuts.
//!
//! Four groups of two-conv basic blocks behind a stem. Each block computes
//! `relu(h(x) + F(x))` with `F = conv-BN-ReLU-conv-BN` and `h` either the
//! identity or a 1x1 stride-matched projection when the block changes shape.
//! In RoR mode every group-end junction additionally adds the group's own
//! input, and the last junction also adds the post-stem feature; both extra
//! terms use identity mappings where shapes allow and 1x1 projections where
//! they do not. Disabling the shortcuts makes the RoR forward degenerate to
//! the plain residual forward, op for op.

use crate::error::{Error, Result};
use crate::tape::{BnBatchStats, BnMode, Tape, TensorId};
use crate::tensor::Tensor;
use rand::Rng;

pub const NUM_GROUPS: usize = 4;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    ResNets,
    Ror,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub group_depths: [usize; NUM_GROUPS],
    pub group_channels: [usize; NUM_GROUPS],
    pub input_channels: usize,
    /// Square input side in pixels.
    pub input_size: usize,
    pub ror_shortcuts_enabled: bool,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Average-pool window applied after the stem (1 = none).
    pub stem_pool: usize,
    pub group_strides: [usize; NUM_GROUPS],
}

impl BackboneConfig {
    /// Full-scale preset: 224x224 input down to a 512x7x7 feature map.
    pub fn paper(arch: Arch) -> Self {
        BackboneConfig {
            arch,
            group_depths: [3, 4, 6, 3],
            group_channels: [64, 128, 256, 512],
            input_channels: 3,
            input_size: 224,
            ror_shortcuts_enabled: arch == Arch::Ror,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: 2,
            group_strides: [1, 2, 2, 2],
        }
    }

    /// Desk-scale preset keeping the 7x7 attention geometry: 56x56 in,
    /// 32x7x7 out.
    pub fn toy(arch: Arch) -> Self {
        BackboneConfig {
            arch,
            group_depths: [1, 1, 1, 1],
            group_channels: [8, 16, 24, 32],
            input_channels: 3,
            input_size: 56,
            ror_shortcuts_enabled: arch == Arch::Ror,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: 1,
            group_strides: [1, 2, 2, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("every residual group needs at least one block".into()));
        }
        if self.group_channels.iter().any(|&c| c == 0) || self.input_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.stem_stride == 0 || self.stem_pool == 0 || self.group_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("strides and pool windows must be >= 1".into()));
        }
        self.feature_map_shape().map(|_| ())
    }

    fn stem_pad(&self) -> usize {
        self.stem_kernel / 2
    }

    /// Spatial side after the stem conv and stem pool.
    fn stem_out_size(&self) -> Result<usize> {
        let s = self.input_size;
        let k = self.stem_kernel;
        let p = self.stem_pad();
        if k > s + 2 * p {
            return Err(Error::Config(format!("stem kernel {k} larger than input {s}")));
        }
        let after_conv = (s + 2 * p - k) / self.stem_stride + 1;
        if self.stem_pool > after_conv {
            return Err(Error::Config(format!(
                "stem pool {} larger than post-stem map {after_conv}",
                self.stem_pool
            )));
        }
        Ok(after_conv / self.stem_pool)
    }

    /// Spatial side at the end of each group.
    fn group_out_sizes(&self) -> Result<[usize; NUM_GROUPS]> {
        let mut s = self.stem_out_size()?;
        let mut out = [0usize; NUM_GROUPS];
        for g in 0..NUM_GROUPS {
            let stride = self.group_strides[g];
            if s < 1 {
                return Err(Error::Config("feature map collapsed to zero size".into()));
            }
            s = (s + 2 - 3) / stride + 1; // 3x3 pad-1 conv in the group's first block
            out[g] = s;
        }
        Ok(out)
    }

    /// (channels, height, width) of the final feature map.
    pub fn feature_map_shape(&self) -> Result<(usize, usize, usize)> {
        let sizes = self.group_out_sizes()?;
        let s = sizes[NUM_GROUPS - 1];
        if s == 0 {
            return Err(Error::Config("final feature map has zero extent".into()));
        }
        Ok((self.group_channels[NUM_GROUPS - 1], s, s))
    }

    /// 1-based block indices of the RoR junctions, counted across groups.
    pub fn junction_block_indices(&self) -> [usize; NUM_GROUPS] {
        let mut out = [0usize; NUM_GROUPS];
        let mut acc = 0;
        for g in 0..NUM_GROUPS {
            acc += self.group_depths[g];
            out[g] = acc;
        }
        out
    }
}

/// Batchnorm parameters plus running statistics buffers.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnParams {
    fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::full(vec![channels], 1.0).param(),
            beta: Tensor::zeros(vec![channels]).param(),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
        }
    }

    fn fold_batch(&mut self, stats: &BnBatchStats) {
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(stats.mean.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(stats.var.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BnBinding {
    pub gamma: TensorId,
    pub beta: TensorId,
}

/// Identifies one batchnorm inside the backbone for running-stat updates.
#[derive(Debug, Clone, Copy)]
pub enum BnRef {
    Stem,
    Block { group: usize, block: usize, second: bool },
}

/// Train-mode batch statistics collected during a forward pass; the owner
/// folds them into running buffers after the step.
#[derive(Debug, Default)]
pub struct BnUpdates(pub Vec<(BnRef, BnBatchStats)>);

/// Either a plain identity or a 1x1 stride-matched projection.
#[derive(Debug, Clone)]
pub enum Shortcut {
    Identity,
    Proj { w: Tensor, stride: usize },
}

impl Shortcut {
    fn make<R: Rng>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        if c_in == c_out && stride == 1 {
            Shortcut::Identity
        } else {
            let w = Tensor::glorot_uniform(vec![c_out, c_in, 1, 1], c_in, c_out, rng).param();
            Shortcut::Proj { w, stride }
        }
    }

    fn bind(&self, tape: &mut Tape) -> Option<TensorId> {
        match self {
            Shortcut::Identity => None,
            Shortcut::Proj { w, .. } => Some(tape.leaf(w)),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: Option<TensorId>, x: TensorId) -> Result<TensorId> {
        match (self, bound) {
            (Shortcut::Identity, _) => Ok(x),
            (Shortcut::Proj { stride, .. }, Some(w)) => tape.conv2d(x, w, None, *stride, 0),
            _ => Err(Error::Config("projection shortcut missing its binding".into())),
        }
    }
}

/// Two-conv basic residual block.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Tensor,
    pub bn1: BnParams,
    pub conv2: Tensor,
    pub bn2: BnParams,
    pub shortcut: Shortcut,
    pub stride: usize,
}

pub struct BlockBinding {
    pub conv1: TensorId,
    pub bn1: BnBinding,
    pub conv2: TensorId,
    pub bn2: BnBinding,
    pub shortcut: Option<TensorId>,
}

impl BasicBlock {
    fn new<R: Rng>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let fan = 9; // 3x3 kernels
        BasicBlock {
            conv1: Tensor::glorot_uniform(vec![c_out, c_in, 3, 3], c_in * fan, c_out * fan, rng).param(),
            bn1: BnParams::new(c_out),
            conv2: Tensor::glorot_uniform(vec![c_out, c_out, 3, 3], c_out * fan, c_out * fan, rng).param(),
            bn2: BnParams::new(c_out),
            shortcut: Shortcut::make(c_in, c_out, stride, rng),
            stride,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BlockBinding {
        BlockBinding {
            conv1: tape.leaf(&self.conv1),
            bn1: BnBinding { gamma: tape.leaf(&self.bn1.gamma), beta: tape.leaf(&self.bn1.beta) },
            conv2: tape.leaf(&self.conv2),
            bn2: BnBinding { gamma: tape.leaf(&self.bn2.gamma), beta: tape.leaf(&self.bn2.beta) },
            shortcut: self.shortcut.bind(tape),
        }
    }

    /// `extras` are added into the pre-activation junction sum (RoR terms).
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &BlockBinding,
        x: TensorId,
        extras: &[TensorId],
        mode: BnMode,
        at: (usize, usize),
        updates: &mut BnUpdates,
    ) -> Result<TensorId> {
        let c1 = tape.conv2d(x, binding.conv1, None, self.stride, 1)?;
        let n1 = bn_forward(tape, c1, &self.bn1, binding.bn1, mode, BnRef::Block { group: at.0, block: at.1, second: false }, updates)?;
        let a1 = tape.relu(n1);
        let c2 = tape.conv2d(a1, binding.conv2, None, 1, 1)?;
        let f = bn_forward(tape, c2, &self.bn2, binding.bn2, mode, BnRef::Block { group: at.0, block: at.1, second: true }, updates)?;
        let h = self.shortcut.apply(tape, binding.shortcut, x)?;
        let mut sum = tape.add(h, f)?;
        for &e in extras {
            sum = tape.add(sum, e)?;
        }
        Ok(tape.relu(sum))
    }
}

fn bn_forward(
    tape: &mut Tape,
    x: TensorId,
    params: &BnParams,
    binding: BnBinding,
    mode: BnMode,
    at: BnRef,
    updates: &mut BnUpdates,
) -> Result<TensorId> {
    match mode {
        BnMode::Train => {
            let (y, stats) = tape.batchnorm2d_train(x, binding.gamma, binding.beta)?;
            updates.0.push((at, stats));
            Ok(y)
        }
        BnMode::Eval => tape.batchnorm2d_eval(
            x,
            binding.gamma,
            binding.beta,
            params.running_mean.data(),
            params.running_var.data(),
        ),
    }
}

#[derive(Debug, Clone)]
struct Group {
    blocks: Vec<BasicBlock>,
    /// RoR middle-level term: projects the group's input onto its output.
    middle_tap: Option<Shortcut>,
}

pub struct GroupBinding {
    blocks: Vec<BlockBinding>,
    middle_tap: Option<Option<TensorId>>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem_w: Tensor,
    stem_bn: BnParams,
    groups: Vec<Group>,
    /// RoR root-level term feeding the last junction from the post-stem map.
    root_tap: Option<Shortcut>,
    pub frozen: bool,
}

pub struct BackboneBinding {
    stem_w: TensorId,
    stem_bn: BnBinding,
    groups: Vec<GroupBinding>,
    root_tap: Option<Option<TensorId>>,
}

impl BackboneBinding {
    /// Leaf ids in the same order as [`Backbone::visit_params`].
    pub fn visit_ids<F: FnMut(TensorId)>(&self, f: &mut F) {
        f(self.stem_w);
        f(self.stem_bn.gamma);
        f(self.stem_bn.beta);
        for g in &self.groups {
            for b in &g.blocks {
                f(b.conv1);
                f(b.bn1.gamma);
                f(b.bn1.beta);
                f(b.conv2);
                f(b.bn2.gamma);
                f(b.bn2.beta);
                if let Some(id) = b.shortcut {
                    f(id);
                }
            }
            if let Some(Some(id)) = g.middle_tap {
                f(id);
            }
        }
        if let Some(Some(id)) = self.root_tap {
            f(id);
        }
    }
}

impl Backbone {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = config.stem_kernel;
        let c0 = config.group_channels[0];
        let stem_w = Tensor::glorot_uniform(
            vec![c0, config.input_channels, k, k],
            config.input_channels * k * k,
            c0 * k * k,
            rng,
        )
        .param();
        let stem_bn = BnParams::new(c0);

        let mut groups = Vec::with_capacity(NUM_GROUPS);
        let mut c_in = c0;
        for g in 0..NUM_GROUPS {
            let c_out = config.group_channels[g];
            let mut blocks = Vec::with_capacity(config.group_depths[g]);
            for b in 0..config.group_depths[g] {
                let stride = if b == 0 { config.group_strides[g] } else { 1 };
                let block_in = if b == 0 { c_in } else { c_out };
                blocks.push(BasicBlock::new(block_in, c_out, stride, rng));
            }
            let middle_tap = (config.arch == Arch::Ror)
                .then(|| Shortcut::make(c_in, c_out, config.group_strides[g], rng));
            groups.push(Group { blocks, middle_tap });
            c_in = c_out;
        }

        let root_tap = if config.arch == Arch::Ror {
            let s_stem = config.stem_out_size()?;
            let s_out = config.group_out_sizes()?[NUM_GROUPS - 1];
            let stride = s_stem / s_out;
            if stride == 0 || (s_stem - 1) / stride + 1 != s_out {
                return Err(Error::Config(format!(
                    "root shortcut cannot map {s_stem} onto {s_out} with an integer stride"
                )));
            }
            Some(Shortcut::make(c0, config.group_channels[NUM_GROUPS - 1], stride, rng))
        } else {
            None
        };

        Ok(Backbone { config, stem_w, stem_bn, groups, root_tap, frozen: false })
    }

    /// Mark every parameter as not participating in gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.visit_params_mut(&mut |_, t| t.requires_grad = false);
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneBinding {
        BackboneBinding {
            stem_w: tape.leaf(&self.stem_w),
            stem_bn: BnBinding { gamma: tape.leaf(&self.stem_bn.gamma), beta: tape.leaf(&self.stem_bn.beta) },
            groups: self
                .groups
                .iter()
                .map(|g| GroupBinding {
                    blocks: g.blocks.iter().map(|b| b.bind(tape)).collect(),
                    middle_tap: g.middle_tap.as_ref().map(|t| t.bind(tape)),
                })
                .collect(),
            root_tap: self.root_tap.as_ref().map(|t| t.bind(tape)),
        }
    }

    fn check_input(&self, tape: &Tape, image: TensorId) -> Result<()> {
        let s = self.config.input_size;
        let c = self.config.input_channels;
        let shape = tape.shape(image);
        let ok = match shape.len() {
            3 => shape == [c, s, s],
            4 => shape[1..] == [c, s, s],
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "backbone expects [{c},{s},{s}] images (optionally batched), got {shape:?}"
            )))
        }
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        binding: &BackboneBinding,
        image: TensorId,
        mode: BnMode,
        with_taps: bool,
        updates: &mut BnUpdates,
    ) -> Result<TensorId> {
        self.check_input(tape, image)?;
        let cfg = &self.config;
        let stem_c = tape.conv2d(image, binding.stem_w, None, cfg.stem_stride, cfg.stem_pad())?;
        let stem_n = bn_forward(tape, stem_c, &self.stem_bn, binding.stem_bn, mode, BnRef::Stem, updates)?;
        let mut x = tape.relu(stem_n);
        if cfg.stem_pool > 1 {
            x = tape.avg_pool2d(x, cfg.stem_pool)?;
        }
        let root = x;

        for (g, (group, gbind)) in self.groups.iter().zip(binding.groups.iter()).enumerate() {
            let group_in = x;
            let last = group.blocks.len() - 1;
            for (b, (block, bbind)) in group.blocks.iter().zip(gbind.blocks.iter()).enumerate() {
                let mut extras = Vec::new();
                if with_taps && b == last {
                    if let (Some(tap), Some(tbind)) = (&group.middle_tap, &gbind.middle_tap) {
                        extras.push(tap.apply(tape, *tbind, group_in)?);
                    }
                    if g == NUM_GROUPS - 1 {
                        if let (Some(tap), Some(tbind)) = (&self.root_tap, &binding.root_tap) {
                            extras.push(tap.apply(tape, *tbind, root)?);
                        }
                    }
                }
                x = block.forward(tape, bbind, x, &extras, mode, (g, b), updates)?;
            }
        }
        Ok(x)
    }

    /// Plain residual forward; RoR taps (if any) are ignored.
    pub fn resnet_forward(
        &self,
        tape: &mut Tape,
        binding: &BackboneBinding,
        image: TensorId,
        mode: BnMode,
        updates: &mut BnUpdates,
    ) -> Result<TensorId> {
        self.forward_impl(tape, binding, image, mode, false, updates)
    }

    /// RoR forward: junction terms applied when shortcuts are enabled.
    pub fn ror_forward(
        &self,
        tape: &mut Tape,
        binding: &BackboneBinding,
        image: TensorId,
        mode: BnMode,
        updates: &mut BnUpdates,
    ) -> Result<TensorId> {
        if self.config.arch != Arch::Ror {
            return Err(Error::Usage("ror_forward requires an RoR-configured backbone".into()));
        }
        self.forward_impl(tape, binding, image, mode, self.config.ror_shortcuts_enabled, updates)
    }

    /// Arch-dispatched forward used by the model.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &BackboneBinding,
        image: TensorId,
        mode: BnMode,
        updates: &mut BnUpdates,
    ) -> Result<TensorId> {
        match self.config.arch {
            Arch::ResNets => self.resnet_forward(tape, binding, image, mode, updates),
            Arch::Ror => self.ror_forward(tape, binding, image, mode, updates),
        }
    }

    /// Fold collected train-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &BnUpdates) {
        for (at, stats) in &updates.0 {
            match at {
                BnRef::Stem => self.stem_bn.fold_batch(stats),
                BnRef::Block { group, block, second } => {
                    let blk = &mut self.groups[*group].blocks[*block];
                    if *second {
                        blk.bn2.fold_batch(stats)
                    } else {
                        blk.bn1.fold_batch(stats)
                    }
                }
            }
        }
    }

    pub fn visit_params<'a, F: FnMut(String, &'a Tensor)>(&'a self, f: &mut F) {
        f("backbone.stem.w".into(), &self.stem_w);
        f("backbone.stem.bn.gamma".into(), &self.stem_bn.gamma);
        f("backbone.stem.bn.beta".into(), &self.stem_bn.beta);
        for (g, group) in self.groups.iter().enumerate() {
            for (b, blk) in group.blocks.iter().enumerate() {
                let p = format!("backbone.g{g}.b{b}");
                f(format!("{p}.conv1.w"), &blk.conv1);
                f(format!("{p}.bn1.gamma"), &blk.bn1.gamma);
                f(format!("{p}.bn1.beta"), &blk.bn1.beta);
                f(format!("{p}.conv2.w"), &blk.conv2);
                f(format!("{p}.bn2.gamma"), &blk.bn2.gamma);
                f(format!("{p}.bn2.beta"), &blk.bn2.beta);
                if let Shortcut::Proj { w, .. } = &blk.shortcut {
                    f(format!("{p}.down.w"), w);
                }
            }
            if let Some(Shortcut::Proj { w, .. }) = &group.middle_tap {
                f(format!("backbone.g{g}.tap.w"), w);
            }
        }
        if let Some(Shortcut::Proj { w, .. }) = &self.root_tap {
            f("backbone.root_tap.w".into(), w);
        }
    }

    pub fn visit_params_mut<F: FnMut(String, &mut Tensor)>(&mut self, f: &mut F) {
        f("backbone.stem.w".into(), &mut self.stem_w);
        f("backbone.stem.bn.gamma".into(), &mut self.stem_bn.gamma);
        f("backbone.stem.bn.beta".into(), &mut self.stem_bn.beta);
        for (g, group) in self.groups.iter_mut().enumerate() {
            for (b, blk) in group.blocks.iter_mut().enumerate() {
                let p = format!("backbone.g{g}.b{b}");
                f(format!("{p}.conv1.w"), &mut blk.conv1);
                f(format!("{p}.bn1.gamma"), &mut blk.bn1.gamma);
                f(format!("{p}.bn1.beta"), &mut blk.bn1.beta);
                f(format!("{p}.conv2.w"), &mut blk.conv2);
                f(format!("{p}.bn2.gamma"), &mut blk.bn2.gamma);
                f(format!("{p}.bn2.beta"), &mut blk.bn2.beta);
                if let Shortcut::Proj { w, .. } = &mut blk.shortcut {
                    f(format!("{p}.down.w"), w);
                }
            }
            if let Some(Shortcut::Proj { w, .. }) = &mut group.middle_tap {
                f(format!("backbone.g{g}.tap.w"), w);
            }
        }
        if let Some(Shortcut::Proj { w, .. }) = &mut self.root_tap {
            f("backbone.root_tap.w".into(), w);
        }
    }

    pub fn visit_buffers<'a, F: FnMut(String, &'a Tensor)>(&'a self, f: &mut F) {
        f("backbone.stem.bn.rmean".into(), &self.stem_bn.running_mean);
        f("backbone.stem.bn.rvar".into(), &self.stem_bn.running_var);
        for (g, group) in self.groups.iter().enumerate() {
            for (b, blk) in group.blocks.iter().enumerate() {
                let p = format!("backbone.g{g}.b{b}");
                f(format!("{p}.bn1.rmean"), &blk.bn1.running_mean);
                f(format!("{p}.bn1.rvar"), &blk.bn1.running_var);
                f(format!("{p}.bn2.rmean"), &blk.bn2.running_mean);
                f(format!("{p}.bn2.rvar"), &blk.bn2.running_var);
            }
        }
    }

    pub fn visit_buffers_mut<F: FnMut(String, &mut Tensor)>(&mut self, f: &mut F) {
        f("backbone.stem.bn.rmean".into(), &mut self.stem_bn.running_mean);
        f("backbone.stem.bn.rvar".into(), &mut self.stem_bn.running_var);
        for (g, group) in self.groups.iter_mut().enumerate() {
            for (b, blk) in group.blocks.iter_mut().enumerate() {
                let p = format!("backbone.g{g}.b{b}");
                f(format!("{p}.bn1.rmean"), &mut blk.bn1.running_mean);
                f(format!("{p}.bn1.rvar"), &mut blk.bn1.running_var);
                f(format!("{p}.bn2.rmean"), &mut blk.bn2.running_mean);
                f(format!("{p}.bn2.rvar"), &mut blk.bn2.running_var);
            }
        }
    }

    /// Hand access for tests: group g, block b.
    pub fn block_mut(&mut self, g: usize, b: usize) -> &mut BasicBlock {
        &mut self.groups[g].blocks[b]
    }

    pub fn block(&self, g: usize, b: usize) -> &BasicBlock {
        &self.groups[g].blocks[b]
    }
}
