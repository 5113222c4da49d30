//! Plain `key = value` configuration with dotted section prefixes
//! (`backbone.arch = ror`). The same text format is embedded in checkpoints
//! as the config snapshot and accepted for `--set` overrides.

use crate::backbone::{Arch, BackboneConfig};
use crate::data::{PreprocessConfig, RegionSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::estimation::{HeadConfig, HeadMode};
use crate::model::ModelConfig;
use crate::trainer::{Stage, TrainConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Raw parsed key/value pairs, later resolved against defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "backbone.preset",
    "backbone.arch",
    "backbone.depths",
    "backbone.channels",
    "backbone.input_channels",
    "backbone.input_size",
    "backbone.ror_shortcuts",
    "backbone.stem_kernel",
    "backbone.stem_stride",
    "backbone.stem_pool",
    "backbone.strides",
    "head.mode",
    "head.classes",
    "head.age_min",
    "head.age_max",
    "train.stage",
    "train.epochs",
    "train.base_lr",
    "train.lr_drops",
    "train.lr_drop_factor",
    "train.momentum",
    "train.weight_decay",
    "train.batch_size",
    "train.seed",
    "train.tau",
    "train.fused_loss",
    "train.augment_stage_b",
    "data.resize",
    "data.crop",
    "data.jitter",
    "data.hflip",
    "synth.samples",
    "synth.classes",
    "synth.image_size",
    "synth.region",
    "synth.subjects",
    "synth.folds",
    "synth.seed",
];

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: lineno + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Parse { line: lineno + 1, msg: format!("unknown config key {key:?}") });
            }
            entries.insert(key, value.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {spec:?} is not key=value")))?;
        let key = key.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Usage(format!("override references unknown config key {key:?}")));
        }
        self.entries.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|_| Error::Config(format!("config key {key} has bad value {v:?}"))),
        }
    }

    fn parse_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::Config(format!("config key {key} wants true/false, got {v:?}"))),
        }
    }

    fn parse_list4(&self, key: &str, default: [usize; 4]) -> Result<[usize; 4]> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("config key {key} has bad list {v:?}")))
                    })
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(Error::Config(format!("config key {key} needs 4 entries, got {v:?}")));
                }
                Ok([parts[0], parts[1], parts[2], parts[3]])
            }
        }
    }

    fn parse_usize_list(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default),
            Some("") | Some("none") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("config key {key} has bad list {v:?}")))
                })
                .collect(),
        }
    }
}

/// Fully resolved configuration for every subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct FullConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl FullConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let arch = match kv.get("backbone.arch").unwrap_or("resnets") {
            "resnets" | "resnet" => Arch::ResNets,
            "ror" => Arch::Ror,
            other => return Err(Error::Config(format!("unknown backbone.arch {other:?}"))),
        };
        let mut backbone = match kv.get("backbone.preset") {
            None | Some("toy") => BackboneConfig::toy(arch),
            Some("paper") | Some("full") => BackboneConfig::paper(arch),
            Some(other) => return Err(Error::Config(format!("unknown backbone.preset {other:?}"))),
        };
        backbone.group_depths = kv.parse_list4("backbone.depths", backbone.group_depths)?;
        backbone.group_channels = kv.parse_list4("backbone.channels", backbone.group_channels)?;
        backbone.input_channels = kv.parse_as("backbone.input_channels", backbone.input_channels)?;
        backbone.input_size = kv.parse_as("backbone.input_size", backbone.input_size)?;
        backbone.ror_shortcuts_enabled =
            kv.parse_bool("backbone.ror_shortcuts", arch == Arch::Ror)?;
        backbone.stem_kernel = kv.parse_as("backbone.stem_kernel", backbone.stem_kernel)?;
        backbone.stem_stride = kv.parse_as("backbone.stem_stride", backbone.stem_stride)?;
        backbone.stem_pool = kv.parse_as("backbone.stem_pool", backbone.stem_pool)?;
        backbone.group_strides = kv.parse_list4("backbone.strides", backbone.group_strides)?;
        backbone.validate()?;

        let head = match kv.get("head.mode").unwrap_or("group") {
            "group" => {
                let k = kv.parse_as("head.classes", 4usize)?;
                if k == 8 {
                    HeadConfig::adience_groups()
                } else {
                    HeadConfig::groups(k)?
                }
            }
            "dex" => {
                let lo = kv.parse_as("head.age_min", 0usize)?;
                let hi = kv.parse_as("head.age_max", 100usize)?;
                HeadConfig::dex_range(lo, hi)?
            }
            other => return Err(Error::Config(format!("unknown head.mode {other:?}"))),
        };

        let preprocess = PreprocessConfig {
            resize: kv.parse_as("data.resize", 64usize)?,
            crop: kv.parse_as("data.crop", backbone.input_size)?,
            jitter: kv.parse_bool("data.jitter", false)?,
            hflip: kv.parse_bool("data.hflip", true)?,
        };
        preprocess.validate()?;
        if preprocess.crop != backbone.input_size {
            return Err(Error::Config(format!(
                "data.crop = {} must match backbone.input_size = {}",
                preprocess.crop, backbone.input_size
            )));
        }

        let stage = match kv.get("train.stage").unwrap_or("global") {
            "global" => Stage::Global,
            "local" => Stage::Local,
            other => return Err(Error::Config(format!("unknown train.stage {other:?}"))),
        };
        let train = TrainConfig {
            stage,
            epochs: kv.parse_as("train.epochs", 30usize)?,
            base_lr: kv.parse_as("train.base_lr", 0.05f64)?,
            lr_drop_epochs: kv.parse_usize_list("train.lr_drops", vec![20])?,
            lr_drop_factor: kv.parse_as("train.lr_drop_factor", 10.0f64)?,
            momentum: kv.parse_as("train.momentum", 0.9f64)?,
            weight_decay: kv.parse_as("train.weight_decay", 1e-4f64)?,
            batch_size: kv.parse_as("train.batch_size", 32usize)?,
            seed: kv.parse_as("train.seed", 0u64)?,
            tau: kv.parse_as("train.tau", 25.0f64)?,
            fused_loss: kv.parse_bool("train.fused_loss", false)?,
            augment_stage_b: kv.parse_bool("train.augment_stage_b", false)?,
            head,
            backbone,
            preprocess,
        };
        train.validate()?;

        let synth = SynthConfig {
            n_samples: kv.parse_as("synth.samples", 640usize)?,
            n_classes: kv.parse_as("synth.classes", 4usize)?,
            image_size: kv.parse_as("synth.image_size", 64usize)?,
            region: RegionSpec::parse(kv.get("synth.region").unwrap_or("tl"))?,
            n_subjects: kv.parse_as("synth.subjects", 80usize)?,
            n_folds: kv.parse_as("synth.folds", 5usize)?,
            seed: kv.parse_as("synth.seed", 0u64)?,
            ..SynthConfig::default()
        };

        Ok(FullConfig { train, synth })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.train.backbone.clone(),
            head: self.train.head.clone(),
            tau: self.train.tau,
        }
    }

    /// Canonical dump of every effective setting; what checkpoints embed and
    /// every run prints.
    pub fn canonical_text(&self) -> String {
        let t = &self.train;
        let b = &t.backbone;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "backbone.arch = {}",
            match b.arch {
                Arch::ResNets => "resnets",
                Arch::Ror => "ror",
            }
        );
        let list4 = |v: &[usize; 4]| format!("{},{},{},{}", v[0], v[1], v[2], v[3]);
        let _ = writeln!(out, "backbone.depths = {}", list4(&b.group_depths));
        let _ = writeln!(out, "backbone.channels = {}", list4(&b.group_channels));
        let _ = writeln!(out, "backbone.input_channels = {}", b.input_channels);
        let _ = writeln!(out, "backbone.input_size = {}", b.input_size);
        let _ = writeln!(out, "backbone.ror_shortcuts = {}", b.ror_shortcuts_enabled);
        let _ = writeln!(out, "backbone.stem_kernel = {}", b.stem_kernel);
        let _ = writeln!(out, "backbone.stem_stride = {}", b.stem_stride);
        let _ = writeln!(out, "backbone.stem_pool = {}", b.stem_pool);
        let _ = writeln!(out, "backbone.strides = {}", list4(&b.group_strides));
        match t.head.mode {
            HeadMode::GroupClassification => {
                let _ = writeln!(out, "head.mode = group");
                let _ = writeln!(out, "head.classes = {}", t.head.k);
            }
            HeadMode::DexRegression => {
                let _ = writeln!(out, "head.mode = dex");
                let _ = writeln!(out, "head.age_min = {}", t.head.age_values[0] as usize);
                let _ = writeln!(
                    out,
                    "head.age_max = {}",
                    t.head.age_values[t.head.age_values.len() - 1] as usize
                );
            }
        }
        let _ = writeln!(out, "data.resize = {}", t.preprocess.resize);
        let _ = writeln!(out, "data.crop = {}", t.preprocess.crop);
        let _ = writeln!(out, "data.jitter = {}", t.preprocess.jitter);
        let _ = writeln!(out, "data.hflip = {}", t.preprocess.hflip);
        let _ = writeln!(
            out,
            "train.stage = {}",
            match t.stage {
                Stage::Global => "global",
                Stage::Local => "local",
            }
        );
        let _ = writeln!(out, "train.epochs = {}", t.epochs);
        let _ = writeln!(out, "train.base_lr = {}", t.base_lr);
        let drops: Vec<String> = t.lr_drop_epochs.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(
            out,
            "train.lr_drops = {}",
            if drops.is_empty() { "none".to_string() } else { drops.join(",") }
        );
        let _ = writeln!(out, "train.lr_drop_factor = {}", t.lr_drop_factor);
        let _ = writeln!(out, "train.momentum = {}", t.momentum);
        let _ = writeln!(out, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(out, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "train.seed = {}", t.seed);
        let _ = writeln!(out, "train.tau = {}", t.tau);
        let _ = writeln!(out, "train.fused_loss = {}", t.fused_loss);
        let _ = writeln!(out, "train.augment_stage_b = {}", t.augment_stage_b);
        let s = &self.synth;
        let _ = writeln!(out, "synth.samples = {}", s.n_samples);
        let _ = writeln!(out, "synth.classes = {}", s.n_classes);
        let _ = writeln!(out, "synth.image_size = {}", s.image_size);
        let _ = writeln!(
            out,
            "synth.region = {}",
            match s.region {
                RegionSpec::TopLeft => "tl",
                RegionSpec::TopRight => "tr",
                RegionSpec::BottomLeft => "bl",
                RegionSpec::BottomRight => "br",
            }
        );
        let _ = writeln!(out, "synth.subjects = {}", s.n_subjects);
        let _ = writeln!(out, "synth.folds = {}", s.n_folds);
        let _ = writeln!(out, "synth.seed = {}", s.seed);
        out
    }
}

/// Parse text, apply overrides, resolve.
pub fn load_config(text: &str, overrides: &[String]) -> Result<FullConfig> {
    let mut kv = KvConfig::parse(text)?;
    for o in overrides {
        kv.set(o)?;
    }
    FullConfig::from_kv(&kv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_text() {
        let cfg = load_config("", &[]).unwrap();
        let text = cfg.canonical_text();
        let again = load_config(&text, &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.canonical_text(), text);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = load_config(
            "",
            &["train.epochs=7".into(), "train.lr_drops=5".into(), "backbone.arch=ror".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.backbone.arch, Arch::Ror);
        assert!(cfg.train.backbone.ror_shortcuts_enabled);
        assert!(load_config("", &["nope.key=1".into()]).is_err());
        assert!(KvConfig::parse("what is this").is_err());
    }

    #[test]
    fn paper_preset_resolves() {
        let cfg = load_config(
            "backbone.preset = paper\ndata.resize = 256\ndata.crop = 224\nhead.mode = dex\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.train.backbone.input_size, 224);
        assert_eq!(cfg.train.backbone.group_depths, [3, 4, 6, 3]);
        assert_eq!(cfg.train.head.k, 101);
    }

    #[test]
    fn crop_must_match_input_size() {
        assert!(load_config("data.crop = 48\n", &[]).is_err());
    }
}
