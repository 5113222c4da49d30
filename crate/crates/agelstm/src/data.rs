//! Dataset manifests, raster IO, deterministic preprocessing and the
//! synthetic planted-region generator.
//!
//! Manifest format: UTF-8, one record per line, tab-separated
//! `id  source  age  group  subject  sigma  fold` with `-` for absent
//! optional fields. `source` is either a raster path (portable pixmap, P6)
//! relative to the manifest, or `inline:CxHxW:<hex>` with base-16 row-major
//! 8-bit pixel values for tiny fixtures. Lines starting with `#!` carry
//! metadata directives (`#!name=`, `#!mode=`, `#!k=`, `#!ages=`,
//! `#!region=`); other `#` lines are comments.

use crate::error::{Error, Result};
use crate::estimation::{group_of_age, HeadMode};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum PixelSource {
    /// Raster file path, relative to the manifest's directory.
    Path(PathBuf),
    /// Pixels carried inline (normalized to [0,1] from 8-bit values).
    Inline(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub source: PixelSource,
    /// Age in years (or the value the group stands for in group mode).
    pub age: f64,
    pub group: Option<usize>,
    pub subject_id: String,
    /// Annotator standard deviation, where the dataset provides one.
    pub sigma: Option<f64>,
    pub fold: Option<usize>,
}

/// Planted-patch rectangle in pixels: x, y, width, height.
pub type PatchRect = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestMeta {
    pub name: String,
    pub mode: Option<HeadMode>,
    pub k: Option<usize>,
    /// Integer age range for expectation-regression heads.
    pub ages: Option<(usize, usize)>,
    /// Ground-truth discriminative patch of a synthetic dataset.
    pub region: Option<PatchRect>,
}

impl ManifestMeta {
    pub fn named(name: &str) -> Self {
        ManifestMeta { name: name.to_string(), mode: None, k: None, ages: None, region: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub meta: ManifestMeta,
    pub samples: Vec<Sample>,
    /// Directory raster paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Pixels of sample `idx`, decoding the raster if necessary.
    pub fn load_pixels(&self, idx: usize) -> Result<Tensor> {
        match &self.samples[idx].source {
            PixelSource::Inline(t) => Ok(t.clone()),
            PixelSource::Path(p) => read_ppm(&self.root.join(p)),
        }
    }
}

fn parse_opt<T: std::str::FromStr>(field: &str, what: &str, line: usize) -> Result<Option<T>> {
    if field == "-" {
        return Ok(None);
    }
    field
        .parse::<T>()
        .map(Some)
        .map_err(|_| Error::Parse { line, msg: format!("bad {what} value {field:?}") })
}

fn decode_inline(spec: &str, line: usize) -> Result<Tensor> {
    let mut parts = spec.splitn(2, ':');
    let dims = parts.next().unwrap_or_default();
    let hex = parts.next().ok_or(Error::Parse { line, msg: "inline source missing pixel data".into() })?;
    let dims: Vec<usize> = dims
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| Error::Parse { line, msg: format!("bad inline dims {dims:?}") }))
        .collect::<Result<_>>()?;
    if dims.len() != 3 || dims.iter().any(|&d| d == 0) {
        return Err(Error::Parse { line, msg: "inline dims must be CxHxW".into() });
    }
    let n = dims[0] * dims[1] * dims[2];
    if hex.len() != 2 * n {
        return Err(Error::Parse {
            line,
            msg: format!("inline pixel data has {} hex chars, expected {}", hex.len(), 2 * n),
        });
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Parse { line, msg: "inline pixel data is not hex".into() })?;
        data.push(byte as f32 / 255.0);
    }
    Tensor::new(dims, data)
}

fn encode_inline(t: &Tensor) -> String {
    let s = t.shape();
    let mut out = format!("inline:{}x{}x{}:", s[0], s[1], s[2]);
    for &v in t.data() {
        let byte = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Parse and validate a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    let mut meta = ManifestMeta::named(&stem);
    let mut samples: Vec<Sample> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(directive) = trimmed.strip_prefix("#!") {
            let (key, value) = directive
                .split_once('=')
                .ok_or(Error::Parse { line, msg: "directive needs key=value".into() })?;
            match key.trim() {
                "name" => meta.name = value.trim().to_string(),
                "mode" => {
                    meta.mode = Some(match value.trim() {
                        "group" => HeadMode::GroupClassification,
                        "dex" => HeadMode::DexRegression,
                        other => {
                            return Err(Error::Parse { line, msg: format!("unknown mode {other:?}") })
                        }
                    })
                }
                "k" => meta.k = Some(parse_opt::<usize>(value.trim(), "k", line)?.unwrap()),
                "ages" => {
                    let (lo, hi) = value
                        .trim()
                        .split_once(':')
                        .ok_or(Error::Parse { line, msg: "ages directive needs MIN:MAX".into() })?;
                    let lo = parse_opt::<usize>(lo, "ages", line)?.unwrap();
                    let hi = parse_opt::<usize>(hi, "ages", line)?.unwrap();
                    meta.ages = Some((lo, hi));
                }
                "region" => {
                    let nums: Vec<usize> = value
                        .trim()
                        .split(',')
                        .map(|v| {
                            v.trim()
                                .parse()
                                .map_err(|_| Error::Parse { line, msg: "bad region rectangle".into() })
                        })
                        .collect::<Result<_>>()?;
                    if nums.len() != 4 {
                        return Err(Error::Parse { line, msg: "region needs x,y,w,h".into() });
                    }
                    meta.region = Some([nums[0], nums[1], nums[2], nums[3]]);
                }
                other => return Err(Error::Parse { line, msg: format!("unknown directive {other:?}") }),
            }
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 7 tab-separated fields, got {}", fields.len()),
            });
        }
        let source = if let Some(spec) = fields[1].strip_prefix("inline:") {
            PixelSource::Inline(decode_inline(spec, line)?)
        } else {
            PixelSource::Path(PathBuf::from(fields[1]))
        };
        let age: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("bad age value {:?}", fields[2]) })?;
        samples.push(Sample {
            id: fields[0].to_string(),
            source,
            age,
            group: parse_opt(fields[3], "group", line)?,
            subject_id: fields[4].to_string(),
            sigma: parse_opt(fields[5], "sigma", line)?,
            fold: parse_opt(fields[6], "fold", line)?,
        });
    }

    if samples.is_empty() {
        return Err(Error::Validation(format!("manifest {} contains no records", path.display())));
    }
    let manifest = DatasetManifest { meta, samples, root };
    validate_manifest(&manifest)?;
    Ok(manifest)
}

fn validate_manifest(m: &DatasetManifest) -> Result<()> {
    let mut ids: Vec<&str> = m.samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Validation(format!("duplicate sample id {:?}", w[0])));
    }
    let mut channels: Option<usize> = None;
    for s in &m.samples {
        if s.age < 0.0 || !s.age.is_finite() {
            return Err(Error::Validation(format!("sample {}: field age = {} is invalid", s.id, s.age)));
        }
        if let Some(sig) = s.sigma {
            if sig < 0.0 || !sig.is_finite() {
                return Err(Error::Validation(format!("sample {}: field sigma = {sig} is invalid", s.id)));
            }
        }
        if let (Some(g), Some(k)) = (s.group, m.meta.k) {
            if g >= k {
                return Err(Error::Validation(format!(
                    "sample {}: field group = {g} out of range for k = {k}",
                    s.id
                )));
            }
        }
        // the 8-range table pins group/age consistency for the full protocol
        if m.meta.mode == Some(HeadMode::GroupClassification) && m.meta.k == Some(8) {
            if let (Some(g), Some(expected)) = (s.group, group_of_age(s.age)) {
                if g != expected {
                    return Err(Error::Validation(format!(
                        "sample {}: field group = {g} inconsistent with age {} (range table says {expected})",
                        s.id, s.age
                    )));
                }
            }
        }
        if let PixelSource::Inline(t) = &s.source {
            let c = t.shape()[0];
            if *channels.get_or_insert(c) != c {
                return Err(Error::Validation(format!(
                    "sample {}: channel count {c} differs from the rest",
                    s.id
                )));
            }
        }
        if let PixelSource::Path(p) = &s.source {
            let full = m.root.join(p);
            if !full.is_file() {
                return Err(Error::Validation(format!(
                    "sample {}: raster {} not found",
                    s.id,
                    full.display()
                )));
            }
        }
    }
    Ok(())
}

/// Write a manifest back out in its own line format.
pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "#!name={}", m.meta.name);
    if let Some(mode) = m.meta.mode {
        let _ = writeln!(
            out,
            "#!mode={}",
            match mode {
                HeadMode::GroupClassification => "group",
                HeadMode::DexRegression => "dex",
            }
        );
    }
    if let Some(k) = m.meta.k {
        let _ = writeln!(out, "#!k={k}");
    }
    if let Some((lo, hi)) = m.meta.ages {
        let _ = writeln!(out, "#!ages={lo}:{hi}");
    }
    if let Some([x, y, w, h]) = m.meta.region {
        let _ = writeln!(out, "#!region={x},{y},{w},{h}");
    }
    for s in &m.samples {
        let source = match &s.source {
            PixelSource::Path(p) => p.to_string_lossy().into_owned(),
            PixelSource::Inline(t) => encode_inline(t),
        };
        let opt_usize = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        let opt_f64 = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.id,
            source,
            s.age,
            opt_usize(s.group),
            s.subject_id,
            opt_f64(s.sigma),
            opt_usize(s.fold),
        );
    }
    fs::write(path, out)?;
    Ok(())
}

// ── portable pixmap (P6) ────────────────────────────────────────────

/// Write a [3,H,W] tensor as a binary P6 file with maxval 255.
pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Input(format!("P6 writer expects [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let d = t.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a binary P6 file into a [3,H,W] tensor in [0,1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Input(format!("{}: truncated P6 header", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(Error::Input(format!("{}: not a P6 file", path.display())));
    }
    let w: usize = token()?.parse().map_err(|_| Error::Input("bad P6 width".into()))?;
    let h: usize = token()?.parse().map_err(|_| Error::Input("bad P6 height".into()))?;
    let maxval: usize = token()?.parse().map_err(|_| Error::Input("bad P6 maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Input(format!("P6 maxval {maxval} unsupported (want 255)")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + 3 * w * h {
        return Err(Error::Input(format!("{}: truncated P6 pixel data", path.display())));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = bytes[pos + 3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

// ── preprocessing ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Side of the square the source is first resized to.
    pub resize: usize,
    /// Side of the crop fed to the network.
    pub crop: usize,
    /// Scale/aspect jitter in train mode (scale 0.7..1.0, aspect 3/4..4/3).
    pub jitter: bool,
    /// Horizontal flip with probability 0.5 in train mode.
    pub hflip: bool,
}

impl PreprocessConfig {
    pub fn paper() -> Self {
        PreprocessConfig { resize: 256, crop: 224, jitter: true, hflip: true }
    }

    pub fn toy() -> Self {
        PreprocessConfig { resize: 64, crop: 56, jitter: false, hflip: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!(
                "crop {} must be in 1..={}",
                self.crop, self.resize
            )));
        }
        Ok(())
    }
}

/// Bilinear resize to a square side (exact copy when sizes already match).
pub fn resize_bilinear(t: &Tensor, side: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Input(format!("resize expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == 0 || w == 0 || side == 0 {
        return Err(Error::Input("resize with a zero extent".into()));
    }
    if h == side && w == side {
        return Ok(t.clone());
    }
    let d = t.data();
    let mut out = vec![0.0f32; c * side * side];
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..side {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..side {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let a = d[base + y0 * w + x0] as f64;
                let b = d[base + y0 * w + x1] as f64;
                let cc = d[base + y1 * w + x0] as f64;
                let dd = d[base + y1 * w + x1] as f64;
                let v = (1.0 - wy) * ((1.0 - wx) * a + wx * b) + wy * ((1.0 - wx) * cc + wx * dd);
                out[ci * side * side + oy * side + ox] = v as f32;
            }
        }
    }
    Tensor::new(vec![c, side, side], out)
}

pub fn crop_image(t: &Tensor, x0: usize, y0: usize, w: usize, h: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || x0 + w > s[2] || y0 + h > s[1] || w == 0 || h == 0 {
        return Err(Error::Input(format!("crop ({x0},{y0},{w},{h}) out of bounds for {s:?}")));
    }
    let (c, sh, sw) = (s[0], s[1], s[2]);
    let d = t.data();
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            let src = ci * sh * sw + (y0 + y) * sw + x0;
            let dst = ci * h * w + y * w;
            out[dst..dst + w].copy_from_slice(&d[src..src + w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn hflip_image(t: &Tensor) -> Tensor {
    let s = t.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    let mut out = vec![0.0f32; d.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ci * h * w + y * w + x] = d[ci * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

/// Resize + crop (+ flip/jitter in train mode), fully driven by the seed.
pub fn preprocess(pixels: &Tensor, cfg: &PreprocessConfig, mode: PreprocessMode, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    let resized = resize_bilinear(pixels, cfg.resize)?;
    let r = cfg.resize;
    let s = cfg.crop;
    match mode {
        PreprocessMode::Eval => {
            let off = (r - s) / 2;
            crop_image(&resized, off, off, s, s)
        }
        PreprocessMode::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cropped = if cfg.jitter {
                let scale = rng.gen_range(0.7..=1.0f64);
                let aspect = rng.gen_range(0.75..=4.0 / 3.0f64);
                let cw = ((r as f64 * (scale * aspect).sqrt()).round() as usize).clamp(1, r);
                let ch = ((r as f64 * (scale / aspect).sqrt()).round() as usize).clamp(1, r);
                let x0 = rng.gen_range(0..=r - cw);
                let y0 = rng.gen_range(0..=r - ch);
                let patch = crop_image(&resized, x0, y0, cw, ch)?;
                resize_bilinear(&patch, s)?
            } else {
                let x0 = rng.gen_range(0..=r - s);
                let y0 = rng.gen_range(0..=r - s);
                crop_image(&resized, x0, y0, s, s)?
            };
            if cfg.hflip && rng.gen_bool(0.5) {
                Ok(hflip_image(&cropped))
            } else {
                Ok(cropped)
            }
        }
    }
}

// ── synthetic planted-region dataset ────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionSpec {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl RegionSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tl" | "top-left" => Ok(RegionSpec::TopLeft),
            "tr" | "top-right" => Ok(RegionSpec::TopRight),
            "bl" | "bottom-left" => Ok(RegionSpec::BottomLeft),
            "br" | "bottom-right" => Ok(RegionSpec::BottomRight),
            other => Err(Error::Config(format!("unknown region spec {other:?}"))),
        }
    }

    fn opposite(self) -> Self {
        match self {
            RegionSpec::TopLeft => RegionSpec::BottomRight,
            RegionSpec::TopRight => RegionSpec::BottomLeft,
            RegionSpec::BottomLeft => RegionSpec::TopRight,
            RegionSpec::BottomRight => RegionSpec::TopLeft,
        }
    }

    fn quadrant_origin(self, image_size: usize) -> (usize, usize) {
        let half = image_size / 2;
        match self {
            RegionSpec::TopLeft => (0, 0),
            RegionSpec::TopRight => (half, 0),
            RegionSpec::BottomLeft => (0, half),
            RegionSpec::BottomRight => (half, half),
        }
    }

    /// Side of the planted patch itself.
    fn patch_side(self, image_size: usize) -> usize {
        image_size / 4
    }

    /// Inclusive range of valid patch origins along one axis: inside the
    /// quadrant, and at least one crop margin away from the image borders so
    /// every train/eval crop keeps the patch fully visible.
    fn origin_range(q0: usize, image_size: usize, ps: usize) -> (usize, usize) {
        let half = image_size / 2;
        let margin = image_size / 8; // resize:crop ratio is 8:7
        let lo = q0.max(margin);
        let hi = (q0 + half - ps).min(image_size - margin - ps);
        (lo, hi)
    }

    /// Hull of all possible patch positions inside this quadrant; the
    /// per-sample patch jitters within this rectangle.
    fn patch_hull(self, image_size: usize, ps: usize) -> PatchRect {
        let (qx, qy) = self.quadrant_origin(image_size);
        let (x_lo, x_hi) = Self::origin_range(qx, image_size, ps);
        let (y_lo, y_hi) = Self::origin_range(qy, image_size, ps);
        [x_lo, y_lo, x_hi + ps - x_lo, y_hi + ps - y_lo]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub region: RegionSpec,
    pub n_subjects: usize,
    pub n_folds: usize,
    pub seed: u64,
    /// Planted patch side in pixels (default image_size / 4).
    pub patch_side: Option<usize>,
    /// Stripe intensity levels (high, low).
    pub stripe_levels: (f32, f32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 640,
            n_classes: 4,
            image_size: 64,
            region: RegionSpec::TopLeft,
            n_subjects: 80,
            n_folds: 5,
            seed: 0,
            patch_side: None,
            stripe_levels: (0.7, 0.3),
        }
    }
}

/// Horizontal stripes with a class-specific period inside `rect`.
fn paint_stripes(data: &mut [f32], size: usize, rect: PatchRect, class: usize, phase: usize, levels: (f32, f32)) {
    let period = 2 * (class + 1);
    let [x, y, w, h] = rect;
    for row in 0..h {
        let v = if (row + phase) % period < period / 2 { levels.0 } else { levels.1 };
        for col in 0..w {
            for c in 0..3 {
                data[c * size * size + (y + row) * size + (x + col)] = v;
            }
        }
    }
}

/// Generate a dataset whose class is encoded only by the stripe period
/// inside a localized patch in the requested quadrant. The patch position
/// jitters within a hull (recorded in the metadata) so absolute pixel
/// positions carry no label information; a same-shaped distractor patch in
/// the opposite quadrant carries stripes of an independently random class;
/// everything else is noise. Classes are balanced and subjects cycle so
/// subject-exclusive splitting has something to do.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<DatasetManifest> {
    if cfg.n_classes < 2 {
        return Err(Error::Config("synthetic dataset needs at least 2 classes".into()));
    }
    if cfg.n_samples == 0 || cfg.n_subjects == 0 || cfg.n_folds == 0 {
        return Err(Error::Config("sample, subject and fold counts must be positive".into()));
    }
    let size = cfg.image_size;
    let ps = cfg.patch_side.unwrap_or_else(|| cfg.region.patch_side(size));
    if ps == 0 || ps > size / 2 {
        return Err(Error::Config(format!("patch side {ps} does not fit a {size} px quadrant")));
    }
    if ps < 2 * cfg.n_classes {
        return Err(Error::Config(format!(
            "patch side {ps} too small for {} stripe periods (need >= {})",
            cfg.n_classes,
            2 * cfg.n_classes
        )));
    }
    let hull = cfg.region.patch_hull(size, ps);
    let (qx, qy) = cfg.region.quadrant_origin(size);
    let (x_lo, x_hi) = RegionSpec::origin_range(qx, size, ps);
    let (y_lo, y_hi) = RegionSpec::origin_range(qy, size, ps);
    if x_hi < x_lo || y_hi < y_lo {
        return Err(Error::Config(format!("image size {size} leaves no room for the patch")));
    }
    let d_spec = cfg.region.opposite();
    let (dqx, dqy) = d_spec.quadrant_origin(size);
    let (dx_lo, dx_hi) = RegionSpec::origin_range(dqx, size, ps);
    let (dy_lo, dy_hi) = RegionSpec::origin_range(dqy, size, ps);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let class = i % cfg.n_classes;
        let subject = i % cfg.n_subjects;
        let mut data = vec![0.0f32; 3 * size * size];
        for v in data.iter_mut() {
            *v = rng.gen_range(0.0f32..1.0);
        }
        let px = rng.gen_range(x_lo..=x_hi);
        let py = rng.gen_range(y_lo..=y_hi);
        let phase = rng.gen_range(0..2 * (class + 1));
        paint_stripes(&mut data, size, [px, py, ps, ps], class, phase, cfg.stripe_levels);
        let d_class = rng.gen_range(0..cfg.n_classes);
        let ddx = rng.gen_range(dx_lo..=dx_hi);
        let ddy = rng.gen_range(dy_lo..=dy_hi);
        let d_phase = rng.gen_range(0..2 * (d_class + 1));
        paint_stripes(&mut data, size, [ddx, ddy, ps, ps], d_class, d_phase, cfg.stripe_levels);
        // quantize so manifests and rasters round-trip exactly
        for v in data.iter_mut() {
            *v = (*v * 255.0).round() / 255.0;
        }
        samples.push(Sample {
            id: format!("synth{i:05}"),
            source: PixelSource::Inline(Tensor::new(vec![3, size, size], data)?),
            age: 10.0 * (class + 1) as f64,
            group: Some(class),
            subject_id: format!("subj{subject:03}"),
            sigma: None,
            fold: Some(subject % cfg.n_folds),
        });
    }
    let meta = ManifestMeta {
        name: "synth".into(),
        mode: Some(HeadMode::GroupClassification),
        k: Some(cfg.n_classes),
        ages: None,
        region: Some(hull),
    };
    Ok(DatasetManifest { meta, samples, root: PathBuf::new() })
}

/// Materialize a manifest into `dir`: P6 rasters plus a `manifest.tsv`
/// referencing them. Returns the path-based manifest.
pub fn write_dataset(m: &DatasetManifest, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("imgs"))?;
    let mut out = m.clone();
    out.root = dir.to_path_buf();
    for (i, s) in m.samples.iter().enumerate() {
        let rel = PathBuf::from("imgs").join(format!("{}.ppm", s.id));
        let pixels = m.load_pixels(i)?;
        write_ppm(&dir.join(&rel), &pixels)?;
        out.samples[i].source = PixelSource::Path(rel);
    }
    save_manifest(&out, &dir.join("manifest.tsv"))?;
    Ok(out)
}
