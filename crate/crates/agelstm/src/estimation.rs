//! Age heads, expectation regression, evaluation metrics and the
//! cross-validation protocols.

use crate::attention::{AgeDistribution, LstmState};
use crate::data::{crop_image, hflip_image, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{AgeModel, Branch};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The eight age-group ranges used by the group-classification protocol,
/// ordered young to old.
pub const GROUP_RANGES: [(f64, f64); 8] = [
    (0.0, 2.0),
    (4.0, 6.0),
    (8.0, 13.0),
    (15.0, 20.0),
    (25.0, 32.0),
    (38.0, 43.0),
    (48.0, 53.0),
    (60.0, 100.0),
];

/// Group index whose range contains `age`, if any (the ranges have gaps).
pub fn group_of_age(age: f64) -> Option<usize> {
    GROUP_RANGES.iter().position(|&(lo, hi)| age >= lo && age <= hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    GroupClassification,
    DexRegression,
}

/// Output-head shape: K classes, and for expectation regression the age in
/// years that each class stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub mode: HeadMode,
    pub k: usize,
    pub age_values: Vec<f64>,
}

impl HeadConfig {
    /// The eight-range group protocol.
    pub fn adience_groups() -> Self {
        HeadConfig { mode: HeadMode::GroupClassification, k: 8, age_values: Vec::new() }
    }

    /// Group classification with a free class count (toy datasets).
    pub fn groups(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config("group head needs at least 2 classes".into()));
        }
        Ok(HeadConfig { mode: HeadMode::GroupClassification, k, age_values: Vec::new() })
    }

    /// Expectation regression over one neuron per integer age in
    /// `min_age..=max_age` (61..77 -> 62 classes, 0..69 -> 70, 0..100 -> 101).
    pub fn dex_range(min_age: usize, max_age: usize) -> Result<Self> {
        if max_age <= min_age {
            return Err(Error::Config("dex range must be increasing".into()));
        }
        let age_values: Vec<f64> = (min_age..=max_age).map(|a| a as f64).collect();
        Ok(HeadConfig { mode: HeadMode::DexRegression, k: age_values.len(), age_values })
    }

    /// Expectation regression over arbitrary (strictly increasing) ages.
    pub fn dex(age_values: Vec<f64>) -> Result<Self> {
        if age_values.len() < 2 {
            return Err(Error::Config("dex head needs at least 2 ages".into()));
        }
        if age_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("dex age values must be strictly increasing".into()));
        }
        Ok(HeadConfig { mode: HeadMode::DexRegression, k: age_values.len(), age_values })
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            HeadMode::GroupClassification => {
                if self.k < 2 {
                    return Err(Error::Config("group head needs at least 2 classes".into()));
                }
            }
            HeadMode::DexRegression => {
                if self.age_values.len() != self.k {
                    return Err(Error::Config(format!(
                        "dex head has {} classes but {} age values",
                        self.k,
                        self.age_values.len()
                    )));
                }
                if self.age_values.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config("dex age values must be strictly increasing".into()));
                }
            }
        }
        Ok(())
    }
}

/// One evaluated sample: prediction vs ground truth, plus the annotator
/// mean/spread where the dataset provides them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub predicted: f64,
    pub actual: f64,
    pub mu: Option<f64>,
    pub delta: Option<f64>,
}

impl EvalRecord {
    pub fn plain(predicted: f64, actual: f64) -> Self {
        EvalRecord { predicted, actual, mu: None, delta: None }
    }
}

/// Neumaier-compensated sum; keeps 101-term expectations exact.
fn compensated_sum<I: Iterator<Item = f64>>(xs: I) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// Expected age under the predicted distribution: sum p_i * age_i.
pub fn dex_expected_age(dist: &AgeDistribution, age_values: &[f64]) -> Result<f64> {
    if !dist.normalized {
        return Err(Error::Input("dex expects a normalized distribution".into()));
    }
    let sum: f64 = dist.probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("distribution sums to {sum}, not 1")));
    }
    if dist.len() != age_values.len() {
        return Err(Error::Input(format!(
            "{} probabilities vs {} age values",
            dist.len(),
            age_values.len()
        )));
    }
    Ok(compensated_sum(dist.probs.iter().zip(age_values.iter()).map(|(p, a)| p * a)))
}

/// Mean absolute error in years.
pub fn mae(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("mae over an empty record list".into()));
    }
    let total: f64 = records.iter().map(|r| (r.actual - r.predicted).abs()).sum();
    Ok(total / records.len() as f64)
}

/// Mean of 1 - exp(-(x - mu)^2 / (2 delta^2)), the annotator-uncertainty
/// weighted error. Zero-spread records are handled by clamping delta at 1e-6.
pub fn epsilon_error(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("epsilon error over an empty record list".into()));
    }
    let mut total = 0.0f64;
    for r in records {
        let (mu, delta) = match (r.mu, r.delta) {
            (Some(m), Some(d)) => (m, d),
            _ => return Err(Error::Input("epsilon error needs mu and delta on every record".into())),
        };
        if delta < 0.0 {
            return Err(Error::Input(format!("negative annotator spread {delta}")));
        }
        let d = delta.max(1e-6);
        let z = r.predicted - mu;
        total += 1.0 - (-z * z / (2.0 * d * d)).exp();
    }
    Ok(total / records.len() as f64)
}

/// Exact-match and within-one-group fractions for group-mode records whose
/// predicted/actual fields hold class indices.
pub fn group_accuracy(records: &[EvalRecord], k: usize) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::Input("group accuracy over an empty record list".into()));
    }
    let mut exact = 0usize;
    let mut one_off = 0usize;
    for r in records {
        let as_index = |v: f64, what: &str| -> Result<usize> {
            if v.fract() != 0.0 || v < 0.0 || v >= k as f64 {
                return Err(Error::Input(format!("{what} {v} is not a group index in [0,{k})")));
            }
            Ok(v as usize)
        };
        let p = as_index(r.predicted, "prediction")?;
        let a = as_index(r.actual, "actual")?;
        if p == a {
            exact += 1;
        }
        if p.abs_diff(a) <= 1 {
            one_off += 1;
        }
    }
    let n = records.len() as f64;
    Ok((exact as f64 / n, one_off as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    FivefoldSubjectExclusive,
    Loop,
    FixedFolds,
}

/// One cross-validation split, as indices into the manifest's sample list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Unique subject ids in sorted order with their sample indices.
fn subjects_of(manifest: &DatasetManifest) -> Result<Vec<(String, Vec<usize>)>> {
    let mut subjects: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        if s.subject_id.is_empty() {
            return Err(Error::Input(format!("sample {} has no subject id", s.id)));
        }
        match subjects.binary_search_by(|(id, _)| id.as_str().cmp(&s.subject_id)) {
            Ok(pos) => subjects[pos].1.push(i),
            Err(pos) => subjects.insert(pos, (s.subject_id.clone(), vec![i])),
        }
    }
    Ok(subjects)
}

/// Build the requested protocol's splits. No subject ever appears on both
/// sides of a split.
pub fn protocol_split(manifest: &DatasetManifest, protocol: Protocol, seed: u64) -> Result<Vec<Split>> {
    if manifest.samples.is_empty() {
        return Err(Error::Input("cannot split an empty manifest".into()));
    }
    match protocol {
        Protocol::FivefoldSubjectExclusive => {
            let subjects = subjects_of(manifest)?;
            if subjects.len() < 5 {
                return Err(Error::Input(format!(
                    "five-fold split needs at least 5 subjects, got {}",
                    subjects.len()
                )));
            }
            let mut order: Vec<usize> = (0..subjects.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            // deal subjects round-robin so fold sizes stay balanced
            let mut folds: Vec<Vec<usize>> = vec![Vec::new(); 5];
            for (pos, &subj) in order.iter().enumerate() {
                folds[pos % 5].push(subj);
            }
            let mut splits = Vec::with_capacity(5);
            for f in 0..5 {
                let mut test = Vec::new();
                let mut train = Vec::new();
                for (si, (_, idxs)) in subjects.iter().enumerate() {
                    if folds[f].contains(&si) {
                        test.extend_from_slice(idxs);
                    } else {
                        train.extend_from_slice(idxs);
                    }
                }
                test.sort_unstable();
                train.sort_unstable();
                splits.push(Split { train, test });
            }
            Ok(splits)
        }
        Protocol::Loop => {
            let subjects = subjects_of(manifest)?;
            if subjects.len() < 2 {
                return Err(Error::Input("leave-one-out needs at least 2 subjects".into()));
            }
            let mut splits = Vec::with_capacity(subjects.len());
            for (si, (_, idxs)) in subjects.iter().enumerate() {
                let mut train = Vec::new();
                for (sj, (_, other)) in subjects.iter().enumerate() {
                    if sj != si {
                        train.extend_from_slice(other);
                    }
                }
                train.sort_unstable();
                splits.push(Split { train, test: idxs.clone() });
            }
            Ok(splits)
        }
        Protocol::FixedFolds => {
            let mut fold_ids: Vec<usize> = Vec::new();
            for s in &manifest.samples {
                let f = s.fold.ok_or_else(|| {
                    Error::Input(format!("sample {} has no fold for the fixed protocol", s.id))
                })?;
                if !fold_ids.contains(&f) {
                    fold_ids.push(f);
                }
            }
            fold_ids.sort_unstable();
            let mut splits = Vec::with_capacity(fold_ids.len());
            for &f in &fold_ids {
                let mut test = Vec::new();
                let mut train = Vec::new();
                for (i, s) in manifest.samples.iter().enumerate() {
                    if s.fold == Some(f) {
                        test.push(i);
                    } else {
                        train.push(i);
                    }
                }
                splits.push(Split { train, test });
            }
            Ok(splits)
        }
    }
}

/// Per-split evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricSet {
    Group { accuracy: f64, one_off: f64 },
    Dex { mae: f64, eps_error: Option<f64> },
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub split: usize,
    pub n: usize,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub splits: Vec<SplitOutcome>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub branch: Branch,
    pub ten_crop: bool,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    fn metric_columns(&self) -> (&'static str, &'static str, Vec<f64>, Vec<Option<f64>>) {
        match self.splits[0].metrics {
            MetricSet::Group { .. } => {
                let a = self
                    .splits
                    .iter()
                    .map(|s| match s.metrics {
                        MetricSet::Group { accuracy, .. } => accuracy,
                        _ => unreachable!(),
                    })
                    .collect();
                let b = self
                    .splits
                    .iter()
                    .map(|s| match s.metrics {
                        MetricSet::Group { one_off, .. } => Some(one_off),
                        _ => unreachable!(),
                    })
                    .collect();
                ("accuracy", "one_off", a, b)
            }
            MetricSet::Dex { .. } => {
                let a = self
                    .splits
                    .iter()
                    .map(|s| match s.metrics {
                        MetricSet::Dex { mae, .. } => mae,
                        _ => unreachable!(),
                    })
                    .collect();
                let b = self
                    .splits
                    .iter()
                    .map(|s| match s.metrics {
                        MetricSet::Dex { eps_error, .. } => eps_error,
                        _ => unreachable!(),
                    })
                    .collect();
                ("mae", "eps_error", a, b)
            }
        }
    }

    /// Human-readable table with mean +- sd across splits (sd = sample
    /// standard deviation over folds).
    pub fn text_table(&self) -> String {
        use std::fmt::Write as _;
        let (na, nb, a, b) = self.metric_columns();
        let mut out = String::new();
        let _ = writeln!(out, "split\tn\t{na}\t{nb}");
        for (s, (&va, vb)) in self.splits.iter().zip(a.iter().zip(b.iter())) {
            let vb_s = vb.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{}\t{}\t{:.4}\t{}", s.split, s.n, va, vb_s);
        }
        let (ma, sa) = mean_sd(&a);
        let _ = writeln!(out, "mean\t-\t{ma:.4}\t{}", summary_of(&b, |m, _| format!("{m:.4}")));
        let _ = writeln!(out, "sd\t-\t{sa:.4}\t{}", summary_of(&b, |_, s| format!("{s:.4}")));
        let _ = writeln!(out, "# {na}: {ma:.4} +- {sa:.4} (sd over {} splits)", self.splits.len());
        for note in &self.notes {
            let _ = writeln!(out, "# {note}");
        }
        out
    }

    /// Machine-readable record lines (same numbers as the table).
    pub fn records_tsv(&self) -> String {
        self.text_table()
    }
}

fn summary_of<F: Fn(f64, f64) -> String>(col: &[Option<f64>], f: F) -> String {
    let vals: Vec<f64> = col.iter().flatten().copied().collect();
    if vals.len() != col.len() {
        return "-".into();
    }
    let (m, s) = mean_sd(&vals);
    f(m, s)
}

/// Ground-truth class index of a sample under a group-mode head.
pub fn group_label_of(manifest: &DatasetManifest, idx: usize, k: usize) -> Result<usize> {
    let s = &manifest.samples[idx];
    if let Some(g) = s.group {
        return Ok(g);
    }
    if k == 8 {
        if let Some(g) = group_of_age(s.age) {
            return Ok(g);
        }
    }
    Err(Error::Input(format!("sample {} has no usable group label", s.id)))
}

/// Evaluate a model on one split's test side. The LSTM state starts from
/// zero and persists across the stream in manifest order, so results are
/// deterministic but order-dependent (surfaced in the report notes).
pub fn evaluate_split(
    model: &AgeModel,
    manifest: &DatasetManifest,
    split_index: usize,
    test: &[usize],
    pre: &crate::data::PreprocessConfig,
    opts: EvalOptions,
) -> Result<SplitOutcome> {
    use crate::data::{preprocess, resize_bilinear, PreprocessMode};
    use crate::model::PredictedValue;
    if test.is_empty() {
        return Err(Error::Input(format!("split {split_index} has an empty test side")));
    }
    let mut state = model.fresh_state();
    let mut records = Vec::with_capacity(test.len());
    for &i in test {
        let pixels = manifest.load_pixels(i)?;
        let (dist, value) = if opts.ten_crop {
            let resized = resize_bilinear(&pixels, pre.resize)?;
            let (dist, next) = ten_crop_predict(model, &resized, &state, opts.branch)?;
            state = next;
            let value = model.decide(&dist)?;
            (dist, value)
        } else {
            let img = preprocess(&pixels, pre, PreprocessMode::Eval, 0)?;
            let p = model.predict(&img, &mut state, opts.branch)?;
            (p.dist.clone(), p.value)
        };
        drop(dist);
        let sample = &manifest.samples[i];
        let record = match value {
            PredictedValue::Group(g) => EvalRecord::plain(
                g as f64,
                group_label_of(manifest, i, model.head.k)? as f64,
            ),
            PredictedValue::Age(a) => EvalRecord {
                predicted: a,
                actual: sample.age,
                mu: Some(sample.age),
                delta: sample.sigma,
            },
        };
        records.push(record);
    }
    let metrics = match model.head.mode {
        HeadMode::GroupClassification => {
            let (accuracy, one_off) = group_accuracy(&records, model.head.k)?;
            MetricSet::Group { accuracy, one_off }
        }
        HeadMode::DexRegression => {
            let mae_v = mae(&records)?;
            let eps = if records.iter().all(|r| r.delta.is_some()) {
                Some(epsilon_error(&records)?)
            } else {
                None
            };
            MetricSet::Dex { mae: mae_v, eps_error: eps }
        }
    };
    Ok(SplitOutcome { split: split_index, n: test.len(), metrics })
}

/// Run a full protocol: split, evaluate every split, assemble the report.
pub fn evaluate_protocol(
    model: &AgeModel,
    manifest: &DatasetManifest,
    protocol: Protocol,
    seed: u64,
    pre: &crate::data::PreprocessConfig,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let splits = protocol_split(manifest, protocol, seed)?;
    let mut outcomes = Vec::with_capacity(splits.len());
    for (si, split) in splits.iter().enumerate() {
        outcomes.push(evaluate_split(model, manifest, si, &split.test, pre, opts)?);
    }
    let mut notes = vec![
        "lstm state: stream-carried across each split's test set in manifest order".to_string(),
    ];
    if opts.ten_crop {
        notes.push("ten-crop oversampling enabled".to_string());
    }
    Ok(EvalReport { splits: outcomes, notes })
}

/// The ten oversampling views of a resized image: four corner crops, the
/// center crop, then the horizontal mirror of each, in that order.
pub fn ten_crop_views(resized: &Tensor, crop: usize) -> Result<Vec<Tensor>> {
    let s = resized.shape();
    if s.len() != 3 {
        return Err(Error::Input(format!("ten-crop expects [C,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if crop > h || crop > w {
        return Err(Error::Input(format!("image {h}x{w} smaller than crop {crop}")));
    }
    let offsets = [
        (0, 0),
        (w - crop, 0),
        (0, h - crop),
        (w - crop, h - crop),
        ((w - crop) / 2, (h - crop) / 2),
    ];
    let mut views = Vec::with_capacity(10);
    for &(x0, y0) in &offsets {
        views.push(crop_image(resized, x0, y0, crop, crop)?);
    }
    for i in 0..5 {
        views.push(hflip_image(&views[i]));
    }
    Ok(views)
}

/// Oversampled prediction: forward all ten views and average the resulting
/// distributions, renormalized.
///
/// Every view is evaluated from the same entry LSTM state so that identical
/// views produce identical outputs; the returned stream state is the one the
/// (unmirrored) center crop produced.
pub fn ten_crop_predict(
    model: &AgeModel,
    resized: &Tensor,
    state: &LstmState,
    branch: Branch,
) -> Result<(AgeDistribution, LstmState)> {
    let crop = model.backbone.config.input_size;
    let views = ten_crop_views(resized, crop)?;
    let k = model.head.k;
    let mut acc = vec![0.0f64; k];
    let mut next_state = state.clone();
    for (i, view) in views.iter().enumerate() {
        let mut s = state.clone();
        let pred = model.predict(view, &mut s, branch)?;
        if i == 4 {
            next_state = s;
        }
        for (a, p) in acc.iter_mut().zip(pred.dist.probs.iter()) {
            *a += p;
        }
    }
    let total: f64 = acc.iter().sum();
    let probs = acc.into_iter().map(|v| v / total).collect();
    Ok((AgeDistribution::new_normalized(probs)?, next_state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetManifest, ManifestMeta, PixelSource, Sample};
    use proptest::prelude::*;

    fn dist(probs: Vec<f64>) -> AgeDistribution {
        AgeDistribution::new_normalized(probs).unwrap()
    }

    #[test]
    fn dex_hand_values() {
        let mut one_hot = vec![0.0; 101];
        one_hot[25] = 1.0;
        let ages: Vec<f64> = (0..=100).map(|a| a as f64).collect();
        assert_eq!(dex_expected_age(&dist(one_hot), &ages).unwrap(), 25.0);

        let uniform = vec![1.0 / 101.0; 101];
        assert_eq!(dex_expected_age(&dist(uniform), &ages).unwrap(), 50.0);

        let d = dist(vec![0.25, 0.75]);
        assert_eq!(dex_expected_age(&d, &[20.0, 40.0]).unwrap(), 35.0);

        let unnorm = AgeDistribution { probs: vec![0.5, 0.2], normalized: false };
        assert!(dex_expected_age(&unnorm, &[20.0, 40.0]).is_err());
    }

    #[test]
    fn dex_presets_match_protocol_sizes() {
        assert_eq!(HeadConfig::dex_range(16, 77).unwrap().k, 62);
        assert_eq!(HeadConfig::dex_range(0, 69).unwrap().k, 70);
        assert_eq!(HeadConfig::dex_range(0, 100).unwrap().k, 101);
        assert_eq!(HeadConfig::adience_groups().k, 8);
    }

    #[test]
    fn mae_hand_values() {
        let exact: Vec<EvalRecord> = (0..4).map(|i| EvalRecord::plain(i as f64, i as f64)).collect();
        assert_eq!(mae(&exact).unwrap(), 0.0);

        let recs = [EvalRecord::plain(20.0, 25.0), EvalRecord::plain(30.0, 28.0)];
        assert_eq!(mae(&recs).unwrap(), 3.5);

        assert_eq!(mae(&[EvalRecord::plain(10.0, 12.0)]).unwrap(), 2.0);
        assert!(mae(&[]).is_err());
    }

    #[test]
    fn epsilon_error_hand_values() {
        let exact = [EvalRecord { predicted: 30.0, actual: 30.0, mu: Some(30.0), delta: Some(2.0) }];
        assert_eq!(epsilon_error(&exact).unwrap(), 0.0);

        let one_sigma = [EvalRecord { predicted: 32.0, actual: 30.0, mu: Some(30.0), delta: Some(2.0) }];
        let e = epsilon_error(&one_sigma).unwrap();
        assert!((e - (1.0 - (-0.5f64).exp())).abs() < 1e-9);
        assert!((e - 0.393469).abs() < 1e-6);

        let far = [EvalRecord { predicted: 1000.0, actual: 0.0, mu: Some(0.0), delta: Some(1.0) }];
        assert!((epsilon_error(&far).unwrap() - 1.0).abs() < 1e-12);

        // zero spread is clamped, not rejected
        let exact_zero = [EvalRecord { predicted: 30.0, actual: 30.0, mu: Some(30.0), delta: Some(0.0) }];
        assert_eq!(epsilon_error(&exact_zero).unwrap(), 0.0);

        assert!(epsilon_error(&[EvalRecord::plain(1.0, 1.0)]).is_err());
    }

    #[test]
    fn group_accuracy_hand_values() {
        let exact: Vec<EvalRecord> = (0..3).map(|i| EvalRecord::plain(i as f64, i as f64)).collect();
        assert_eq!(group_accuracy(&exact, 8).unwrap(), (1.0, 1.0));

        let recs = [
            EvalRecord::plain(2.0, 3.0),
            EvalRecord::plain(4.0, 4.0),
            EvalRecord::plain(7.0, 0.0),
        ];
        let (acc, one_off) = group_accuracy(&recs, 8).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        assert!((one_off - 2.0 / 3.0).abs() < 1e-12);

        assert!(group_accuracy(&[EvalRecord::plain(8.0, 0.0)], 8).is_err());
        assert!(group_accuracy(&[EvalRecord::plain(1.5, 0.0)], 8).is_err());
    }

    fn manifest_with_subjects(subjects: &[(&str, usize)]) -> DatasetManifest {
        let mut samples = Vec::new();
        let mut n = 0;
        for &(subj, count) in subjects {
            for _ in 0..count {
                samples.push(Sample {
                    id: format!("s{n:04}"),
                    source: PixelSource::Inline(crate::Tensor::zeros(vec![3, 2, 2])),
                    age: 30.0,
                    group: None,
                    subject_id: subj.to_string(),
                    sigma: None,
                    fold: Some(n % 3),
                });
                n += 1;
            }
        }
        DatasetManifest { meta: ManifestMeta::named("t"), samples, root: std::path::PathBuf::new() }
    }

    #[test]
    fn fivefold_is_a_disjoint_subject_exclusive_cover() {
        let subjects: Vec<(String, usize)> = (0..10).map(|i| (format!("p{i}"), 4)).collect();
        let refs: Vec<(&str, usize)> = subjects.iter().map(|(s, c)| (s.as_str(), *c)).collect();
        let m = manifest_with_subjects(&refs);
        let splits = protocol_split(&m, Protocol::FivefoldSubjectExclusive, 7).unwrap();
        assert_eq!(splits.len(), 5);
        let mut seen = std::collections::BTreeSet::new();
        for sp in &splits {
            // 10 subjects -> 2 test subjects = 8 samples per split
            assert_eq!(sp.test.len(), 8);
            let test_subjects: std::collections::BTreeSet<_> =
                sp.test.iter().map(|&i| m.samples[i].subject_id.clone()).collect();
            assert_eq!(test_subjects.len(), 2);
            let train_subjects: std::collections::BTreeSet<_> =
                sp.train.iter().map(|&i| m.samples[i].subject_id.clone()).collect();
            assert!(test_subjects.is_disjoint(&train_subjects));
            for &i in &sp.test {
                assert!(seen.insert(i), "sample {i} in two test folds");
            }
        }
        assert_eq!(seen.len(), m.samples.len());
    }

    #[test]
    fn fivefold_reproducible_and_order_invariant() {
        let subjects: Vec<(String, usize)> = (0..13).map(|i| (format!("p{i:02}"), 3)).collect();
        let refs: Vec<(&str, usize)> = subjects.iter().map(|(s, c)| (s.as_str(), *c)).collect();
        let m = manifest_with_subjects(&refs);
        let a = protocol_split(&m, Protocol::FivefoldSubjectExclusive, 3).unwrap();
        let b = protocol_split(&m, Protocol::FivefoldSubjectExclusive, 3).unwrap();
        assert_eq!(a, b);
        let c = protocol_split(&m, Protocol::FivefoldSubjectExclusive, 4).unwrap();
        assert_ne!(a, c);

        // permuting the records leaves each fold's subject sets unchanged
        let mut m2 = m.clone();
        m2.samples.reverse();
        let d = protocol_split(&m2, Protocol::FivefoldSubjectExclusive, 3).unwrap();
        for (sa, sd) in a.iter().zip(d.iter()) {
            let ids_a: std::collections::BTreeSet<_> =
                sa.test.iter().map(|&i| m.samples[i].id.clone()).collect();
            let ids_d: std::collections::BTreeSet<_> =
                sd.test.iter().map(|&i| m2.samples[i].id.clone()).collect();
            assert_eq!(ids_a, ids_d);
        }
    }

    #[test]
    fn loop_protocol_one_split_per_subject() {
        let subjects: Vec<(String, usize)> = (0..82).map(|i| (format!("p{i:03}"), 2)).collect();
        let refs: Vec<(&str, usize)> = subjects.iter().map(|(s, c)| (s.as_str(), *c)).collect();
        let m = manifest_with_subjects(&refs);
        let splits = protocol_split(&m, Protocol::Loop, 0).unwrap();
        assert_eq!(splits.len(), 82);
        for sp in &splits {
            assert_eq!(sp.test.len(), 2);
            assert!(sp.train.iter().all(|i| !sp.test.contains(i)));
        }
    }

    #[test]
    fn fixed_folds_follow_the_manifest() {
        let m = manifest_with_subjects(&[("a", 3), ("b", 3)]);
        let splits = protocol_split(&m, Protocol::FixedFolds, 0).unwrap();
        assert_eq!(splits.len(), 3); // folds 0,1,2 assigned round-robin above
        for (f, sp) in splits.iter().enumerate() {
            for &i in &sp.test {
                assert_eq!(m.samples[i].fold, Some(f));
            }
        }
    }

    fn tiny_model(k: usize, seed: u64) -> AgeModel {
        use crate::backbone::{Arch, BackboneConfig};
        use crate::model::ModelConfig;
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                arch: Arch::ResNets,
                group_depths: [1, 1, 1, 1],
                group_channels: [3, 4, 5, 6],
                input_channels: 3,
                input_size: 28,
                ror_shortcuts_enabled: false,
                stem_kernel: 3,
                stem_stride: 1,
                stem_pool: 1,
                group_strides: [1, 2, 2, 2],
            },
            head: HeadConfig::groups(k).unwrap(),
            tau: 25.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AgeModel::new(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn ten_crop_on_symmetric_image_equals_five_crop() {
        use rand::Rng;
        let model = tiny_model(3, 11);
        // horizontally symmetric 32x32 image
        let side = 32usize;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut data = vec![0.0f32; 3 * side * side];
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side / 2 {
                    let v = rng.gen_range(0.0f32..1.0);
                    data[c * side * side + y * side + x] = v;
                    data[c * side * side + y * side + (side - 1 - x)] = v;
                }
            }
        }
        let img = Tensor::new(vec![3, side, side], data).unwrap();
        let state = model.fresh_state();
        let (ten, _) = ten_crop_predict(&model, &img, &state, Branch::Fused).unwrap();

        // five unmirrored crops, averaged by hand
        let views = ten_crop_views(&img, 28).unwrap();
        let mut acc = vec![0.0f64; 3];
        for view in views.iter().take(5) {
            let mut s = state.clone();
            let p = model.predict(view, &mut s, Branch::Fused).unwrap();
            for (a, v) in acc.iter_mut().zip(p.dist.probs.iter()) {
                *a += v;
            }
        }
        let total: f64 = acc.iter().sum();
        for (t, a) in ten.probs.iter().zip(acc.iter()) {
            assert!((t - a / total).abs() < 1e-6, "{t} vs {}", a / total);
        }
    }

    #[test]
    fn ten_crop_matches_explicit_ten_forward_average() {
        use rand::Rng;
        let model = tiny_model(2, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let img = Tensor::new(vec![3, 32, 32], data).unwrap();
        let state = model.fresh_state();
        let (ten, _) = ten_crop_predict(&model, &img, &state, Branch::Fused).unwrap();

        let views = ten_crop_views(&img, 28).unwrap();
        assert_eq!(views.len(), 10);
        let mut acc = vec![0.0f64; 2];
        for view in &views {
            let mut s = state.clone();
            let p = model.predict(view, &mut s, Branch::Fused).unwrap();
            for (a, v) in acc.iter_mut().zip(p.dist.probs.iter()) {
                *a += v;
            }
        }
        let total: f64 = acc.iter().sum();
        for (t, a) in ten.probs.iter().zip(acc.iter()) {
            assert!((t - a / total).abs() < 1e-6);
        }
    }

    #[test]
    fn ten_crop_constant_image_equals_single_forward() {
        let model = tiny_model(3, 15);
        let img = Tensor::full(vec![3, 32, 32], 0.37);
        let state = model.fresh_state();
        let (ten, _) = ten_crop_predict(&model, &img, &state, Branch::Fused).unwrap();
        let one = crop_image(&img, 2, 2, 28, 28).unwrap();
        let mut s = state.clone();
        let single = model.predict(&one, &mut s, Branch::Fused).unwrap();
        for (t, o) in ten.probs.iter().zip(single.dist.probs.iter()) {
            assert!((t - o).abs() < 1e-9);
        }
    }

    #[test]
    fn ten_crop_rejects_undersized_images() {
        let model = tiny_model(2, 16);
        let img = Tensor::zeros(vec![3, 20, 20]);
        let state = model.fresh_state();
        assert!(matches!(
            ten_crop_predict(&model, &img, &state, Branch::GlobalOnly),
            Err(Error::Input(_))
        ));
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(
            values in prop::collection::vec((0.0f64..80.0, 0.0f64..80.0, 0.1f64..10.0), 1..40),
            seed in 0u64..1000,
        ) {
            let recs: Vec<EvalRecord> = values
                .iter()
                .map(|&(p, a, d)| EvalRecord { predicted: p, actual: a, mu: Some(a), delta: Some(d) })
                .collect();
            let mut shuffled = recs.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            prop_assert!((mae(&recs).unwrap() - mae(&shuffled).unwrap()).abs() < 1e-12);
            prop_assert!((epsilon_error(&recs).unwrap() - epsilon_error(&shuffled).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn epsilon_error_stays_in_unit_interval(
            values in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..15.0), 1..40),
        ) {
            let recs: Vec<EvalRecord> = values
                .iter()
                .map(|&(p, m, d)| EvalRecord { predicted: p, actual: m, mu: Some(m), delta: Some(d) })
                .collect();
            let e = epsilon_error(&recs).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            // strictly below 1 whenever 1 - exp(-z) stays resolvable in f64
            let healthy = values.iter().all(|&(p, m, d)| {
                let dd = d.max(1e-6);
                (p - m) * (p - m) / (2.0 * dd * dd) < 36.0
            });
            if healthy {
                prop_assert!(e < 1.0);
            }
        }

        #[test]
        fn dex_is_monotone_under_upward_mass_shifts(
            raw in prop::collection::vec(1e-3f64..1.0, 3..20),
            from in 0usize..20,
            shift in 0.01f64..0.5,
        ) {
            let k = raw.len();
            let from = from % (k - 1);
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let ages: Vec<f64> = (0..k).map(|i| 10.0 + 3.0 * i as f64).collect();
            let base = dex_expected_age(&dist(probs.clone()), &ages).unwrap();
            // move some mass from class `from` to a strictly older class
            let mut shifted = probs.clone();
            let moved = shifted[from] * shift;
            shifted[from] -= moved;
            shifted[from + 1] += moved;
            let after = dex_expected_age(&dist(shifted), &ages).unwrap();
            prop_assert!(after > base - 1e-12);
        }

        #[test]
        fn one_off_never_below_exact(
            pairs in prop::collection::vec((0u8..8, 0u8..8), 1..60),
        ) {
            let recs: Vec<EvalRecord> = pairs
                .iter()
                .map(|&(p, a)| EvalRecord::plain(p as f64, a as f64))
                .collect();
            let (acc, one_off) = group_accuracy(&recs, 8).unwrap();
            prop_assert!(one_off >= acc);
        }
    }
}
