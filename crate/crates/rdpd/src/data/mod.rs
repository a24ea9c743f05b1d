//! Dataset ingestion and preparation: sliding-window framing,
//! segmentation, channel projection for the poor view, noise injection,
//! rich-data subsampling, and subject-wise splits.

pub mod manifest;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::stable_hash64;

/// Stable identity of one window: bundle entries, noise streams and
/// attention dumps are all keyed by it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub subject_id: String,
    pub window_index: u32,
}

impl std::fmt::Display for SampleKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.subject_id, self.window_index)
    }
}

/// One training sample: a window split into `M` contiguous segments of
/// `S` steps over `D` channels, stored row-major `[segment][step][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedSeries {
    pub subject_id: String,
    pub window_index: u32,
    pub n_segments: usize,
    pub segment_len: usize,
    pub n_channels: usize,
    pub values: Vec<f64>,
    pub label: usize,
    pub n_classes: usize,
}

impl SegmentedSeries {
    pub fn key(&self) -> SampleKey {
        SampleKey {
            subject_id: self.subject_id.clone(),
            window_index: self.window_index,
        }
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.n_classes];
        y[self.label] = 1.0;
        y
    }

    /// Checks the `M*S*D == element count` and label range invariants.
    pub fn validate(&self) -> Result<()> {
        let expect = self.n_segments * self.segment_len * self.n_channels;
        if self.values.len() != expect {
            return Err(Error::Data(format!(
                "sample {} has {} values, expected {}x{}x{} = {expect}",
                self.key(),
                self.values.len(),
                self.n_segments,
                self.segment_len,
                self.n_channels
            )));
        }
        if self.label >= self.n_classes {
            return Err(Error::Data(format!(
                "sample {} label {} out of range [0,{})",
                self.key(),
                self.label,
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// Per-step or per-recording class labels of a raw recording.
#[derive(Debug, Clone)]
pub enum LabelTrack {
    PerStep(Vec<usize>),
    Constant(usize),
}

/// A subject's multichannel recording prior to framing.
#[derive(Debug, Clone)]
pub struct RawRecording {
    pub subject_id: String,
    pub channel_names: Vec<String>,
    /// One series per channel, all of equal length. NaN marks a missing value.
    pub series: Vec<Vec<f64>>,
    pub sample_rate_hz: f64,
    pub labels: LabelTrack,
}

impl RawRecording {
    pub fn len(&self) -> usize {
        self.series.first().map_or(0, |s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let len = self.len();
        if self.series.len() != self.channel_names.len() {
            return Err(Error::Data(format!(
                "subject {}: {} series for {} channel names",
                self.subject_id,
                self.series.len(),
                self.channel_names.len()
            )));
        }
        for (name, s) in self.channel_names.iter().zip(&self.series) {
            if s.len() != len {
                return Err(Error::Data(format!(
                    "subject {}: channel {name} has length {} != {len}",
                    self.subject_id,
                    s.len()
                )));
            }
        }
        let check = |l: usize| {
            if l >= n_classes {
                Err(Error::Data(format!(
                    "subject {}: label {l} out of range [0,{n_classes})",
                    self.subject_id
                )))
            } else {
                Ok(())
            }
        };
        match &self.labels {
            LabelTrack::Constant(l) => check(*l)?,
            LabelTrack::PerStep(ls) => {
                if ls.len() != len {
                    return Err(Error::Data(format!(
                        "subject {}: {} labels for {len} steps",
                        self.subject_id,
                        ls.len()
                    )));
                }
                for &l in ls {
                    check(l)?;
                }
            }
        }
        Ok(())
    }
}

/// Dataset-level descriptors shared by every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub classes: Vec<String>,
    pub channels: Vec<String>,
    pub groups: BTreeMap<String, Vec<String>>,
    pub n_segments: usize,
    pub segment_len: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SegmentedSeries>,
}

/// Subject-disjoint train/valid/test partitions of a dataset.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub meta: DatasetMeta,
    pub train: Vec<SegmentedSeries>,
    pub valid: Vec<SegmentedSeries>,
    pub test: Vec<SegmentedSeries>,
}

impl SplitDataset {
    /// Verifies that no subject appears in two splits.
    pub fn check_subject_disjoint(&self) -> Result<()> {
        let collect = |part: &[SegmentedSeries]| -> BTreeSet<String> {
            part.iter().map(|s| s.subject_id.clone()).collect()
        };
        let (tr, va, te) = (collect(&self.train), collect(&self.valid), collect(&self.test));
        for s in tr.intersection(&va).chain(tr.intersection(&te)).chain(va.intersection(&te)) {
            return Err(Error::Data(format!("subject {s} appears in two splits")));
        }
        Ok(())
    }

    /// Deterministic fingerprint over sample keys and values of a split part.
    pub fn fingerprint(part: &[SegmentedSeries]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for s in part {
            let key = s.key().to_string();
            let mut bytes = Vec::with_capacity(key.len() + s.values.len() * 8 + 8);
            bytes.extend_from_slice(key.as_bytes());
            bytes.extend_from_slice(&(s.label as u64).to_le_bytes());
            for v in &s.values {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            h ^= stable_hash64(&[&bytes]);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Ordered channel subset defining the poor view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProjection {
    pub indices: Vec<usize>,
    pub names: Vec<String>,
}

impl ChannelProjection {
    pub fn all(meta: &DatasetMeta) -> Self {
        ChannelProjection {
            indices: (0..meta.channels.len()).collect(),
            names: meta.channels.clone(),
        }
    }

    pub fn from_names(meta: &DatasetMeta, names: &[String]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("channel projection must be nonempty".into()));
        }
        let mut indices = Vec::with_capacity(names.len());
        for n in names {
            match meta.channels.iter().position(|c| c == n) {
                Some(i) => indices.push(i),
                None => {
                    return Err(Error::Data(format!(
                        "unknown channel {n:?}; dataset has {:?}",
                        meta.channels
                    )))
                }
            }
        }
        Ok(ChannelProjection {
            indices,
            names: names.to_vec(),
        })
    }

    /// Resolves a named channel group from the dataset manifest.
    pub fn from_group(meta: &DatasetMeta, group: &str) -> Result<Self> {
        if group == "all" {
            return Ok(Self::all(meta));
        }
        let names = meta.groups.get(group).ok_or_else(|| {
            Error::Config(format!(
                "unknown channel group {group:?}; available: {:?}",
                meta.groups.keys().collect::<Vec<_>>()
            ))
        })?;
        Self::from_names(meta, names)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// One framed (not yet segmented) window.
#[derive(Debug, Clone)]
pub struct Window {
    pub subject_id: String,
    pub window_index: u32,
    pub start: usize,
    /// Row-major `[step][channel]`.
    pub values: Vec<f64>,
    pub n_channels: usize,
    pub window_len: usize,
    pub label: usize,
}

/// Maximal list of fully contained windows at offsets 0, step, 2*step, ...
///
/// Windows violating the label-majority or missing-value rules are
/// dropped. A window longer than the series yields an empty list with a
/// warning rather than an error.
pub fn frame_windows(rec: &RawRecording, window_len: usize, step: usize) -> Result<Vec<Window>> {
    if window_len == 0 || step == 0 {
        return Err(Error::Config("window_len and step must be >= 1".into()));
    }
    let len = rec.len();
    if window_len > len {
        log::warn!(
            "subject {}: series of {len} samples shorter than window {window_len}; no windows",
            rec.subject_id
        );
        return Ok(Vec::new());
    }
    let d = rec.series.len();
    let mut out = Vec::new();
    let mut start = 0;
    let mut index = 0u32;
    while start + window_len <= len {
        if let Some(values) = extract_window(rec, start, window_len, d) {
            if let Some(label) = window_label(rec, start, window_len) {
                out.push(Window {
                    subject_id: rec.subject_id.clone(),
                    window_index: index,
                    start,
                    values,
                    n_channels: d,
                    window_len,
                    label,
                });
                index += 1;
            }
        }
        start += step;
    }
    Ok(out)
}

/// Fills missing values by linear interpolation inside the window;
/// returns None when any channel is more than 20% missing.
fn extract_window(rec: &RawRecording, start: usize, window_len: usize, d: usize) -> Option<Vec<f64>> {
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(d);
    for series in &rec.series {
        let mut col: Vec<f64> = series[start..start + window_len].to_vec();
        let missing = col.iter().filter(|v| v.is_nan()).count();
        if missing * 5 > window_len {
            return None;
        }
        if missing > 0 {
            interpolate_gaps(&mut col)?;
        }
        columns.push(col);
    }
    let mut values = Vec::with_capacity(window_len * d);
    for t in 0..window_len {
        for col in &columns {
            values.push(col[t]);
        }
    }
    Some(values)
}

/// In-place linear interpolation over NaN runs; end gaps take the nearest
/// known value. Returns None if the column has no known value at all.
fn interpolate_gaps(col: &mut [f64]) -> Option<()> {
    let known: Vec<usize> = (0..col.len()).filter(|&i| !col[i].is_nan()).collect();
    if known.is_empty() {
        return None;
    }
    for i in 0..col.len() {
        if !col[i].is_nan() {
            continue;
        }
        let prev = known.iter().rev().find(|&&k| k < i).copied();
        let next = known.iter().find(|&&k| k > i).copied();
        col[i] = match (prev, next) {
            (Some(a), Some(b)) => {
                let frac = (i - a) as f64 / (b - a) as f64;
                col[a] + (col[b] - col[a]) * frac
            }
            (Some(a), None) => col[a],
            (None, Some(b)) => col[b],
            (None, None) => unreachable!(),
        };
    }
    Some(())
}

/// Majority label over the window; None (drop) when no single majority.
fn window_label(rec: &RawRecording, start: usize, window_len: usize) -> Option<usize> {
    match &rec.labels {
        LabelTrack::Constant(l) => Some(*l),
        LabelTrack::PerStep(ls) => {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &l in &ls[start..start + window_len] {
                *counts.entry(l).or_insert(0) += 1;
            }
            let best = counts.values().copied().max()?;
            let winners: Vec<usize> = counts
                .iter()
                .filter(|(_, &c)| c == best)
                .map(|(&l, _)| l)
                .collect();
            if winners.len() == 1 {
                Some(winners[0])
            } else {
                None
            }
        }
    }
}

/// Splits a framed window of `l` steps into `M = l / S` contiguous
/// segments. `l` must be divisible by `S`.
pub fn segment(window: &Window, segment_len: usize, n_classes: usize) -> Result<SegmentedSeries> {
    if segment_len == 0 || window.window_len % segment_len != 0 {
        return Err(Error::Config(format!(
            "window length {} is not divisible by segment length {segment_len}",
            window.window_len
        )));
    }
    let m = window.window_len / segment_len;
    // [step][channel] row-major is already [segment][step][channel] when
    // sliced every S rows, so the data moves over unchanged.
    Ok(SegmentedSeries {
        subject_id: window.subject_id.clone(),
        window_index: window.window_index,
        n_segments: m,
        segment_len,
        n_channels: window.n_channels,
        values: window.values.clone(),
        label: window.label,
        n_classes,
    })
}

/// Restricts a sample to the projected channels; segmentation and label
/// are untouched, which is what keeps student and teacher attention
/// aligned over the same `M` segments.
pub fn project_channels(x: &SegmentedSeries, proj: &ChannelProjection) -> Result<SegmentedSeries> {
    if proj.is_empty() {
        return Err(Error::Config("channel projection must be nonempty".into()));
    }
    for &i in &proj.indices {
        if i >= x.n_channels {
            return Err(Error::Data(format!(
                "projection index {i} out of range for {} channels",
                x.n_channels
            )));
        }
    }
    let steps = x.n_segments * x.segment_len;
    let mut values = Vec::with_capacity(steps * proj.len());
    for t in 0..steps {
        let row = t * x.n_channels;
        for &c in &proj.indices {
            values.push(x.values[row + c]);
        }
    }
    Ok(SegmentedSeries {
        n_channels: proj.len(),
        values,
        ..x.clone()
    })
}

pub fn project_all(samples: &[SegmentedSeries], proj: &ChannelProjection) -> Result<Vec<SegmentedSeries>> {
    samples.iter().map(|s| project_channels(s, proj)).collect()
}

/// Distribution the additive noise is drawn from. The reference formula
/// reads `amp * random_normal(-1, 1)`, which is ambiguous; standard
/// normal is the default and uniform(-1,1) is available as the alternate
/// reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Normal,
    Uniform,
}

/// `x + amp * n` elementwise, deterministic per seed. `amp = 0` returns
/// the sample bit-identically.
pub fn inject_noise(x: &SegmentedSeries, amp: f64, kind: NoiseKind, seed: u64) -> Result<SegmentedSeries> {
    if !(amp >= 0.0) {
        return Err(Error::Config(format!("noise amplitude must be >= 0, got {amp}")));
    }
    if amp == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = x.clone();
    match kind {
        NoiseKind::Normal => {
            for v in out.values.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += amp * n;
            }
        }
        NoiseKind::Uniform => {
            for v in out.values.iter_mut() {
                *v += amp * rng.random_range(-1.0..1.0);
            }
        }
    }
    Ok(out)
}

/// Per-sample seed for a noise stream: the same (base, sample) pair
/// always yields the same noise regardless of iteration order.
pub fn noise_seed(base: u64, key: &SampleKey) -> u64 {
    stable_hash64(&[
        &base.to_le_bytes(),
        key.subject_id.as_bytes(),
        &key.window_index.to_le_bytes(),
    ])
}

/// Subject-stratified random subset of training windows. `fraction = 1`
/// is the identity; original sample order is preserved.
pub fn subsample_rich(
    train: &[SegmentedSeries],
    fraction: f64,
    seed: u64,
) -> Result<Vec<SegmentedSeries>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "rich-data fraction must be in (0,1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(train.to_vec());
    }
    let mut per_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        per_subject.entry(&s.subject_id).or_default().push(i);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (_, mut idxs) in per_subject {
        let take = ((idxs.len() as f64) * fraction).round() as usize;
        idxs.shuffle(&mut rng);
        keep.extend(idxs.into_iter().take(take.max(1)));
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| train[i].clone()).collect())
}

/// How subjects are assigned to train/valid/test.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Explicit subject lists for valid and test; the rest train.
    Fixed {
        valid_subjects: Vec<String>,
        test_subjects: Vec<String>,
    },
    /// Seeded random assignment by subject at the given fractions.
    Ratio {
        train: f64,
        valid: f64,
        test: f64,
        seed: u64,
    },
}

impl SplitSpec {
    pub fn ratio_80_10_10(seed: u64) -> Self {
        SplitSpec::Ratio {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
            seed,
        }
    }
}

/// Subject-disjoint partition of a dataset.
pub fn split_by_subject(dataset: &Dataset, spec: &SplitSpec) -> Result<SplitDataset> {
    let subjects: Vec<String> = dataset
        .samples
        .iter()
        .map(|s| s.subject_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let (valid_set, test_set): (BTreeSet<String>, BTreeSet<String>) = match spec {
        SplitSpec::Fixed {
            valid_subjects,
            test_subjects,
        } => {
            for s in valid_subjects.iter().chain(test_subjects) {
                if !subjects.contains(s) {
                    return Err(Error::Config(format!("split names unknown subject {s:?}")));
                }
            }
            let v: BTreeSet<String> = valid_subjects.iter().cloned().collect();
            let t: BTreeSet<String> = test_subjects.iter().cloned().collect();
            if v.intersection(&t).next().is_some() {
                return Err(Error::Config("a subject is listed for both valid and test".into()));
            }
            (v, t)
        }
        SplitSpec::Ratio {
            train,
            valid,
            test,
            seed,
        } => {
            if (train + valid + test - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "split ratios must sum to 1, got {train}/{valid}/{test}"
                )));
            }
            if subjects.len() < 3 {
                return Err(Error::Config(format!(
                    "ratio split needs at least 3 subjects for disjoint parts, got {}",
                    subjects.len()
                )));
            }
            let mut shuffled = subjects.clone();
            let mut rng = ChaCha20Rng::seed_from_u64(*seed);
            shuffled.shuffle(&mut rng);
            let n = shuffled.len() as f64;
            let n_valid = ((n * valid).round() as usize).max(1);
            let n_test = ((n * test).round() as usize).max(1);
            if n_valid + n_test >= shuffled.len() {
                return Err(Error::Config("split ratios leave no training subjects".into()));
            }
            let v: BTreeSet<String> = shuffled[..n_valid].iter().cloned().collect();
            let t: BTreeSet<String> = shuffled[n_valid..n_valid + n_test].iter().cloned().collect();
            (v, t)
        }
    };

    let mut split = SplitDataset {
        meta: dataset.meta.clone(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for s in &dataset.samples {
        if valid_set.contains(&s.subject_id) {
            split.valid.push(s.clone());
        } else if test_set.contains(&s.subject_id) {
            split.test.push(s.clone());
        } else {
            split.train.push(s.clone());
        }
    }
    for (name, part) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        if part.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
    }
    split.check_subject_disjoint()?;
    Ok(split)
}

/// Per-channel standardization statistics fitted on the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits zero-mean/unit-variance statistics on the training split and
/// applies them to every split. Constant channels are left unscaled.
pub fn standardize(split: &mut SplitDataset) -> Result<ChannelStats> {
    let d = split
        .train
        .first()
        .ok_or_else(|| Error::Data("cannot standardize an empty training split".into()))?
        .n_channels;
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut count = 0usize;
    for s in &split.train {
        let steps = s.n_segments * s.segment_len;
        for t in 0..steps {
            for c in 0..d {
                let v = s.values[t * d + c];
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        count += steps;
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(&sq, &m)| {
            let var = (sq / n - m * m).max(0.0);
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let stats = ChannelStats { mean, std };
    for part in [&mut split.train, &mut split.valid, &mut split.test] {
        for s in part.iter_mut() {
            let steps = s.n_segments * s.segment_len;
            for t in 0..steps {
                for c in 0..d {
                    let v = &mut s.values[t * d + c];
                    *v = (*v - stats.mean[c]) / stats.std[c];
                }
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recording(len: usize, d: usize, label: usize) -> RawRecording {
        RawRecording {
            subject_id: "s0".into(),
            channel_names: (0..d).map(|i| format!("c{i}")).collect(),
            series: (0..d).map(|c| (0..len).map(|t| (t * (c + 1)) as f64).collect()).collect(),
            sample_rate_hz: 1.0,
            labels: LabelTrack::Constant(label),
        }
    }

    #[test]
    fn framing_enumerates_expected_offsets() {
        // length 10, window 4, step 2 -> offsets 0,2,4,6
        let rec = recording(10, 1, 0);
        let ws = frame_windows(&rec, 4, 2).unwrap();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
    }

    #[test]
    fn framing_exact_fit_gives_one_window() {
        let rec = recording(8, 2, 1);
        let ws = frame_windows(&rec, 8, 3).unwrap();
        assert_eq!(ws.len(), 1);
    }

    #[test]
    fn framing_window_longer_than_series_is_empty_not_error() {
        let rec = recording(3, 1, 0);
        let ws = frame_windows(&rec, 10, 1).unwrap();
        assert!(ws.is_empty());
    }

    #[test]
    fn pamap2_style_arithmetic() {
        // 50 Hz, 5.12 s -> 256-sample windows, 50-sample steps, S=64 -> M=4
        let window_len = (50.0_f64 * 5.12).round() as usize;
        let step = 50;
        assert_eq!(window_len, 256);
        let rec = recording(600, 1, 0);
        let ws = frame_windows(&rec, window_len, step).unwrap();
        assert_eq!(ws.len(), (600 - 256) / 50 + 1);
        let seg = segment(&ws[0], 64, 2).unwrap();
        assert_eq!(seg.n_segments, 4);
        // PTBDB-style: 200 Hz * 10 s = 2000, S=500 -> M=4
        assert_eq!(2000 / 500, 4);
    }

    #[test]
    fn majority_label_and_tie_drop() {
        let mut rec = recording(6, 1, 0);
        rec.labels = LabelTrack::PerStep(vec![0, 0, 1, 1, 1, 0]);
        let ws = frame_windows(&rec, 6, 6).unwrap();
        assert_eq!(ws.len(), 0); // 3 vs 3 tie -> dropped
        rec.labels = LabelTrack::PerStep(vec![0, 1, 1, 1, 1, 0]);
        let ws = frame_windows(&rec, 6, 6).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].label, 1);
    }

    #[test]
    fn missing_values_interpolated_or_dropped() {
        let mut rec = recording(5, 1, 0);
        rec.series[0] = vec![0.0, f64::NAN, 2.0, f64::NAN, 4.0];
        // 2/5 = 40% missing -> dropped
        assert!(frame_windows(&rec, 5, 5).unwrap().is_empty());
        rec.series[0] = vec![0.0, f64::NAN, 2.0, 3.0, 4.0, 5.0];
        for s in rec.series.iter_mut() {
            s.truncate(6);
        }
        let ws = frame_windows(&rec, 6, 6).unwrap();
        assert_eq!(ws.len(), 1);
        assert!((ws[0].values[1] - 1.0).abs() < 1e-12); // linear fill
    }

    #[test]
    fn segment_requires_divisibility() {
        let rec = recording(10, 1, 0);
        let ws = frame_windows(&rec, 10, 10).unwrap();
        assert!(matches!(segment(&ws[0], 3, 2), Err(Error::Config(_))));
        let seg = segment(&ws[0], 10, 2).unwrap();
        assert_eq!(seg.n_segments, 1); // l = S -> M = 1
    }

    #[test]
    fn projection_identity_and_unknown_channel() {
        let rec = recording(4, 3, 0);
        let ws = frame_windows(&rec, 4, 4).unwrap();
        let s = segment(&ws[0], 2, 2).unwrap();
        let meta = DatasetMeta {
            name: "t".into(),
            classes: vec!["a".into(), "b".into()],
            channels: rec.channel_names.clone(),
            groups: BTreeMap::new(),
            n_segments: 2,
            segment_len: 2,
        };
        let all = ChannelProjection::all(&meta);
        let projected = project_channels(&s, &all).unwrap();
        assert_eq!(projected, s);
        assert!(ChannelProjection::from_names(&meta, &["nope".into()]).is_err());
    }

    #[test]
    fn project_then_segment_commutes_with_segment_then_project() {
        let rec = recording(8, 3, 1);
        let ws = frame_windows(&rec, 8, 8).unwrap();
        let meta_channels = rec.channel_names.clone();
        let meta = DatasetMeta {
            name: "t".into(),
            classes: vec!["a".into(), "b".into()],
            channels: meta_channels,
            groups: BTreeMap::new(),
            n_segments: 2,
            segment_len: 4,
        };
        let proj = ChannelProjection::from_names(&meta, &["c2".into(), "c0".into()]).unwrap();

        // segment -> project
        let s_then_p = project_channels(&segment(&ws[0], 4, 2).unwrap(), &proj).unwrap();

        // project (on the raw window) -> segment
        let mut projected_window = ws[0].clone();
        projected_window.n_channels = proj.len();
        projected_window.values = {
            let d = ws[0].n_channels;
            let mut v = Vec::new();
            for t in 0..ws[0].window_len {
                for &c in &proj.indices {
                    v.push(ws[0].values[t * d + c]);
                }
            }
            v
        };
        let p_then_s = segment(&projected_window, 4, 2).unwrap();
        assert_eq!(s_then_p.values, p_then_s.values);
    }

    #[test]
    fn noise_zero_amp_is_bitwise_identity_and_seeded() {
        let rec = recording(4, 2, 0);
        let ws = frame_windows(&rec, 4, 4).unwrap();
        let s = segment(&ws[0], 2, 2).unwrap();
        let same = inject_noise(&s, 0.0, NoiseKind::Normal, 9).unwrap();
        assert_eq!(same.values, s.values);
        let a = inject_noise(&s, 0.5, NoiseKind::Normal, 9).unwrap();
        let b = inject_noise(&s, 0.5, NoiseKind::Normal, 9).unwrap();
        assert_eq!(a.values, b.values);
        let c = inject_noise(&s, 0.5, NoiseKind::Normal, 10).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn noise_variance_tracks_amp() {
        // sample variance of (x' - x) ~ amp^2 within 5% over 1e5 points
        let n = 100_000;
        let rec = RawRecording {
            subject_id: "s".into(),
            channel_names: vec!["c0".into()],
            series: vec![vec![0.0; n]],
            sample_rate_hz: 1.0,
            labels: LabelTrack::Constant(0),
        };
        let ws = frame_windows(&rec, n, n).unwrap();
        let s = segment(&ws[0], n, 1).unwrap();
        let amp = 0.7;
        let noisy = inject_noise(&s, amp, NoiseKind::Normal, 4).unwrap();
        let var = noisy.values.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var - amp * amp).abs() < 0.05 * amp * amp, "var={var}");
    }

    #[test]
    fn subsample_identity_and_counts() {
        let mut samples = Vec::new();
        for subj in 0..2 {
            for w in 0..50 {
                samples.push(SegmentedSeries {
                    subject_id: format!("s{subj}"),
                    window_index: w,
                    n_segments: 1,
                    segment_len: 1,
                    n_channels: 1,
                    values: vec![0.0],
                    label: 0,
                    n_classes: 2,
                });
            }
        }
        let full = subsample_rich(&samples, 1.0, 3).unwrap();
        assert_eq!(full.len(), samples.len());
        let half = subsample_rich(&samples, 0.5, 3).unwrap();
        assert_eq!(half.len(), 50); // 25 per subject
        let again = subsample_rich(&samples, 0.5, 3).unwrap();
        assert_eq!(
            half.iter().map(|s| s.key()).collect::<Vec<_>>(),
            again.iter().map(|s| s.key()).collect::<Vec<_>>()
        );
    }

    fn tiny_dataset(n_subjects: usize) -> Dataset {
        let meta = DatasetMeta {
            name: "t".into(),
            classes: vec!["a".into(), "b".into()],
            channels: vec!["c0".into()],
            groups: BTreeMap::new(),
            n_segments: 1,
            segment_len: 1,
        };
        let samples = (0..n_subjects)
            .flat_map(|s| {
                (0..4).map(move |w| SegmentedSeries {
                    subject_id: format!("s{s:02}"),
                    window_index: w,
                    n_segments: 1,
                    segment_len: 1,
                    n_channels: 1,
                    values: vec![s as f64],
                    label: (w as usize) % 2,
                    n_classes: 2,
                })
            })
            .collect();
        Dataset { meta, samples }
    }

    #[test]
    fn ratio_split_10_subjects_gives_8_1_1() {
        let ds = tiny_dataset(10);
        let split = split_by_subject(&ds, &SplitSpec::ratio_80_10_10(5)).unwrap();
        let count = |p: &[SegmentedSeries]| {
            p.iter().map(|s| s.subject_id.clone()).collect::<BTreeSet<_>>().len()
        };
        assert_eq!(count(&split.train), 8);
        assert_eq!(count(&split.valid), 1);
        assert_eq!(count(&split.test), 1);
    }

    #[test]
    fn single_subject_ratio_split_errors() {
        let ds = tiny_dataset(1);
        assert!(split_by_subject(&ds, &SplitSpec::ratio_80_10_10(5)).is_err());
    }

    #[test]
    fn fixed_split_assigns_named_subjects() {
        let ds = tiny_dataset(4);
        let split = split_by_subject(
            &ds,
            &SplitSpec::Fixed {
                valid_subjects: vec!["s01".into()],
                test_subjects: vec!["s03".into()],
            },
        )
        .unwrap();
        assert!(split.valid.iter().all(|s| s.subject_id == "s01"));
        assert!(split.test.iter().all(|s| s.subject_id == "s03"));
        split.check_subject_disjoint().unwrap();
    }

    #[test]
    fn standardize_fits_train_only() {
        let ds = tiny_dataset(4);
        let mut split = split_by_subject(
            &ds,
            &SplitSpec::Fixed {
                valid_subjects: vec!["s01".into()],
                test_subjects: vec!["s03".into()],
            },
        )
        .unwrap();
        let stats = standardize(&mut split).unwrap();
        // train subjects are s00 and s02 with constant values 0 and 2
        assert!((stats.mean[0] - 1.0).abs() < 1e-12);
        let m: f64 = split.train.iter().map(|s| s.values[0]).sum::<f64>() / split.train.len() as f64;
        assert!(m.abs() < 1e-12);
    }
}
