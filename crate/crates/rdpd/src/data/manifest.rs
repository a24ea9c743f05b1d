//! Dataset manifest and subject-file ingestion.
//!
//! A dataset directory holds one TOML manifest plus one delimiter-separated
//! file per subject (header row naming channels, one `label` column).
//! The manifest declares sample rate, framing, segmentation, channel
//! groups, classes, and the split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    frame_windows, segment, Dataset, DatasetMeta, LabelTrack, RawRecording, SplitSpec,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub sample_rate_hz: f64,
    pub window_seconds: f64,
    pub step_seconds: f64,
    /// Segment length S; the framed window length must be divisible by it.
    pub segment_len: usize,
    pub channels: Vec<String>,
    pub classes: Vec<String>,
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<String>>,
    /// Subject file names relative to the manifest directory; when absent,
    /// every *.csv next to the manifest is loaded (file stem = subject id).
    #[serde(default)]
    pub subjects: Option<Vec<String>>,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub split: Option<ManifestSplit>,
}

fn default_true() -> bool {
    true
}

/// Split block of a manifest: either explicit subject lists or a seeded
/// 80/10/10-style ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestSplit {
    Fixed {
        valid_subjects: Vec<String>,
        test_subjects: Vec<String>,
    },
    Ratio {
        train_fraction: f64,
        valid_fraction: f64,
        test_fraction: f64,
        seed: u64,
    },
}

impl Manifest {
    pub fn window_len(&self) -> usize {
        (self.sample_rate_hz * self.window_seconds).round() as usize
    }

    pub fn step_len(&self) -> usize {
        (self.sample_rate_hz * self.step_seconds).round() as usize
    }

    pub fn split_spec(&self) -> SplitSpec {
        match &self.split {
            Some(ManifestSplit::Fixed {
                valid_subjects,
                test_subjects,
            }) => SplitSpec::Fixed {
                valid_subjects: valid_subjects.clone(),
                test_subjects: test_subjects.clone(),
            },
            Some(ManifestSplit::Ratio {
                train_fraction,
                valid_fraction,
                test_fraction,
                seed,
            }) => SplitSpec::Ratio {
                train: *train_fraction,
                valid: *valid_fraction,
                test: *test_fraction,
                seed: *seed,
            },
            None => SplitSpec::ratio_80_10_10(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz <= 0.0 || self.window_seconds <= 0.0 || self.step_seconds <= 0.0 {
            return Err(Error::Config("manifest rates and durations must be positive".into()));
        }
        let wl = self.window_len();
        if wl == 0 || self.step_len() == 0 {
            return Err(Error::Config("manifest window/step round to zero samples".into()));
        }
        if self.segment_len == 0 || wl % self.segment_len != 0 {
            return Err(Error::Config(format!(
                "window of {wl} samples is not divisible by segment_len {}",
                self.segment_len
            )));
        }
        if self.channels.is_empty() || self.classes.len() < 2 {
            return Err(Error::Config("manifest needs channels and >= 2 classes".into()));
        }
        for (group, names) in &self.groups {
            for n in names {
                if !self.channels.contains(n) {
                    return Err(Error::Config(format!(
                        "group {group:?} references unknown channel {n:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads a subject file: header row with channel names and a `label`
/// column; label values may be class indices or class names.
pub fn load_subject_file(path: &Path, manifest: &Manifest) -> Result<RawRecording> {
    let subject_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("unknown")
        .to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let mut channel_cols = Vec::with_capacity(manifest.channels.len());
    for name in &manifest.channels {
        match headers.iter().position(|h| h == name) {
            Some(i) => channel_cols.push(i),
            None => {
                return Err(Error::Data(format!(
                    "{}: missing channel column {name:?}",
                    path.display()
                )))
            }
        }
    }
    let label_col = headers.iter().position(|h| h == "label").ok_or_else(|| {
        Error::Data(format!("{}: missing label column", path.display()))
    })?;

    let mut series: Vec<Vec<f64>> = vec![Vec::new(); manifest.channels.len()];
    let mut labels: Vec<usize> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("row {}: {e}", row_idx + 2),
        })?;
        for (slot, &col) in channel_cols.iter().enumerate() {
            let raw = record.get(col).unwrap_or("");
            let value = if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                raw.parse::<f64>().map_err(|_| Error::Data(format!(
                    "{} row {}: bad value {raw:?} in channel {}",
                    path.display(),
                    row_idx + 2,
                    manifest.channels[slot]
                )))?
            };
            series[slot].push(value);
        }
        let raw_label = record.get(label_col).unwrap_or("");
        let label = parse_label(raw_label, &manifest.classes).ok_or_else(|| {
            Error::Data(format!(
                "{} row {}: label {raw_label:?} is neither a class index nor a class name",
                path.display(),
                row_idx + 2
            ))
        })?;
        labels.push(label);
    }

    let rec = RawRecording {
        subject_id,
        channel_names: manifest.channels.clone(),
        series,
        sample_rate_hz: manifest.sample_rate_hz,
        labels: LabelTrack::PerStep(labels),
    };
    rec.validate(manifest.classes.len())?;
    Ok(rec)
}

fn parse_label(raw: &str, classes: &[String]) -> Option<usize> {
    if let Ok(idx) = raw.parse::<usize>() {
        if idx < classes.len() {
            return Some(idx);
        }
        return None;
    }
    classes.iter().position(|c| c == raw)
}

/// Loads the full dataset a manifest describes: every subject file is
/// framed and segmented, merged in deterministic subject order.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, Dataset)> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let mut files: Vec<PathBuf> = match &manifest.subjects {
        Some(names) => names.iter().map(|n| dir.join(n)).collect(),
        None => {
            let mut found = Vec::new();
            let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(dir, e))?;
                let p = entry.path();
                if p.extension().is_some_and(|e| e == "csv") {
                    found.push(p);
                }
            }
            found
        }
    };
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no subject files found for manifest {}",
            manifest_path.display()
        )));
    }

    let meta = DatasetMeta {
        name: manifest.name.clone(),
        classes: manifest.classes.clone(),
        channels: manifest.channels.clone(),
        groups: manifest.groups.clone(),
        n_segments: manifest.window_len() / manifest.segment_len,
        segment_len: manifest.segment_len,
    };

    let mut samples = Vec::new();
    for file in &files {
        let rec = load_subject_file(file, &manifest)?;
        let windows = frame_windows(&rec, manifest.window_len(), manifest.step_len())?;
        for w in &windows {
            samples.push(segment(w, manifest.segment_len, manifest.classes.len())?);
        }
    }
    if samples.is_empty() {
        return Err(Error::Data("no windows survived framing".into()));
    }
    Ok((manifest, Dataset { meta, samples }))
}
