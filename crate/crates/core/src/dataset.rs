//! Labeled feature vectors: CSV persistence, stratified train/validation
//! splits and a synthetic two-Gaussian generator with a closed-form optimal
//! accuracy.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FormatError, ModelError};
use crate::fsutil::{fmt_f64, read_to_string, write_atomic};
use crate::rng::substream_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub label: usize,
    pub features: Vec<f64>,
}

/// An ordered pool of records sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    records: Vec<FeatureRecord>,
    dim: usize,
    class_count: usize,
}

impl FeatureDataset {
    /// Validates uniform dimension, finite values and unique ids. The class
    /// count is one past the largest label.
    pub fn new(records: Vec<FeatureRecord>, dim: usize) -> Result<Self, ModelError> {
        let class_count = records.iter().map(|r| r.label + 1).max().unwrap_or(0);
        Self::with_class_count(records, dim, class_count)
    }

    pub fn with_class_count(
        records: Vec<FeatureRecord>,
        dim: usize,
        class_count: usize,
    ) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::Domain("feature dimension must be ≥ 1".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.features.len() != dim {
                return Err(ModelError::Shape {
                    expected: dim,
                    actual: r.features.len(),
                });
            }
            if r.label >= class_count {
                return Err(ModelError::Index {
                    index: r.label,
                    len: class_count,
                });
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Domain(format!("record `{}` has a non-finite feature", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(ModelError::Domain(format!("duplicate id `{}`", r.id)));
            }
        }
        Ok(FeatureDataset {
            records,
            dim,
            class_count,
        })
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &FeatureRecord {
        &self.records[index]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_count];
        for r in &self.records {
            sizes[r.label] += 1;
        }
        sizes
    }

    /// The records at `indices`, in the given order, keeping the class count.
    pub fn subset(&self, indices: &[usize]) -> FeatureDataset {
        FeatureDataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            dim: self.dim,
            class_count: self.class_count,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label");
        for j in 0..self.dim {
            write!(out, ",f{j}").unwrap();
        }
        out.push('\n');
        for r in &self.records {
            write!(out, "{},{}", r.id, r.label).unwrap();
            for v in &r.features {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the feature CSV. Line numbers in errors are 1-based and count
    /// the header.
    pub fn from_csv(text: &str) -> Result<Self, FormatError> {
        let mut lines = text.split('\n').enumerate();
        let header = lines
            .next()
            .map(|(_, l)| l.trim_end_matches('\r'))
            .ok_or(FormatError::MissingHeader)?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
            return Err(FormatError::MissingHeader);
        }
        let dim = cols.len() - 2;
        if cols[2..]
            .iter()
            .enumerate()
            .any(|(j, c)| *c != format!("f{j}"))
        {
            return Err(FormatError::MissingHeader);
        }

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        let mut max_label = 0;
        for (k, raw) in lines {
            let line = k + 1;
            let row = raw.trim_end_matches('\r');
            if row.is_empty() {
                continue;
            }
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(FormatError::RaggedRow {
                    line,
                    expected: dim + 2,
                    found: fields.len(),
                });
            }
            let id = fields[0];
            if id.is_empty() {
                return Err(FormatError::InvalidRecord {
                    line,
                    message: "empty id".into(),
                });
            }
            let label: usize = fields[1].parse().map_err(|_| FormatError::NonNumeric {
                line,
                field: fields[1].to_string(),
            })?;
            let features = fields[2..]
                .iter()
                .map(|f| match f.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(_) => Err(FormatError::InvalidRecord {
                        line,
                        message: format!("non-finite feature `{f}`"),
                    }),
                    Err(_) => Err(FormatError::NonNumeric {
                        line,
                        field: f.to_string(),
                    }),
                })
                .collect::<Result<Vec<f64>, _>>()?;
            if !seen.insert(id.to_string()) {
                return Err(FormatError::DuplicateId {
                    line,
                    id: id.to_string(),
                });
            }
            max_label = max_label.max(label);
            records.push(FeatureRecord {
                id: id.to_string(),
                label,
                features,
            });
        }
        let class_count = if records.is_empty() { 0 } else { max_label + 1 };
        Ok(FeatureDataset {
            records,
            dim,
            class_count,
        })
    }
}

pub fn read_features(path: &Path) -> Result<FeatureDataset, FormatError> {
    FeatureDataset::from_csv(&read_to_string(path)?)
}

pub fn write_features(dataset: &FeatureDataset, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, dataset.to_csv().as_bytes())
}

/// One train/validation partition, as record indices in dataset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub k: usize,
    pub ratio: f64,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Validation count per class: each class rounds its exact share, then the
/// classes with the largest rounding residuals absorb the difference to the
/// rounded overall validation size. Every class keeps at least one record
/// on each side.
pub fn validation_allocation(class_sizes: &[usize], ratio: f64) -> Vec<usize> {
    let val_frac = 1.0 - ratio;
    let total: usize = class_sizes.iter().sum();
    let target = (total as f64 * val_frac).round() as i64;
    let exact: Vec<f64> = class_sizes.iter().map(|&n| n as f64 * val_frac).collect();
    let clamp = |v: i64, n: usize| v.clamp(1, n as i64 - 1);
    let mut alloc: Vec<i64> = exact
        .iter()
        .zip(class_sizes)
        .map(|(e, &n)| clamp(e.round() as i64, n))
        .collect();
    let mut diff = target - alloc.iter().sum::<i64>();
    while diff != 0 {
        let step = diff.signum();
        // residual exact - alloc: grow where it's largest, shrink where smallest
        let candidate = (0..alloc.len())
            .filter(|&c| clamp(alloc[c] + step, class_sizes[c]) == alloc[c] + step)
            .max_by(|&a, &b| {
                let ra = (exact[a] - alloc[a] as f64) * step as f64;
                let rb = (exact[b] - alloc[b] as f64) * step as f64;
                ra.partial_cmp(&rb).unwrap().then(b.cmp(&a))
            });
        match candidate {
            Some(c) => {
                alloc[c] += step;
                diff -= step;
            }
            None => break,
        }
    }
    alloc.into_iter().map(|v| v as usize).collect()
}

/// `k` independently shuffled stratified splits with `ratio` of each class
/// in training. Fold `j` shuffles with substream `j` of `seed`.
pub fn stratified_splits(
    dataset: &FeatureDataset,
    ratio: f64,
    k: usize,
    seed: u64,
) -> Result<SplitPlan, ModelError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ModelError::Config(format!("ratio must be in (0, 1), got {ratio}")));
    }
    if k == 0 {
        return Err(ModelError::Config("need at least one split".into()));
    }
    let sizes = dataset.class_sizes();
    if let Some((c, n)) = sizes.iter().enumerate().find(|(_, &n)| n < 2) {
        return Err(ModelError::Domain(format!(
            "class {c} has {n} records; stratified splitting needs ≥ 2"
        )));
    }
    let alloc = validation_allocation(&sizes, ratio);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
    for (i, r) in dataset.records().iter().enumerate() {
        by_class[r.label].push(i);
    }
    let folds = (0..k)
        .map(|j| {
            let mut rng = substream_rng(seed, j as u64);
            let mut in_val = vec![false; dataset.len()];
            for (members, &n_val) in by_class.iter().zip(&alloc) {
                let mut shuffled = members.clone();
                shuffled.shuffle(&mut rng);
                for &i in &shuffled[..n_val] {
                    in_val[i] = true;
                }
            }
            let (validation, train): (Vec<usize>, Vec<usize>) =
                (0..dataset.len()).partition(|&i| in_val[i]);
            Fold { train, validation }
        })
        .collect();
    Ok(SplitPlan {
        k,
        ratio,
        seed,
        folds,
    })
}

/// Two isotropic Gaussian classes with means `±(separation·noise_std/2)·u`,
/// `u` the unit diagonal direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub per_class_count: usize,
    pub dim: usize,
    /// Distance between class means in units of `noise_std`.
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.per_class_count == 0 || self.dim == 0 {
            return Err(ModelError::Config("per-class count and dim must be ≥ 1".into()));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(ModelError::Config("separation must be finite and ≥ 0".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std <= 0.0 {
            return Err(ModelError::Config("noise std must be positive".into()));
        }
        Ok(())
    }
}

pub fn synth_generate(config: &SynthConfig) -> Result<FeatureDataset, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let offset = config.separation * config.noise_std / 2.0 / (config.dim as f64).sqrt();
    let mut records = Vec::with_capacity(2 * config.per_class_count);
    for label in 0..2usize {
        let sign = if label == 0 { -1.0 } else { 1.0 };
        for k in 0..config.per_class_count {
            let features = (0..config.dim)
                .map(|_| sign * offset + config.noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            records.push(FeatureRecord {
                id: format!("c{label}-{k}"),
                label,
                features,
            });
        }
    }
    FeatureDataset::with_class_count(records, config.dim, 2)
}

/// Optimal accuracy `Φ(separation/2)` for the generator's two classes.
pub fn bayes_accuracy(config: &SynthConfig) -> f64 {
    standard_normal_cdf(config.separation / 2.0)
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}
