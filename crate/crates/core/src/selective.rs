//! Selective classification over a [`PredictionMatrix`].
//!
//! An image is covered under policy `(N, P)` when at least `⌈N·S⌉` of the
//! `S` sampled networks give some class probability `≥ P`; otherwise it is
//! skipped. Accuracy is measured on covered images only.

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ensemble::PredictionMatrix;
use crate::error::{FormatError, ModelError};

/// Values of the varied knob in the default sweeps, in report order.
pub const DEFAULT_GRID: [f64; 6] = [0.95, 0.85, 0.75, 0.55, 0.35, 0.2];
/// Value of the knob held fixed in the default sweeps.
pub const DEFAULT_FIXED: f64 = 0.5;

/// Relative slack when deciding that `N·S` is an exact integer.
const INTEGER_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidencePolicy {
    /// Fraction of sampled networks that must agree.
    pub n_fraction: f64,
    /// Minimum class probability each agreeing network must assign.
    pub p_min: f64,
}

impl ConfidencePolicy {
    pub fn new(n_fraction: f64, p_min: f64) -> Result<Self, ModelError> {
        check_unit("N", n_fraction)?;
        check_unit("P", p_min)?;
        Ok(ConfidencePolicy { n_fraction, p_min })
    }

    /// Policy that covers every image and predicts like [`forced_predict`].
    pub fn forced() -> Self {
        ConfidencePolicy {
            n_fraction: 0.0,
            p_min: 0.0,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<(), ModelError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(ModelError::Domain(format!("{name} must be in [0, 1], got {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Covered(usize),
    Skipped,
}

/// Minimum number of agreeing networks, `⌈N·S⌉`.
///
/// Products within a relative `1e-9` of an integer are treated as that
/// integer so that e.g. `0.35 · 20` gives 7, not 8.
pub fn required_count(n_fraction: f64, sample_count: usize) -> Result<usize, ModelError> {
    check_unit("N", n_fraction)?;
    if sample_count == 0 {
        return Err(ModelError::Domain("sample count must be ≥ 1".into()));
    }
    let x = n_fraction * sample_count as f64;
    let nearest = x.round();
    let count = if (x - nearest).abs() <= INTEGER_SLACK * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    Ok(count as usize)
}

fn check_image(m: &PredictionMatrix, image: usize) -> Result<(), ModelError> {
    if image >= m.image_count() {
        return Err(ModelError::Index {
            index: image,
            len: m.image_count(),
        });
    }
    Ok(())
}

/// Per-class sums of probabilities over all samples. The `f32` entries are
/// exactly representable in `f64`, so these sums are exact for any
/// realistic sample count and ties compare exactly.
fn class_sums(m: &PredictionMatrix, image: usize) -> Vec<f64> {
    let mut sums = vec![0.0; m.class_count()];
    for s in 0..m.sample_count() {
        for (acc, &p) in sums.iter_mut().zip(m.row(s, image)) {
            *acc += f64::from(p);
        }
    }
    sums
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (c, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = c;
        }
    }
    best
}

/// Class with the highest mean probability across samples.
pub fn forced_predict(m: &PredictionMatrix, image: usize) -> Result<usize, ModelError> {
    check_image(m, image)?;
    Ok(argmax(&class_sums(m, image)))
}

/// Number of samples assigning each class a probability of at least `p_min`.
///
/// Probabilities are held at `f32` precision, so the threshold is compared
/// at that precision too.
fn qualifying_counts(m: &PredictionMatrix, image: usize, p_min: f64) -> Vec<usize> {
    let threshold = p_min as f32;
    let mut counts = vec![0; m.class_count()];
    for s in 0..m.sample_count() {
        for (n, &p) in counts.iter_mut().zip(m.row(s, image)) {
            if p >= threshold {
                *n += 1;
            }
        }
    }
    counts
}

/// Applies `policy` to one image.
///
/// When several classes reach the required count (only possible for
/// `P ≤ 0.5` in the binary case), the one with the most qualifying samples
/// wins, then the higher mean probability, then the lower index.
pub fn classify_with_policy(
    m: &PredictionMatrix,
    image: usize,
    policy: ConfidencePolicy,
) -> Result<Decision, ModelError> {
    check_image(m, image)?;
    let required = required_count(policy.n_fraction, m.sample_count())?;
    Ok(decide(m, image, policy.p_min, required))
}

fn decide(m: &PredictionMatrix, image: usize, p_min: f64, required: usize) -> Decision {
    let counts = qualifying_counts(m, image, p_min);
    let passing: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] >= required).collect();
    match passing.as_slice() {
        [] => Decision::Skipped,
        [only] => Decision::Covered(*only),
        _ => {
            let top = passing.iter().map(|&c| counts[c]).max().unwrap();
            let leaders: Vec<usize> = passing.into_iter().filter(|&c| counts[c] == top).collect();
            if leaders.len() == 1 {
                return Decision::Covered(leaders[0]);
            }
            let sums = class_sums(m, image);
            let mut best = leaders[0];
            for &c in &leaders[1..] {
                if sums[c] > sums[best] {
                    best = c;
                }
            }
            Decision::Covered(best)
        }
    }
}

/// Decisions for every image under `policy`.
pub fn decisions(m: &PredictionMatrix, policy: ConfidencePolicy) -> Result<Vec<Decision>, ModelError> {
    let required = required_count(policy.n_fraction, m.sample_count())?;
    Ok((0..m.image_count())
        .map(|i| decide(m, i, policy.p_min, required))
        .collect())
}

/// `(accuracy, coverage, N, P)` with the raw counts behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalTuple {
    pub n: f64,
    pub p: f64,
    pub total: usize,
    pub skipped: usize,
    pub covered: usize,
    pub correct: usize,
    pub coverage: f64,
    /// `None` when nothing is covered.
    pub accuracy: Option<f64>,
}

pub fn evaluate(m: &PredictionMatrix, policy: ConfidencePolicy) -> Result<EvalTuple, ModelError> {
    let decided = decisions(m, policy)?;
    let mut covered = 0;
    let mut correct = 0;
    for (d, &label) in decided.iter().zip(m.labels()) {
        if let Decision::Covered(c) = d {
            covered += 1;
            if *c == label {
                correct += 1;
            }
        }
    }
    let total = m.image_count();
    Ok(EvalTuple {
        n: policy.n_fraction,
        p: policy.p_min,
        total,
        skipped: total - covered,
        covered,
        correct,
        coverage: if total == 0 { 0.0 } else { covered as f64 / total as f64 },
        accuracy: (covered > 0).then(|| correct as f64 / covered as f64),
    })
}

/// Accuracy of forced prediction over all images.
pub fn forced_accuracy(m: &PredictionMatrix) -> Result<Option<f64>, ModelError> {
    Ok(evaluate(m, ConfidencePolicy::forced())?.accuracy)
}

/// Every `(n, p)` of the cross product, `n` varying slowest.
pub fn sweep(
    m: &PredictionMatrix,
    n_grid: &[f64],
    p_grid: &[f64],
) -> Result<Vec<EvalTuple>, ModelError> {
    if n_grid.is_empty() || p_grid.is_empty() {
        return Err(ModelError::Config("sweep grids must be non-empty".into()));
    }
    let policies = n_grid
        .iter()
        .flat_map(|&n| p_grid.iter().map(move |&p| ConfidencePolicy::new(n, p)))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_all(m, &policies)
}

pub fn evaluate_all(
    m: &PredictionMatrix,
    policies: &[ConfidencePolicy],
) -> Result<Vec<EvalTuple>, ModelError> {
    policies.iter().map(|&p| evaluate(m, p)).collect()
}

/// The twelve reference rows: `N` varied at `P = 0.5`, then `P` varied at
/// `N = 0.5`.
pub fn default_policies() -> Vec<ConfidencePolicy> {
    let vary_n = DEFAULT_GRID.iter().map(|&n| ConfidencePolicy {
        n_fraction: n,
        p_min: DEFAULT_FIXED,
    });
    let vary_p = DEFAULT_GRID.iter().map(|&p| ConfidencePolicy {
        n_fraction: DEFAULT_FIXED,
        p_min: p,
    });
    vary_n.chain(vary_p).collect()
}

/// Mean forced-prediction accuracy over `repeats` uniform random subsets of
/// `subset_size` images, drawn without replacement.
pub fn random_baseline(
    m: &PredictionMatrix,
    subset_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    let total = m.image_count();
    if subset_size == 0 || subset_size > total {
        return Err(ModelError::Domain(format!(
            "subset size {subset_size} outside 1..={total}"
        )));
    }
    if repeats == 0 {
        return Err(ModelError::Domain("repeats must be ≥ 1".into()));
    }
    let hits: Vec<bool> = (0..total)
        .map(|i| forced_predict(m, i).map(|c| c == m.labels()[i]))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc_sum = 0.0;
    for _ in 0..repeats {
        let correct = sample_indices(&mut rng, total, subset_size)
            .into_iter()
            .filter(|&i| hits[i])
            .count();
        acc_sum += correct as f64 / subset_size as f64;
    }
    Ok(acc_sum / repeats as f64)
}

/// Cross-split summary at one `(n, p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateTuple {
    pub n: f64,
    pub p: f64,
    /// `None` when no split has a defined accuracy.
    pub mean_accuracy: Option<f64>,
    /// Population standard deviation over splits with defined accuracy.
    pub std_accuracy: Option<f64>,
    pub mean_coverage: f64,
    pub splits: usize,
}

pub fn aggregate_splits(tuples: &[EvalTuple]) -> Result<AggregateTuple, ModelError> {
    let first = tuples
        .first()
        .ok_or_else(|| ModelError::Config("need at least one split".into()))?;
    if let Some(t) = tuples.iter().find(|t| t.n != first.n || t.p != first.p) {
        return Err(ModelError::Config(format!(
            "mixed policies: ({}, {}) vs ({}, {})",
            first.n, first.p, t.n, t.p
        )));
    }
    let accs: Vec<f64> = tuples.iter().filter_map(|t| t.accuracy).collect();
    let (mean_accuracy, std_accuracy) = match mean_std(&accs) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    };
    Ok(AggregateTuple {
        n: first.n,
        p: first.p,
        mean_accuracy,
        std_accuracy,
        mean_coverage: tuples.iter().map(|t| t.coverage).sum::<f64>() / tuples.len() as f64,
        splits: tuples.len(),
    })
}

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    // summation rounding would otherwise leave a ~1e-16 spread
    if values.iter().all(|v| *v == values[0]) {
        return Some((values[0], 0.0));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// One line of a sweep table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub tuple: EvalTuple,
    pub baseline_accuracy: Option<f64>,
}

/// Sweep rows with the random baseline drawn at each row's covered count.
/// Row `r` uses baseline seed substream `r` of `seed`.
pub fn sweep_with_baseline(
    m: &PredictionMatrix,
    policies: &[ConfidencePolicy],
    baseline_repeats: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, ModelError> {
    evaluate_all(m, policies)?
        .into_iter()
        .enumerate()
        .map(|(r, tuple)| {
            let baseline_accuracy = if tuple.covered == 0 {
                None
            } else {
                let row_seed = crate::rng::derive_substream(seed, r as u64);
                Some(random_baseline(m, tuple.covered, baseline_repeats, row_seed)?)
            };
            Ok(SweepRow {
                tuple,
                baseline_accuracy,
            })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "n,p,total,skipped,covered,coverage,accuracy,baseline_accuracy";

/// `v` rounded to `digits` significant digits, trailing zeros removed.
/// Very small or large magnitudes switch to exponent notation.
pub fn fmt_sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    let exp = v.abs().log10().floor() as i32;
    if exp < -5 || exp >= digits as i32 {
        return format!("{v:.prec$e}", prec = digits - 1);
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn fmt_sig6(v: f64) -> String {
    fmt_sig(v, 6)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_sig6).unwrap_or_else(|| "NA".into())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let t = &r.tuple;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_sig6(t.n),
            fmt_sig6(t.p),
            t.total,
            t.skipped,
            t.covered,
            fmt_sig6(t.coverage),
            fmt_opt(t.accuracy),
            fmt_opt(r.baseline_accuracy)
        )
        .unwrap();
    }
    out
}

/// Parses a sweep table. `correct` is reconstructed from the rounded
/// accuracy and may be off for large tables; everything else is as written.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>, FormatError> {
    let mut lines = text.split('\n').enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == SWEEP_HEADER => {}
        _ => return Err(FormatError::MissingHeader),
    }
    let mut rows = Vec::new();
    for (k, raw) in lines {
        let line = k + 1;
        let row = raw.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 8 {
            return Err(FormatError::RaggedRow {
                line,
                expected: 8,
                found: f.len(),
            });
        }
        let real = |s: &str| {
            s.parse::<f64>().map_err(|_| FormatError::NonNumeric {
                line,
                field: s.to_string(),
            })
        };
        let int = |s: &str| {
            s.parse::<usize>().map_err(|_| FormatError::NonNumeric {
                line,
                field: s.to_string(),
            })
        };
        let opt = |s: &str| if s == "NA" { Ok(None) } else { real(s).map(Some) };
        let (total, skipped, covered) = (int(f[2])?, int(f[3])?, int(f[4])?);
        if covered + skipped != total {
            return Err(FormatError::InvalidRecord {
                line,
                message: "covered + skipped != total".into(),
            });
        }
        let accuracy = opt(f[6])?;
        rows.push(SweepRow {
            tuple: EvalTuple {
                n: real(f[0])?,
                p: real(f[1])?,
                total,
                skipped,
                covered,
                correct: accuracy.map_or(0, |a| (a * covered as f64).round() as usize),
                coverage: real(f[5])?,
                accuracy,
            },
            baseline_accuracy: opt(f[7])?,
        });
    }
    Ok(rows)
}
