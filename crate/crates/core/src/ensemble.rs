//! Monte Carlo ensembles: sample point networks from a posterior, collect
//! their class probabilities over a dataset, and persist the result.

use std::path::Path;

use rayon::prelude::*;

use crate::dataset::FeatureDataset;
use crate::error::{FormatError, ModelError};
use crate::fsutil::{read_bytes, write_atomic};
use crate::rng::substream_rng;
use crate::variational::VariationalPosterior;

pub const MATRIX_MAGIC: &[u8; 4] = b"BPMX";
pub const MATRIX_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 8;
const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleConfig {
    pub sample_count: usize,
    pub master_seed: u64,
    /// Evaluate samples on the rayon pool. Output is identical either way.
    pub parallel: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            sample_count: 1000,
            master_seed: 0,
            parallel: true,
        }
    }
}

/// Class probabilities of `S` sampled networks over `I` images, stored
/// sample-major, then image, then class.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    sample_count: usize,
    image_count: usize,
    class_count: usize,
    master_seed: u64,
    labels: Vec<usize>,
    probs: Vec<f32>,
}

impl PredictionMatrix {
    /// Checks shapes, label range, and that every `(s, i)` row is a
    /// probability distribution.
    pub fn new(
        sample_count: usize,
        image_count: usize,
        class_count: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
        master_seed: u64,
    ) -> Result<Self, ModelError> {
        if sample_count == 0 || class_count == 0 {
            return Err(ModelError::Domain(
                "sample and class counts must be ≥ 1".into(),
            ));
        }
        if labels.len() != image_count {
            return Err(ModelError::Shape {
                expected: image_count,
                actual: labels.len(),
            });
        }
        let cells = sample_count * image_count * class_count;
        if probs.len() != cells {
            return Err(ModelError::Shape {
                expected: cells,
                actual: probs.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(ModelError::Index {
                index: l,
                len: class_count,
            });
        }
        for (r, row) in probs.chunks_exact(class_count).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(ModelError::Domain(format!(
                    "row {r} has an entry outside [0, 1]"
                )));
            }
            let total: f64 = row.iter().map(|&p| f64::from(p)).sum();
            if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(ModelError::Domain(format!("row {r} sums to {total}")));
            }
        }
        Ok(PredictionMatrix {
            sample_count,
            image_count,
            class_count,
            master_seed,
            labels,
            probs,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn image_count(&self) -> usize {
        self.image_count
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    /// Probabilities of every class for `image` under `sample`.
    pub fn row(&self, sample: usize, image: usize) -> &[f32] {
        let start = (sample * self.image_count + image) * self.class_count;
        &self.probs[start..start + self.class_count]
    }

    pub fn prob(&self, sample: usize, image: usize, class: usize) -> f32 {
        self.row(sample, image)[class]
    }

    /// The `[sample]` slice as an `I × C` block.
    pub fn sample_slice(&self, sample: usize) -> &[f32] {
        let len = self.image_count * self.class_count;
        &self.probs[sample * len..(sample + 1) * len]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let too_big = |what: &str, v: usize| {
            FormatError::Document(format!("{what} {v} does not fit the matrix header"))
        };
        let s = u32::try_from(self.sample_count).map_err(|_| too_big("sample count", self.sample_count))?;
        let i = u32::try_from(self.image_count).map_err(|_| too_big("image count", self.image_count))?;
        let c = u32::try_from(self.class_count).map_err(|_| too_big("class count", self.class_count))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.image_count + 4 * self.probs.len());
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        out.extend_from_slice(&s.to_le_bytes());
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&self.master_seed.to_le_bytes());
        for &l in &self.labels {
            out.push(u8::try_from(l).map_err(|_| too_big("label", l))?);
        }
        for p in &self.probs {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() >= 4 && &bytes[..4] != MATRIX_MAGIC {
            return Err(FormatError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Truncated {
                needed: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != MATRIX_VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: MATRIX_VERSION,
            });
        }
        let (s, i, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let cells = s
            .checked_mul(i)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| FormatError::Document("header dimensions overflow".into()))?;
        let needed = cells
            .checked_mul(4)
            .and_then(|v| v.checked_add(HEADER_LEN + i))
            .ok_or_else(|| FormatError::Document("header dimensions overflow".into()))?;
        if bytes.len() < needed {
            return Err(FormatError::Truncated {
                needed,
                found: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(FormatError::Document(format!(
                "{} trailing bytes after matrix body",
                bytes.len() - needed
            )));
        }
        let labels = bytes[HEADER_LEN..HEADER_LEN + i]
            .iter()
            .map(|&b| b as usize)
            .collect();
        let probs = bytes[HEADER_LEN + i..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        PredictionMatrix::new(s, i, c, labels, probs, seed)
            .map_err(|e| FormatError::Document(e.to_string()))
    }
}

pub fn save_matrix(matrix: &PredictionMatrix, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &matrix.to_bytes()?)
}

pub fn load_matrix(path: &Path) -> Result<PredictionMatrix, FormatError> {
    PredictionMatrix::from_bytes(&read_bytes(path)?)
}

/// Probabilities of one sampled network over every image, `I × C`.
fn sample_block(
    posterior: &VariationalPosterior,
    dataset: &FeatureDataset,
    master_seed: u64,
    sample: usize,
) -> Vec<f32> {
    let mut rng = substream_rng(master_seed, sample as u64);
    let net = posterior.sample_point(&mut rng);
    let mut block = Vec::with_capacity(dataset.len() * posterior.architecture.class_count());
    for r in dataset.records() {
        let p = net
            .predict_proba(&r.features)
            .expect("dimension checked by predict_matrix");
        block.extend(p.into_iter().map(|v| v as f32));
    }
    block
}

/// Evaluates `S` posterior samples over every record. Sample `s` is drawn
/// from substream `s` of the master seed, so the result does not depend on
/// evaluation order.
pub fn predict_matrix(
    posterior: &VariationalPosterior,
    dataset: &FeatureDataset,
    config: &EnsembleConfig,
) -> Result<PredictionMatrix, ModelError> {
    let arch = &posterior.architecture;
    if dataset.dim() != arch.input_dim() {
        return Err(ModelError::Shape {
            expected: arch.input_dim(),
            actual: dataset.dim(),
        });
    }
    if config.sample_count == 0 {
        return Err(ModelError::Config("sample count must be ≥ 1".into()));
    }
    let seed = config.master_seed;
    let blocks: Vec<Vec<f32>> = if config.parallel {
        (0..config.sample_count)
            .into_par_iter()
            .map(|s| sample_block(posterior, dataset, seed, s))
            .collect()
    } else {
        (0..config.sample_count)
            .map(|s| sample_block(posterior, dataset, seed, s))
            .collect()
    };
    PredictionMatrix::new(
        config.sample_count,
        dataset.len(),
        arch.class_count(),
        dataset.labels(),
        blocks.concat(),
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureRecord;
    use crate::mlp::MlpArchitecture;
    use crate::variational::PriorSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_matrix(s: usize, i: usize, c: usize, seed: u64) -> PredictionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::new();
        for _ in 0..s * i {
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| (v / total) as f32));
        }
        let labels = (0..i).map(|_| rng.random_range(0..c)).collect();
        PredictionMatrix::new(s, i, c, labels, probs, seed).unwrap()
    }

    fn tiny_data(n: usize, dim: usize) -> FeatureDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let records = (0..n)
            .map(|k| FeatureRecord {
                id: format!("r{k}"),
                label: k % 2,
                features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            })
            .collect();
        FeatureDataset::new(records, dim).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let m = random_matrix(3, 4, 2, 1);
        let back = PredictionMatrix::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn layout_is_sample_major() {
        let m = random_matrix(2, 3, 2, 5);
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"BPMX");
        assert_eq!(bytes.len(), 28 + 3 + 4 * 12);
        // entry (s=1, i=2, c=0) sits at flat index (1*3 + 2)*2 = 10
        let at = 28 + 3 + 4 * 10;
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        assert_eq!(v, m.prob(1, 2, 0));
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = random_matrix(3, 4, 2, 1).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            PredictionMatrix::from_bytes(&bytes),
            Err(FormatError::BadMagic)
        ));
    }

    #[test]
    fn truncated_body() {
        let bytes = random_matrix(3, 4, 2, 1).to_bytes().unwrap();
        assert!(matches!(
            PredictionMatrix::from_bytes(&bytes[..bytes.len() - 4]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(
            PredictionMatrix::from_bytes(&bytes[..10]),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = random_matrix(1, 1, 2, 1).to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            PredictionMatrix::from_bytes(&bytes),
            Err(FormatError::Version {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn constructor_rejects_bad_rows_and_labels() {
        assert!(PredictionMatrix::new(1, 1, 2, vec![0], vec![0.5, 0.4], 0).is_err());
        assert!(PredictionMatrix::new(1, 1, 2, vec![2], vec![0.5, 0.5], 0).is_err());
        assert!(PredictionMatrix::new(1, 1, 2, vec![0], vec![1.5, -0.5], 0).is_err());
        assert!(PredictionMatrix::new(1, 2, 2, vec![0], vec![0.5, 0.5], 0).is_err());
    }

    #[test]
    fn degenerate_posterior_gives_identical_slices() {
        let arch = MlpArchitecture::new(vec![3, 5, 2]).unwrap();
        let mut post = VariationalPosterior::initialize(&arch, PriorSpec::default(), 4);
        for l in &mut post.layers {
            l.rho_w.fill(-60.0);
            l.rho_b.fill(-60.0);
        }
        let data = tiny_data(6, 3);
        let cfg = EnsembleConfig {
            sample_count: 5,
            master_seed: 2,
            parallel: false,
        };
        let m = predict_matrix(&post, &data, &cfg).unwrap();
        for s in 1..5 {
            assert_eq!(m.sample_slice(s), m.sample_slice(0));
        }
    }

    #[test]
    fn single_sample_matches_network() {
        let arch = MlpArchitecture::new(vec![3, 4, 2]).unwrap();
        let post = VariationalPosterior::initialize(&arch, PriorSpec::default(), 4);
        let data = tiny_data(5, 3);
        let cfg = EnsembleConfig {
            sample_count: 1,
            master_seed: 17,
            parallel: false,
        };
        let m = predict_matrix(&post, &data, &cfg).unwrap();
        let net = post.sample_point(&mut substream_rng(17, 0));
        for (i, r) in data.records().iter().enumerate() {
            let p = net.predict_proba(&r.features).unwrap();
            for c in 0..2 {
                assert_eq!(m.prob(0, i, c), p[c] as f32);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let arch = MlpArchitecture::new(vec![4, 6, 3]).unwrap();
        let post = VariationalPosterior::initialize(&arch, PriorSpec::default(), 8);
        let data = tiny_data(7, 4);
        let seq = EnsembleConfig {
            sample_count: 64,
            master_seed: 5,
            parallel: false,
        };
        let par = EnsembleConfig {
            parallel: true,
            ..seq
        };
        let a = predict_matrix(&post, &data, &seq).unwrap();
        let b = predict_matrix(&post, &data, &par).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn dimension_mismatch() {
        let arch = MlpArchitecture::new(vec![4, 2]).unwrap();
        let post = VariationalPosterior::initialize(&arch, PriorSpec::default(), 8);
        let data = tiny_data(3, 3);
        assert!(matches!(
            predict_matrix(&post, &data, &EnsembleConfig::default()),
            Err(ModelError::Shape { .. })
        ));
    }
}
