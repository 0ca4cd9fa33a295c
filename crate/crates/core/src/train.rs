//! Minibatch training loops: stochastic variational inference over a
//! [`VariationalPosterior`] and plain cross-entropy training of a
//! [`PointNetwork`].

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::FeatureDataset;
use crate::error::ModelError;
use crate::mlp::{Linear, MlpArchitecture, PointNetwork};
use crate::rng::substream_rng;
use crate::variational::{elbo_step, Example, PriorSpec, TrainMetadata, VariationalPosterior};

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Svi,
    Map,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate per layer, or a single rate for all layers.
    pub learning_rates: Vec<f64>,
    pub lr_decay_per_epoch: f64,
    pub elbo_mc_samples: usize,
    pub seed: u64,
    pub adam: AdamParams,
    pub prior: PriorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Svi,
            epochs: 10,
            batch_size: 8,
            learning_rates: vec![0.0001, 0.001, 0.002],
            lr_decay_per_epoch: 0.95,
            elbo_mc_samples: 1,
            seed: 0,
            adam: AdamParams::default(),
            prior: PriorSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, arch: &MlpArchitecture) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be ≥ 1".into()));
        }
        if self.elbo_mc_samples == 0 {
            return Err(ModelError::Config("elbo_mc_samples must be ≥ 1".into()));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(ModelError::Config(format!(
                "learning-rate decay must be in (0, 1], got {}",
                self.lr_decay_per_epoch
            )));
        }
        let n = self.learning_rates.len();
        if n != 1 && n != arch.layer_count() {
            return Err(ModelError::Config(format!(
                "{n} learning rates for {} layers",
                arch.layer_count()
            )));
        }
        if self.learning_rates.iter().any(|lr| !lr.is_finite() || *lr <= 0.0) {
            return Err(ModelError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate of `layer` during `epoch` (both zero-based).
    pub fn learning_rate(&self, layer: usize, epoch: usize) -> f64 {
        let base = if self.learning_rates.len() == 1 {
            self.learning_rates[0]
        } else {
            self.learning_rates[layer]
        };
        base * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

/// Adaptive moment estimation constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter buffer.
#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, p: AdamParams, t: i32) {
        let c1 = 1.0 - p.beta1.powi(t);
        let c2 = 1.0 - p.beta2.powi(t);
        for ((w, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = p.beta1 * *m + (1.0 - p.beta1) * g;
            *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + p.eps);
        }
    }
}

/// Trained posterior together with its per-epoch average step loss.
#[derive(Debug, Clone)]
pub struct SviRun {
    pub posterior: VariationalPosterior,
    pub epoch_losses: Vec<f64>,
}

/// Trained point network together with its per-epoch average batch loss.
#[derive(Debug, Clone)]
pub struct MapRun {
    pub network: PointNetwork,
    pub epoch_losses: Vec<f64>,
}

fn check_inputs(
    dataset: &FeatureDataset,
    arch: &MlpArchitecture,
    config: &TrainConfig,
) -> Result<(), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if dataset.dim() != arch.input_dim() {
        return Err(ModelError::Shape {
            expected: arch.input_dim(),
            actual: dataset.dim(),
        });
    }
    if dataset.class_count() > arch.class_count() {
        return Err(ModelError::Architecture(format!(
            "dataset has {} classes, architecture outputs {}",
            dataset.class_count(),
            arch.class_count()
        )));
    }
    config.validate(arch)
}

/// Per-epoch minibatches of record indices, shuffled from `rng`.
fn epoch_batches<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub fn train_svi(
    dataset: &FeatureDataset,
    arch: &MlpArchitecture,
    config: &TrainConfig,
) -> Result<VariationalPosterior, ModelError> {
    fit_svi(dataset, arch, config).map(|run| run.posterior)
}

/// Stochastic variational inference on the negative ELBO.
///
/// Each epoch visits a fresh shuffle of the dataset in minibatches; every
/// step takes one Adam update of all `mu` and `rho` with the owning layer's
/// decayed learning rate. Shuffling and reparameterization noise come from
/// separate substreams of `config.seed`, so the run is fully determined by
/// its inputs.
pub fn fit_svi(
    dataset: &FeatureDataset,
    arch: &MlpArchitecture,
    config: &TrainConfig,
) -> Result<SviRun, ModelError> {
    if config.mode != TrainMode::Svi {
        return Err(ModelError::Config("train_svi needs mode svi".into()));
    }
    check_inputs(dataset, arch, config)?;
    let mut posterior = VariationalPosterior::initialize(arch, config.prior, config.seed);
    let mut shuffle_rng = substream_rng(config.seed, SHUFFLE_STREAM);
    let mut noise_rng = substream_rng(config.seed, NOISE_STREAM);

    let mut moments: Vec<[Moments; 4]> = posterior
        .layers
        .iter()
        .map(|l| {
            [
                Moments::new(l.mu_w.len()),
                Moments::new(l.rho_w.len()),
                Moments::new(l.mu_b.len()),
                Moments::new(l.rho_b.len()),
            ]
        })
        .collect();

    let n = dataset.len();
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(n, config.batch_size, &mut shuffle_rng);
        for idx in &batches {
            let batch: Vec<Example<'_>> = idx
                .iter()
                .map(|&i| {
                    let r = dataset.record(i);
                    (r.features.as_slice(), r.label)
                })
                .collect();
            let (loss, grads) = elbo_step(
                &posterior,
                &batch,
                n,
                &mut noise_rng,
                config.elbo_mc_samples,
                step,
            )?;
            step += 1;
            epoch_loss += loss;
            let t = step as i32;
            for (k, ((layer, g), mom)) in posterior
                .layers
                .iter_mut()
                .zip(&grads)
                .zip(&mut moments)
                .enumerate()
            {
                let lr = config.learning_rate(k, epoch);
                mom[0].update(&mut layer.mu_w, &g.mu_w, lr, config.adam, t);
                mom[1].update(&mut layer.rho_w, &g.rho_w, lr, config.adam, t);
                mom[2].update(&mut layer.mu_b, &g.mu_b, lr, config.adam, t);
                mom[3].update(&mut layer.rho_b, &g.rho_b, lr, config.adam, t);
            }
        }
        epoch_losses.push(epoch_loss / batches.len() as f64);
    }
    posterior.metadata = TrainMetadata {
        epochs: config.epochs,
        final_loss: epoch_losses.last().copied(),
    };
    Ok(SviRun {
        posterior,
        epoch_losses,
    })
}

pub fn train_map(
    dataset: &FeatureDataset,
    arch: &MlpArchitecture,
    config: &TrainConfig,
) -> Result<PointNetwork, ModelError> {
    fit_map(dataset, arch, config).map(|run| run.network)
}

/// Deterministic cross-entropy training of a single weight assignment.
///
/// Starts from the means of the seeded variational initialization and uses
/// the same batching, optimizer and schedule as [`fit_svi`]. The batch loss
/// is the mean negative log-likelihood; no prior term is applied.
pub fn fit_map(
    dataset: &FeatureDataset,
    arch: &MlpArchitecture,
    config: &TrainConfig,
) -> Result<MapRun, ModelError> {
    if config.mode != TrainMode::Map {
        return Err(ModelError::Config("train_map needs mode map".into()));
    }
    check_inputs(dataset, arch, config)?;
    let mut network =
        VariationalPosterior::initialize(arch, config.prior, config.seed).mean_network();
    let mut shuffle_rng = substream_rng(config.seed, SHUFFLE_STREAM);
    let mut moments: Vec<[Moments; 2]> = network
        .layers
        .iter()
        .map(|l| [Moments::new(l.weights.len()), Moments::new(l.bias.len())])
        .collect();

    let n = dataset.len();
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(n, config.batch_size, &mut shuffle_rng);
        for idx in &batches {
            let mut grads: Vec<Linear> = arch
                .layer_shapes()
                .map(|(i, o)| Linear::zeros(i, o))
                .collect();
            let mut loss = 0.0;
            for &i in idx {
                let r = dataset.record(i);
                loss += network.nll_backward(&r.features, r.label, &mut grads)?;
            }
            let scale = 1.0 / idx.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { step });
            }
            for g in &mut grads {
                g.weights.iter_mut().for_each(|v| *v *= scale);
                g.bias.iter_mut().for_each(|v| *v *= scale);
            }
            step += 1;
            epoch_loss += loss;
            let t = step as i32;
            for (k, ((layer, g), mom)) in network
                .layers
                .iter_mut()
                .zip(&grads)
                .zip(&mut moments)
                .enumerate()
            {
                let lr = config.learning_rate(k, epoch);
                mom[0].update(&mut layer.weights, &g.weights, lr, config.adam, t);
                mom[1].update(&mut layer.bias, &g.bias, lr, config.adam, t);
            }
        }
        epoch_losses.push(epoch_loss / batches.len() as f64);
    }
    Ok(MapRun {
        network,
        epoch_losses,
    })
}
