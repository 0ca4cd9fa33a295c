//! Mean-field Gaussian posterior over the head network's parameters.
//!
//! Every weight and bias carries an independent `N(mu, softplus(rho)^2)`.
//! Parameters are always visited in the same flat order: layer by layer,
//! weights row-major, then biases. Noise vectors and samples follow it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::ModelError;
use crate::mlp::{sigmoid, softplus, softplus_inv, Linear, MlpArchitecture, PointNetwork};

/// Standard deviation of the initial variational means.
pub const INIT_MU_STD: f64 = 0.1;
/// Initial variational standard deviation of every parameter.
pub const INIT_SIGMA: f64 = 0.1;

/// Gaussian prior shared by every parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub mean: f64,
    pub std: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl PriorSpec {
    pub fn new(mean: f64, std: f64) -> Result<Self, ModelError> {
        if !std.is_finite() || std <= 0.0 || !mean.is_finite() {
            return Err(ModelError::Domain(format!(
                "prior needs finite mean and positive std, got N({mean}, {std})"
            )));
        }
        Ok(PriorSpec { mean, std })
    }
}

/// `KL(N(mu, sigma^2) || prior)` in closed form.
pub fn kl_to_prior(mu: f64, sigma: f64, prior: PriorSpec) -> Result<f64, ModelError> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(ModelError::Domain(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if prior.std.is_nan() || prior.std <= 0.0 {
        return Err(ModelError::Domain(format!(
            "prior std must be positive, got {}",
            prior.std
        )));
    }
    Ok(kl_unchecked(mu, sigma, prior))
}

fn kl_unchecked(mu: f64, sigma: f64, prior: PriorSpec) -> f64 {
    let var_p = prior.std * prior.std;
    let diff = mu - prior.mean;
    (prior.std / sigma).ln() + (sigma * sigma + diff * diff) / (2.0 * var_p) - 0.5
}

/// Partial derivatives of the KL with respect to `mu` and `sigma`.
fn kl_grad(mu: f64, sigma: f64, prior: PriorSpec) -> (f64, f64) {
    let var_p = prior.std * prior.std;
    ((mu - prior.mean) / var_p, -1.0 / sigma + sigma / var_p)
}

/// Variational parameters of one affine layer. Matrices are row-major
/// `outputs × inputs`; `rho_*` are pre-softplus scales.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLinear {
    pub inputs: usize,
    pub outputs: usize,
    pub mu_w: Vec<f64>,
    pub rho_w: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub rho_b: Vec<f64>,
}

impl VariationalLinear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        VariationalLinear {
            inputs,
            outputs,
            mu_w: vec![0.0; inputs * outputs],
            rho_w: vec![0.0; inputs * outputs],
            mu_b: vec![0.0; outputs],
            rho_b: vec![0.0; outputs],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.mu_w.len() + self.mu_b.len()
    }

    fn check_shape(&self) -> Result<(), ModelError> {
        let n = self.inputs * self.outputs;
        for (len, want) in [
            (self.mu_w.len(), n),
            (self.rho_w.len(), n),
            (self.mu_b.len(), self.outputs),
            (self.rho_b.len(), self.outputs),
        ] {
            if len != want {
                return Err(ModelError::Shape {
                    expected: want,
                    actual: len,
                });
            }
        }
        Ok(())
    }

    /// `(mu, rho)` pairs in flat order.
    fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.mu_w
            .iter()
            .zip(&self.rho_w)
            .chain(self.mu_b.iter().zip(&self.rho_b))
            .map(|(m, r)| (*m, *r))
    }
}

/// Training provenance stored alongside the variational parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainMetadata {
    pub epochs: usize,
    /// Average per-step loss over the final epoch; `None` if no step ran.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub architecture: MlpArchitecture,
    pub layers: Vec<VariationalLinear>,
    pub prior: PriorSpec,
    pub train_seed: u64,
    pub metadata: TrainMetadata,
}

impl VariationalPosterior {
    /// Seeded initialization: means drawn from `N(0, INIT_MU_STD^2)`, all
    /// scales set so that `softplus(rho) = INIT_SIGMA`.
    pub fn initialize(architecture: &MlpArchitecture, prior: PriorSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho0 = softplus_inv(INIT_SIGMA);
        let layers = architecture
            .layer_shapes()
            .map(|(i, o)| {
                let mut layer = VariationalLinear::zeros(i, o);
                for m in layer.mu_w.iter_mut().chain(layer.mu_b.iter_mut()) {
                    *m = INIT_MU_STD * rng.sample::<f64, _>(StandardNormal);
                }
                layer.rho_w.fill(rho0);
                layer.rho_b.fill(rho0);
                layer
            })
            .collect();
        VariationalPosterior {
            architecture: architecture.clone(),
            layers,
            prior,
            train_seed: seed,
            metadata: TrainMetadata::default(),
        }
    }

    pub fn from_parts(
        architecture: MlpArchitecture,
        layers: Vec<VariationalLinear>,
        prior: PriorSpec,
        train_seed: u64,
        metadata: TrainMetadata,
    ) -> Result<Self, ModelError> {
        if layers.len() != architecture.layer_count() {
            return Err(ModelError::Shape {
                expected: architecture.layer_count(),
                actual: layers.len(),
            });
        }
        for ((i, o), layer) in architecture.layer_shapes().zip(&layers) {
            if layer.inputs != i || layer.outputs != o {
                return Err(ModelError::Architecture(format!(
                    "layer is {}x{}, architecture wants {}x{}",
                    layer.outputs, layer.inputs, o, i
                )));
            }
            layer.check_shape()?;
        }
        PriorSpec::new(prior.mean, prior.std)?;
        Ok(VariationalPosterior {
            architecture,
            layers,
            prior,
            train_seed,
            metadata,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(VariationalLinear::parameter_count).sum()
    }

    /// Sum of per-parameter KL divergences to the prior.
    pub fn total_kl(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(VariationalLinear::pairs)
            .map(|(m, r)| kl_unchecked(m, softplus(r), self.prior))
            .sum()
    }

    /// Draws one standard-normal value per parameter, in flat order.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.parameter_count())
            .map(|_| rng.sample(StandardNormal))
            .collect()
    }

    /// The network with weights `mu + softplus(rho) * noise`.
    pub fn network_for_noise(&self, noise: &[f64]) -> Result<PointNetwork, ModelError> {
        if noise.len() != self.parameter_count() {
            return Err(ModelError::Shape {
                expected: self.parameter_count(),
                actual: noise.len(),
            });
        }
        let mut eps = noise.iter();
        let layers = self
            .layers
            .iter()
            .map(|vl| {
                let mut values = vl
                    .pairs()
                    .zip(&mut eps)
                    .map(|((m, r), e)| m + softplus(r) * e);
                let weights: Vec<f64> = values.by_ref().take(vl.mu_w.len()).collect();
                let bias: Vec<f64> = values.collect();
                Linear {
                    inputs: vl.inputs,
                    outputs: vl.outputs,
                    weights,
                    bias,
                }
            })
            .collect();
        Ok(PointNetwork {
            architecture: self.architecture.clone(),
            layers,
        })
    }

    /// Draws one point network from the posterior.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> PointNetwork {
        let noise = self.draw_noise(rng);
        self.network_for_noise(&noise)
            .expect("noise drawn for this posterior")
    }

    /// The network at the posterior means.
    pub fn mean_network(&self) -> PointNetwork {
        let layers = self
            .layers
            .iter()
            .map(|vl| Linear {
                inputs: vl.inputs,
                outputs: vl.outputs,
                weights: vl.mu_w.clone(),
                bias: vl.mu_b.clone(),
            })
            .collect();
        PointNetwork {
            architecture: self.architecture.clone(),
            layers,
        }
    }

    pub fn zeros_like(&self) -> Vec<VariationalLinear> {
        self.layers
            .iter()
            .map(|l| VariationalLinear::zeros(l.inputs, l.outputs))
            .collect()
    }
}

/// Gradient of the objective with respect to every `mu` and `rho`, laid out
/// like the posterior's layers.
pub type PosteriorGradient = Vec<VariationalLinear>;

/// Borrowed training example.
pub type Example<'a> = (&'a [f64], usize);

/// Negative ELBO for one fixed noise draw, with its gradient.
///
/// `loss = -sum_batch log p(y | x, w) + (|batch| / dataset_size) * KL(q || prior)`
/// where `w = mu + softplus(rho) * noise`.
pub fn elbo_with_noise(
    posterior: &VariationalPosterior,
    batch: &[Example<'_>],
    dataset_size: usize,
    noise: &[f64],
) -> Result<(f64, PosteriorGradient), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if dataset_size < batch.len() {
        return Err(ModelError::Config(format!(
            "dataset size {dataset_size} smaller than batch {}",
            batch.len()
        )));
    }
    let net = posterior.network_for_noise(noise)?;
    let mut weight_grads: Vec<Linear> = posterior
        .architecture
        .layer_shapes()
        .map(|(i, o)| Linear::zeros(i, o))
        .collect();
    let mut nll = 0.0;
    for (x, y) in batch {
        nll += net.nll_backward(x, *y, &mut weight_grads)?;
    }

    let kl_scale = batch.len() as f64 / dataset_size as f64;
    let prior = posterior.prior;
    let mut kl = 0.0;
    let mut eps = noise.iter();
    let mut grads = posterior.zeros_like();
    for ((vl, wg), g) in posterior.layers.iter().zip(&weight_grads).zip(&mut grads) {
        let n_w = vl.mu_w.len();
        for (j, (m, r)) in vl.pairs().enumerate() {
            let e = eps.next().copied().unwrap_or(0.0);
            let gl = if j < n_w { wg.weights[j] } else { wg.bias[j - n_w] };
            let sigma = softplus(r);
            kl += kl_unchecked(m, sigma, prior);
            let (dkl_dmu, dkl_dsigma) = kl_grad(m, sigma, prior);
            let gm = gl + kl_scale * dkl_dmu;
            let gr = (gl * e + kl_scale * dkl_dsigma) * sigmoid(r);
            if j < n_w {
                g.mu_w[j] = gm;
                g.rho_w[j] = gr;
            } else {
                g.mu_b[j - n_w] = gm;
                g.rho_b[j - n_w] = gr;
            }
        }
    }
    Ok((nll + kl_scale * kl, grads))
}

/// One stochastic estimate of the negative ELBO and its gradient, averaged
/// over `mc_samples` independent noise draws from `rng`.
///
/// `step` is only used to label a non-finite loss.
pub fn elbo_step<R: Rng + ?Sized>(
    posterior: &VariationalPosterior,
    batch: &[Example<'_>],
    dataset_size: usize,
    rng: &mut R,
    mc_samples: usize,
    step: usize,
) -> Result<(f64, PosteriorGradient), ModelError> {
    if mc_samples == 0 {
        return Err(ModelError::Config("elbo_mc_samples must be ≥ 1".into()));
    }
    let mut total_loss = 0.0;
    let mut total = posterior.zeros_like();
    for _ in 0..mc_samples {
        let noise = posterior.draw_noise(rng);
        let (loss, grads) = elbo_with_noise(posterior, batch, dataset_size, &noise)?;
        total_loss += loss;
        for (acc, g) in total.iter_mut().zip(&grads) {
            add_assign(&mut acc.mu_w, &g.mu_w);
            add_assign(&mut acc.rho_w, &g.rho_w);
            add_assign(&mut acc.mu_b, &g.mu_b);
            add_assign(&mut acc.rho_b, &g.rho_b);
        }
    }
    let inv = 1.0 / mc_samples as f64;
    let loss = total_loss * inv;
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss { step });
    }
    if mc_samples > 1 {
        for acc in &mut total {
            for v in acc
                .mu_w
                .iter_mut()
                .chain(acc.rho_w.iter_mut())
                .chain(acc.mu_b.iter_mut())
                .chain(acc.rho_b.iter_mut())
            {
                *v *= inv;
            }
        }
    }
    Ok((loss, total))
}

fn add_assign(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
