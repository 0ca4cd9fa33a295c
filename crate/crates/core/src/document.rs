//! Versioned JSON document holding either a variational posterior or, with
//! the `rho_*` fields left out, a single point network.
//!
//! Numbers are written with 17 significant digits and parsed with correct
//! rounding, so every `f64` survives a save/load cycle bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::FormatError;
use crate::fsutil::{fmt_f64, read_to_string, write_atomic};
use crate::mlp::{Linear, MlpArchitecture, PointNetwork};
use crate::variational::{PriorSpec, TrainMetadata, VariationalLinear, VariationalPosterior};

pub const DOCUMENT_VERSION: u32 = 1;

/// A point network with the provenance fields its document carries.
#[derive(Debug, Clone, PartialEq)]
pub struct PointModel {
    pub network: PointNetwork,
    pub prior: PriorSpec,
    pub train_seed: u64,
    pub metadata: TrainMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelDocument {
    Posterior(VariationalPosterior),
    Point(PointModel),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    version: u32,
    architecture: Vec<usize>,
    prior: RawPrior,
    train_seed: u64,
    metadata: RawMetadata,
    layers: Vec<RawLayer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrior {
    mean: f64,
    std: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetadata {
    epochs: usize,
    final_loss: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    mu_w: Vec<Vec<f64>>,
    #[serde(default)]
    rho_w: Option<Vec<Vec<f64>>>,
    mu_b: Vec<f64>,
    #[serde(default)]
    rho_b: Option<Vec<f64>>,
}

fn flatten(rows: Vec<Vec<f64>>, outputs: usize, inputs: usize) -> Result<Vec<f64>, FormatError> {
    if rows.len() != outputs || rows.iter().any(|r| r.len() != inputs) {
        return Err(FormatError::Document(format!(
            "weight matrix is not {outputs} x {inputs}"
        )));
    }
    Ok(rows.concat())
}

impl ModelDocument {
    pub fn architecture(&self) -> &MlpArchitecture {
        match self {
            ModelDocument::Posterior(p) => &p.architecture,
            ModelDocument::Point(m) => &m.network.architecture,
        }
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let raw: RawDocument =
            serde_json::from_str(text).map_err(|e| FormatError::Document(e.to_string()))?;
        if raw.version != DOCUMENT_VERSION {
            return Err(FormatError::Version {
                found: raw.version,
                expected: DOCUMENT_VERSION,
            });
        }
        let doc_err = |e: crate::error::ModelError| FormatError::Document(e.to_string());
        let architecture = MlpArchitecture::new(raw.architecture).map_err(doc_err)?;
        let prior = PriorSpec::new(raw.prior.mean, raw.prior.std).map_err(doc_err)?;
        let metadata = TrainMetadata {
            epochs: raw.metadata.epochs,
            final_loss: raw.metadata.final_loss,
        };
        if raw.layers.len() != architecture.layer_count() {
            return Err(FormatError::Document(format!(
                "{} layers for architecture {architecture}",
                raw.layers.len()
            )));
        }
        let with_rho = raw.layers.iter().filter(|l| l.rho_w.is_some() && l.rho_b.is_some()).count();
        let without_rho = raw.layers.iter().filter(|l| l.rho_w.is_none() && l.rho_b.is_none()).count();
        let shapes: Vec<(usize, usize)> = architecture.layer_shapes().collect();

        if with_rho == raw.layers.len() {
            let layers = raw
                .layers
                .into_iter()
                .zip(&shapes)
                .map(|(l, &(i, o))| {
                    Ok(VariationalLinear {
                        inputs: i,
                        outputs: o,
                        mu_w: flatten(l.mu_w, o, i)?,
                        rho_w: flatten(l.rho_w.unwrap(), o, i)?,
                        mu_b: l.mu_b,
                        rho_b: l.rho_b.unwrap(),
                    })
                })
                .collect::<Result<Vec<_>, FormatError>>()?;
            let post = VariationalPosterior::from_parts(architecture, layers, prior, raw.train_seed, metadata)
                .map_err(doc_err)?;
            Ok(ModelDocument::Posterior(post))
        } else if without_rho == raw.layers.len() {
            let layers = raw
                .layers
                .into_iter()
                .zip(&shapes)
                .map(|(l, &(i, o))| {
                    Ok(Linear {
                        inputs: i,
                        outputs: o,
                        weights: flatten(l.mu_w, o, i)?,
                        bias: l.mu_b,
                    })
                })
                .collect::<Result<Vec<_>, FormatError>>()?;
            let network = PointNetwork::from_layers(architecture, layers).map_err(doc_err)?;
            Ok(ModelDocument::Point(PointModel {
                network,
                prior,
                train_seed: raw.train_seed,
                metadata,
            }))
        } else {
            Err(FormatError::Document(
                "rho fields must be present on every layer or on none".into(),
            ))
        }
    }

    pub fn render(&self) -> String {
        let (arch, prior, seed, meta) = match self {
            ModelDocument::Posterior(p) => (&p.architecture, p.prior, p.train_seed, p.metadata),
            ModelDocument::Point(m) => (&m.network.architecture, m.prior, m.train_seed, m.metadata),
        };
        let mut out = String::new();
        out.push_str("{\n");
        writeln!(out, "  \"version\": {DOCUMENT_VERSION},").unwrap();
        let dims: Vec<String> = arch.dims().iter().map(usize::to_string).collect();
        writeln!(out, "  \"architecture\": [{}],", dims.join(", ")).unwrap();
        writeln!(
            out,
            "  \"prior\": {{\"mean\": {}, \"std\": {}}},",
            fmt_f64(prior.mean),
            fmt_f64(prior.std)
        )
        .unwrap();
        writeln!(out, "  \"train_seed\": {seed},").unwrap();
        let loss = meta.final_loss.map_or_else(|| "null".to_string(), fmt_f64);
        writeln!(
            out,
            "  \"metadata\": {{\"epochs\": {}, \"final_loss\": {loss}}},",
            meta.epochs
        )
        .unwrap();
        out.push_str("  \"layers\": [\n");
        let layer_count = arch.layer_count();
        for k in 0..layer_count {
            out.push_str("    {\n");
            let mut fields: Vec<String> = Vec::new();
            match self {
                ModelDocument::Posterior(p) => {
                    let l = &p.layers[k];
                    fields.push(matrix_field("mu_w", &l.mu_w, l.inputs));
                    fields.push(matrix_field("rho_w", &l.rho_w, l.inputs));
                    fields.push(vector_field("mu_b", &l.mu_b));
                    fields.push(vector_field("rho_b", &l.rho_b));
                }
                ModelDocument::Point(m) => {
                    let l = &m.network.layers[k];
                    fields.push(matrix_field("mu_w", &l.weights, l.inputs));
                    fields.push(vector_field("mu_b", &l.bias));
                }
            }
            out.push_str(&fields.join(",\n"));
            out.push_str(if k + 1 < layer_count { "\n    },\n" } else { "\n    }\n" });
        }
        out.push_str("  ]\n}\n");
        out
    }
}

fn numbers(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
    format!("[{}]", parts.join(", "))
}

fn vector_field(name: &str, values: &[f64]) -> String {
    format!("      \"{name}\": {}", numbers(values))
}

fn matrix_field(name: &str, values: &[f64], inputs: usize) -> String {
    let rows: Vec<String> = values
        .chunks_exact(inputs)
        .map(|r| format!("        {}", numbers(r)))
        .collect();
    format!("      \"{name}\": [\n{}\n      ]", rows.join(",\n"))
}

pub fn save_model(doc: &ModelDocument, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, doc.render().as_bytes())
}

pub fn load_model(path: &Path) -> Result<ModelDocument, FormatError> {
    ModelDocument::parse(&read_to_string(path)?)
}

pub fn save_posterior(posterior: &VariationalPosterior, path: &Path) -> Result<(), FormatError> {
    save_model(&ModelDocument::Posterior(posterior.clone()), path)
}

/// Loads a document that must hold a posterior.
pub fn load_posterior(path: &Path) -> Result<VariationalPosterior, FormatError> {
    match load_model(path)? {
        ModelDocument::Posterior(p) => Ok(p),
        ModelDocument::Point(_) => Err(FormatError::Document(
            "document holds a point network (no rho fields), not a posterior".into(),
        )),
    }
}
