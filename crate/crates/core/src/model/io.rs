//! JSON model and instance files.
//!
//! Model: `{"layers":[{"weights":[[..],..], "bias":[..]}, ..]}`, weights row
//! major `[out][in]`, the last entry being the affine output layer. Entries
//! may be JSON numbers or numeric strings (`"NaN"` and `"inf"` parse, then
//! fail validation as non-finite).
//!
//! Instance: `{"x0":[..], "delta":r, "norm":"inf"|"two", "label":k,
//! "target":a, "epsilon":e, "t_max":n, "tau_max":m, "lambda":l,
//! "eps_comp":c}`. `norm` defaults to `"inf"`; `target` may be omitted or
//! `null` to verify the label logit itself; the last five default to
//! `1e-3`, `10000`, `20`, `0.1` and `1e-6`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Layer, Norm, ReluNetwork, Specification, VerificationInstance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
enum Scalar {
    Number(f64),
    Text(String),
}

impl Scalar {
    fn value(&self) -> std::result::Result<f64, String> {
        match self {
            Scalar::Number(v) => Ok(*v),
            Scalar::Text(s) => s.trim().parse::<f64>().map_err(|_| format!("{s:?} is not a number")),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    weights: Vec<Vec<Scalar>>,
    bias: Vec<Scalar>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    layers: Vec<LayerFile>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn network_from_json(text: &str) -> Result<ReluNetwork> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let mut layers = Vec::with_capacity(file.layers.len());
    for (k, lf) in file.layers.iter().enumerate() {
        let rows = lf.weights.len();
        let cols = lf.weights.first().map_or(0, Vec::len);
        if let Some(r) = lf.weights.iter().position(|row| row.len() != cols) {
            return Err(Error::Schema(format!(
                "layer {k}: weight row {r} has length {}, expected {cols}",
                lf.weights[r].len()
            )));
        }
        let mut weights = Array2::zeros((rows, cols));
        for (r, row) in lf.weights.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                weights[[r, c]] = v.value().map_err(|e| Error::Schema(format!("layer {k}: {e}")))?;
            }
        }
        let bias = lf
            .bias
            .iter()
            .map(|v| v.value().map_err(|e| Error::Schema(format!("layer {k}: {e}"))))
            .collect::<Result<Array1<f64>>>()?;
        layers.push(Layer::new(weights, bias));
    }
    ReluNetwork::new(layers)
}

pub fn network_to_json(network: &ReluNetwork) -> String {
    let file = ModelFile {
        layers: network
            .layers()
            .iter()
            .map(|l| LayerFile {
                weights: l
                    .weights
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().map(|&v| Scalar::Number(v)).collect())
                    .collect(),
                bias: l.bias.iter().map(|&v| Scalar::Number(v)).collect(),
            })
            .collect(),
    };
    // serde_json prints the shortest representation that parses back to the
    // same f64, so the round trip is bit exact.
    serde_json::to_string(&file).expect("finite weights always serialize")
}

pub fn load_network(path: impl AsRef<Path>) -> Result<ReluNetwork> {
    network_from_json(&read(path.as_ref())?)
}

pub fn save_network(network: &ReluNetwork, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &network_to_json(network))
}

fn default_epsilon() -> f64 {
    VerificationInstance::DEFAULT_EPSILON
}
fn default_t_max() -> usize {
    VerificationInstance::DEFAULT_T_MAX
}
fn default_tau_max() -> usize {
    VerificationInstance::DEFAULT_TAU_MAX
}
fn default_lambda() -> f64 {
    VerificationInstance::DEFAULT_LAMBDA
}
fn default_eps_comp() -> f64 {
    VerificationInstance::DEFAULT_EPS_COMP
}

/// On-disk form of a [`VerificationInstance`] (without the network).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub x0: Vec<f64>,
    pub delta: f64,
    #[serde(default)]
    pub norm: Norm,
    pub label: usize,
    #[serde(default)]
    pub target: Option<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_tau_max")]
    pub tau_max: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_eps_comp")]
    pub eps_comp: f64,
}

impl InstanceFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write(path.as_ref(), &serde_json::to_string_pretty(self)?)
    }

    pub fn from_instance(inst: &VerificationInstance) -> Self {
        Self {
            x0: inst.x0.to_vec(),
            delta: inst.delta,
            norm: inst.norm,
            label: inst.spec.label,
            target: inst.spec.target,
            epsilon: inst.epsilon,
            t_max: inst.t_max,
            tau_max: inst.tau_max,
            lambda: inst.lambda,
            eps_comp: inst.eps_comp,
        }
    }

    pub fn into_instance(self, network: Arc<ReluNetwork>) -> Result<VerificationInstance> {
        let inst = VerificationInstance {
            network,
            x0: Array1::from(self.x0),
            delta: self.delta,
            norm: self.norm,
            spec: Specification {
                label: self.label,
                target: self.target,
            },
            epsilon: self.epsilon,
            t_max: self.t_max,
            tau_max: self.tau_max,
            lambda: self.lambda,
            eps_comp: self.eps_comp,
        };
        inst.validate()?;
        Ok(inst)
    }
}
