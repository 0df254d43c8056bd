//! ReLU feedforward networks, robustness specifications and verification
//! instances.
//!
//! A [`ReluNetwork`] is a chain of affine layers with ReLU on every layer but
//! the last. The quantity being verified is a linear form of the output
//! logits, `f(x) = z_label - z_target`, minimised over an input ball around a
//! nominal point. Everything here is exact; no relaxation happens in this
//! module.

pub mod io;
pub mod toy;

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One affine layer `z = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Self {
        Self { weights, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weights.dot(&x) + &self.bias
    }
}

/// Index of a hidden neuron: `layer` counts hidden layers from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.index)
    }
}

/// Feedforward ReLU network. The final layer is affine, all others are
/// followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNetwork {
    layers: Vec<Layer>,
}

/// Result of an exact forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Array1<f64>,
    /// Pre-activations of every hidden layer.
    pub preacts: Vec<Array1<f64>>,
    /// `pattern[k][j]` is true iff `preacts[k][j] > 0` (strictly).
    pub pattern: Vec<Vec<bool>>,
}

impl ReluNetwork {
    /// Validates the dimension chain and finiteness of every entry.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Dimension {
                layer: layers.len(),
                detail: "network needs at least one hidden layer and an output layer".into(),
            });
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Dimension {
                    layer: k,
                    detail: format!(
                        "bias has length {}, weights have {} rows",
                        layer.bias.len(),
                        layer.out_dim()
                    ),
                });
            }
            if layer.out_dim() == 0 || layer.in_dim() == 0 {
                return Err(Error::Dimension {
                    layer: k,
                    detail: "empty weight matrix".into(),
                });
            }
            if k > 0 && layer.in_dim() != layers[k - 1].out_dim() {
                return Err(Error::Dimension {
                    layer: k,
                    detail: format!(
                        "expects input dimension {}, previous layer outputs {}",
                        layer.in_dim(),
                        layers[k - 1].out_dim()
                    ),
                });
            }
            if let Some(((r, c), _)) = layer.weights.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: k,
                    what: "weight",
                    index: vec![r, c],
                });
            }
            if let Some((j, _)) = layer.bias.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: k,
                    what: "bias",
                    index: vec![j],
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.num_hidden()].iter().map(Layer::out_dim).collect()
    }

    pub fn output_layer(&self) -> &Layer {
        &self.layers[self.layers.len() - 1]
    }

    pub fn check_input(&self, x: ArrayView1<'_, f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::InputDimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Forward> {
        self.check_input(x)?;
        let mut preacts = Vec::with_capacity(self.num_hidden());
        let mut pattern = Vec::with_capacity(self.num_hidden());
        let mut h = x.to_owned();
        for layer in &self.layers[..self.num_hidden()] {
            let z = layer.apply(h.view());
            pattern.push(z.iter().map(|&v| v > 0.0).collect());
            h = z.mapv(|v| v.max(0.0));
            preacts.push(z);
        }
        let logits = self.output_layer().apply(h.view());
        Ok(Forward {
            logits,
            preacts,
            pattern,
        })
    }
}

/// Which logits are compared. With `target = None` the verified quantity is
/// the label logit itself (useful for scalar-output networks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specification {
    pub label: usize,
    pub target: Option<usize>,
}

impl Specification {
    pub fn margin(label: usize, target: usize) -> Self {
        Self {
            label,
            target: Some(target),
        }
    }

    pub fn scalar(output: usize) -> Self {
        Self {
            label: output,
            target: None,
        }
    }

    pub fn validate(&self, output_dim: usize) -> Result<()> {
        if self.label >= output_dim {
            return Err(Error::Specification(format!(
                "label {} out of range for {output_dim} outputs",
                self.label
            )));
        }
        if let Some(t) = self.target {
            if t >= output_dim {
                return Err(Error::Specification(format!(
                    "target {t} out of range for {output_dim} outputs"
                )));
            }
            if t == self.label {
                return Err(Error::Specification(format!(
                    "label and target must differ (both {t})"
                )));
            }
        }
        Ok(())
    }

    /// Coefficients `c` with `f = c . logits`.
    pub fn objective(&self, output_dim: usize) -> Array1<f64> {
        let mut c = Array1::zeros(output_dim);
        c[self.label] = 1.0;
        if let Some(t) = self.target {
            c[t] = -1.0;
        }
        c
    }

    pub fn value(&self, logits: ArrayView1<'_, f64>) -> f64 {
        logits[self.label] - self.target.map_or(0.0, |t| logits[t])
    }
}

/// `z_label - z_target` at `x`.
pub fn spec_value(network: &ReluNetwork, spec: &Specification, x: ArrayView1<'_, f64>) -> Result<f64> {
    let fw = network.forward(x)?;
    Ok(spec.value(fw.logits.view()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Inf,
    Two,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "linf" => Ok(Norm::Inf),
            "two" | "2" | "l2" => Ok(Norm::Two),
            other => Err(Error::Instance(format!("unknown norm {other:?}"))),
        }
    }
}

/// Recommended band for the complementarity softening.
pub const EPS_COMP_BAND: (f64, f64) = (1e-8, 1e-5);

/// Nominal input, perturbation set, specification and solver tolerances.
#[derive(Debug, Clone)]
pub struct VerificationInstance {
    pub network: Arc<ReluNetwork>,
    pub x0: Array1<f64>,
    pub delta: f64,
    pub norm: Norm,
    pub spec: Specification,
    /// Target width of the final `[lower, upper]` bracket.
    pub epsilon: f64,
    pub t_max: usize,
    /// Number of bound computations between two NLP re-solves.
    pub tau_max: usize,
    /// Weight of the pattern-alignment term in branching.
    pub lambda: f64,
    pub eps_comp: f64,
}

impl VerificationInstance {
    pub const DEFAULT_EPSILON: f64 = 1e-3;
    pub const DEFAULT_T_MAX: usize = 10_000;
    pub const DEFAULT_TAU_MAX: usize = 20;
    pub const DEFAULT_LAMBDA: f64 = 0.1;
    pub const DEFAULT_EPS_COMP: f64 = 1e-6;

    /// Instance with default tolerances.
    pub fn new(
        network: Arc<ReluNetwork>,
        x0: Array1<f64>,
        delta: f64,
        norm: Norm,
        spec: Specification,
    ) -> Result<Self> {
        let inst = Self {
            network,
            x0,
            delta,
            norm,
            spec,
            epsilon: Self::DEFAULT_EPSILON,
            t_max: Self::DEFAULT_T_MAX,
            tau_max: Self::DEFAULT_TAU_MAX,
            lambda: Self::DEFAULT_LAMBDA,
            eps_comp: Self::DEFAULT_EPS_COMP,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.check_input(self.x0.view())?;
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instance("x0 has non-finite entries".into()));
        }
        self.spec.validate(self.network.output_dim())?;
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Instance(format!("delta must be finite and >= 0, got {}", self.delta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Instance(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.t_max == 0 {
            return Err(Error::Instance("t_max must be positive".into()));
        }
        if self.tau_max == 0 {
            return Err(Error::Instance("tau_max must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Instance(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps_comp > 0.0 && self.eps_comp.is_finite()) {
            return Err(Error::Instance(format!("eps_comp must be positive, got {}", self.eps_comp)));
        }
        if self.eps_comp < EPS_COMP_BAND.0 || self.eps_comp > EPS_COMP_BAND.1 {
            tracing::warn!(
                eps_comp = self.eps_comp,
                "complementarity softening outside the recommended [1e-8, 1e-5] band"
            );
        }
        Ok(())
    }

    pub fn objective(&self) -> Array1<f64> {
        self.spec.objective(self.network.output_dim())
    }

    pub fn spec_value(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        spec_value(&self.network, &self.spec, x)
    }

    /// Axis-aligned box containing the perturbation set (exact for l-inf).
    pub fn input_box(&self) -> (Array1<f64>, Array1<f64>) {
        (self.x0.mapv(|v| v - self.delta), self.x0.mapv(|v| v + self.delta))
    }

    /// Whether `x` lies in the perturbation set up to `tol`.
    pub fn contains(&self, x: ArrayView1<'_, f64>, tol: f64) -> bool {
        if x.len() != self.x0.len() {
            return false;
        }
        let d = &x - &self.x0;
        match self.norm {
            Norm::Inf => d.iter().all(|v| v.abs() <= self.delta + tol),
            Norm::Two => d.dot(&d).sqrt() <= self.delta + tol,
        }
    }

    /// Euclidean projection onto the perturbation set.
    pub fn project(&self, x: &mut Array1<f64>) {
        match self.norm {
            Norm::Inf => {
                for (xi, &ci) in x.iter_mut().zip(self.x0.iter()) {
                    *xi = xi.clamp(ci - self.delta, ci + self.delta);
                }
            }
            Norm::Two => {
                let d = &*x - &self.x0;
                let n = d.dot(&d).sqrt();
                if n > self.delta {
                    let scale = if n > 0.0 { self.delta / n } else { 0.0 };
                    *x = &self.x0 + &(d * scale);
                }
            }
        }
    }
}
