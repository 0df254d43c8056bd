//! Global robustness verification of ReLU networks by branch and bound,
//! bracketing the minimum of a specification between a certified lower bound
//! (linear bound propagation with split constraints) and a sound upper bound
//! (an activation-exact nonlinear program with complementarity constraints,
//! solved by a primal-dual interior-point method).

pub mod bab;
pub mod branch;
pub mod error;
pub mod ipm;
pub mod linalg;
pub mod model;
pub mod mpcc;
pub mod oracle;
pub mod propagate;

pub use error::{Error, Result};
pub use model::{spec_value, Forward, Layer, NeuronId, Norm, ReluNetwork, Specification, VerificationInstance};
pub use propagate::{LayerBounds, LinearBound, Phase, SplitSet};
pub use bab::{verify, Certificate, Metrics, Verdict, VerifyConfig};
