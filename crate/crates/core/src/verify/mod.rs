//! Gradient and oracle suites backing the `verify` command.

mod fusion;
mod head;
mod model;
mod numerics;
mod temporal;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Graph, Tensor, Var};

pub use fusion::fusion_suite;
pub use head::head_suite;
pub use model::{model_grad, model_suite, MODEL_TOLERANCE};
pub use numerics::numerics_suite;
pub use temporal::{isolation_trials, temporal_suite};

/// Maximum relative error tolerated for a single primitive.
pub const OP_TOLERANCE: f64 = 1e-4;

/// Reduces a tensor output to a scalar through fixed random weights, so
/// that every output element receives a distinct upstream gradient.
pub(crate) fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::uniform(g.shape(v), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// A check that passes when `err < tol`.
    pub fn within(name: impl Into<String>, err: f64, tol: f64) -> Self {
        Check::new(name, err < tol, format!("max rel err {err:.3e} (tol {tol:.0e})"))
    }

    pub(crate) fn from_result(name: &str, r: crate::Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

/// Which suites to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Numerics,
    Temporal,
    Fusion,
    Head,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Suite::All),
            "numerics" => Ok(Suite::Numerics),
            "temporal" => Ok(Suite::Temporal),
            "fusion" => Ok(Suite::Fusion),
            "head" => Ok(Suite::Head),
            other => Err(format!("unknown module {other:?}")),
        }
    }
}

pub fn run(suite: Suite) -> Vec<Check> {
    let mut out = Vec::new();
    if matches!(suite, Suite::All | Suite::Numerics) {
        out.extend(numerics_suite());
    }
    if matches!(suite, Suite::All | Suite::Temporal) {
        out.extend(temporal_suite());
    }
    if matches!(suite, Suite::All | Suite::Fusion) {
        out.extend(fusion_suite());
    }
    if matches!(suite, Suite::All | Suite::Head) {
        out.extend(head_suite());
    }
    if suite == Suite::All {
        out.extend(model_suite());
    }
    out
}
