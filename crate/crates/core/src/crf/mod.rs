//! Pixel-level relation learning with a fully connected binary CRF.
//!
//! Each action unit's initial attention map supplies the unary term
//! `-log P0(y)`; two Gaussian kernels over pixel positions (and colours, for
//! the appearance kernel) couple every pair of pixels through a learnable 2x2
//! label compatibility matrix. Parallel mean-field updates produce the refined
//! attention, and every step is recorded for differentiation.
//!
//! Message passing is a dense `m x m` product, so memory grows as `m^2` with
//! `m = l * l` attention pixels. That is fine for small inputs and nothing else.

mod energy;
mod gate;
mod kernels;
mod mean_field;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use energy::{crf_energy, expected_crf_energy, expected_energy_value, ExpectedEnergyOp};
pub use gate::{refine_and_gate, GateLayers, GateOutput};
pub use kernels::{build_kernels, build_kernels_shared, smoothness_kernel, KernelMatrices};
pub use mean_field::{mean_field, mean_field_values, MeanFieldOp};
pub use oracle::{brute_force_marginals, MAX_ORACLE_PIXELS};

/// Unary probabilities are clamped into `[UNARY_CLAMP, 1 - UNARY_CLAMP]`.
pub const UNARY_CLAMP: f64 = 1e-6;

/// Kernel weights and bandwidths of one AU's CRF.
///
/// `alpha` and `gamma` are in pixels of the attention map, `beta` in colour
/// units on the `[0, 1]` RGB scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrfHyperParams {
    pub w1: f64,
    pub w2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Mean-field iteration count.
    #[serde(rename = "T")]
    pub iterations: usize,
    /// Fraction of the previous marginal kept at each step; 0 disables damping.
    #[serde(default)]
    pub damping: f64,
}

impl CrfHyperParams {
    /// Defaults for an `l x l` attention map.
    pub fn for_side(l: usize) -> Self {
        CrfHyperParams {
            w1: 1.0,
            w2: 1.0,
            alpha: 0.2 * l as f64,
            beta: 0.1,
            gamma: 0.05 * l as f64,
            iterations: 10,
            damping: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.beta > 0.0
            && self.gamma > 0.0
            && self.w1 >= 0.0
            && self.w2 >= 0.0
            && self.iterations >= 1
            && (0.0..1.0).contains(&self.damping);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid CRF hyperparameters {self:?}")))
        }
    }

    /// Same kernels (bandwidths) as `other`, so kernel matrices can be shared.
    pub fn same_bandwidths(&self, other: &Self) -> bool {
        self.alpha == other.alpha && self.beta == other.beta && self.gamma == other.gamma
    }
}

/// Label compatibility `mu[y][y']`, row = label of the pixel being updated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompatibilityMatrix(pub [[f64; 2]; 2]);

impl CompatibilityMatrix {
    /// Zero cost for agreeing labels, unit cost for disagreeing ones.
    pub fn potts() -> Self {
        CompatibilityMatrix([[0.0, 1.0], [1.0, 0.0]])
    }

    pub fn flat(&self) -> [f64; 4] {
        let m = self.0;
        [m[0][0], m[0][1], m[1][0], m[1][1]]
    }

    pub fn from_flat(v: &[f64]) -> Self {
        CompatibilityMatrix([[v[0], v[1]], [v[2], v[3]]])
    }
}

impl Default for CompatibilityMatrix {
    fn default() -> Self {
        Self::potts()
    }
}

#[inline]
pub(crate) fn clamp_unary<S: crate::Scalar>(v: S) -> (S, bool) {
    let lo = S::lit(UNARY_CLAMP);
    let hi = S::one() - lo;
    if v < lo {
        (lo, true)
    } else if v > hi {
        (hi, true)
    } else {
        (v, false)
    }
}

#[cfg(test)]
mod tests;
