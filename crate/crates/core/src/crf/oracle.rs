use super::{crf_energy, CompatibilityMatrix, KernelMatrices};
use crate::error::{Error, Result};

/// Largest pixel count the exhaustive oracle accepts.
pub const MAX_ORACLE_PIXELS: usize = 16;

/// Exact Gibbs marginals `P(y_j = 1)` by enumerating all `2^m` labellings.
pub fn brute_force_marginals(
    unary: &[f64],
    kernels: &KernelMatrices<f64>,
    mu: &CompatibilityMatrix,
    w1: f64,
    w2: f64,
) -> Result<Vec<f64>> {
    let m = kernels.m;
    if m > MAX_ORACLE_PIXELS {
        return Err(Error::Refused(format!(
            "exhaustive marginals need 2^{m} labellings; at most {MAX_ORACLE_PIXELS} pixels are allowed"
        )));
    }
    let energies: Vec<f64> = (0..1usize << m)
        .map(|bits| {
            let labels: Vec<bool> = (0..m).map(|j| bits >> j & 1 == 1).collect();
            crf_energy(&labels, unary, kernels, mu, w1, w2)
        })
        .collect::<Result<_>>()?;
    let lowest = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    let mut ones = vec![0.0; m];
    for (bits, e) in energies.iter().enumerate() {
        let weight = (lowest - e).exp();
        z += weight;
        for (j, o) in ones.iter_mut().enumerate() {
            if bits >> j & 1 == 1 {
                *o += weight;
            }
        }
    }
    Ok(ones.into_iter().map(|o| o / z).collect())
}
