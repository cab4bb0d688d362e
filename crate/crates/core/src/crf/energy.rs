use std::collections::hash_map::DefaultHasher;
use std::hash::Hash;
use std::sync::Arc;

use super::mean_field::{check_batch, clamp_all};
use super::{clamp_unary, CompatibilityMatrix, KernelMatrices};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// Energy of a binary labelling: unary `-log P0(y_j)` plus compatibility-weighted
/// kernel terms over unordered pixel pairs.
pub fn crf_energy<S: Scalar>(
    labels: &[bool],
    unary: &[S],
    kernels: &KernelMatrices<S>,
    mu: &CompatibilityMatrix,
    w1: f64,
    w2: f64,
) -> Result<S> {
    let m = kernels.m;
    if labels.len() != m || unary.len() != m {
        return Err(Error::structure("labelling, unary and kernels disagree on pixel count"));
    }
    let (w1, w2) = (S::lit(w1), S::lit(w2));
    let mut e = S::zero();
    for (&y, &v) in labels.iter().zip(unary) {
        let (p, _) = clamp_unary(v);
        e -= if y { p.ln() } else { (S::one() - p).ln() };
    }
    for j in 0..m {
        for k in j + 1..m {
            let c = S::lit(mu.0[labels[j] as usize][labels[k] as usize]);
            e += c * (w1 * kernels.k1_at(j, k) + w2 * kernels.k2_at(j, k));
        }
    }
    Ok(e)
}

/// Expected energy under the factorised marginals `Q`, as a graph op.
///
/// Inputs: marginals `Q(y=1)` and unary `P0(y=1)` for a batch (`B * m`
/// elements each), compatibility `[2, 2]`, weights `[w1, w2]`. The output is
/// `[B]`, one energy per item; each reduces to [`crf_energy`] when its `Q` is a
/// point mass.
pub struct ExpectedEnergyOp<S: Scalar> {
    kernels: Vec<Arc<KernelMatrices<S>>>,
    clamped: Vec<bool>,
    probs: Vec<S>,
    cache: Vec<EnergyCache<S>>,
}

struct EnergyCache<S> {
    /// Per kernel: upper sums `sum_{k>j} K_jk q_k` and lower sums `sum_{k<j} K_jk q_k`.
    up: [Vec<S>; 2],
    low: [Vec<S>; 2],
    /// Pairwise energy per kernel before weighting.
    pair: [S; 2],
}

impl<S: Scalar> ExpectedEnergyOp<S> {
    pub fn new(kernels: Vec<Arc<KernelMatrices<S>>>) -> Self {
        ExpectedEnergyOp {
            kernels,
            clamped: Vec::new(),
            probs: Vec::new(),
            cache: Vec::new(),
        }
    }
}

fn split_sums<S: Scalar>(k: &[S], q: &[S]) -> (Vec<S>, Vec<S>) {
    let m = q.len();
    let mut up = vec![S::zero(); m];
    let mut low = vec![S::zero(); m];
    for j in 0..m {
        let row = &k[j * m..(j + 1) * m];
        let mut l = S::zero();
        for i in 0..j {
            l += row[i] * q[i];
        }
        let mut u = S::zero();
        for i in j + 1..m {
            u += row[i] * q[i];
        }
        up[j] = u;
        low[j] = l;
    }
    (up, low)
}

fn energy_one<S: Scalar>(k: &KernelMatrices<S>, q: &[S], p: &[S], mu: &[S], w: &[S]) -> (S, EnergyCache<S>) {
    let mut e = S::zero();
    for (&qj, &pj) in q.iter().zip(p) {
        e -= qj * pj.ln() + (S::one() - qj) * (S::one() - pj).ln();
    }
    let (up1, low1) = split_sums(&k.k1, q);
    let (up2, low2) = split_sums(&k.k2, q);
    let mut pair = [S::zero(); 2];
    for (n, (up, tot)) in [(&up1, &k.upper1), (&up2, &*k.upper2)].into_iter().enumerate() {
        let mut s = S::zero();
        for j in 0..k.m {
            let (q1, q0) = (q[j], S::one() - q[j]);
            let (u1, u0) = (up[j], tot[j] - up[j]);
            s += q0 * (mu[0] * u0 + mu[1] * u1) + q1 * (mu[2] * u0 + mu[3] * u1);
        }
        pair[n] = s;
    }
    e += w[0] * pair[0] + w[1] * pair[1];
    let cache = EnergyCache {
        up: [up1, up2],
        low: [low1, low2],
        pair,
    };
    (e, cache)
}

impl<S: Scalar> CustomOp<S> for ExpectedEnergyOp<S> {
    fn name(&self) -> &'static str {
        "expected_crf_energy"
    }

    fn forward(&mut self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let [q, v, mu, w] = inputs else {
            return Err(Error::structure(
                "expected energy takes marginals, unary, compatibility and weights",
            ));
        };
        check_batch(&self.kernels, q.len())?;
        if v.len() != q.len() || mu.len() != 4 || w.len() != 2 {
            return Err(Error::structure("expected energy inputs disagree in size"));
        }
        let (p, clamped) = clamp_all(v.data(), "expected_crf_energy");
        let mut energies = Vec::with_capacity(self.kernels.len());
        self.cache.clear();
        let mut off = 0;
        for k in &self.kernels {
            let r = off..off + k.m;
            let (e, c) = energy_one(k, &q.data()[r.clone()], &p[r], mu.data(), w.data());
            energies.push(e);
            self.cache.push(c);
            off += k.m;
        }
        self.clamped = clamped;
        self.probs = p;
        Tensor::new(vec![energies.len()], energies)
    }

    fn backward(&self, inputs: &[&Tensor<S>], _output: &Tensor<S>, grad_output: &[S]) -> Vec<Option<Vec<S>>> {
        let (q_all, mu, w) = (inputs[0].data(), inputs[2].data(), inputs[3].data());
        let mut dq = vec![S::zero(); q_all.len()];
        let mut dv = vec![S::zero(); q_all.len()];
        let mut dmu = [S::zero(); 4];
        let mut dw = [S::zero(); 2];
        let mut off = 0;
        for ((k, c), &go) in self.kernels.iter().zip(&self.cache).zip(grad_output) {
            let uppers = [&k.upper1, &*k.upper2];
            // Lower totals are row sums minus upper sums (the diagonal is zero).
            let rows = [&k.row1, &*k.row2];
            for j in 0..k.m {
                let idx = off + j;
                let (q1, q0) = (q_all[idx], S::one() - q_all[idx]);
                let p = self.probs[idx];
                let mut ut = [S::zero(); 2];
                let mut lt = [S::zero(); 2];
                for n in 0..2 {
                    let u1 = c.up[n][j];
                    let u0 = uppers[n][j] - u1;
                    let l1 = c.low[n][j];
                    let l0 = rows[n][j] - uppers[n][j] - l1;
                    let wn = go * w[n];
                    dmu[0] += wn * q0 * u0;
                    dmu[1] += wn * q0 * u1;
                    dmu[2] += wn * q1 * u0;
                    dmu[3] += wn * q1 * u1;
                    ut[0] += w[n] * u0;
                    ut[1] += w[n] * u1;
                    lt[0] += w[n] * l0;
                    lt[1] += w[n] * l1;
                }
                let unary = ((S::one() - p) / p).ln();
                let row = (mu[2] - mu[0]) * ut[0] + (mu[3] - mu[1]) * ut[1];
                let col = lt[0] * (mu[1] - mu[0]) + lt[1] * (mu[3] - mu[2]);
                dq[idx] = go * (unary + row + col);
                if !self.clamped[idx] {
                    dv[idx] = go * (-q1 / p + q0 / (S::one() - p));
                }
            }
            dw[0] += go * c.pair[0];
            dw[1] += go * c.pair[1];
            off += k.m;
        }
        vec![Some(dq), Some(dv), Some(dmu.to_vec()), Some(dw.to_vec())]
    }

    fn hash_decisions(&self, state: &mut DefaultHasher) {
        self.clamped.hash(state);
    }
}

/// Records per-item expected CRF energies (`[B]`) of `marginals` in `g`.
pub fn expected_crf_energy<S: Scalar>(
    g: &mut Graph<S>,
    marginals: Var,
    unary: Var,
    mu: Var,
    weights: Var,
    kernels: Vec<Arc<KernelMatrices<S>>>,
) -> Result<Var> {
    g.custom(
        &[marginals, unary, mu, weights],
        Box::new(ExpectedEnergyOp::new(kernels)),
    )
}

/// Expected energy of a single item without recording a graph.
pub fn expected_energy_value<S: Scalar>(
    marginals: &[S],
    unary: &[S],
    kernels: &KernelMatrices<S>,
    mu: &CompatibilityMatrix,
    w1: f64,
    w2: f64,
) -> Result<S> {
    if marginals.len() != kernels.m || unary.len() != kernels.m {
        return Err(Error::structure("marginals, unary and kernels disagree on pixel count"));
    }
    let (p, _) = clamp_all(unary, "expected_crf_energy");
    let mu: Vec<S> = mu.flat().iter().map(|&x| S::lit(x)).collect();
    Ok(energy_one(kernels, marginals, &p, &mu, &[S::lit(w1), S::lit(w2)]).0)
}
