use std::collections::hash_map::DefaultHasher;
use std::hash::Hash;
use std::sync::Arc;

use super::{clamp_unary, CrfHyperParams, KernelMatrices};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// Parallel mean-field inference as a graph op.
///
/// Inputs are the unary maps `P0(y=1)` for a batch (`B * m` elements, e.g.
/// `[B, l, l, 1]`), the compatibility matrix `[2, 2]` and the kernel weights
/// `[w1, w2]`. One kernel set per batch item. The output has the unary's shape
/// and holds the refined `Q(y=1)`; `Q(y=0)` is its complement.
pub struct MeanFieldOp<S: Scalar> {
    kernels: Vec<Arc<KernelMatrices<S>>>,
    iterations: usize,
    damping: S,
    clamped: Vec<bool>,
    probs: Vec<S>,
    steps: Vec<Vec<Step<S>>>,
}

struct Step<S> {
    /// `K1 q` and `K2 q` for the marginal entering the step.
    a: Vec<S>,
    b: Vec<S>,
    /// Normalised update before damping.
    u: Vec<S>,
}

type Mu<S> = [S; 4];

impl<S: Scalar> MeanFieldOp<S> {
    pub fn new(kernels: Vec<Arc<KernelMatrices<S>>>, hyper: &CrfHyperParams) -> Self {
        MeanFieldOp {
            kernels,
            iterations: hyper.iterations,
            damping: S::lit(hyper.damping),
            clamped: Vec::new(),
            probs: Vec::new(),
            steps: Vec::new(),
        }
    }

    fn forward_one(&self, k: &KernelMatrices<S>, p: &[S], mu: Mu<S>, (w1, w2): (S, S)) -> (Vec<S>, Vec<Step<S>>) {
        let [mu00, mu01, mu10, mu11] = mu;
        let m = k.m;
        let mut q = p.to_vec();
        let mut steps = Vec::with_capacity(self.iterations);
        for _ in 0..self.iterations {
            let mut a = vec![S::zero(); m];
            let mut b = vec![S::zero(); m];
            KernelMatrices::apply(&k.k1, &q, &mut a);
            KernelMatrices::apply(&k.k2, &q, &mut b);
            let mut u = vec![S::zero(); m];
            for j in 0..m {
                let m1 = w1 * a[j] + w2 * b[j];
                let m0 = w1 * (k.row1[j] - a[j]) + w2 * (k.row2[j] - b[j]);
                let phi1 = mu10 * m0 + mu11 * m1;
                let phi0 = mu00 * m0 + mu01 * m1;
                let lo = phi0.min(phi1);
                let e1 = p[j] * (-(phi1 - lo)).exp();
                let e0 = (S::one() - p[j]) * (-(phi0 - lo)).exp();
                u[j] = e1 / (e1 + e0);
            }
            if self.damping > S::zero() {
                let keep = self.damping;
                for (qj, &uj) in q.iter_mut().zip(&u) {
                    *qj = (S::one() - keep) * uj + keep * *qj;
                }
            } else {
                q.copy_from_slice(&u);
            }
            steps.push(Step { a, b, u });
        }
        (q, steps)
    }

    /// Accumulates `mu` and weight gradients and returns the gradient for the
    /// clamped unary of one item.
    #[allow(clippy::too_many_arguments)]
    fn backward_one(
        &self,
        k: &KernelMatrices<S>,
        p: &[S],
        steps: &[Step<S>],
        grad: &[S],
        mu: Mu<S>,
        (w1, w2): (S, S),
        dmu: &mut Mu<S>,
        dw: &mut [S; 2],
    ) -> Vec<S> {
        let [mu00, mu01, mu10, mu11] = mu;
        let m = k.m;
        let keep = self.damping;
        let mut g = grad.to_vec();
        let mut dp = vec![S::zero(); m];
        let mut da = vec![S::zero(); m];
        let mut db = vec![S::zero(); m];
        let mut tmp = vec![S::zero(); m];
        for step in steps.iter().rev() {
            let mut prev = vec![S::zero(); m];
            for j in 0..m {
                let du = if keep > S::zero() {
                    prev[j] = keep * g[j];
                    (S::one() - keep) * g[j]
                } else {
                    g[j]
                };
                let u = step.u[j];
                let dd = du * u * (S::one() - u);
                dp[j] += dd / (p[j] * (S::one() - p[j]));
                let (dphi1, dphi0) = (-dd, dd);
                let (a, b) = (step.a[j], step.b[j]);
                let m1 = w1 * a + w2 * b;
                let m0 = w1 * (k.row1[j] - a) + w2 * (k.row2[j] - b);
                dmu[0] += dphi0 * m0;
                dmu[1] += dphi0 * m1;
                dmu[2] += dphi1 * m0;
                dmu[3] += dphi1 * m1;
                let dm0 = mu00 * dphi0 + mu10 * dphi1;
                let dm1 = mu01 * dphi0 + mu11 * dphi1;
                dw[0] += dm1 * a + dm0 * (k.row1[j] - a);
                dw[1] += dm1 * b + dm0 * (k.row2[j] - b);
                da[j] = w1 * (dm1 - dm0);
                db[j] = w2 * (dm1 - dm0);
            }
            KernelMatrices::apply(&k.k1, &da, &mut tmp);
            for (pv, t) in prev.iter_mut().zip(&tmp) {
                *pv += *t;
            }
            KernelMatrices::apply(&k.k2, &db, &mut tmp);
            for (pv, t) in prev.iter_mut().zip(&tmp) {
                *pv += *t;
            }
            g = prev;
        }
        // The initial marginal is the unary itself.
        dp.iter().zip(&g).map(|(&d, &gq)| d + gq).collect()
    }
}

fn read_mu<S: Scalar>(mu: &Tensor<S>) -> Result<Mu<S>> {
    match mu.data() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(Error::structure(format!(
            "compatibility matrix must have 4 entries, got shape {:?}",
            mu.shape()
        ))),
    }
}

fn read_weights<S: Scalar>(w: &Tensor<S>) -> Result<(S, S)> {
    match w.data() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::structure(format!(
            "kernel weights must be [w1, w2], got shape {:?}",
            w.shape()
        ))),
    }
}

/// Clamped unary probabilities plus the mask of clamped entries.
pub(crate) fn clamp_all<S: Scalar>(v: &[S], what: &str) -> (Vec<S>, Vec<bool>) {
    let (p, mask): (Vec<S>, Vec<bool>) = v.iter().map(|&x| clamp_unary(x)).unzip();
    let n = mask.iter().filter(|&&c| c).count();
    if n > 0 {
        log::warn!("{what}: clamped {n} unary probabilities into [1e-6, 1 - 1e-6]");
    }
    (p, mask)
}

/// Checks that `len` elements split into one `m`-block per kernel set.
pub(crate) fn check_batch<S: Scalar>(kernels: &[Arc<KernelMatrices<S>>], len: usize) -> Result<()> {
    let total: usize = kernels.iter().map(|k| k.m).sum();
    if kernels.is_empty() || total != len {
        return Err(Error::structure(format!(
            "{len} attention values do not match {} kernel sets covering {total} pixels",
            kernels.len()
        )));
    }
    Ok(())
}

impl<S: Scalar> CustomOp<S> for MeanFieldOp<S> {
    fn name(&self) -> &'static str {
        "mean_field"
    }

    fn forward(&mut self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let [v, mu, w] = inputs else {
            return Err(Error::structure("mean_field takes unary, compatibility and weights"));
        };
        check_batch(&self.kernels, v.len())?;
        if v.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::structure("unary attention contains non-finite values"));
        }
        let mu = read_mu(mu)?;
        let w = read_weights(w)?;
        let (p, clamped) = clamp_all(v.data(), "mean_field");
        let mut out = Vec::with_capacity(p.len());
        let mut all_steps = Vec::with_capacity(self.kernels.len());
        let mut off = 0;
        for k in &self.kernels {
            let (q, steps) = self.forward_one(k, &p[off..off + k.m], mu, w);
            off += k.m;
            out.extend(q);
            all_steps.push(steps);
        }
        self.steps = all_steps;
        self.probs = p;
        self.clamped = clamped;
        Tensor::new(v.shape().to_vec(), out)
    }

    fn backward(&self, inputs: &[&Tensor<S>], _output: &Tensor<S>, grad_output: &[S]) -> Vec<Option<Vec<S>>> {
        let mu = read_mu(inputs[1]).expect("checked in forward");
        let w = read_weights(inputs[2]).expect("checked in forward");
        let mut dmu = [S::zero(); 4];
        let mut dw = [S::zero(); 2];
        let mut dv = Vec::with_capacity(self.probs.len());
        let mut off = 0;
        for (k, steps) in self.kernels.iter().zip(&self.steps) {
            let r = off..off + k.m;
            let d = self.backward_one(
                k,
                &self.probs[r.clone()],
                steps,
                &grad_output[r],
                mu,
                w,
                &mut dmu,
                &mut dw,
            );
            dv.extend(d);
            off += k.m;
        }
        for (d, &c) in dv.iter_mut().zip(&self.clamped) {
            if c {
                *d = S::zero();
            }
        }
        vec![Some(dv), Some(dmu.to_vec()), Some(dw.to_vec())]
    }

    fn hash_decisions(&self, state: &mut DefaultHasher) {
        self.clamped.hash(state);
    }
}

/// Records mean-field refinement of `unary` in `g`.
pub fn mean_field<S: Scalar>(
    g: &mut Graph<S>,
    unary: Var,
    mu: Var,
    weights: Var,
    kernels: Vec<Arc<KernelMatrices<S>>>,
    hyper: &CrfHyperParams,
) -> Result<Var> {
    hyper.validate()?;
    g.custom(&[unary, mu, weights], Box::new(MeanFieldOp::new(kernels, hyper)))
}

/// Mean-field marginals `Q(y=1)` without recording a graph.
pub fn mean_field_values<S: Scalar>(
    unary: &[S],
    kernels: Arc<KernelMatrices<S>>,
    mu: &super::CompatibilityMatrix,
    hyper: &CrfHyperParams,
) -> Result<Vec<S>> {
    hyper.validate()?;
    let mut op = MeanFieldOp::new(vec![kernels], hyper);
    let v = Tensor::new(vec![unary.len()], unary.to_vec())?;
    let mu = Tensor::new(vec![2, 2], mu.flat().iter().map(|&x| S::lit(x)).collect())?;
    let w = Tensor::new(vec![2], vec![S::lit(hyper.w1), S::lit(hyper.w2)])?;
    Ok(op.forward(&[&v, &mu, &w])?.into_data())
}
