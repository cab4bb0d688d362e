//! Self-checks shared by the command line and the test suites: a
//! finite-difference check of the whole model and a comparison of mean-field
//! marginals against exact enumeration.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::crf::{brute_force_marginals, mean_field_values, CompatibilityMatrix, CrfHyperParams, KernelMatrices};
use crate::error::Result;
use crate::head::AuWeights;
use crate::model::{Model, ModelSpec};
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, GradFragment};
use crate::tensor::{Bindings, Graph, NormMode, ParamSet, Tensor, Var};

struct ModelFragment {
    model: Model<f64>,
    images: Tensor<f64>,
    labels: Vec<bool>,
    weights: AuWeights,
}

impl GradFragment<f64> for ModelFragment {
    fn params(&mut self) -> &mut ParamSet<f64> {
        &mut self.model.params
    }

    fn forward_loss(&mut self) -> Result<(Graph<f64>, Var, Bindings)> {
        let (pass, loss) = self
            .model
            .forward_loss(&self.images, &self.labels, &self.weights, NormMode::Training)?;
        Ok((pass.graph, loss.total, pass.bind))
    }
}

/// Checks every parameter gradient of the full training loss (detection plus
/// CRF energy) on a random batch of `batch` images.
pub fn model_grad_check(
    config: &RunConfig,
    batch: usize,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    config.validate()?;
    let model = Model::new(ModelSpec::from_config(config), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = config.l;
    let pixels: Vec<f64> = (0..batch * l * l * 3).map(|_| rng.gen()).collect();
    let images = Tensor::new(vec![batch, l, l, 3], pixels)?;
    let labels: Vec<bool> = (0..batch * config.n).map(|_| rng.gen()).collect();
    let mut frag = ModelFragment {
        model,
        images,
        labels,
        weights: AuWeights::uniform(config.n),
    };
    grad_check(&mut frag, opts)
}

/// A small random CRF: pixels at random positions in a 3x3 square with
/// random colours, and unary probabilities in `[0.05, 0.95]`.
pub fn random_crf_instance<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    hyper: &CrfHyperParams,
) -> Result<(Vec<f64>, KernelMatrices<f64>)> {
    let positions: Vec<(f64, f64)> = (0..m)
        .map(|_| (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)))
        .collect();
    let colors: Vec<[f64; 3]> = (0..m).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let unary = (0..m).map(|_| rng.gen_range(0.05..0.95)).collect();
    Ok((unary, KernelMatrices::from_points(&positions, &colors, hyper)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleComparison {
    pub instances: usize,
    pub pixels: usize,
    /// Largest |mean field - exact| over all pixels of all instances.
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
}

/// Mean field against exact Gibbs marginals on `instances` random problems
/// with a Potts compatibility.
pub fn crf_oracle_comparison(
    instances: usize,
    m: usize,
    hyper: &CrfHyperParams,
    seed: u64,
) -> Result<OracleComparison> {
    hyper.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let potts = CompatibilityMatrix::potts();
    let (mut worst, mut total) = (0.0f64, 0.0);
    for _ in 0..instances {
        let (unary, kernels) = random_crf_instance(&mut rng, m, hyper)?;
        let exact = brute_force_marginals(&unary, &kernels, &potts, hyper.w1, hyper.w2)?;
        let q = mean_field_values(&unary, Arc::new(kernels), &potts, hyper)?;
        for (a, b) in q.iter().zip(&exact) {
            worst = worst.max((a - b).abs());
            total += (a - b).abs();
        }
    }
    Ok(OracleComparison {
        instances,
        pixels: m,
        max_abs_diff: worst,
        mean_abs_diff: total / (instances * m).max(1) as f64,
    })
}
