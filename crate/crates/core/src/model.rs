//! The complete network: shared backbone, one attention branch per AU, and
//! the training loss.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AuBranch, BranchOutput, CrfContext};
use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::crf::{build_kernels_shared, smoothness_kernel, CrfHyperParams, KernelMatrices};
use crate::error::{Error, Result};
use crate::head::{detection_loss, total_loss, AuWeights};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormState, Bindings, Graph, NormMode, ParamSet, Tensor, Var};

/// Per-image kernel matrices, reused across AUs with equal bandwidths and,
/// up to a bounded count, across passes over the same image.
#[derive(Debug, Clone, Default)]
pub struct KernelStore<S: Scalar> {
    smooth: HashMap<(usize, usize, u64), Arc<Vec<S>>>,
    images: HashMap<u64, Vec<CachedKernels<S>>>,
    order: VecDeque<u64>,
    limit: usize,
}

#[derive(Debug, Clone)]
struct CachedKernels<S: Scalar> {
    image: Vec<S>,
    bandwidths: [u64; 3],
    kernels: Arc<KernelMatrices<S>>,
}

fn bandwidth_key(h: &CrfHyperParams) -> [u64; 3] {
    [h.alpha.to_bits(), h.beta.to_bits(), h.gamma.to_bits()]
}

fn image_key<S: Scalar>(image: &[S], bw: [u64; 3]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in image {
        v.as_f64().to_bits().hash(&mut h);
    }
    bw.hash(&mut h);
    h.finish()
}

impl<S: Scalar> KernelStore<S> {
    pub fn new(limit: usize) -> Self {
        KernelStore {
            limit,
            ..Self::default()
        }
    }

    /// Kernels for `image` (`[1, h, w, 3]`) under `hyper`.
    pub fn get(&mut self, image: &Tensor<S>, hyper: &CrfHyperParams) -> Result<Arc<KernelMatrices<S>>> {
        let (_, h, w, _) = image.dims4()?;
        let smooth = self
            .smooth
            .entry((h, w, hyper.gamma.to_bits()))
            .or_insert_with(|| smoothness_kernel(h, w, hyper.gamma))
            .clone();
        let bw = bandwidth_key(hyper);
        if self.limit == 0 {
            return Ok(Arc::new(build_kernels_shared(image, hyper, smooth)?));
        }
        let key = image_key(image.data(), bw);
        if let Some(hit) = self
            .images
            .get(&key)
            .and_then(|v| v.iter().find(|c| c.bandwidths == bw && c.image == image.data()))
        {
            return Ok(hit.kernels.clone());
        }
        let kernels = Arc::new(build_kernels_shared(image, hyper, smooth)?);
        if self.order.len() >= self.limit {
            if let Some(old) = self.order.pop_front() {
                self.images.remove(&old);
            }
        }
        self.order.push_back(key);
        self.images.entry(key).or_default().push(CachedKernels {
            image: image.data().to_vec(),
            bandwidths: bw,
            kernels: kernels.clone(),
        });
        Ok(kernels)
    }
}

/// Shapes and switches the network is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub l: usize,
    pub c: usize,
    pub n: usize,
    pub ablation: crate::attention::Ablation,
    pub crf: Vec<CrfHyperParams>,
    pub crf_loss_weight: f64,
    pub crf_loss_per_pixel: bool,
    pub kernel_cache: usize,
}

impl ModelSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ModelSpec {
            l: cfg.l,
            c: cfg.c,
            n: cfg.n,
            ablation: cfg.ablation,
            crf: (0..cfg.n).map(|i| cfg.crf_hyper(i)).collect(),
            crf_loss_weight: cfg.crf_loss_weight,
            crf_loss_per_pixel: cfg.crf_loss_per_pixel,
            kernel_cache: cfg.kernel_cache,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub spec: ModelSpec,
    pub params: ParamSet<S>,
    pub backbone: Backbone<S>,
    pub branches: Vec<AuBranch<S>>,
    pub kernels: KernelStore<S>,
}

/// Everything recorded by one forward pass.
pub struct ForwardPass<S: Scalar> {
    pub graph: Graph<S>,
    pub bind: Bindings,
    pub features: Var,
    /// AU probabilities `[B, n]`.
    pub probs: Var,
    pub branches: Vec<BranchOutput>,
}

impl<S: Scalar> ForwardPass<S> {
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        let t = self.graph.value(self.probs);
        let n = *t.shape().last().expect("rank 2");
        t.data()
            .chunks(n)
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect()
    }
}

/// Loss nodes of a training pass.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub detection: Var,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with Glorot-initialised weights drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.l == 0 || !spec.l.is_multiple_of(16) {
            return Err(Error::structure(format!(
                "image side {} must be a multiple of 16",
                spec.l
            )));
        }
        if spec.crf.len() != spec.n {
            return Err(Error::structure("one CRF setting per AU is required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, &mut rng, spec.c)?;
        let branches = (0..spec.n)
            .map(|i| AuBranch::new(&mut params, &mut rng, i + 1, backbone.out_channels(), spec.c))
            .collect();
        Ok(Model {
            kernels: KernelStore::new(spec.kernel_cache),
            spec,
            params,
            backbone,
            branches,
        })
    }

    /// Running statistics of every batch-norm layer, in a fixed order.
    pub fn norm_states_mut(&mut self) -> Vec<&mut BatchNormState<S>> {
        let mut out = Vec::new();
        for block in [&mut self.backbone.block1, &mut self.backbone.block2] {
            out.push(&mut block.bn_in.state);
            out.push(&mut block.bn_out.state);
        }
        for b in &mut self.branches {
            out.push(&mut b.bn1.state);
            out.push(&mut b.bn_c.state);
            out.push(&mut b.bn3.state);
            out.push(&mut b.gate.bn_s.state);
        }
        out
    }

    fn crf_contexts(&mut self, images: &Tensor<S>) -> Result<Vec<Option<CrfContext<S>>>> {
        if !self.spec.ablation.uses_crf() {
            return Ok(vec![None; self.spec.n]);
        }
        let (b, _, _, _) = images.dims4()?;
        let items: Vec<Tensor<S>> = (0..b).map(|i| images.batch_item(i)).collect();
        let mut out = Vec::with_capacity(self.spec.n);
        for hyper in self.spec.crf.clone() {
            let kernels = items
                .iter()
                .map(|img| self.kernels.get(img, &hyper))
                .collect::<Result<Vec<_>>>()?;
            out.push(Some(CrfContext { kernels, hyper }));
        }
        Ok(out)
    }

    /// Records the network on `images` (`[B, l, l, 3]`).
    pub fn forward(&mut self, images: &Tensor<S>, mode: NormMode) -> Result<ForwardPass<S>> {
        let (b, h, w, c) = images.dims4()?;
        if (h, w, c) != (self.spec.l, self.spec.l, 3) {
            return Err(Error::structure(format!(
                "model expects [B, {l}, {l}, 3] images, got {:?}",
                images.shape(),
                l = self.spec.l
            )));
        }
        let contexts = self.crf_contexts(images)?;
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g);
        let x = g.constant(images.clone());
        let features = self.backbone.forward(&mut g, &bind, x, mode)?;
        let mut outputs = Vec::with_capacity(self.spec.n);
        for ((branch, ctx), hyper) in self.branches.iter_mut().zip(&contexts).zip(&self.spec.crf) {
            let weights = g.constant(Tensor::new(vec![2], vec![S::lit(hyper.w1), S::lit(hyper.w2)])?);
            outputs.push(branch.forward(
                &mut g,
                &bind,
                features,
                self.spec.l,
                self.spec.ablation,
                ctx.as_ref(),
                weights,
                mode,
            )?);
        }
        let cols = outputs
            .iter()
            .map(|o| g.reshape(o.prob, &[b, 1, 1, 1]))
            .collect::<Result<Vec<_>>>()?;
        let joined = g.concat_channels(&cols)?;
        let probs = g.reshape(joined, &[b, self.spec.n])?;
        Ok(ForwardPass {
            graph: g,
            bind,
            features,
            probs,
            branches: outputs,
        })
    }

    /// Forward pass plus detection and CRF losses. `labels` is row-major `[B, n]`.
    pub fn forward_loss(
        &mut self,
        images: &Tensor<S>,
        labels: &[bool],
        weights: &AuWeights,
        mode: NormMode,
    ) -> Result<(ForwardPass<S>, LossNodes)> {
        let mut pass = self.forward(images, mode)?;
        let g = &mut pass.graph;
        let b = images.shape()[0];
        let det = detection_loss(g, pass.probs, labels, weights)?;
        let mut scale = self.spec.crf_loss_weight / b as f64;
        if self.spec.crf_loss_per_pixel {
            scale /= (self.spec.l * self.spec.l) as f64;
        }
        let mut terms = Vec::new();
        for out in &pass.branches {
            if let Some(e) = out.crf_energy {
                let s = g.sum(e);
                terms.push(g.scale(s, S::lit(scale)));
            }
        }
        let total = total_loss(g, det, &terms)?;
        Ok((pass, LossNodes { total, detection: det }))
    }
}
