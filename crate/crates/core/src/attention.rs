//! One branch per action unit: channel attention over the backbone features,
//! an initial spatial attention map, CRF refinement and the gated classifier.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{expected_crf_energy, mean_field, refine_and_gate, CrfHyperParams, GateLayers, KernelMatrices};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3x3, Dense};
use crate::scalar::Scalar;
use crate::tensor::{Bindings, Graph, NormMode, ParamId, ParamKind, ParamSet, Tensor, Var};

/// Which attention stages a branch builds. A disabled stage is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub channel_attention: bool,
    pub spatial_attention: bool,
    /// Only meaningful with spatial attention on.
    pub crf_refinement: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            channel_attention: true,
            spatial_attention: true,
            crf_refinement: true,
        }
    }
}

impl Ablation {
    pub fn uses_crf(&self) -> bool {
        self.spatial_attention && self.crf_refinement
    }
}

/// Per-image kernels plus the hyperparameters of one AU's CRF.
#[derive(Debug, Clone)]
pub struct CrfContext<S: Scalar> {
    pub kernels: Vec<Arc<KernelMatrices<S>>>,
    pub hyper: CrfHyperParams,
}

#[derive(Debug, Clone)]
pub struct AuBranch<S: Scalar> {
    pub conv1: Conv3x3,
    pub bn1: BatchNorm<S>,
    pub fc_c: Dense,
    pub conv2: Conv3x3,
    pub bn_c: BatchNorm<S>,
    pub conv3: Conv3x3,
    pub bn3: BatchNorm<S>,
    pub conv_s: Conv3x3,
    pub gate: GateLayers<S>,
    pub classifier: Dense,
    /// Label compatibility, `[2, 2]`, row = label of the updated pixel.
    pub mu: ParamId,
    pub width: usize,
}

/// Every intermediate of a branch forward pass that callers may inspect.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    /// Channel attention `[B, 12c]`.
    pub v_c: Option<Var>,
    /// Initial spatial attention `[B, l, l, 1]`.
    pub v0us: Option<Var>,
    /// Refined spatial attention `[B, l, l, 1]`; equals `v0us` without CRF.
    pub v_us: Option<Var>,
    /// Refined attention at feature resolution `[B, l/4, l/4, 1]`.
    pub v_s: Option<Var>,
    pub f1: Var,
    pub f_c: Var,
    pub f3: Var,
    pub f_p: Var,
    /// AU probability `[B, 1]`.
    pub prob: Var,
    /// Expected CRF energy per image `[B]`.
    pub crf_energy: Option<Var>,
}

impl<S: Scalar> AuBranch<S> {
    /// Branch reading `in_channels` backbone features with width `12c`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet<S>,
        rng: &mut R,
        index: usize,
        in_channels: usize,
        c: usize,
    ) -> Self {
        let p = format!("au{index}");
        let width = 12 * c;
        let conv = |params: &mut ParamSet<S>, rng: &mut R, name: &str, cin, cout, bias| {
            Conv3x3::new(params, rng, &format!("{p}.{name}"), cin, cout, 1, bias)
        };
        let conv1 = conv(params, rng, "conv1", in_channels, width, false);
        let bn1 = BatchNorm::new(params, rng, &format!("{p}.bn1"), width);
        let fc_c = Dense::new(params, rng, &format!("{p}.fc_c"), width, width);
        let conv2 = conv(params, rng, "conv2", width, width, true);
        let bn_c = BatchNorm::new(params, rng, &format!("{p}.bn_c"), width);
        let conv3 = conv(params, rng, "conv3", width, width, false);
        let bn3 = BatchNorm::new(params, rng, &format!("{p}.bn3"), width);
        let conv_s = conv(params, rng, "conv_s", width, 1, true);
        let gate = GateLayers::new(params, rng, &p, width);
        let classifier = Dense::new(params, rng, &format!("{p}.classifier"), width, 1);
        let mu = params.add(
            format!("{p}.mu"),
            ParamKind::Compatibility,
            Tensor::new(vec![2, 2], [0.0, 1.0, 1.0, 0.0].iter().map(|&v| S::lit(v)).collect()).expect("static shape"),
        );
        AuBranch {
            conv1,
            bn1,
            fc_c,
            conv2,
            bn_c,
            conv3,
            bn3,
            conv_s,
            gate,
            classifier,
            mu,
            width,
        }
    }

    /// Channel attention `sigmoid(W GAP(f1) + b)`, `[B, width]`.
    pub fn channel_attention(&self, g: &mut Graph<S>, bind: &Bindings, f1: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(f1)?;
        let logits = self.fc_c.forward(g, bind, pooled)?;
        Ok(g.sigmoid(logits))
    }

    /// Initial spatial attention at image resolution from `f3`.
    pub fn spatial_attention(&self, g: &mut Graph<S>, bind: &Bindings, f3: Var, side: usize) -> Result<Var> {
        let f3s = self.conv_s.forward(g, bind, f3)?;
        let up = g.bilinear_resize(f3s, side, side)?;
        Ok(g.sigmoid(up))
    }

    /// Runs the branch on backbone features `[B, l/4, l/4, 8c]` for images of side `side`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        g: &mut Graph<S>,
        bind: &Bindings,
        features: Var,
        side: usize,
        ablation: Ablation,
        crf: Option<&CrfContext<S>>,
        kernel_weights: Var,
        mode: NormMode,
    ) -> Result<BranchOutput> {
        let f1 = self.conv1.forward(g, bind, features)?;
        let f1 = self.bn1.forward_relu(g, bind, f1, mode)?;
        let f2 = self.conv2.forward(g, bind, f1)?;
        let (v_c, scaled) = if ablation.channel_attention {
            let v_c = self.channel_attention(g, bind, f1)?;
            (Some(v_c), g.channel_scale(v_c, f2)?)
        } else {
            (None, f2)
        };
        let f_c = self.bn_c.forward_relu(g, bind, scaled, mode)?;
        let f3 = self.conv3.forward(g, bind, f_c)?;
        let f3 = self.bn3.forward_relu(g, bind, f3, mode)?;

        let (mut v0us, mut v_us, mut energy) = (None, None, None);
        if ablation.spatial_attention {
            let v0 = self.spatial_attention(g, bind, f3, side)?;
            v0us = Some(v0);
            v_us = Some(v0);
            if ablation.crf_refinement {
                let ctx = crf.ok_or_else(|| Error::InvalidState("CRF refinement needs kernels".into()))?;
                let mu = bind.var(self.mu);
                let q = mean_field(g, v0, mu, kernel_weights, ctx.kernels.clone(), &ctx.hyper)?;
                energy = Some(expected_crf_energy(g, q, v0, mu, kernel_weights, ctx.kernels.clone())?);
                v_us = Some(q);
            }
        }
        let gate = refine_and_gate(g, bind, &mut self.gate, v_us, f3, mode)?;
        let logit = self.classifier.forward(g, bind, gate.f_p)?;
        let prob = g.sigmoid(logit);
        Ok(BranchOutput {
            v_c,
            v0us,
            v_us,
            v_s: gate.v_s,
            f1,
            f_c,
            f3,
            f_p: gate.f_p,
            prob,
            crf_energy: energy,
        })
    }
}
