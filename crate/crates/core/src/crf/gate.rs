use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3x3};
use crate::scalar::Scalar;
use crate::tensor::{Bindings, Graph, NormMode, ParamSet, Var};

/// Layers between the refined attention and an AU's pooled feature.
#[derive(Debug, Clone)]
pub struct GateLayers<S: Scalar> {
    pub conv4: Conv3x3,
    pub bn_s: BatchNorm<S>,
    pub conv5: Conv3x3,
}

impl<S: Scalar> GateLayers<S> {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet<S>, rng: &mut R, prefix: &str, width: usize) -> Self {
        GateLayers {
            conv4: Conv3x3::new(params, rng, &format!("{prefix}.conv4"), width, width, 1, true),
            bn_s: BatchNorm::new(params, rng, &format!("{prefix}.bn_s"), width),
            conv5: Conv3x3::new(params, rng, &format!("{prefix}.conv5"), width, width, 1, true),
        }
    }
}

/// Intermediate maps of [`refine_and_gate`].
#[derive(Debug, Clone, Copy)]
pub struct GateOutput {
    /// Refined attention at feature resolution, `[B, l/4, l/4, 1]`; `None` when gating is off.
    pub v_s: Option<Var>,
    pub f4: Var,
    /// `v_s * f4` before normalisation.
    pub gated: Var,
    pub f_s: Var,
    /// Pooled feature `[B, width]`.
    pub f_p: Var,
}

/// Downsamples the refined attention to the feature grid, gates `conv4(f3)`
/// with it and pools `conv5` of the normalised result.
///
/// With `v_us = None` the gate is the identity.
pub fn refine_and_gate<S: Scalar>(
    g: &mut Graph<S>,
    bind: &Bindings,
    layers: &mut GateLayers<S>,
    v_us: Option<Var>,
    f3: Var,
    mode: NormMode,
) -> Result<GateOutput> {
    let (_, h, w, _) = g.value(f3).dims4()?;
    let f4 = layers.conv4.forward(g, bind, f3)?;
    let (v_s, gated) = match v_us {
        Some(v) => {
            let (_, vh, vw, vc) = g.value(v).dims4()?;
            if vc != 1 || vh < h || vw < w {
                return Err(Error::structure(format!(
                    "refined attention {vh}x{vw}x{vc} cannot gate a {h}x{w} feature map"
                )));
            }
            let v_s = g.bilinear_resize(v, h, w)?;
            (Some(v_s), g.spatial_scale(v_s, f4)?)
        }
        None => (None, f4),
    };
    let f_s = layers.bn_s.forward_relu(g, bind, gated, mode)?;
    let f5 = layers.conv5.forward(g, bind, f_s)?;
    let f_p = g.global_avg_pool(f5)?;
    Ok(GateOutput {
        v_s,
        f4,
        gated,
        f_s,
        f_p,
    })
}
