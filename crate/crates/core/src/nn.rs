//! Parameterised layers that register their tensors in a [`ParamSet`].

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{BatchNormState, Bindings, Graph, Initializer, NormMode, ParamId, ParamKind, ParamSet, Var};

/// 3x3 convolution, optionally split into independently filtered `k x k` tiles.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub patches: usize,
}

impl Conv3x3 {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        patches: usize,
        with_bias: bool,
    ) -> Self {
        let init = Initializer::Glorot {
            fan_in: 9 * cin,
            fan_out: 9 * cout,
        };
        let (wshape, bshape) = if patches == 1 {
            (vec![3, 3, cin, cout], vec![cout])
        } else {
            (vec![patches * patches, 3, 3, cin, cout], vec![patches * patches, cout])
        };
        let weight = params.add(format!("{name}.weight"), ParamKind::Weight, init.build(rng, &wshape));
        let bias = with_bias.then(|| {
            params.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Initializer::Zeros.build(rng, &bshape),
            )
        });
        Conv3x3 {
            weight,
            bias,
            cin,
            cout,
            patches,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Bindings, x: Var) -> Result<Var> {
        g.patch_conv3x3(x, bind.var(self.weight), self.bias.map(|b| bind.var(b)), self.patches)
    }
}

/// Fully connected layer `[k] -> [m]` with bias.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        k: usize,
        m: usize,
    ) -> Self {
        let init = Initializer::Glorot { fan_in: k, fan_out: m };
        Dense {
            weight: params.add(format!("{name}.weight"), ParamKind::Weight, init.build(rng, &[k, m])),
            bias: params.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Initializer::Zeros.build(rng, &[m]),
            ),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Bindings, x: Var) -> Result<Var> {
        g.linear(x, bind.var(self.weight), Some(bind.var(self.bias)))
    }
}

/// Batch norm layer: learnable scale/shift plus running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<S: Scalar> {
    pub scale: ParamId,
    pub shift: ParamId,
    pub state: BatchNormState<S>,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet<S>, rng: &mut R, name: &str, channels: usize) -> Self {
        BatchNorm {
            scale: params.add(
                format!("{name}.scale"),
                ParamKind::NormScale,
                Initializer::Ones.build(rng, &[channels]),
            ),
            shift: params.add(
                format!("{name}.shift"),
                ParamKind::NormShift,
                Initializer::Zeros.build(rng, &[channels]),
            ),
            state: BatchNormState::new(channels),
        }
    }

    pub fn forward(&mut self, g: &mut Graph<S>, bind: &Bindings, x: Var, mode: NormMode) -> Result<Var> {
        g.batch_norm(x, bind.var(self.scale), bind.var(self.shift), &mut self.state, mode)
    }

    /// BN followed by ReLU.
    pub fn forward_relu(&mut self, g: &mut Graph<S>, bind: &Bindings, x: Var, mode: NormMode) -> Result<Var> {
        let y = self.forward(g, bind, x, mode)?;
        Ok(g.relu(y))
    }
}
