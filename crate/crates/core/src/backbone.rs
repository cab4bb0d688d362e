//! Shared feature extractor: two multi-scale region blocks, each followed by
//! 2x2 max pooling.
//!
//! A block runs an input convolution, then four banks of patch convolutions
//! over 8x8, 4x4, 2x2 and 1x1 partitions of the map. Every patch of a bank
//! has its own filters and sees only its own pixels (zero padding at patch
//! borders). The four bank outputs are concatenated, added to the input
//! convolution's activation and normalised.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3x3};
use crate::scalar::Scalar;
use crate::tensor::{Bindings, Graph, NormMode, ParamSet, Var};

/// Partitions per side of the four patch banks, coarsest split first.
pub const PARTITIONS: [usize; 4] = [8, 4, 2, 1];

#[derive(Debug, Clone)]
pub struct MultiScaleBlock<S: Scalar> {
    pub input_conv: Conv3x3,
    pub bn_in: BatchNorm<S>,
    pub banks: Vec<Conv3x3>,
    pub bn_out: BatchNorm<S>,
    pub cin: usize,
    pub cout: usize,
}

impl<S: Scalar> MultiScaleBlock<S> {
    /// Block mapping `cin` to `cout` channels; `cout` must split into four banks.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        if cout == 0 || !cout.is_multiple_of(4) {
            return Err(Error::structure(format!(
                "block width {cout} does not split into four equal banks"
            )));
        }
        // Biases that a training-mode batch norm would cancel are omitted.
        let banks = PARTITIONS
            .iter()
            .map(|&k| Conv3x3::new(params, rng, &format!("{name}.bank{k}"), cout, cout / 4, k, k > 1))
            .collect();
        Ok(MultiScaleBlock {
            input_conv: Conv3x3::new(params, rng, &format!("{name}.input"), cin, cout, 1, false),
            bn_in: BatchNorm::new(params, rng, &format!("{name}.bn_in"), cout),
            banks,
            bn_out: BatchNorm::new(params, rng, &format!("{name}.bn_out"), cout),
            cin,
            cout,
        })
    }

    pub fn forward(&mut self, g: &mut Graph<S>, bind: &Bindings, x: Var, mode: NormMode) -> Result<Var> {
        let (_, h, w, c) = g.value(x).dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::structure(format!(
                "multi-scale block needs sides divisible by 8, got {h}x{w}"
            )));
        }
        if c != self.cin {
            return Err(Error::structure(format!(
                "block expects {} channels, got {c}",
                self.cin
            )));
        }
        let pre = self.input_conv.forward(g, bind, x)?;
        let base = self.bn_in.forward_relu(g, bind, pre, mode)?;
        let parts = self
            .banks
            .iter()
            .map(|bank| bank.forward(g, bind, base))
            .collect::<Result<Vec<_>>>()?;
        let joined = g.concat_channels(&parts)?;
        let sum = g.add(joined, base)?;
        self.bn_out.forward_relu(g, bind, sum, mode)
    }
}

/// Two blocks, `3 -> 4c` and `4c -> 8c`, each followed by max pooling.
#[derive(Debug, Clone)]
pub struct Backbone<S: Scalar> {
    pub block1: MultiScaleBlock<S>,
    pub block2: MultiScaleBlock<S>,
    pub c: usize,
}

impl<S: Scalar> Backbone<S> {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet<S>, rng: &mut R, c: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::structure("width unit c must be positive"));
        }
        Ok(Backbone {
            block1: MultiScaleBlock::new(params, rng, "backbone.block1", 3, 4 * c)?,
            block2: MultiScaleBlock::new(params, rng, "backbone.block2", 4 * c, 8 * c)?,
            c,
        })
    }

    pub fn out_channels(&self) -> usize {
        8 * self.c
    }

    /// Images `[B, l, l, 3]` to features `[B, l/4, l/4, 8c]`.
    pub fn forward(&mut self, g: &mut Graph<S>, bind: &Bindings, image: Var, mode: NormMode) -> Result<Var> {
        let (_, h, w, _) = g.value(image).dims4()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::structure(format!(
                "backbone needs image sides divisible by 16, got {h}x{w}"
            )));
        }
        let x = self.block1.forward(g, bind, image, mode)?;
        let x = g.max_pool2x2(x)?;
        let x = self.block2.forward(g, bind, x, mode)?;
        g.max_pool2x2(x)
    }
}
