use crate::scalar::Scalar;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Training,
    /// Running statistics only; the layer is a fixed affine map.
    Inference,
}

/// Running statistics of one batch-norm layer. The learnable scale and shift
/// live with the other parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<S: Scalar> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub eps: S,
    pub momentum: S,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            eps: S::lit(BN_EPSILON),
            momentum: S::lit(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}
