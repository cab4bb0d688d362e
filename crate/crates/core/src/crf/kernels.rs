use std::sync::Arc;

use super::CrfHyperParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Appearance (`k1`) and smoothness (`k2`) kernels between all pixel pairs.
///
/// Both are symmetric `m x m` row-major matrices with zero diagonal. The
/// smoothness kernel depends on geometry only and is shared between images.
#[derive(Debug, Clone)]
pub struct KernelMatrices<S: Scalar> {
    pub m: usize,
    pub k1: Vec<S>,
    pub k2: Arc<Vec<S>>,
    /// Row sums of `k1` and `k2`.
    pub row1: Vec<S>,
    pub row2: Arc<Vec<S>>,
    /// Sums over `k > j` of row `j`.
    pub upper1: Vec<S>,
    pub upper2: Arc<Vec<S>>,
}

fn grid_positions(h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..h * w).map(|j| ((j / w) as f64, (j % w) as f64)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row_sums<S: Scalar>(k: &[S], m: usize) -> (Vec<S>, Vec<S>) {
    let mut row = vec![S::zero(); m];
    let mut upper = vec![S::zero(); m];
    for j in 0..m {
        let r = &k[j * m..(j + 1) * m];
        row[j] = r.iter().copied().sum();
        upper[j] = r[j + 1..].iter().copied().sum();
    }
    (row, upper)
}

fn gaussian_matrix<S: Scalar>(m: usize, mut exponent: impl FnMut(usize, usize) -> f64) -> Vec<S> {
    let mut k = vec![S::zero(); m * m];
    for j in 0..m {
        for i in j + 1..m {
            let v = S::lit((-exponent(j, i)).exp());
            k[j * m + i] = v;
            k[i * m + j] = v;
        }
    }
    k
}

/// Position-only kernel `exp(-|p_j - p_k|^2 / (2 gamma^2))` on an `h x w` grid.
pub fn smoothness_kernel<S: Scalar>(h: usize, w: usize, gamma: f64) -> Arc<Vec<S>> {
    let pos = grid_positions(h, w);
    let denom = 2.0 * gamma * gamma;
    Arc::new(gaussian_matrix(h * w, |j, i| {
        sq_dist(&[pos[j].0, pos[j].1], &[pos[i].0, pos[i].1]) / denom
    }))
}

/// Image as `(h, w, rgb values)`, accepting `[h, w, 3]` or `[1, h, w, 3]`.
fn image_pixels<S: Scalar>(image: &Tensor<S>) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let (h, w) = match image.shape() {
        [h, w, 3] | [1, h, w, 3] => (*h, *w),
        s => {
            return Err(Error::structure(format!(
                "CRF kernels need an [h, w, 3] image, got {s:?}"
            )))
        }
    };
    let colors = image
        .data()
        .chunks_exact(3)
        .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
        .collect();
    Ok((h, w, colors))
}

/// Kernels on the integer pixel grid of `image`.
pub fn build_kernels<S: Scalar>(image: &Tensor<S>, hyper: &CrfHyperParams) -> Result<KernelMatrices<S>> {
    let (h, w, _) = image_pixels(image)?;
    build_kernels_shared(image, hyper, smoothness_kernel(h, w, hyper.gamma))
}

/// As [`build_kernels`] with a precomputed smoothness kernel for the same grid.
pub fn build_kernels_shared<S: Scalar>(
    image: &Tensor<S>,
    hyper: &CrfHyperParams,
    smooth: Arc<Vec<S>>,
) -> Result<KernelMatrices<S>> {
    let (h, w, colors) = image_pixels(image)?;
    let m = h * w;
    if smooth.len() != m * m {
        return Err(Error::structure(format!(
            "smoothness kernel has {} entries, {m} pixels need {}",
            smooth.len(),
            m * m
        )));
    }
    let pos = grid_positions(h, w);
    Ok(KernelMatrices::assemble(m, appearance(&pos, &colors, hyper), smooth))
}

fn appearance<S: Scalar>(pos: &[(f64, f64)], colors: &[[f64; 3]], hyper: &CrfHyperParams) -> Vec<S> {
    let (da, db) = (2.0 * hyper.alpha * hyper.alpha, 2.0 * hyper.beta * hyper.beta);
    gaussian_matrix(pos.len(), |j, i| {
        sq_dist(&[pos[j].0, pos[j].1], &[pos[i].0, pos[i].1]) / da + sq_dist(&colors[j], &colors[i]) / db
    })
}

impl<S: Scalar> KernelMatrices<S> {
    fn assemble(m: usize, k1: Vec<S>, k2: Arc<Vec<S>>) -> Self {
        let (row1, upper1) = row_sums(&k1, m);
        let (row2, upper2) = row_sums(&k2, m);
        KernelMatrices {
            m,
            k1,
            k2,
            row1,
            row2: Arc::new(row2),
            upper1,
            upper2: Arc::new(upper2),
        }
    }

    /// Kernels for arbitrary points, e.g. small oracle instances.
    pub fn from_points(positions: &[(f64, f64)], colors: &[[f64; 3]], hyper: &CrfHyperParams) -> Result<Self> {
        if positions.len() != colors.len() || positions.is_empty() {
            return Err(Error::structure(
                "positions and colours must be non-empty and equal in number",
            ));
        }
        let m = positions.len();
        let g2 = 2.0 * hyper.gamma * hyper.gamma;
        let k2 = gaussian_matrix(m, |j, i| {
            sq_dist(&[positions[j].0, positions[j].1], &[positions[i].0, positions[i].1]) / g2
        });
        Ok(Self::assemble(m, appearance(positions, colors, hyper), Arc::new(k2)))
    }

    /// Kernels given directly as dense matrices (symmetry and zero diagonal checked).
    pub fn from_dense(m: usize, k1: Vec<S>, k2: Vec<S>) -> Result<Self> {
        for k in [&k1, &k2] {
            if k.len() != m * m {
                return Err(Error::structure("kernel matrix size does not match pixel count"));
            }
            for j in 0..m {
                if k[j * m + j] != S::zero() {
                    return Err(Error::structure("kernel diagonal must be zero"));
                }
                for i in 0..j {
                    if k[j * m + i] != k[i * m + j] {
                        return Err(Error::structure("kernel matrix must be symmetric"));
                    }
                }
            }
        }
        Ok(Self::assemble(m, k1, Arc::new(k2)))
    }

    /// `out = K x` for a symmetric kernel (so also `K^T x`).
    pub(crate) fn apply(k: &[S], x: &[S], out: &mut [S]) {
        let m = x.len();
        for (j, o) in out.iter_mut().enumerate() {
            let row = &k[j * m..(j + 1) * m];
            let mut acc = S::zero();
            for (&kv, &xv) in row.iter().zip(x) {
                acc += kv * xv;
            }
            *o = acc;
        }
    }

    pub fn k1_at(&self, j: usize, k: usize) -> S {
        self.k1[j * self.m + k]
    }

    pub fn k2_at(&self, j: usize, k: usize) -> S {
        self.k2[j * self.m + k]
    }
}
