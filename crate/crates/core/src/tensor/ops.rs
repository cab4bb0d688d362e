//! Forward and backward kernels for the built-in graph operations.

use super::norm::{BatchNormState, NormMode};
use super::storage::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{CompensatedSum, Scalar};

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn zip_same<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::structure(format!(
            "elementwise shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

// ---------------------------------------------------------------- convolution

struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

fn conv_geom<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: Option<&Tensor<S>>, k: usize) -> Result<ConvGeom> {
    let (b, h, w, cin) = input.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::structure(format!(
            "{h}x{w} map cannot be split into {k}x{k} patches"
        )));
    }
    let ws = weight.shape();
    let (wk, wcin, cout) = match ws {
        [3, 3, ci, co] if k == 1 => (1, *ci, *co),
        [p, 3, 3, ci, co] => (*p, *ci, *co),
        _ => {
            return Err(Error::structure(format!(
                "conv weight shape {ws:?} is not [3, 3, cin, cout] or [patches, 3, 3, cin, cout]"
            )))
        }
    };
    if wk != k * k {
        return Err(Error::structure(format!(
            "{k}x{k} partition needs {} filter sets, weight has {wk}",
            k * k
        )));
    }
    if wcin != cin {
        return Err(Error::structure(format!(
            "conv input has {cin} channels but filters expect {wcin}"
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != k * k * cout {
            return Err(Error::structure(format!(
                "conv bias has {} values, expected {}",
                bias.len(),
                k * k * cout
            )));
        }
    }
    Ok(ConvGeom { b, h, w, cin, cout, k })
}

/// Visits every (output position, in-patch tap) pair of a patched 3x3 convolution.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (ph, pw) = (g.h / g.k, g.w / g.k);
    let filt = 9 * g.cin * g.cout;
    for b in 0..g.b {
        for y in 0..g.h {
            let py = y / ph;
            let (y0, y1) = (py * ph, py * ph + ph);
            for x in 0..g.w {
                let px = x / pw;
                let (x0, x1) = (px * pw, px * pw + pw);
                let patch = py * g.k + px;
                let out = ((b * g.h + y) * g.w + x) * g.cout;
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < y0 + 1 || iy > y1 {
                        continue;
                    }
                    let iy = iy - 1;
                    for kx in 0..3 {
                        let ix = x + kx;
                        if ix < x0 + 1 || ix > x1 {
                            continue;
                        }
                        let ix = ix - 1;
                        let inp = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let wb = patch * filt + (ky * 3 + kx) * g.cin * g.cout;
                        f(out, inp, wb, patch);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    k: usize,
) -> Result<Tensor<S>> {
    let g = conv_geom(input, weight, bias, k)?;
    let (x, wt) = (input.data(), weight.data());
    let mut out = vec![S::zero(); g.b * g.h * g.w * g.cout];
    if let Some(bias) = bias {
        let (ph, pw) = (g.h / g.k, g.w / g.k);
        for b in 0..g.b {
            for y in 0..g.h {
                for xx in 0..g.w {
                    let patch = (y / ph) * g.k + xx / pw;
                    let o = ((b * g.h + y) * g.w + xx) * g.cout;
                    out[o..o + g.cout].copy_from_slice(&bias.data()[patch * g.cout..(patch + 1) * g.cout]);
                }
            }
        }
    }
    let (cin, cout) = (g.cin, g.cout);
    for_each_tap(&g, |o, i, wb, _| {
        let dst = &mut out[o..o + cout];
        for ci in 0..cin {
            let a = x[i + ci];
            if a == S::zero() {
                continue;
            }
            let row = &wt[wb + ci * cout..wb + (ci + 1) * cout];
            for (d, &w) in dst.iter_mut().zip(row) {
                *d += a * w;
            }
        }
    });
    Tensor::new([g.b, g.h, g.w, g.cout], out)
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &[S],
    k: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let g = conv_geom(input, weight, None, k).expect("validated in forward");
    let (x, wt) = (input.data(), weight.data());
    let (cin, cout) = (g.cin, g.cout);
    let mut gi = need_input.then(|| vec![S::zero(); x.len()]);
    let mut gw = need_weight.then(|| vec![S::zero(); wt.len()]);
    if need_input || need_weight {
        for_each_tap(&g, |o, i, wb, _| {
            let go = &grad_out[o..o + cout];
            for ci in 0..cin {
                let row = wb + ci * cout;
                if let Some(gi) = gi.as_mut() {
                    let mut acc = S::zero();
                    for (&gv, &w) in go.iter().zip(&wt[row..row + cout]) {
                        acc += gv * w;
                    }
                    gi[i + ci] += acc;
                }
                if let Some(gw) = gw.as_mut() {
                    let a = x[i + ci];
                    if a != S::zero() {
                        for (d, &gv) in gw[row..row + cout].iter_mut().zip(go) {
                            *d += a * gv;
                        }
                    }
                }
            }
        });
    }
    let gb = need_bias.then(|| {
        let mut gb = vec![S::zero(); g.k * g.k * cout];
        let (ph, pw) = (g.h / g.k, g.w / g.k);
        for b in 0..g.b {
            for y in 0..g.h {
                for xx in 0..g.w {
                    let patch = (y / ph) * g.k + xx / pw;
                    let o = ((b * g.h + y) * g.w + xx) * cout;
                    for (d, &gv) in gb[patch * cout..(patch + 1) * cout]
                        .iter_mut()
                        .zip(&grad_out[o..o + cout])
                    {
                        *d += gv;
                    }
                }
            }
        }
        gb
    });
    (gi, gw, gb)
}

// --------------------------------------------------------------------- linear

fn linear_dims<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<(usize, usize, usize)> {
    let (kw, m) = weight.dims2()?;
    let (b, k) = match input.shape() {
        [k] => (1, *k),
        [b, k] => (*b, *k),
        s => {
            return Err(Error::structure(format!(
                "fully connected input must be [k] or [batch, k], got {s:?}"
            )))
        }
    };
    if k != kw {
        return Err(Error::structure(format!(
            "fully connected input length {k} does not match weight rows {kw}"
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != m {
            return Err(Error::structure(format!(
                "fully connected bias has {} values, expected {m}",
                bias.len()
            )));
        }
    }
    Ok((b, k, m))
}

pub(crate) fn linear_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (b, k, m) = linear_dims(input, weight, bias)?;
    let (x, w) = (input.data(), weight.data());
    let mut out = vec![S::zero(); b * m];
    for bi in 0..b {
        let dst = &mut out[bi * m..(bi + 1) * m];
        if let Some(bias) = bias {
            dst.copy_from_slice(bias.data());
        }
        for ki in 0..k {
            let a = x[bi * k + ki];
            for (d, &wv) in dst.iter_mut().zip(&w[ki * m..(ki + 1) * m]) {
                *d += a * wv;
            }
        }
    }
    let shape = if input.shape().len() == 1 { vec![m] } else { vec![b, m] };
    Tensor::new(shape, out)
}

pub(crate) fn linear_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (b, k, m) = linear_dims(input, weight, None).expect("validated in forward");
    let (x, w) = (input.data(), weight.data());
    let mut gi = vec![S::zero(); b * k];
    let mut gw = vec![S::zero(); k * m];
    let mut gb = vec![S::zero(); m];
    for bi in 0..b {
        let go = &grad_out[bi * m..(bi + 1) * m];
        for (d, &gv) in gb.iter_mut().zip(go) {
            *d += gv;
        }
        for ki in 0..k {
            let row = &w[ki * m..(ki + 1) * m];
            gi[bi * k + ki] = go.iter().zip(row).map(|(&gv, &wv)| gv * wv).sum();
            let a = x[bi * k + ki];
            for (d, &gv) in gw[ki * m..(ki + 1) * m].iter_mut().zip(go) {
                *d += a * gv;
            }
        }
    }
    (gi, gw, gb)
}

// ----------------------------------------------------------------- batch norm

pub(crate) struct BnCache<S: Scalar> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    training: bool,
}

pub(crate) fn bn_forward<S: Scalar>(
    input: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    state: &mut BatchNormState<S>,
    mode: NormMode,
) -> Result<(Tensor<S>, BnCache<S>)> {
    let c = *input.shape().last().expect("non-empty shape");
    if scale.len() != c || shift.len() != c || state.channels() != c {
        return Err(Error::structure(format!(
            "batch norm over {c} channels got scale {}, shift {}, state {}",
            scale.len(),
            shift.len(),
            state.channels()
        )));
    }
    let x = input.data();
    let n = x.len() / c;
    let (mean, var) = match mode {
        NormMode::Training => {
            if n < 2 {
                return Err(Error::InvalidState(format!(
                    "training-mode batch norm needs at least 2 values per channel, got {n}"
                )));
            }
            let nf = S::from_usize_lossy(n);
            let mut acc = vec![CompensatedSum::new(); c];
            for row in x.chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    a.add(v);
                }
            }
            let mean: Vec<S> = acc.iter().map(|a| a.value() / nf).collect();
            let mut acc = vec![CompensatedSum::new(); c];
            for row in x.chunks_exact(c) {
                for ((a, &v), &m) in acc.iter_mut().zip(row).zip(&mean) {
                    a.add((v - m) * (v - m));
                }
            }
            let var: Vec<S> = acc.iter().map(|a| a.value() / nf).collect();
            let unbias = nf / (nf - S::one());
            let keep = state.momentum;
            for ch in 0..c {
                state.running_mean[ch] = keep * state.running_mean[ch] + (S::one() - keep) * mean[ch];
                state.running_var[ch] = keep * state.running_var[ch] + (S::one() - keep) * var[ch] * unbias;
            }
            (mean, var)
        }
        NormMode::Inference => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + state.eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); x.len()];
    let mut out = vec![S::zero(); x.len()];
    for (i, (&v, (xh, o))) in x.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
        let ch = i % c;
        *xh = (v - mean[ch]) * inv_std[ch];
        *o = scale.data()[ch] * *xh + shift.data()[ch];
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BnCache {
            xhat,
            inv_std,
            training: mode == NormMode::Training,
        },
    ))
}

pub(crate) fn bn_backward<S: Scalar>(
    cache: &BnCache<S>,
    scale: &Tensor<S>,
    grad_out: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let c = scale.len();
    let n = grad_out.len() / c;
    let mut gscale = vec![S::zero(); c];
    let mut gshift = vec![S::zero(); c];
    for (i, (&g, &xh)) in grad_out.iter().zip(&cache.xhat).enumerate() {
        gscale[i % c] += g * xh;
        gshift[i % c] += g;
    }
    let gamma = scale.data();
    let gi = if cache.training {
        let nf = S::from_usize_lossy(n);
        grad_out
            .iter()
            .zip(&cache.xhat)
            .enumerate()
            .map(|(i, (&g, &xh))| {
                let ch = i % c;
                gamma[ch] * cache.inv_std[ch] / nf * (nf * g - gshift[ch] - xh * gscale[ch])
            })
            .collect()
    } else {
        grad_out
            .iter()
            .enumerate()
            .map(|(i, &g)| gamma[i % c] * cache.inv_std[i % c] * g)
            .collect()
    };
    (gi, gscale, gshift)
}

// -------------------------------------------------------------------- pooling

pub(crate) fn max_pool_forward<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let (b, h, w, c) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::structure(format!(
            "2x2 max pooling needs even spatial size, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut argmax = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    // Row-major scan; strict comparison keeps the first maximum.
                    let mut best = ((bi * h + 2 * y) * w + 2 * xx) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::new([b, oh, ow, c], out)?, argmax))
}

pub(crate) fn gap_forward<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, h, w, c) = input.dims4()?;
    let area = S::from_usize_lossy(h * w);
    let mut out = vec![S::zero(); b * c];
    for (bi, img) in input.data().chunks_exact(h * w * c).enumerate() {
        let mut acc = vec![CompensatedSum::new(); c];
        for row in img.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                a.add(v);
            }
        }
        for (d, a) in out[bi * c..(bi + 1) * c].iter_mut().zip(&acc) {
            *d = a.value() / area;
        }
    }
    Tensor::new([b, c], out)
}

pub(crate) fn gap_backward<S: Scalar>(input: &Tensor<S>, grad_out: &[S]) -> Vec<S> {
    let (b, h, w, c) = input.dims4().expect("validated");
    let area = S::from_usize_lossy(h * w);
    let mut gi = vec![S::zero(); b * h * w * c];
    for bi in 0..b {
        for pos in 0..h * w {
            for ch in 0..c {
                gi[(bi * h * w + pos) * c + ch] = grad_out[bi * c + ch] / area;
            }
        }
    }
    gi
}

// --------------------------------------------------------------------- resize

/// Source sample for destination index `dst` under the half-pixel-centre
/// convention: `(lower index, upper index, upper weight)`.
pub fn resize_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

pub(crate) fn resize_forward<S: Scalar>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (b, h, w, c) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::structure("resize target must be at least 1x1"));
    }
    let x = input.data();
    let ys: Vec<_> = (0..out_h).map(|d| resize_coord(d, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|d| resize_coord(d, w, out_w)).collect();
    let mut out = Vec::with_capacity(b * out_h * out_w * c);
    for bi in 0..b {
        for &(y0, y1, fy) in &ys {
            let fy = S::lit(fy);
            for &(x0, x1, fx) in &xs {
                let fx = S::lit(fx);
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| x[((bi * h + yy) * w + xx) * c + ch];
                    let top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
                    let bot = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
                    out.push(top + fy * (bot - top));
                }
            }
        }
    }
    Tensor::new([b, out_h, out_w, c], out)
}

pub(crate) fn resize_backward<S: Scalar>(input: &Tensor<S>, output: &Tensor<S>, grad_out: &[S]) -> Vec<S> {
    let (b, h, w, c) = input.dims4().expect("validated");
    let (_, out_h, out_w, _) = output.dims4().expect("validated");
    let ys: Vec<_> = (0..out_h).map(|d| resize_coord(d, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|d| resize_coord(d, w, out_w)).collect();
    let mut gi = vec![S::zero(); input.len()];
    let mut o = 0;
    for bi in 0..b {
        for &(y0, y1, fy) in &ys {
            let fy = S::lit(fy);
            for &(x0, x1, fx) in &xs {
                let fx = S::lit(fx);
                for ch in 0..c {
                    let g = grad_out[o];
                    o += 1;
                    let idx = |yy: usize, xx: usize| ((bi * h + yy) * w + xx) * c + ch;
                    let (gt, gb) = (g * (S::one() - fy), g * fy);
                    gi[idx(y0, x0)] += gt * (S::one() - fx);
                    gi[idx(y0, x1)] += gt * fx;
                    gi[idx(y1, x0)] += gb * (S::one() - fx);
                    gi[idx(y1, x1)] += gb * fx;
                }
            }
        }
    }
    gi
}

// ------------------------------------------------------------------- combine

pub(crate) fn concat_forward<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::structure("concat of zero tensors"))?;
    let (b, h, w, _) = first.dims4()?;
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        let (tb, th, tw, tc) = t.dims4()?;
        if (tb, th, tw) != (b, h, w) {
            return Err(Error::structure(format!(
                "concat spatial mismatch {:?} vs {:?}",
                t.shape(),
                first.shape()
            )));
        }
        widths.push(tc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(b * h * w * total);
    for pos in 0..b * h * w {
        for (t, &c) in inputs.iter().zip(&widths) {
            out.extend_from_slice(&t.data()[pos * c..(pos + 1) * c]);
        }
    }
    Tensor::new([b, h, w, total], out)
}

pub(crate) fn concat_backward<S: Scalar>(inputs: &[&Tensor<S>], grad_out: &[S]) -> Vec<Vec<S>> {
    let widths: Vec<usize> = inputs.iter().map(|t| *t.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let positions = grad_out.len() / total;
    let mut grads: Vec<Vec<S>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
    for pos in 0..positions {
        let mut off = pos * total;
        for (g, &c) in grads.iter_mut().zip(&widths) {
            g.extend_from_slice(&grad_out[off..off + c]);
            off += c;
        }
    }
    grads
}

fn scale_dims<S: Scalar>(scale: &Tensor<S>, map: &Tensor<S>) -> Result<(usize, usize, usize)> {
    let (b, h, w, c) = map.dims4()?;
    let ok = match scale.shape() {
        [len] => *len == c && b == 1,
        [sb, len] => *sb == b && *len == c,
        _ => false,
    };
    if !ok {
        return Err(Error::structure(format!(
            "channel weights {:?} do not match map {:?}",
            scale.shape(),
            map.shape()
        )));
    }
    Ok((b, h * w, c))
}

pub(crate) fn channel_scale_forward<S: Scalar>(scale: &Tensor<S>, map: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, hw, c) = scale_dims(scale, map)?;
    let (s, x) = (scale.data(), map.data());
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for pos in 0..hw {
            let base = (bi * hw + pos) * c;
            out.extend((0..c).map(|ch| x[base + ch] * s[bi * c + ch]));
        }
    }
    Tensor::new(map.shape().to_vec(), out)
}

pub(crate) fn channel_scale_backward<S: Scalar>(
    scale: &Tensor<S>,
    map: &Tensor<S>,
    grad_out: &[S],
) -> (Vec<S>, Vec<S>) {
    let (b, hw, c) = scale_dims(scale, map).expect("validated");
    let (s, x) = (scale.data(), map.data());
    let mut gs = vec![S::zero(); s.len()];
    let mut gm = vec![S::zero(); x.len()];
    for bi in 0..b {
        for pos in 0..hw {
            let base = (bi * hw + pos) * c;
            for ch in 0..c {
                gs[bi * c + ch] += grad_out[base + ch] * x[base + ch];
                gm[base + ch] = grad_out[base + ch] * s[bi * c + ch];
            }
        }
    }
    (gs, gm)
}

fn gate_dims<S: Scalar>(gate: &Tensor<S>, map: &Tensor<S>) -> Result<(usize, usize)> {
    let (b, h, w, c) = map.dims4()?;
    if gate.shape() != [b, h, w, 1] {
        return Err(Error::structure(format!(
            "spatial gate {:?} does not match map {:?}",
            gate.shape(),
            map.shape()
        )));
    }
    Ok((b * h * w, c))
}

pub(crate) fn spatial_scale_forward<S: Scalar>(gate: &Tensor<S>, map: &Tensor<S>) -> Result<Tensor<S>> {
    let (positions, c) = gate_dims(gate, map)?;
    let (gv, x) = (gate.data(), map.data());
    let mut out = Vec::with_capacity(x.len());
    for pos in 0..positions {
        out.extend(x[pos * c..(pos + 1) * c].iter().map(|&v| v * gv[pos]));
    }
    Tensor::new(map.shape().to_vec(), out)
}

pub(crate) fn spatial_scale_backward<S: Scalar>(gate: &Tensor<S>, map: &Tensor<S>, grad_out: &[S]) -> (Vec<S>, Vec<S>) {
    let (positions, c) = gate_dims(gate, map).expect("validated");
    let (gv, x) = (gate.data(), map.data());
    let mut gg = vec![S::zero(); positions];
    let mut gm = vec![S::zero(); x.len()];
    for pos in 0..positions {
        for ch in 0..c {
            let i = pos * c + ch;
            gg[pos] += grad_out[i] * x[i];
            gm[i] = grad_out[i] * gv[pos];
        }
    }
    (gg, gm)
}

// ----------------------------------------------------------------------- loss

pub(crate) const PROB_CLAMP: f64 = 1e-7;

pub(crate) fn bce_forward<S: Scalar>(probs: &Tensor<S>, targets: &[S], weights: &[S]) -> Result<(S, Vec<bool>)> {
    let (b, n) = probs.dims2()?;
    if targets.len() != b * n || weights.len() != n {
        return Err(Error::structure(format!(
            "loss over [{b}, {n}] probabilities got {} targets and {} weights",
            targets.len(),
            weights.len()
        )));
    }
    let (lo, hi) = (S::lit(PROB_CLAMP), S::one() - S::lit(PROB_CLAMP));
    let mut clamped = Vec::with_capacity(b * n);
    let mut total = CompensatedSum::new();
    for (i, (&p, &t)) in probs.data().iter().zip(targets).enumerate() {
        clamped.push(p < lo || p > hi);
        let p = p.max(lo).min(hi);
        total.add(weights[i % n] * (t * p.ln() + (S::one() - t) * (S::one() - p).ln()));
    }
    Ok((-total.value() / S::from_usize_lossy(b), clamped))
}

pub(crate) fn bce_backward<S: Scalar>(
    probs: &Tensor<S>,
    targets: &[S],
    weights: &[S],
    clamped: &[bool],
    grad_out: S,
) -> Vec<S> {
    let (b, n) = probs.dims2().expect("validated");
    let scale = -grad_out / S::from_usize_lossy(b);
    probs
        .data()
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (&p, &t))| {
            if clamped[i] {
                S::zero()
            } else {
                scale * weights[i % n] * (t / p - (S::one() - t) / (S::one() - p))
            }
        })
        .collect()
}

// ------------------------------------------------------------------- patches

/// Splits `[b, h, w, c]` into `k*k` tiles of `[b, h/k, w/k, c]`, row-major over tiles.
pub fn partition_patches<S: Scalar>(map: &Tensor<S>, k: usize) -> Result<Vec<Tensor<S>>> {
    let (b, h, w, c) = map.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::structure(format!(
            "{h}x{w} map cannot be split into {k}x{k} patches"
        )));
    }
    let (ph, pw) = (h / k, w / k);
    let x = map.data();
    let mut patches = Vec::with_capacity(k * k);
    for py in 0..k {
        for px in 0..k {
            let mut data = Vec::with_capacity(b * ph * pw * c);
            for bi in 0..b {
                for y in py * ph..(py + 1) * ph {
                    let start = ((bi * h + y) * w + px * pw) * c;
                    data.extend_from_slice(&x[start..start + pw * c]);
                }
            }
            patches.push(Tensor::new([b, ph, pw, c], data)?);
        }
    }
    Ok(patches)
}

/// Inverse of [`partition_patches`].
pub fn assemble_patches<S: Scalar>(patches: &[Tensor<S>], k: usize) -> Result<Tensor<S>> {
    if patches.len() != k * k || k == 0 {
        return Err(Error::structure(format!(
            "{k}x{k} assembly needs {} patches, got {}",
            k * k,
            patches.len()
        )));
    }
    let (b, ph, pw, c) = patches[0].dims4()?;
    if patches.iter().any(|p| p.shape() != patches[0].shape()) {
        return Err(Error::structure("patches differ in shape"));
    }
    let (h, w) = (ph * k, pw * k);
    let mut out = vec![S::zero(); b * h * w * c];
    for (idx, p) in patches.iter().enumerate() {
        let (py, px) = (idx / k, idx % k);
        for bi in 0..b {
            for y in 0..ph {
                let src = ((bi * ph + y) * pw) * c;
                let dst = ((bi * h + py * ph + y) * w + px * pw) * c;
                out[dst..dst + pw * c].copy_from_slice(&p.data()[src..src + pw * c]);
            }
        }
    }
    Tensor::new([b, h, w, c], out)
}
