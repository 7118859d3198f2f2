//! Forward and backward kernels for the layer kinds. Plain slices in, plain
//! vectors out; the tape in [`super::graph`] wires them together.

use serde::{Deserialize, Serialize};

use super::param::MaskedParam;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { fan_in: usize, fan_out: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: (usize, usize) },
    LayerNorm { features: usize },
    Activation { name: Activation },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Dense { fan_in, fan_out } if *fan_in == 0 || *fan_out == 0 => {
                Err(Error::config("dense layer extents must be positive"))
            }
            LayerSpec::Conv2d { kernel, in_channels, out_channels }
                if kernel.0 == 0 || kernel.1 == 0 || *in_channels == 0 || *out_channels == 0 =>
            {
                Err(Error::config("conv kernel extents must be positive"))
            }
            LayerSpec::LayerNorm { features: 0 } => Err(Error::config("layernorm needs F >= 1")),
            _ => Ok(()),
        }
    }

    /// (fan_in, fan_out) as used by initialization and ERK.
    pub fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => (fan_in, fan_out),
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                (in_channels * kernel.0 * kernel.1, out_channels * kernel.0 * kernel.1)
            }
            LayerSpec::LayerNorm { features } => (features, features),
            LayerSpec::Activation { .. } => (0, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseDims {
    pub batch: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// `c[M, N] += a[M, K] · b[K, N]`, four rows of `a` at a time so each row
/// of `b` is streamed once per block. Accumulation order over `K` is fixed.
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut r = 0;
    while r + 4 <= m {
        let block = &mut c[r * n..(r + 4) * n];
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let (a0, a1, a2, a3) = (
            &a[r * k..(r + 1) * k],
            &a[(r + 1) * k..(r + 2) * k],
            &a[(r + 2) * k..(r + 3) * k],
            &a[(r + 3) * k..(r + 4) * k],
        );
        for p in 0..k {
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            if x0 == 0.0 && x1 == 0.0 && x2 == 0.0 && x3 == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let v = br[j];
                c0[j] += x0 * v;
                c1[j] += x1 * v;
                c2[j] += x2 * v;
                c3[j] += x3 * v;
            }
        }
        r += 4;
    }
    for r in r..m {
        let cr = &mut c[r * n..(r + 1) * n];
        for (p, &x) in a[r * k..(r + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (cv, &v) in cr.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += x * v;
            }
        }
    }
}

/// Row-major transpose of an `[r, c]` matrix.
pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}

pub fn dense_fwd(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: DenseDims) -> Vec<f64> {
    let mut y = vec![0.0; d.batch * d.fan_out];
    if let Some(b) = bias {
        for yr in y.chunks_exact_mut(d.fan_out) {
            yr.copy_from_slice(b);
        }
    }
    gemm_acc(x, w, &mut y, d.batch, d.fan_in, d.fan_out);
    y
}

/// Returns `(dx, dw, dbias)`.
pub fn dense_bwd(x: &[f64], w: &[f64], dy: &[f64], d: DenseDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; d.batch * d.fan_in];
    let mut dw = vec![0.0; d.fan_in * d.fan_out];
    let mut db = vec![0.0; d.fan_out];
    for dyr in dy.chunks_exact(d.fan_out) {
        for (b, &g) in db.iter_mut().zip(dyr) {
            *b += g;
        }
    }
    gemm_acc(dy, &transpose(w, d.fan_in, d.fan_out), &mut dx, d.batch, d.fan_out, d.fan_in);
    gemm_acc(&transpose(x, d.batch, d.fan_in), dy, &mut dw, d.fan_in, d.batch, d.fan_out);
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Patch matrix `[B·P, C·kh·kw]`, columns ordered like a kernel row.
fn im2col(x: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow, patch) = (d.out_h(), d.out_w(), d.patch());
    let in_plane = d.height * d.width;
    let mut cols = vec![0.0; d.batch * d.positions() * patch];
    for b in 0..d.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[((b * oh + oy) * ow + ox) * patch..][..patch];
                let mut j = 0;
                for c in 0..d.in_channels {
                    let base = (b * d.in_channels + c) * in_plane;
                    for ky in 0..d.kh {
                        let src = base + (oy + ky) * d.width + ox;
                        row[j..j + d.kw].copy_from_slice(&x[src..src + d.kw]);
                        j += d.kw;
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow, patch) = (d.out_h(), d.out_w(), d.patch());
    let in_plane = d.height * d.width;
    let mut x = vec![0.0; d.batch * d.in_channels * in_plane];
    for b in 0..d.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[((b * oh + oy) * ow + ox) * patch..][..patch];
                let mut j = 0;
                for c in 0..d.in_channels {
                    let base = (b * d.in_channels + c) * in_plane;
                    for ky in 0..d.kh {
                        let dst = base + (oy + ky) * d.width + ox;
                        for (xv, &g) in x[dst..dst + d.kw].iter_mut().zip(&row[j..j + d.kw]) {
                            *xv += g;
                        }
                        j += d.kw;
                    }
                }
            }
        }
    }
    x
}

/// Valid (no padding), stride-1 cross-correlation, computed as a patch
/// matrix product.
pub fn conv2d_fwd(x: &[f64], w: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let p = d.positions();
    let k = d.out_channels;
    let cols = im2col(x, d);
    let mut yt = vec![0.0; d.batch * p * k];
    for r in yt.chunks_exact_mut(k) {
        r.copy_from_slice(bias);
    }
    gemm_acc(&cols, &transpose(w, k, d.patch()), &mut yt, d.batch * p, d.patch(), k);
    // [B, P, K] -> [B, K, P]
    let mut y = vec![0.0; yt.len()];
    for b in 0..d.batch {
        for pos in 0..p {
            for ch in 0..k {
                y[(b * k + ch) * p + pos] = yt[(b * p + pos) * k + ch];
            }
        }
    }
    y
}

/// Returns `(dx, dw, dbias)`.
pub fn conv2d_bwd(x: &[f64], w: &[f64], dy: &[f64], d: ConvDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = d.positions();
    let k = d.out_channels;
    let patch = d.patch();
    let mut dyt = vec![0.0; dy.len()];
    let mut db = vec![0.0; k];
    for b in 0..d.batch {
        for ch in 0..k {
            let src = &dy[(b * k + ch) * p..(b * k + ch + 1) * p];
            db[ch] += src.iter().sum::<f64>();
            for (pos, &g) in src.iter().enumerate() {
                dyt[(b * p + pos) * k + ch] = g;
            }
        }
    }
    let rows = d.batch * p;
    let cols = im2col(x, d);
    let mut dcols = vec![0.0; rows * patch];
    gemm_acc(&dyt, w, &mut dcols, rows, k, patch);
    let mut dwt = vec![0.0; patch * k];
    gemm_acc(&transpose(&cols, rows, patch), &dyt, &mut dwt, patch, rows, k);
    (col2im(&dcols, d), transpose(&dwt, patch, k), db)
}

/// Normalized rows and the per-row reciprocal standard deviation.
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm_fwd(
    x: &[f64],
    gain: &[f64],
    shift: &[f64],
    features: usize,
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / features;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for (r, ((xr, yr), hr)) in x
        .chunks_exact(features)
        .zip(y.chunks_exact_mut(features))
        .zip(xhat.chunks_exact_mut(features))
        .enumerate()
    {
        let mean = xr.iter().sum::<f64>() / features as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / features as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..features {
            hr[i] = (xr[i] - mean) * rs;
            yr[i] = gain[i] * hr[i] + shift[i];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `(dx, dgain, dshift)`.
pub fn layer_norm_bwd(
    dy: &[f64],
    gain: &[f64],
    cache: &LayerNormCache,
    features: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let f = features as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0.0; features];
    let mut ds = vec![0.0; features];
    let mut dxhat = vec![0.0; features];
    for (r, ((dyr, hr), dxr)) in dy
        .chunks_exact(features)
        .zip(cache.xhat.chunks_exact(features))
        .zip(dx.chunks_exact_mut(features))
        .enumerate()
    {
        let mut sum = 0.0;
        let mut sum_h = 0.0;
        for i in 0..features {
            dg[i] += dyr[i] * hr[i];
            ds[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            sum += dxhat[i];
            sum_h += dxhat[i] * hr[i];
        }
        let rs = cache.rstd[r];
        for i in 0..features {
            dxr[i] = rs / f * (f * dxhat[i] - sum - hr[i] * sum_h);
        }
    }
    (dx, dg, ds)
}

pub fn activation_fwd(act: Activation, x: &[f64]) -> Vec<f64> {
    match act {
        Activation::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        Activation::Tanh => x.iter().map(|v| v.tanh()).collect(),
        Activation::Linear => x.to_vec(),
    }
}

/// Gradient through an activation given its input `x` and output `y`.
pub fn activation_bwd(act: Activation, x: &[f64], y: &[f64], dy: &[f64]) -> Vec<f64> {
    match act {
        Activation::Relu => x
            .iter()
            .zip(dy)
            .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::Tanh => y.iter().zip(dy).map(|(&yv, &g)| g * (1.0 - yv * yv)).collect(),
        Activation::Linear => dy.to_vec(),
    }
}

/// `y = x · (value ⊙ mask) + bias` for `x: [B, I]`, weight `[I, O]`, bias `[O]`.
pub fn forward_dense(x: &Tensor, p: &MaskedParam, bias: &Tensor) -> Result<Tensor> {
    let (batch, fan_in) = matrix_dims(x)?;
    let (wi, fan_out) = matrix_dims(p.value())?;
    if wi != fan_in || bias.numel() != fan_out {
        return Err(Error::config(format!(
            "dense shapes do not conform: x {:?}, w {:?}, b {:?}",
            x.shape(),
            p.shape(),
            bias.shape()
        )));
    }
    let d = DenseDims { batch, fan_in, fan_out };
    Tensor::new(vec![batch, fan_out], dense_fwd(x.data(), p.value().data(), Some(bias.data()), d))
}

/// Valid stride-1 convolution of `x: [B, C, H, W]` with `[K, C, kh, kw]` weights.
pub fn forward_conv2d(x: &Tensor, p: &MaskedParam, bias: &Tensor) -> Result<Tensor> {
    let d = conv_dims(x.shape(), p.shape())?;
    if bias.numel() != d.out_channels {
        return Err(Error::config("conv bias length differs from output channels"));
    }
    let y = conv2d_fwd(x.data(), p.value().data(), bias.data(), d);
    Tensor::new(vec![d.batch, d.out_channels, d.out_h(), d.out_w()], y)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, features) = matrix_dims(x)?;
    if features == 0 || gain.numel() != features || shift.numel() != features {
        return Err(Error::config("layernorm affine parameters must have F entries"));
    }
    if eps <= 0.0 {
        return Err(Error::config("layernorm eps must be positive"));
    }
    let (y, _) = layer_norm_fwd(x.data(), gain.data(), shift.data(), features, eps);
    Tensor::new(x.shape().to_vec(), y)
}

pub(crate) fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::config(format!("expected a matrix, got shape {other:?}"))),
    }
}

pub(crate) fn conv_dims(x: &[usize], w: &[usize]) -> Result<ConvDims> {
    let ([b, c, h, wd], [k, wc, kh, kw]) = (x, w) else {
        return Err(Error::config(format!(
            "conv expects 4-d input and kernel, got {x:?} and {w:?}"
        )));
    };
    if c != wc {
        return Err(Error::config(format!(
            "conv input has {c} channels but kernel expects {wc}"
        )));
    }
    if *kh == 0 || *kw == 0 {
        return Err(Error::config("conv kernel extents must be positive"));
    }
    if h < kh || wd < kw {
        return Err(Error::config(format!(
            "conv input {h}x{wd} smaller than kernel {kh}x{kw}"
        )));
    }
    Ok(ConvDims {
        batch: *b,
        in_channels: *c,
        height: *h,
        width: *wd,
        out_channels: *k,
        kh: *kh,
        kw: *kw,
    })
}
