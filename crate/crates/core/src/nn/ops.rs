//! Batched layer kernels over NHWC buffers.
//!
//! Inputs are read from storage type `T` and every sum is accumulated in
//! `f64`. Gradients flow as `f64` buffers.

use super::gemm::{gemm, Strides};
use super::layer::{Activation, Conv2dSpec, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, c: usize, k: usize, stride: usize, padding: Padding) -> Option<Self> {
        if k == 0 || stride == 0 {
            return None;
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if h < k || w < k {
                    return None;
                }
                ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let pad_h = ((ho - 1) * stride + k).saturating_sub(h);
                let pad_w = ((wo - 1) * stride + k).saturating_sub(w);
                (ho, wo, pad_h / 2, pad_w / 2)
            }
        };
        Some(ConvGeom {
            h,
            w,
            c,
            k,
            stride,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }
}

/// Unrolls every receptive field into a row: `[batch*ho*wo, k*k*c]`, column
/// order `(ky, kx, channel)` which matches a `[k, k, c, n]` kernel.
fn im2col<T: Real>(input: &[T], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; batch * g.ho * g.wo * plen];
    let mut row = 0;
    for b in 0..batch {
        let base = b * g.h * g.w * g.c;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = base + (iy as usize * g.w + ix as usize) * g.c;
                        let d = (ky * g.k + kx) * g.c;
                        for ch in 0..g.c {
                            dst[d + ch] = input[src + ch].to_f64();
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut out = vec![0.0; batch * g.h * g.w * g.c];
    let mut row = 0;
    for b in 0..batch {
        let base = b * g.h * g.w * g.c;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * g.w + ix as usize) * g.c;
                        let s = (ky * g.k + kx) * g.c;
                        for ch in 0..g.c {
                            out[dst + ch] += src[s + ch];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

/// Returns activated outputs `[batch, ho, wo, n]`.
pub(crate) fn conv_forward<T: Real>(
    input: &[T],
    batch: usize,
    g: &ConvGeom,
    kernel: &[T],
    bias: Option<&[T]>,
    n: usize,
    activation: Activation,
) -> Vec<f64> {
    let plen = g.patch_len();
    let rows = batch * g.ho * g.wo;
    let cols = im2col(input, batch, g);
    let w = to_f64(kernel);
    let mut out = vec![0.0; rows * n];
    gemm(
        rows,
        plen,
        n,
        &cols,
        Strides::row_major(plen),
        &w,
        Strides::row_major(n),
        0.0,
        &mut out,
        Strides::row_major(n),
    );
    if let Some(bias) = bias {
        let bias = to_f64(bias);
        for r in out.chunks_exact_mut(n) {
            for (v, b) in r.iter_mut().zip(&bias) {
                *v += b;
            }
        }
    }
    if activation != Activation::None {
        for v in &mut out {
            *v = activation.apply(*v);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
    pub input: Option<Vec<f64>>,
}

/// `grad_pre` is the gradient w.r.t. the pre-activation output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    input: &[T],
    batch: usize,
    g: &ConvGeom,
    kernel: &[T],
    n: usize,
    grad_pre: &[f64],
    want_params: bool,
    want_bias: bool,
    want_input: bool,
) -> ConvGrads {
    let plen = g.patch_len();
    let rows = batch * g.ho * g.wo;
    let mut grads = ConvGrads {
        kernel: None,
        bias: None,
        input: None,
    };
    if want_params {
        let cols = im2col(input, batch, g);
        let mut dw = vec![0.0; plen * n];
        gemm(
            plen,
            rows,
            n,
            &cols,
            Strides::transposed(plen),
            grad_pre,
            Strides::row_major(n),
            0.0,
            &mut dw,
            Strides::row_major(n),
        );
        grads.kernel = Some(dw);
    }
    if want_bias {
        let mut db = vec![0.0; n];
        for r in grad_pre.chunks_exact(n) {
            for (acc, v) in db.iter_mut().zip(r) {
                *acc += v;
            }
        }
        grads.bias = Some(db);
    }
    if want_input {
        let w = to_f64(kernel);
        let mut dcols = vec![0.0; rows * plen];
        gemm(
            rows,
            n,
            plen,
            grad_pre,
            Strides::row_major(n),
            &w,
            Strides::transposed(n),
            0.0,
            &mut dcols,
            Strides::row_major(plen),
        );
        grads.input = Some(col2im(&dcols, batch, g));
    }
    grads
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub window: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(h: usize, w: usize, c: usize, window: usize, stride: usize) -> Option<Self> {
        if window == 0 || stride == 0 || h < window || w < window {
            return None;
        }
        Some(PoolGeom {
            h,
            w,
            c,
            window,
            stride,
            ho: (h - window) / stride + 1,
            wo: (w - window) / stride + 1,
        })
    }
}

/// Max pooling; also returns the flat input index of each winner (first
/// maximum in scan order).
pub(crate) fn maxpool_forward<T: Real>(input: &[T], batch: usize, g: &PoolGeom) -> (Vec<f64>, Vec<u32>) {
    let out_len = batch * g.ho * g.wo * g.c;
    let mut out = vec![0.0; out_len];
    let mut arg = vec![0u32; out_len];
    let mut o = 0;
    for b in 0..batch {
        let base = b * g.h * g.w * g.c;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for ch in 0..g.c {
                    let first = base + (oy * g.stride * g.w + ox * g.stride) * g.c + ch;
                    let mut best = input[first].to_f64();
                    let mut best_idx = first;
                    for dy in 0..g.window {
                        for dx in 0..g.window {
                            let idx = base + ((oy * g.stride + dy) * g.w + ox * g.stride + dx) * g.c + ch;
                            let v = input[idx].to_f64();
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out[o] = best;
                    arg[o] = best_idx as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(grad_out: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut g = vec![0.0; input_len];
    for (go, &i) in grad_out.iter().zip(argmax) {
        g[i as usize] += go;
    }
    g
}

/// Dense pre-activation `[batch, units]`.
pub(crate) fn dense_forward<T: Real>(
    input: &[T],
    batch: usize,
    features: usize,
    kernel: &[T],
    bias: Option<&[T]>,
    units: usize,
) -> Vec<f64> {
    let x = to_f64(input);
    let w = to_f64(kernel);
    let mut z = vec![0.0; batch * units];
    gemm(
        batch,
        features,
        units,
        &x,
        Strides::row_major(features),
        &w,
        Strides::row_major(units),
        0.0,
        &mut z,
        Strides::row_major(units),
    );
    if let Some(bias) = bias {
        let bias = to_f64(bias);
        for r in z.chunks_exact_mut(units) {
            for (v, b) in r.iter_mut().zip(&bias) {
                *v += b;
            }
        }
    }
    z
}

pub(crate) struct DenseGrads {
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
    pub input: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Real>(
    input: &[T],
    batch: usize,
    features: usize,
    kernel: &[T],
    units: usize,
    grad_pre: &[f64],
    want_params: bool,
    want_bias: bool,
    want_input: bool,
) -> DenseGrads {
    let mut grads = DenseGrads {
        kernel: None,
        bias: None,
        input: None,
    };
    if want_params {
        let x = to_f64(input);
        let mut dw = vec![0.0; features * units];
        gemm(
            features,
            batch,
            units,
            &x,
            Strides::transposed(features),
            grad_pre,
            Strides::row_major(units),
            0.0,
            &mut dw,
            Strides::row_major(units),
        );
        grads.kernel = Some(dw);
    }
    if want_bias {
        let mut db = vec![0.0; units];
        for r in grad_pre.chunks_exact(units) {
            for (acc, v) in db.iter_mut().zip(r) {
                *acc += v;
            }
        }
        grads.bias = Some(db);
    }
    if want_input {
        let w = to_f64(kernel);
        let mut dx = vec![0.0; batch * features];
        gemm(
            batch,
            units,
            features,
            grad_pre,
            Strides::row_major(units),
            &w,
            Strides::transposed(units),
            0.0,
            &mut dx,
            Strides::row_major(features),
        );
        grads.input = Some(dx);
    }
    grads
}

/// Per-channel statistics of a `[.., channels]` buffer (biased variance).
pub(crate) fn channel_moments<T: Real>(input: &[T], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (input.len() / channels) as f64;
    let mut mean = vec![0.0; channels];
    for r in input.chunks_exact(channels) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v.to_f64();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; channels];
    for r in input.chunks_exact(channels) {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            let d = v.to_f64() - m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s /= count;
    }
    (mean, var)
}

/// Single-image convolution over an `[H, W, Cin]` tensor with a `[k, k, Cin, N]`
/// kernel and optional `[N]` bias.
pub fn conv2d_forward<T: Real>(
    name: &str,
    input: &Tensor<T>,
    spec: &Conv2dSpec,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let &[h, w, c] = input.shape() else {
        return Err(Error::layer(
            name,
            format!("expected a rank-3 input, got shape {:?}", input.shape()),
        ));
    };
    let k = spec.kernel_size;
    let expected = [k, k, c, spec.filters];
    if kernel.shape() != expected {
        return Err(Error::shape(name, &expected, kernel.shape()));
    }
    let bias = if spec.use_bias {
        let b = bias.ok_or_else(|| Error::layer(name, "use_bias is set but no bias was given"))?;
        if b.shape() != [spec.filters] {
            return Err(Error::shape(name, &[spec.filters], b.shape()));
        }
        Some(b.data())
    } else {
        None
    };
    let g = ConvGeom::new(h, w, c, k, spec.stride, spec.padding).ok_or_else(|| {
        Error::layer(
            name,
            format!("kernel {k} with stride {} does not fit input {h}x{w}", spec.stride),
        )
    })?;
    let out = conv_forward(input.data(), 1, &g, kernel.data(), bias, spec.filters, spec.activation);
    Ok(Tensor::from_f64(&[g.ho, g.wo, spec.filters], &out))
}

/// Single-image max pooling over an `[H, W, C]` tensor.
pub fn maxpool2d<T: Real>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let &[h, w, c] = input.shape() else {
        return Err(Error::layer(
            "maxpool2d",
            format!("expected a rank-3 input, got shape {:?}", input.shape()),
        ));
    };
    let g = PoolGeom::new(h, w, c, window, stride).ok_or_else(|| {
        Error::layer(
            "maxpool2d",
            format!("window {window} stride {stride} does not fit input {h}x{w}"),
        )
    })?;
    let (out, _) = maxpool_forward(input.data(), 1, &g);
    Ok(Tensor::from_f64(&[g.ho, g.wo, c], &out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn conv_spec(filters: usize, k: usize, padding: Padding, activation: Activation, use_bias: bool) -> Conv2dSpec {
        Conv2dSpec {
            filters,
            kernel_size: k,
            stride: 1,
            padding,
            activation,
            use_bias,
            trainable: true,
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = Tensor::new(vec![3, 4, 1], (0..12).map(|v| v as f32 * 0.25).collect()).unwrap();
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![1.0f32]).unwrap();
        let spec = conv_spec(1, 1, Padding::Valid, Activation::None, false);
        let out = conv2d_forward("id", &input, &spec, &kernel, None).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let c = 0.7f32;
        let input = Tensor::filled(&[5, 5, 1], c);
        let kernel = Tensor::filled(&[3, 3, 1, 1], 1.0f32);
        let spec = conv_spec(1, 3, Padding::Valid, Activation::None, false);
        let out = conv2d_forward("ones", &input, &spec, &kernel, None).unwrap();
        assert_eq!(out.shape(), &[3, 3, 1]);
        for v in out.data() {
            assert!((v - 9.0 * c).abs() < 1e-6);
        }
    }

    /// Direct nested-loop convolution used as the reference.
    fn brute_conv(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &[f64], relu: bool) -> Tensor<f64> {
        let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (k, n) = (kernel.shape()[0], kernel.shape()[3]);
        let (ho, wo) = (h - k + 1, w - k + 1);
        let mut out = vec![0.0; ho * wo * n];
        for y in 0..ho {
            for x in 0..wo {
                for f in 0..n {
                    let mut s = bias[f];
                    for dy in 0..k {
                        for dx in 0..k {
                            for ch in 0..c {
                                s += input.at(&[y + dy, x + dx, ch]) * kernel.at(&[dy, dx, ch, f]);
                            }
                        }
                    }
                    out[(y * wo + x) * n + f] = if relu { s.max(0.0) } else { s };
                }
            }
        }
        Tensor::new(vec![ho, wo, n], out).unwrap()
    }

    #[test]
    fn random_valid_relu_conv_matches_nested_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::new(vec![4, 4, 2], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let kernel = Tensor::new(vec![3, 3, 2, 3], (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.05]).unwrap();
        let spec = conv_spec(3, 3, Padding::Valid, Activation::Relu, true);
        let got = conv2d_forward("rand", &input, &spec, &kernel, Some(&bias)).unwrap();
        let want = brute_conv(&input, &kernel, bias.data(), true);
        assert_eq!(got.shape(), &[2, 2, 3]);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn same_padding_keeps_spatial_size() {
        let input = Tensor::filled(&[8, 8, 2], 1.0f32);
        let kernel = Tensor::filled(&[3, 3, 2, 4], 1.0f32);
        let spec = conv_spec(4, 3, Padding::Same, Activation::None, false);
        let out = conv2d_forward("same", &input, &spec, &kernel, None).unwrap();
        assert_eq!(out.shape(), &[8, 8, 4]);
        // interior sees the full 3x3x2 window, a corner sees 2x2x2
        assert_eq!(out.at(&[4, 4, 0]), 18.0);
        assert_eq!(out.at(&[0, 0, 0]), 8.0);
    }

    #[test]
    fn kernel_channel_mismatch_names_layer_and_shapes() {
        let input = Tensor::filled(&[5, 5, 3], 1.0f32);
        let kernel = Tensor::filled(&[3, 3, 2, 4], 1.0f32);
        let spec = conv_spec(4, 3, Padding::Valid, Activation::None, false);
        let err = conv2d_forward("V_conv2d_1", &input, &spec, &kernel, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("V_conv2d_1"), "{msg}");
        assert!(msg.contains("[3, 3, 3, 4]") && msg.contains("[3, 3, 2, 4]"), "{msg}");
    }

    #[test]
    fn valid_conv_rejects_small_input() {
        let input = Tensor::filled(&[2, 2, 1], 1.0f32);
        let kernel = Tensor::filled(&[3, 3, 1, 1], 1.0f32);
        let spec = conv_spec(1, 3, Padding::Valid, Activation::None, false);
        assert!(conv2d_forward("small", &input, &spec, &kernel, None).is_err());
    }

    #[test]
    fn maxpool_constant_and_blocks() {
        let input = Tensor::filled(&[6, 6, 2], 3.5f32);
        let out = maxpool2d(&input, 2, 2).unwrap();
        assert_eq!(out.shape(), &[3, 3, 2]);
        assert!(out.data().iter().all(|&v| v == 3.5));

        #[rustfmt::skip]
        let vals = vec![
             1.0f32,  2.0,  5.0,  6.0,
             3.0,  4.0,  7.0,  8.0,
             9.0, 10.0, 13.0, 14.0,
            11.0, 12.0, 15.0, 16.0,
        ];
        let input = Tensor::new(vec![4, 4, 1], vals).unwrap();
        let out = maxpool2d(&input, 2, 2).unwrap();
        assert_eq!(out.data(), &[4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn maxpool_shape_and_errors() {
        let input = Tensor::filled(&[64, 64, 1], 0.0f32);
        assert_eq!(maxpool2d(&input, 2, 2).unwrap().shape(), &[32, 32, 1]);
        let tiny = Tensor::filled(&[1, 1, 1], 0.0f32);
        assert!(maxpool2d(&tiny, 2, 2).is_err());
    }
}
