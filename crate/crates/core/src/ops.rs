//! Raw NCHW kernels and their adjoints. Convolutions use "same" zero padding
//! (`pad = k / 2`, odd `k`) and are lowered to im2col + GEMM over bands of
//! output rows; bands are the unit of data parallelism.

use crate::par;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Upper bound on the im2col buffer of one band, in elements.
const BAND_ELEMS: usize = 1 << 21;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, weight: &Tensor, stride: usize) -> Self {
        let (n, cin, h, w) = x.dims4();
        let (cout, wcin, k, k2) = weight.dims4();
        assert_eq!(cin, wcin, "conv input channels {} vs weight {}", cin, wcin);
        assert_eq!(k, k2, "non-square kernel");
        assert!(k % 2 == 1, "kernel size must be odd");
        assert!(stride >= 1);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn kk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn band_rows(&self) -> usize {
        let per_row = if self.is_pointwise() { 1 } else { self.kk() * self.wo };
        (BAND_ELEMS / per_row.max(1)).clamp(1, self.ho)
    }

    fn bands(&self) -> usize {
        self.ho.div_ceil(self.band_rows())
    }

    fn band_range(&self, band: usize) -> (usize, usize) {
        let r = self.band_rows();
        let r0 = band * r;
        (r0, (r0 + r).min(self.ho))
    }
}

/// Lowers output rows `r0..r1` of one image into a `[cin*k*k, (r1-r0)*wo]` matrix.
fn im2col(g: &ConvGeom, x_item: &[f32], r0: usize, r1: usize) -> Vec<f32> {
    let bp = (r1 - r0) * g.wo;
    let mut cols = vec![0.0f32; g.kk() * bp];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * bp..(row + 1) * bp];
                for (ri, oy) in (r0..r1).enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x_item[(ci * g.h + iy as usize) * g.w..][..g.w];
                    let d = &mut dst[ri * g.wo..(ri + 1) * g.wo];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx);
                        let hi = g.wo.min(g.w + g.pad - kx);
                        if lo < hi {
                            d[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                        }
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Forward convolution. `bias` has shape `[cout]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Tensor {
    let g = ConvGeom::new(x, weight, stride);
    let bands = g.bands();
    let item_in = g.cin * g.h * g.w;
    let wdata = weight.data();
    let xdata = x.data();
    let parts: Vec<Vec<f32>> = par::map(g.n * bands, |task| {
        let (b, band) = (task / bands, task % bands);
        let (r0, r1) = g.band_range(band);
        let bp = (r1 - r0) * g.wo;
        let x_item = &xdata[b * item_in..(b + 1) * item_in];
        let mut out = vec![0.0f32; g.cout * bp];
        if g.is_pointwise() {
            let hw = g.h * g.w;
            let off = r0 * g.w;
            f32::gemm(
                g.cout,
                g.cin,
                bp,
                1.0,
                (wdata, g.cin as isize, 1),
                (&x_item[off..], hw as isize, 1),
                0.0,
                (&mut out, bp as isize, 1),
            );
        } else {
            let cols = im2col(&g, x_item, r0, r1);
            f32::gemm(
                g.cout,
                g.kk(),
                bp,
                1.0,
                (wdata, g.kk() as isize, 1),
                (&cols, bp as isize, 1),
                0.0,
                (&mut out, bp as isize, 1),
            );
        }
        if let Some(bias) = bias {
            for (co, row) in out.chunks_exact_mut(bp).enumerate() {
                let bv = bias.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        out
    });
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    let plane = g.ho * g.wo;
    let od = out.data_mut();
    for (task, part) in parts.into_iter().enumerate() {
        let (b, band) = (task / bands, task % bands);
        let (r0, r1) = g.band_range(band);
        let bp = (r1 - r0) * g.wo;
        for co in 0..g.cout {
            let dst = (b * g.cout + co) * plane + r0 * g.wo;
            od[dst..dst + bp].copy_from_slice(&part[co * bp..(co + 1) * bp]);
        }
    }
    out
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_grad_input(grad_out: &Tensor, weight: &Tensor, stride: usize, in_hw: (usize, usize)) -> Tensor {
    let (cout, cin, k, _) = weight.dims4();
    // Transposed, spatially flipped kernel: [cin, cout, k, k].
    let mut flipped = Tensor::zeros(&[cin, cout, k, k]);
    {
        let src = weight.data();
        let dst = flipped.data_mut();
        for co in 0..cout {
            for ci in 0..cin {
                for a in 0..k {
                    for b in 0..k {
                        dst[((ci * cout + co) * k + (k - 1 - a)) * k + (k - 1 - b)] =
                            src[((co * cin + ci) * k + a) * k + b];
                    }
                }
            }
        }
    }
    if stride == 1 {
        return conv2d(grad_out, &flipped, None, 1);
    }
    // Strided case: scatter the gradient onto the input grid, then correlate.
    let (n, c, ho, wo) = grad_out.dims4();
    let (h, w) = in_hw;
    let mut dil = Tensor::zeros(&[n, c, h, w]);
    {
        let src = grad_out.data();
        let dst = dil.data_mut();
        for nc in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[(nc * h + oy * stride) * w + ox * stride] = src[(nc * ho + oy) * wo + ox];
                }
            }
        }
    }
    conv2d(&dil, &flipped, None, 1)
}

/// Gradients of a convolution with respect to its weight and bias.
pub fn conv2d_grad_params(x: &Tensor, grad_out: &Tensor, weight_shape: &[usize], stride: usize) -> (Tensor, Tensor) {
    let proto = Tensor::zeros(weight_shape);
    let g = ConvGeom::new(x, &proto, stride);
    let bands = g.bands();
    let item_in = g.cin * g.h * g.w;
    let plane = g.ho * g.wo;
    let xdata = x.data();
    let gdata = grad_out.data();
    let parts: Vec<Vec<f32>> = par::map(g.n * bands, |task| {
        let (b, band) = (task / bands, task % bands);
        let (r0, r1) = g.band_range(band);
        let bp = (r1 - r0) * g.wo;
        let x_item = &xdata[b * item_in..(b + 1) * item_in];
        let g_band = &gdata[b * g.cout * plane + r0 * g.wo..];
        let mut gw = vec![0.0f32; g.cout * g.kk()];
        if g.is_pointwise() {
            let hw = g.h * g.w;
            f32::gemm(
                g.cout,
                bp,
                g.cin,
                1.0,
                (g_band, plane as isize, 1),
                (&x_item[r0 * g.w..], 1, hw as isize),
                0.0,
                (&mut gw, g.cin as isize, 1),
            );
        } else {
            let cols = im2col(&g, x_item, r0, r1);
            f32::gemm(
                g.cout,
                bp,
                g.kk(),
                1.0,
                (g_band, plane as isize, 1),
                (&cols, 1, bp as isize),
                0.0,
                (&mut gw, g.kk() as isize, 1),
            );
        }
        gw
    });
    let mut grad_w = Tensor::zeros(weight_shape);
    for p in &parts {
        for (a, b) in grad_w.data_mut().iter_mut().zip(p) {
            *a += *b;
        }
    }
    let mut grad_b = Tensor::zeros(&[g.cout]);
    for b in 0..g.n {
        for co in 0..g.cout {
            let s: f32 = gdata[(b * g.cout + co) * plane..][..plane].iter().sum();
            grad_b.data_mut()[co] += s;
        }
    }
    (grad_w, grad_b)
}

pub fn relu(x: &Tensor) -> Tensor {
    map_unary(x, |v| v.max(0.0))
}

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    map_unary(x, |v| if v > 0.0 { v } else { v * slope })
}

fn map_unary(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Backward of relu / leaky relu given the forward *output* (sign-preserving).
pub fn leaky_relu_backward(y: &Tensor, grad: &Tensor, slope: f32) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&yv, &g)| if yv > 0.0 { g } else { g * slope })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output,
/// the winning offset within its window (`dy * 2 + dx`).
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u8; n * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let src = &xd[nc * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = 2 * oy * w + 2 * ox;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for (i, &v) in cand.iter().enumerate().skip(1) {
                    if v > cand[best] {
                        best = i;
                    }
                }
                let o = (nc * ho + oy) * wo + ox;
                od[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(grad: &Tensor, arg: &[u8], in_shape: &[usize]) -> Tensor {
    let (n, c, ho, wo) = grad.dims4();
    let w = in_shape[3];
    let h = in_shape[2];
    let mut gx = Tensor::zeros(in_shape);
    let gd = grad.data();
    let xd = gx.data_mut();
    for nc in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = (nc * ho + oy) * wo + ox;
                let a = arg[o] as usize;
                let (dy, dx) = (a / 2, a % 2);
                xd[nc * h * w + (2 * oy + dy) * w + 2 * ox + dx] += gd[o];
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        for y in 0..2 * h {
            let src = &xd[(nc * h + y / 2) * w..][..w];
            let dst = &mut od[(nc * 2 * h + y) * 2 * w..][..2 * w];
            for (x2, v) in dst.iter_mut().enumerate() {
                *v = src[x2 / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward(grad: &Tensor) -> Tensor {
    let (n, c, h2, w2) = grad.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let gd = grad.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        for y in 0..h2 {
            for x2 in 0..w2 {
                od[(nc * h + y / 2) * w + x2 / 2] += gd[(nc * h2 + y) * w2 + x2];
            }
        }
    }
    out
}

/// `y[:, c] = x[:, c] * scale[c] + shift[c]`.
pub fn affine_channels(x: &Tensor, scale: &[f32], shift: &[f32]) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert_eq!(scale.len(), c);
    assert_eq!(shift.len(), c);
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let ch = i % c;
        plane.iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
    }
    debug_assert_eq!(out.len(), n * c * h * w);
    out
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial/batch mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.item_slice(i));
        data.extend_from_slice(b.item_slice(i));
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data).expect("sizes add up")
}

/// Splits the channel gradient of a concatenation back into its two inputs.
pub fn split_channels(g: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = g.dims4();
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * h * w);
    let mut b = Vec::with_capacity(n * cb * h * w);
    for i in 0..n {
        let s = g.item_slice(i);
        a.extend_from_slice(&s[..ca * h * w]);
        b.extend_from_slice(&s[ca * h * w..]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], a).expect("split a"),
        Tensor::from_vec(&[n, cb, h, w], b).expect("split b"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution with zero padding.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let p = (k / 2) as isize;
        let ho = (h + 2 * (k / 2) - k) / stride + 1;
        let wo = (wd + 2 * (k / 2) - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b.data()[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - p;
                                    let ix = (ox * stride + kx) as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                                    s += (xv * wv) as f64;
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + co) * ho + oy) * wo + ox] = s as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_all_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
            let x = rand_tensor(&[2, 3, 6, 8], &mut rng);
            let w = rand_tensor(&[4, 3, k, k], &mut rng);
            let b = rand_tensor(&[4], &mut rng);
            let got = conv2d(&x, &w, Some(&b), stride);
            let want = conv_naive(&x, &w, &b, stride);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-5, "k={} s={}", k, stride);
        }
    }

    #[test]
    fn conv_gradients_match_adjoint_identity() {
        // <conv(x), g> is bilinear: its derivative in x is grad_input(g) and in w is grad_params.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
            let x = rand_tensor(&[2, 3, 6, 6], &mut rng);
            let w = rand_tensor(&[5, 3, k, k], &mut rng);
            let zero_b = Tensor::zeros(&[5]);
            let y = conv2d(&x, &w, None, stride);
            let g = rand_tensor(y.shape(), &mut rng);
            let dot = |a: &Tensor, b: &Tensor| -> f64 {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(p, q)| (*p as f64) * (*q as f64))
                    .sum()
            };
            let gx = conv2d_grad_input(&g, &w, stride, (6, 6));
            let (gw, gb) = conv2d_grad_params(&x, &g, w.shape(), stride);
            // Probe with random directions.
            let dx = rand_tensor(x.shape(), &mut rng);
            let dw = rand_tensor(w.shape(), &mut rng);
            let lhs_x = dot(&conv_naive(&dx, &w, &zero_b, stride), &g);
            let lhs_w = dot(&conv_naive(&x, &dw, &zero_b, stride), &g);
            assert!(
                (lhs_x - dot(&gx, &dx)).abs() < 1e-3,
                "input adjoint k={} s={}",
                k,
                stride
            );
            assert!(
                (lhs_w - dot(&gw, &dw)).abs() < 1e-3,
                "weight adjoint k={} s={}",
                k,
                stride
            );
            let gsum: f32 = g
                .data()
                .chunks(y.dims4().2 * y.dims4().3)
                .enumerate()
                .filter(|(i, _)| i % 5 == 0)
                .map(|(_, c)| c.iter().sum::<f32>())
                .sum();
            assert!((gb.data()[0] - gsum).abs() < 1e-4);
        }
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 2, 4, 6], &mut rng);
        let (p, arg) = max_pool2(&x);
        assert_eq!(p.shape(), &[1, 2, 2, 3]);
        let g = rand_tensor(p.shape(), &mut rng);
        let gx = max_pool2_backward(&g, &arg, x.shape());
        assert!((gx.data().iter().sum::<f32>() - g.data().iter().sum::<f32>()).abs() < 1e-5);

        let u = upsample_nearest2(&x);
        assert_eq!(u.shape(), &[1, 2, 8, 12]);
        assert_eq!(u.data()[13], x.data()[0]);
        let gu = upsample_nearest2_backward(&Tensor::full(u.shape(), 1.0));
        assert!(gu.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let b = rand_tensor(&[2, 1, 2, 2], &mut rng);
        let c = concat_channels(&a, &b);
        let (a2, b2) = split_channels(&c, 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
