//! RGB images and the Laplacian pyramid.
//!
//! Downsampling is bilinear at scale 1/2 (each output pixel is the mean of a
//! 2x2 block); upsampling is bilinear with half-pixel centres and clamped
//! edges. Both are linear and preserve constants, so a decomposition
//! `residual = level - Up(Down(level))` is inverted exactly by
//! `Up(coarser) + residual`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Planar RGB image (`3 x height x width`). Source images live in `[0, 1]`;
/// residual images may be negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::dim(format!(
                "{}x{} RGB image needs {} values, got {}",
                height,
                width,
                CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite pixel value {}", v)));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Image {
            height,
            width,
            data: vec![v; CHANNELS * height * width],
        }
    }

    /// Builds an image from a per-pixel function `f(channel, y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Copy with every value clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// `self + other`, elementwise.
    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        if self.dims() != other.dims() {
            return Err(Error::dim(format!(
                "image size mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, CHANNELS, self.height, self.width], self.data.clone()).expect("sized")
    }

    /// Batch item `b` of a `[n, 3, h, w]` tensor.
    pub fn from_tensor(t: &Tensor, b: usize) -> Result<Image> {
        let (n, c, h, w) = t.dims4();
        if c != CHANNELS || b >= n {
            return Err(Error::dim(format!("cannot take image {} of tensor {:?}", b, t.shape())));
        }
        Image::new(h, w, t.item_slice(b).to_vec())
    }

    pub fn batch_to_tensor(images: &[Image]) -> Result<Tensor> {
        let ts: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
        Tensor::stack(&ts)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.as_raw();
        Image::from_fn(h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| (255.0 * self.get(c, y, x).clamp(0.0, 1.0)).round() as u8);
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        out
    }

    pub fn from_rgb32f(img: &image::Rgb32FImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.as_raw();
        Image::from_fn(h, w, |c, y, x| raw[(y * w + x) * 3 + c])
    }

    pub fn to_rgb32f(&self) -> image::Rgb32FImage {
        let mut raw = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    raw.push(self.get(c, y, x));
                }
            }
        }
        image::Rgb32FImage::from_raw(self.width as u32, self.height as u32, raw).expect("sized")
    }

    /// Decodes PNG or JPEG into `[0, 1]` values (8-bit channel / 255).
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path)?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    /// Encodes as `round(255 * clamp(v, 0, 1))`; format from the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }

    /// Resamples to an arbitrary size with a triangle (bilinear) filter.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let out = image::imageops::resize(
            &self.to_rgb32f(),
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Image::from_rgb32f(&out)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::dim(format!(
                "crop {}x{} at ({}, {}) exceeds {}x{}",
                height, width, top, left, self.height, self.width
            )));
        }
        Ok(Image::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// Pads bottom and right edges by mirror reflection (edge pixel not repeated).
    pub fn pad_reflect(&self, height: usize, width: usize) -> Result<Image> {
        if height < self.height || width < self.width {
            return Err(Error::dim("reflection padding cannot shrink an image"));
        }
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        Ok(Image::from_fn(height, width, |c, y, x| {
            self.get(c, reflect(y, self.height), reflect(x, self.width))
        }))
    }
}

fn check_even(img: &Image) -> Result<()> {
    if img.height % 2 != 0 || img.width % 2 != 0 || img.height == 0 || img.width == 0 {
        return Err(Error::dim(format!(
            "downsampling needs even, non-zero dimensions, got {}x{}",
            img.height, img.width
        )));
    }
    Ok(())
}

/// Halves both dimensions by averaging 2x2 blocks.
pub fn downsample(img: &Image) -> Result<Image> {
    check_even(img)?;
    let (h, w) = (img.height / 2, img.width / 2);
    let mut data = vec![0.0f32; CHANNELS * h * w];
    let src = &img.data;
    let sw = img.width;
    let sh = img.height;
    par::for_each_chunk_mut(&mut data, w, |row, out| {
        let (c, y) = (row / h, row % h);
        let r0 = &src[(c * sh + 2 * y) * sw..][..sw];
        let r1 = &src[(c * sh + 2 * y + 1) * sw..][..sw];
        for (x, v) in out.iter_mut().enumerate() {
            *v = 0.25 * ((r0[2 * x] + r0[2 * x + 1]) + (r1[2 * x] + r1[2 * x + 1]));
        }
    });
    Ok(Image {
        height: h,
        width: w,
        data,
    })
}

/// Two-tap interpolation weights for one output coordinate.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f32,
}

fn taps(n_in: usize, factor: usize) -> Vec<Tap> {
    let f = factor as f64;
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                w_hi: (src - lo as f64) as f32,
            }
        })
        .collect()
}

/// Bilinear upsampling by 2 or 4.
pub fn upsample(img: &Image, factor: usize) -> Result<Image> {
    if factor != 2 && factor != 4 {
        return Err(Error::Parameter(format!(
            "upsample factor must be 2 or 4, got {}",
            factor
        )));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::dim("cannot upsample an empty image"));
    }
    let (h, w) = (img.height * factor, img.width * factor);
    let tx = taps(img.width, factor);
    let ty = taps(img.height, factor);
    let (sh, sw) = (img.height, img.width);
    // Horizontal pass: 3*sh rows of width w.
    let mut horiz = vec![0.0f32; CHANNELS * sh * w];
    par::for_each_chunk_mut(&mut horiz, w, |row, out| {
        let src = &img.data[row * sw..][..sw];
        for (o, t) in out.iter_mut().zip(&tx) {
            *o = src[t.lo] + t.w_hi * (src[t.hi] - src[t.lo]);
        }
    });
    let mut data = vec![0.0f32; CHANNELS * h * w];
    par::for_each_chunk_mut(&mut data, w, |row, out| {
        let (c, y) = (row / h, row % h);
        let t = ty[y];
        let a = &horiz[(c * sh + t.lo) * w..][..w];
        let b = &horiz[(c * sh + t.hi) * w..][..w];
        for ((o, &av), &bv) in out.iter_mut().zip(a).zip(b) {
            *o = av + t.w_hi * (bv - av);
        }
    });
    Ok(Image {
        height: h,
        width: w,
        data,
    })
}

/// Base image plus residuals ordered coarse to fine (finest last).
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidDecomposition {
    pub base: Image,
    pub residuals: Vec<Image>,
}

impl PyramidDecomposition {
    pub fn level_count(&self) -> usize {
        self.residuals.len() + 1
    }
}

/// Splits `img` into a `levels`-level Laplacian pyramid.
pub fn decompose(img: &Image, levels: usize) -> Result<PyramidDecomposition> {
    if levels == 0 {
        return Err(Error::Parameter("a pyramid needs at least one level".into()));
    }
    let m = 1usize << (levels - 1);
    if img.height % m != 0 || img.width % m != 0 {
        return Err(Error::dim(format!(
            "{}x{} image cannot form a {}-level pyramid (needs multiples of {})",
            img.height, img.width, levels, m
        )));
    }
    let mut gaussian = vec![img.clone()];
    for _ in 1..levels {
        let next = downsample(gaussian.last().expect("non-empty"))?;
        gaussian.push(next);
    }
    let mut residuals = Vec::with_capacity(levels - 1);
    for k in (0..levels - 1).rev() {
        let up = upsample(&gaussian[k + 1], 2)?;
        residuals.push(gaussian[k].sub(&up)?);
    }
    let base = gaussian.pop().expect("non-empty");
    Ok(PyramidDecomposition { base, residuals })
}

/// Rebuilds an image as `Up(...Up(base) + r_1 ...) + r_L` without clamping.
pub fn aggregate(base: &Image, residuals: &[Image]) -> Result<Image> {
    let mut cur = base.clone();
    for (i, r) in residuals.iter().enumerate() {
        if r.dims() != (2 * cur.height, 2 * cur.width) {
            return Err(Error::dim(format!(
                "residual {} is {:?}, expected {:?}",
                i,
                r.dims(),
                (2 * cur.height, 2 * cur.width)
            )));
        }
        cur = upsample(&cur, 2)?.add(r)?;
    }
    Ok(cur)
}

/// [`aggregate`] followed by clamping to `[0, 1]` for display and export.
pub fn aggregate_clamped(base: &Image, residuals: &[Image]) -> Result<Image> {
    Ok(aggregate(base, residuals)?.clamped())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.gen::<f32>())
    }

    /// Brute-force 2x2 box convolution with stride 2.
    fn box_oracle(img: &Image) -> Image {
        let k = [[0.25f64, 0.25], [0.25, 0.25]];
        Image::from_fn(img.height() / 2, img.width() / 2, |c, y, x| {
            let mut s = 0.0f64;
            for (dy, row) in k.iter().enumerate() {
                for (dx, kv) in row.iter().enumerate() {
                    s += kv * img.get(c, 2 * y + dy, 2 * x + dx) as f64;
                }
            }
            s as f32
        })
    }

    /// Textbook bilinear sample at half-pixel-centred source coordinates.
    fn bilinear_oracle(img: &Image, f: usize) -> Image {
        let (h, w) = img.dims();
        Image::from_fn(h * f, w * f, |c, y, x| {
            let sy = ((y as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((x as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let p = |yy: usize, xx: usize| img.get(c, yy, xx) as f64;
            let v =
                (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
            v as f32
        })
    }

    #[test]
    fn downsample_constant_stays_constant() {
        let d = downsample(&Image::filled(4, 4, 0.5)).unwrap();
        assert_eq!(d.dims(), (2, 2));
        assert!(d.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn downsample_hand_computed_patch() {
        let vals = [0.0, 0.4, 0.8, 0.4];
        let img = Image::from_fn(2, 2, |_, y, x| vals[y * 2 + x]);
        let d = downsample(&img).unwrap();
        for c in 0..3 {
            assert!((d.get(c, 0, 0) - 0.4).abs() < 1e-7);
        }
    }

    #[test]
    fn downsample_matches_box_oracle() {
        let img = random_image(8, 8, 11);
        assert!(downsample(&img).unwrap().max_abs_diff(&box_oracle(&img)) < 1e-6);
    }

    #[test]
    fn downsample_rejects_odd_dims() {
        assert!(matches!(
            downsample(&Image::filled(3, 4, 0.0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn upsample_examples() {
        let u = upsample(&Image::filled(2, 2, 0.5), 2).unwrap();
        assert_eq!(u.dims(), (4, 4));
        assert!(u.data().iter().all(|&v| v == 0.5));
        let one = Image::from_fn(1, 1, |c, _, _| 0.1 * (c + 1) as f32);
        let u = upsample(&one, 2).unwrap();
        for c in 0..3 {
            assert!(u.plane(c).iter().all(|&v| v == one.get(c, 0, 0)));
        }
        assert!(matches!(upsample(&one, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn upsample_matches_bilinear_oracle() {
        let img = random_image(4, 4, 12);
        for f in [2, 4] {
            let got = upsample(&img, f).unwrap();
            assert!(got.max_abs_diff(&bilinear_oracle(&img, f)) < 1e-6, "factor {}", f);
        }
        let img = random_image(3, 5, 13);
        assert!(upsample(&img, 2).unwrap().max_abs_diff(&bilinear_oracle(&img, 2)) < 1e-6);
    }

    #[test]
    fn decompose_degenerate_and_constant() {
        let img = random_image(8, 8, 14);
        let p = decompose(&img, 1).unwrap();
        assert_eq!(p.base, img);
        assert!(p.residuals.is_empty());

        let p = decompose(&Image::filled(8, 8, 0.3), 2).unwrap();
        assert!(p.residuals[0].data().iter().all(|&v| v.abs() < 1e-7));
        assert!(matches!(
            decompose(&Image::filled(6, 6, 0.0), 3),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn round_trip_256() {
        let img = random_image(256, 256, 15);
        let p = decompose(&img, 2).unwrap();
        assert_eq!(p.base.dims(), (128, 128));
        assert!(aggregate(&p.base, &p.residuals).unwrap().max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn aggregate_hand_example() {
        let base = Image::filled(1, 1, 0.5);
        let vals = [-0.5, 0.0, 0.5, 0.0];
        let r = Image::from_fn(2, 2, |_, y, x| vals[y * 2 + x]);
        let out = aggregate(&base, &[r]).unwrap();
        let want = [0.0, 0.5, 1.0, 0.5];
        for y in 0..2 {
            for x in 0..2 {
                assert!((out.get(0, y, x) - want[y * 2 + x]).abs() < 1e-7);
            }
        }
        assert_eq!(aggregate(&base, &[]).unwrap(), base);
        assert!(aggregate(&base, &[Image::filled(3, 3, 0.0)]).is_err());
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_edge() {
        let img = Image::from_fn(2, 3, |_, y, x| (y * 3 + x) as f32);
        let p = img.pad_reflect(4, 5).unwrap();
        assert_eq!(p.get(0, 0, 3), img.get(0, 0, 1));
        assert_eq!(p.get(0, 2, 0), img.get(0, 0, 0));
        assert_eq!(p.crop(0, 0, 2, 3).unwrap(), img);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn resampling_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let x = random_image(8, 12, seed);
            let y = random_image(8, 12, seed + 1);
            let combo = Image::from_fn(8, 12, |c, i, j| a * x.get(c, i, j) + b * y.get(c, i, j));
            let d = downsample(&combo).unwrap();
            let (dx, dy) = (downsample(&x).unwrap(), downsample(&y).unwrap());
            let u = upsample(&combo, 2).unwrap();
            let (ux, uy) = (upsample(&x, 2).unwrap(), upsample(&y, 2).unwrap());
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..6 {
                        prop_assert!((d.get(c, i, j) - (a * dx.get(c, i, j) + b * dy.get(c, i, j))).abs() < 1e-5);
                    }
                }
                for i in 0..16 {
                    for j in 0..24 {
                        prop_assert!((u.get(c, i, j) - (a * ux.get(c, i, j) + b * uy.get(c, i, j))).abs() < 1e-5);
                    }
                }
            }
        }

        #[test]
        fn pyramid_reconstructs(seed in 0u64..1000, levels in 1usize..4, hm in 1usize..5, wm in 1usize..5) {
            let m = 1 << (levels - 1);
            let img = random_image(hm * m * 2, wm * m * 2, seed);
            let p = decompose(&img, levels).unwrap();
            prop_assert_eq!(p.level_count(), levels);
            prop_assert!(aggregate(&p.base, &p.residuals).unwrap().max_abs_diff(&img) < 1e-6);
        }
    }
}
