//! Style and content objectives with analytic gradients.
//!
//! Every kernel works on [`FeatureVectors`], an `N x C` matrix holding one
//! feature vector per spatial position, and is generic over [`Real`] so the
//! same code runs in `f64` for gradient checks and in training. Gradients are
//! always taken with respect to the stylized features (`fcs`); the other
//! argument is a fixed target.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{Extractor, FeatureSet, LayerTag, STATS_EPS};
use crate::imagery::Image;
use crate::par;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Added to cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;

/// Maximum positions per side entering an `N x N` cost or similarity matrix.
pub const SAMPLE_CAP: usize = 1024;

/// Row-major `rows x cols` matrix: one `cols`-channel vector per position.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVectors<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureVectors<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{}x{} feature matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(FeatureVectors { rows, cols, data })
    }

    /// Flattens batch item `b` of an NCHW feature map to `(h*w) x c`.
    pub fn from_feature_map(t: &Tensor, b: usize) -> Self {
        let (_, c, h, w) = t.dims4();
        let n = h * w;
        let src = t.item_slice(b);
        let mut data = vec![T::zero(); n * c];
        for ch in 0..c {
            for p in 0..n {
                data[p * c + ch] = T::lit(src[ch * n + p] as f64);
            }
        }
        FeatureVectors { rows: n, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureVectors {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Multiplies every entry by `k`.
    pub fn scaled(&self, k: T) -> Self {
        FeatureVectors {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| *v * k).collect(),
        }
    }

    fn row_norms(&self) -> Vec<T> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| *v * *v).sum::<T>().sqrt())
            .collect()
    }

    /// `self * other^T`.
    fn gram_with(&self, other: &Self) -> Vec<T> {
        let mut g = vec![T::zero(); self.rows * other.rows];
        T::gemm(
            self.rows,
            self.cols,
            other.rows,
            T::one(),
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
            T::zero(),
            (&mut g, other.rows as isize, 1),
        );
        g
    }

    /// Per-channel mean and `sqrt(var + eps)` over rows.
    fn column_stats(&self) -> (Vec<T>, Vec<T>) {
        let n = T::lit(self.rows as f64);
        let eps = T::lit(STATS_EPS);
        let mut mean = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m = *m + *v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for ((s, v), m) in var.iter_mut().zip(self.row(i)).zip(&mean) {
                *s = *s + (*v - *m) * (*v - *m);
            }
        }
        let std = var.into_iter().map(|s| (s / n + eps).sqrt()).collect();
        (mean, std)
    }
}

/// `rows(fs) x rows(fcs)` cosine distances.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> CostMatrix<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }
}

fn check_cols<T: Real>(a: &FeatureVectors<T>, b: &FeatureVectors<T>) -> Result<()> {
    if a.cols != b.cols {
        return Err(Error::dim(format!("channel mismatch: {} vs {}", a.cols, b.cols)));
    }
    Ok(())
}

fn check_nonempty<T: Real>(a: &FeatureVectors<T>, what: &str) -> Result<()> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::Parameter(format!("{} feature set is empty", what)));
    }
    Ok(())
}

fn sgn<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `C_ij = 1 - <fs_i, fcs_j> / (|fs_i| |fcs_j| + eps)`.
pub fn cosine_cost<T: Real>(fs: &FeatureVectors<T>, fcs: &FeatureVectors<T>) -> Result<CostMatrix<T>> {
    check_cols(fs, fcs)?;
    let eps = T::lit(COSINE_EPS);
    let (na, nb) = (fs.row_norms(), fcs.row_norms());
    let mut data = fs.gram_with(fcs);
    for i in 0..fs.rows {
        for j in 0..fcs.rows {
            let g = &mut data[i * fcs.rows + j];
            *g = T::one() - *g / (na[i] * nb[j] + eps);
        }
    }
    Ok(CostMatrix {
        rows: fs.rows,
        cols: fcs.rows,
        data,
    })
}

/// Loss value with its gradient with respect to `fcs` (row-major like `fcs`).
#[derive(Clone, Debug)]
pub struct ValueGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

/// Relaxed earth mover distance: the larger of the two one-sided mean
/// nearest-neighbour cosine costs.
pub fn remd_loss<T: Real>(fs: &FeatureVectors<T>, fcs: &FeatureVectors<T>) -> Result<T> {
    Ok(remd_impl(fs, fcs, false)?.value)
}

pub fn remd_loss_grad<T: Real>(fs: &FeatureVectors<T>, fcs: &FeatureVectors<T>) -> Result<ValueGrad<T>> {
    remd_impl(fs, fcs, true)
}

fn remd_impl<T: Real>(fs: &FeatureVectors<T>, fcs: &FeatureVectors<T>, want_grad: bool) -> Result<ValueGrad<T>> {
    check_nonempty(fs, "style")?;
    check_nonempty(fcs, "stylized")?;
    check_cols(fs, fcs)?;
    let (ns, ncs) = (fs.rows, fcs.rows);
    let eps = T::lit(COSINE_EPS);
    let (na, nb) = (fs.row_norms(), fcs.row_norms());
    let gram = fs.gram_with(fcs);
    let cost = |i: usize, j: usize| T::one() - gram[i * ncs + j] / (na[i] * nb[j] + eps);

    let row_min: Vec<(T, usize)> = par::map(ns, |i| {
        let mut best = (cost(i, 0), 0);
        for j in 1..ncs {
            let c = cost(i, j);
            if c < best.0 {
                best = (c, j);
            }
        }
        best
    });
    let col_min: Vec<(T, usize)> = par::map(ncs, |j| {
        let mut best = (cost(0, j), 0);
        for i in 1..ns {
            let c = cost(i, j);
            if c < best.0 {
                best = (c, i);
            }
        }
        best
    });
    let r1 = row_min.iter().map(|p| p.0).sum::<T>() / T::lit(ns as f64);
    let r2 = col_min.iter().map(|p| p.0).sum::<T>() / T::lit(ncs as f64);
    let value = r1.max(r2);
    if !want_grad {
        return Ok(ValueGrad {
            value,
            grad: Vec::new(),
        });
    }

    // (i, j, dL/dC_ij) for the active side of the max.
    let picks: Vec<(usize, usize, T)> = if r1 >= r2 {
        let w = T::one() / T::lit(ns as f64);
        row_min.iter().enumerate().map(|(i, &(_, j))| (i, j, w)).collect()
    } else {
        let w = T::one() / T::lit(ncs as f64);
        col_min.iter().enumerate().map(|(j, &(_, i))| (i, j, w)).collect()
    };
    let c = fs.cols;
    let mut grad = vec![T::zero(); ncs * c];
    for (i, j, w) in picks {
        let d = na[i] * nb[j] + eps;
        let g = gram[i * ncs + j];
        let a = fs.row(i);
        let b = fcs.row(j);
        // dC/db = -(a / d - g * |a| * b / (|b| d^2))
        let k_b = if nb[j] > T::zero() {
            g * na[i] / (nb[j] * d * d)
        } else {
            T::zero()
        };
        let out = &mut grad[j * c..(j + 1) * c];
        for ((o, av), bv) in out.iter_mut().zip(a).zip(b) {
            *o = *o - w * (*av / d - k_b * *bv);
        }
    }
    Ok(ValueGrad { value, grad })
}

/// `|mu(fs) - mu(fcs)|_2 + |sigma(fs) - sigma(fcs)|_2` over channel statistics.
pub fn mean_variance_loss<T: Real>(fs: &FeatureVectors<T>, fcs: &FeatureVectors<T>) -> Result<T> {
    Ok(mean_variance_impl(fs, fcs, false)?.value)
}

pub fn mean_variance_loss_grad<T: Real>(fs: &FeatureVectors<T>, fcs: &FeatureVectors<T>) -> Result<ValueGrad<T>> {
    mean_variance_impl(fs, fcs, true)
}

fn mean_variance_impl<T: Real>(
    fs: &FeatureVectors<T>,
    fcs: &FeatureVectors<T>,
    want_grad: bool,
) -> Result<ValueGrad<T>> {
    check_cols(fs, fcs)?;
    check_nonempty(fs, "style")?;
    check_nonempty(fcs, "stylized")?;
    let (mu_s, sd_s) = fs.column_stats();
    let (mu_cs, sd_cs) = fcs.column_stats();
    let dmu: Vec<T> = mu_cs.iter().zip(&mu_s).map(|(a, b)| *a - *b).collect();
    let dsd: Vec<T> = sd_cs.iter().zip(&sd_s).map(|(a, b)| *a - *b).collect();
    let l_mu = dmu.iter().map(|v| *v * *v).sum::<T>().sqrt();
    let l_sd = dsd.iter().map(|v| *v * *v).sum::<T>().sqrt();
    let value = l_mu + l_sd;
    if !want_grad {
        return Ok(ValueGrad {
            value,
            grad: Vec::new(),
        });
    }
    let n = T::lit(fcs.rows as f64);
    let c = fcs.cols;
    let g_mu: Vec<T> = dmu
        .iter()
        .map(|v| if l_mu > T::zero() { *v / l_mu } else { T::zero() })
        .collect();
    let g_sd: Vec<T> = dsd
        .iter()
        .map(|v| if l_sd > T::zero() { *v / l_sd } else { T::zero() })
        .collect();
    let mut grad = vec![T::zero(); fcs.rows * c];
    for i in 0..fcs.rows {
        let x = fcs.row(i);
        let out = &mut grad[i * c..(i + 1) * c];
        for ch in 0..c {
            out[ch] = (g_mu[ch] + g_sd[ch] * (x[ch] - mu_cs[ch]) / sd_cs[ch]) / n;
        }
    }
    Ok(ValueGrad { value, grad })
}

/// Subtracts each channel's mean and divides by its (eps-guarded) std.
fn channel_normalize<T: Real>(f: &FeatureVectors<T>) -> (Vec<T>, Vec<T>) {
    let (mu, sd) = f.column_stats();
    let mut z = f.data.clone();
    for i in 0..f.rows {
        for ch in 0..f.cols {
            let v = &mut z[i * f.cols + ch];
            *v = (*v - mu[ch]) / sd[ch];
        }
    }
    (z, sd)
}

/// `|norm(fc) - norm(fcs)|_2` with per-channel standardisation.
pub fn perceptual_loss<T: Real>(fc: &FeatureVectors<T>, fcs: &FeatureVectors<T>) -> Result<T> {
    Ok(perceptual_impl(fc, fcs, false)?.value)
}

pub fn perceptual_loss_grad<T: Real>(fc: &FeatureVectors<T>, fcs: &FeatureVectors<T>) -> Result<ValueGrad<T>> {
    perceptual_impl(fc, fcs, true)
}

fn perceptual_impl<T: Real>(fc: &FeatureVectors<T>, fcs: &FeatureVectors<T>, want_grad: bool) -> Result<ValueGrad<T>> {
    if (fc.rows, fc.cols) != (fcs.rows, fcs.cols) {
        return Err(Error::dim(format!(
            "perceptual loss needs equal shapes, got {}x{} and {}x{}",
            fc.rows, fc.cols, fcs.rows, fcs.cols
        )));
    }
    check_nonempty(fc, "content")?;
    let (zc, _) = channel_normalize(fc);
    let (zcs, sd) = channel_normalize(fcs);
    let diff: Vec<T> = zcs.iter().zip(&zc).map(|(a, b)| *a - *b).collect();
    let value = diff.iter().map(|v| *v * *v).sum::<T>().sqrt();
    if !want_grad {
        return Ok(ValueGrad {
            value,
            grad: Vec::new(),
        });
    }
    let (n, c) = (fcs.rows, fcs.cols);
    if value == T::zero() {
        return Ok(ValueGrad {
            value,
            grad: vec![T::zero(); n * c],
        });
    }
    let nt = T::lit(n as f64);
    // Through z = (x - mu) / sd: dx = (g - mean(g) - z * mean(g * z)) / sd.
    let mut g_mean = vec![T::zero(); c];
    let mut gz_mean = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let g = diff[i * c + ch] / value;
            g_mean[ch] = g_mean[ch] + g;
            gz_mean[ch] = gz_mean[ch] + g * zcs[i * c + ch];
        }
    }
    g_mean.iter_mut().for_each(|v| *v = *v / nt);
    gz_mean.iter_mut().for_each(|v| *v = *v / nt);
    let mut grad = vec![T::zero(); n * c];
    for i in 0..n {
        for ch in 0..c {
            let k = i * c + ch;
            let g = diff[k] / value;
            grad[k] = (g - g_mean[ch] - zcs[k] * gz_mean[ch]) / sd[ch];
        }
    }
    Ok(ValueGrad { value, grad })
}

/// Column normaliser with the eps guard; returns `(value, differentiable)`.
fn guard_sum<T: Real>(s: T) -> (T, bool) {
    let eps = T::lit(COSINE_EPS);
    if s.abs() < eps {
        (if s < T::zero() { -eps } else { eps }, false)
    } else {
        (s, true)
    }
}

struct SelfSim<T> {
    norms: Vec<T>,
    gram: Vec<T>,
    sim: Vec<T>,
    colsum: Vec<(T, bool)>,
}

impl<T: Real> SelfSim<T> {
    fn new(f: &FeatureVectors<T>) -> Self {
        let n = f.rows;
        let eps = T::lit(COSINE_EPS);
        let norms = f.row_norms();
        let gram = f.gram_with(f);
        let mut sim = gram.clone();
        for i in 0..n {
            for j in 0..n {
                sim[i * n + j] = gram[i * n + j] / (norms[i] * norms[j] + eps);
            }
        }
        let colsum = (0..n)
            .map(|j| guard_sum((0..n).map(|i| sim[i * n + j]).sum::<T>()))
            .collect();
        SelfSim {
            norms,
            gram,
            sim,
            colsum,
        }
    }

    fn normalized(&self, i: usize, j: usize) -> T {
        let n = self.norms.len();
        self.sim[i * n + j] / self.colsum[j].0
    }
}

/// Mean absolute difference between column-normalised cosine
/// self-similarity matrices of content and stylized features.
pub fn self_similarity_loss<T: Real>(fc: &FeatureVectors<T>, fcs: &FeatureVectors<T>) -> Result<T> {
    Ok(self_similarity_impl(fc, fcs, false)?.value)
}

pub fn self_similarity_loss_grad<T: Real>(fc: &FeatureVectors<T>, fcs: &FeatureVectors<T>) -> Result<ValueGrad<T>> {
    self_similarity_impl(fc, fcs, true)
}

fn self_similarity_impl<T: Real>(
    fc: &FeatureVectors<T>,
    fcs: &FeatureVectors<T>,
    want_grad: bool,
) -> Result<ValueGrad<T>> {
    if fc.rows != fcs.rows {
        return Err(Error::dim(format!(
            "self-similarity needs equal position counts, got {} and {}",
            fc.rows, fcs.rows
        )));
    }
    check_nonempty(fc, "content")?;
    check_nonempty(fcs, "stylized")?;
    let n = fc.rows;
    let a = SelfSim::new(fc);
    let b = SelfSim::new(fcs);
    let inv_n2 = T::one() / T::lit((n * n) as f64);
    // sign(Pcs - Pc) / N^2, row-major.
    let signs: Vec<Vec<T>> = par::map(n, |i| {
        (0..n).map(|j| sgn(b.normalized(i, j) - a.normalized(i, j))).collect()
    });
    let total: T = par::map(n, |i| {
        (0..n)
            .map(|j| (b.normalized(i, j) - a.normalized(i, j)).abs())
            .sum::<T>()
    })
    .into_iter()
    .sum();
    let value = total * inv_n2;
    if !want_grad {
        return Ok(ValueGrad {
            value,
            grad: Vec::new(),
        });
    }
    // dL/dD_kj through P_kj = D_kj / S_j.
    let col_term: Vec<T> = (0..n)
        .map(|j| (0..n).map(|i| signs[i][j] * inv_n2 * b.sim[i * n + j]).sum::<T>())
        .collect();
    let mut h = vec![T::zero(); n * n];
    for k in 0..n {
        for j in 0..n {
            let (s, active) = b.colsum[j];
            let mut v = signs[k][j] * inv_n2 / s;
            if active {
                v = v - col_term[j] / (s * s);
            }
            h[k * n + j] = v;
        }
    }
    let eps = T::lit(COSINE_EPS);
    let mut wmat = vec![T::zero(); n * n];
    let mut diag = vec![T::zero(); n];
    for k in 0..n {
        let mut acc = T::zero();
        for j in 0..n {
            let m = h[k * n + j] + h[j * n + k];
            let d = b.norms[k] * b.norms[j] + eps;
            wmat[k * n + j] = m / d;
            acc = acc + m * b.gram[k * n + j] * b.norms[j] / (d * d);
        }
        diag[k] = if b.norms[k] > T::zero() {
            acc / b.norms[k]
        } else {
            T::zero()
        };
    }
    let c = fcs.cols;
    let mut grad = vec![T::zero(); n * c];
    T::gemm(
        n,
        n,
        c,
        T::one(),
        (&wmat, n as isize, 1),
        (&fcs.data, c as isize, 1),
        T::zero(),
        (&mut grad, c as isize, 1),
    );
    for k in 0..n {
        let row = fcs.row(k);
        for (g, x) in grad[k * c..(k + 1) * c].iter_mut().zip(row) {
            *g = *g - diag[k] * *x;
        }
    }
    Ok(ValueGrad { value, grad })
}

/// Least-squares GAN losses from discriminator score maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    /// `mean((fake - 1)^2)`
    pub generator: f64,
    /// `mean((real - 1)^2) + mean(fake^2)`
    pub discriminator: f64,
}

pub fn adversarial_losses(real: &[f32], fake: &[f32]) -> Result<AdversarialLosses> {
    let (g, _) = lsgan_term(fake, 1.0)?;
    let (dr, _) = lsgan_term(real, 1.0)?;
    let (df, _) = lsgan_term(fake, 0.0)?;
    Ok(AdversarialLosses {
        generator: g,
        discriminator: dr + df,
    })
}

/// `mean((s - target)^2)` and its gradient with respect to the scores.
pub fn lsgan_term(scores: &[f32], target: f64) -> Result<(f64, Vec<f32>)> {
    if scores.is_empty() {
        return Err(Error::Parameter("empty score map".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("non-finite discriminator score".into()));
    }
    let n = scores.len() as f64;
    let value = scores.iter().map(|&s| (s as f64 - target).powi(2)).sum::<f64>() / n;
    let grad = scores.iter().map(|&s| (2.0 * (s as f64 - target) / n) as f32).collect();
    Ok((value, grad))
}

/// Loss weights: `L = (l_p + lambda_ss * l_ss) + alpha * (l_m + lambda_remd * l_r)`,
/// plus `beta * L_adv` for revision stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ss: f64,
    pub lambda_remd: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ss: 16.0,
            lambda_remd: 3.0,
            alpha: 3.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ss", self.lambda_ss),
            ("lambda_remd", self.lambda_remd),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {} must be finite and >= 0, got {}",
                    name, v
                )));
            }
        }
        Ok(())
    }
}

/// Which extractor taps feed which loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSchedule {
    pub remd: Vec<LayerTag>,
    pub self_similarity: Vec<LayerTag>,
    pub mean_variance: Vec<LayerTag>,
    pub perceptual: Vec<LayerTag>,
}

impl Default for LayerSchedule {
    fn default() -> Self {
        use LayerTag::*;
        let fine = vec![L1_1, L2_1, L3_1, L4_1, L5_1];
        LayerSchedule {
            remd: vec![L3_1, L4_1],
            self_similarity: vec![L3_1, L4_1],
            mean_variance: fine.clone(),
            perceptual: fine,
        }
    }
}

impl LayerSchedule {
    /// Every tap used by any loss, sorted.
    pub fn taps(&self) -> Vec<LayerTag> {
        let mut t: Vec<LayerTag> = self
            .remd
            .iter()
            .chain(&self.self_similarity)
            .chain(&self.mean_variance)
            .chain(&self.perceptual)
            .copied()
            .collect();
        t.sort();
        t.dedup();
        t
    }
}

/// Component values, each summed over its schedule layers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub perceptual: f64,
    pub self_similarity: f64,
    pub mean_variance: f64,
    pub remd: f64,
}

impl LossBreakdown {
    pub fn total(&self, w: &LossWeights) -> f64 {
        (self.perceptual + w.lambda_ss * self.self_similarity)
            + w.alpha * (self.mean_variance + w.lambda_remd * self.remd)
    }

    pub fn components(&self) -> [(&'static str, f64); 4] {
        [
            ("perceptual", self.perceptual),
            ("self_similarity", self.self_similarity),
            ("mean_variance", self.mean_variance),
            ("remd", self.remd),
        ]
    }

    fn accumulate(&mut self, o: &LossBreakdown, k: f64) {
        self.perceptual += k * o.perceptual;
        self.self_similarity += k * o.self_similarity;
        self.mean_variance += k * o.mean_variance;
        self.remd += k * o.remd;
    }
}

fn add_sparse(grad: &mut [f64], c: usize, idx: &[usize], g: &[f64], k: f64) {
    for (r, &p) in idx.iter().enumerate() {
        for ch in 0..c {
            grad[p * c + ch] += k * g[r * c + ch];
        }
    }
}

/// Uniform sample of `min(n, cap)` distinct indices, ascending.
pub fn sample_positions<R: Rng>(n: usize, cap: usize, rng: &mut R) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

/// Content/style objective against a fixed style image, with cached style
/// features.
#[derive(Clone, Debug)]
pub struct Objective {
    pub weights: LossWeights,
    pub schedule: LayerSchedule,
    style: BTreeMap<LayerTag, FeatureVectors<f64>>,
    sample_cap: usize,
}

/// Batch-mean loss components and the gradient of the weighted total with
/// respect to each output feature map.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// Weighted total contributed by each layer.
    pub layer_totals: BTreeMap<LayerTag, f64>,
    pub grads: BTreeMap<LayerTag, Tensor>,
}

impl Objective {
    pub fn new(extractor: &Extractor, style: &Image, weights: LossWeights, schedule: LayerSchedule) -> Result<Self> {
        let feats = extractor.extract(style, &schedule.taps())?;
        Ok(Self::from_style_features(&feats, weights, schedule))
    }

    pub fn from_style_features(feats: &FeatureSet, weights: LossWeights, schedule: LayerSchedule) -> Self {
        let style = feats
            .iter()
            .map(|(t, f)| (*t, FeatureVectors::from_feature_map(f, 0)))
            .collect();
        Objective {
            weights,
            schedule,
            style,
            sample_cap: SAMPLE_CAP,
        }
    }

    pub fn with_sample_cap(mut self, cap: usize) -> Self {
        self.sample_cap = cap.max(1);
        self
    }

    /// Evaluates content/style losses of a batch. `content` and `output`
    /// hold NCHW taps for every layer in the schedule; `rng` drives position
    /// subsampling for the quadratic-cost terms.
    pub fn evaluate<R: Rng>(
        &self,
        content: &FeatureSet,
        output: &BTreeMap<LayerTag, &Tensor>,
        want_grad: bool,
        rng: &mut R,
    ) -> Result<Evaluation> {
        let taps = self.schedule.taps();
        let first = output
            .get(&taps[0])
            .ok_or_else(|| Error::Parameter(format!("missing output tap {}", taps[0])))?;
        let batch = first.dims4().0;
        let w = self.weights;
        let inv_b = 1.0 / batch as f64;
        let mut breakdown = LossBreakdown::default();
        let mut grads = BTreeMap::new();
        let mut layer_totals = BTreeMap::new();
        for tag in taps {
            let out = output
                .get(&tag)
                .ok_or_else(|| Error::Parameter(format!("missing output tap {}", tag)))?;
            let con = content
                .get(&tag)
                .ok_or_else(|| Error::Parameter(format!("missing content tap {}", tag)))?;
            if con.shape() != out.shape() {
                return Err(Error::dim(format!(
                    "content and output features differ at {}: {:?} vs {:?}",
                    tag,
                    con.shape(),
                    out.shape()
                )));
            }
            let style = self.style.get(&tag);
            let (_, c, h, wd) = out.dims4();
            let n = h * wd;
            // Draw sampling indices up front so results do not depend on scheduling.
            let seeds: Vec<u64> = (0..batch).map(|_| rng.gen()).collect();
            let per_item: Vec<Result<(LossBreakdown, Vec<f64>)>> = par::map(batch, |b| {
                use rand::SeedableRng;
                let mut item_rng = rand_chacha::ChaCha8Rng::seed_from_u64(seeds[b]);
                let fcs = FeatureVectors::<f64>::from_feature_map(out, b);
                let fc = FeatureVectors::<f64>::from_feature_map(con, b);
                let mut lb = LossBreakdown::default();
                let mut grad = vec![0.0f64; n * c];
                if self.schedule.perceptual.contains(&tag) {
                    let vg = perceptual_impl(&fc, &fcs, want_grad)?;
                    lb.perceptual = vg.value;
                    if want_grad {
                        grad.iter_mut().zip(&vg.grad).for_each(|(a, g)| *a += g);
                    }
                }
                if self.schedule.self_similarity.contains(&tag) {
                    let idx = sample_positions(n, self.sample_cap, &mut item_rng);
                    let vg = self_similarity_impl(&fc.select_rows(&idx), &fcs.select_rows(&idx), want_grad)?;
                    lb.self_similarity = vg.value;
                    if want_grad {
                        add_sparse(&mut grad, c, &idx, &vg.grad, w.lambda_ss);
                    }
                }
                let need_style = self.schedule.mean_variance.contains(&tag) || self.schedule.remd.contains(&tag);
                if need_style {
                    let fs = style.ok_or_else(|| Error::Parameter(format!("missing style tap {}", tag)))?;
                    if self.schedule.mean_variance.contains(&tag) {
                        let vg = mean_variance_impl(fs, &fcs, want_grad)?;
                        lb.mean_variance = vg.value;
                        if want_grad {
                            grad.iter_mut().zip(&vg.grad).for_each(|(a, g)| *a += w.alpha * g);
                        }
                    }
                    if self.schedule.remd.contains(&tag) {
                        let is = sample_positions(fs.rows(), self.sample_cap, &mut item_rng);
                        let ic = sample_positions(n, self.sample_cap, &mut item_rng);
                        let vg = remd_impl(&fs.select_rows(&is), &fcs.select_rows(&ic), want_grad)?;
                        lb.remd = vg.value;
                        if want_grad {
                            add_sparse(&mut grad, c, &ic, &vg.grad, w.alpha * w.lambda_remd);
                        }
                    }
                }
                Ok((lb, grad))
            });
            let mut gt = if want_grad {
                Some(Tensor::zeros(out.shape()))
            } else {
                None
            };
            let mut layer = LossBreakdown::default();
            for (b, item) in per_item.into_iter().enumerate() {
                let (lb, g) = item?;
                layer.accumulate(&lb, inv_b);
                if let Some(gt) = gt.as_mut() {
                    let dst = gt.item_slice_mut(b);
                    for p in 0..n {
                        for ch in 0..c {
                            dst[ch * n + p] = (g[p * c + ch] * inv_b) as f32;
                        }
                    }
                }
            }
            breakdown.accumulate(&layer, 1.0);
            layer_totals.insert(tag, layer.total(&w));
            if let Some(gt) = gt {
                grads.insert(tag, gt);
            }
        }
        Ok(Evaluation {
            breakdown,
            layer_totals,
            grads,
        })
    }
}

/// Content/style loss of `output` given `content` and `style`, all at the
/// same resolution, with every component summed over its schedule layers.
pub fn draft_loss(
    extractor: &Extractor,
    content: &Image,
    style: &Image,
    output: &Image,
    weights: &LossWeights,
    schedule: &LayerSchedule,
) -> Result<LossBreakdown> {
    if content.dims() != style.dims() || content.dims() != output.dims() {
        return Err(Error::dim(format!(
            "content {:?}, style {:?} and output {:?} must share a resolution",
            content.dims(),
            style.dims(),
            output.dims()
        )));
    }
    let taps = schedule.taps();
    let objective = Objective::new(extractor, style, *weights, schedule.clone())?;
    let cf = extractor.extract(content, &taps)?;
    let of = extractor.extract(output, &taps)?;
    let refs = of.iter().map(|(k, v)| (*k, v)).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Ok(objective.evaluate(&cf, &refs, false, &mut rng)?.breakdown)
}
