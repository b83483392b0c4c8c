//! Brute-force reference implementations written straight from the loss
//! definitions: plain nested loops over `Vec<Vec<f64>>`, no shared code with
//! the library.

pub type Rows = Vec<Vec<f64>>;

const COS_EPS: f64 = 1e-8;
const STD_EPS: f64 = 1e-5;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b) / (norm(a) * norm(b) + COS_EPS)
}

pub fn remd(fs: &Rows, fcs: &Rows) -> f64 {
    let mut r1 = 0.0;
    for a in fs {
        let mut best = f64::INFINITY;
        for b in fcs {
            best = best.min(cosine_distance(a, b));
        }
        r1 += best;
    }
    r1 /= fs.len() as f64;
    let mut r2 = 0.0;
    for b in fcs {
        let mut best = f64::INFINITY;
        for a in fs {
            best = best.min(cosine_distance(a, b));
        }
        r2 += best;
    }
    r2 /= fcs.len() as f64;
    r1.max(r2)
}

/// Two-pass per-channel mean and `sqrt(var + eps)`.
pub fn channel_stats(f: &Rows) -> (Vec<f64>, Vec<f64>) {
    let n = f.len() as f64;
    let c = f[0].len();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for row in f {
            s += row[ch];
        }
        mean[ch] = s / n;
        let mut v = 0.0;
        for row in f {
            v += (row[ch] - mean[ch]) * (row[ch] - mean[ch]);
        }
        std[ch] = (v / n + STD_EPS).sqrt();
    }
    (mean, std)
}

pub fn mean_variance(fs: &Rows, fcs: &Rows) -> f64 {
    let (ms, ss) = channel_stats(fs);
    let (mc, sc) = channel_stats(fcs);
    let mut dm = 0.0;
    let mut ds = 0.0;
    for ch in 0..ms.len() {
        dm += (ms[ch] - mc[ch]).powi(2);
        ds += (ss[ch] - sc[ch]).powi(2);
    }
    dm.sqrt() + ds.sqrt()
}

pub fn perceptual(fc: &Rows, fcs: &Rows) -> f64 {
    let (ma, sa) = channel_stats(fc);
    let (mb, sb) = channel_stats(fcs);
    let mut total = 0.0;
    for i in 0..fc.len() {
        for ch in 0..fc[0].len() {
            let za = (fc[i][ch] - ma[ch]) / sa[ch];
            let zb = (fcs[i][ch] - mb[ch]) / sb[ch];
            total += (za - zb).powi(2);
        }
    }
    total.sqrt()
}

pub fn normalized_similarity(f: &Rows) -> Rows {
    let n = f.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = dot(&f[i], &f[j]) / (norm(&f[i]) * norm(&f[j]) + COS_EPS);
        }
    }
    let mut p = d.clone();
    for j in 0..n {
        let mut s = 0.0;
        for row in &d {
            s += row[j];
        }
        if s.abs() < COS_EPS {
            s = if s < 0.0 { -COS_EPS } else { COS_EPS };
        }
        for i in 0..n {
            p[i][j] = d[i][j] / s;
        }
    }
    p
}

pub fn self_similarity(fc: &Rows, fcs: &Rows) -> f64 {
    let n = fc.len();
    let a = normalized_similarity(fc);
    let b = normalized_similarity(fcs);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += (a[i][j] - b[i][j]).abs();
        }
    }
    total / (n * n) as f64
}
