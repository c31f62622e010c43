//! Image quality metrics: PSNR, SSIM and Fréchet distance, with per-subject
//! aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const RIDGE: f64 = 1e-6;

/// `10 log10(peak^2 / MSE)`; identical images give `+inf`.
pub fn psnr(reference: &[f64], synthesized: &[f64], peak: f64) -> Result<f64> {
    if reference.len() != synthesized.len() || reference.is_empty() {
        return Err(Error::dim(format!(
            "psnr: {} vs {} pixels",
            reference.len(),
            synthesized.len()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::contract(format!("psnr peak {peak} must be positive")));
    }
    let mse = reference
        .iter()
        .zip(synthesized)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-region separable Gaussian filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, &g)| g * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, &g)| g * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1 0.01, K2 0.03
/// and unit dynamic range over the valid region.
pub fn ssim(reference: &[f64], synthesized: &[f64], h: usize, w: usize) -> Result<f64> {
    if reference.len() != h * w || synthesized.len() != h * w {
        return Err(Error::dim(format!(
            "ssim: {h}x{w} images hold {} and {} pixels",
            reference.len(),
            synthesized.len()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim: {h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let f = |v: &[f64]| filter_valid(v, h, w, &taps);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mx = f(reference);
    let my = f(synthesized);
    let mxx = f(&prod(reference, reference));
    let myy = f(&prod(synthesized, synthesized));
    let mxy = f(&prod(reference, synthesized));
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn moments(samples: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len();
    let mut mu = DVector::zeros(d);
    for s in samples {
        mu += DVector::from_column_slice(s);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    if n <= d {
        cov += DMatrix::identity(d, d) * RIDGE;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a
        .first()
        .ok_or_else(|| Error::contract("frechet distance of an empty feature set"))?
        .len();
    if b.is_empty() || a.iter().chain(b).any(|v| v.len() != d) || d == 0 {
        return Err(Error::contract("frechet distance: feature dimensions differ"));
    }
    let (mu_a, cov_a) = moments(a, d);
    let (mu_b, cov_b) = moments(b, d);
    let root_a = psd_sqrt(&cov_a);
    let cross = psd_sqrt(&(&root_a * &cov_b * &root_a));
    let gap = (&mu_a - &mu_b).norm_squared();
    let value = gap + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Average-pool then project onto fixed seeded orthonormal directions.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pool: usize,
    h: usize,
    w: usize,
    projection: DMatrix<f64>,
}

impl FeatureExtractor {
    pub const DEFAULT_POOL: usize = 8;
    pub const DEFAULT_DIM: usize = 64;
    pub const SEED: u64 = 0x5eed_f1d0;

    pub fn new(h: usize, w: usize) -> Result<Self> {
        Self::with(h, w, Self::DEFAULT_POOL, Self::DEFAULT_DIM, Self::SEED)
    }

    pub fn with(h: usize, w: usize, pool: usize, dim: usize, seed: u64) -> Result<Self> {
        if pool == 0 || !h.is_multiple_of(pool) || !w.is_multiple_of(pool) {
            return Err(Error::contract(format!(
                "feature pooling {pool} does not divide {h}x{w}"
            )));
        }
        let n_in = (h / pool) * (w / pool);
        let dim = dim.min(n_in);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = DMatrix::from_fn(n_in, dim, |_, _| StandardNormal.sample(&mut rng));
        let q = gauss.qr().q();
        Ok(Self {
            pool,
            h,
            w,
            projection: q.transpose(),
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn extract(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.h * self.w {
            return Err(Error::dim(format!(
                "feature extractor built for {}x{}, got {} pixels",
                self.h,
                self.w,
                image.len()
            )));
        }
        let p = self.pool;
        let (ph, pw) = (self.h / p, self.w / p);
        let mut pooled = DVector::zeros(ph * pw);
        for i in 0..self.h {
            for j in 0..self.w {
                pooled[(i / p) * pw + j / p] += image[i * self.w + j];
            }
        }
        pooled /= (p * p) as f64;
        Ok((&self.projection * pooled).iter().copied().collect())
    }
}

/// Metrics of one subject for one task (averaged over its slices).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectScore {
    pub subject: String,
    pub task: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub task: String,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub subjects: Vec<SubjectScore>,
    pub summary: MetricSummary,
}

/// Mean and population standard deviation. Infinite values (perfect PSNR)
/// yield an infinite mean; the spread is 0 only if every value is infinite.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let inf = values.iter().filter(|v| v.is_infinite()).count();
    if inf > 0 {
        return (f64::INFINITY, if inf == values.len() { 0.0 } else { f64::INFINITY });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-slice measurement used to build a report.
#[derive(Debug, Clone)]
pub struct SliceScore {
    pub subject: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Averages slices per subject, then reports mean and spread across subjects.
pub fn aggregate(task: &str, slices: &[SliceScore], fid: f64) -> MetricReport {
    let mut per: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in slices {
        let e = per.entry(&s.subject).or_default();
        e.0.push(s.psnr);
        e.1.push(s.ssim);
    }
    let subjects: Vec<SubjectScore> = per
        .into_iter()
        .map(|(id, (p, q))| SubjectScore {
            subject: id.to_string(),
            task: task.to_string(),
            psnr: mean_std(&p).0,
            ssim: mean_std(&q).0,
        })
        .collect();
    let ps: Vec<f64> = subjects.iter().map(|s| s.psnr).collect();
    let ss: Vec<f64> = subjects.iter().map(|s| s.ssim).collect();
    let (mean_psnr, std_psnr) = mean_std(&ps);
    let (mean_ssim, std_ssim) = mean_std(&ss);
    MetricReport {
        subjects,
        summary: MetricSummary {
            task: task.to_string(),
            mean_psnr,
            std_psnr,
            mean_ssim,
            std_ssim,
            fid,
        },
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn json_num(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(fmt_num(v))
    }
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,task,psnr,ssim\n");
        for s in &self.subjects {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.subject,
                s.task,
                fmt_num(s.psnr),
                fmt_num(s.ssim)
            ));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let s = &self.summary;
        json!({
            "task": s.task,
            "mean_psnr": json_num(s.mean_psnr),
            "std_psnr": json_num(s.std_psnr),
            "mean_ssim": json_num(s.mean_ssim),
            "std_ssim": json_num(s.std_ssim),
            "fid": json_num(s.fid),
        })
    }

    /// Writes `report.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let js = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("json");
        fs::write(&js, text).map_err(|e| Error::io(&js, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cases() {
        let a = vec![0.2; 16];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b[..3], 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let x: Vec<f64> = (0..256).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        assert!((ssim(&x, &x, 16, 16).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&x, &inv, 16, 16).unwrap() < 1.0);
        assert!(matches!(ssim(&x[..100], &x[..100], 10, 10), Err(Error::Contract(_))));
    }

    #[test]
    fn frechet_identity_and_mismatch() {
        let a: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
        assert!(frechet_distance(&a, &[vec![1.0]]).is_err());
    }

    #[test]
    fn projection_is_orthonormal() {
        let f = FeatureExtractor::new(128, 128).unwrap();
        let p = &f.projection;
        let gram = p * p.transpose();
        assert!((gram - DMatrix::identity(64, 64)).amax() < 1e-10);
    }

    #[test]
    fn spread_is_over_subjects() {
        let slices = vec![
            SliceScore { subject: "a".into(), psnr: 10.0, ssim: 0.5 },
            SliceScore { subject: "a".into(), psnr: 20.0, ssim: 0.7 },
            SliceScore { subject: "b".into(), psnr: 25.0, ssim: 0.9 },
        ];
        let r = aggregate("T1->T2", &slices, 0.0);
        assert_eq!(r.summary.mean_psnr, 20.0);
        assert_eq!(r.summary.std_psnr, 5.0);
        assert!(r.to_csv().starts_with("subject,task,psnr,ssim\na,T1->T2,15,"));
    }
}
