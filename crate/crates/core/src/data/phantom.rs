//! Procedural multi-modality head phantoms.
//!
//! Each subject has an elliptical head holding several tissue compartments, each
//! with a tissue parameter `p`, plus a few small lesions. The three modalities are
//! fixed maps of `p` (`p`, `1 - p^2`, `|sin(pi p)|`) on which lesions act with
//! modality-specific signs, so a target is predictable from its sources only
//! with spatial context.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{Manifest, SliceEntry, Split, SubjectEntry};
use super::slice::write_slice;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PHANTOM_MODALITIES: [&str; 3] = ["T1", "T2", "PD"];
const SCALES: [f64; 3] = [1000.0, 800.0, 1200.0];
const LESION_SHIFT: [f64; 3] = [-0.35, 0.7, 0.45];
const NOISE_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Total subject count; the last `val + test` subjects form those splits.
    pub subjects: usize,
    pub val: usize,
    pub test: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v < 70 || v % 16 != 0 {
                return Err(Error::config(format!(
                    "phantom {name} {v} must be at least 70 and divisible by 16"
                )));
            }
        }
        if self.val + self.test > self.subjects {
            return Err(Error::config(format!(
                "{} validation and {} test subjects exceed {} subjects",
                self.val, self.test, self.subjects
            )));
        }
        if self.slices == 0 {
            return Err(Error::config("phantom needs at least one slice per subject"));
        }
        Ok(())
    }

    fn split_of(&self, s: usize) -> Split {
        let train = self.subjects - self.val - self.test;
        if s < train {
            Split::Train
        } else if s < train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone)]
struct Shape {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    rect: bool,
    zc: f64,
    half_depth: f64,
    value: f64,
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, head: &Shape, size: (f64, f64), depth: (f64, f64), value: f64) -> Self {
        let r = rng.random::<f64>().sqrt() * 0.6;
        let t = rng.random::<f64>() * 2.0 * PI;
        Self {
            cy: head.cy + r * head.ry * t.sin(),
            cx: head.cx + r * head.rx * t.cos(),
            ry: rng.random_range(size.0..size.1),
            rx: rng.random_range(size.0..size.1),
            angle: rng.random::<f64>() * PI,
            rect: rng.random_bool(0.4),
            zc: rng.random_range(0.2..0.8),
            half_depth: rng.random_range(depth.0..depth.1),
            value,
        }
    }

    /// In-plane extent factor at depth `z`; zero when the shape is absent.
    fn scale_at(&self, z: f64) -> f64 {
        let u = (z - self.zc) / self.half_depth;
        (1.0 - u * u).max(0.0).sqrt()
    }

    fn contains(&self, y: f64, x: f64, k: f64) -> bool {
        if k <= 0.0 {
            return false;
        }
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = (c * dx + s * dy) / (self.rx * k);
        let v = (-s * dx + c * dy) / (self.ry * k);
        if self.rect {
            u.abs() <= 1.0 && v.abs() <= 1.0
        } else {
            u * u + v * v <= 1.0
        }
    }
}

struct Anatomy {
    head: Shape,
    tissues: Vec<Shape>,
    lesions: Vec<Shape>,
}

impl Anatomy {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let head = Shape {
            cy: 0.5 + rng.random_range(-0.03..0.03),
            cx: 0.5 + rng.random_range(-0.03..0.03),
            ry: rng.random_range(0.36..0.44),
            rx: rng.random_range(0.30..0.40),
            angle: 0.0,
            rect: false,
            zc: 0.5,
            half_depth: 0.75,
            value: rng.random_range(0.35..0.5),
        };
        let tissues = (0..rng.random_range(3..=6))
            .map(|_| {
                let p = rng.random_range(0.1..0.95);
                Shape::random(rng, &head, (0.05, 0.16), (0.3, 0.8), p)
            })
            .collect();
        let lesions = (0..rng.random_range(0..=3))
            .map(|_| {
                let amp = rng.random_range(0.6..1.0);
                Shape::random(rng, &head, (0.02, 0.045), (0.15, 0.4), amp)
            })
            .collect();
        Self {
            head,
            tissues,
            lesions,
        }
    }

    /// Noise-free raw modality images at depth `z`.
    fn render(&self, z: f64, h: usize, w: usize) -> [Vec<f64>; 3] {
        let mut out = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
        let kh = self.head.scale_at(z);
        let kt: Vec<f64> = self.tissues.iter().map(|t| t.scale_at(z)).collect();
        let kl: Vec<f64> = self.lesions.iter().map(|t| t.scale_at(z)).collect();
        for i in 0..h {
            let y = (i as f64 + 0.5) / h as f64;
            for j in 0..w {
                let x = (j as f64 + 0.5) / w as f64;
                if !self.head.contains(y, x, kh) {
                    continue;
                }
                let mut p = self.head.value;
                for (t, &k) in self.tissues.iter().zip(&kt) {
                    if t.contains(y, x, k) {
                        p = t.value;
                    }
                }
                let mut l: f64 = 0.0;
                for (t, &k) in self.lesions.iter().zip(&kl) {
                    if t.contains(y, x, k) {
                        l = l.max(t.value);
                    }
                }
                let base = [p, 1.0 - p * p, (PI * p).sin().abs()];
                for m in 0..3 {
                    out[m][i * w + j] = (base[m] + LESION_SHIFT[m] * l).max(0.0);
                }
            }
        }
        out
    }
}

/// Writes `manifest.json` and one `MMS1` file per subject, slice and modality.
pub fn generate_phantom_dataset(out: &Path, spec: &PhantomSpec) -> Result<Manifest> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let mut subjects = Vec::with_capacity(spec.subjects);
    for s in 0..spec.subjects {
        let id = format!("sub{s:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + s as u64);
        let anatomy = Anatomy::random(&mut rng);
        let mut slices = Vec::with_capacity(spec.slices);
        for k in 0..spec.slices {
            let z = (k as f64 + 0.5) / spec.slices as f64;
            let clean = anatomy.render(z, h, w);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((1 + s as u64) << 32) | (1 + k as u64));
            let mut files = Vec::with_capacity(3);
            let mut max = Vec::with_capacity(3);
            for (m, plane) in clean.iter().enumerate() {
                let data: Vec<f32> = plane
                    .iter()
                    .map(|&v| ((v + noise.sample(&mut rng)).max(0.0) * SCALES[m]) as f32)
                    .collect();
                let peak = data.iter().copied().fold(0.0f32, f32::max);
                let rel = format!("{id}/{}_{k:03}.mms", PHANTOM_MODALITIES[m]);
                write_slice(&out.join(&rel), &Tensor::new(&[h, w], data)?)?;
                files.push(rel);
                max.push(peak);
            }
            slices.push(SliceEntry {
                index: k,
                files,
                max,
            });
        }
        subjects.push(SubjectEntry {
            id,
            split: spec.split_of(s),
            slices,
        });
    }
    let manifest = Manifest {
        modalities: PHANTOM_MODALITIES.iter().map(|s| s.to_string()).collect(),
        height: Some(h),
        width: Some(w),
        subjects,
    };
    manifest.save(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_validation() {
        let mut spec = PhantomSpec {
            seed: 0,
            subjects: 2,
            val: 1,
            test: 1,
            slices: 1,
            height: 100,
            width: 96,
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        spec.height = 64;
        assert!(spec.validate().is_err());
        spec.height = 80;
        assert!(spec.validate().is_ok());
        spec.test = 2;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn modalities_follow_tissue_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = Anatomy::random(&mut rng);
        a.lesions.clear();
        let [m1, m2, m3] = a.render(0.5, 80, 80);
        for i in 0..m1.len() {
            if m1[i] > 0.0 {
                assert!((m2[i] - (1.0 - m1[i] * m1[i])).abs() < 1e-12);
                assert!((m3[i] - (PI * m1[i]).sin().abs()).abs() < 1e-12);
            } else {
                assert_eq!((m2[i], m3[i]), (0.0, 0.0));
            }
        }
    }
}
