//! Availability-masked synthesis tasks, intensity normalization, the slice file
//! format, dataset manifests and the procedural phantom corpus.

mod manifest;
mod phantom;
mod slice;

pub use manifest::{load_dataset, Dataset, Manifest, SliceEntry, Split, SubjectEntry};
pub use phantom::{generate_phantom_dataset, PhantomSpec, PHANTOM_MODALITIES};
pub use slice::{read_slice, read_slice_header, write_slice, SLICE_MAGIC};

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source/target assignment over the protocol modalities: `true` marks an
/// available (source) modality, `false` a target to synthesize.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskConfig {
    availability: Vec<bool>,
}

impl TaskConfig {
    pub fn new(availability: Vec<bool>) -> Result<Self> {
        if !availability.iter().any(|&a| a) || availability.iter().all(|&a| a) {
            return Err(Error::config(format!(
                "availability {:?} needs at least one source and one target",
                Self::bits_of(&availability)
            )));
        }
        Ok(Self { availability })
    }

    fn bits_of(a: &[bool]) -> Vec<u8> {
        a.iter().map(|&b| b as u8).collect()
    }

    /// Parses `A+B->C` against the ordered modality names.
    pub fn parse(s: &str, modalities: &[String]) -> Result<Self> {
        let (src, tgt) = s
            .split_once("->")
            .ok_or_else(|| Error::config(format!("task {s:?} must look like A+B->C")))?;
        let mut avail: Vec<Option<bool>> = vec![None; modalities.len()];
        for (part, is_source) in [(src, true), (tgt, false)] {
            for name in part.split('+').map(str::trim) {
                let i = modalities.iter().position(|m| m == name).ok_or_else(|| {
                    Error::config(format!(
                        "task {s:?}: unknown modality {name:?} (known: {})",
                        modalities.join(", ")
                    ))
                })?;
                if avail[i].replace(is_source).is_some() {
                    return Err(Error::config(format!("task {s:?} names {name} twice")));
                }
            }
        }
        if let Some(i) = avail.iter().position(Option::is_none) {
            return Err(Error::config(format!(
                "task {s:?} leaves modality {} unassigned",
                modalities[i]
            )));
        }
        Self::new(avail.into_iter().map(Option::unwrap).collect())
    }

    /// Canonical `SRC+SRC->TGT` name in modality order.
    pub fn name(&self, modalities: &[String]) -> String {
        let pick = |want: bool| {
            self.availability
                .iter()
                .zip(modalities)
                .filter(|(&a, _)| a == want)
                .map(|(_, m)| m.as_str())
                .collect::<Vec<_>>()
                .join("+")
        };
        format!("{}->{}", pick(true), pick(false))
    }

    pub fn availability(&self) -> &[bool] {
        &self.availability
    }

    pub fn modality_count(&self) -> usize {
        self.availability.len()
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.availability.len()).filter(|&i| self.availability[i]).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        (0..self.availability.len()).filter(|&i| !self.availability[i]).collect()
    }

    /// The `I` tasks that each synthesize one modality from all the others.
    pub fn leave_one_out(count: usize) -> Result<Vec<Self>> {
        (0..count)
            .map(|t| Self::new((0..count).map(|i| i != t).collect()))
            .collect()
    }
}

impl fmt::Display for TaskConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &a in &self.availability {
            write!(f, "{}", a as u8)?;
        }
        Ok(())
    }
}

/// One co-registered multi-modality slice with intensities in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub subject: String,
    pub index: usize,
    /// `[I, H, W]`.
    pub images: Tensor<f32>,
}

/// `X^G`: channel `i` is `a_i * m_i`; masked channels are exactly zero.
pub fn mask_inputs(images: &Tensor<f32>, task: &TaskConfig) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 3 || s[0] != task.modality_count() {
        return Err(Error::dim(format!(
            "mask_inputs: images {s:?} for a task over {} modalities",
            task.modality_count()
        )));
    }
    let plane = s[1] * s[2];
    let mut out = images.clone();
    for (i, &a) in task.availability().iter().enumerate() {
        if !a {
            out.data_mut()[i * plane..(i + 1) * plane].fill(0.0);
        }
    }
    Ok(out)
}

/// `raw / max` mapped from `[0, 1]` to `[-1, 1]`.
pub fn normalize_intensity(raw: &Tensor<f32>, max: f32) -> Result<Tensor<f32>> {
    if !(max > 0.0) {
        return Err(Error::data(format!("normalization max {max} is not positive")));
    }
    Ok(raw.map(|v| 2.0 * (v / max) - 1.0))
}

pub fn denormalize_intensity(x: &Tensor<f32>, max: f32) -> Tensor<f32> {
    x.map(|v| (v + 1.0) * 0.5 * max)
}
