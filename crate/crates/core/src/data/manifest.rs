use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::slice::{read_slice, read_slice_header};
use super::{normalize_intensity, SliceSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceEntry {
    pub index: usize,
    /// One path per modality, relative to the dataset root.
    pub files: Vec<String>,
    /// Per-modality peak raw intensity of this slice.
    pub max: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub split: Split,
    pub slices: Vec<SliceEntry>,
}

impl SubjectEntry {
    /// Subject-level per-modality maximum used for normalization.
    pub fn modality_max(&self, count: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; count];
        for s in &self.slices {
            for (o, &m) in out.iter_mut().zip(&s.max) {
                *o = o.max(m);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub modalities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    pub subjects: Vec<SubjectEntry>,
}

impl Manifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

/// A validated dataset tree. Slice payloads are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    size: Option<(usize, usize)>,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let count = manifest.modalities.len();
    if count == 0 {
        return Err(Error::data(format!("{}: no modalities", path.display())));
    }
    let unique: HashSet<_> = manifest.modalities.iter().collect();
    if unique.len() != count {
        return Err(Error::data(format!("{}: duplicate modality names", path.display())));
    }
    let mut size = match (manifest.height, manifest.width) {
        (Some(h), Some(w)) => Some((h, w)),
        (None, None) => None,
        _ => {
            return Err(Error::data(format!(
                "{}: height and width must be given together",
                path.display()
            )))
        }
    };
    let mut ids = HashSet::new();
    for subject in &manifest.subjects {
        if !ids.insert(subject.id.as_str()) {
            return Err(Error::data(format!(
                "{}: subject {} listed twice",
                path.display(),
                subject.id
            )));
        }
        for slice in &subject.slices {
            if slice.files.len() != count || slice.max.len() != count {
                return Err(Error::data(format!(
                    "{}: subject {} slice {} must list {count} files and maxima",
                    path.display(),
                    subject.id,
                    slice.index
                )));
            }
            for file in &slice.files {
                let fp = root.join(file);
                let dims = read_slice_header(&fp)?;
                match size {
                    None => size = Some(dims),
                    Some(expected) if expected != dims => {
                        return Err(Error::data(format!(
                            "{}: image is {}x{} but the dataset is {}x{}",
                            fp.display(),
                            dims.0,
                            dims.1,
                            expected.0,
                            expected.1
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        size,
    })
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn modalities(&self) -> &[String] {
        &self.manifest.modalities
    }

    /// `(H, W)`, or `None` for an empty dataset.
    pub fn size(&self) -> Option<(usize, usize)> {
        self.size
    }

    pub fn subjects(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> {
        self.manifest.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectEntry> {
        self.manifest.subjects.iter().find(|s| s.id == id)
    }

    pub fn slice_count(&self, split: Split) -> usize {
        self.subjects(split).map(|s| s.slices.len()).sum()
    }

    /// Raw per-modality images `[H, W]` of one slice.
    pub fn read_raw(&self, slice: &SliceEntry) -> Result<Vec<Tensor<f32>>> {
        slice.files.iter().map(|f| read_slice(&self.root.join(f))).collect()
    }

    /// One slice normalized to `[-1, 1]` with the subject-level maxima.
    pub fn load_sample(&self, subject: &SubjectEntry, slice: &SliceEntry) -> Result<SliceSample> {
        let max = subject.modality_max(self.modalities().len());
        let raw = self.read_raw(slice)?;
        let mut planes = Vec::with_capacity(raw.len());
        for ((img, &m), file) in raw.iter().zip(&max).zip(&slice.files) {
            let n = normalize_intensity(img, m)
                .map_err(|e| Error::data(format!("{}: {e}", self.root.join(file).display())))?;
            if !n.all_finite() {
                return Err(Error::data(format!(
                    "{}: non-finite intensities",
                    self.root.join(file).display()
                )));
            }
            planes.push(n);
        }
        Ok(SliceSample {
            subject: subject.id.clone(),
            index: slice.index,
            images: Tensor::stack(&planes)?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SliceSample>> {
        let mut out = Vec::new();
        for subject in self.subjects(split) {
            for slice in &subject.slices {
                out.push(self.load_sample(subject, slice)?);
            }
        }
        Ok(out)
    }
}
