//! Checkpoint loading, batch inference, evaluation and rollout export.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Phase};
use crate::data::{
    denormalize_intensity, load_dataset, mask_inputs, read_slice, write_slice, Dataset, Split, TaskConfig,
};
use crate::error::{Error, Result};
use crate::generator::{Generator, ModelConfig};
use crate::metrics::{aggregate, frechet_distance, psnr, ssim, FeatureExtractor, MetricReport, SliceScore};
use crate::tensor::{bilinear_resize_plane, Graph, ParamStore, Scope, Tensor};
use crate::trainer::TrainConfig;
use crate::vit::{attention_rollout, ForwardOpts};

pub const SYNTHESIS_FILE: &str = "synthesis.json";
pub const CONFIG_FILE: &str = "config.json";

/// Resolves the training configuration of a checkpoint: an explicit file, or
/// `config.json` next to the checkpoint.
pub fn resolve_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<TrainConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(CONFIG_FILE),
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    TrainConfig::parse(&text)
        .map(|(c, _)| c)
        .map_err(|e| match e {
                Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
                other => other,
            })
}

/// Generator rebuilt from a checkpoint whose fingerprint must match `model`.
pub struct LoadedGenerator {
    pub gen: Generator,
    pub store: ParamStore<f32>,
    pub phase: Phase,
}

pub fn load_generator(ck: &Checkpoint, model: &ModelConfig) -> Result<LoadedGenerator> {
    let expected = model.fingerprint();
    if ck.fingerprint != expected {
        return Err(Error::config(format!(
            "checkpoint fingerprint {:016x} does not match configuration fingerprint {expected:016x}",
            ck.fingerprint
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let mut gen = Generator::new(model, &mut store, &mut rng)?;
    if ck.phase == Phase::Transformers {
        gen.insert_transformers(&mut store, &mut rng)?;
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let t = ck
            .get(&name)
            .ok_or_else(|| Error::data(format!("checkpoint lacks {name}")))?;
        if t.shape() != store.value(id).shape() {
            return Err(Error::data(format!(
                "checkpoint tensor {name} has shape {:?}, model needs {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        store.set(id, t.clone())?;
    }
    Ok(LoadedGenerator {
        gen,
        store,
        phase: ck.phase,
    })
}

impl LoadedGenerator {
    /// Evaluation-mode synthesis of one normalized `[I, H, W]` slice under `task`.
    pub fn synthesize(&self, images: &Tensor<f32>, task: &TaskConfig) -> Result<Tensor<f32>> {
        let x = mask_inputs(images, task)?;
        let g = Graph::new();
        let s = Scope::frozen(&g, &self.store);
        let xv = g.constant(Tensor::stack(&[x])?);
        let out = self.gen.forward(&s, xv, &mut ForwardOpts::eval())?;
        let y = g.value(out.output);
        y.reshape(&y.shape()[1..])
    }
}

fn check_geometry(model: &ModelConfig, ds: &Dataset) -> Result<()> {
    let count = ds.modalities().len();
    if model.modalities != count {
        return Err(Error::config(format!(
            "model expects {} modalities, dataset has {count}",
            model.modalities
        )));
    }
    if let Some((h, w)) = ds.size() {
        if (h, w) != (model.height, model.width) {
            return Err(Error::config(format!(
                "model expects {}x{} images, dataset holds {h}x{w}",
                model.height, model.width
            )));
        }
    }
    Ok(())
}

/// Provenance written next to synthesized slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub task: String,
    pub split: Split,
    pub modalities: Vec<String>,
    pub targets: Vec<String>,
    pub checkpoint: String,
    pub fingerprint: String,
    pub files: Vec<String>,
}

/// Synthesizes the target channels of every slice of `split`, writing raw
/// intensities to `out` under the same relative paths as the inputs.
pub fn infer(
    checkpoint: &Path,
    config: &TrainConfig,
    ds: &Dataset,
    task: &str,
    split: Split,
    out: &Path,
) -> Result<SynthesisRecord> {
    check_geometry(&config.model, ds)?;
    let task = TaskConfig::parse(task, ds.modalities())?;
    let ck = Checkpoint::load(checkpoint)?;
    let loaded = load_generator(&ck, &config.model)?;
    let count = ds.modalities().len();
    let targets = task.targets();
    let mut files = Vec::new();
    for subject in ds.subjects(split) {
        let max = subject.modality_max(count);
        for slice in &subject.slices {
            let sample = ds.load_sample(subject, slice)?;
            let y = loaded.synthesize(&sample.images, &task)?;
            let (h, w) = (y.shape()[1], y.shape()[2]);
            for &t in &targets {
                let plane = Tensor::new(&[h, w], y.data()[t * h * w..(t + 1) * h * w].to_vec())?;
                let raw = denormalize_intensity(&plane, max[t]);
                write_slice(&out.join(&slice.files[t]), &raw)?;
                files.push(slice.files[t].clone());
            }
        }
    }
    let record = SynthesisRecord {
        task: task.name(ds.modalities()),
        split,
        modalities: ds.modalities().to_vec(),
        targets: targets.iter().map(|&t| ds.modalities()[t].clone()).collect(),
        checkpoint: checkpoint.display().to_string(),
        fingerprint: format!("{:016x}", ck.fingerprint),
        files,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(SYNTHESIS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&record).expect("json"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(record)
}

pub fn read_synthesis_record(dir: &Path) -> Result<SynthesisRecord> {
    let path = dir.join(SYNTHESIS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Raw intensities mapped to `[0, 1]` by a subject-level maximum.
fn unit_range(img: &Tensor<f32>, max: f32) -> Vec<f64> {
    let m = max as f64;
    img.data().iter().map(|&v| (v as f64 / m).clamp(0.0, 1.0)).collect()
}

/// Scores a synthesized tree against the reference dataset it was produced from.
pub fn evaluate(reference: &Path, synthesized: &Path) -> Result<MetricReport> {
    let ds = load_dataset(reference)?;
    let record = read_synthesis_record(synthesized)?;
    if record.modalities != ds.modalities() {
        return Err(Error::data(format!(
            "{} was synthesized for modalities {:?}, reference has {:?}",
            synthesized.display(),
            record.modalities,
            ds.modalities()
        )));
    }
    let targets: Vec<usize> = record
        .targets
        .iter()
        .map(|t| {
            ds.modalities()
                .iter()
                .position(|m| m == t)
                .ok_or_else(|| Error::data(format!("unknown target modality {t}")))
        })
        .collect::<Result<_>>()?;
    let count = ds.modalities().len();
    let mut scores = Vec::new();
    let (mut feat_ref, mut feat_syn) = (Vec::new(), Vec::new());
    let mut extractor: Option<FeatureExtractor> = None;
    for subject in ds.subjects(record.split) {
        let max = subject.modality_max(count);
        for slice in &subject.slices {
            for &t in &targets {
                let syn_path = synthesized.join(&slice.files[t]);
                if !syn_path.exists() {
                    return Err(Error::data(format!(
                        "missing synthesized slice {}",
                        syn_path.display()
                    )));
                }
                let syn = read_slice(&syn_path)?;
                let r = read_slice(&reference.join(&slice.files[t]))?;
                if syn.shape() != r.shape() {
                    return Err(Error::data(format!(
                        "{}: shape {:?} differs from reference {:?}",
                        syn_path.display(),
                        syn.shape(),
                        r.shape()
                    )));
                }
                let (h, w) = (r.shape()[0], r.shape()[1]);
                let (a, b) = (unit_range(&r, max[t]), unit_range(&syn, max[t]));
                scores.push(SliceScore {
                    subject: subject.id.clone(),
                    psnr: psnr(&a, &b, 1.0)?,
                    ssim: ssim(&a, &b, h, w)?,
                });
                if extractor.is_none() {
                    extractor = Some(FeatureExtractor::new(h, w)?);
                }
                let fx = extractor.as_ref().expect("extractor");
                feat_ref.push(fx.extract(&a)?);
                feat_syn.push(fx.extract(&b)?);
            }
        }
    }
    if scores.is_empty() {
        return Err(Error::data(format!(
            "{}: no slices to evaluate",
            synthesized.display()
        )));
    }
    let fid = frechet_distance(&feat_ref, &feat_syn)?;
    Ok(aggregate(&record.task, &scores, fid))
}

/// Parses a `subject:index` slice identifier.
pub fn parse_slice_id(s: &str) -> Result<(String, usize)> {
    let (subject, index) = s
        .rsplit_once(':')
        .ok_or_else(|| Error::config(format!("slice id {s:?} is not of the form subject:index")))?;
    let index = index
        .parse()
        .map_err(|_| Error::config(format!("slice id {s:?} has a non-numeric index")))?;
    Ok((subject.to_string(), index))
}

/// 8-bit binary graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::contract(format!(
            "graymap of {width}x{height} needs {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Upsamples a rollout map to `h x w` and quantizes it to the full 8-bit range.
pub fn rollout_image(map: &Tensor<f64>, h: usize, w: usize) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("rollout map of shape {s:?}")));
    }
    let up = bilinear_resize_plane(map.data(), s[0], s[1], h, w);
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(up
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRequest {
    /// `(subject, slice index)`; defaults to the first test slice.
    pub slice: Option<(String, usize)>,
    /// ART block position; defaults to the first block holding a transformer.
    pub block: Option<usize>,
    /// Task string; defaults to the first configured task.
    pub task: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutExport {
    pub subject: String,
    pub index: usize,
    pub block: usize,
    pub task: String,
    pub width: usize,
    pub height: usize,
}

/// Runs the generator with attention capture on one slice and writes the
/// rollout map of one block as a graymap at the slice resolution.
pub fn export_rollout(
    checkpoint: &Path,
    config: &TrainConfig,
    ds: &Dataset,
    req: &RolloutRequest,
    out: &Path,
) -> Result<RolloutExport> {
    check_geometry(&config.model, ds)?;
    let ck = Checkpoint::load(checkpoint)?;
    let loaded = load_generator(&ck, &config.model)?;
    let retaining = loaded.gen.retaining_positions();
    let block = match req.block {
        Some(b) if retaining.contains(&b) => b,
        Some(b) => {
            return Err(Error::contract(format!(
                "block {b} has no transformer; retaining blocks: {retaining:?}"
            )))
        }
        None => *retaining.first().ok_or_else(|| {
            Error::contract("checkpoint has no transformer blocks; retaining blocks: []")
        })?,
    };
    let task = match &req.task {
        Some(t) => TaskConfig::parse(t, ds.modalities())?,
        None => config
            .tasks(ds.modalities())?
            .into_iter()
            .next()
            .ok_or_else(|| Error::config("no tasks configured"))?,
    };
    let (subject, slice) = match &req.slice {
        Some((id, index)) => {
            let subject = ds
                .subject(id)
                .ok_or_else(|| Error::data(format!("unknown subject {id}")))?;
            let slice = subject
                .slices
                .iter()
                .find(|s| s.index == *index)
                .ok_or_else(|| Error::data(format!("subject {id} has no slice {index}")))?;
            (subject, slice)
        }
        None => {
            let subject = ds
                .subjects(Split::Test)
                .find(|s| !s.slices.is_empty())
                .ok_or_else(|| Error::data("dataset has no test slices"))?;
            (subject, &subject.slices[0])
        }
    };
    let sample = ds.load_sample(subject, slice)?;
    let x = mask_inputs(&sample.images, &task)?;
    let g = Graph::new();
    let s = Scope::frozen(&g, &loaded.store);
    let xv = g.constant(Tensor::stack(&[x])?);
    let fwd = loaded.gen.forward(&s, xv, &mut ForwardOpts::capture())?;
    let record = fwd
        .attention
        .iter()
        .find(|a| a.position == block)
        .and_then(|a| a.records.first())
        .ok_or_else(|| Error::contract(format!("no attention captured for block {block}")))?;
    let rollout = attention_rollout(record)?;
    let (h, w) = (sample.images.shape()[1], sample.images.shape()[2]);
    let pixels = rollout_image(&rollout.map, h, w)?;
    write_pgm(out, w, h, &pixels)?;
    Ok(RolloutExport {
        subject: subject.id.clone(),
        index: slice.index,
        block,
        task: task.name(ds.modalities()),
        width: w,
        height: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_ids() {
        assert_eq!(parse_slice_id("sub003:7").unwrap(), ("sub003".into(), 7));
        assert!(parse_slice_id("sub003").is_err());
        assert!(parse_slice_id("sub003:x").is_err());
    }

    #[test]
    fn rollout_image_spans_full_range() {
        let map = Tensor::from_f64(&[2, 2], &[0.0, 0.3, 0.6, 1.0]).unwrap();
        let px = rollout_image(&map, 32, 32).unwrap();
        assert_eq!(px.len(), 1024);
        assert_eq!(*px.iter().min().unwrap(), 0);
        assert_eq!(*px.iter().max().unwrap(), 255);
    }

    #[test]
    fn graymap_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, 3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(bytes.len(), 17);
        assert!(write_pgm(&p, 3, 3, &[0; 4]).is_err());
    }
}
