//! Objectives, Adam, learning-rate schedule and the two-phase unified training loop.

mod adam;
mod config;
mod losses;

pub use adam::{Adam, BETA1, BETA2, EPS};
pub use config::{lr_in_window, TrainConfig, TrainPlan, VARIANTS};
pub use losses::{
    discriminator_loss, generator_adversarial_loss, pixel_loss, reconstruction_loss,
    total_generator_loss, LossWeights,
};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Phase};
use crate::data::{mask_inputs, Dataset, Split, TaskConfig};
use crate::discriminator::{select_discriminator_inputs, PatchCritic};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::tensor::{Float, Graph, ParamId, ParamStore, Scope, Tensor};
use crate::vit::ForwardOpts;

pub const LOSS_LOG_HEADER: &str = "epoch,step,task,L_pix,L_rec,L_G_adv,L_D,lr";

/// Uniform draw from a nonempty task list.
pub fn sample_task<'a, R: Rng + ?Sized>(rng: &mut R, tasks: &'a [TaskConfig]) -> Result<&'a TaskConfig> {
    if tasks.is_empty() {
        return Err(Error::contract("cannot sample from an empty task list"));
    }
    Ok(&tasks[rng.random_range(0..tasks.len())])
}

/// Loss components recorded for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub pix: f64,
    pub rec: f64,
    pub g_adv: f64,
    pub d: f64,
}

impl StepLosses {
    fn check(&self) -> Result<()> {
        for (k, v) in [("L_pix", self.pix), ("L_rec", self.rec), ("L_G_adv", self.g_adv), ("L_D", self.d)] {
            if !v.is_finite() {
                return Err(Error::numeric(format!("{k} diverged ({v})")));
            }
        }
        Ok(())
    }
}

const INIT_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// Generator, critic, their optimizers and training phase.
pub struct Trainer<T: Float> {
    pub config: TrainConfig,
    pub gen: Generator,
    pub gen_store: ParamStore<T>,
    pub disc: Option<PatchCritic>,
    pub disc_store: ParamStore<T>,
    opt_g: Adam,
    opt_d: Option<Adam>,
    phase: Phase,
    init_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl<T: Float> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.plan.seed;
        let mut init_rng = stream(seed, INIT_STREAM);
        let mut gen_store = ParamStore::new();
        let mut gen = Generator::new(&config.model, &mut gen_store, &mut init_rng)?;
        let mut disc_store = ParamStore::new();
        let adversarial = config.loss.lambda_adv > 0.0;
        let disc = if adversarial {
            Some(PatchCritic::new(
                &mut disc_store,
                config.model.modalities,
                config.model.disc_channels,
                &mut init_rng,
            )?)
        } else {
            None
        };
        let mut phase = Phase::ConvOnly;
        if !config.plan.delayed_insertion {
            gen.insert_transformers(&mut gen_store, &mut init_rng)?;
            phase = Phase::Transformers;
        }
        let opt_g = Adam::new(&gen_store, gen_store.ids().collect());
        let opt_d = disc.as_ref().map(|_| Adam::new(&disc_store, disc_store.ids().collect()));
        let mut t = Self {
            config,
            gen,
            gen_store,
            disc,
            disc_store,
            opt_g,
            opt_d,
            phase,
            init_rng,
            dropout_rng: stream(seed, DROPOUT_STREAM),
        };
        if phase == Phase::Transformers {
            let ids: Vec<ParamId> = t.gen_store.ids().collect();
            t.import_transformer_init(&ids)?;
        }
        Ok(t)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Enters phase 2: inserts transformers (when delayed) and resets both optimizers.
    pub fn enter_phase2(&mut self) -> Result<()> {
        if self.phase == Phase::ConvOnly {
            let new = self.gen.insert_transformers(&mut self.gen_store, &mut self.init_rng)?;
            self.import_transformer_init(&new)?;
        }
        self.phase = Phase::Transformers;
        self.opt_g = Adam::new(&self.gen_store, self.gen_store.ids().collect());
        self.opt_d = self
            .disc
            .as_ref()
            .map(|_| Adam::new(&self.disc_store, self.disc_store.ids().collect()));
        Ok(())
    }

    fn import_transformer_init(&mut self, ids: &[ParamId]) -> Result<()> {
        let Some(path) = self.config.plan.transformer_init.clone() else {
            return Ok(());
        };
        let ck = Checkpoint::load(Path::new(&path))?;
        let mut imported = 0;
        for &id in ids {
            let name = self.gen_store.get(id).name.clone();
            if let Some(t) = ck.get(&name) {
                if t.shape() != self.gen_store.value(id).shape() {
                    return Err(Error::config(format!(
                        "transformer_init {path}: {name} has shape {:?}, model needs {:?}",
                        t.shape(),
                        self.gen_store.value(id).shape()
                    )));
                }
                self.gen_store.set(id, t.cast())?;
                imported += 1;
            }
        }
        if imported == 0 && !ids.is_empty() {
            return Err(Error::config(format!(
                "transformer_init {path} holds none of the inserted transformer tensors"
            )));
        }
        Ok(())
    }

    /// One critic update on `(m, y)` with `y` treated as a constant.
    pub fn discriminator_step(
        &mut self,
        m: &Tensor<T>,
        y: &Tensor<T>,
        task: &TaskConfig,
        lr: f64,
    ) -> Result<f64> {
        let (Some(disc), Some(opt)) = (&self.disc, &mut self.opt_d) else {
            return Ok(0.0);
        };
        critic_update(disc, &mut self.disc_store, opt, m, y, task, lr)
    }

    /// Full training step on a batch: generator forward, critic update, then a
    /// generator update against the updated (frozen) critic.
    pub fn step(&mut self, x: &Tensor<T>, m: &Tensor<T>, task: &TaskConfig, lr: f64) -> Result<StepLosses> {
        let use_dropout = self.config.model.dropout > 0.0;
        let g = Graph::new();
        let sg = Scope::new(&g, &self.gen_store);
        let xv = g.constant(x.clone());
        let mut opts = ForwardOpts {
            capture_attention: false,
            rng: if use_dropout {
                Some(&mut self.dropout_rng as &mut dyn RngCore)
            } else {
                None
            },
        };
        let y = self.gen.forward(&sg, xv, &mut opts)?.output;
        let y_value = (*g.value(y)).clone();
        let d = match (&self.disc, &mut self.opt_d) {
            (Some(disc), Some(opt)) => {
                critic_update(disc, &mut self.disc_store, opt, m, &y_value, task, lr)?
            }
            _ => 0.0,
        };
        let mv = g.constant(m.clone());
        let pix = pixel_loss(&g, y, mv, task)?;
        let rec = reconstruction_loss(&g, y, mv, task)?;
        let adv = match &self.disc {
            Some(disc) => {
                let sd = Scope::frozen(&g, &self.disc_store);
                let (syn, _) = select_discriminator_inputs(&sd, mv, y, task)?;
                Some(generator_adversarial_loss(&g, disc.forward(&sd, syn)?))
            }
            None => None,
        };
        let total = total_generator_loss(&g, pix, rec, adv, &self.config.loss)?;
        let losses = StepLosses {
            pix: g.value(pix).item().as_f64(),
            rec: g.value(rec).item().as_f64(),
            g_adv: adv.map_or(0.0, |a| g.value(a).item().as_f64()),
            d,
        };
        losses.check()?;
        let grads = g.backward(total)?;
        let bindings = sg.bindings();
        drop(sg);
        drop(g);
        self.gen_store.zero_grad();
        for (id, var) in bindings {
            if let Some(gr) = grads.get(var) {
                self.gen_store.accumulate_grad(id, gr);
            }
        }
        drop(grads);
        self.opt_g.step(&mut self.gen_store, lr)?;
        Ok(losses)
    }

    /// Parameters, optimizer moments, phase tag and architecture fingerprint.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        for store in [&self.gen_store, &self.disc_store] {
            for (_, p) in store.iter() {
                tensors.push((p.name.clone(), p.value.cast()));
            }
        }
        tensors.extend(self.opt_g.export(&self.gen_store, "opt.gen"));
        if let Some(opt) = &self.opt_d {
            tensors.extend(opt.export(&self.disc_store, "opt.disc"));
        }
        Checkpoint {
            tensors,
            phase: self.phase,
            fingerprint: self.config.model.fingerprint(),
        }
    }
}

fn critic_update<T: Float>(
    disc: &PatchCritic,
    store: &mut ParamStore<T>,
    opt: &mut Adam,
    m: &Tensor<T>,
    y: &Tensor<T>,
    task: &TaskConfig,
    lr: f64,
) -> Result<f64> {
    let g = Graph::new();
    let s = Scope::new(&g, store);
    let mv = g.constant(m.clone());
    let yv = g.constant(y.clone());
    let (syn, acq) = select_discriminator_inputs(&s, mv, yv, task)?;
    let d_acq = disc.forward(&s, acq)?;
    let d_syn = disc.forward(&s, syn)?;
    let loss = discriminator_loss(&g, d_acq, d_syn)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::numeric(format!("L_D diverged ({value})")));
    }
    let grads = g.backward(loss)?;
    let bindings = s.bindings();
    drop(s);
    drop(g);
    store.zero_grad();
    for (id, var) in bindings {
        if let Some(gr) = grads.get(var) {
            store.accumulate_grad(id, gr);
        }
    }
    opt.step(store, lr)?;
    Ok(value)
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean `L_pix` per epoch.
    pub epoch_mean_pix: Vec<f64>,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

fn fmt_f(v: f64) -> String {
    format!("{v:e}")
}

/// Trains on the train split and writes `config.json`, `loss.csv` and
/// checkpoints into `out`.
pub fn train(config: &TrainConfig, ds: &Dataset, out: &Path) -> Result<TrainReport> {
    config.validate()?;
    let tasks = config.tasks(ds.modalities())?;
    if ds.slice_count(Split::Train) == 0 {
        return Err(Error::data(format!(
            "{}: dataset has no training slices",
            ds.root().display()
        )));
    }
    let samples = ds.load_split(Split::Train)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(
        &cfg_path,
        serde_json::to_string_pretty(&config.to_json()).expect("json"),
    )
    .map_err(|e| Error::io(&cfg_path, e))?;

    let plan = &config.plan;
    let mut trainer = Trainer::<f32>::new(config.clone())?;
    let mut rng = stream(plan.seed, SAMPLE_STREAM);
    let log_path = out.join("loss.csv");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(io)?;

    let modalities = ds.modalities().to_vec();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_mean_pix = Vec::with_capacity(plan.total_epochs());
    let mut checkpoints = Vec::new();
    let mut step = 0usize;
    let save = |trainer: &Trainer<f32>, name: String, list: &mut Vec<PathBuf>| -> Result<()> {
        let p = out.join(name);
        trainer.checkpoint().save(&p)?;
        list.push(p);
        Ok(())
    };
    for epoch in 0..plan.total_epochs() {
        if epoch == plan.phase1_epochs && epoch > 0 {
            save(&trainer, "phase1.rvck".into(), &mut checkpoints)?;
            trainer.enter_phase2()?;
        }
        let lr = plan.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut pix_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(plan.batch_size) {
            let task = sample_task(&mut rng, &tasks)?;
            let ms: Vec<Tensor<f32>> = batch.iter().map(|&i| samples[i].images.clone()).collect();
            let xs = ms.iter().map(|m| mask_inputs(m, task)).collect::<Result<Vec<_>>>()?;
            let m = Tensor::stack(&ms)?;
            let x = Tensor::stack(&xs)?;
            let l = trainer.step(&x, &m, task, lr)?;
            step += 1;
            batches += 1;
            pix_sum += l.pix;
            writeln!(
                log,
                "{},{},{},{},{},{},{},{}",
                epoch + 1,
                step,
                task.name(&modalities),
                fmt_f(l.pix),
                fmt_f(l.rec),
                fmt_f(l.g_adv),
                fmt_f(l.d),
                fmt_f(lr)
            )
            .map_err(io)?;
        }
        epoch_mean_pix.push(pix_sum / batches as f64);
        if plan.checkpoint_every > 0 && (epoch + 1) % plan.checkpoint_every == 0 {
            save(&trainer, format!("epoch{:03}.rvck", epoch + 1), &mut checkpoints)?;
        }
    }
    log.flush().map_err(io)?;
    let final_checkpoint = out.join("final.rvck");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainReport {
        epoch_mean_pix,
        steps: step,
        checkpoints,
        final_checkpoint,
        loss_log: log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_sampling_is_uniform_and_seeded() {
        let tasks = TaskConfig::leave_one_out(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            let t = sample_task(&mut rng, &tasks).unwrap();
            counts[tasks.iter().position(|x| x == t).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
        let single = &tasks[..1];
        assert_eq!(sample_task(&mut rng, single).unwrap(), &tasks[0]);
        assert!(sample_task(&mut rng, &[]).is_err());
    }
}
