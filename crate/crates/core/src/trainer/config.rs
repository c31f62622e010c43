use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::losses::LossWeights;
use crate::data::{Dataset, TaskConfig};
use crate::error::{Error, Result};
use crate::generator::ModelConfig;

/// Optimization schedule and bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    /// Convolution-only warm-up epochs.
    pub phase1_epochs: usize,
    /// Epochs after transformer insertion.
    pub phase2_epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Task strings such as `T1+T2->PD`; empty means every leave-one-out task.
    pub tasks: Vec<String>,
    /// Periodic checkpoint interval in epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    /// When false, transformers are present from the first epoch.
    pub delayed_insertion: bool,
    /// Checkpoint whose tensors initialize newly inserted transformer parameters.
    pub transformer_init: Option<String>,
    /// Ablation variant applied to this configuration, for provenance.
    pub variant: Option<String>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            phase1_epochs: 50,
            phase2_epochs: 50,
            lr_phase1: 2e-4,
            lr_phase2: 1e-3,
            batch_size: 1,
            seed: 0,
            tasks: Vec::new(),
            checkpoint_every: 0,
            delayed_insertion: true,
            transformer_init: None,
            variant: None,
        }
    }
}

impl TrainPlan {
    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.total_epochs() == 0 {
            v.push("phase1_epochs + phase2_epochs must be positive".into());
        }
        for (k, lr) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(lr.is_finite() && lr >= 0.0) {
                v.push(format!("{k} = {lr} must be a nonnegative number"));
            }
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        v
    }

    /// Learning rate of a global epoch: each phase is its own window, constant
    /// for the first half and linearly decayed towards 0 over the second.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.phase1_epochs {
            lr_in_window(self.lr_phase1, epoch, self.phase1_epochs)
        } else {
            lr_in_window(self.lr_phase2, epoch - self.phase1_epochs, self.phase2_epochs)
        }
    }
}

/// `base` for `e < W/2`, then `base * (1 - (e - W/2) / (W - W/2))`.
pub fn lr_in_window(base: f64, epoch: usize, window: usize) -> f64 {
    let half = window / 2;
    if epoch < half {
        return base;
    }
    let span = (window - half).max(1) as f64;
    (base * (1.0 - (epoch - half) as f64 / span)).max(0.0)
}

pub const VARIANTS: [&str; 12] = [
    "no_transformers",
    "no_conv_in_art",
    "no_adv",
    "untied",
    "A1_only",
    "A6_only",
    "no_skip_conv",
    "no_skip_trans",
    "unlearned_sampling",
    "no_art_sampling",
    "no_delayed_insertion",
    "task_specific",
];

/// Model, plan and loss weights read from one flat JSON object.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub loss: LossWeights,
}

fn keys_of<T: Serialize + Default>() -> BTreeSet<String> {
    match serde_json::to_value(T::default()).expect("defaults serialize") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

fn take<T: DeserializeOwned + Default>(
    obj: &Map<String, Value>,
    keys: &BTreeSet<String>,
    errors: &mut Vec<String>,
) -> T {
    let sub: Map<String, Value> = obj
        .iter()
        .filter(|(k, _)| keys.contains(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    // Report each offending key separately so every problem is listed.
    for (k, v) in &sub {
        let single: Map<String, Value> = [(k.clone(), v.clone())].into_iter().collect();
        if let Err(e) = serde_json::from_value::<T>(Value::Object(single)) {
            errors.push(format!("{k}: {e}"));
        }
    }
    serde_json::from_value(Value::Object(sub)).unwrap_or_default()
}

impl TrainConfig {
    /// Parses a flat JSON object. Returns the configuration and the set of
    /// keys present in the file. Unknown keys, ill-typed values and constraint
    /// violations are all reported together.
    pub fn parse(text: &str) -> Result<(Self, BTreeSet<String>)> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config is not JSON: {e}")))?;
        let Value::Object(obj) = value else {
            return Err(Error::config("config must be a JSON object"));
        };
        let (mk, pk, lk) = (
            keys_of::<ModelConfig>(),
            keys_of::<TrainPlan>(),
            keys_of::<LossWeights>(),
        );
        let mut errors: Vec<String> = obj
            .keys()
            .filter(|k| !mk.contains(*k) && !pk.contains(*k) && !lk.contains(*k))
            .map(|k| format!("unknown key {k:?}"))
            .collect();
        let cfg = Self {
            model: take(&obj, &mk, &mut errors),
            plan: take(&obj, &pk, &mut errors),
            loss: take(&obj, &lk, &mut errors),
        };
        if errors.is_empty() {
            errors.extend(cfg.violations());
        }
        if !errors.is_empty() {
            return Err(Error::config(errors.join("; ")));
        }
        Ok((cfg, obj.keys().cloned().collect()))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.plan.violations());
        v.extend(self.loss.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::config(v.join("; ")))
        }
    }

    /// Flat JSON object with every resolved key.
    pub fn to_json(&self) -> Value {
        let mut out = Map::new();
        for part in [
            serde_json::to_value(&self.model),
            serde_json::to_value(&self.plan),
            serde_json::to_value(&self.loss),
        ] {
            if let Ok(Value::Object(m)) = part {
                out.extend(m);
            }
        }
        Value::Object(out)
    }

    /// Fills image geometry keys absent from the file from the dataset and
    /// checks the rest against it.
    pub fn bind_dataset(&mut self, given: &BTreeSet<String>, ds: &Dataset) -> Result<()> {
        let mut errors = Vec::new();
        let count = ds.modalities().len();
        if !given.contains("modalities") {
            self.model.modalities = count;
        }
        if let Some((h, w)) = ds.size() {
            if !given.contains("height") {
                self.model.height = h;
            }
            if !given.contains("width") {
                self.model.width = w;
            }
            if (h, w) != (self.model.height, self.model.width) {
                errors.push(format!(
                    "model expects {}x{} images, dataset holds {h}x{w}",
                    self.model.height, self.model.width
                ));
            }
        }
        if self.model.modalities != count {
            errors.push(format!(
                "model expects {} modalities, dataset has {count}",
                self.model.modalities
            ));
        }
        if let Err(e) = self.tasks(ds.modalities()) {
            errors.push(e.to_string());
        }
        errors.extend(self.violations());
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errors.join("; ")))
        }
    }

    pub fn tasks(&self, modalities: &[String]) -> Result<Vec<TaskConfig>> {
        if self.plan.tasks.is_empty() {
            return TaskConfig::leave_one_out(modalities.len());
        }
        self.plan
            .tasks
            .iter()
            .map(|t| TaskConfig::parse(t, modalities))
            .collect()
    }

    /// Applies a named ablation.
    pub fn apply_variant(&mut self, name: &str) -> Result<()> {
        let m = &mut self.model;
        match name {
            "no_transformers" => {
                m.no_transformers = true;
                m.transformer_positions.clear();
            }
            "no_conv_in_art" => m.no_conv_in_art = true,
            "no_adv" => self.loss.lambda_adv = 0.0,
            "untied" => m.tie_weights = false,
            "A1_only" => m.transformer_positions = vec![1],
            "A6_only" => m.transformer_positions = vec![6],
            "no_skip_conv" => m.no_skip_conv = true,
            "no_skip_trans" => m.no_skip_trans = true,
            "unlearned_sampling" => m.unlearned_sampling = true,
            "no_art_sampling" => m.no_art_sampling = true,
            "no_delayed_insertion" => self.plan.delayed_insertion = false,
            "task_specific" => {
                self.loss.task_specific = true;
                self.loss.lambda_rec = 0.0;
            }
            other => {
                return Err(Error::config(format!(
                    "unknown variant {other:?} (known: {})",
                    VARIANTS.join(", ")
                )))
            }
        }
        self.plan.variant = Some(name.to_string());
        Ok(())
    }
}
