use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_pix: f64,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    /// Task-specific training has no reconstruction term.
    pub task_specific: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::unified()
    }
}

impl LossWeights {
    pub fn unified() -> Self {
        Self {
            lambda_pix: 100.0,
            lambda_rec: 100.0,
            lambda_adv: 1.0,
            task_specific: false,
        }
    }

    pub fn task_specific() -> Self {
        Self {
            lambda_rec: 0.0,
            task_specific: true,
            ..Self::unified()
        }
    }

    /// Reconstruction weight actually applied.
    pub fn effective_rec(&self) -> f64 {
        if self.task_specific {
            0.0
        } else {
            self.lambda_rec
        }
    }

    pub fn violations(&self) -> Vec<String> {
        [
            ("lambda_pix", self.lambda_pix),
            ("lambda_rec", self.lambda_rec),
            ("lambda_adv", self.lambda_adv),
        ]
        .iter()
        .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
        .map(|(k, v)| format!("{k} = {v} must be a nonnegative number"))
        .collect()
    }
}

fn channel_weighted_l1<T: Float>(
    g: &Graph<T>,
    y: Var,
    m: Var,
    task: &TaskConfig,
    on_sources: bool,
) -> Result<Var> {
    let s = g.shape(y);
    if s != g.shape(m) || s.len() != 4 || s[1] != task.modality_count() {
        return Err(Error::dim(format!(
            "l1 loss between {s:?} and {:?} for {} modalities",
            g.shape(m),
            task.modality_count()
        )));
    }
    let plane = s[2] * s[3];
    let per_channel = 1.0 / (s[0] * plane) as f64;
    let a = task.availability();
    let mut w = Vec::with_capacity(s.iter().product());
    for _ in 0..s[0] {
        for &ai in a {
            let v = if ai == on_sources { per_channel } else { 0.0 };
            w.extend(std::iter::repeat_n(T::of(v), plane));
        }
    }
    let d = g.abs(g.sub(y, m)?);
    Ok(g.sum(g.mul_const(d, Arc::new(w))?))
}

/// `sum_i (1 - a_i) mean|y_i - m_i|`.
pub fn pixel_loss<T: Float>(g: &Graph<T>, y: Var, m: Var, task: &TaskConfig) -> Result<Var> {
    channel_weighted_l1(g, y, m, task, false)
}

/// `sum_i a_i mean|y_i - m_i|`.
pub fn reconstruction_loss<T: Float>(g: &Graph<T>, y: Var, m: Var, task: &TaskConfig) -> Result<Var> {
    channel_weighted_l1(g, y, m, task, true)
}

/// Least-squares critic loss `mean((D(acq) - 1)^2) + mean(D(syn)^2)`.
pub fn discriminator_loss<T: Float>(g: &Graph<T>, d_acquired: Var, d_synthetic: Var) -> Result<Var> {
    let real = g.mean(g.square(g.add_scalar(d_acquired, -1.0)));
    let fake = g.mean(g.square(d_synthetic));
    g.add(real, fake)
}

/// Least-squares generator loss `mean((D(syn) - 1)^2)`.
pub fn generator_adversarial_loss<T: Float>(g: &Graph<T>, d_synthetic: Var) -> Var {
    g.mean(g.square(g.add_scalar(d_synthetic, -1.0)))
}

/// `lambda_pix L_pix + lambda_rec L_rec + lambda_adv L_G_adv`; absent terms are skipped.
pub fn total_generator_loss<T: Float>(
    g: &Graph<T>,
    pix: Var,
    rec: Var,
    adv: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = g.scale(pix, w.lambda_pix);
    if w.effective_rec() != 0.0 {
        total = g.add(total, g.scale(rec, w.effective_rec()))?;
    }
    if let Some(adv) = adv {
        total = g.add(total, g.scale(adv, w.lambda_adv))?;
    }
    Ok(total)
}
