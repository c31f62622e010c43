use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore, Tensor};

pub const BETA1: f64 = 0.5;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Bias-corrected Adam over a fixed set of parameters. A tied parameter is a
/// single store entry and therefore owns a single moment pair.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Float>(store: &ParamStore<T>, params: Vec<ParamId>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|&p| vec![0.0; store.value(p).len()]).collect();
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            params,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update from the accumulated gradients. A non-finite gradient
    /// aborts the step before any parameter changes.
    pub fn step<T: Float>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for &p in &self.params {
            if store.grad(p).data().iter().any(|g| !g.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient on {}",
                    store.get(p).name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, &p) in self.params.iter().enumerate() {
            let grad: Vec<f64> = store.grad(p).data().iter().map(|g| g.as_f64()).collect();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let value = store.value_mut(p);
            for (i, w) in value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w = T::of(w.as_f64() - lr * mh / (vh.sqrt() + self.eps));
            }
        }
        Ok(())
    }

    /// Moments as `<prefix>.m.<name>`, `<prefix>.v.<name>` plus `<prefix>.step`.
    pub fn export<T: Float>(&self, store: &ParamStore<T>, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(2 * self.params.len() + 1);
        for (k, &p) in self.params.iter().enumerate() {
            let param = store.get(p);
            let shape = param.value.shape();
            for (tag, buf) in [("m", &self.m[k]), ("v", &self.v[k])] {
                let data = buf.iter().map(|&x| x as f32).collect();
                out.push((
                    format!("{prefix}.{tag}.{}", param.name),
                    Tensor::new(shape, data).expect("moment shape"),
                ));
            }
        }
        out.push((format!("{prefix}.step"), Tensor::scalar(self.step as f32)));
        out
    }

    /// Restores moments written by [`Adam::export`].
    pub fn import<T: Float>(&mut self, store: &ParamStore<T>, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (k, &p) in self.params.iter().enumerate() {
            let name = &store.get(p).name;
            for (tag, buf) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let key = format!("{prefix}.{tag}.{name}");
                let t = ck
                    .get(&key)
                    .ok_or_else(|| Error::data(format!("checkpoint lacks {key}")))?;
                if t.len() != buf.len() {
                    return Err(Error::data(format!("{key}: wrong element count")));
                }
                *buf = t.data().iter().map(|&x| x as f64).collect();
            }
        }
        let key = format!("{prefix}.step");
        self.step = ck
            .get(&key)
            .ok_or_else(|| Error::data(format!("checkpoint lacks {key}")))?
            .item() as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap()).unwrap();
        store.accumulate_grad(p, &[3.0, -0.2]);
        let mut opt = Adam::new(&store, vec![p]);
        opt.step(&mut store, 0.1).unwrap();
        let w = store.value(p).data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_no_op_and_nan_aborts() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Tensor::from_f64(&[1], &[2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(&store, vec![p]);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(p).data(), &[2.0]);
        store.accumulate_grad(p, &[f64::NAN]);
        assert!(matches!(opt.step(&mut store, 0.1), Err(Error::Numeric(_))));
        assert_eq!(store.value(p).data(), &[2.0]);
    }
}
