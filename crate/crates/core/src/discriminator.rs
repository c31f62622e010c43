//! Conditional PatchGAN critic with availability-guided input selection.

use std::sync::Arc;

use rand::Rng;

use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::nn::{instance_norm, ConvW};
use crate::tensor::{conv_out_extent, Activation, Float, ParamStore, Scope, Var};

const KERNEL: usize = 4;
const PAD: usize = 1;
const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
const LEAK: f64 = 0.2;

fn channel_mask<T: Float>(shape: &[usize], keep: impl Fn(usize) -> bool) -> Arc<Vec<T>> {
    let plane = shape[2] * shape[3];
    let mut out = Vec::with_capacity(shape.iter().product());
    for _ in 0..shape[0] {
        for c in 0..shape[1] {
            let v = if keep(c) { T::one() } else { T::zero() };
            out.extend(std::iter::repeat_n(v, plane));
        }
    }
    Arc::new(out)
}

/// Builds `(X^D_synthetic, X^D_acquired)`, each `[N, 2I, H, W]`: the I
/// source-masked channels `a_i m_i` followed by the I target-masked channels,
/// `(1 - a_i) y_i` for the synthetic input and `(1 - a_i) m_i` for the acquired.
pub fn select_discriminator_inputs<T: Float>(
    s: &Scope<'_, T>,
    m: Var,
    y: Var,
    task: &TaskConfig,
) -> Result<(Var, Var)> {
    let g = s.graph;
    let shape = g.shape(m);
    if shape.len() != 4 || shape[1] != task.modality_count() || g.shape(y) != shape {
        return Err(Error::dim(format!(
            "discriminator selection: images {shape:?}, synthesis {:?}, task over {} modalities",
            g.shape(y),
            task.modality_count()
        )));
    }
    let a = task.availability();
    let src = g.mul_const(m, channel_mask(&shape, |c| a[c]))?;
    let tmask = channel_mask(&shape, |c| !a[c]);
    let syn_t = g.mul_const(y, tmask.clone())?;
    let acq_t = g.mul_const(m, tmask)?;
    Ok((g.concat(&[src, syn_t], 1)?, g.concat(&[src, acq_t], 1)?))
}

/// Five 4x4 convolutions (strides 2, 2, 2, 1, 1) with leaky ReLU 0.2 and
/// instance normalization on the middle three; emits raw patch scores.
#[derive(Debug, Clone)]
pub struct PatchCritic {
    convs: Vec<ConvW>,
    instance_norm: bool,
}

impl PatchCritic {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        modalities: usize,
        base: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let chans = [2 * modalities, base, 2 * base, 4 * base, 8 * base, 1];
        let convs = (0..5)
            .map(|l| ConvW::init(store, &format!("disc.conv{}", l + 1), chans[l + 1], chans[l], KERNEL, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            convs,
            instance_norm: true,
        })
    }

    /// Disables the normalization layers (used to probe pure convolutional
    /// geometry, e.g. translation covariance).
    pub fn without_norm(mut self) -> Self {
        self.instance_norm = false;
        self
    }

    /// Side of the square input patch seen by one output unit.
    pub fn receptive_field() -> usize {
        STRIDES.iter().rev().fold(1, |rf, &s| (rf - 1) * s + KERNEL)
    }

    /// Score-map extent for an input extent, `None` if too small.
    pub fn output_extent(input: usize) -> Option<usize> {
        STRIDES
            .iter()
            .try_fold(input, |e, &s| conv_out_extent(e, KERNEL, s, PAD))
    }

    pub fn forward<T: Float>(&self, s: &Scope<'_, T>, x: Var) -> Result<Var> {
        let sh = s.graph.shape(x);
        if sh.len() != 4 {
            return Err(Error::dim(format!("critic expects [N,C,H,W], got {sh:?}")));
        }
        for e in [sh[2], sh[3]] {
            if Self::output_extent(e).is_none() {
                return Err(Error::dim(format!(
                    "critic input {}x{} is too small for its receptive field",
                    sh[2], sh[3]
                )));
            }
        }
        let last = self.convs.len() - 1;
        let mut h = x;
        for (l, (c, &stride)) in self.convs.iter().zip(&STRIDES).enumerate() {
            h = c.conv(s, h, stride, PAD)?;
            if l == last {
                break;
            }
            if l > 0 && self.instance_norm {
                h = instance_norm(s, h)?;
            }
            h = s.graph.activation(Activation::LeakyRelu(LEAK), h);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometry() {
        assert_eq!(PatchCritic::receptive_field(), 70);
        assert_eq!(PatchCritic::output_extent(256), Some(30));
        assert_eq!(PatchCritic::output_extent(64), Some(6));
        assert_eq!(PatchCritic::output_extent(16), None);
    }

    #[test]
    fn selection_channels() {
        let g = Graph::<f64>::new();
        let store = ParamStore::new();
        let s = Scope::new(&g, &store);
        let m = g.constant(Tensor::from_f64(&[1, 2, 1, 1], &[3.0, 5.0]).unwrap());
        let y = g.constant(Tensor::from_f64(&[1, 2, 1, 1], &[7.0, 11.0]).unwrap());
        let task = TaskConfig::new(vec![true, false]).unwrap();
        let (syn, acq) = select_discriminator_inputs(&s, m, y, &task).unwrap();
        assert_eq!(g.value(acq).data(), &[3.0, 0.0, 0.0, 5.0]);
        assert_eq!(g.value(syn).data(), &[3.0, 0.0, 0.0, 11.0]);
    }

    #[test]
    fn small_inputs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let d = PatchCritic::new(&mut store, 1, 2, &mut rng).unwrap();
        let g = Graph::new();
        let s = Scope::new(&g, &store);
        let x = g.constant(Tensor::zeros(&[1, 2, 16, 16]));
        assert!(matches!(d.forward(&s, x), Err(Error::Dimension(_))));
    }
}
