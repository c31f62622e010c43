//! Convolution parameter bundles shared by the generator and the critic.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Float, NormKind, ParamId, ParamStore, Scope, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const NORM_EPS: f64 = 1e-5;

/// Weight and bias of a convolution. For transposed convolutions the weight is
/// stored as `[C_in, F_out, k, k]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ConvW {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvW {
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), Tensor::randn(&[out_ch, in_ch, k, k], INIT_STD, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]))?,
        })
    }

    pub fn init_transposed<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), Tensor::randn(&[in_ch, out_ch, k, k], INIT_STD, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]))?,
        })
    }

    pub fn conv<T: Float>(&self, s: &Scope<'_, T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        s.graph.conv2d(x, s.p(self.w), Some(s.p(self.b)), stride, pad)
    }

    /// Stride-2 transposed convolution that exactly doubles the spatial extent
    /// for an odd kernel.
    pub fn up2<T: Float>(&self, s: &Scope<'_, T>, x: Var) -> Result<Var> {
        let k = s.graph.value(s.p(self.w)).shape()[2];
        s.graph
            .conv_transpose2d(x, s.p(self.w), Some(s.p(self.b)), 2, k / 2, 1)
    }
}

pub(crate) fn instance_norm<T: Float>(s: &Scope<'_, T>, x: Var) -> Result<Var> {
    s.graph.normalize(x, NormKind::Instance, None, None, NORM_EPS)
}

pub(crate) fn norm_relu<T: Float>(s: &Scope<'_, T>, x: Var) -> Result<Var> {
    Ok(s.graph.relu(instance_norm(s, x)?))
}
