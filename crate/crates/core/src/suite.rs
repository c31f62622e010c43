//! Finite-difference gradient suite over every differentiable primitive and a
//! toy end-to-end generator and critic, all in 64-bit precision.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{mask_inputs, TaskConfig};
use crate::discriminator::{select_discriminator_inputs, PatchCritic};
use crate::error::{Error, Result};
use crate::generator::{Generator, ModelConfig, TransformerPreset};
use crate::tensor::gradcheck::{check_coordinates, grad_check};
use crate::tensor::{Activation, Graph, NormKind, ParamId, ParamStore, Scope, Tensor, Var};
use crate::trainer::{
    discriminator_loss, generator_adversarial_loss, pixel_loss, reconstruction_loss,
    total_generator_loss, LossWeights,
};
use crate::vit::ForwardOpts;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;
/// The end-to-end objectives contain ReLU and leaky-ReLU kinks; a smaller step
/// keeps central differences from straddling them.
pub const MODEL_STEP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights so that every
/// output element contributes a distinct sensitivity.
fn probe(g: &Graph<f64>, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5151 ^ n as u64);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(g.sum(g.mul_const(y, Arc::new(w))?))
}

type Primitive = Box<dyn Fn(&Graph<f64>, Var) -> Result<Var>>;

struct Case {
    name: &'static str,
    input: Tensor<f64>,
    f: Primitive,
}

/// Every graph operation, differentiated with respect to each of its inputs.
fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, rng);
    let c = |t: &Tensor<f64>| -> Tensor<f64> { t.clone() };
    let a = r(&[2, 3, 4]);
    let b = r(&[2, 3, 4]);
    let bias = r(&[4]);
    let lin_x = r(&[2, 3, 5]);
    let lin_w = r(&[5, 4]);
    let lin_b = r(&[4]);
    let mm_a = r(&[2, 3, 4]);
    let mm_b = r(&[4, 5]);
    let ln_x = r(&[3, 6]);
    let ln_g = r(&[6]);
    let ln_s = r(&[6]);
    let in_x = r(&[2, 3, 4, 4]);
    let in_g = r(&[3]);
    let in_s = r(&[3]);
    let cx = r(&[1, 2, 6, 6]);
    let cw = r(&[3, 2, 3, 3]);
    let cb = r(&[3]);
    let tx = r(&[1, 3, 3, 3]);
    let tw = r(&[3, 2, 3, 3]);
    let tb = r(&[2]);
    let cat_b = r(&[2, 2, 4]);
    let factor: Arc<Vec<f64>> = Arc::new(r(&[24]).into_data());
    let mut v: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, $input:expr, $f:expr) => {
            v.push(Case {
                name: $name,
                input: $input,
                f: Box::new($f),
            })
        };
    }
    {
        let b = c(&b);
        case!("add", c(&a), move |g, x| g.add(x, g.constant(b.clone())));
    }
    {
        let b = c(&b);
        case!("sub/lhs", c(&a), move |g, x| g.sub(x, g.constant(b.clone())));
    }
    {
        let a = c(&a);
        case!("sub/rhs", c(&b), move |g, x| g.sub(g.constant(a.clone()), x));
    }
    {
        let b = c(&b);
        case!("mul", c(&a), move |g, x| g.mul(x, g.constant(b.clone())));
    }
    case!("mul/self", c(&a), |g, x| g.mul(x, x));
    {
        let f = factor.clone();
        case!("mul_const", c(&a), move |g, x| g.mul_const(x, f.clone()));
    }
    case!("scale", c(&a), |g, x| Ok(g.scale(x, -2.5)));
    case!("add_scalar", c(&a), |g, x| Ok(g.square(g.add_scalar(x, 0.7))));
    {
        let bias = c(&bias);
        case!("add_bias/x", c(&a), move |g, x| g.add_bias(x, g.constant(bias.clone())));
    }
    {
        let a = c(&a);
        case!("add_bias/b", c(&bias), move |g, bv| g.add_bias(g.constant(a.clone()), bv));
    }
    case!("abs", c(&a), |g, x| Ok(g.abs(x)));
    case!("square", c(&a), |g, x| Ok(g.square(x)));
    case!("relu", c(&a), |g, x| Ok(g.activation(Activation::Relu, x)));
    case!("leaky_relu", c(&a), |g, x| Ok(g.activation(Activation::LeakyRelu(0.2), x)));
    case!("gelu", c(&a), |g, x| Ok(g.activation(Activation::Gelu, x)));
    case!("tanh", c(&a), |g, x| Ok(g.activation(Activation::Tanh, x)));
    case!("sum", c(&a), |g, x| Ok(g.square(g.sum(x))));
    case!("mean", c(&a), |g, x| Ok(g.square(g.mean(x))));
    case!("reshape", c(&a), |g, x| g.reshape(x, &[6, 4]));
    case!("permute", c(&a), |g, x| g.permute(x, &[2, 0, 1]));
    {
        let cb = c(&cat_b);
        case!("concat", c(&a), move |g, x| g.concat(&[g.constant(cb.clone()), x], 1));
    }
    {
        let (w, b) = (c(&lin_w), c(&lin_b));
        case!("linear/x", c(&lin_x), move |g, x| {
            g.linear(x, g.constant(w.clone()), Some(g.constant(b.clone())))
        });
    }
    {
        let (x, b) = (c(&lin_x), c(&lin_b));
        case!("linear/w", c(&lin_w), move |g, w| {
            g.linear(g.constant(x.clone()), w, Some(g.constant(b.clone())))
        });
    }
    {
        let (x, w) = (c(&lin_x), c(&lin_w));
        case!("linear/b", c(&lin_b), move |g, b| {
            g.linear(g.constant(x.clone()), g.constant(w.clone()), Some(b))
        });
    }
    {
        let mb = c(&mm_b);
        case!("matmul/lhs", c(&mm_a), move |g, x| g.matmul(x, g.constant(mb.clone())));
    }
    {
        let ma = c(&mm_a);
        case!("matmul/rhs", c(&mm_b), move |g, x| g.matmul(g.constant(ma.clone()), x));
    }
    case!("softmax/last", c(&a), |g, x| g.softmax(x, 2));
    case!("softmax/inner", c(&a), |g, x| g.softmax(x, 1));
    {
        let (gn, sh) = (c(&ln_g), c(&ln_s));
        case!("layer_norm/x", c(&ln_x), move |g, x| {
            g.normalize(x, NormKind::Layer, Some(g.constant(gn.clone())), Some(g.constant(sh.clone())), 1e-5)
        });
    }
    {
        let (x, sh) = (c(&ln_x), c(&ln_s));
        case!("layer_norm/gain", c(&ln_g), move |g, gn| {
            g.normalize(g.constant(x.clone()), NormKind::Layer, Some(gn), Some(g.constant(sh.clone())), 1e-5)
        });
    }
    {
        let (x, gn) = (c(&ln_x), c(&ln_g));
        case!("layer_norm/shift", c(&ln_s), move |g, sh| {
            g.normalize(g.constant(x.clone()), NormKind::Layer, Some(g.constant(gn.clone())), Some(sh), 1e-5)
        });
    }
    {
        let (gn, sh) = (c(&in_g), c(&in_s));
        case!("instance_norm/x", c(&in_x), move |g, x| {
            g.normalize(x, NormKind::Instance, Some(g.constant(gn.clone())), Some(g.constant(sh.clone())), 1e-5)
        });
    }
    {
        let (x, sh) = (c(&in_x), c(&in_s));
        case!("instance_norm/gain", c(&in_g), move |g, gn| {
            g.normalize(g.constant(x.clone()), NormKind::Instance, Some(gn), Some(g.constant(sh.clone())), 1e-5)
        });
    }
    {
        let (w, b) = (c(&cw), c(&cb));
        case!("conv2d/x", c(&cx), move |g, x| {
            g.conv2d(x, g.constant(w.clone()), Some(g.constant(b.clone())), 2, 1)
        });
    }
    {
        let (x, b) = (c(&cx), c(&cb));
        case!("conv2d/w", c(&cw), move |g, w| {
            g.conv2d(g.constant(x.clone()), w, Some(g.constant(b.clone())), 1, 1)
        });
    }
    {
        let (x, w) = (c(&cx), c(&cw));
        case!("conv2d/b", c(&cb), move |g, b| {
            g.conv2d(g.constant(x.clone()), g.constant(w.clone()), Some(b), 1, 0)
        });
    }
    {
        let (w, b) = (c(&tw), c(&tb));
        case!("conv_transpose2d/x", c(&tx), move |g, x| {
            g.conv_transpose2d(x, g.constant(w.clone()), Some(g.constant(b.clone())), 2, 1, 1)
        });
    }
    {
        let (x, b) = (c(&tx), c(&tb));
        case!("conv_transpose2d/w", c(&tw), move |g, w| {
            g.conv_transpose2d(g.constant(x.clone()), w, Some(g.constant(b.clone())), 2, 1, 1)
        });
    }
    {
        let (x, w) = (c(&tx), c(&tw));
        case!("conv_transpose2d/b", c(&tb), move |g, b| {
            g.conv_transpose2d(g.constant(x.clone()), g.constant(w.clone()), Some(b), 1, 1, 0)
        });
    }
    case!("bilinear/up", c(&in_x), |g, x| g.bilinear(x, 7, 9));
    case!("bilinear/down", c(&in_x), |g, x| g.bilinear(x, 2, 3));
    case!("maxpool", c(&in_x), |g, x| g.maxpool(x, 2));
    v
}

/// Gradient checks of every primitive against central differences.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases(&mut rng)
        .into_iter()
        .map(|case| {
            let f = &case.f;
            let err = grad_check(|g, x| probe(g, f(g, x)?), &case.input, STEP)?;
            Ok(CheckResult {
                name: case.name.to_string(),
                max_rel_error: err,
                tolerance: PRIMITIVE_TOLERANCE,
            })
        })
        .collect()
}

/// Two modalities at 64x64, three ART blocks with a two-layer transformer in the first.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        modalities: 2,
        height: 64,
        width: 64,
        base_channels: 8,
        bottleneck_channels: 32,
        art_blocks: 3,
        transformer_positions: vec![1],
        sampling_factor: 4,
        transformer: TransformerPreset::Custom,
        transformer_layers: Some(2),
        embed_dim: Some(16),
        heads: Some(2),
        mlp_hidden: Some(32),
        dropout: 0.0,
        disc_channels: 8,
        ..Default::default()
    }
}

/// Checks `d objective / d param` on a sample of coordinates of every tensor in `store`.
fn check_store(
    store: &mut ParamStore<f64>,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
    objective: &dyn Fn(&Scope<'_, f64>) -> Result<Var>,
) -> Result<f64> {
    let grads: Vec<(ParamId, Vec<f64>)> = {
        let g = Graph::new();
        let s = Scope::new(&g, store);
        let loss = objective(&s)?;
        let grads = g.backward(loss)?;
        s.bindings()
            .into_iter()
            .map(|(id, v)| {
                let n = store.value(id).len();
                (id, grads.get(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
            })
            .collect()
    };
    let mut worst = 0.0f64;
    for (id, analytic) in grads {
        let base = (**store.value(id)).clone();
        let n = base.len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let err = check_coordinates(&analytic, &coords, &base, MODEL_STEP, |probe_value| {
            store.set(id, probe_value.clone())?;
            let g = Graph::new();
            let s = Scope::frozen(&g, store);
            let loss = objective(&s)?;
            let value = g.value(loss).item();
            Ok(value)
        })?;
        store.set(id, base)?;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// End-to-end checks of the toy generator objective with respect to every
/// generator tensor, and of the critic objective with respect to every critic
/// tensor.
pub fn model_checks(seed: u64, per_tensor: usize) -> Result<Vec<CheckResult>> {
    let cfg = toy_model_config();
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gstore = ParamStore::<f64>::new();
    let gen = Generator::new_full(&cfg, &mut gstore, &mut rng)?;
    let mut dstore = ParamStore::<f64>::new();
    let disc = PatchCritic::new(&mut dstore, cfg.modalities, cfg.disc_channels, &mut rng)?;
    let task = TaskConfig::new(vec![true, false])?;
    let image = Tensor::<f32>::uniform(&[cfg.modalities, cfg.height, cfg.width], -1.0, 1.0, &mut rng);
    let x = Tensor::stack(&[mask_inputs(&image, &task)?.cast::<f64>()])?;
    // Targets sit 0.5 away from the initial output so no L1 residual is near
    // its kink, where central differences are meaningless.
    let m = {
        let g = Graph::new();
        let s = Scope::frozen(&g, &gstore);
        let out = gen.forward(&s, g.constant(x.clone()), &mut ForwardOpts::eval())?;
        let y = g.value(out.output);
        let data = y
            .data()
            .iter()
            .map(|&v| if rng.random_bool(0.5) { v + 0.5 } else { v - 0.5 })
            .collect();
        Tensor::new(y.shape(), data)?
    };
    let weights = LossWeights::unified();

    let gen_objective = |s: &Scope<'_, f64>, dscope: &Scope<'_, f64>| -> Result<Var> {
        let g = s.graph;
        let y = gen.forward(s, g.constant(x.clone()), &mut ForwardOpts::eval())?.output;
        let mv = g.constant(m.clone());
        let pix = pixel_loss(g, y, mv, &task)?;
        let rec = reconstruction_loss(g, y, mv, &task)?;
        let (syn, _) = select_discriminator_inputs(dscope, mv, y, &task)?;
        let adv = generator_adversarial_loss(g, disc.forward(dscope, syn)?);
        total_generator_loss(g, pix, rec, Some(adv), &weights)
    };
    let frozen_disc = dstore.clone();
    let gen_err = check_store(&mut gstore, per_tensor, &mut rng, &|s| {
        let ds = Scope::frozen(s.graph, &frozen_disc);
        gen_objective(s, &ds)
    })?;

    let y_fixed = {
        let g = Graph::new();
        let s = Scope::frozen(&g, &gstore);
        let out = gen.forward(&s, g.constant(x.clone()), &mut ForwardOpts::eval())?;
        (*g.value(out.output)).clone()
    };
    let disc_err = check_store(&mut dstore, per_tensor, &mut rng, &|s| {
        let g = s.graph;
        let (syn, acq) = select_discriminator_inputs(s, g.constant(m.clone()), g.constant(y_fixed.clone()), &task)?;
        let d_acq = disc.forward(s, acq)?;
        let d_syn = disc.forward(s, syn)?;
        discriminator_loss(g, d_acq, d_syn)
    })?;
    Ok(vec![
        CheckResult {
            name: "toy generator objective".into(),
            max_rel_error: gen_err,
            tolerance: MODEL_TOLERANCE,
        },
        CheckResult {
            name: "toy critic objective".into(),
            max_rel_error: disc_err,
            tolerance: MODEL_TOLERANCE,
        },
    ])
}

/// Primitive and end-to-end checks.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = primitive_checks(seed)?;
    all.extend(model_checks(seed, 3)?);
    Ok(all)
}

/// Numeric error naming every check at or above its tolerance.
pub fn failures(results: &[CheckResult]) -> Option<Error> {
    let failed: Vec<String> = results
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} ({:.3e} >= {:.0e})", c.name, c.max_rel_error, c.tolerance))
        .collect();
    (!failed.is_empty()).then(|| Error::numeric(format!("gradient checks failed: {}", failed.join(", "))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for c in primitive_checks(7).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }
}
