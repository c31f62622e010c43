//! Transformer module of an ART block: patch embedding, pre-norm encoder layers
//! of multi-head self-attention and MLP, and attention rollout.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Float, NormKind, ParamId, ParamStore, Scope, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Transformer geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub patch_size: usize,
    pub seq_len: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    /// 12 layers, width 768, 12 heads, 3073 MLP units.
    pub fn base(seq_len: usize) -> Self {
        Self {
            layers: 12,
            embed_dim: 768,
            heads: 12,
            mlp_hidden: 3073,
            patch_size: 1,
            seq_len,
            dropout: 0.0,
        }
    }

    /// 24 layers, width 1024, 16 heads, 4096 MLP units.
    pub fn large(seq_len: usize) -> Self {
        Self {
            layers: 24,
            embed_dim: 1024,
            heads: 16,
            mlp_hidden: 4096,
            patch_size: 1,
            seq_len,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Checks internal consistency and that a `h x w` map yields `seq_len` patches.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        let p = self.patch_size;
        if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::config(format!(
                "{h}x{w} map cannot be split into {p}x{p} patches"
            )));
        }
        let np = (h / p) * (w / p);
        if np != self.seq_len {
            return Err(Error::config(format!(
                "{h}x{w} map with patch {p} gives {np} tokens, positional table has {}",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// Weights of one encoder layer (the tied part of the transformer).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerWeights {
    pub ln1_gain: ParamId,
    pub ln1_shift: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_shift: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

fn xavier<T: Float, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)
}

impl EncoderLayerWeights {
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &TransformerConfig,
        group: Option<&str>,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden;
        let mut add = |name: &str, t: Tensor<T>| {
            store.add_grouped(format!("{prefix}.{name}"), t, group.map(str::to_owned))
        };
        Ok(Self {
            ln1_gain: add("ln1.gain", Tensor::ones(&[d]))?,
            ln1_shift: add("ln1.shift", Tensor::zeros(&[d]))?,
            wq: add("attn.wq", xavier(d, d, rng))?,
            bq: add("attn.bq", Tensor::zeros(&[d]))?,
            wk: add("attn.wk", xavier(d, d, rng))?,
            bk: add("attn.bk", Tensor::zeros(&[d]))?,
            wv: add("attn.wv", xavier(d, d, rng))?,
            bv: add("attn.bv", Tensor::zeros(&[d]))?,
            wo: add("attn.wo", xavier(d, d, rng))?,
            bo: add("attn.bo", Tensor::zeros(&[d]))?,
            ln2_gain: add("ln2.gain", Tensor::ones(&[d]))?,
            ln2_shift: add("ln2.shift", Tensor::zeros(&[d]))?,
            fc1_w: add("mlp.fc1.w", xavier(d, h, rng))?,
            fc1_b: add("mlp.fc1.b", Tensor::zeros(&[h]))?,
            fc2_w: add("mlp.fc2.w", xavier(h, d, rng))?,
            fc2_b: add("mlp.fc2.b", Tensor::zeros(&[d]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 16] {
        [
            self.ln1_gain,
            self.ln1_shift,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gain,
            self.ln2_shift,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }
}

/// Patch projection, positional table (always block-private) and encoder layers
/// (possibly shared with other blocks).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub config: TransformerConfig,
    pub patch_proj: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayerWeights>,
}

impl TransformerWeights {
    pub fn init_private<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        cfg: &TransformerConfig,
        layers: Vec<EncoderLayerWeights>,
        rng: &mut R,
    ) -> Result<Self> {
        let patch_dim = in_channels * cfg.patch_size * cfg.patch_size;
        let patch_proj = store.add(
            format!("{prefix}.patch_proj"),
            xavier(patch_dim, cfg.embed_dim, rng),
        )?;
        let pos = store.add(
            format!("{prefix}.pos"),
            Tensor::randn(&[cfg.seq_len, cfg.embed_dim], 0.02, rng),
        )?;
        Ok(Self {
            config: cfg.clone(),
            patch_proj,
            pos,
            layers,
        })
    }
}

/// Attention maps of one sample: per layer a `[S, N_P, N_P]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Tensor<f64>>,
    pub grid: (usize, usize),
}

/// Per-call forward options.
pub struct ForwardOpts<'r> {
    pub capture_attention: bool,
    /// Dropout is active only when an RNG is supplied.
    pub rng: Option<&'r mut dyn RngCore>,
}

impl ForwardOpts<'_> {
    pub fn eval() -> Self {
        Self {
            capture_attention: false,
            rng: None,
        }
    }

    pub fn capture() -> Self {
        Self {
            capture_attention: true,
            rng: None,
        }
    }
}

fn dropout<T: Float>(
    scope: &Scope<'_, T>,
    x: Var,
    rate: f64,
    opts: &mut ForwardOpts<'_>,
) -> Result<Var> {
    let Some(rng) = opts.rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let n = scope.graph.value(x).len();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                T::of(keep)
            }
        })
        .collect();
    scope.graph.mul_const(x, Arc::new(mask))
}

/// `f' [N, C', H', W'] -> z0 [N, N_P, N_D]`: row-major patches, projected, plus positions.
pub fn patch_embed<T: Float>(
    scope: &Scope<'_, T>,
    fmap: Var,
    weights: &TransformerWeights,
) -> Result<Var> {
    let g = scope.graph;
    let s = g.shape(fmap);
    if s.len() != 4 {
        return Err(Error::dim(format!("patch_embed expects [N,C,H,W], got {s:?}")));
    }
    let cfg = &weights.config;
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    cfg.validate(h, w)?;
    let p = cfg.patch_size;
    let (gh, gw) = (h / p, w / p);
    let tokens = if p == 1 {
        let flat = g.reshape(fmap, &[n, c, h * w])?;
        g.permute(flat, &[0, 2, 1])?
    } else {
        let split = g.reshape(fmap, &[n, c, gh, p, gw, p])?;
        let moved = g.permute(split, &[0, 2, 4, 1, 3, 5])?;
        g.reshape(moved, &[n, gh * gw, c * p * p])?
    };
    let proj = g.linear(tokens, scope.p(weights.patch_proj), None)?;
    g.add_bias(proj, scope.p(weights.pos))
}

/// Inverse of the P = 1 patch ordering: `[N, N_P, N_D] -> [N, N_D, H', W']`.
pub fn deflatten<T: Float>(scope: &Scope<'_, T>, z: Var, grid: (usize, usize)) -> Result<Var> {
    let g = scope.graph;
    let s = g.shape(z);
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(Error::dim(format!(
            "deflatten: {s:?} does not match a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let t = g.permute(z, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], grid.0, grid.1])
}

/// Multi-head self-attention. Returns the projected output and, when capturing,
/// the attention tensor `[N, S, N_P, N_P]`.
pub fn msa<T: Float>(
    scope: &Scope<'_, T>,
    z: Var,
    layer: &EncoderLayerWeights,
    cfg: &TransformerConfig,
    opts: &mut ForwardOpts<'_>,
) -> Result<(Var, Option<Tensor<f64>>)> {
    let g = scope.graph;
    let s = g.shape(z);
    let (n, np, d) = (s[0], s[1], s[2]);
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let split = |w: ParamId, b: ParamId, axes: &[usize]| -> Result<Var> {
        let proj = g.linear(z, scope.p(w), Some(scope.p(b)))?;
        let r = g.reshape(proj, &[n, np, heads, dh])?;
        g.permute(r, axes)
    };
    let q = split(layer.wq, layer.bq, &[0, 2, 1, 3])?;
    let kt = split(layer.wk, layer.bk, &[0, 2, 3, 1])?;
    let v = split(layer.wv, layer.bv, &[0, 2, 1, 3])?;
    let logits = g.scale(g.matmul(q, kt)?, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(logits, 3)?;
    let record = opts
        .capture_attention
        .then(|| g.value(attn).cast::<f64>());
    let heads_out = g.matmul(attn, v)?;
    let merged = g.reshape(g.permute(heads_out, &[0, 2, 1, 3])?, &[n, np, d])?;
    let out = g.linear(merged, scope.p(layer.wo), Some(scope.p(layer.bo)))?;
    Ok((dropout(scope, out, cfg.dropout, opts)?, record))
}

/// `z' = MSA(LN(z)) + z; z_out = MLP(LN(z')) + z'`.
pub fn transformer_layer<T: Float>(
    scope: &Scope<'_, T>,
    z: Var,
    layer: &EncoderLayerWeights,
    cfg: &TransformerConfig,
    opts: &mut ForwardOpts<'_>,
) -> Result<(Var, Option<Tensor<f64>>)> {
    let g = scope.graph;
    let n1 = g.normalize(
        z,
        NormKind::Layer,
        Some(scope.p(layer.ln1_gain)),
        Some(scope.p(layer.ln1_shift)),
        LN_EPS,
    )?;
    let (attn_out, record) = msa(scope, n1, layer, cfg, opts)?;
    let z1 = g.add(attn_out, z)?;
    let n2 = g.normalize(
        z1,
        NormKind::Layer,
        Some(scope.p(layer.ln2_gain)),
        Some(scope.p(layer.ln2_shift)),
        LN_EPS,
    )?;
    let hidden = g.linear(n2, scope.p(layer.fc1_w), Some(scope.p(layer.fc1_b)))?;
    let hidden = g.activation(Activation::Gelu, hidden);
    let hidden = dropout(scope, hidden, cfg.dropout, opts)?;
    let mlp = g.linear(hidden, scope.p(layer.fc2_w), Some(scope.p(layer.fc2_b)))?;
    let mlp = dropout(scope, mlp, cfg.dropout, opts)?;
    Ok((g.add(mlp, z1)?, record))
}

/// Cascade of encoder layers; the attention list is empty unless capturing.
pub fn transformer_encoder<T: Float>(
    scope: &Scope<'_, T>,
    z0: Var,
    layers: &[EncoderLayerWeights],
    cfg: &TransformerConfig,
    opts: &mut ForwardOpts<'_>,
) -> Result<(Var, Vec<Tensor<f64>>)> {
    let mut z = z0;
    let mut maps = Vec::new();
    for layer in layers {
        let (next, rec) = transformer_layer(scope, z, layer, cfg, opts)?;
        z = next;
        maps.extend(rec);
    }
    Ok((z, maps))
}

/// Splits batched per-layer attention `[N, S, N_P, N_P]` into per-sample records.
pub fn split_records(maps: &[Tensor<f64>], grid: (usize, usize)) -> Vec<AttentionRecord> {
    let Some(first) = maps.first() else {
        return Vec::new();
    };
    (0..first.shape()[0])
        .map(|i| AttentionRecord {
            layers: maps
                .iter()
                .map(|m| {
                    let item = m.batch_item(i);
                    let s = &m.shape()[1..];
                    item.reshape(s).expect("same element count")
                })
                .collect(),
            grid,
        })
        .collect()
}

/// Intermediate products of attention rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Per layer `0.5 * mean_heads(A) + 0.5 * I`, row-normalized.
    pub mixed: Vec<Tensor<f64>>,
    /// `mixed[L-1] @ ... @ mixed[0]`.
    pub product: Tensor<f64>,
    /// Column means of `product`, min-max normalized, shaped to the token grid.
    pub map: Tensor<f64>,
}

pub fn attention_rollout(record: &AttentionRecord) -> Result<Rollout> {
    let first = record
        .layers
        .first()
        .ok_or_else(|| Error::contract("attention rollout of an empty record"))?;
    let np = first.shape()[1];
    let (gh, gw) = record.grid;
    if gh * gw != np {
        return Err(Error::dim(format!(
            "rollout grid {gh}x{gw} does not hold {np} tokens"
        )));
    }
    let mut mixed = Vec::with_capacity(record.layers.len());
    let mut product: Vec<f64> = (0..np * np)
        .map(|i| if i / np == i % np { 1.0 } else { 0.0 })
        .collect();
    for layer in &record.layers {
        let s = layer.shape();
        if s.len() != 3 || s[1] != np || s[2] != np {
            return Err(Error::dim(format!("attention layer shape {s:?}")));
        }
        let heads = s[0];
        let mut m = vec![0.0; np * np];
        for h in 0..heads {
            for (dst, &a) in m.iter_mut().zip(&layer.data()[h * np * np..(h + 1) * np * np]) {
                *dst += a / heads as f64;
            }
        }
        for r in 0..np {
            let row = &mut m[r * np..(r + 1) * np];
            for v in row.iter_mut() {
                *v *= 0.5;
            }
            row[r] += 0.5;
            let total: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        // product <- m @ product
        let mut next = vec![0.0; np * np];
        for i in 0..np {
            for k in 0..np {
                let a = m[i * np + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..np {
                    next[i * np + j] += a * product[k * np + j];
                }
            }
        }
        product = next;
        mixed.push(Tensor::new(&[np, np], m)?);
    }
    let mut cols = vec![0.0; np];
    for i in 0..np {
        for j in 0..np {
            cols[j] += product[i * np + j] / np as f64;
        }
    }
    let lo = cols.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cols.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let map = if hi - lo > 0.0 {
        cols.iter().map(|&c| (c - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; np]
    };
    Ok(Rollout {
        mixed,
        product: Tensor::new(&[np, np], product)?,
        map: Tensor::new(&[gh, gw], map)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(np: usize) -> TransformerConfig {
        TransformerConfig {
            layers: 1,
            embed_dim: 4,
            heads: 2,
            mlp_hidden: 6,
            patch_size: 1,
            seq_len: np,
            dropout: 0.0,
        }
    }

    #[test]
    fn presets() {
        let b = TransformerConfig::base(256);
        assert_eq!((b.layers, b.embed_dim, b.heads, b.mlp_hidden), (12, 768, 12, 3073));
        let l = TransformerConfig::large(256);
        assert_eq!((l.layers, l.embed_dim, l.heads, l.mlp_hidden), (24, 1024, 16, 4096));
        assert!(b.validate(16, 16).is_ok());
        assert!(b.validate(8, 8).is_err());
    }

    #[test]
    fn width_must_divide_heads() {
        let mut c = tiny_cfg(4);
        c.heads = 3;
        assert!(matches!(c.validate(2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let cfg = tiny_cfg(1);
        let layer = EncoderLayerWeights::init(&mut store, "l", &cfg, None, &mut rng).unwrap();
        let g = Graph::new();
        let scope = Scope::new(&g, &store);
        let z = g.constant(Tensor::randn(&[1, 1, 4], 1.0, &mut rng));
        let (_, rec) = msa(&scope, z, &layer, &cfg, &mut ForwardOpts::capture()).unwrap();
        assert_eq!(rec.unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_query_projection_gives_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let cfg = tiny_cfg(5);
        let layer = EncoderLayerWeights::init(&mut store, "l", &cfg, None, &mut rng).unwrap();
        store.set(layer.wq, Tensor::zeros(&[4, 4])).unwrap();
        let g = Graph::new();
        let scope = Scope::new(&g, &store);
        let z = g.constant(Tensor::randn(&[2, 5, 4], 1.0, &mut rng));
        let (_, rec) = msa(&scope, z, &layer, &cfg, &mut ForwardOpts::capture()).unwrap();
        for &a in rec.unwrap().data() {
            assert!((a - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_two_token_case() {
        let rec = AttentionRecord {
            layers: vec![Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.5, 0.5]).unwrap()],
            grid: (1, 2),
        };
        let r = attention_rollout(&rec).unwrap();
        let p = r.product.data();
        for (a, b) in p.iter().zip([1.0, 0.0, 0.25, 0.75]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(r.map.data(), &[1.0, 0.0]);
    }

    #[test]
    fn rollout_of_identity_is_uniform() {
        let rec = AttentionRecord {
            layers: vec![Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()],
            grid: (1, 2),
        };
        let r = attention_rollout(&rec).unwrap();
        assert_eq!(r.map.data()[0], r.map.data()[1]);
    }

    #[test]
    fn empty_record_is_a_contract_error() {
        let rec = AttentionRecord {
            layers: vec![],
            grid: (1, 1),
        };
        assert!(matches!(attention_rollout(&rec), Err(Error::Contract(_))));
    }
}
