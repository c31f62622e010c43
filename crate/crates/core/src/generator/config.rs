use serde::{Deserialize, Serialize};

use crate::checkpoint::Fnv1a;
use crate::error::{Error, Result};
use crate::vit::TransformerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformerPreset {
    Base,
    Large,
    Custom,
}

/// Architectural hyperparameters. Its JSON serialization defines the
/// architecture fingerprint stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Protocol modality count `I`.
    pub modalities: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    /// `N_C`.
    pub bottleneck_channels: usize,
    /// `A`.
    pub art_blocks: usize,
    /// 1-based block indices that retain a transformer.
    pub transformer_positions: Vec<usize>,
    /// `M`.
    pub sampling_factor: usize,
    pub transformer: TransformerPreset,
    pub transformer_layers: Option<usize>,
    pub embed_dim: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_hidden: Option<usize>,
    pub patch_size: usize,
    pub dropout: f64,
    pub tie_weights: bool,
    pub disc_channels: usize,
    pub no_transformers: bool,
    pub no_conv_in_art: bool,
    pub no_skip_conv: bool,
    pub no_skip_trans: bool,
    pub unlearned_sampling: bool,
    pub no_art_sampling: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: 3,
            height: 256,
            width: 256,
            base_channels: 64,
            bottleneck_channels: 256,
            art_blocks: 9,
            transformer_positions: vec![1, 6],
            sampling_factor: 4,
            transformer: TransformerPreset::Base,
            transformer_layers: None,
            embed_dim: None,
            heads: None,
            mlp_hidden: None,
            patch_size: 1,
            dropout: 0.0,
            tie_weights: true,
            disc_channels: 64,
            no_transformers: false,
            no_conv_in_art: false,
            no_skip_conv: false,
            no_skip_trans: false,
            unlearned_sampling: false,
            no_art_sampling: false,
        }
    }
}

impl ModelConfig {
    /// Number of stride-2 stages that realize the factor `M`.
    pub fn sampling_stages(&self) -> usize {
        self.sampling_factor.trailing_zeros() as usize
    }

    /// Spatial extent of the ART bottleneck input.
    pub fn bottleneck_size(&self) -> (usize, usize) {
        let d = if self.no_art_sampling {
            4 * self.sampling_factor
        } else {
            4
        };
        (self.height / d, self.width / d)
    }

    /// Token grid seen by the transformers.
    pub fn token_grid(&self) -> (usize, usize) {
        let p = self.patch_size.max(1);
        (
            self.height / (4 * self.sampling_factor) / p,
            self.width / (4 * self.sampling_factor) / p,
        )
    }

    /// Transformer input channel count `N_C'`.
    pub fn transformer_in_channels(&self) -> usize {
        if self.no_art_sampling {
            self.bottleneck_channels
        } else {
            2 * self.bottleneck_channels
        }
    }

    pub fn transformer_config(&self) -> Result<TransformerConfig> {
        let (gh, gw) = self.token_grid();
        let seq_len = gh * gw;
        let mut cfg = match self.transformer {
            TransformerPreset::Base => TransformerConfig::base(seq_len),
            TransformerPreset::Large => TransformerConfig::large(seq_len),
            TransformerPreset::Custom => {
                let need = |v: Option<usize>, key: &str| {
                    v.ok_or_else(|| Error::config(format!("custom transformer requires {key}")))
                };
                TransformerConfig {
                    layers: need(self.transformer_layers, "transformer_layers")?,
                    embed_dim: need(self.embed_dim, "embed_dim")?,
                    heads: need(self.heads, "heads")?,
                    mlp_hidden: need(self.mlp_hidden, "mlp_hidden")?,
                    patch_size: 1,
                    seq_len,
                    dropout: 0.0,
                }
            }
        };
        if self.transformer != TransformerPreset::Custom {
            for (key, given, preset) in [
                ("transformer_layers", self.transformer_layers, cfg.layers),
                ("embed_dim", self.embed_dim, cfg.embed_dim),
                ("heads", self.heads, cfg.heads),
                ("mlp_hidden", self.mlp_hidden, cfg.mlp_hidden),
            ] {
                if given.is_some_and(|g| g != preset) {
                    return Err(Error::config(format!(
                        "{key} = {} conflicts with the {:?} preset ({preset}); use the custom preset",
                        given.unwrap(),
                        self.transformer
                    )));
                }
            }
        }
        cfg.patch_size = self.patch_size;
        cfg.dropout = self.dropout;
        Ok(cfg)
    }

    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.modalities < 2 {
            v.push(format!("modalities = {} (need at least 2)", self.modalities));
        }
        for (key, val) in [
            ("base_channels", self.base_channels),
            ("bottleneck_channels", self.bottleneck_channels),
            ("art_blocks", self.art_blocks),
            ("disc_channels", self.disc_channels),
        ] {
            if val == 0 {
                v.push(format!("{key} must be positive"));
            }
        }
        let m = self.sampling_factor;
        if m < 2 || !m.is_power_of_two() {
            v.push(format!("sampling_factor = {m} must be a power of 2 and at least 2"));
        }
        let unit = 4 * m.max(1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(unit) || !self.width.is_multiple_of(unit) {
            v.push(format!(
                "image size {}x{} must be divisible by {unit}",
                self.height, self.width
            ));
        }
        let mut seen = Vec::new();
        for &p in &self.transformer_positions {
            if p == 0 || p > self.art_blocks {
                v.push(format!(
                    "transformer position {p} outside 1..={}",
                    self.art_blocks
                ));
            }
            if seen.contains(&p) {
                v.push(format!("transformer position {p} listed twice"));
            }
            seen.push(p);
        }
        if self.no_transformers && !self.transformer_positions.is_empty() {
            v.push("no_transformers requires empty transformer_positions".into());
        }
        if self.patch_size != 1 {
            v.push(format!(
                "patch_size = {} (the ART deflattening requires 1)",
                self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout = {} outside [0,1)", self.dropout));
        }
        if self.unlearned_sampling && self.no_art_sampling {
            v.push("unlearned_sampling and no_art_sampling are mutually exclusive".into());
        }
        if !self.transformer_positions.is_empty() && v.is_empty() {
            match self.transformer_config() {
                Ok(t) => {
                    let (gh, gw) = self.token_grid();
                    if let Err(e) = t.validate(gh * t.patch_size, gw * t.patch_size) {
                        v.push(e.to_string());
                    }
                }
                Err(e) => v.push(e.to_string()),
            }
        }
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

    /// 64-bit FNV-1a of the JSON serialization.
    pub fn fingerprint(&self) -> u64 {
        Fnv1a::hash(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Sorted, deduplicated positions.
    pub fn positions(&self) -> Vec<usize> {
        let mut p = self.transformer_positions.clone();
        p.sort_unstable();
        p.dedup();
        p
    }
}
