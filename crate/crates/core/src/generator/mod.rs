//! The synthesis network: a convolutional encoder, a bottleneck of aggregated
//! residual transformer (ART) blocks and a convolutional decoder.

mod config;

pub use config::{ModelConfig, TransformerPreset};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{instance_norm, norm_relu, ConvW};
use crate::tensor::{Float, ParamId, ParamStore, Scope, Var};
use crate::vit::{
    deflatten, patch_embed, split_records, transformer_encoder, AttentionRecord,
    EncoderLayerWeights, ForwardOpts, TransformerConfig, TransformerWeights,
};

/// Group key of tied encoder-layer parameters.
pub const SHARED_GROUP: &str = "gen.vit_shared";

#[derive(Debug, Clone)]
struct Encoder {
    convs: [ConvW; 3],
    extra: Vec<ConvW>,
}

#[derive(Debug, Clone)]
struct Decoder {
    extra: Vec<ConvW>,
    ups: [ConvW; 2],
    out: ConvW,
}

/// `x + conv3x3 -> norm -> relu -> conv3x3 -> norm`.
#[derive(Debug, Clone)]
pub struct ResCnn {
    conv1: ConvW,
    conv2: ConvW,
}

#[derive(Debug, Clone)]
enum Down {
    Learned(Vec<ConvW>),
    Pooled(ConvW),
    Identity,
}

#[derive(Debug, Clone)]
enum Up {
    Learned(Vec<ConvW>),
    Interpolated(ConvW),
    Projected(ConvW),
}

/// Fuses `concat(f, g)` back to `N_C` channels with parallel 1x1 and 3x3 branches.
#[derive(Debug, Clone)]
pub struct ChannelCompress {
    branch1: ConvW,
    branch3: ConvW,
}

#[derive(Debug, Clone)]
pub struct TransformerPath {
    down: Down,
    pub vit: TransformerWeights,
    up: Up,
    cc: ChannelCompress,
}

#[derive(Debug, Clone)]
pub struct ArtBlock {
    /// 1-based position in the bottleneck.
    pub position: usize,
    res: Option<ResCnn>,
    path: Option<TransformerPath>,
}

impl ArtBlock {
    pub fn has_transformer(&self) -> bool {
        self.path.is_some()
    }

    pub fn transformer(&self) -> Option<&TransformerPath> {
        self.path.as_ref()
    }
}

/// Attention captured inside one ART block, one record per batch sample.
#[derive(Debug, Clone)]
pub struct BlockAttention {
    pub position: usize,
    pub records: Vec<AttentionRecord>,
}

pub struct GeneratorOutput {
    pub output: Var,
    pub attention: Vec<BlockAttention>,
    /// Named intermediate shapes in evaluation order.
    pub trace: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: ModelConfig,
    encoder: Encoder,
    blocks: Vec<ArtBlock>,
    decoder: Decoder,
    shared: Option<Vec<EncoderLayerWeights>>,
}

/// Tying requires every participating transformer to share its layer geometry.
pub fn check_tieable(configs: &[TransformerConfig]) -> Result<()> {
    let key = |c: &TransformerConfig| (c.layers, c.embed_dim, c.heads, c.mlp_hidden);
    if let Some(first) = configs.first() {
        if let Some(other) = configs.iter().find(|c| key(c) != key(first)) {
            return Err(Error::config(format!(
                "cannot tie transformers with different geometry: {:?} vs {:?}",
                key(first),
                key(other)
            )));
        }
    }
    Ok(())
}

impl Generator {
    /// Builds the convolution-only network; transformers are added by
    /// [`Generator::insert_transformers`].
    pub fn new<T: Float, R: Rng + ?Sized>(
        config: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let nc = config.bottleneck_channels;
        let i = config.modalities;
        let stages = config.sampling_stages();
        let encoder = Encoder {
            convs: [
                ConvW::init(store, "gen.enc.conv1", b, i, 7, rng)?,
                ConvW::init(store, "gen.enc.conv2", 2 * b, b, 3, rng)?,
                ConvW::init(store, "gen.enc.conv3", nc, 2 * b, 3, rng)?,
            ],
            extra: if config.no_art_sampling {
                (1..=stages)
                    .map(|s| ConvW::init(store, &format!("gen.enc.extra{s}"), nc, nc, 3, rng))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            },
        };
        let positions = config.positions();
        let mut blocks = Vec::with_capacity(config.art_blocks);
        for j in 1..=config.art_blocks {
            let drop_res = config.no_conv_in_art && positions.contains(&j);
            let res = if drop_res {
                None
            } else {
                Some(ResCnn {
                    conv1: ConvW::init(store, &format!("gen.art{j}.res.conv1"), nc, nc, 3, rng)?,
                    conv2: ConvW::init(store, &format!("gen.art{j}.res.conv2"), nc, nc, 3, rng)?,
                })
            };
            blocks.push(ArtBlock {
                position: j,
                res,
                path: None,
            });
        }
        let decoder = Decoder {
            extra: if config.no_art_sampling {
                (1..=stages)
                    .map(|s| {
                        ConvW::init_transposed(store, &format!("gen.dec.extra{s}"), nc, nc, 3, rng)
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            },
            ups: [
                ConvW::init_transposed(store, "gen.dec.conv1", 2 * b, nc, 3, rng)?,
                ConvW::init_transposed(store, "gen.dec.conv2", b, 2 * b, 3, rng)?,
            ],
            out: ConvW::init(store, "gen.dec.out", i, b, 7, rng)?,
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            blocks,
            decoder,
            shared: None,
        })
    }

    /// Convolution-only network with transformers already inserted.
    pub fn new_full<T: Float, R: Rng + ?Sized>(
        config: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut g = Self::new(config, store, rng)?;
        g.insert_transformers(store, rng)?;
        Ok(g)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ArtBlock] {
        &self.blocks
    }

    pub fn has_transformers(&self) -> bool {
        self.blocks.iter().any(ArtBlock::has_transformer)
    }

    /// Positions of blocks that currently retain a transformer.
    pub fn retaining_positions(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.has_transformer())
            .map(|b| b.position)
            .collect()
    }

    /// Tied encoder layers, when tying is active.
    pub fn shared_layers(&self) -> Option<&[EncoderLayerWeights]> {
        self.shared.as_deref()
    }

    /// Adds transformer paths at the configured positions and returns the ids of
    /// every new parameter. Encoder layers are tied when configured.
    pub fn insert_transformers<T: Float, R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Vec<ParamId>> {
        if self.has_transformers() {
            return Err(Error::contract("transformers are already inserted"));
        }
        let positions = self.config.positions();
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let first_new = store.len();
        let tcfg = self.config.transformer_config()?;
        let tie = self.config.tie_weights && positions.len() > 1;
        if tie {
            check_tieable(&vec![tcfg.clone(); positions.len()])?;
            let layers = (0..tcfg.layers)
                .map(|l| {
                    EncoderLayerWeights::init(
                        store,
                        &format!("{SHARED_GROUP}.layer{l}"),
                        &tcfg,
                        Some(SHARED_GROUP),
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            self.shared = Some(layers);
        }
        let nc = self.config.bottleneck_channels;
        let cin = self.config.transformer_in_channels();
        let stages = self.config.sampling_stages();
        for &j in &positions {
            let pre = format!("gen.art{j}");
            let down = if self.config.no_art_sampling {
                Down::Identity
            } else if self.config.unlearned_sampling {
                Down::Pooled(ConvW::init(store, &format!("{pre}.ds.proj"), cin, nc, 1, rng)?)
            } else {
                Down::Learned(
                    (1..=stages)
                        .map(|s| {
                            let c_in = nc + nc * (s - 1) / stages;
                            let c_out = nc + nc * s / stages;
                            ConvW::init(store, &format!("{pre}.ds.conv{s}"), c_out, c_in, 3, rng)
                        })
                        .collect::<Result<_>>()?,
                )
            };
            let layers = match &self.shared {
                Some(shared) => shared.clone(),
                None => (0..tcfg.layers)
                    .map(|l| {
                        EncoderLayerWeights::init(
                            store,
                            &format!("{pre}.vit.layer{l}"),
                            &tcfg,
                            None,
                            rng,
                        )
                    })
                    .collect::<Result<_>>()?,
            };
            let vit = TransformerWeights::init_private(
                store,
                &format!("{pre}.vit"),
                cin,
                &tcfg,
                layers,
                rng,
            )?;
            let nd = tcfg.embed_dim;
            let up = if self.config.no_art_sampling {
                Up::Projected(ConvW::init(store, &format!("{pre}.us.proj"), nc, nd, 1, rng)?)
            } else if self.config.unlearned_sampling {
                Up::Interpolated(ConvW::init(store, &format!("{pre}.us.proj"), nc, nd, 1, rng)?)
            } else {
                Up::Learned(
                    (1..=stages)
                        .map(|s| {
                            let c_in = if s == 1 { nd } else { 2 * nc };
                            let c_out = if s == stages { nc } else { 2 * nc };
                            ConvW::init_transposed(
                                store,
                                &format!("{pre}.us.conv{s}"),
                                c_out,
                                c_in,
                                3,
                                rng,
                            )
                        })
                        .collect::<Result<_>>()?,
                )
            };
            let cc = ChannelCompress {
                branch1: ConvW::init(store, &format!("{pre}.cc.conv1x1"), nc, 2 * nc, 1, rng)?,
                branch3: ConvW::init(store, &format!("{pre}.cc.conv3x3"), nc, 2 * nc, 3, rng)?,
            };
            self.blocks[j - 1].path = Some(TransformerPath { down, vit, up, cc });
        }
        Ok(store.ids().skip(first_new).collect())
    }

    fn check_input<T: Float>(&self, s: &Scope<'_, T>, x: Var) -> Result<()> {
        let shape = s.graph.shape(x);
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.modalities {
            return Err(Error::dim(format!(
                "generator expects [N,{},H,W], got {shape:?}",
                c.modalities
            )));
        }
        if (shape[2], shape[3]) != (c.height, c.width) {
            return Err(Error::dim(format!(
                "generator configured for {}x{}, got {}x{}",
                c.height, c.width, shape[2], shape[3]
            )));
        }
        Ok(())
    }

    pub fn encoder_forward<T: Float>(&self, s: &Scope<'_, T>, x: Var) -> Result<Var> {
        self.check_input(s, x)?;
        let [c1, c2, c3] = &self.encoder.convs;
        let mut f = norm_relu(s, c1.conv(s, x, 1, 3)?)?;
        f = norm_relu(s, c2.conv(s, f, 2, 1)?)?;
        f = norm_relu(s, c3.conv(s, f, 2, 1)?)?;
        for e in &self.encoder.extra {
            f = norm_relu(s, e.conv(s, f, 2, 1)?)?;
        }
        Ok(f)
    }

    pub fn decoder_forward<T: Float>(&self, s: &Scope<'_, T>, f: Var) -> Result<Var> {
        let mut x = f;
        for e in &self.decoder.extra {
            x = norm_relu(s, e.up2(s, x)?)?;
        }
        for u in &self.decoder.ups {
            x = norm_relu(s, u.up2(s, x)?)?;
        }
        let out = self.decoder.out.conv(s, x, 1, 3)?;
        Ok(s.graph.activation(crate::tensor::Activation::Tanh, out))
    }

    pub fn res_cnn<T: Float>(&self, s: &Scope<'_, T>, r: &ResCnn, h: Var) -> Result<Var> {
        let y = norm_relu(s, r.conv1.conv(s, h, 1, 1)?)?;
        let y = instance_norm(s, r.conv2.conv(s, y, 1, 1)?)?;
        if self.config.no_skip_conv {
            Ok(y)
        } else {
            s.graph.add(y, h)
        }
    }

    fn downsample<T: Float>(&self, s: &Scope<'_, T>, d: &Down, f: Var) -> Result<Var> {
        let sh = s.graph.shape(f);
        let m = self.config.sampling_factor;
        match d {
            Down::Learned(stages) => {
                if !sh[2].is_multiple_of(m) || !sh[3].is_multiple_of(m) {
                    return Err(Error::dim(format!(
                        "downsampling {}x{} by {m}",
                        sh[2], sh[3]
                    )));
                }
                let mut x = f;
                for c in stages {
                    x = norm_relu(s, c.conv(s, x, 2, 1)?)?;
                }
                Ok(x)
            }
            Down::Pooled(proj) => proj.conv(s, s.graph.maxpool(f, m)?, 1, 0),
            Down::Identity => Ok(f),
        }
    }

    fn upsample<T: Float>(&self, s: &Scope<'_, T>, u: &Up, g: Var, size: (usize, usize)) -> Result<Var> {
        match u {
            Up::Learned(stages) => {
                let mut x = g;
                for c in stages {
                    x = norm_relu(s, c.up2(s, x)?)?;
                }
                Ok(x)
            }
            Up::Interpolated(proj) => s.graph.bilinear(proj.conv(s, g, 1, 0)?, size.0, size.1),
            Up::Projected(proj) => proj.conv(s, g, 1, 0),
        }
    }

    pub fn channel_compress<T: Float>(
        &self,
        s: &Scope<'_, T>,
        cc: &ChannelCompress,
        f: Var,
        g: Var,
    ) -> Result<Var> {
        let (fs, gs) = (s.graph.shape(f), s.graph.shape(g));
        if fs != gs {
            return Err(Error::dim(format!("channel compression of {fs:?} and {gs:?}")));
        }
        let c = s.graph.concat(&[f, g], 1)?;
        let a = cc.branch1.conv(s, c, 1, 0)?;
        let b = cc.branch3.conv(s, c, 1, 1)?;
        norm_relu(s, s.graph.add(a, b)?)
    }

    /// One ART block. Captured attention and shapes are appended to `out`.
    pub fn art_forward<T: Float>(
        &self,
        s: &Scope<'_, T>,
        block: &ArtBlock,
        f: Var,
        opts: &mut ForwardOpts<'_>,
        attention: &mut Vec<BlockAttention>,
        trace: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<Var> {
        let j = block.position;
        let Some(path) = &block.path else {
            return match &block.res {
                Some(r) => self.res_cnn(s, r, f),
                None => Ok(f),
            };
        };
        let g_ = s.graph;
        let fsh = g_.shape(f);
        let fd = self.downsample(s, &path.down, f)?;
        let fdsh = g_.shape(fd);
        trace.push((format!("art{j}.down"), fdsh.clone()));
        let z0 = patch_embed(s, fd, &path.vit)?;
        trace.push((format!("art{j}.tokens"), g_.shape(z0)));
        let (zl, maps) = transformer_encoder(s, z0, &path.vit.layers, &path.vit.config, opts)?;
        let grid = (fdsh[2], fdsh[3]);
        if !maps.is_empty() {
            attention.push(BlockAttention {
                position: j,
                records: split_records(&maps, grid),
            });
        }
        let gp = deflatten(s, zl, grid)?;
        let mut g = self.upsample(s, &path.up, gp, (fsh[2], fsh[3]))?;
        if !self.config.no_skip_trans {
            g = g_.add(g, f)?;
        }
        let mut cc_in = fsh.clone();
        cc_in[1] *= 2;
        trace.push((format!("art{j}.cc_in"), cc_in));
        let h = self.channel_compress(s, &path.cc, f, g)?;
        trace.push((format!("art{j}.cc_out"), g_.shape(h)));
        match &block.res {
            Some(r) => self.res_cnn(s, r, h),
            None => Ok(h),
        }
    }

    pub fn forward<T: Float>(
        &self,
        s: &Scope<'_, T>,
        x: Var,
        opts: &mut ForwardOpts<'_>,
    ) -> Result<GeneratorOutput> {
        let mut trace = Vec::new();
        let mut attention = Vec::new();
        let mut f = self.encoder_forward(s, x)?;
        trace.push(("encoder".to_string(), s.graph.shape(f)));
        for block in &self.blocks {
            f = self.art_forward(s, block, f, opts, &mut attention, &mut trace)?;
            trace.push((format!("art{}.out", block.position), s.graph.shape(f)));
        }
        let output = self.decoder_forward(s, f)?;
        trace.push(("output".to_string(), s.graph.shape(output)));
        Ok(GeneratorOutput {
            output,
            attention,
            trace,
        })
    }
}
