//! The two restoration networks: EG-Restormer (EGAB U-net) and LENet
//! (SGDB U-net with an ESAB on the decoder output). Both are four-level
//! U-shapes: three downsamples between encoder levels, skip connections
//! fused by concatenation + 1x1 reduction on the way up, and a residual
//! 3x3 head added to the input.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Conv2d, Downsample, Egab, Esab, ParamList, Sgdb, Upsample};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{Scalar, Tensor};

pub const LEVELS: usize = 4;
/// Three downsamples: spatial extents must divide this.
pub const SPATIAL_MULTIPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    EgRestormer,
    Lenet,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::EgRestormer => write!(f, "eg-restormer"),
            ModelKind::Lenet => write!(f, "lenet"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub base_channels: usize,
    pub blocks_per_level: [usize; 4],
    /// Attention heads per level; ignored by LENet.
    pub heads_per_level: [usize; 4],
    /// Hidden expansion of the gated feed-forward in EGAB.
    pub ffn_expansion: usize,
    /// Hidden expansion of SGDB.
    pub sgdb_expansion: usize,
}

impl ModelConfig {
    /// Paper-scale EG-Restormer: 48 channels, [4,6,6,8] blocks, [1,2,4,8] heads.
    pub fn eg_restormer_paper() -> Self {
        ModelConfig {
            kind: ModelKind::EgRestormer,
            base_channels: 48,
            blocks_per_level: [4, 6, 6, 8],
            heads_per_level: [1, 2, 4, 8],
            ffn_expansion: 2,
            sgdb_expansion: 2,
        }
    }

    /// Desk-scale EG-Restormer for CPU tests.
    pub fn eg_restormer_desk() -> Self {
        ModelConfig {
            kind: ModelKind::EgRestormer,
            base_channels: 8,
            blocks_per_level: [1, 1, 1, 1],
            heads_per_level: [1, 1, 2, 2],
            ffn_expansion: 2,
            sgdb_expansion: 2,
        }
    }

    /// Paper-scale LENet: width chosen so the parameter count lands near the
    /// published 0.28M.
    pub fn lenet_paper() -> Self {
        ModelConfig {
            kind: ModelKind::Lenet,
            base_channels: 20,
            blocks_per_level: [1, 1, 1, 1],
            heads_per_level: [1, 1, 1, 1],
            ffn_expansion: 2,
            sgdb_expansion: 2,
        }
    }

    /// Desk-scale LENet for CPU training runs.
    pub fn lenet_desk() -> Self {
        ModelConfig {
            kind: ModelKind::Lenet,
            base_channels: 8,
            blocks_per_level: [1, 1, 1, 1],
            heads_per_level: [1, 1, 1, 1],
            ffn_expansion: 2,
            sgdb_expansion: 2,
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::Parameter(format!(
                "base_channels must be even and nonzero, got {}",
                self.base_channels
            )));
        }
        if self.ffn_expansion == 0 || self.sgdb_expansion == 0 {
            return Err(Error::Parameter("expansion factors must be >= 1".into()));
        }
        if self.blocks_per_level.iter().any(|b| *b == 0) {
            return Err(Error::Parameter("blocks_per_level entries must be >= 1".into()));
        }
        if self.kind == ModelKind::EgRestormer {
            for l in 0..LEVELS {
                let c = self.channels_at(l);
                let h = self.heads_per_level[l];
                if h == 0 || c % h != 0 {
                    return Err(Error::dimension(
                        "model heads",
                        &[c, h],
                        format!("heads dividing {} channels at level {}", c, l),
                    ));
                }
            }
        }
        Ok(())
    }

    /// First field name on which two configs disagree.
    pub fn diff_field(&self, other: &ModelConfig) -> Option<&'static str> {
        if self.kind != other.kind {
            return Some("kind");
        }
        if self.base_channels != other.base_channels {
            return Some("base_channels");
        }
        if self.blocks_per_level != other.blocks_per_level {
            return Some("blocks_per_level");
        }
        if self.heads_per_level != other.heads_per_level && self.kind == ModelKind::EgRestormer {
            return Some("heads_per_level");
        }
        if self.ffn_expansion != other.ffn_expansion {
            return Some("ffn_expansion");
        }
        if self.sgdb_expansion != other.sgdb_expansion {
            return Some("sgdb_expansion");
        }
        None
    }

    /// Analytic trainable-parameter count (no allocation).
    pub fn param_count(&self) -> usize {
        let conv = |ic: usize, oc: usize, k: usize, groups: usize, bias: bool| {
            oc * (ic / groups) * k * k + if bias { oc } else { 0 }
        };
        let block = |c: usize| -> usize {
            match self.kind {
                ModelKind::EgRestormer => {
                    let hidden = 2 * self.ffn_expansion * c;
                    let mut p = 2 * c; // attention LN
                    p += 3 * (conv(c, c, 1, 1, true) + conv(c, c, 3, c, true)); // q/k/v pairs
                    p += conv(c, c, 1, 1, true); // proj
                    p += 1; // edge weight (temperature added per level below)
                    p += 2 * c; // ffn LN
                    p += conv(c, hidden, 1, 1, true);
                    p += conv(hidden, hidden, 3, hidden, true);
                    p += conv(hidden / 2, c, 1, 1, true);
                    p
                }
                ModelKind::Lenet => {
                    let hidden = 2 * self.sgdb_expansion * c;
                    2 * c
                        + conv(c, hidden, 1, 1, true)
                        + conv(hidden, hidden, 3, hidden, true)
                        + conv(hidden / 2, c, 1, 1, true)
                        + c
                }
            }
        };
        let mut total = conv(3, self.base_channels, 3, 1, true); // intro
        for l in 0..LEVELS {
            let c = self.channels_at(l);
            let heads = if self.kind == ModelKind::EgRestormer {
                self.heads_per_level[l]
            } else {
                0
            };
            total += self.blocks_per_level[l] * (block(c) + heads);
        }
        for l in 0..LEVELS - 1 {
            let c = self.channels_at(l);
            total += conv(c, c / 2, 1, 1, false); // downsample
        }
        for l in (0..LEVELS - 1).rev() {
            let c_up_in = self.channels_at(l + 1);
            total += conv(c_up_in / 4, c_up_in / 2, 1, 1, false); // upsample
            let c = self.channels_at(l);
            total += conv(2 * c, c, 1, 1, true); // skip reduction
            let heads = if self.kind == ModelKind::EgRestormer {
                self.heads_per_level[l]
            } else {
                0
            };
            total += self.blocks_per_level[l] * (block(c) + heads);
        }
        if self.kind == ModelKind::Lenet {
            let c = self.base_channels;
            total += 2 * c + conv(c, c, 3, c, true) + conv(c, c, 1, 1, true); // esab
        }
        total += conv(self.base_channels, 3, 3, 1, true); // outro
        total
    }
}

enum Block<T: Scalar> {
    Egab(Egab<T>),
    Sgdb(Sgdb<T>),
}

impl<T: Scalar> Block<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Block::Egab(b) => b.forward(x),
            Block::Sgdb(b) => b.forward(x),
        }
    }

    fn params_into(&self, prefix: &str, out: &mut ParamList<T>) {
        match self {
            Block::Egab(b) => b.params_into(prefix, out),
            Block::Sgdb(b) => b.params_into(prefix, out),
        }
    }
}

/// A restoration network instance holding its trainable parameters.
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    intro: Conv2d<T>,
    enc_levels: Vec<Vec<Block<T>>>,
    downs: Vec<Downsample<T>>,
    ups: Vec<Upsample<T>>,         // deepest first
    skip_reduce: Vec<Conv2d<T>>,   // deepest first
    dec_levels: Vec<Vec<Block<T>>>, // deepest first
    esab: Option<Esab<T>>,
    outro: Conv2d<T>,
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Model({:?}, base={}, {} params)",
            self.config.kind,
            self.config.base_channels,
            self.param_count()
        )
    }
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, "model-init"));
        let cfg = &config;
        let make_level = |rng: &mut ChaCha8Rng, level: usize| -> Result<Vec<Block<T>>> {
            let c = cfg.channels_at(level);
            (0..cfg.blocks_per_level[level])
                .map(|_| {
                    Ok(match cfg.kind {
                        ModelKind::EgRestormer => Block::Egab(Egab::init(
                            rng,
                            c,
                            cfg.heads_per_level[level],
                            cfg.ffn_expansion,
                        )?),
                        ModelKind::Lenet => Block::Sgdb(Sgdb::init(rng, c, cfg.sgdb_expansion)?),
                    })
                })
                .collect()
        };

        let intro = Conv2d::init(&mut rng, 3, config.base_channels, 3, 1, 1, true);
        let mut enc_levels = Vec::with_capacity(LEVELS);
        let mut downs = Vec::with_capacity(LEVELS - 1);
        for l in 0..LEVELS {
            enc_levels.push(make_level(&mut rng, l)?);
            if l < LEVELS - 1 {
                downs.push(Downsample::init(&mut rng, config.channels_at(l))?);
            }
        }
        let mut ups = Vec::with_capacity(LEVELS - 1);
        let mut skip_reduce = Vec::with_capacity(LEVELS - 1);
        let mut dec_levels = Vec::with_capacity(LEVELS - 1);
        for l in (0..LEVELS - 1).rev() {
            ups.push(Upsample::init(&mut rng, config.channels_at(l + 1))?);
            let c = config.channels_at(l);
            skip_reduce.push(Conv2d::init(&mut rng, 2 * c, c, 1, 0, 1, true));
            dec_levels.push(make_level(&mut rng, l)?);
        }
        let esab = match config.kind {
            ModelKind::Lenet => Some(Esab::init(&mut rng, config.base_channels)),
            ModelKind::EgRestormer => None,
        };
        let outro = Conv2d::init(&mut rng, config.base_channels, 3, 3, 1, 1, true);
        Ok(Model {
            config,
            intro,
            enc_levels,
            downs,
            ups,
            skip_reduce,
            dec_levels,
            esab,
            outro,
        })
    }

    /// Residual forward on an (N,3,H,W) tensor; output is input + residual,
    /// unclamped (the image-level entry point clamps).
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with_skips(x, [true; 3])
    }

    /// Diagnostic forward with individual skip connections disabled
    /// (`enabled[l]` gates the encoder-level-l skip). Used by connectivity
    /// tests; inference always runs with all skips enabled.
    pub fn forward_with_skips(&self, x: &Tensor<T>, enabled: [bool; 3]) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dimension("model forward", &s, "(N, 3, H, W)"));
        }
        if s[2] % SPATIAL_MULTIPLE != 0 || s[3] % SPATIAL_MULTIPLE != 0 {
            return Err(Error::dimension(
                "model forward",
                &s,
                format!("spatial extents divisible by {} (reflect-pad first)", SPATIAL_MULTIPLE),
            ));
        }
        let mut feat = self.intro.forward(x)?;
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(LEVELS - 1);
        for l in 0..LEVELS {
            for b in &self.enc_levels[l] {
                feat = b.forward(&feat)?;
            }
            if l < LEVELS - 1 {
                skips.push(feat.clone());
                feat = self.downs[l].forward(&feat)?;
            }
        }
        for (i, l) in (0..LEVELS - 1).rev().enumerate() {
            feat = self.ups[i].forward(&feat)?;
            let skip = if enabled[l] {
                skips[l].clone()
            } else {
                Tensor::zeros(&skips[l].shape())
            };
            feat = Tensor::concat_channels(&[&feat, &skip])?;
            feat = self.skip_reduce[i].forward(&feat)?;
            for b in &self.dec_levels[i] {
                feat = b.forward(&feat)?;
            }
        }
        if let Some(esab) = &self.esab {
            feat = esab.forward(&feat)?;
        }
        let residual = self.outro.forward(&feat)?;
        x.add(&residual)
    }

    /// Named trainable parameters in a stable order.
    pub fn named_params(&self) -> ParamList<T> {
        let mut out = Vec::new();
        self.intro.params_into("intro", &mut out);
        for (l, level) in self.enc_levels.iter().enumerate() {
            for (i, b) in level.iter().enumerate() {
                b.params_into(&format!("enc{l}.{i}"), &mut out);
            }
        }
        for (l, d) in self.downs.iter().enumerate() {
            d.params_into(&format!("down{l}"), &mut out);
        }
        for (i, l) in (0..LEVELS - 1).rev().enumerate() {
            self.ups[i].params_into(&format!("up{l}"), &mut out);
            self.skip_reduce[i].params_into(&format!("skip{l}"), &mut out);
            for (j, b) in self.dec_levels[i].iter().enumerate() {
                b.params_into(&format!("dec{l}.{j}"), &mut out);
            }
        }
        if let Some(esab) = &self.esab {
            esab.params_into("esab", &mut out);
        }
        self.outro.params_into("outro", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Restore an image of arbitrary extents: reflect-pad to a multiple of 8,
    /// run the network, crop back, clamp to [0,1].
    pub fn restore(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        let rgb = image.expand3();
        let (padded, h, w) = rgb.pad_to_multiple(SPATIAL_MULTIPLE)?;
        let x = padded.to_tensor::<T>();
        let y = self.forward_tensor(&x)?;
        let out = ImageBuffer::from_tensor(&y)?;
        out.crop(h, w)
    }
}

/// Anything that maps a blurred image to a restored image.
pub trait Restorer {
    fn restore(&self, image: &ImageBuffer) -> Result<ImageBuffer>;
    fn name(&self) -> String;
}

impl<T: Scalar> Restorer for Model<T> {
    fn restore(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        Model::restore(self, image)
    }

    fn name(&self) -> String {
        format!("{}@{}ch", self.config.kind, self.config.base_channels)
    }
}

/// Pass-through restorer (diagnostics and baselines).
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn restore(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        Ok(image.clone())
    }

    fn name(&self) -> String {
        "identity".into()
    }
}
