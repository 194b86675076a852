//! The combined classifier: SPAIR enhancement feeding the transformer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{apply_stats_updates, Forward, Mode, ParamStore, StatsUpdate};
use crate::spair::{Spair, SpairConfig};
use crate::swin::{Swin, SwinConfig};
use crate::tensor::{kernels, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpActivation {
    #[default]
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub spair: SpairConfig,
    pub swin: SwinConfig,
    pub mlp_activation: MlpActivation,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            spair: SpairConfig::default(),
            swin: SwinConfig::default(),
            mlp_activation: MlpActivation::Gelu,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.spair.validate()?;
        self.swin.validate()?;
        if self.spair.channels != self.swin.in_channels {
            return Err(Error::Config(format!(
                "spair emits {} channels but swin expects {}",
                self.spair.channels, self.swin.in_channels
            )));
        }
        Ok(())
    }

    /// Default architecture for `size×size` tiles. The window is halved until
    /// it divides the token grid of every stage.
    pub fn desk(size: usize, num_classes: usize) -> Self {
        let mut swin = SwinConfig {
            input_size: size,
            num_classes,
            ..SwinConfig::default()
        };
        let last_grid = (size / swin.patch_size) >> (swin.depths.len() - 1);
        while swin.window > 1 && !last_grid.is_multiple_of(swin.window) {
            swin.window /= 2;
        }
        ModelConfig {
            swin,
            ..ModelConfig::default()
        }
    }

    /// Small configuration for `size×size` tiles: one stage of two blocks
    /// over a 4×4 token grid with 2×2 windows.
    pub fn tiny(size: usize, num_classes: usize) -> Self {
        ModelConfig {
            swin: SwinConfig {
                input_size: size,
                patch_size: size / 4,
                embed_dim: 16,
                depths: vec![2],
                heads: vec![2],
                window: 2,
                mlp_ratio: 2,
                num_classes,
                ..SwinConfig::default()
            },
            ..ModelConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpairSwin {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub spair: Spair,
    pub swin: Swin,
}

impl SpairSwin {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let spair = Spair::new(&mut store, "spair", config.spair.clone(), &mut rng)?;
        let swin = Swin::new(&mut store, "swin", config.swin.clone(), &mut rng)?;
        Ok(SpairSwin {
            config,
            store,
            spair,
            swin,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.swin.num_classes
    }

    pub fn input_size(&self) -> usize {
        self.config.swin.input_size
    }

    /// Logits `[B, K]` for images `[B, C, S, S]`.
    pub fn forward(&self, cx: &mut Forward<'_>, images: Var) -> Result<Var> {
        let enhanced = self.spair.forward(cx, images)?;
        self.swin.forward(cx, enhanced)
    }

    /// Inference logits without recording gradients.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut cx = Forward::new(&mut g, &self.store, Mode::Eval);
        let x = cx.constant(images.clone())?;
        let y = self.forward(&mut cx, x)?;
        Ok(g.value(y).clone())
    }

    /// Class probabilities `[B, K]`.
    pub fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        kernels::softmax(&self.logits(images)?, 1)
    }

    pub fn apply_stats(&mut self, updates: &[StatsUpdate]) -> Result<()> {
        apply_stats_updates(&mut self.store, updates)
    }
}

/// Converts 8-bit HWC RGB pixels to a `[C, H, W]` slice of `[0, 1]` values.
pub fn pixels_to_chw(pixels: &[u8], width: usize, height: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                out[(c * height + y) * width + x] = pixels[(y * width + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    out
}
