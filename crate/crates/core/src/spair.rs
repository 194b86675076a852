//! SPAIR feature enhancement: an inverted residual block followed by a
//! channel-average spatial attention map that gates the residual output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Forward, ParamStore};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpairConfig {
    pub channels: usize,
    pub expansion: usize,
    pub dw_kernel: usize,
    pub att_kernel: usize,
    pub stride: usize,
    /// Multiply the softmax map by `H·W` so its mean is 1.
    pub attention_rescale: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for SpairConfig {
    fn default() -> Self {
        SpairConfig {
            channels: 3,
            expansion: 4,
            dw_kernel: 3,
            att_kernel: 7,
            stride: 1,
            attention_rescale: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl SpairConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("spair: {msg}")));
        if self.channels == 0 {
            return bad("channels must be ≥ 1".into());
        }
        if self.expansion == 0 {
            return bad("expansion must be ≥ 1".into());
        }
        for (name, k) in [("dw_kernel", self.dw_kernel), ("att_kernel", self.att_kernel)] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.stride != 1 {
            return bad(format!(
                "stride {} breaks the residual skip; only stride 1 keeps shapes aligned",
                self.stride
            ));
        }
        if !(self.bn_eps > 0.0) {
            return bad(format!("bn_eps must be > 0, got {}", self.bn_eps));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.expansion
    }
}

#[derive(Clone, Debug)]
pub struct Spair {
    pub config: SpairConfig,
    pub expand: Conv2d,
    pub bn1: BatchNorm2d,
    pub dw: Conv2d,
    pub bn2: BatchNorm2d,
    pub project: Conv2d,
    pub bn3: BatchNorm2d,
    pub att_conv: Conv2d,
}

impl Spair {
    /// Registers all parameters under `prefix` (e.g. `"spair"`).
    pub fn new(store: &mut ParamStore, prefix: &str, config: SpairConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let h = config.hidden();
        let (eps, mom) = (config.bn_eps, config.bn_momentum);
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Spair {
            expand: Conv2d::new(store, &n("expand"), c, h, 1, 1, false, rng),
            bn1: BatchNorm2d::new(store, &n("bn1"), h, eps, mom),
            dw: Conv2d::depthwise(store, &n("dw"), h, config.dw_kernel, config.stride, rng),
            bn2: BatchNorm2d::new(store, &n("bn2"), h, eps, mom),
            project: Conv2d::new(store, &n("project"), h, c, 1, 1, false, rng),
            bn3: BatchNorm2d::new(store, &n("bn3"), c, eps, mom),
            att_conv: Conv2d::new(store, &n("att_conv"), 1, 1, config.att_kernel, 1, true, rng),
            config,
        })
    }

    fn check_input(&self, cx: &Forward<'_>, x: Var) -> Result<()> {
        let shape = cx.graph.shape(x);
        if shape.len() != 4 || shape[1] != self.config.channels {
            return Err(Error::shape(
                "spair",
                format!(
                    "expected [B, {}, H, W] input, got {shape:?}",
                    self.config.channels
                ),
            ));
        }
        Ok(())
    }

    /// `x + BN(project(ReLU(BN(dw(ReLU(BN(expand(x))))))))`.
    pub fn inverted_residual(&self, cx: &mut Forward<'_>, x: Var) -> Result<Var> {
        self.check_input(cx, x)?;
        let h = self.expand.forward(cx, x)?;
        let h = self.bn1.forward(cx, h)?;
        let h = cx.graph.relu(h)?;
        let h = self.dw.forward(cx, h)?;
        let h = self.bn2.forward(cx, h)?;
        let h = cx.graph.relu(h)?;
        let h = self.project.forward(cx, h)?;
        let h = self.bn3.forward(cx, h)?;
        cx.graph.add(x, h)
    }

    /// Softmax over all `H·W` positions of `sigmoid(conv(mean_c(f)))`,
    /// without the optional rescale. Shape `[B, 1, H, W]`.
    pub fn attention_probs(&self, cx: &mut Forward<'_>, f: Var) -> Result<Var> {
        let a = cx.graph.avgpool_channels(f)?;
        let a = self.att_conv.forward(cx, a)?;
        let a = cx.graph.sigmoid(a)?;
        let shape = cx.graph.shape(a).to_vec();
        let flat = cx.graph.reshape(a, &[shape[0], shape[2] * shape[3]])?;
        let p = cx.graph.softmax(flat, 1)?;
        cx.graph.reshape(p, &shape)
    }

    /// Attention map, multiplied by `H·W` when `attention_rescale` is set.
    pub fn spatial_attention(&self, cx: &mut Forward<'_>, f: Var) -> Result<Var> {
        let p = self.attention_probs(cx, f)?;
        if self.config.attention_rescale {
            let shape = cx.graph.shape(p);
            let hw = (shape[2] * shape[3]) as f64;
            cx.graph.scale(p, hw)
        } else {
            Ok(p)
        }
    }

    pub fn forward(&self, cx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let r = self.inverted_residual(cx, x)?;
        let a = self.spatial_attention(cx, r)?;
        cx.graph.mul(r, a)
    }
}
