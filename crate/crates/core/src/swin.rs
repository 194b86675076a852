//! Small hierarchical windowed-attention transformer: patch embedding,
//! alternating regular/shifted window attention blocks with relative position
//! bias, patch merging between stages, and a pooled classification head.
//!
//! Token grids are laid out `[B, Hg, Wg, D]`; windowed sequences are
//! `[B·windows, w², D]` with windows in raster order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Forward, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Additive mask value for forbidden attention pairs.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwinConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Dropout after the MLP and attention projections (train mode only).
    pub drop_rate: f64,
    /// Dropout on attention weights.
    pub attn_drop_rate: f64,
    /// Learned additive absolute position embedding after the stem.
    pub absolute_pos_embed: bool,
    pub ln_eps: f64,
}

impl Default for SwinConfig {
    fn default() -> Self {
        SwinConfig {
            input_size: 64,
            in_channels: 3,
            patch_size: 4,
            embed_dim: 24,
            depths: vec![2, 2],
            heads: vec![3, 6],
            window: 4,
            mlp_ratio: 4,
            num_classes: 4,
            drop_rate: 0.0,
            attn_drop_rate: 0.0,
            absolute_pos_embed: false,
            ln_eps: 1e-5,
        }
    }
}

/// Geometry of one stage after validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageGeometry {
    pub grid: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// Zero when the grid is a single window (shifting would be a no-op).
    pub shift: usize,
}

impl SwinConfig {
    pub fn validate(&self) -> Result<Vec<StageGeometry>> {
        let bad = |msg: String| Err(Error::Config(format!("swin: {msg}")));
        if self.patch_size == 0 || self.input_size == 0 || self.in_channels == 0 {
            return bad("input size, channels and patch size must be ≥ 1".into());
        }
        if !self.input_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "input {} not divisible by patch size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!(
                "depths {:?} and heads {:?} must be nonempty and of equal length",
                self.depths, self.heads
            ));
        }
        if self.window == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return bad("window, embed_dim, mlp_ratio and num_classes must be ≥ 1".into());
        }
        for (name, p) in [("drop_rate", self.drop_rate), ("attn_drop_rate", self.attn_drop_rate)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        let mut grid = self.input_size / self.patch_size;
        let mut dim = self.embed_dim;
        let mut stages = Vec::with_capacity(self.depths.len());
        for (s, (&depth, &heads)) in self.depths.iter().zip(&self.heads).enumerate() {
            if s > 0 {
                if !grid.is_multiple_of(2) {
                    return bad(format!("stage {s}: grid {grid} is odd, cannot merge patches"));
                }
                grid /= 2;
                dim *= 2;
            }
            if depth == 0 || depth % 2 != 0 {
                return bad(format!("stage {s}: depth {depth} must be even and ≥ 2"));
            }
            if heads == 0 || !dim.is_multiple_of(heads) {
                return bad(format!("stage {s}: dim {dim} not divisible by {heads} heads"));
            }
            if !grid.is_multiple_of(self.window) {
                return bad(format!(
                    "stage {s}: token grid {grid} not divisible by window {}",
                    self.window
                ));
            }
            let shift = if grid > self.window { self.window / 2 } else { 0 };
            stages.push(StageGeometry {
                grid,
                dim,
                heads,
                depth,
                shift,
            });
        }
        Ok(stages)
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }
}

/// `[B, Hg, Wg, D] → [B·(Hg/w)·(Wg/w), w², D]`.
pub fn window_partition(g: &mut Graph, x: Var, w: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || w == 0 || !shape[1].is_multiple_of(w) || !shape[2].is_multiple_of(w) {
        return Err(Error::shape(
            "window_partition",
            format!("grid {shape:?} not divisible by window {w}"),
        ));
    }
    let (b, h, wd, d) = (shape[0], shape[1], shape[2], shape[3]);
    let t = g.reshape(x, &[b, h / w, w, wd / w, w, d])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[b * (h / w) * (wd / w), w * w, d])
}

/// Inverse of [`window_partition`] for a `grid_h × grid_w` token grid.
pub fn window_reverse(g: &mut Graph, windows: Var, w: usize, grid_h: usize, grid_w: usize) -> Result<Var> {
    let shape = g.shape(windows).to_vec();
    if w == 0 || !grid_h.is_multiple_of(w) || !grid_w.is_multiple_of(w) {
        return Err(Error::shape(
            "window_reverse",
            format!("grid {grid_h}×{grid_w} not divisible by window {w}"),
        ));
    }
    let per_image = (grid_h / w) * (grid_w / w);
    if shape.len() != 3 || shape[1] != w * w || !shape[0].is_multiple_of(per_image) {
        return Err(Error::shape(
            "window_reverse",
            format!("windows {shape:?} do not tile a {grid_h}×{grid_w} grid with window {w}"),
        ));
    }
    let (b, d) = (shape[0] / per_image, shape[2]);
    let t = g.reshape(windows, &[b, grid_h / w, grid_w / w, w, w, d])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[b, grid_h, grid_w, d])
}

/// Region id of every grid cell after a cyclic shift by `shift`: cells that
/// were not neighbours before the roll get different ids.
pub fn shift_region_ids(grid_h: usize, grid_w: usize, w: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| -> usize {
        if i < n - w {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(grid_h * grid_w);
    for r in 0..grid_h {
        for c in 0..grid_w {
            ids.push(band(r, grid_h) * 3 + band(c, grid_w));
        }
    }
    ids
}

/// Additive mask `[windows, w², w²]` for shifted-window attention: 0 for
/// pairs from the same pre-shift region, [`MASK_VALUE`] otherwise.
pub fn attention_mask(grid_h: usize, grid_w: usize, w: usize, shift: usize) -> Result<Tensor> {
    if w == 0 || !grid_h.is_multiple_of(w) || !grid_w.is_multiple_of(w) || shift >= w {
        return Err(Error::shape(
            "attention_mask",
            format!("grid {grid_h}×{grid_w}, window {w}, shift {shift}"),
        ));
    }
    let ids = shift_region_ids(grid_h, grid_w, w, shift);
    let (nh, nw, n) = (grid_h / w, grid_w / w, w * w);
    let mut data = Vec::with_capacity(nh * nw * n * n);
    for wr in 0..nh {
        for wc in 0..nw {
            let win: Vec<usize> = (0..n)
                .map(|i| ids[(wr * w + i / w) * grid_w + wc * w + i % w])
                .collect();
            for &a in &win {
                for &b in &win {
                    data.push(if a == b { 0.0 } else { MASK_VALUE });
                }
            }
        }
    }
    Tensor::new([nh * nw, n, n], data)
}

/// Flattened index into the `(2w−1)²` relative-bias table for every
/// (query, key) pair of a `w×w` window.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let n = w * w;
    let span = 2 * w - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dr = (i / w) as isize - (j / w) as isize + w as isize - 1;
            let dc = (i % w) as isize - (j % w) as isize + w as isize - 1;
            idx.push(dr as usize * span + dc as usize);
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[(2w−1)², heads]`, zero-initialized.
    pub rel_bias: ParamId,
    pub rel_index: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub attn_drop: f64,
    pub proj_drop: f64,
}

impl WindowAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        attn_drop: f64,
        proj_drop: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let span = 2 * window - 1;
        Ok(WindowAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            rel_bias: store.add(
                format!("{name}.rel_bias"),
                Tensor::zeros([span * span, heads]),
                true,
            ),
            rel_index: relative_position_index(window),
            dim,
            heads,
            window,
            attn_drop,
            proj_drop,
        })
    }

    /// Multi-head attention within each window of `x: [B·nW, w², D]`.
    /// `mask` is `[nW, w², w²]`. Returns the output and the attention
    /// weights `[B·nW, heads, w², w²]`.
    pub fn forward_with_weights(&self, cx: &mut Forward<'_>, x: Var, mask: Option<&Tensor>) -> Result<(Var, Var)> {
        let shape = cx.graph.shape(x).to_vec();
        let n = self.window * self.window;
        if shape.len() != 3 || shape[1] != n || shape[2] != self.dim {
            return Err(Error::shape(
                "wmsa",
                format!(
                    "expected [windows, {n}, {}] tokens, got {shape:?}",
                    self.dim
                ),
            ));
        }
        let (bw, h) = (shape[0], self.heads);
        let hd = self.dim / h;

        let qkv = self.qkv.forward(cx, x)?;
        let qkv = cx.graph.reshape(qkv, &[bw, n, 3, h, hd])?;
        let qkv = cx.graph.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = cx.graph.reshape(qkv, &[3, bw * h * n * hd])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = cx.graph.index_select(qkv, &[i])?;
            parts.push(cx.graph.reshape(p, &[bw, h, n, hd])?);
        }
        let (q, k, v) = (parts[0], parts[1], parts[2]);

        let kt = cx.graph.permute(k, &[0, 1, 3, 2])?;
        let scores = cx.graph.matmul(q, kt)?;
        let scores = cx.graph.scale(scores, 1.0 / (hd as f64).sqrt())?;

        let table = cx.param(self.rel_bias)?;
        let bias = cx.graph.index_select(table, &self.rel_index)?;
        let bias = cx.graph.reshape(bias, &[n, n, h])?;
        let bias = cx.graph.permute(bias, &[2, 0, 1])?;
        let mut scores = cx.graph.add(scores, bias)?;

        if let Some(mask) = mask {
            let mshape = mask.shape();
            let nw = mshape[0];
            if mshape != [nw, n, n] || nw == 0 || bw % nw != 0 {
                return Err(Error::shape(
                    "wmsa",
                    format!("mask {mshape:?} does not match {bw} windows of {n} tokens"),
                ));
            }
            let m = cx.constant(mask.reshape([nw, 1, n, n])?)?;
            let s = cx.graph.reshape(scores, &[bw / nw, nw, h, n, n])?;
            let s = cx.graph.add(s, m)?;
            scores = cx.graph.reshape(s, &[bw, h, n, n])?;
        }

        let attn = cx.graph.softmax(scores, 3)?;
        let dropped = cx.dropout(attn, self.attn_drop)?;
        let out = cx.graph.matmul(dropped, v)?;
        let out = cx.graph.permute(out, &[0, 2, 1, 3])?;
        let out = cx.graph.reshape(out, &[bw, n, self.dim])?;
        let out = self.proj.forward(cx, out)?;
        let out = cx.dropout(out, self.proj_drop)?;
        Ok((out, attn))
    }

    pub fn forward(&self, cx: &mut Forward<'_>, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x, mask)?.0)
    }
}

/// Regular window attention over a token grid `[B, Hg, Wg, D]`.
pub fn wmsa(cx: &mut Forward<'_>, attn: &WindowAttention, grid: Var) -> Result<Var> {
    let shape = cx.graph.shape(grid).to_vec();
    let windows = window_partition(cx.graph, grid, attn.window)?;
    let out = attn.forward(cx, windows, None)?;
    window_reverse(cx.graph, out, attn.window, shape[1], shape[2])
}

/// Shifted window attention: roll by `−shift`, masked window attention, roll
/// back. `mask` must come from [`attention_mask`] for the same geometry.
pub fn swmsa(cx: &mut Forward<'_>, attn: &WindowAttention, grid: Var, shift: usize, mask: &Tensor) -> Result<Var> {
    let shape = cx.graph.shape(grid).to_vec();
    let s = shift as isize;
    let t = cx.graph.roll(grid, 1, -s)?;
    let t = cx.graph.roll(t, 2, -s)?;
    let windows = window_partition(cx.graph, t, attn.window)?;
    let out = attn.forward(cx, windows, Some(mask))?;
    let t = window_reverse(cx.graph, out, attn.window, shape[1], shape[2])?;
    let t = cx.graph.roll(t, 1, s)?;
    cx.graph.roll(t, 2, s)
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shift: usize,
    pub mask: Option<Tensor>,
    pub drop: f64,
}

impl SwinBlock {
    /// `x + attn(LN(x))`, then `x + MLP(LN(x))` on a grid `[B, Hg, Wg, D]`.
    pub fn forward(&self, cx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(cx, x)?;
        let h = match &self.mask {
            Some(mask) => swmsa(cx, &self.attn, h, self.shift, mask)?,
            None => wmsa(cx, &self.attn, h)?,
        };
        let x = cx.graph.add(x, h)?;
        let h = self.norm2.forward(cx, x)?;
        let h = self.fc1.forward(cx, h)?;
        let h = cx.graph.gelu(h)?;
        let h = cx.dropout(h, self.drop)?;
        let h = self.fc2.forward(cx, h)?;
        let h = cx.dropout(h, self.drop)?;
        cx.graph.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64, rng: &mut impl Rng) -> Self {
        PatchMerging {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim, eps),
            reduction: Linear::new(store, &format!("{name}.reduction"), 4 * dim, 2 * dim, false, rng),
        }
    }

    /// `[B, Hg, Wg, D] → [B, Hg/2, Wg/2, 2D]`.
    pub fn forward(&self, cx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let t = merge_neighbourhoods(cx.graph, x)?;
        let t = self.norm.forward(cx, t)?;
        self.reduction.forward(cx, t)
    }
}

/// Concatenates each 2×2 neighbourhood into one `4D` feature, in the order
/// (0,0), (1,0), (0,1), (1,1) as (row offset, column offset).
pub fn merge_neighbourhoods(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
        return Err(Error::shape(
            "patch_merging",
            format!("grid {shape:?} must be [B, even, even, D]"),
        ));
    }
    let (b, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
    // axes: b, i, dr, j, dc, d  →  b, i, j, dc, dr, d
    let t = g.reshape(x, &[b, h / 2, 2, w / 2, 2, d])?;
    let t = g.permute(t, &[0, 1, 3, 4, 2, 5])?;
    g.reshape(t, &[b, h / 2, w / 2, 4 * d])
}

#[derive(Clone, Debug)]
pub struct SwinStage {
    pub geometry: StageGeometry,
    pub merge: Option<PatchMerging>,
    pub blocks: Vec<SwinBlock>,
}

#[derive(Clone, Debug)]
pub struct Swin {
    pub config: SwinConfig,
    pub embed: Linear,
    pub embed_norm: LayerNorm,
    pub pos_embed: Option<ParamId>,
    pub stages: Vec<SwinStage>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Swin {
    pub fn new(store: &mut ParamStore, prefix: &str, config: SwinConfig, rng: &mut impl Rng) -> Result<Self> {
        let geometry = config.validate()?;
        let n = |s: &str| format!("{prefix}.{s}");
        let p = config.patch_size;
        let eps = config.ln_eps;
        let embed = Linear::new(store, &n("embed"), config.in_channels * p * p, config.embed_dim, true, rng);
        let embed_norm = LayerNorm::new(store, &n("embed_norm"), config.embed_dim, eps);
        let grid = config.grid();
        let pos_embed = config.absolute_pos_embed.then(|| {
            store.add(
                n("pos_embed"),
                Tensor::trunc_normal([grid * grid, config.embed_dim], 0.02, rng),
                true,
            )
        });
        let mut stages = Vec::with_capacity(geometry.len());
        for (s, geo) in geometry.iter().enumerate() {
            let merge = (s > 0).then(|| PatchMerging::new(store, &n(&format!("stages.{s}.merge")), geo.dim / 2, eps, rng));
            let mask = (geo.shift > 0)
                .then(|| attention_mask(geo.grid, geo.grid, config.window, geo.shift))
                .transpose()?;
            let mut blocks = Vec::with_capacity(geo.depth);
            for i in 0..geo.depth {
                let b = n(&format!("stages.{s}.blocks.{i}"));
                let hidden = geo.dim * config.mlp_ratio;
                let shifted = i % 2 == 1 && geo.shift > 0;
                blocks.push(SwinBlock {
                    norm1: LayerNorm::new(store, &format!("{b}.norm1"), geo.dim, eps),
                    attn: WindowAttention::new(
                        store,
                        &format!("{b}.attn"),
                        geo.dim,
                        geo.heads,
                        config.window,
                        config.attn_drop_rate,
                        config.drop_rate,
                        rng,
                    )?,
                    norm2: LayerNorm::new(store, &format!("{b}.norm2"), geo.dim, eps),
                    fc1: Linear::new(store, &format!("{b}.fc1"), geo.dim, hidden, true, rng),
                    fc2: Linear::new(store, &format!("{b}.fc2"), hidden, geo.dim, true, rng),
                    shift: if shifted { geo.shift } else { 0 },
                    mask: if shifted { mask.clone() } else { None },
                    drop: config.drop_rate,
                });
            }
            stages.push(SwinStage {
                geometry: *geo,
                merge,
                blocks,
            });
        }
        let last = geometry.last().map(|g| g.dim).unwrap_or(config.embed_dim);
        Ok(Swin {
            norm: LayerNorm::new(store, &n("norm"), last, eps),
            head: Linear::new(store, &n("head"), last, config.num_classes, true, rng),
            embed,
            embed_norm,
            pos_embed,
            stages,
            config,
        })
    }

    /// `[B, C, H, W] → [B, (H/p)·(W/p), D]`: each `p×p` pixel group is
    /// flattened in (channel, row, column) order, projected and normalized.
    pub fn patch_embed(&self, cx: &mut Forward<'_>, image: Var) -> Result<Var> {
        let shape = cx.graph.shape(image).to_vec();
        let p = self.config.patch_size;
        let c = self.config.in_channels;
        if shape.len() != 4 || shape[1] != c || !shape[2].is_multiple_of(p) || !shape[3].is_multiple_of(p) {
            return Err(Error::shape(
                "patch_embed",
                format!("image {shape:?} must be [B, {c}, H, W] with H, W divisible by {p}"),
            ));
        }
        let (b, h, w) = (shape[0], shape[2] / p, shape[3] / p);
        let t = cx.graph.reshape(image, &[b, c, h, p, w, p])?;
        let t = cx.graph.permute(t, &[0, 2, 4, 1, 3, 5])?;
        let t = cx.graph.reshape(t, &[b, h * w, c * p * p])?;
        let t = self.embed.forward(cx, t)?;
        let mut t = self.embed_norm.forward(cx, t)?;
        if let Some(pos) = self.pos_embed {
            let pe = cx.param(pos)?;
            t = cx.graph.add(t, pe)?;
        }
        Ok(t)
    }

    /// Pooled final features `[B, D_last]` before the head.
    pub fn features(&self, cx: &mut Forward<'_>, image: Var) -> Result<Var> {
        let shape = cx.graph.shape(image).to_vec();
        if shape.len() == 4 && (shape[2] != self.config.input_size || shape[3] != self.config.input_size) {
            return Err(Error::shape(
                "swin",
                format!(
                    "configured for {0}×{0} input, got {1}×{2}",
                    self.config.input_size, shape[2], shape[3]
                ),
            ));
        }
        let tokens = self.patch_embed(cx, image)?;
        let b = shape[0];
        let grid = self.config.grid();
        let mut x = cx.graph.reshape(tokens, &[b, grid, grid, self.config.embed_dim])?;
        for stage in &self.stages {
            if let Some(merge) = &stage.merge {
                x = merge.forward(cx, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(cx, x)?;
            }
        }
        let s = cx.graph.shape(x).to_vec();
        let x = cx.graph.reshape(x, &[b, s[1] * s[2], s[3]])?;
        let x = cx.graph.mean_axis(x, 1)?;
        self.norm.forward(cx, x)
    }

    /// Logits `[B, num_classes]`.
    pub fn forward(&self, cx: &mut Forward<'_>, image: Var) -> Result<Var> {
        let f = self.features(cx, image)?;
        self.head.forward(cx, f)
    }
}
