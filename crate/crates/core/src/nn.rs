//! Named parameter storage, a forward-pass context, and the basic layers
//! shared by the SPAIR block and the transformer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers such as running statistics are stored but never optimized.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Param {
            name,
            tensor,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.tensor.shape() != tensor.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "`{}` has shape {:?}, got {:?}",
                    slot.name,
                    slot.tensor.shape(),
                    tensor.shape()
                ),
            ));
        }
        slot.tensor = tensor;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatsUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// State threaded through one forward evaluation: the tape, the parameter
/// bindings, the mode and any side outputs (running statistics, dropout RNG).
pub struct Forward<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    updates: Vec<StatsUpdate>,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, mode: Mode) -> Self {
        Forward {
            graph,
            store,
            vars: vec![None; store.len()],
            mode,
            updates: Vec::new(),
            rng: None,
        }
    }

    /// Uses pre-recorded leaves (one per store entry, in store order) instead
    /// of binding parameters from the store on first use.
    pub fn with_bound(
        graph: &'a mut Graph,
        store: &'a ParamStore,
        mode: Mode,
        vars: &[Var],
    ) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        let mut fwd = Self::new(graph, store, mode);
        fwd.vars = vars.iter().copied().map(Some).collect();
        Ok(fwd)
    }

    /// Uses `var` for parameter `id` instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    /// Seeds the RNG used by dropout in train mode.
    pub fn with_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape leaf for a parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let v = self.graph.leaf(self.store.get(id).clone())?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    /// Leaf for every parameter that has been bound so far.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.graph.leaf(t)
    }

    pub fn take_updates(&mut self) -> Vec<StatsUpdate> {
        std::mem::take(&mut self.updates)
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::Config("dropout in train mode needs a seeded RNG".into()))?;
        let shape = self.graph.shape(x).to_vec();
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        let m = self.graph.leaf(mask)?;
        self.graph.mul(x, m)
    }
}

/// Applies running-statistics updates collected during a train-mode pass.
pub fn apply_stats_updates(store: &mut ParamStore, updates: &[StatsUpdate]) -> Result<()> {
    for u in updates {
        let mut mean = store.get(u.running_mean).clone();
        let mut var = store.get(u.running_var).clone();
        u.stats
            .update_running(mean.data_mut(), var.data_mut(), u.momentum);
        store.set(u.running_mean, mean)?;
        store.set(u.running_var, var)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights from a truncated normal with std 0.02, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::trunc_normal([fan_in, fan_out], 0.02, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([fan_out]), true));
        Linear { weight, bias }
    }

    pub fn forward(&self, cx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight)?;
        let b = self.bias.map(|b| cx.param(b)).transpose()?;
        cx.graph.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]), true),
            eps,
        }
    }

    /// Normalizes over the last axis.
    pub fn forward(&self, cx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let axis = cx.graph.shape(x).len().saturating_sub(1);
        let g = cx.param(self.gamma)?;
        let b = cx.param(self.beta)?;
        cx.graph.layernorm(x, axis, g, b, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    /// Channel-wise (depthwise) when true; weight is then `[C, 1, m, m]`.
    pub depthwise: bool,
}

impl Conv2d {
    /// He-normal initialization over the kernel fan-in.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn([cout, cin, kernel, kernel], (2.0 / fan_in as f64).sqrt(), rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([cout]), true));
        Conv2d {
            weight,
            bias,
            stride,
            padding: (kernel - 1) / 2,
            depthwise: false,
        }
    }

    pub fn depthwise(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn([channels, 1, kernel, kernel], (2.0 / fan_in as f64).sqrt(), rng),
            true,
        );
        Conv2d {
            weight,
            bias: None,
            stride,
            padding: (kernel - 1) / 2,
            depthwise: true,
        }
    }

    pub fn forward(&self, cx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight)?;
        let b = self.bias.map(|b| cx.param(b)).transpose()?;
        if self.depthwise {
            cx.graph.depthwise_conv2d(x, w, b, self.stride, self.padding)
        } else {
            cx.graph.conv2d(x, w, b, self.stride, self.padding)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones([channels]), false),
            eps,
            momentum,
        }
    }

    pub fn forward(&self, cx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let g = cx.param(self.gamma)?;
        let b = cx.param(self.beta)?;
        match cx.mode {
            Mode::Train => {
                let (out, stats) = cx.graph.batchnorm2d(x, g, b, BatchNormMode::Train, self.eps)?;
                if let Some(stats) = stats {
                    cx.updates.push(StatsUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        momentum: self.momentum,
                        stats,
                    });
                }
                Ok(out)
            }
            Mode::Eval => {
                let store = cx.store;
                let mode = BatchNormMode::Eval {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                };
                Ok(cx.graph.batchnorm2d(x, g, b, mode, self.eps)?.0)
            }
        }
    }
}
