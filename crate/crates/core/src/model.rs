//! Weight-entangled elastic transformer.
//!
//! A [`Supernet`] stores one set of maxnet-sized tensors. A subnet
//! `ArchConfig` selects the leading hidden units, head blocks and FFN
//! columns of every tensor, and keeps the layers `g_c(1..=L_c)` where
//! `g_c(l) = ceil(l * L_max / L_c)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::distill::ProjectionBank;
use crate::error::{Error, Result};
use crate::lora::{self, AdaptTarget, AdapterStack};
use crate::rng;
use crate::tensor::Tensor;

/// One point of the configuration space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
}

impl ArchConfig {
    pub fn new(hidden: usize, heads: usize, ffn: usize, layers: usize) -> Self {
        ArchConfig {
            hidden,
            heads,
            ffn,
            layers,
        }
    }

    pub fn width(&self) -> Width {
        Width {
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
        }
    }

    /// Component-wise `<=`.
    pub fn fits_within(&self, other: &ArchConfig) -> bool {
        self.hidden <= other.hidden && self.heads <= other.heads && self.ffn <= other.ffn && self.layers <= other.layers
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}h{}f{}L{}", self.hidden, self.heads, self.ffn, self.layers)
    }
}

/// A `(hidden, heads, ffn)` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Width {
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Width {
    pub fn with_depth(self, layers: usize) -> ArchConfig {
        ArchConfig::new(self.hidden, self.heads, self.ffn, layers)
    }
}

/// `g_c(l) = ceil(l * max_layers / sub_layers)` for `1 <= l <= sub_layers`.
pub fn layer_map(sub_layers: usize, max_layers: usize, l: usize) -> Result<usize> {
    if l == 0 || l > sub_layers || sub_layers > max_layers {
        return Err(Error::Index {
            what: "subnet layer",
            index: l,
            bound: sub_layers,
        });
    }
    Ok((l * max_layers).div_ceil(sub_layers))
}

/// The set of admissible subnets: every allowed width paired with every
/// allowed depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigSpace {
    widths: Vec<Width>,
    depths: Vec<usize>,
}

impl ConfigSpace {
    pub fn new(mut widths: Vec<Width>, mut depths: Vec<usize>) -> Result<Self> {
        widths.sort();
        widths.dedup();
        depths.sort_unstable();
        depths.dedup();
        let Some(max) = widths.last().copied() else {
            return Err(Error::Config("allowed_widths is empty".into()));
        };
        if depths.is_empty() || depths[0] == 0 {
            return Err(Error::Config("allowed_depths must be non-empty positive integers".into()));
        }
        for w in &widths {
            if w.hidden == 0 || w.heads == 0 || w.ffn == 0 {
                return Err(Error::Config(format!("width {w:?} has a zero component")));
            }
            if w.hidden % w.heads != 0 {
                return Err(Error::Config(format!(
                    "hidden width {} is not divisible by head count {}; choose heads dividing the width",
                    w.hidden, w.heads
                )));
            }
            if w.hidden / w.heads != max.hidden / max.heads {
                return Err(Error::Config(format!(
                    "width {}/{} heads gives head size {}, but the maxnet head size is {}; heads must scale with width",
                    w.hidden,
                    w.heads,
                    w.hidden / w.heads,
                    max.hidden / max.heads
                )));
            }
            if w.heads > max.heads || w.ffn > max.ffn {
                return Err(Error::Config(format!("width {w:?} exceeds the maxnet width {max:?}")));
            }
        }
        Ok(ConfigSpace { widths, depths })
    }

    pub fn widths(&self) -> &[Width] {
        &self.widths
    }

    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    pub fn maxnet(&self) -> ArchConfig {
        self.widths[self.widths.len() - 1].with_depth(self.depths[self.depths.len() - 1])
    }

    pub fn minnet(&self) -> ArchConfig {
        self.widths[0].with_depth(self.depths[0])
    }

    pub fn head_dim(&self) -> usize {
        let m = self.maxnet();
        m.hidden / m.heads
    }

    pub fn contains(&self, c: &ArchConfig) -> bool {
        self.widths.contains(&c.width()) && self.depths.contains(&c.layers)
    }

    pub fn check(&self, c: &ArchConfig) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(Error::Config(format!("configuration {c} is not in the configuration space")))
        }
    }

    /// All configurations, widths-major, ascending.
    pub fn configs(&self) -> Vec<ArchConfig> {
        self.widths
            .iter()
            .flat_map(|w| self.depths.iter().map(move |&d| w.with_depth(d)))
            .collect()
    }

    /// Configurations reachable at a training stage: stage 0 is the maxnet,
    /// stage 1 varies width at full depth, stage 2 varies both.
    pub fn stage_configs(&self, stage: usize) -> Vec<ArchConfig> {
        let max_depth = self.maxnet().layers;
        match stage {
            0 => vec![self.maxnet()],
            1 => self.widths.iter().map(|w| w.with_depth(max_depth)).collect(),
            _ => self.configs(),
        }
    }

    /// Finds the configuration with hidden width `hidden` and depth `layers`.
    pub fn find(&self, hidden: usize, layers: usize) -> Result<ArchConfig> {
        let w = self
            .widths
            .iter()
            .find(|w| w.hidden == hidden)
            .ok_or_else(|| Error::Config(format!("no allowed width with hidden size {hidden}")))?;
        let c = w.with_depth(layers);
        self.check(&c)?;
        Ok(c)
    }

    pub fn layer_map(&self, c: &ArchConfig, l: usize) -> Result<usize> {
        layer_map(c.layers, self.maxnet().layers, l)
    }

    /// 1-based maxnet layers kept by `c`.
    pub fn retained_layers(&self, c: &ArchConfig) -> Vec<usize> {
        retained_layers(c.layers, self.maxnet().layers)
    }

    /// Maxnet layers used for feature distillation: `g_minnet(1..=L_minnet)`.
    pub fn distilled_layers(&self) -> Vec<usize> {
        retained_layers(self.minnet().layers, self.maxnet().layers)
    }

    /// `(subnet layer, maxnet layer)` pairs for feature distillation, both
    /// 1-based. Each distilled maxnet layer `m` is matched with the first
    /// subnet layer `l` such that `g_c(l) >= m`; this is the layer with
    /// `g_c(l) = m` whenever one exists.
    pub fn distill_pairs(&self, c: &ArchConfig) -> Vec<(usize, usize)> {
        let max_layers = self.maxnet().layers;
        self.distilled_layers()
            .into_iter()
            .map(|m| {
                let l = (1..=c.layers)
                    .find(|&l| layer_map(c.layers, max_layers, l).is_ok_and(|g| g >= m))
                    .unwrap_or(c.layers);
                (l, m)
            })
            .collect()
    }
}

pub fn retained_layers(sub_layers: usize, max_layers: usize) -> Vec<usize> {
    (1..=sub_layers)
        .map(|l| layer_map(sub_layers, max_layers, l).expect("l in range"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Sequence classification from the mean-pooled final hidden state.
    Classify { classes: usize },
    /// Causal next-token prediction at every position.
    LanguageModel,
}

/// Dimensions that do not vary across subnets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub max_seq: usize,
    pub task: TaskKind,
}

impl ModelDims {
    pub fn out_dim(&self) -> usize {
        match self.task {
            TaskKind::Classify { classes } => classes,
            TaskKind::LanguageModel => self.vocab,
        }
    }

    pub fn causal(&self) -> bool {
        matches!(self.task, TaskKind::LanguageModel)
    }
}

/// Per-layer tensors, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerTensor {
    AttnNormGain,
    AttnNormBias,
    Query,
    Key,
    Value,
    AttnOut,
    FfnNormGain,
    FfnNormBias,
    FfnIn,
    FfnInBias,
    FfnOut,
    FfnOutBias,
}

impl LayerTensor {
    pub const ALL: [LayerTensor; 12] = [
        LayerTensor::AttnNormGain,
        LayerTensor::AttnNormBias,
        LayerTensor::Query,
        LayerTensor::Key,
        LayerTensor::Value,
        LayerTensor::AttnOut,
        LayerTensor::FfnNormGain,
        LayerTensor::FfnNormBias,
        LayerTensor::FfnIn,
        LayerTensor::FfnInBias,
        LayerTensor::FfnOut,
        LayerTensor::FfnOutBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerTensor::AttnNormGain => "attn_norm.gain",
            LayerTensor::AttnNormBias => "attn_norm.bias",
            LayerTensor::Query => "query",
            LayerTensor::Key => "key",
            LayerTensor::Value => "value",
            LayerTensor::AttnOut => "attn_out",
            LayerTensor::FfnNormGain => "ffn_norm.gain",
            LayerTensor::FfnNormBias => "ffn_norm.bias",
            LayerTensor::FfnIn => "ffn_in",
            LayerTensor::FfnInBias => "ffn_in.bias",
            LayerTensor::FfnOut => "ffn_out",
            LayerTensor::FfnOutBias => "ffn_out.bias",
        }
    }

    /// Extents of this tensor in a model of hidden width `d` and FFN width `f`.
    pub fn shape(self, d: usize, f: usize) -> Vec<usize> {
        use LayerTensor::*;
        match self {
            AttnNormGain | AttnNormBias | FfnNormGain | FfnNormBias | FfnOutBias => vec![d],
            Query | Key | Value | AttnOut => vec![d, d],
            FfnIn => vec![f, d],
            FfnInBias => vec![f],
            FfnOut => vec![d, f],
        }
    }

    pub fn adapter(self) -> Option<AdaptTarget> {
        match self {
            LayerTensor::Query => Some(AdaptTarget::Query),
            LayerTensor::Key => Some(AdaptTarget::Key),
            LayerTensor::Value => Some(AdaptTarget::Value),
            LayerTensor::FfnIn => Some(AdaptTarget::FfnIn),
            _ => None,
        }
    }
}

fn layer_param_name(layer: usize, which: LayerTensor) -> String {
    format!("base.layers.{layer}.{}", which.name())
}

/// Frozen pre-trained tensors, sized for the maxnet `arch`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    pub arch: ArchConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    /// Indexed by `LayerTensor as usize`.
    pub layers: Vec<Vec<Tensor>>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
}

impl BaseWeights {
    pub fn random(dims: &ModelDims, arch: ArchConfig, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let (d, f) = (arch.hidden, arch.ffn);
        let tok_emb = Tensor::uniform(&[dims.vocab, d], 0.5, &mut r);
        let pos_emb = Tensor::uniform(&[dims.max_seq, d], 0.1, &mut r);
        let layers = (0..arch.layers)
            .map(|_| {
                LayerTensor::ALL
                    .iter()
                    .map(|&which| {
                        let shape = which.shape(d, f);
                        match which {
                            LayerTensor::AttnNormGain | LayerTensor::FfnNormGain => Tensor::full(&shape, 1.0),
                            _ if shape.len() == 1 => Tensor::zeros(&shape),
                            _ => Tensor::uniform(&shape, 1.0 / (shape[1] as f64).sqrt(), &mut r),
                        }
                    })
                    .collect()
            })
            .collect();
        BaseWeights {
            arch,
            tok_emb,
            pos_emb,
            layers,
            final_norm_gain: Tensor::full(&[d], 1.0),
            final_norm_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn tensor(&self, layer: usize, which: LayerTensor) -> &Tensor {
        &self.layers[layer][which as usize]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("base.tok_emb".to_string(), &self.tok_emb),
            ("base.pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (which, t) in LayerTensor::ALL.iter().zip(layer) {
                out.push((layer_param_name(i, *which), t));
            }
        }
        out.push(("base.final_norm.gain".to_string(), &self.final_norm_gain));
        out.push(("base.final_norm.bias".to_string(), &self.final_norm_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("base.tok_emb".to_string(), &mut self.tok_emb),
            ("base.pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (which, t) in LayerTensor::ALL.iter().zip(layer.iter_mut()) {
                out.push((layer_param_name(i, *which), t));
            }
        }
        out.push(("base.final_norm.gain".to_string(), &mut self.final_norm_gain));
        out.push(("base.final_norm.bias".to_string(), &mut self.final_norm_bias));
        out
    }
}

/// Output projection; trained in every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    /// `out_dim x hidden`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl TaskHead {
    pub fn random(out_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        TaskHead {
            weight: Tensor::uniform(&[out_dim, hidden], 1.0 / (hidden as f64).sqrt(), &mut r),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("head.weight".into(), &self.weight), ("head.bias".into(), &self.bias)]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("head.weight".into(), &mut self.weight), ("head.bias".into(), &mut self.bias)]
    }
}

/// Frozen base weights, a trainable head and the stage-indexed adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Supernet {
    pub dims: ModelDims,
    pub base: BaseWeights,
    pub head: TaskHead,
    pub adapters: AdapterStack,
}

/// What a forward pass registers as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Nothing requires grad.
    Frozen,
    /// The pair of the current stage and the task head.
    Adapters,
    /// Every base tensor and the task head.
    Full,
}

/// Token ids laid out `batch x seq`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if tokens.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::shape("token batch", &[tokens.len()], &[batch, seq]));
        }
        Ok(TokenBatch { tokens, batch, seq })
    }
}

/// Handles into the tape for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `softmax(logits)`.
    pub yhat: Var,
    /// `[batch, out]` for classification, `[batch, seq, vocab]` for language modelling.
    pub logits: Var,
    /// Hidden state after each retained layer, `[batch * seq, hidden]`.
    pub features: Vec<Var>,
}

impl Supernet {
    pub fn random(dims: ModelDims, arch: ArchConfig, rank: usize, num_stages: usize, seed: u64) -> Result<Self> {
        if !arch.hidden.is_multiple_of(arch.heads) {
            return Err(Error::Config(format!("hidden {} not divisible by heads {}", arch.hidden, arch.heads)));
        }
        let base = BaseWeights::random(&dims, arch, rng::derive(seed, 1));
        let head = TaskHead::random(dims.out_dim(), arch.hidden, rng::derive(seed, 2));
        let adapters = if num_stages == 0 {
            AdapterStack::empty()
        } else {
            AdapterStack::new(arch.layers, arch.hidden, arch.ffn, rank, num_stages, rng::derive(seed, 3))?
        };
        Ok(Supernet {
            dims,
            base,
            head,
            adapters,
        })
    }

    pub fn arch(&self) -> ArchConfig {
        self.base.arch
    }

    pub fn head_dim(&self) -> usize {
        self.base.arch.hidden / self.base.arch.heads
    }

    /// Whether `c` can be cut out of these weights.
    pub fn check_config(&self, c: &ArchConfig) -> Result<()> {
        let arch = self.arch();
        if c.hidden == 0 || c.heads == 0 || c.ffn == 0 || c.layers == 0 || !c.fits_within(&arch) {
            return Err(Error::Config(format!("configuration {c} does not fit inside {arch}")));
        }
        if c.hidden != c.heads * self.head_dim() {
            return Err(Error::Config(format!(
                "configuration {c} needs hidden = heads * {} (fixed head size)",
                self.head_dim()
            )));
        }
        Ok(())
    }

    /// Replaces the adapters with a fresh stack for `num_stages` stages.
    pub fn with_fresh_adapters(mut self, rank: usize, num_stages: usize, seed: u64) -> Result<Self> {
        let a = self.arch();
        self.adapters = AdapterStack::new(a.layers, a.hidden, a.ffn, rank, num_stages, seed)?;
        Ok(self)
    }

    /// Tensors that [`TrainMode`] `mode` at `stage` updates, by name.
    pub fn trainable_mut(&mut self, mode: TrainMode, stage: usize) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match mode {
            TrainMode::Frozen => return out,
            TrainMode::Adapters => out.extend(self.adapters.stage_params_mut(stage)),
            TrainMode::Full => out.extend(self.base.named_tensors_mut()),
        }
        out.extend(self.head.named_tensors_mut());
        out
    }
}

/// A borrowed slice of the supernet for one configuration; nothing is copied
/// until [`WeightView::to_tensor`].
#[derive(Clone, Debug)]
pub struct SubnetView<'a> {
    net: &'a Supernet,
    config: ArchConfig,
    layers: Vec<usize>,
}

/// Leading-index view of a stored tensor.
#[derive(Clone, Debug)]
pub struct WeightView<'a> {
    source: &'a Tensor,
    lens: Vec<usize>,
}

impl<'a> WeightView<'a> {
    pub fn shape(&self) -> &[usize] {
        &self.lens
    }

    pub fn source(&self) -> &'a Tensor {
        self.source
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.lens.len());
        let mut offset = 0;
        for ((&i, &len), &full) in index.iter().zip(&self.lens).zip(self.source.shape()) {
            assert!(i < len, "index {i} outside view extent {len}");
            offset = offset * full + i;
        }
        self.source.data()[offset]
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = self.source.clone();
        for (axis, &len) in self.lens.iter().enumerate() {
            if t.shape()[axis] != len {
                t = t.narrow(axis, len).expect("view within source");
            }
        }
        t
    }
}

/// Weight projection: the view of `net` belonging to configuration `c`.
pub fn project_weights<'a>(net: &'a Supernet, space: &ConfigSpace, c: &ArchConfig) -> Result<SubnetView<'a>> {
    space.check(c)?;
    net.check_config(c)?;
    Ok(SubnetView {
        net,
        config: *c,
        layers: retained_layers(c.layers, net.arch().layers).into_iter().map(|l| l - 1).collect(),
    })
}

impl<'a> SubnetView<'a> {
    pub fn config(&self) -> ArchConfig {
        self.config
    }

    /// 0-based maxnet indices of the retained layers.
    pub fn retained(&self) -> &[usize] {
        &self.layers
    }

    fn view(&self, source: &'a Tensor, lens: Vec<usize>) -> WeightView<'a> {
        WeightView { source, lens }
    }

    /// Tensor `which` of the `i`-th retained layer.
    pub fn layer(&self, i: usize, which: LayerTensor) -> WeightView<'a> {
        let c = self.config;
        self.view(self.net.base.tensor(self.layers[i], which), which.shape(c.hidden, c.ffn))
    }

    pub fn token_embedding(&self) -> WeightView<'a> {
        self.view(&self.net.base.tok_emb, vec![self.net.dims.vocab, self.config.hidden])
    }

    pub fn position_embedding(&self) -> WeightView<'a> {
        self.view(&self.net.base.pos_emb, vec![self.net.dims.max_seq, self.config.hidden])
    }

    pub fn final_norm(&self) -> (WeightView<'a>, WeightView<'a>) {
        let d = self.config.hidden;
        (self.view(&self.net.base.final_norm_gain, vec![d]), self.view(&self.net.base.final_norm_bias, vec![d]))
    }

    pub fn head(&self) -> (WeightView<'a>, WeightView<'a>) {
        let out = self.net.dims.out_dim();
        (
            self.view(&self.net.head.weight, vec![out, self.config.hidden]),
            self.view(&self.net.head.bias, vec![out]),
        )
    }
}

/// Materializes configuration `c` at `stage` as a self-contained model whose
/// maxnet is `c` and which carries no adapters.
pub fn export(net: &Supernet, space: &ConfigSpace, c: &ArchConfig, stage: usize) -> Result<Supernet> {
    let view = project_weights(net, space, c)?;
    let mut layers = Vec::with_capacity(c.layers);
    for (i, &li) in view.retained().iter().enumerate() {
        let mut tensors = Vec::with_capacity(LayerTensor::ALL.len());
        for which in LayerTensor::ALL {
            let t = match which.adapter() {
                Some(target) if net.adapters.num_stages() > 0 => {
                    let (rows, cols) = target.dims(c.hidden, c.ffn);
                    lora::merge_export(net.base.tensor(li, which), net.adapters.slot(li, target), rows, cols, stage)?
                }
                _ => view.layer(i, which).to_tensor(),
            };
            tensors.push(t);
        }
        layers.push(tensors);
    }
    let (g, b) = view.final_norm();
    let (hw, hb) = view.head();
    Ok(Supernet {
        dims: net.dims,
        base: BaseWeights {
            arch: *c,
            tok_emb: view.token_embedding().to_tensor(),
            pos_emb: view.position_embedding().to_tensor(),
            layers,
            final_norm_gain: g.to_tensor(),
            final_norm_bias: b.to_tensor(),
        },
        head: TaskHead {
            weight: hw.to_tensor(),
            bias: hb.to_tensor(),
        },
        adapters: AdapterStack::empty(),
    })
}

/// Trainable element count `n_j` of configuration `c` at `stage`: the sliced
/// stage adapters of retained layers, the sliced head, and the sliced
/// projection matrices when a bank is given.
pub fn param_count(net: &Supernet, c: &ArchConfig, stage: usize, bank: Option<&ProjectionBank>) -> usize {
    let mut n = 0;
    if stage < net.adapters.num_stages() {
        for li in retained_layers(c.layers, net.arch().layers) {
            for target in AdaptTarget::ALL {
                if let Some(pair) = net.adapters.slot(li - 1, target).and_then(|s| s.pair(stage)) {
                    let (rows, cols) = target.dims(c.hidden, c.ffn);
                    n += pair.sliced_len(rows, cols);
                }
            }
        }
    }
    let out = net.dims.out_dim();
    n += out * c.hidden + out;
    if let Some(bank) = bank {
        n += bank.len() * bank.d_low() * c.hidden;
    }
    n
}

fn sliced_input(tape: &mut Tape, name: &str, t: &Tensor, lens: &[usize], trainable: bool) -> Result<Var> {
    if trainable {
        let mut v = tape.param(name, t, true);
        for (axis, &len) in lens.iter().enumerate() {
            v = tape.narrow(v, axis, len)?;
        }
        Ok(v)
    } else {
        let view = WeightView {
            source: t,
            lens: lens.to_vec(),
        };
        Ok(tape.constant(view.to_tensor()))
    }
}

/// Effective weight of layer `li` (0-based maxnet index) tensor `which` for
/// configuration `c`.
fn layer_weight(tape: &mut Tape, net: &Supernet, c: &ArchConfig, li: usize, which: LayerTensor, stage: usize, mode: TrainMode) -> Result<Var> {
    let lens = which.shape(c.hidden, c.ffn);
    let base = net.base.tensor(li, which);
    let name = layer_param_name(li, which);
    let slot = which.adapter().and_then(|t| net.adapters.slot(li, t));
    let Some(slot) = slot else {
        return sliced_input(tape, &name, base, &lens, mode == TrainMode::Full);
    };
    let (rows, cols) = (lens[0], lens[1]);
    let live = stage.min(slot.pairs.len().saturating_sub(1));
    match mode {
        TrainMode::Full => {
            let w = sliced_input(tape, &name, base, &lens, true)?;
            let mut delta = Tensor::zeros(&lens);
            for pair in slot.pairs.iter().take(live + 1) {
                delta.add_scaled_assign(&pair.slice_delta(rows, cols)?, 1.0)?;
            }
            let d = tape.constant(delta);
            tape.add(w, d)
        }
        TrainMode::Frozen => Ok(tape.constant(lora::compose_sliced(base, Some(slot), 0..live + 1, rows, cols)?)),
        TrainMode::Adapters => {
            let folded = tape.constant(lora::compose_sliced(base, Some(slot), 0..live, rows, cols)?);
            let pair = &slot.pairs[live];
            let a = tape.param(&lora::param_name(li, slot.target, live, 'a'), &pair.a, true);
            let b = tape.param(&lora::param_name(li, slot.target, live, 'b'), &pair.b, true);
            let a = tape.narrow(a, 0, rows)?;
            let b = tape.narrow(b, 1, cols)?;
            let delta = tape.matmul(a, b)?;
            tape.add(folded, delta)
        }
    }
}

fn causal_mask(seq: usize) -> Tensor {
    let mut m = Tensor::zeros(&[seq, seq]);
    for i in 0..seq {
        for j in i + 1..seq {
            m.data_mut()[i * seq + j] = -1e30;
        }
    }
    m
}

/// Pre-norm transformer pass of subnet `c` with adapters composed through `stage`.
pub fn forward(tape: &mut Tape, net: &Supernet, c: &ArchConfig, batch: &TokenBatch, stage: usize, mode: TrainMode) -> Result<ForwardOutput> {
    net.check_config(c)?;
    if batch.seq > net.dims.max_seq {
        return Err(Error::Index {
            what: "sequence length",
            index: batch.seq,
            bound: net.dims.max_seq,
        });
    }
    let (bsz, seq) = (batch.batch, batch.seq);
    let (d, heads, dh) = (c.hidden, c.heads, net.head_dim());
    let n = bsz * seq;
    let full = mode == TrainMode::Full;

    let tok = sliced_input(tape, "base.tok_emb", &net.base.tok_emb, &[net.dims.vocab, d], full)?;
    let x = tape.embedding(tok, &batch.tokens)?;
    let pos = sliced_input(tape, "base.pos_emb", &net.base.pos_emb, &[seq, d], full)?;
    let x = tape.reshape(x, &[bsz, seq, d])?;
    let x = tape.add(x, pos)?;
    let mut x = tape.reshape(x, &[n, d])?;

    let mask = net.dims.causal().then(|| tape.constant(causal_mask(seq)));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut features = Vec::with_capacity(c.layers);

    for li in retained_layers(c.layers, net.arch().layers) {
        let li = li - 1;
        let w = |tape: &mut Tape, which| layer_weight(tape, net, c, li, which, stage, mode);

        let g = w(tape, LayerTensor::AttnNormGain)?;
        let b = w(tape, LayerTensor::AttnNormBias)?;
        let h = tape.layer_norm(x, g, b)?;

        let split = |tape: &mut Tape, which| -> Result<Var> {
            let wt = w(tape, which)?;
            let p = tape.linear(h, wt)?;
            let p = tape.reshape(p, &[bsz, seq, heads, dh])?;
            let p = tape.permute(p, &[0, 2, 1, 3])?;
            tape.reshape(p, &[bsz * heads, seq, dh])
        };
        let q = split(tape, LayerTensor::Query)?;
        let k = split(tape, LayerTensor::Key)?;
        let v = split(tape, LayerTensor::Value)?;

        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.bmm(q, kt)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax(scores);
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.reshape(ctx, &[bsz, heads, seq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n, d])?;
        let wo = w(tape, LayerTensor::AttnOut)?;
        let o = tape.linear(ctx, wo)?;
        x = tape.add(x, o)?;

        let g = w(tape, LayerTensor::FfnNormGain)?;
        let b = w(tape, LayerTensor::FfnNormBias)?;
        let h2 = tape.layer_norm(x, g, b)?;
        let win = w(tape, LayerTensor::FfnIn)?;
        let bin = w(tape, LayerTensor::FfnInBias)?;
        let u = tape.linear(h2, win)?;
        let u = tape.add(u, bin)?;
        let u = tape.gelu(u);
        let wout = w(tape, LayerTensor::FfnOut)?;
        let bout = w(tape, LayerTensor::FfnOutBias)?;
        let y = tape.linear(u, wout)?;
        let y = tape.add(y, bout)?;
        x = tape.add(x, y)?;
        features.push(x);
    }

    let g = sliced_input(tape, "base.final_norm.gain", &net.base.final_norm_gain, &[d], full)?;
    let b = sliced_input(tape, "base.final_norm.bias", &net.base.final_norm_bias, &[d], full)?;
    let x = tape.layer_norm(x, g, b)?;

    let out = net.dims.out_dim();
    let head_trainable = mode != TrainMode::Frozen;
    let hw = sliced_input(tape, "head.weight", &net.head.weight, &[out, d], head_trainable)?;
    let hb = sliced_input(tape, "head.bias", &net.head.bias, &[out], head_trainable)?;
    let logits = match net.dims.task {
        TaskKind::Classify { .. } => {
            let pooled = tape.reshape(x, &[bsz, seq, d])?;
            let pooled = tape.mean_axis(pooled, 1)?;
            let z = tape.linear(pooled, hw)?;
            tape.add(z, hb)?
        }
        TaskKind::LanguageModel => {
            let z = tape.linear(x, hw)?;
            let z = tape.add(z, hb)?;
            tape.reshape(z, &[bsz, seq, out])?
        }
    };
    let yhat = tape.softmax(logits);
    Ok(ForwardOutput { yhat, logits, features })
}
