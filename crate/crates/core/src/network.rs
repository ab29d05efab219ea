//! Multi-scale V-Net-style sub-models and the three-model ensemble.
//!
//! Each sub-model is an encoder of `depth` levels (two conv-norm-relu blocks
//! per level, stride-2 convolutions between levels) and a symmetric decoder
//! with additive skip connections. Every decoder block owns a 1×1×1
//! projection head; head outputs are brought back to input resolution with
//! trilinear interpolation and squashed with a sigmoid.
//!
//! Scale `s = 1` is the last decoder block (the usual segmentation output);
//! `s = depth` is the first, deepest one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    add, conv3d, conv_transpose3d, normalize, relu, reshape, sigmoid, upsample, NormMode, NormState, Tensor,
    UpsampleMode,
};

pub const NUM_MODELS: usize = 3;
pub const NORM_EPS: f32 = 1e-5;
pub const GROUP_NORM_GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Group,
    Batch,
    Instance,
}

impl NormKind {
    pub fn mode(self) -> NormMode {
        match self {
            NormKind::Group => NormMode::Group(GROUP_NORM_GROUPS),
            NormKind::Batch => NormMode::Batch,
            NormKind::Instance => NormMode::Instance,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Group => "group",
            NormKind::Batch => "batch",
            NormKind::Instance => "instance",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpsampleKind {
    Trilinear,
    TransposedConv,
    Nearest,
}

impl UpsampleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UpsampleKind::Trilinear => "trilinear",
            UpsampleKind::TransposedConv => "transposed_conv",
            UpsampleKind::Nearest => "nearest",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubModelConfig {
    /// 1-based position in the ensemble.
    pub model_index: usize,
    pub norm: NormKind,
    pub upsample: UpsampleKind,
    pub base_channels: usize,
    pub depth: usize,
    /// Binary segmentation (2) is the only supported value; it uses one sigmoid channel.
    pub num_classes: usize,
}

impl SubModelConfig {
    pub fn new(model_index: usize, norm: NormKind, upsample: UpsampleKind) -> Self {
        Self { model_index, norm, upsample, base_channels: 8, depth: 4, num_classes: 2 }
    }

    /// Group/trilinear, batch/transposed-conv, instance/nearest.
    pub fn diversified() -> [SubModelConfig; NUM_MODELS] {
        [
            Self::new(1, NormKind::Group, UpsampleKind::Trilinear),
            Self::new(2, NormKind::Batch, UpsampleKind::TransposedConv),
            Self::new(3, NormKind::Instance, UpsampleKind::Nearest),
        ]
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self, patch: [usize; 3]) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "only binary segmentation (num_classes = 2) is supported, got {}",
                self.num_classes
            )));
        }
        if self.norm == NormKind::Group && self.base_channels % GROUP_NORM_GROUPS != 0 {
            return Err(Error::Config(format!(
                "group norm needs base_channels divisible by {GROUP_NORM_GROUPS}, got {}",
                self.base_channels
            )));
        }
        let unit = 1usize << (self.depth - 1);
        if patch.iter().any(|&d| d == 0 || d % unit != 0) {
            return Err(Error::Config(format!(
                "patch {patch:?} must be divisible by 2^(depth-1) = {unit} on every axis"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnsembleConfig {
    pub models: [SubModelConfig; NUM_MODELS],
    pub patch: [usize; 3],
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { models: SubModelConfig::diversified(), patch: [32, 32, 32], seed: 0 }
    }
}

impl EnsembleConfig {
    /// Initialization seed of each slot; slots differ so that identical
    /// configurations still start from different weights.
    pub fn model_seeds(&self) -> [u64; NUM_MODELS] {
        std::array::from_fn(|i| self.seed.wrapping_add(i as u64))
    }
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Init {
    seed: u64,
    params: Vec<Tensor>,
}

impl Init {
    /// He-uniform weights drawn from a stream keyed by `(seed, name)`, so a
    /// parameter's values do not depend on which other layers exist.
    fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(name));
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(name, shape, data)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Tensor {
        self.push(name, shape, vec![value; shape.iter().product()])
    }

    fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Tensor {
        let t = Tensor::parameter(name, shape, data).expect("shape and data built together");
        self.params.push(t.clone());
        t
    }
}

/// Convolution followed by normalization and ReLU.
pub struct ConvBlock {
    weight: Tensor,
    bias: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stride: usize,
    padding: usize,
    mode: NormMode,
    pub state: NormState,
}

impl ConvBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize, norm: NormKind) -> Self {
        Self {
            weight: init.he_uniform(&format!("{name}.weight"), &[cout, cin, 3, 3, 3], cin * 27),
            bias: init.constant(&format!("{name}.bias"), &[cout], 0.0),
            gamma: init.constant(&format!("{name}.gamma"), &[cout], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[cout], 0.0),
            stride,
            padding: 1,
            mode: norm.mode(),
            state: NormState::new(cout),
        }
    }

    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        self.state.training = training;
        let h = conv3d(x, &self.weight, &self.bias, self.stride, self.padding)?;
        let h = normalize(&h, self.mode, &self.gamma, &self.beta, NORM_EPS, &mut self.state)?;
        Ok(relu(&h))
    }
}

struct Head {
    weight: Tensor,
    bias: Tensor,
}

struct DecoderStage {
    /// Channel-halving block at the coarser resolution, then the upsampling op.
    reduce: ConvBlock,
    up_weight: Option<Tensor>,
}

pub struct SubModel {
    pub cfg: SubModelConfig,
    patch: [usize; 3],
    params: Vec<Tensor>,
    /// Per level: optional stride-2 entry block, then two conv blocks.
    encoder: Vec<Vec<ConvBlock>>,
    /// Indexed by level; the deepest level has no upsampling stage.
    stages: Vec<Option<DecoderStage>>,
    decoder: Vec<Vec<ConvBlock>>,
    heads: Vec<Head>,
}

/// Full-resolution foreground probabilities of one sub-model at every scale.
#[derive(Clone, Debug)]
pub struct MultiScalePrediction {
    pub model_index: usize,
    /// `probs[s - 1]` is scale `s`, each `[N, D, H, W]`.
    pub probs: Vec<Tensor>,
}

impl MultiScalePrediction {
    /// Probability map at 1-based scale `s`.
    pub fn scale(&self, s: usize) -> &Tensor {
        &self.probs[s - 1]
    }
}

/// Builds one sub-model with deterministic He-uniform weights.
pub fn build_submodel(cfg: &SubModelConfig, patch: [usize; 3], seed: u64) -> Result<SubModel> {
    cfg.validate(patch)?;
    let mut init = Init { seed, params: Vec::new() };
    let depth = cfg.depth;
    let mut encoder = Vec::with_capacity(depth);
    for level in 0..depth {
        let c = cfg.channels(level);
        let mut blocks = Vec::new();
        let cin = if level == 0 {
            1
        } else {
            blocks.push(ConvBlock::new(&mut init, &format!("enc{level}.down"), cfg.channels(level - 1), c, 2, cfg.norm));
            c
        };
        blocks.push(ConvBlock::new(&mut init, &format!("enc{level}.conv0"), cin, c, 1, cfg.norm));
        blocks.push(ConvBlock::new(&mut init, &format!("enc{level}.conv1"), c, c, 1, cfg.norm));
        encoder.push(blocks);
    }
    let mut stages = Vec::with_capacity(depth);
    let mut decoder = Vec::with_capacity(depth);
    let mut heads = Vec::with_capacity(depth);
    for level in 0..depth {
        let c = cfg.channels(level);
        let stage = (level + 1 < depth).then(|| {
            let reduce = ConvBlock::new(&mut init, &format!("dec{level}.reduce"), cfg.channels(level + 1), c, 1, cfg.norm);
            let up_weight = (cfg.upsample == UpsampleKind::TransposedConv)
                .then(|| init.he_uniform(&format!("dec{level}.up.weight"), &[c, c, 2, 2, 2], c));
            DecoderStage { reduce, up_weight }
        });
        stages.push(stage);
        decoder.push(vec![
            ConvBlock::new(&mut init, &format!("dec{level}.conv0"), c, c, 1, cfg.norm),
            ConvBlock::new(&mut init, &format!("dec{level}.conv1"), c, c, 1, cfg.norm),
        ]);
        heads.push(Head {
            weight: init.he_uniform(&format!("head{}.weight", level + 1), &[1, c, 1, 1, 1], c),
            bias: init.constant(&format!("head{}.bias", level + 1), &[1], 0.0),
        });
    }
    Ok(SubModel { cfg: cfg.clone(), patch, params: init.params, encoder, stages, decoder, heads })
}

impl SubModel {
    /// Trainable tensors in a fixed construction order.
    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn patch(&self) -> [usize; 3] {
        self.patch
    }

    /// Normalization states in a fixed order, for checkpointing.
    pub fn norm_states_mut(&mut self) -> Vec<&mut NormState> {
        let enc = self.encoder.iter_mut().flatten();
        let red = self.stages.iter_mut().flatten().map(|s| &mut s.reduce);
        let dec = self.decoder.iter_mut().flatten();
        enc.chain(red).chain(dec).map(|b| &mut b.state).collect()
    }

    fn upsample_stage(&mut self, level: usize, x: &Tensor, training: bool) -> Result<Tensor> {
        let mode = self.cfg.upsample;
        let stage = self.stages[level].as_mut().expect("non-deepest level has a stage");
        let h = stage.reduce.forward(x, training)?;
        match mode {
            UpsampleKind::Trilinear => upsample(&h, 2, UpsampleMode::Trilinear),
            UpsampleKind::Nearest => upsample(&h, 2, UpsampleMode::Nearest),
            UpsampleKind::TransposedConv => {
                conv_transpose3d(&h, stage.up_weight.as_ref().expect("transposed stage has weights"), 2)
            }
        }
    }

    /// Probability maps at all scales for `x [N, 1, D, H, W]`.
    pub fn forward_multiscale(&mut self, x: &Tensor, training: bool) -> Result<MultiScalePrediction> {
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != self.patch {
            return Err(Error::shape(
                "forward_multiscale",
                format!("expected [N, 1, {}, {}, {}], got {shape:?}", self.patch[0], self.patch[1], self.patch[2]),
            ));
        }
        let n = shape[0];
        let depth = self.cfg.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for blocks in self.encoder.iter_mut() {
            for b in blocks.iter_mut() {
                h = b.forward(&h, training)?;
            }
            skips.push(h.clone());
        }
        let mut probs = vec![None; depth];
        for level in (0..depth).rev() {
            if level + 1 < depth {
                let up = self.upsample_stage(level, &h, training)?;
                h = add(&up, &skips[level])?;
            }
            for b in self.decoder[level].iter_mut() {
                h = b.forward(&h, training)?;
            }
            let head = &self.heads[level];
            let mut logits = conv3d(&h, &head.weight, &head.bias, 1, 0)?;
            if level > 0 {
                logits = upsample(&logits, 1 << level, UpsampleMode::Trilinear)?;
            }
            let p = sigmoid(&logits);
            probs[level] = Some(reshape(&p, &[n, self.patch[0], self.patch[1], self.patch[2]])?);
        }
        Ok(MultiScalePrediction {
            model_index: self.cfg.model_index,
            probs: probs.into_iter().map(|p| p.expect("every level produced a head")).collect(),
        })
    }
}

/// Three sub-models evaluated on the same input.
pub struct Ensemble {
    pub models: Vec<SubModel>,
}

impl Ensemble {
    pub fn build(cfg: &EnsembleConfig) -> Result<Self> {
        Self::build_with_seeds(&cfg.models, cfg.patch, cfg.model_seeds())
    }

    pub fn build_with_seeds(
        cfgs: &[SubModelConfig; NUM_MODELS],
        patch: [usize; 3],
        seeds: [u64; NUM_MODELS],
    ) -> Result<Self> {
        let mut models = cfgs
            .iter()
            .zip(seeds)
            .map(|(c, s)| build_submodel(c, patch, s))
            .collect::<Result<Vec<_>>>()?;
        models.sort_by_key(|m| m.cfg.model_index);
        let indices: Vec<usize> = models.iter().map(|m| m.cfg.model_index).collect();
        if indices != [1, 2, 3] {
            return Err(Error::Config(format!("model indices must be 1, 2, 3; got {indices:?}")));
        }
        Ok(Self { models })
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.models.iter().flat_map(|m| m.parameters().iter().cloned()).collect()
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Vec<MultiScalePrediction>> {
        ensemble_forward(&mut self.models, x, training)
    }
}

/// Forward pass of every model in `model_index` order.
pub fn ensemble_forward(models: &mut [SubModel], x: &Tensor, training: bool) -> Result<Vec<MultiScalePrediction>> {
    models.iter_mut().map(|m| m.forward_multiscale(x, training)).collect()
}
