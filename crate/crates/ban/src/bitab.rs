//! The trainable bi-temporal adapter branch.
//!
//! A lightweight convolutional stage stack behind the model-agnostic
//! pre / stage / head interface. Stage j is two conv(3x3) + channel-LN +
//! ReLU blocks (stride on the first) plus a strided 1x1 projection skip;
//! the stem consumes stage 1's channels and stride, and stage 1 then runs
//! at stride 1. Heads project each stage to a common width with 1x1
//! convolutions, upsample to the finest stage grid, concatenate, fuse with
//! a 1x1 convolution, and emit logits at label resolution.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Param, ParamGroup, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::ops;
use crate::raster::Raster;

/// Which prediction head(s) the branch carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    BinaryChange,
    Scd,
}

/// Architecture of the adapter branch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BiTabSpec {
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub head_kind: HeadKind,
    #[serde(default)]
    pub num_semantic_classes: usize,
    #[serde(default = "default_head_width")]
    pub head_width: usize,
}

fn default_head_width() -> usize {
    64
}

impl BiTabSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::config("bitab needs at least one stage"));
        }
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::config(format!(
                "stage_channels ({}) and stage_strides ({}) disagree",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0)
            || self.stage_strides.iter().any(|&s| s == 0)
        {
            return Err(Error::config("stage channels and strides must be >= 1"));
        }
        if self.head_kind == HeadKind::Scd && self.num_semantic_classes < 2 {
            return Err(Error::config(
                "scd head needs num_semantic_classes >= 2",
            ));
        }
        if self.head_width == 0 {
            return Err(Error::config("head_width must be >= 1"));
        }
        Ok(())
    }

    /// Number of stages J (= bridging modules = encoder taps).
    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Input channels of stage j (1-based).
    pub fn stage_in_channels(&self, j: usize) -> usize {
        if j <= 1 {
            self.stage_channels[0]
        } else {
            self.stage_channels[j - 2]
        }
    }

    pub fn stage_out_channels(&self, j: usize) -> usize {
        self.stage_channels[j - 1]
    }

    /// Spatial stride of stage j; stage 1's configured stride is consumed
    /// by the stem, so stage 1 itself runs at stride 1.
    pub fn stage_stride(&self, j: usize) -> usize {
        if j <= 1 {
            1
        } else {
            self.stage_strides[j - 1]
        }
    }
}

/// A spatial feature map [C, H, W] between stages.
#[derive(Debug, Clone)]
pub struct StageFeature {
    pub map: Tensor,
    pub stage_index: usize,
}

impl StageFeature {
    pub fn channels(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[2]
    }
}

/// Head outputs at label resolution.
#[derive(Debug, Clone)]
pub struct ChangeLogits {
    /// Binary change logits [2, H, W].
    pub change: Tensor,
    /// Per-phase semantic logits ([K, H, W] each), SCD only.
    pub semantic: Option<(Tensor, Tensor)>,
}

/// conv + channel-LN parameters; ReLU is applied by the forward helpers.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

impl ConvBlock {
    fn init(rng: &mut ChaCha12Rng, out_c: usize, in_c: usize, k: usize) -> ConvBlock {
        let fan_in = in_c * k * k;
        let s = (1.0 / fan_in as f32).sqrt();
        ConvBlock {
            weight: Tensor::var(ArrayD::from_shape_fn(
                IxDyn(&[out_c, in_c, k, k]),
                |_| rng.random_range(-s..s),
            )),
            bias: Tensor::var(ArrayD::zeros(IxDyn(&[out_c]))),
            norm_gain: Tensor::var(ArrayD::ones(IxDyn(&[out_c]))),
            norm_bias: Tensor::var(ArrayD::zeros(IxDyn(&[out_c]))),
        }
    }

    fn collect(&self, prefix: &str, group: ParamGroup, set: &mut ParamSet) {
        set.push(Param::new(format!("{prefix}.conv.weight"), group, self.weight.clone()));
        set.push(Param::new(format!("{prefix}.conv.bias"), group, self.bias.clone()));
        set.push(Param::new(format!("{prefix}.norm.weight"), group, self.norm_gain.clone()));
        set.push(Param::new(format!("{prefix}.norm.bias"), group, self.norm_bias.clone()));
    }
}

/// Channelwise layer norm of a [C, H, W] map (normalizes over C at every
/// spatial position).
pub(crate) fn channel_layer_norm(map: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let shape = map.shape();
    let (h, w) = (shape[1], shape[2]);
    let tokens = ops::map_to_tokens(map);
    let normed = ops::layer_norm(&tokens, gain, bias);
    ops::tokens_to_map(&normed, h, w)
}

fn block_forward(block: &ConvBlock, x: &Tensor, stride: usize, pad: usize) -> Tensor {
    let conv = ops::conv2d(x, &block.weight, &block.bias, stride, pad);
    let normed = channel_layer_norm(&conv, &block.norm_gain, &block.norm_bias);
    ops::relu(&normed)
}

/// One stage: two conv blocks plus a strided 1x1 projection skip.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub block1: ConvBlock,
    pub block2: ConvBlock,
    pub skip_weight: Tensor,
    pub skip_bias: Tensor,
}

impl StageParams {
    fn init(rng: &mut ChaCha12Rng, in_c: usize, out_c: usize) -> StageParams {
        let s = (1.0 / in_c as f32).sqrt();
        StageParams {
            block1: ConvBlock::init(rng, out_c, in_c, 3),
            block2: ConvBlock::init(rng, out_c, out_c, 3),
            skip_weight: Tensor::var(ArrayD::from_shape_fn(
                IxDyn(&[out_c, in_c, 1, 1]),
                |_| rng.random_range(-s..s),
            )),
            skip_bias: Tensor::var(ArrayD::zeros(IxDyn(&[out_c]))),
        }
    }

    fn collect(&self, prefix: &str, set: &mut ParamSet) {
        self.block1.collect(&format!("{prefix}.block1"), ParamGroup::Backbone, set);
        self.block2.collect(&format!("{prefix}.block2"), ParamGroup::Backbone, set);
        set.push(Param::new(
            format!("{prefix}.skip.weight"),
            ParamGroup::Backbone,
            self.skip_weight.clone(),
        ));
        set.push(Param::new(
            format!("{prefix}.skip.bias"),
            ParamGroup::Backbone,
            self.skip_bias.clone(),
        ));
    }
}

/// Multi-scale prediction head: per-stage 1x1 projections, upsample to the
/// finest stage grid, concatenate, 1x1 fuse + LN + ReLU, 1x1 to logits.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub proj_w: Vec<Tensor>,
    pub proj_b: Vec<Tensor>,
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl HeadParams {
    fn init(rng: &mut ChaCha12Rng, spec: &BiTabSpec, num_out: usize) -> HeadParams {
        let width = spec.head_width;
        let j = spec.num_stages();
        let mut proj_w = Vec::with_capacity(j);
        let mut proj_b = Vec::with_capacity(j);
        for c in &spec.stage_channels {
            let s = (1.0 / *c as f32).sqrt();
            proj_w.push(Tensor::var(ArrayD::from_shape_fn(
                IxDyn(&[width, *c, 1, 1]),
                |_| rng.random_range(-s..s),
            )));
            proj_b.push(Tensor::var(ArrayD::zeros(IxDyn(&[width]))));
        }
        let s_fuse = (1.0 / (j * width) as f32).sqrt();
        let s_out = (1.0 / width as f32).sqrt();
        HeadParams {
            proj_w,
            proj_b,
            fuse_w: Tensor::var(ArrayD::from_shape_fn(
                IxDyn(&[width, j * width, 1, 1]),
                |_| rng.random_range(-s_fuse..s_fuse),
            )),
            fuse_b: Tensor::var(ArrayD::zeros(IxDyn(&[width]))),
            norm_gain: Tensor::var(ArrayD::ones(IxDyn(&[width]))),
            norm_bias: Tensor::var(ArrayD::zeros(IxDyn(&[width]))),
            out_w: Tensor::var(ArrayD::from_shape_fn(
                IxDyn(&[num_out, width, 1, 1]),
                |_| rng.random_range(-s_out..s_out),
            )),
            out_b: Tensor::var(ArrayD::zeros(IxDyn(&[num_out]))),
        }
    }

    fn collect(&self, prefix: &str, set: &mut ParamSet) {
        for (j, (w, b)) in self.proj_w.iter().zip(&self.proj_b).enumerate() {
            set.push(Param::new(
                format!("{prefix}.proj{j}.weight"),
                ParamGroup::Head,
                w.clone(),
            ));
            set.push(Param::new(
                format!("{prefix}.proj{j}.bias"),
                ParamGroup::Head,
                b.clone(),
            ));
        }
        set.push(Param::new(format!("{prefix}.fuse.weight"), ParamGroup::Head, self.fuse_w.clone()));
        set.push(Param::new(format!("{prefix}.fuse.bias"), ParamGroup::Head, self.fuse_b.clone()));
        set.push(Param::new(format!("{prefix}.norm.weight"), ParamGroup::Head, self.norm_gain.clone()));
        set.push(Param::new(format!("{prefix}.norm.bias"), ParamGroup::Head, self.norm_bias.clone()));
        set.push(Param::new(format!("{prefix}.out.weight"), ParamGroup::Head, self.out_w.clone()));
        set.push(Param::new(format!("{prefix}.out.bias"), ParamGroup::Head, self.out_b.clone()));
    }

    /// Run the head over per-stage inputs (already per-stage feature maps).
    fn forward(&self, inputs: &[Tensor], out_hw: (usize, usize)) -> Tensor {
        let target_h = inputs[0].shape()[1];
        let target_w = inputs[0].shape()[2];
        let mut lifted = Vec::with_capacity(inputs.len());
        for (j, x) in inputs.iter().enumerate() {
            let p = ops::conv2d(x, &self.proj_w[j], &self.proj_b[j], 1, 0);
            lifted.push(ops::resize_bilinear(&p, target_h, target_w));
        }
        let cat = ops::concat_channels(&lifted);
        let fused = ops::conv2d(&cat, &self.fuse_w, &self.fuse_b, 1, 0);
        let normed = channel_layer_norm(&fused, &self.norm_gain, &self.norm_bias);
        let act = ops::relu(&normed);
        let logits = ops::conv2d(&act, &self.out_w, &self.out_b, 1, 0);
        ops::resize_bilinear(&logits, out_hw.0, out_hw.1)
    }
}

/// All trainable parameters of the branch.
#[derive(Debug, Clone)]
pub struct BiTabParams {
    pub stem: ConvBlock,
    pub stages: Vec<StageParams>,
    pub change_head: HeadParams,
    pub sem_heads: Option<(HeadParams, HeadParams)>,
}

impl BiTabParams {
    pub fn init(spec: &BiTabSpec, seed: u64) -> Result<BiTabParams> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let stem_k = 2 * spec.stage_strides[0] - 1;
        let stem = ConvBlock::init(&mut rng, spec.stage_channels[0], 3, stem_k);
        let stages = (1..=spec.num_stages())
            .map(|j| {
                StageParams::init(
                    &mut rng,
                    spec.stage_in_channels(j),
                    spec.stage_out_channels(j),
                )
            })
            .collect();
        let change_head = HeadParams::init(&mut rng, spec, 2);
        let sem_heads = (spec.head_kind == HeadKind::Scd).then(|| {
            let k = spec.num_semantic_classes;
            (
                HeadParams::init(&mut rng, spec, k),
                HeadParams::init(&mut rng, spec, k),
            )
        });
        Ok(BiTabParams {
            stem,
            stages,
            change_head,
            sem_heads,
        })
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.stem.collect("bitab.stem", ParamGroup::Backbone, set);
        for (j, stage) in self.stages.iter().enumerate() {
            stage.collect(&format!("bitab.stage{}", j + 1), set);
        }
        self.change_head.collect("head.change", set);
        if let Some((h1, h2)) = &self.sem_heads {
            h1.collect("head.sem_t1", set);
            h2.collect("head.sem_t2", set);
        }
    }

    pub fn param_set(&self) -> ParamSet {
        let mut set = ParamSet::default();
        self.collect(&mut set);
        set
    }
}

/// Convert a raster to a constant input tensor.
pub fn image_tensor(image: &Raster) -> Tensor {
    Tensor::constant(image.data.clone().into_dyn())
}

/// Stem convolution producing the stage-0 feature at the first stage's
/// channel width and stride.
pub fn bitab_pre(image: &Tensor, spec: &BiTabSpec, params: &BiTabParams) -> Result<StageFeature> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(format!(
            "bitab_pre expects a [3, H, W] input, got {shape:?}"
        )));
    }
    let s = spec.stage_strides[0];
    let map = block_forward(&params.stem, image, s, s - 1);
    Ok(StageFeature {
        map,
        stage_index: 0,
    })
}

/// Stage j (1-based). Consumes the feature with stage_index j-1.
pub fn bitab_stage(
    x: &StageFeature,
    j: usize,
    spec: &BiTabSpec,
    params: &BiTabParams,
) -> Result<StageFeature> {
    if j == 0 || j > spec.num_stages() {
        return Err(Error::config(format!(
            "stage index {j} out of range 1..={}",
            spec.num_stages()
        )));
    }
    if x.stage_index != j - 1 {
        return Err(Error::shape(format!(
            "stage {j} expects input with stage_index {}, got {}",
            j - 1,
            x.stage_index
        )));
    }
    if x.channels() != spec.stage_in_channels(j) {
        return Err(Error::shape(format!(
            "stage {j} expects {} input channels, got {}",
            spec.stage_in_channels(j),
            x.channels()
        )));
    }
    let stage = &params.stages[j - 1];
    let stride = spec.stage_stride(j);
    let b1 = block_forward(&stage.block1, &x.map, stride, 1);
    let b2 = block_forward(&stage.block2, &b1, 1, 1);
    let skip = ops::conv2d(&x.map, &stage.skip_weight, &stage.skip_bias, stride, 0);
    Ok(StageFeature {
        map: ops::add(&b2, &skip),
        stage_index: j,
    })
}

fn check_siamese(f1: &[StageFeature], f2: &[StageFeature], spec: &BiTabSpec) -> Result<()> {
    if f1.len() != f2.len() {
        return Err(Error::shape(format!(
            "phase feature lists differ in length: {} vs {}",
            f1.len(),
            f2.len()
        )));
    }
    if f1.len() != spec.num_stages() {
        return Err(Error::shape(format!(
            "head expects {} stage features, got {}",
            spec.num_stages(),
            f1.len()
        )));
    }
    for (a, b) in f1.iter().zip(f2.iter()) {
        if a.map.shape() != b.map.shape() {
            return Err(Error::shape(format!(
                "phase features disagree in shape: {:?} vs {:?}",
                a.map.shape(),
                b.map.shape()
            )));
        }
    }
    Ok(())
}

/// Binary change head over per-stage |f1 - f2| difference maps.
pub fn change_head(
    f1: &[StageFeature],
    f2: &[StageFeature],
    spec: &BiTabSpec,
    params: &BiTabParams,
    out_hw: (usize, usize),
) -> Result<Tensor> {
    check_siamese(f1, f2, spec)?;
    let diffs: Vec<Tensor> = f1
        .iter()
        .zip(f2.iter())
        .map(|(a, b)| ops::abs(&ops::sub(&a.map, &b.map)))
        .collect();
    Ok(params.change_head.forward(&diffs, out_hw))
}

/// SCD head set: the binary change head plus one segmentation head per
/// temporal phase, each consuming only its own phase's features.
pub fn scd_heads(
    f1: &[StageFeature],
    f2: &[StageFeature],
    spec: &BiTabSpec,
    params: &BiTabParams,
    out_hw: (usize, usize),
) -> Result<ChangeLogits> {
    if spec.head_kind != HeadKind::Scd {
        return Err(Error::config("scd_heads called on a binary_change spec"));
    }
    let change = change_head(f1, f2, spec, params, out_hw)?;
    let (h1, h2) = params
        .sem_heads
        .as_ref()
        .ok_or_else(|| Error::config("scd spec without semantic heads"))?;
    let maps1: Vec<Tensor> = f1.iter().map(|f| f.map.clone()).collect();
    let maps2: Vec<Tensor> = f2.iter().map(|f| f.map.clone()).collect();
    Ok(ChangeLogits {
        change,
        semantic: Some((h1.forward(&maps1, out_hw), h2.forward(&maps2, out_hw))),
    })
}

/// Run one phase through stem and all stages, returning every stage output.
pub fn backbone_forward(
    image: &Tensor,
    spec: &BiTabSpec,
    params: &BiTabParams,
) -> Result<Vec<StageFeature>> {
    let mut features = Vec::with_capacity(spec.num_stages());
    let mut x = bitab_pre(image, spec, params)?;
    for j in 1..=spec.num_stages() {
        x = bitab_stage(&x, j, spec, params)?;
        features.push(x.clone());
    }
    Ok(features)
}

/// The plain branch without bridging: Head(Backbone(x1), Backbone(x2)).
pub fn bitab_forward(
    x1: &Tensor,
    x2: &Tensor,
    spec: &BiTabSpec,
    params: &BiTabParams,
    out_hw: (usize, usize),
) -> Result<ChangeLogits> {
    let f1 = backbone_forward(x1, spec, params)?;
    let f2 = backbone_forward(x2, spec, params)?;
    match spec.head_kind {
        HeadKind::BinaryChange => Ok(ChangeLogits {
            change: change_head(&f1, &f2, spec, params, out_hw)?,
            semantic: None,
        }),
        HeadKind::Scd => scd_heads(&f1, &f2, spec, params, out_hw),
    }
}
