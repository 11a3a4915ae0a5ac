//! Feature-extraction backbones with a sequential, tappable layer registry.
//!
//! Every block output is a "layer", numbered from 1 through the whole
//! network. Necks and heads pick their skip connections by these indices, so
//! the registry is computed from the `BackboneSpec` alone, before any parameter exists.
//!
//! Three families are provided:
//!
//! * [`BackboneKind::NextvitS`]: a three-layer convolutional stem followed by
//!   four stages of Next Convolution Blocks (NCB) interleaved with Next
//!   Transformer Blocks (NTB). With the default depths `(3, 4, 10, 3)` the
//!   layout is: stem 1-3, S1 = NCB 4-6, S2 = NCB 7-9 + NTB 10,
//!   S3 = NCB 11-14, NTB 15, NCB 16-19, NTB 20, S4 = NCB 21-22 + NTB 23.
//! * [`BackboneKind::CspDarknet`]: stem, then per stage a stride-2
//!   convolution and a C2f block; layers 4 and 6 sit at strides 8 and 16.
//! * [`BackboneKind::Hgnetv2`]: stem, then per stage a stride-2 convolution
//!   and a run of HG blocks.

mod nextvit;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{make_divisible, Params};

pub use nextvit::{Ncb, Ntb};

/// Stride of the deepest backbone output and the divisibility required of inputs.
pub const MAX_STRIDE: usize = 32;

/// A (batch, channels, height, width) activation and its stride relative to
/// the input image.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Self {
        Self { data, stride }
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    /// (height, width)
    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[2], d[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackboneKind {
    NextvitS,
    CspDarknet,
    Hgnetv2,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::NextvitS => "Next-ViT-S",
            BackboneKind::CspDarknet => "CSP-DarkNet53",
            BackboneKind::Hgnetv2 => "HGNetV2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Stem,
    S1,
    S2,
    S3,
    S4,
}

impl Stage {
    const MAIN: [Stage; 4] = [Stage::S1, Stage::S2, Stage::S3, Stage::S4];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BlockKind {
    Conv,
    Ncb,
    Ntb,
}

/// One entry of the sequential layer registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTap {
    pub index: usize,
    pub stage: Stage,
    pub block_kind: BlockKind,
    pub stride: usize,
    pub channels: usize,
}

/// Declarative description of a backbone.
///
/// When deserialized, omitted fields take the defaults of the named `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PartialSpec")]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Nominal widths of S1..S4 before `width_scale` is applied.
    pub stage_channels: [usize; 4],
    /// Blocks per stage (bottlenecks per C2f for CSP-DarkNet).
    pub stage_depths: [usize; 4],
    pub width_scale: f64,
    pub stem_stride: usize,
    /// Per-head width of NTB attention; the head count is derived per stage.
    pub attention_head_dim: usize,
    /// Hidden expansion of the NCB/NTB pointwise MLPs.
    pub mlp_ratio: f64,
    /// Every n-th block of a stage is an NTB (0 = none). Next-ViT only.
    pub ntb_period: [usize; 4],
}

#[derive(Deserialize)]
struct PartialSpec {
    #[serde(default = "default_kind")]
    kind: BackboneKind,
    stage_channels: Option<[usize; 4]>,
    stage_depths: Option<[usize; 4]>,
    width_scale: Option<f64>,
    stem_stride: Option<usize>,
    attention_head_dim: Option<usize>,
    mlp_ratio: Option<f64>,
    ntb_period: Option<[usize; 4]>,
}

fn default_kind() -> BackboneKind {
    BackboneKind::NextvitS
}

impl From<PartialSpec> for BackboneSpec {
    fn from(p: PartialSpec) -> Self {
        let d = BackboneSpec::new(p.kind);
        Self {
            kind: p.kind,
            stage_channels: p.stage_channels.unwrap_or(d.stage_channels),
            stage_depths: p.stage_depths.unwrap_or(d.stage_depths),
            width_scale: p.width_scale.unwrap_or(d.width_scale),
            stem_stride: p.stem_stride.unwrap_or(d.stem_stride),
            attention_head_dim: p.attention_head_dim.unwrap_or(d.attention_head_dim),
            mlp_ratio: p.mlp_ratio.unwrap_or(d.mlp_ratio),
            ntb_period: p.ntb_period.unwrap_or(d.ntb_period),
        }
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::new(BackboneKind::NextvitS)
    }
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind) -> Self {
        let stage_depths = match kind {
            BackboneKind::NextvitS => [3, 4, 10, 3],
            BackboneKind::CspDarknet => [1, 2, 2, 1],
            BackboneKind::Hgnetv2 => [1, 1, 3, 1],
        };
        Self {
            kind,
            stage_channels: [64, 128, 256, 512],
            stage_depths,
            width_scale: 1.0,
            stem_stride: 4,
            attention_head_dim: 32,
            mlp_ratio: 3.0,
            ntb_period: [0, 4, 5, 3],
        }
    }

    pub fn with_width(mut self, width_scale: f64) -> Self {
        self.width_scale = width_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(Error::Config(format!(
                "stage_channels must be positive, got {:?}",
                self.stage_channels
            )));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::Config(format!(
                "stage_depths must be positive, got {:?}",
                self.stage_depths
            )));
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(Error::Config(format!(
                "width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        if self.stem_stride != 4 {
            return Err(Error::Config(format!(
                "stem_stride must be 4 so that S2/S3/S4 land on strides 8/16/32, got {}",
                self.stem_stride
            )));
        }
        if self.attention_head_dim == 0 || !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(
                "attention_head_dim and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Channel width of a stage after `width_scale`.
    pub fn scaled(&self, nominal: usize) -> usize {
        make_divisible(nominal as f64 * self.width_scale, 8)
    }

    /// Width of an NTB in a stage of width `c`: a 4/3 widening, as in Next-ViT.
    pub fn ntb_channels(&self, c: usize) -> usize {
        make_divisible(c as f64 * 4.0 / 3.0, 8)
    }

    pub(crate) fn attention_heads(&self, channels: usize) -> usize {
        let mut heads = (channels / self.attention_head_dim).max(1);
        while channels % heads != 0 {
            heads -= 1;
        }
        heads
    }
}

/// What a registry slot computes; the registry and the module tree are both
/// derived from this plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum LayerOp {
    /// Single 3x3 convolution (Next-ViT stem).
    StemConv {
        stride: usize,
    },
    /// Two stride-2 3x3 convolutions (CSP-DarkNet / HGNetV2 stem).
    StemPair {
        mid: usize,
    },
    Ncb {
        stride: usize,
    },
    Ntb {
        stride: usize,
    },
    DownConv,
    C2f {
        n: usize,
    },
    Hg {
        mid: usize,
    },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerPlan {
    pub tap: LayerTap,
    pub in_channels: usize,
    pub op: LayerOp,
}

fn plan_layers(spec: &BackboneSpec) -> Result<Vec<LayerPlan>> {
    spec.validate()?;
    let mut plan: Vec<LayerPlan> = Vec::new();
    let mut push = |stage: Stage, kind: BlockKind, stride: usize, c_in: usize, c_out: usize, op| {
        plan.push(LayerPlan {
            tap: LayerTap {
                index: plan.len() + 1,
                stage,
                block_kind: kind,
                stride,
                channels: c_out,
            },
            in_channels: c_in,
            op,
        });
    };
    let widths: Vec<usize> = spec.stage_channels.iter().map(|&c| spec.scaled(c)).collect();
    let stem_out = widths[0];
    let stem_mid = spec.scaled(spec.stage_channels[0] / 2);
    match spec.kind {
        BackboneKind::NextvitS => {
            push(
                Stage::Stem,
                BlockKind::Conv,
                2,
                3,
                stem_mid,
                LayerOp::StemConv { stride: 2 },
            );
            push(
                Stage::Stem,
                BlockKind::Conv,
                2,
                stem_mid,
                stem_mid,
                LayerOp::StemConv { stride: 1 },
            );
            push(
                Stage::Stem,
                BlockKind::Conv,
                4,
                stem_mid,
                stem_out,
                LayerOp::StemConv { stride: 2 },
            );
            let mut c_prev = stem_out;
            let mut stride = 4;
            for (si, stage) in Stage::MAIN.into_iter().enumerate() {
                let c = widths[si];
                let c_ntb = spec.ntb_channels(c);
                let period = spec.ntb_period[si];
                for j in 0..spec.stage_depths[si] {
                    let s = if j == 0 && si > 0 { 2 } else { 1 };
                    stride *= s;
                    let is_ntb = period > 0 && (j + 1) % period == 0;
                    if is_ntb {
                        push(stage, BlockKind::Ntb, stride, c_prev, c_ntb, LayerOp::Ntb { stride: s });
                        c_prev = c_ntb;
                    } else {
                        push(stage, BlockKind::Ncb, stride, c_prev, c, LayerOp::Ncb { stride: s });
                        c_prev = c;
                    }
                }
            }
        }
        BackboneKind::CspDarknet => {
            push(
                Stage::Stem,
                BlockKind::Conv,
                4,
                3,
                stem_out,
                LayerOp::StemPair { mid: stem_mid },
            );
            push(
                Stage::S1,
                BlockKind::Conv,
                4,
                stem_out,
                widths[0],
                LayerOp::C2f {
                    n: spec.stage_depths[0],
                },
            );
            let mut stride = 4;
            for si in 1..4 {
                stride *= 2;
                let stage = Stage::MAIN[si];
                push(
                    stage,
                    BlockKind::Conv,
                    stride,
                    widths[si - 1],
                    widths[si],
                    LayerOp::DownConv,
                );
                push(
                    stage,
                    BlockKind::Conv,
                    stride,
                    widths[si],
                    widths[si],
                    LayerOp::C2f {
                        n: spec.stage_depths[si],
                    },
                );
            }
        }
        BackboneKind::Hgnetv2 => {
            push(
                Stage::Stem,
                BlockKind::Conv,
                4,
                3,
                stem_out,
                LayerOp::StemPair { mid: stem_mid },
            );
            let mut c_prev = stem_out;
            let mut stride = 4;
            for si in 0..4 {
                let stage = Stage::MAIN[si];
                if si > 0 {
                    stride *= 2;
                    push(stage, BlockKind::Conv, stride, c_prev, c_prev, LayerOp::DownConv);
                }
                let c = widths[si];
                for _ in 0..spec.stage_depths[si] {
                    push(
                        stage,
                        BlockKind::Conv,
                        stride,
                        c_prev,
                        c,
                        LayerOp::Hg { mid: (c / 2).max(8) },
                    );
                    c_prev = c;
                }
            }
        }
    }
    Ok(plan)
}

/// The layer registry for a spec, without building any parameters.
pub fn layer_registry(spec: &BackboneSpec) -> Result<Vec<LayerTap>> {
    Ok(plan_layers(spec)?.into_iter().map(|p| p.tap).collect())
}

enum Layer {
    Conv(crate::nn::ConvNormAct),
    StemPair(crate::nn::ConvNormAct, crate::nn::ConvNormAct),
    Ncb(Ncb),
    Ntb(Ntb),
    C2f(crate::blocks::C2f),
    Hg(crate::blocks::HgBlock),
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::StemPair(a, b) => b.forward(&a.forward(x)?),
            Layer::Ncb(b) => b.forward(x),
            Layer::Ntb(b) => b.forward(x),
            Layer::C2f(b) => b.forward(x),
            Layer::Hg(b) => b.forward(x),
        }
    }
}

/// Tapped features plus the final (stride 32) output of one forward pass.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub taps: BTreeMap<usize, FeatureMap>,
    pub last: FeatureMap,
}

pub struct Backbone {
    spec: BackboneSpec,
    registry: Vec<LayerTap>,
    layers: Vec<Layer>,
}

impl Backbone {
    /// Build the backbone under `p` (parameters are named `layers.<index>.*`).
    pub fn new(spec: &BackboneSpec, p: &Params) -> Result<Self> {
        let plan = plan_layers(spec)?;
        let mut layers = Vec::with_capacity(plan.len());
        for lp in &plan {
            let lpp = p.pp(format!("layers.{}", lp.tap.index));
            let (c_in, c_out) = (lp.in_channels, lp.tap.channels);
            let layer = match lp.op {
                LayerOp::StemConv { stride } => Layer::Conv(crate::nn::ConvNormAct::new(&lpp, c_in, c_out, 3, stride)?),
                LayerOp::StemPair { mid } => Layer::StemPair(
                    crate::nn::ConvNormAct::new(&lpp.pp("0"), c_in, mid, 3, 2)?,
                    crate::nn::ConvNormAct::new(&lpp.pp("1"), mid, c_out, 3, 2)?,
                ),
                LayerOp::DownConv => Layer::Conv(crate::nn::ConvNormAct::new(&lpp, c_in, c_out, 3, 2)?),
                LayerOp::Ncb { stride } => Layer::Ncb(Ncb::new(&lpp, c_in, c_out, stride, spec.mlp_ratio)?),
                LayerOp::Ntb { stride } => Layer::Ntb(Ntb::new(
                    &lpp,
                    c_in,
                    c_out,
                    stride,
                    spec.attention_heads(c_out),
                    spec.mlp_ratio,
                )?),
                LayerOp::C2f { n } => Layer::C2f(crate::blocks::C2f::new(&lpp, c_in, c_out, n, true)?),
                LayerOp::Hg { mid } => Layer::Hg(crate::blocks::HgBlock::new(&lpp, c_in, mid, c_out, 3)?),
            };
            layers.push(layer);
        }
        Ok(Self {
            spec: spec.clone(),
            registry: plan.into_iter().map(|p| p.tap).collect(),
            layers,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn registry(&self) -> &[LayerTap] {
        &self.registry
    }

    pub fn tap(&self, index: usize) -> Option<&LayerTap> {
        index.checked_sub(1).and_then(|i| self.registry.get(i))
    }

    /// Channels of the final stage output.
    pub fn out_channels(&self) -> usize {
        self.registry.last().map(|t| t.channels).unwrap_or(0)
    }

    /// Run the backbone on `images` (B, 3, H, W), returning the requested taps.
    pub fn forward(&self, images: &Tensor, taps: &[usize]) -> Result<BackboneOutput> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Input(format!("expected 3 input channels, got {c}")));
        }
        if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(Error::Input(format!(
                "input size {h}x{w} is not divisible by {MAX_STRIDE}"
            )));
        }
        for &t in taps {
            if self.tap(t).is_none() {
                return Err(Error::Input(format!(
                    "tap {t} outside the registry (1..={})",
                    self.registry.len()
                )));
            }
        }
        let mut out = BTreeMap::new();
        let mut x = images.clone();
        for (layer, tap) in self.layers.iter().zip(&self.registry) {
            x = layer.forward(&x)?;
            if taps.contains(&tap.index) {
                out.insert(tap.index, FeatureMap::new(x.clone(), tap.stride));
            }
        }
        let last_stride = self.registry.last().map(|t| t.stride).unwrap_or(MAX_STRIDE);
        Ok(BackboneOutput {
            taps: out,
            last: FeatureMap::new(x, last_stride),
        })
    }
}

/// Build a standalone backbone with its own parameter store.
pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<(Backbone, candle_nn::VarMap)> {
    let varmap = candle_nn::VarMap::new();
    let p = Params::new(&varmap, DType::F32, &Device::Cpu, seed);
    let backbone = Backbone::new(spec, &p)?;
    Ok((backbone, varmap))
}

/// Outcome of [`import_backbone_weights`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub loaded: usize,
    /// Checkpoint keys with no counterpart in the model.
    pub unused: Vec<String>,
    /// Keys present on both sides with different shapes.
    pub mismatched: Vec<String>,
}

/// Copy backbone weights from a flat safetensors archive into `varmap`.
///
/// Checkpoint keys are `layers.<index>.<param path>` (optionally under a
/// `backbone.` prefix) and map onto the model's `<prefix>.layers.<index>.*`.
pub fn import_backbone_weights(varmap: &candle_nn::VarMap, path: &Path, prefix: &str) -> Result<ImportReport> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    let data = varmap.data().lock().expect("parameter store poisoned");
    let mut report = ImportReport::default();
    let mut keys: Vec<_> = tensors.keys().cloned().collect();
    keys.sort();
    for key in keys {
        let local = key.strip_prefix("backbone.").unwrap_or(&key);
        let target = if prefix.is_empty() {
            local.to_string()
        } else {
            format!("{prefix}.{local}")
        };
        match data.get(&target) {
            Some(var) => {
                let src = &tensors[&key];
                if src.dims() != var.dims() {
                    report.mismatched.push(key.clone());
                    continue;
                }
                var.set(&src.to_dtype(var.dtype())?)?;
                report.loaded += 1;
            }
            None => report.unused.push(key.clone()),
        }
    }
    Ok(report)
}
