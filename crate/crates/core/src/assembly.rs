//! Whole detectors `D(head, backbone)`: declarative config, skip-connection
//! validation from the layer registry alone, and a unified
//! forward / loss / predict interface over both head families.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::backbone::{layer_registry, Backbone, BackboneKind, BackboneSpec, BlockKind, Stage, MAX_STRIDE};
use crate::data::BoxAnnotation;
use crate::detect::{DecodeConfig, Detection};
use crate::error::{Error, Result};
use crate::nn::{parameter_count, Params};
use crate::rtdetr::{RtdetrConfig, RtdetrHead, RtdetrOutput};
use crate::yolo::{assign_targets, yolo_loss, NeckInputs, RawYoloPredictions, YoloConfig, YoloNeckHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HeadKind {
    Yolo,
    Rtdetr,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Yolo => "YOLOv8",
            HeadKind::Rtdetr => "RT-DETR",
        })
    }
}

/// Skip connection `C(x, y)`: backbone layers feeding the stride-8 and
/// stride-16 inputs of the neck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkipConfig {
    pub x: usize,
    pub y: usize,
}

impl SkipConfig {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    /// The connection used when a config does not name one.
    pub fn default_for(head: HeadKind, backbone: BackboneKind) -> Self {
        match (head, backbone) {
            (HeadKind::Yolo, BackboneKind::NextvitS) => Self::new(7, 17),
            (HeadKind::Rtdetr, BackboneKind::NextvitS) => Self::new(9, 19),
            (_, BackboneKind::CspDarknet) => Self::new(4, 6),
            (_, BackboneKind::Hgnetv2) => Self::new(4, 8),
        }
    }
}

impl fmt::Display for SkipConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C({}, {})", self.x, self.y)
    }
}

/// Everything needed to build one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub head: HeadKind,
    pub backbone: BackboneSpec,
    /// Falls back to [`SkipConfig::default_for`] when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<SkipConfig>,
    pub num_classes: usize,
    /// Square input side in pixels.
    pub image_size: usize,
    /// Nominal neck widths at strides 8/16/32 before the backbone width scale.
    pub neck_channels: [usize; 3],
    pub yolo: YoloConfig,
    pub rtdetr: RtdetrConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::new(HeadKind::Yolo, BackboneKind::NextvitS, 10, 640)
    }
}

impl DetectorConfig {
    /// Defaults for a head/backbone pair, including its default skip connection.
    pub fn new(head: HeadKind, backbone: BackboneKind, num_classes: usize, image_size: usize) -> Self {
        Self {
            head,
            backbone: BackboneSpec::new(backbone),
            skip: Some(SkipConfig::default_for(head, backbone)),
            num_classes,
            image_size,
            neck_channels: [128, 256, 512],
            yolo: YoloConfig::default(),
            rtdetr: RtdetrConfig::default(),
        }
    }

    pub fn with_width(mut self, width_scale: f64) -> Self {
        self.backbone.width_scale = width_scale;
        self
    }

    /// The skip connection in effect.
    pub fn skip(&self) -> SkipConfig {
        self.skip
            .unwrap_or_else(|| SkipConfig::default_for(self.head, self.backbone.kind))
    }

    /// `D(head, backbone)`.
    pub fn name(&self) -> String {
        format!("D({}, {})", self.head, self.backbone.kind)
    }

    /// Neck widths after the backbone width scale.
    pub fn scaled_neck_channels(&self) -> [usize; 3] {
        self.neck_channels.map(|c| self.backbone.scaled(c))
    }

    /// Static checks: backbone spec, skip connection, image size, head settings.
    pub fn validate(&self) -> Result<()> {
        let skip = self.skip();
        let report = validate_skip_config(&self.backbone, skip);
        if !report.passed {
            return Err(Error::Config(format!(
                "invalid skip connection {} for {}: {}",
                skip,
                self.backbone.kind,
                report.errors.join("; ")
            )));
        }
        if self.image_size == 0 || self.image_size % MAX_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a positive multiple of {MAX_STRIDE}",
                self.image_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.neck_channels.contains(&0) {
            return Err(Error::Config("neck_channels must be positive".into()));
        }
        match self.head {
            HeadKind::Yolo => self.yolo.validate(),
            HeadKind::Rtdetr => {
                self.rtdetr.validate()?;
                let cells: usize = [8, 16, 32].iter().map(|s| (self.image_size / s).pow(2)).sum();
                if self.rtdetr.num_queries > cells {
                    return Err(Error::Config(format!(
                        "{} queries exceed the {cells} feature cells of a {} input",
                        self.rtdetr.num_queries, self.image_size
                    )));
                }
                Ok(())
            }
        }
    }
}

/// What the registry says about one tapped layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapReport {
    /// "x" or "y".
    pub role: String,
    pub index: usize,
    pub expected_stride: usize,
    /// `None` when the index lies outside the registry.
    pub stride: Option<usize>,
    pub channels: Option<usize>,
    pub stage: Option<Stage>,
    pub block_kind: Option<BlockKind>,
}

/// Outcome of [`validate_skip_config`]. Failures are listed, not raised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub backbone: BackboneKind,
    pub skip: SkipConfig,
    pub taps: Vec<TapReport>,
    /// Channels of the final backbone stage (the third neck input).
    pub final_channels: Option<usize>,
    pub errors: Vec<String>,
    pub passed: bool,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} on {}", self.skip, self.backbone)?;
        for t in &self.taps {
            match (t.stride, t.channels, t.stage, t.block_kind) {
                (Some(s), Some(c), Some(stage), Some(kind)) => writeln!(
                    f,
                    "  {}: layer {:>2}  stage {stage:?}  block {kind:?}  stride {s:>2} (need {})  channels {c}",
                    t.role, t.index, t.expected_stride
                )?,
                _ => writeln!(f, "  {}: layer {:>2}  not in registry", t.role, t.index)?,
            }
        }
        if let Some(c) = self.final_channels {
            writeln!(f, "  final stage: stride 32  channels {c}")?;
        }
        for e in &self.errors {
            writeln!(f, "  error: {e}")?;
        }
        write!(f, "{}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Check `C(x, y)` against the neck contract using registry metadata only.
pub fn validate_skip_config(spec: &BackboneSpec, skip: SkipConfig) -> ValidationReport {
    let mut errors = Vec::new();
    let registry = match layer_registry(spec) {
        Ok(r) => r,
        Err(e) => {
            errors.push(format!("backbone spec invalid: {e}"));
            Vec::new()
        }
    };
    let mut taps = Vec::new();
    for (role, index, expected) in [("x", skip.x, 8), ("y", skip.y, 16)] {
        let tap = index.checked_sub(1).and_then(|i| registry.get(i));
        match tap {
            None => errors.push(format!(
                "{role} = layer {index} is outside the registry (1..={})",
                registry.len()
            )),
            Some(t) if t.stride != expected => errors.push(format!(
                "{role} = layer {index} has stride {}, the neck needs stride {expected}",
                t.stride
            )),
            Some(_) => {}
        }
        taps.push(TapReport {
            role: role.to_string(),
            index,
            expected_stride: expected,
            stride: tap.map(|t| t.stride),
            channels: tap.map(|t| t.channels),
            stage: tap.map(|t| t.stage),
            block_kind: tap.map(|t| t.block_kind),
        });
    }
    if skip.x >= skip.y {
        errors.push(format!("x = {} must precede y = {}", skip.x, skip.y));
    }
    let final_channels = registry.last().map(|t| t.channels);
    if registry.last().is_some_and(|t| t.stride != MAX_STRIDE) {
        errors.push("final backbone stage is not at stride 32".into());
    }
    ValidationReport {
        backbone: spec.kind,
        skip,
        taps,
        final_channels,
        passed: errors.is_empty(),
        errors,
    }
}

/// The four detectors compared in the reference experiments, at 640x640.
pub fn enumerate_reference_configs(num_classes: usize) -> Vec<DetectorConfig> {
    [
        (HeadKind::Yolo, BackboneKind::CspDarknet),
        (HeadKind::Yolo, BackboneKind::NextvitS),
        (HeadKind::Rtdetr, BackboneKind::Hgnetv2),
        (HeadKind::Rtdetr, BackboneKind::NextvitS),
    ]
    .into_iter()
    .map(|(h, b)| DetectorConfig::new(h, b, num_classes, 640))
    .collect()
}

enum HeadImpl {
    Yolo(YoloNeckHead),
    Rtdetr(RtdetrHead),
}

/// Raw network output of either head family.
#[derive(Debug, Clone)]
pub enum RawOutput {
    Yolo(RawYoloPredictions),
    Rtdetr(RtdetrOutput),
}

impl RawOutput {
    /// (height, width) of the three prediction or fused levels, strides 8/16/32.
    pub fn level_sizes(&self) -> Result<[(usize, usize); 3]> {
        match self {
            RawOutput::Yolo(r) => {
                let mut out = [(0, 0); 3];
                for (o, t) in out.iter_mut().zip(&r.cls) {
                    let (_, _, h, w) = t.dims4()?;
                    *o = (h, w);
                }
                Ok(out)
            }
            RawOutput::Rtdetr(r) => Ok(r.level_sizes),
        }
    }
}

/// Named, weighted loss terms and their sum.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub terms: Vec<(&'static str, Tensor)>,
    pub total: Tensor,
}

impl LossBreakdown {
    /// Term values plus `("total", ..)` as host scalars.
    pub fn values(&self) -> Result<Vec<(&'static str, f64)>> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let mut out = self
            .terms
            .iter()
            .map(|(n, t)| Ok((*n, v(t)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push(("total", v(&self.total)?));
        Ok(out)
    }
}

/// A built detector and the parameter store that owns its weights.
pub struct Detector {
    config: DetectorConfig,
    backbone: Backbone,
    head: HeadImpl,
    varmap: VarMap,
    device: Device,
    dtype: DType,
}

/// Build a detector with `f32` weights on `device`.
pub fn build_detector(config: &DetectorConfig, seed: u64, device: &Device) -> Result<Detector> {
    build_detector_with_dtype(config, seed, device, DType::F32)
}

pub fn build_detector_with_dtype(
    config: &DetectorConfig,
    seed: u64,
    device: &Device,
    dtype: DType,
) -> Result<Detector> {
    config.validate()?;
    let varmap = VarMap::new();
    let p = Params::new(&varmap, dtype, device, seed);
    let backbone = Backbone::new(&config.backbone, &p.pp("backbone"))?;
    let ch = |i: usize| -> Result<usize> {
        backbone
            .tap(i)
            .map(|t| t.channels)
            .ok_or_else(|| Error::Config(format!("layer {i} outside the registry")))
    };
    let inputs = NeckInputs {
        c3: ch(config.skip().x)?,
        c4: ch(config.skip().y)?,
        c5: backbone.out_channels(),
    };
    let head = match config.head {
        HeadKind::Yolo => HeadImpl::Yolo(YoloNeckHead::new(
            &p,
            inputs,
            config.scaled_neck_channels(),
            config.num_classes,
            config.image_size,
            &config.yolo,
        )?),
        HeadKind::Rtdetr => HeadImpl::Rtdetr(RtdetrHead::new(
            &p.pp("rtdetr"),
            [inputs.c3, inputs.c4, inputs.c5],
            config.num_classes,
            &config.rtdetr,
        )?),
    };
    Ok(Detector {
        config: config.clone(),
        backbone,
        head,
        varmap,
        device: device.clone(),
        dtype,
    })
}

impl Detector {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.varmap)
    }

    /// Run on `images` (B, 3, S, S) scaled to [0, 1].
    pub fn forward(&self, images: &Tensor) -> Result<RawOutput> {
        let skip = self.config.skip();
        let feats = self.backbone.forward(images, &[skip.x, skip.y])?;
        let tap = |i: usize| {
            feats
                .taps
                .get(&i)
                .ok_or_else(|| Error::Input(format!("backbone did not produce layer {i}")))
        };
        let (x, y) = (tap(skip.x)?, tap(skip.y)?);
        Ok(match &self.head {
            HeadImpl::Yolo(h) => RawOutput::Yolo(h.forward(x, y, &feats.last)?),
            HeadImpl::Rtdetr(h) => RawOutput::Rtdetr(h.forward(x, y, &feats.last)?),
        })
    }

    /// Training loss against pixel-space ground truth, one list per image.
    pub fn loss(&self, raw: &RawOutput, gts: &[Vec<BoxAnnotation>]) -> Result<LossBreakdown> {
        match (&self.head, raw) {
            (HeadImpl::Yolo(_), RawOutput::Yolo(r)) => {
                let assignment = assign_targets(r, gts, &self.config.yolo)?;
                let l = yolo_loss(r, &assignment, gts, &self.config.yolo)?;
                Ok(LossBreakdown {
                    terms: vec![("cls", l.cls), ("box", l.box_iou), ("dfl", l.dfl)],
                    total: l.total,
                })
            }
            (HeadImpl::Rtdetr(h), RawOutput::Rtdetr(r)) => {
                let l = h.loss(r, gts)?;
                Ok(LossBreakdown {
                    terms: vec![("cls", l.cls), ("l1", l.l1), ("giou", l.giou)],
                    total: l.total,
                })
            }
            _ => Err(Error::Input("raw output comes from a different head family".into())),
        }
    }

    /// Detections in input pixels, one list per image.
    pub fn predict(&self, raw: &RawOutput, cfg: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
        match (&self.head, raw) {
            (HeadImpl::Yolo(_), RawOutput::Yolo(r)) => crate::yolo::decode_and_nms(r, cfg),
            (HeadImpl::Rtdetr(h), RawOutput::Rtdetr(r)) => h.predict(r, cfg),
            _ => Err(Error::Input("raw output comes from a different head family".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nextvit_reference_skips_validate() {
        let spec = BackboneSpec::new(BackboneKind::NextvitS);
        for (x, y) in [(7, 17), (9, 19), (10, 20)] {
            let r = validate_skip_config(&spec, SkipConfig::new(x, y));
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn reversed_and_shallow_skips_fail() {
        let spec = BackboneSpec::new(BackboneKind::NextvitS);
        let r = validate_skip_config(&spec, SkipConfig::new(17, 7));
        assert!(!r.passed);
        assert!(r.errors.iter().any(|e| e.contains("precede")));
        let r = validate_skip_config(&spec, SkipConfig::new(6, 17));
        assert!(!r.passed);
        assert_eq!(r.taps[0].stride, Some(4));
        assert!(!validate_skip_config(&spec, SkipConfig::new(7, 7)).passed);
        assert!(!validate_skip_config(&spec, SkipConfig::new(7, 99)).passed);
    }

    #[test]
    fn csp_and_hgnet_defaults_validate() {
        for kind in [BackboneKind::CspDarknet, BackboneKind::Hgnetv2] {
            let spec = BackboneSpec::new(kind);
            let r = validate_skip_config(&spec, SkipConfig::default_for(HeadKind::Yolo, kind));
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn reference_configs() {
        let cfgs = enumerate_reference_configs(10);
        assert_eq!(cfgs.len(), 4);
        let find = |h, b| {
            cfgs.iter()
                .find(|c| c.head == h && c.backbone.kind == b)
                .unwrap()
                .skip()
        };
        assert_eq!(find(HeadKind::Yolo, BackboneKind::CspDarknet), SkipConfig::new(4, 6));
        assert_eq!(find(HeadKind::Yolo, BackboneKind::NextvitS), SkipConfig::new(7, 17));
        assert_eq!(find(HeadKind::Rtdetr, BackboneKind::Hgnetv2), SkipConfig::new(4, 8));
        assert_eq!(find(HeadKind::Rtdetr, BackboneKind::NextvitS), SkipConfig::new(9, 19));
        for c in &cfgs {
            c.validate().unwrap();
        }
    }

    #[test]
    fn invalid_skip_refuses_to_build() {
        let mut cfg = DetectorConfig::new(HeadKind::Yolo, BackboneKind::NextvitS, 4, 64).with_width(0.25);
        cfg.skip = Some(SkipConfig::new(7, 7));
        assert!(matches!(build_detector(&cfg, 0, &Device::Cpu), Err(Error::Config(_))));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = DetectorConfig::new(HeadKind::Rtdetr, BackboneKind::NextvitS, 4, 128).with_width(0.25);
        let text = toml::to_string(&cfg).unwrap();
        let back: DetectorConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: DetectorConfig = toml::from_str("head = \"RTDETR\"\nnum_classes = 3\n").unwrap();
        assert_eq!(partial.head, HeadKind::Rtdetr);
        assert_eq!(partial.skip(), SkipConfig::new(9, 19));
        let csp: DetectorConfig = toml::from_str("[backbone]\nkind = \"CSP_DARKNET\"\n").unwrap();
        assert_eq!(csp.backbone, BackboneSpec::new(BackboneKind::CspDarknet));
        assert_eq!(csp.skip(), SkipConfig::new(4, 6));
    }
}
