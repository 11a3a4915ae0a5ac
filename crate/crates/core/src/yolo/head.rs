use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvNormAct, Params};
use crate::yolo::pafpn::NeckOutputs;

pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Per-scale outputs of the dense head, before any decoding.
#[derive(Debug, Clone)]
pub struct RawYoloPredictions {
    /// Classification logits (B, num_classes, H_s, W_s) for strides 8, 16, 32.
    pub cls: Vec<Tensor>,
    /// Box-distribution logits (B, 4 * (reg_max + 1), H_s, W_s).
    pub box_dist: Vec<Tensor>,
    pub strides: Vec<usize>,
    pub reg_max: usize,
}

/// Anchor centre in input pixels plus the stride of its scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPoint {
    pub x: f64,
    pub y: f64,
    pub stride: f64,
}

impl RawYoloPredictions {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.cls[0].dim(0)?)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.cls[0].dim(1)?)
    }

    pub fn bins(&self) -> usize {
        self.reg_max + 1
    }

    /// Number of anchor points across all scales.
    pub fn num_anchors(&self) -> Result<usize> {
        let mut n = 0;
        for t in &self.cls {
            let (_, _, h, w) = t.dims4()?;
            n += h * w;
        }
        Ok(n)
    }

    /// Input image size `(height, width)` implied by the stride-8 map.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.cls[0].dims4()?;
        Ok((h * self.strides[0], w * self.strides[0]))
    }

    /// Anchor centres, scale by scale in row-major order.
    pub fn anchor_points(&self) -> Result<Vec<AnchorPoint>> {
        let mut out = Vec::new();
        for (t, &s) in self.cls.iter().zip(&self.strides) {
            let (_, _, h, w) = t.dims4()?;
            for y in 0..h {
                for x in 0..w {
                    out.push(AnchorPoint {
                        x: (x as f64 + 0.5) * s as f64,
                        y: (y as f64 + 0.5) * s as f64,
                        stride: s as f64,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Classification logits flattened to (B, A, num_classes).
    pub fn flat_cls(&self) -> Result<Tensor> {
        flatten_levels(&self.cls)
    }

    /// Distribution logits flattened to (B, A, 4, reg_max + 1).
    pub fn flat_box(&self) -> Result<Tensor> {
        let flat = flatten_levels(&self.box_dist)?;
        let (b, a, _) = flat.dims3()?;
        Ok(flat.reshape((b, a, 4, self.bins()))?)
    }

    /// Decoded boxes (B, A, 4) in input pixels, corner form.
    pub fn decode_boxes(&self) -> Result<Tensor> {
        let dist = expected_distances(&self.flat_box()?)?;
        let anchors = self.anchor_points()?;
        let (centers, strides) = anchor_tensors(&anchors, dist.dtype(), dist.device())?;
        distances_to_boxes(&dist, &centers, &strides)
    }
}

/// `(B, C, H, W)` per level -> `(B, sum HW, C)`.
fn flatten_levels(levels: &[Tensor]) -> Result<Tensor> {
    let parts = levels
        .iter()
        .map(|t| Ok(t.flatten_from(2)?.transpose(1, 2)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 1)?.contiguous()?)
}

/// Softmax expectation over the last (bin) axis: `(..., 4, bins)` -> `(..., 4)`.
pub fn expected_distances(dist_logits: &Tensor) -> Result<Tensor> {
    let bins = dist_logits.dim(D::Minus1)?;
    let probs = candle_nn::ops::softmax(dist_logits, D::Minus1)?;
    let proj = Tensor::arange(0u32, bins as u32, dist_logits.device())?.to_dtype(dist_logits.dtype())?;
    Ok(probs.broadcast_mul(&proj)?.sum(D::Minus1)?)
}

/// Anchor centres `(A, 2)` and strides `(A, 1)` as tensors.
pub fn anchor_tensors(anchors: &[AnchorPoint], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let centers: Vec<f64> = anchors.iter().flat_map(|a| [a.x, a.y]).collect();
    let strides: Vec<f64> = anchors.iter().map(|a| a.stride).collect();
    Ok((
        Tensor::from_vec(centers, (anchors.len(), 2), device)?.to_dtype(dtype)?,
        Tensor::from_vec(strides, (anchors.len(), 1), device)?.to_dtype(dtype)?,
    ))
}

/// `ltrb` distances in stride units around anchor centres -> pixel corners.
/// Works for any leading shape ending in `(A, 4)` against `(A, 2)` centres.
pub fn distances_to_boxes(dist: &Tensor, centers: &Tensor, strides: &Tensor) -> Result<Tensor> {
    let last = dist.rank() - 1;
    let lt = dist.narrow(last, 0, 2)?.broadcast_mul(strides)?;
    let rb = dist.narrow(last, 2, 2)?.broadcast_mul(strides)?;
    let x1y1 = centers.broadcast_sub(&lt)?;
    let x2y2 = centers.broadcast_add(&rb)?;
    Ok(Tensor::cat(&[&x1y1, &x2y2], last)?)
}

struct Branch {
    convs: [ConvNormAct; 2],
    out: Conv2d,
}

impl Branch {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.convs[1].forward(&self.convs[0].forward(x)?)?;
        self.out.forward(&y)
    }
}

/// Decoupled anchor-free head: per scale, a classification branch and a
/// box-distribution branch, each two 3x3 conv blocks and a 1x1 output.
pub struct YoloHead {
    cls: Vec<Branch>,
    reg: Vec<Branch>,
    num_classes: usize,
    reg_max: usize,
}

impl YoloHead {
    pub fn new(
        p: &Params,
        in_channels: [usize; 3],
        num_classes: usize,
        reg_max: usize,
        image_size: usize,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("detection head needs at least one class".into()));
        }
        if reg_max == 0 {
            return Err(Error::Config("reg_max must be positive".into()));
        }
        let bins = reg_max + 1;
        let c_reg = (in_channels[0] / 4).max(16).max(4 * reg_max);
        let c_cls = in_channels[0].max(num_classes.min(100));
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        for (i, (&c, &s)) in in_channels.iter().zip(&STRIDES).enumerate() {
            // Starting class prior: about five objects per image spread over the grid.
            let cells = ((image_size / s) * (image_size / s)).max(1) as f64;
            let prior = (5.0 / num_classes as f64 / cells).min(0.5);
            let cls_bias = (prior / (1.0 - prior)).ln();
            let cp = p.pp(format!("cls.{i}"));
            cls.push(Branch {
                convs: [
                    ConvNormAct::new(&cp.pp("0"), c, c_cls, 3, 1)?,
                    ConvNormAct::new(&cp.pp("1"), c_cls, c_cls, 3, 1)?,
                ],
                out: Conv2d::pointwise_with_bias(&cp.pp("2"), c_cls, num_classes, cls_bias)?,
            });
            let rp = p.pp(format!("reg.{i}"));
            reg.push(Branch {
                convs: [
                    ConvNormAct::new(&rp.pp("0"), c, c_reg, 3, 1)?,
                    ConvNormAct::new(&rp.pp("1"), c_reg, c_reg, 3, 1)?,
                ],
                out: Conv2d::pointwise_with_bias(&rp.pp("2"), c_reg, 4 * bins, 1.0)?,
            });
        }
        Ok(Self {
            cls,
            reg,
            num_classes,
            reg_max,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, neck: &NeckOutputs) -> Result<RawYoloPredictions> {
        let mut cls = Vec::with_capacity(3);
        let mut box_dist = Vec::with_capacity(3);
        for (i, level) in neck.levels().into_iter().enumerate() {
            cls.push(self.cls[i].forward(&level.data)?);
            box_dist.push(self.reg[i].forward(&level.data)?);
        }
        Ok(RawYoloPredictions {
            cls,
            box_dist,
            strides: STRIDES.to_vec(),
            reg_max: self.reg_max,
        })
    }
}
