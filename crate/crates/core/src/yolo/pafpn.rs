use crate::backbone::FeatureMap;
use crate::blocks::C2f;
use crate::error::{Error, Result};
use crate::nn::{upsample2, ConvNormAct, Params};
use candle_core::Tensor;

/// Fused pyramid levels at strides 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct NeckOutputs {
    pub n3: FeatureMap,
    pub n4: FeatureMap,
    pub n5: FeatureMap,
}

impl NeckOutputs {
    pub fn levels(&self) -> [&FeatureMap; 3] {
        [&self.n3, &self.n4, &self.n5]
    }
}

/// Input widths of the three neck inputs (skip x, skip y, deepest).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeckInputs {
    pub c3: usize,
    pub c4: usize,
    pub c5: usize,
}

/// Path-aggregation FPN: top-down upsample/concat/fuse, then bottom-up
/// downsample/concat/fuse.
///
/// Only the first convolution of each fusion block sees the skip widths, so
/// swapping skip connections changes nothing else in the neck.
pub struct Pafpn {
    top_down4: C2f,
    top_down3: C2f,
    down3: ConvNormAct,
    bottom_up4: C2f,
    down4: ConvNormAct,
    bottom_up5: C2f,
    out: [usize; 3],
}

impl Pafpn {
    pub fn new(p: &Params, inputs: NeckInputs, out: [usize; 3], depth: usize) -> Result<Self> {
        let [n3, n4, n5] = out;
        Ok(Self {
            top_down4: C2f::new(&p.pp("top_down4"), inputs.c5 + inputs.c4, n4, depth, false)?,
            top_down3: C2f::new(&p.pp("top_down3"), n4 + inputs.c3, n3, depth, false)?,
            down3: ConvNormAct::new(&p.pp("down3"), n3, n3, 3, 2)?,
            bottom_up4: C2f::new(&p.pp("bottom_up4"), n3 + n4, n4, depth, false)?,
            down4: ConvNormAct::new(&p.pp("down4"), n4, n4, 3, 2)?,
            bottom_up5: C2f::new(&p.pp("bottom_up5"), n4 + inputs.c5, n5, depth, false)?,
            out,
        })
    }

    pub fn out_channels(&self) -> [usize; 3] {
        self.out
    }

    pub fn forward(&self, p3: &FeatureMap, p4: &FeatureMap, p5: &FeatureMap) -> Result<NeckOutputs> {
        check_pyramid(p3, p4, p5)?;
        let t4 = self
            .top_down4
            .forward(&Tensor::cat(&[&upsample2(&p5.data)?, &p4.data], 1)?)?;
        let n3 = self
            .top_down3
            .forward(&Tensor::cat(&[&upsample2(&t4)?, &p3.data], 1)?)?;
        let n4 = self
            .bottom_up4
            .forward(&Tensor::cat(&[&self.down3.forward(&n3)?, &t4], 1)?)?;
        let n5 = self
            .bottom_up5
            .forward(&Tensor::cat(&[&self.down4.forward(&n4)?, &p5.data], 1)?)?;
        Ok(NeckOutputs {
            n3: FeatureMap::new(n3, 8),
            n4: FeatureMap::new(n4, 16),
            n5: FeatureMap::new(n5, 32),
        })
    }
}

/// Check that three maps form a stride (8, 16, 32) pyramid of one batch and image size.
pub fn check_pyramid(p3: &FeatureMap, p4: &FeatureMap, p5: &FeatureMap) -> Result<()> {
    for (map, want, name) in [
        (p3, 8, "stride-8 input"),
        (p4, 16, "stride-16 input"),
        (p5, 32, "stride-32 input"),
    ] {
        if map.stride != want {
            return Err(Error::StrideMismatch {
                expected: want,
                got: map.stride,
                context: name.into(),
            });
        }
    }
    let b = p3.batch();
    if p4.batch() != b || p5.batch() != b {
        return Err(Error::Input(format!(
            "batch mismatch across pyramid: {} / {} / {}",
            b,
            p4.batch(),
            p5.batch()
        )));
    }
    let (h3, w3) = p3.spatial();
    if p4.spatial() != (h3 / 2, w3 / 2) || p5.spatial() != (h3 / 4, w3 / 4) {
        return Err(Error::Input(format!(
            "pyramid sizes {:?} / {:?} / {:?} are not consistent with one image",
            p3.spatial(),
            p4.spatial(),
            p5.spatial()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    fn map(c: usize, hw: usize, stride: usize) -> FeatureMap {
        FeatureMap::new(Tensor::randn(0f32, 1.0, (2, c, hw, hw), &Device::Cpu).unwrap(), stride)
    }

    #[test]
    fn output_sizes_follow_strides() {
        let p = Params::new(&VarMap::new(), DType::F32, &Device::Cpu, 0);
        let neck = Pafpn::new(&p, NeckInputs { c3: 16, c4: 24, c5: 32 }, [16, 24, 32], 1).unwrap();
        let out = neck.forward(&map(16, 16, 8), &map(24, 8, 16), &map(32, 4, 32)).unwrap();
        assert_eq!(out.n3.data.dims(), &[2, 16, 16, 16]);
        assert_eq!(out.n4.data.dims(), &[2, 24, 8, 8]);
        assert_eq!(out.n5.data.dims(), &[2, 32, 4, 4]);
        assert_eq!([out.n3.stride, out.n4.stride, out.n5.stride], [8, 16, 32]);
    }

    #[test]
    fn stride_mismatch_rejected() {
        let p = Params::new(&VarMap::new(), DType::F32, &Device::Cpu, 0);
        let neck = Pafpn::new(&p, NeckInputs { c3: 16, c4: 24, c5: 32 }, [16, 24, 32], 1).unwrap();
        let err = neck.forward(&map(16, 16, 16), &map(24, 8, 16), &map(32, 4, 32));
        assert!(matches!(
            err,
            Err(Error::StrideMismatch {
                expected: 8,
                got: 16,
                ..
            })
        ));
    }

    #[test]
    fn batch_mismatch_rejected() {
        let p3 = map(16, 16, 8);
        let p4 = FeatureMap::new(Tensor::zeros((1, 24, 8, 8), DType::F32, &Device::Cpu).unwrap(), 16);
        assert!(matches!(check_pyramid(&p3, &p4, &map(32, 4, 32)), Err(Error::Input(_))));
    }
}
