use candle_core::Tensor;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{max_pool_same, ConvNormAct, Params};

/// Spatial pyramid pooling (fast): a 1x1 reduction, three chained stride-1
/// max-pools, concatenation of all four maps, 1x1 projection.
pub struct Sppf {
    reduce: ConvNormAct,
    project: ConvNormAct,
    pool_size: usize,
}

impl Sppf {
    pub fn new(p: &Params, c_in: usize, c_out: usize, pool_size: usize) -> Result<Self> {
        if pool_size == 0 || pool_size % 2 == 0 {
            return Err(Error::Config(format!(
                "SPPF pool size must be odd and positive, got {pool_size}"
            )));
        }
        let hidden = (c_in / 2).max(1);
        Ok(Self {
            reduce: ConvNormAct::new(&p.pp("cv1"), c_in, hidden, 1, 1)?,
            project: ConvNormAct::new(&p.pp("cv2"), 4 * hidden, c_out, 1, 1)?,
            pool_size,
        })
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.stride != 32 {
            return Err(Error::StrideMismatch {
                expected: 32,
                got: input.stride,
                context: "SPPF input".into(),
            });
        }
        let y = self.reduce.forward(&input.data)?;
        let stacked = pooled_pyramid(&y, self.pool_size)?;
        Ok(FeatureMap::new(self.project.forward(&stacked)?, input.stride))
    }
}

/// `[x, m(x), m(m(x)), m(m(m(x)))]` concatenated on the channel axis.
pub fn pooled_pyramid(x: &Tensor, pool_size: usize) -> Result<Tensor> {
    let p1 = max_pool_same(x, pool_size)?;
    let p2 = max_pool_same(&p1, pool_size)?;
    let p3 = max_pool_same(&p2, pool_size)?;
    Ok(Tensor::cat(&[x, &p1, &p2, &p3], 1)?)
}
