//! Parameter storage and the small set of layers every network in the crate
//! is assembled from.
//!
//! All parameters live in a single [`VarMap`] so optimizers, checkpoints and
//! the pretrained-weight import hook can address them by dotted name. Values
//! are drawn from a ChaCha stream seeded by the global seed and the parameter
//! name, so initialization does not depend on construction order.

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` where fan-in is the product of all but the first axis.
    FanIn,
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

/// Handle on the shared parameter store, scoped to a dotted path prefix.
#[derive(Clone)]
pub struct Params {
    varmap: VarMap,
    dtype: DType,
    device: Device,
    seed: u64,
    path: String,
}

impl Params {
    pub fn new(varmap: &VarMap, dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            varmap: varmap.clone(),
            dtype,
            device: device.clone(),
            seed,
            path: String::new(),
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        };
        Self { path, ..self.clone() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Fetch the named parameter, creating it on first use.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        };
        let data = self.varmap.data();
        let mut guard = data.lock().expect("parameter store poisoned");
        if let Some(var) = guard.get(&full) {
            if var.dims() != shape {
                return Err(Error::Config(format!(
                    "parameter {full} already exists with shape {:?}, requested {shape:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&full));
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; numel],
            Init::Uniform(bound) => (0..numel).map(|_| rng.random_range(-bound..=bound)).collect(),
            Init::FanIn => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::Normal(std) => (0..numel).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        guard.insert(full, var);
        Ok(out)
    }
}

/// 64-bit FNV-1a, used to derive per-parameter seeds.
pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Round `v` to the nearest multiple of `divisor`, never below `divisor`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    (((v / d).round() as usize) * divisor).max(divisor)
}

/// Largest group count from {8, 4, 2, 1} dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(p: &Params, c_in: usize, c_out: usize, kernel: usize, stride: usize, bias: bool) -> Result<Self> {
        let weight = p.get("weight", &[c_out, c_in, kernel, kernel], Init::FanIn)?;
        let bias = if bias {
            let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
            Some(p.get("bias", &[c_out], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// 1x1 convolution whose bias starts at a fixed value; used for
    /// classification priors.
    pub fn pointwise_with_bias(p: &Params, c_in: usize, c_out: usize, bias: f64) -> Result<Self> {
        let weight = p.get("weight", &[c_out, c_in, 1, 1], Init::FanIn)?;
        let bias = p.get("bias", &[c_out], Init::Const(bias))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: 1,
            padding: 0,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        let weight = p.get("weight", &[channels], Init::Const(1.0))?;
        let bias = p.get("bias", &[channels], Init::Const(0.0))?;
        let inner = candle_nn::GroupNorm::new(weight, bias, channels, norm_groups(channels), 1e-5)?;
        Ok(Self { inner })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

/// Convolution, group normalization, SiLU.
pub struct ConvNormAct {
    conv: Conv2d,
    norm: GroupNorm,
    act: bool,
}

impl ConvNormAct {
    pub fn new(p: &Params, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), c_in, c_out, kernel, stride, false)?,
            norm: GroupNorm::new(&p.pp("norm"), c_out)?,
            act: true,
        })
    }

    pub fn without_act(mut self) -> Self {
        self.act = false;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(&self.conv.forward(x)?)?;
        if self.act {
            Ok(y.silu()?)
        } else {
            Ok(y)
        }
    }
}

/// 3x3 depthwise convolution written as a sum of nine shifted, per-channel
/// scaled copies of the zero-padded input.
pub struct DepthwiseConv3 {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3 {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get("weight", &[channels, 9], Init::FanIn)?,
            bias: p.get("bias", &[channels], Init::Uniform(1.0 / 3.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut acc = self.bias.reshape((1, c, 1, 1))?.broadcast_as(x.shape())?.contiguous()?;
        for dy in 0..3 {
            for dx in 0..3 {
                let k = self.weight.narrow(1, dy * 3 + dx, 1)?.reshape((1, c, 1, 1))?;
                let shifted = padded.narrow(2, dy, h)?.narrow(3, dx, w)?;
                acc = (acc + shifted.broadcast_mul(&k)?)?;
            }
        }
        Ok(acc)
    }
}

pub struct Linear {
    inner: candle_nn::Linear,
}

impl Linear {
    pub fn new(p: &Params, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = p.get("weight", &[d_out, d_in], Init::FanIn)?;
        let bias = p.get("bias", &[d_out], Init::Uniform(bound))?;
        Ok(Self {
            inner: candle_nn::Linear::new(weight, Some(bias)),
        })
    }

    pub fn with_init(p: &Params, d_in: usize, d_out: usize, weight: Init, bias: Init) -> Result<Self> {
        let weight = p.get("weight", &[d_out, d_in], weight)?;
        let bias = p.get("bias", &[d_out], bias)?;
        Ok(Self {
            inner: candle_nn::Linear::new(weight, Some(bias)),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get("weight", &[dim], Init::Const(1.0))?,
            bias: p.get("bias", &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::layer_norm_slow(x, &self.weight, &self.bias, 1e-5)?)
    }
}

/// Stack of linear layers with SiLU between them.
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(p: &Params, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&p.pp(format!("layers.{i}")), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Like [`Mlp::new`] but the final layer starts from `last` (weights and bias).
    pub fn with_last_init(p: &Params, dims: &[usize], last: Init) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let pp = p.pp(format!("layers.{i}"));
                if i + 1 == n {
                    Linear::with_init(&pp, w[0], w[1], last, last)
                } else {
                    Linear::new(&pp, w[0], w[1])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.silu()?;
            }
        }
        Ok(x)
    }
}

/// Multi-head scaled dot-product attention with separate query/key/value projections.
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(p: &Params, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&p.pp("q"), dim, dim)?,
            k: Linear::new(&p.pp("k"), dim, dim)?,
            v: Linear::new(&p.pp("v"), dim, dim)?,
            out: Linear::new(&p.pp("out"), dim, dim)?,
            heads,
        })
    }

    /// `query` is (B, Nq, D); `key` and `value` are (B, Nk, D).
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let (b, nq, dim) = query.dims3()?;
        let nk = key.dim(1)?;
        let hd = dim / self.heads;
        let split = |x: Tensor, n: usize| -> Result<Tensor> {
            Ok(x.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(query)?, nq)?;
        let k = split(self.k.forward(key)?, nk)?;
        let v = split(self.v.forward(value)?, nk)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, dim))?;
        self.out.forward(&ctx)
    }
}

/// Nearest-neighbour 2x upsampling.
///
/// Built from a broadcast rather than `upsample_nearest2d`, whose backward
/// in candle 0.11 overwrites gradients already accumulated for its input.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, h * 2, w * 2))?)
}

/// Max pooling with stride 1 and "same" padding, separable over rows and columns.
///
/// Edge replication stands in for `-inf` padding: the replicated value is
/// always inside the window it pads, so the maximum is unchanged.
pub fn max_pool_same(x: &Tensor, kernel: usize) -> Result<Tensor> {
    let r = kernel / 2;
    let pool_axis = |t: &Tensor, axis: usize| -> Result<Tensor> {
        let n = t.dim(axis)?;
        let padded = t.pad_with_same(axis, r, r)?;
        let mut acc = padded.narrow(axis, 0, n)?;
        for off in 1..kernel {
            acc = acc.maximum(&padded.narrow(axis, off, n)?)?;
        }
        Ok(acc)
    };
    pool_axis(&pool_axis(x, 3)?, 2)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(x / (1 - x))` with the argument clamped away from 0 and 1.
pub fn inverse_sigmoid(x: &Tensor) -> Result<Tensor> {
    let eps = 1e-5;
    let x = x.clamp(0.0, 1.0)?;
    let num = x.clamp(eps, f64::INFINITY)?;
    let den = x.affine(-1.0, 1.0)?.clamp(eps, f64::INFINITY)?;
    Ok((num.log()? - den.log()?)?)
}

/// Arctangent of a non-negative tensor, composed from differentiable primitives.
///
/// Three half-angle reductions `atan(x) = 2 atan(x / (1 + sqrt(1 + x^2)))`
/// bring the argument below `tan(pi/16)`, where an odd Taylor series of
/// degree 19 is accurate to well below 1e-12.
pub fn atan_nonneg(x: &Tensor) -> Result<Tensor> {
    let mut y = x.clone();
    for _ in 0..3 {
        let denom = (y.sqr()?.affine(1.0, 1.0)?.sqrt()? + 1.0)?;
        y = (y / denom)?;
    }
    let y2 = y.sqr()?;
    let mut term = y.clone();
    let mut acc = y.clone();
    for n in 1..10 {
        term = (term * &y2)?;
        let coeff = if n % 2 == 1 { -1.0 } else { 1.0 } / (2 * n + 1) as f64;
        acc = (acc + term.affine(coeff, 0.0)?)?;
    }
    Ok(acc.affine(8.0, 0.0)?)
}

/// Fixed 2D sine-cosine position embedding for an `h x w` grid, shape (h*w, dim).
pub fn sincos_2d(h: usize, w: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!(
            "position embedding width {dim} must be divisible by 4"
        )));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            data.extend(omega.iter().map(|o| (fx * o).sin()));
            data.extend(omega.iter().map(|o| (fx * o).cos()));
            data.extend(omega.iter().map(|o| (fy * o).sin()));
            data.extend(omega.iter().map(|o| (fy * o).cos()));
        }
    }
    Ok(Tensor::from_vec(data, (h * w, dim), device)?.to_dtype(dtype)?)
}

/// All trainable variables, sorted by name.
pub fn sorted_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().expect("parameter store poisoned");
    let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Total number of scalar parameters.
pub fn parameter_count(varmap: &VarMap) -> usize {
    sorted_vars(varmap).iter().map(|(_, v)| v.elem_count()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Params {
        Params::new(&VarMap::new(), DType::F64, &Device::Cpu, 7)
    }

    #[test]
    fn upsample_matches_nearest_and_accumulates_gradient() {
        let x = Var::from_tensor(
            &Tensor::arange(0f64, 8.0, &Device::Cpu)
                .unwrap()
                .reshape((1, 2, 2, 2))
                .unwrap(),
        )
        .unwrap();
        let up = upsample2(x.as_tensor()).unwrap();
        let reference = x.as_tensor().upsample_nearest2d(4, 4).unwrap();
        let diff = (&up - &reference)
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
        // x feeds the upsample and a second branch; both gradients must add up.
        let loss = (up.sum_all().unwrap() + (x.as_tensor() * 3.0).unwrap().sum_all().unwrap()).unwrap();
        let g = loss.backward().unwrap();
        let gx: Vec<f64> = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(gx, vec![7.0; 8]);
    }

    #[test]
    fn init_is_order_independent() {
        let a = params();
        let wa1 = a.pp("x").get("w", &[4, 3], Init::FanIn).unwrap();
        let wa2 = a.pp("y").get("w", &[4, 3], Init::FanIn).unwrap();
        let b = params();
        let wb2 = b.pp("y").get("w", &[4, 3], Init::FanIn).unwrap();
        let wb1 = b.pp("x").get("w", &[4, 3], Init::FanIn).unwrap();
        let v = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v(&wa1), v(&wb1));
        assert_eq!(v(&wa2), v(&wb2));
        assert_ne!(v(&wa1), v(&wa2));
    }

    #[test]
    fn shape_conflict_is_rejected() {
        let p = params();
        p.get("w", &[2, 2], Init::FanIn).unwrap();
        assert!(p.get("w", &[3, 2], Init::FanIn).is_err());
    }

    #[test]
    fn atan_matches_std() {
        let xs: [f64; 7] = [0.0, 1e-3, 0.3, 1.0, 2.5, 17.0, 300.0];
        let t = Tensor::new(&xs, &Device::Cpu).unwrap();
        let got = atan_nonneg(&t).unwrap().to_vec1::<f64>().unwrap();
        for (x, g) in xs.iter().zip(got) {
            assert!((x.atan() - g).abs() < 1e-12, "atan({x}) = {g}");
        }
    }

    #[test]
    fn max_pool_same_matches_naive() {
        let data: Vec<f64> = (0..2 * 3 * 6 * 5).map(|i| ((i * 37) % 23) as f64).collect();
        let x = Tensor::from_vec(data.clone(), (2, 3, 6, 5), &Device::Cpu).unwrap();
        let got = max_pool_same(&x, 5)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let at = |b: usize, c: usize, y: usize, x: usize| data[((b * 3 + c) * 6 + y) * 5 + x];
        let mut i = 0;
        for b in 0..2 {
            for c in 0..3 {
                for y in 0..6usize {
                    for x in 0..5usize {
                        let mut m = f64::NEG_INFINITY;
                        for yy in y.saturating_sub(2)..(y + 3).min(6) {
                            for xx in x.saturating_sub(2)..(x + 3).min(5) {
                                m = m.max(at(b, c, yy, xx));
                            }
                        }
                        assert_eq!(got[i], m);
                        i += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let p = params();
        let dw = DepthwiseConv3::new(&p.pp("dw"), 4).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 4, 5, 7), &Device::Cpu).unwrap();
        let got = dw.forward(&x).unwrap();
        let kernel = dw.weight.reshape((4, 1, 3, 3)).unwrap();
        let want = x
            .conv2d(&kernel, 1, 1, 1, 4)
            .unwrap()
            .broadcast_add(&dw.bias.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let diff = (got - want)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn make_divisible_rounds() {
        assert_eq!(make_divisible(16.0, 8), 16);
        assert_eq!(make_divisible(42.7, 8), 40);
        assert_eq!(make_divisible(3.0, 8), 8);
    }
}
