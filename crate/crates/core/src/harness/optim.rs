use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};

use super::{OptimizerKind, TrainConfig};
use crate::error::Result;

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `v = mu v + (g + wd w)`, `w -= lr v`.
pub struct SgdMomentum {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g = (g + var.as_tensor().affine(self.weight_decay, 0.0)?)?;
            }
            let v = match vel.take() {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g,
            };
            var.set(&(var.as_tensor() - v.affine(self.lr, 0.0)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

/// The optimizer selected by a [`TrainConfig`].
pub enum Optimizer {
    Sgd(SgdMomentum),
    AdamW(AdamW),
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(SgdMomentum::new(
                vars,
                cfg.learning_rate,
                cfg.momentum,
                cfg.weight_decay,
            )),
            OptimizerKind::Adamw => Optimizer::AdamW(AdamW::new(
                vars,
                ParamsAdamW {
                    lr: cfg.learning_rate,
                    weight_decay: cfg.weight_decay,
                    ..ParamsAdamW::default()
                },
            )?),
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(grads),
            Optimizer::AdamW(o) => Ok(o.step(grads)?),
        }
    }
}

/// Rescale the gradients of `vars` so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn quadratic_grads(w: &Var) -> GradStore {
        // d/dw of 0.5 * |w|^2 is w
        let loss = (w.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        loss.backward().unwrap()
    }

    #[test]
    fn sgd_momentum_matches_hand_recursion() {
        let w = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = SgdMomentum::new(vec![w.clone()], 0.1, 0.9, 0.0);
        let (mut x, mut v) = (1.0f64, 0.0f64);
        for _ in 0..3 {
            opt.step(&quadratic_grads(&w)).unwrap();
            v = 0.9 * v + x;
            x -= 0.1 * v;
        }
        let got: Vec<f64> = w.as_tensor().to_vec1().unwrap();
        assert!((got[0] - x).abs() < 1e-12);
        assert!((got[1] + 2.0 * x).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let w = Var::from_tensor(&Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap()).unwrap();
        let mut g = quadratic_grads(&w);
        let before = clip_grad_norm(&mut g, &[w.clone()], 1.0).unwrap();
        assert!((before - 5.0).abs() < 1e-12);
        let after: Vec<f64> = g.get(w.as_tensor()).unwrap().to_vec1().unwrap();
        assert!((after[0].hypot(after[1]) - 1.0).abs() < 1e-5);
    }
}
