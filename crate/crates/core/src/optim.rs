//! Optimizers over a fixed list of variables.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// Heavy-ball momentum with L2 weight decay folded into the gradient.
    Sgd { momentum: f64, weight_decay: f64 },
    /// Adam with decoupled weight decay.
    Adam { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9, weight_decay: 5e-4 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { momentum, weight_decay } => (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerConfig::Adam { beta1, beta2, eps, weight_decay } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate to zero over all training steps.
    #[default]
    Cosine,
}

impl Schedule {
    pub fn rate(&self, base: f64, step: u64, total_steps: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

pub enum Optimizer {
    Sgd { vars: Vec<Var>, velocity: Vec<Option<Tensor>>, momentum: f64, weight_decay: f64 },
    Adam(Box<AdamW>),
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, vars: Vec<Var>, learning_rate: f64) -> Result<Self> {
        config.validate()?;
        Ok(match *config {
            OptimizerConfig::Sgd { momentum, weight_decay } => {
                let velocity = vec![None; vars.len()];
                Optimizer::Sgd { vars, velocity, momentum, weight_decay }
            }
            OptimizerConfig::Adam { beta1, beta2, eps, weight_decay } => {
                let params = ParamsAdamW { lr: learning_rate, beta1, beta2, eps, weight_decay };
                Optimizer::Adam(Box::new(AdamW::new(vars, params)?))
            }
        })
    }

    /// Applies one update with `learning_rate`. Variables without a gradient
    /// in `grads` are left untouched.
    pub fn step(&mut self, grads: &GradStore, learning_rate: f64) -> Result<()> {
        match self {
            Optimizer::Sgd { vars, velocity, momentum, weight_decay } => {
                for (var, vel) in vars.iter().zip(velocity.iter_mut()) {
                    let Some(g) = grads.get(var.as_tensor()) else { continue };
                    let g = if *weight_decay > 0.0 { (g + var.as_tensor().affine(*weight_decay, 0.0)?)? } else { g.clone() };
                    let v = match vel.take() {
                        Some(prev) => ((prev.affine(*momentum, 0.0))? + g)?,
                        None => g,
                    };
                    var.set(&(var.as_tensor() - v.affine(learning_rate, 0.0)?)?)?;
                    *vel = Some(v);
                }
                Ok(())
            }
            Optimizer::Adam(adam) => {
                adam.set_learning_rate(learning_rate);
                Ok(adam.step(grads)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(Schedule::Cosine.rate(0.1, 0, 100), 0.1);
        assert!((Schedule::Cosine.rate(0.1, 50, 100) - 0.05).abs() < 1e-12);
        assert!(Schedule::Cosine.rate(0.1, 100, 100).abs() < 1e-12);
        assert_eq!(Schedule::Constant.rate(0.1, 70, 100), 0.1);
    }

    #[test]
    fn momentum_sgd_minimizes_a_quadratic() {
        let w = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Optimizer::new(&OptimizerConfig::Sgd { momentum: 0.9, weight_decay: 0.0 }, vec![w.clone()], 0.05).unwrap();
        for _ in 0..300 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.05).unwrap();
        }
        let v = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-3), "{v:?}");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let w = Var::new(&[1.0f64, -1.0], &Device::Cpu).unwrap();
        let cfg = OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut opt = Optimizer::new(&cfg, vec![w.clone()], 0.05).unwrap();
        for _ in 0..500 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.05).unwrap();
        }
        assert!(w.as_tensor().to_vec1::<f64>().unwrap().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn invalid_momentum_is_rejected() {
        assert!(OptimizerConfig::Sgd { momentum: 1.5, weight_decay: 0.0 }.validate().is_err());
    }
}
