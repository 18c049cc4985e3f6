//! SGD with momentum, Adam with L2 penalty, and AdamW with decoupled weight decay.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use crownseg_core::schedule::{OptimizerKind, TrainConfig};

use crate::error::Result;

struct Slot {
    var: Var,
    m: Option<Tensor>,
    v: Option<Tensor>,
}

pub struct Optimizer {
    kind: OptimizerKind,
    slots: Vec<Slot>,
    momentum: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
    step: u64,
    /// Optional global gradient-norm cap.
    pub clip_norm: Option<f64>,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            slots: vars
                .into_iter()
                .map(|var| Slot {
                    var,
                    m: None,
                    v: None,
                })
                .collect(),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            betas: cfg.betas,
            eps: 1e-8,
            step: 0,
            clip_norm: None,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update with learning rate `lr`. Parameters without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let scale = match self.clip_norm {
            Some(max) => {
                let mut sq = 0.0;
                for s in &self.slots {
                    if let Some(g) = grads.get(s.var.as_tensor()) {
                        sq += crate::nn::scalar(&g.sqr()?.sum_all()?)?;
                    }
                }
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            let mut g = if scale != 1.0 { (g * scale)? } else { g.clone() }.detach();
            let p = &s.var.as_tensor().detach();
            match self.kind {
                OptimizerKind::Sgd => {
                    if self.weight_decay != 0.0 {
                        g = (g + (p * self.weight_decay)?)?;
                    }
                    let buf = match &s.m {
                        Some(b) if self.momentum != 0.0 => ((b * self.momentum)? + &g)?,
                        _ => g,
                    };
                    s.var.set(&(p - (&buf * lr)?)?)?;
                    s.m = Some(buf);
                }
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    let mut base = p.clone();
                    if self.weight_decay != 0.0 {
                        if self.kind == OptimizerKind::Adam {
                            g = (g + (p * self.weight_decay)?)?;
                        } else {
                            base = (p * (1.0 - lr * self.weight_decay))?;
                        }
                    }
                    let (b1, b2) = self.betas;
                    let m = match &s.m {
                        Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                        None => (&g * (1.0 - b1))?,
                    };
                    let v = match &s.v {
                        Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                        None => (g.sqr()? * (1.0 - b2))?,
                    };
                    let mhat = (&m / (1.0 - b1.powi(t)))?;
                    let vhat = (&v / (1.0 - b2.powi(t)))?;
                    let upd = mhat.div(&(vhat.sqrt()? + self.eps)?)?;
                    s.var.set(&(base - (upd * lr)?)?)?;
                    s.m = Some(m);
                    s.v = Some(v);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use crownseg_core::schedule::{make_recipe, DatasetId, ModelKind};

    fn quadratic_descent(kind: OptimizerKind) -> f64 {
        let var = Var::from_tensor(&Tensor::new(&[3.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut cfg = make_recipe(ModelKind::MaskRcnn, DatasetId::Synthetic);
        cfg.optimizer = kind;
        cfg.weight_decay = 0.0;
        let mut opt = Optimizer::new(vec![var.clone()], &cfg);
        for _ in 0..200 {
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step(&g, 0.05).unwrap();
        }
        let v: Vec<f64> = var.as_tensor().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
        v.iter().map(|x| x.abs()).sum()
    }

    #[test]
    fn all_optimizers_descend() {
        for k in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::Adamw] {
            assert!(quadratic_descent(k) < 0.2, "{k:?}");
        }
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut cfg = make_recipe(ModelKind::MaskRcnn, DatasetId::Synthetic);
        cfg.momentum = 0.9;
        cfg.weight_decay = 0.5;
        let mut opt = Optimizer::new(vec![var.clone()], &cfg);
        // loss = p^2, grad 2p; with decay g = 2p + 0.5p
        let g = var.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&g, 0.1).unwrap();
        let p1: f64 = var.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((p1 - (1.0 - 0.1 * 2.5)).abs() < 1e-12);
        let g = var.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&g, 0.1).unwrap();
        let p2: f64 = var.as_tensor().to_vec1::<f64>().unwrap()[0];
        let buf = 0.9 * 2.5 + 2.5 * p1;
        assert!((p2 - (p1 - 0.1 * buf)).abs() < 1e-12);
    }
}
