//! First-order optimizers over named `f32` parameter tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates are kept per tensor name. The step counter is shared,
/// so call [`Optimizer::begin_step`] once per update round.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub adam: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, adam: AdamConfig) -> Self {
        Self {
            kind,
            adam,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update with learning rate `lr` to `param` given `grad`.
    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f64], lr: f64) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Shape(format!(
                "{name}: {} parameters, {} gradients",
                param.len(),
                grad.len()
            )));
        }
        if lr == 0.0 {
            return Ok(());
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p = (*p as f64 - lr * g) as f32;
                }
            }
            OptimizerKind::Adam => {
                if self.step == 0 {
                    return Err(Error::State("begin_step must precede updates".into()));
                }
                let AdamConfig { beta1, beta2, eps } = self.adam;
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                if m.len() != grad.len() {
                    return Err(Error::Shape(format!("{name}: moment size changed")));
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..grad.len() {
                    let g = grad[i];
                    let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
                    let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                    param[i] = (param[i] as f64 - step) as f32;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, AdamConfig::default());
        let mut p = vec![1.0f32, -2.0, 0.5];
        opt.begin_step();
        opt.update("p", &mut p, &[3.0, -0.1, 0.0], 0.05).unwrap();
        // bias-corrected first step is lr·g/(|g|+eps)
        assert!((p[0] - 0.95).abs() < 1e-6);
        assert!((p[1] + 1.95).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, AdamConfig::default());
        let mut p = vec![0.3f32];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.3f64);
        for t in 1..=50 {
            let g = (t as f64 * 0.37).sin();
            opt.begin_step();
            opt.update("p", &mut p, &[g], 0.01).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] as f64 - x).abs() < 1e-5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, AdamConfig::default());
        let mut p = vec![5.0f32, -3.0];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|&x| 2.0 * (x as f64 - 1.0)).collect();
            opt.begin_step();
            opt.update("p", &mut p, &g, 0.05).unwrap();
        }
        assert!(p.iter().all(|&x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn zero_lr_and_sgd() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, AdamConfig::default());
        let mut p = vec![1.0f32];
        opt.begin_step();
        opt.update("p", &mut p, &[1.0], 0.0).unwrap();
        assert_eq!(p, vec![1.0]);
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, AdamConfig::default());
        sgd.update("p", &mut p, &[2.0], 0.25).unwrap();
        assert_eq!(p, vec![0.5]);
        assert!(matches!(sgd.update("p", &mut p, &[1.0, 2.0], 0.1), Err(Error::Shape(_))));
    }
}
