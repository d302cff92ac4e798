//! Adaptive-gradient optimizer with decoupled weight decay.
//!
//! Decay multiplies weights directly by (1 − lr·wd) before the moment-based
//! update and is applied to multiplicative weights only, never to biases or
//! normalization terms.

use ndarray::ArrayD;

use super::{Backbone, ParamKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the gradients currently stored on the model's
    /// parameters. Moment buffers are allocated on first use and keyed by
    /// visit order, so an optimizer must stay with one model.
    pub fn step(&mut self, model: &mut Backbone) -> Result<()> {
        let mut shapes = Vec::new();
        model.visit_params(&mut |p| shapes.push(p.value.raw_dim()));
        if self.m.is_empty() {
            self.m = shapes.iter().map(|d| ArrayD::zeros(d.clone())).collect();
            self.v = shapes.iter().map(|d| ArrayD::zeros(d.clone())).collect();
        } else if self.m.len() != shapes.len() {
            return Err(Error::InvalidConfig(
                "optimizer state does not match this model".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps, wd) = (
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        );
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut slot = 0usize;
        let mut problem = None;
        model.visit_params_mut(&mut |p| {
            let m = &mut ms[slot];
            let v = &mut vs[slot];
            slot += 1;
            if m.raw_dim() != p.value.raw_dim() {
                problem = Some(format!("parameter {} changed shape", p.name));
                return;
            }
            if wd > 0.0 && p.kind == ParamKind::Weight {
                p.value.mapv_inplace(|x| x * (1.0 - lr * wd));
            }
            for i in 0..p.value.len() {
                let g = p.grad.as_slice().expect("standard layout")[i];
                let mi = &mut m.as_slice_mut().expect("standard layout")[i];
                *mi = b1 * *mi + (1.0 - b1) * g;
                let vi = &mut v.as_slice_mut().expect("standard layout")[i];
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                p.value.as_slice_mut().expect("standard layout")[i] -=
                    lr * mhat / (vhat.sqrt() + eps);
            }
        });
        match problem {
            Some(msg) => Err(Error::InvalidConfig(msg)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backbone, BackboneConfig, BackboneKind};

    fn tiny() -> Backbone {
        let cfg = BackboneConfig {
            kind: BackboneKind::SmallCnn,
            dropout_rate: 0.0,
            input_size: (8, 8),
        };
        Backbone::new(cfg, 1).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut model = tiny();
        let before: Vec<f64> = {
            let mut v = Vec::new();
            model.visit_params(&mut |p| v.extend(p.value.iter().copied()));
            v
        };
        model.visit_params_mut(&mut |p| p.grad.fill(1.0));
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(&mut model).unwrap();
        let mut after = Vec::new();
        model.visit_params(&mut |p| after.extend(p.value.iter().copied()));
        // With bias correction, the first step is lr·g/(|g| + ε') ≈ lr.
        for (b, a) in before.iter().zip(&after) {
            assert!(((b - a) - 1e-3).abs() < 1e-9, "step was {}", b - a);
        }
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut model = tiny();
        model.visit_params_mut(&mut |p| {
            p.value.fill(2.0);
            p.grad.fill(0.0);
        });
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut model).unwrap();
        model.visit_params(&mut |p| {
            let expect = match p.kind {
                ParamKind::Weight => 2.0 * (1.0 - 0.1 * 0.5),
                ParamKind::Bias => 2.0,
            };
            for &v in p.value.iter() {
                assert!((v - expect).abs() < 1e-12, "{}: {v} vs {expect}", p.name);
            }
        });
    }

    #[test]
    fn repeated_steps_shrink_a_quadratic() {
        // Gradient of ½‖θ‖² is θ itself: repeated steps drive values down.
        let mut model = tiny();
        let norm = |m: &Backbone| {
            let mut s = 0.0;
            m.visit_params(&mut |p| s += p.value.iter().map(|v| v * v).sum::<f64>());
            s.sqrt()
        };
        let start = norm(&model);
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..300 {
            let mut values = Vec::new();
            model.visit_params(&mut |p| values.push(p.value.clone()));
            let mut i = 0;
            model.visit_params_mut(&mut |p| {
                p.grad = values[i].clone();
                i += 1;
            });
            opt.step(&mut model).unwrap();
        }
        assert!(norm(&model) < start * 0.05, "{} vs {start}", norm(&model));
    }
}
