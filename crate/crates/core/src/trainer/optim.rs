//! AdamW, gradient clipping and the one-cycle schedule.

use kineflow_tensor::Array;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamStore};

/// Adam with decoupled weight decay. Decay multiplies the parameter by
/// `1 - lr * wd` before the moment-based update; it never enters the moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: u64,
    /// First and second moments, indexed like the parameter store; `None`
    /// until a parameter first receives a gradient.
    pub m: Vec<Option<Array<f32>>>,
    pub v: Vec<Option<Array<f32>>>,
}

impl AdamW {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &ParamGrads<f32>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let decay = (1.0 - lr * weight_decay) as f32;
        let eps = self.eps as f32;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id.index()).and_then(|g| g.as_ref()) else {
                continue;
            };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Array::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Array::zeros(g.shape().to_vec()));
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads<f32>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Fraction of the run spent warming up.
    pub warmup: f64,
    /// Starting learning rate as a fraction of the peak.
    pub start: f64,
    /// Final learning rate as a fraction of the peak.
    pub final_frac: f64,
    /// Hold the peak rate for the whole run.
    pub constant: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup: 0.05,
            start: 0.04,
            final_frac: 0.01,
            constant: false,
        }
    }
}

/// Linear warmup from `lr_max * start` to `lr_max` at step
/// `floor(warmup * (steps - 1))`, then linear decay to `lr_max * final_frac`
/// at the last step.
pub fn one_cycle_lr(step: u64, steps: u64, lr_max: f64, s: &Schedule) -> Result<f64> {
    if step >= steps {
        return Err(Error::Range(format!("step {step} is outside 0..{steps}")));
    }
    if s.constant {
        return Ok(lr_max);
    }
    let last = (steps - 1) as f64;
    let peak = (s.warmup * last).floor();
    let t = step as f64;
    let frac = if t <= peak {
        if peak == 0.0 {
            1.0
        } else {
            s.start + (1.0 - s.start) * t / peak
        }
    } else {
        1.0 + (s.final_frac - 1.0) * (t - peak) / (last - peak)
    };
    Ok(lr_max * frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn schedule_landmarks() {
        let s = Schedule::default();
        let lr = |k| one_cycle_lr(k, 2001, 1.0, &s).unwrap();
        assert!((lr(0) - 0.04).abs() < 1e-12);
        assert!((lr(100) - 1.0).abs() < 1e-12);
        assert!((lr(2000) - 0.01).abs() < 1e-12);
        assert!(lr(50) > lr(10) && lr(1000) > lr(1500));
        assert!(matches!(one_cycle_lr(2001, 2001, 1.0, &s), Err(Error::Range(_))));
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", Array::new(vec![3], vec![1.0, -2.0, 0.5]));
        let before = store.clone();
        let mut opt = AdamW::new(1);
        let grads = vec![Some(Array::new(vec![3], vec![0.3, 0.1, -5.0]))];
        opt.step(&mut store, &grads, 0.0, 0.1);
        assert_eq!(store, before);
        opt.step(&mut store, &grads, 1e-2, 0.0);
        assert!(store.get(id).data()[0] < 1.0);
    }

    #[test]
    fn first_step_matches_reference() {
        // Bias-corrected first step moves each weight by lr * sign(g), after decay.
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", Array::new(vec![2], vec![1.0, 1.0]));
        let mut opt = AdamW::new(1);
        opt.step(&mut store, &vec![Some(Array::new(vec![2], vec![0.5, -3.0]))], 0.1, 0.5);
        let d = store.get(id).data();
        assert!((d[0] - (0.95 - 0.1)).abs() < 1e-6);
        assert!((d[1] - (0.95 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(Array::new(vec![2], vec![3.0f32, 4.0])), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-6 && (d[1] - 0.8).abs() < 1e-6);
    }
}
