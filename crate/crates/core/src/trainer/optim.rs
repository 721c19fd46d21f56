use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Decay the weights directly (AdamW) instead of adding `wd * p` to the gradient.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    /// Takes precedence over `epochs` when set.
    pub max_steps: Option<u64>,
    pub warmup_steps: u64,
    pub eval_every: u64,
    pub snapshot_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.0,
            decoupled_weight_decay: true,
            batch_size: 64,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 100,
            max_steps: None,
            warmup_steps: 0,
            eval_every: 50,
            snapshot_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.eval_every == 0 || self.snapshot_every == 0 {
            return bad("eval_every and snapshot_every must be positive".into());
        }
        Ok(())
    }

    /// Step budget for a training pool of `pool` facts.
    pub fn total_steps(&self, pool: usize) -> u64 {
        self.max_steps
            .unwrap_or_else(|| (self.epochs * pool.div_ceil(self.batch_size)) as u64)
    }

    /// Learning rate at optimizer step `t` (1-based): linear warmup, then constant.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.lr
        } else {
            self.lr * t as f64 / self.warmup_steps as f64
        }
    }
}

/// First and second moment estimates mirroring the parameter layout.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction at learning rate `lr`.
///
/// Non-finite gradients are rejected before anything is modified.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let step = state.t + 1;
    let g_tensors = grads.tensors();
    for (name, _, g) in &g_tensors {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step,
                detail: format!("non-finite gradient in {name}"),
            });
        }
    }
    state.t = step;
    let (b1, b2) = config.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let (b1, b2) = (T::of(b1), T::of(b2));
    let (one_m_b1, one_m_b2) = (T::one() - b1, T::one() - b2);
    let step_size = T::of(lr / bc1);
    let rbc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(config.eps);
    let wd = T::of(config.weight_decay);
    let shrink = T::of(1.0 - lr * config.weight_decay);
    let decoupled = config.decoupled_weight_decay;

    let mut ps = params.tensors_mut();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (((p, m), v), g) in ps
        .iter_mut()
        .zip(ms.iter_mut())
        .zip(vs.iter_mut())
        .zip(&g_tensors)
    {
        Zip::from(&mut p.2)
            .and(&mut m.2)
            .and(&mut v.2)
            .and(&g.2)
            .for_each(|p, m, v, &g| {
                let g = if decoupled { g } else { g + wd * *p };
                if decoupled {
                    *p *= shrink;
                }
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                *p -= step_size * *m / (v.sqrt() * rbc2 + eps);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn tiny() -> ModelParams<f64> {
        let c = ModelConfig {
            d_model: 4,
            vocab_size: 6,
            max_seq: 4,
            ..Default::default()
        };
        init_params(&c, 0).unwrap()
    }

    fn filled(p: &ModelParams<f64>, v: f64) -> ModelParams<f64> {
        let mut g = p.zeros_like();
        for (_, _, mut t) in g.tensors_mut() {
            t.fill(v);
        }
        g
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = filled(&p, 0.0);
        for (i, (_, _, mut t)) in g.tensors_mut().into_iter().enumerate() {
            t.iter_mut()
                .enumerate()
                .for_each(|(j, x)| *x = if (i + j) % 2 == 0 { 3.0 } else { -0.01 });
        }
        let cfg = TrainConfig {
            eps: 1e-12,
            ..Default::default()
        };
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &g, &mut s, &cfg, cfg.lr).unwrap();
        for ((_, _, a), ((_, _, b), (_, _, gr))) in p
            .tensors()
            .iter()
            .zip(before.tensors().iter().zip(g.tensors().iter()))
        {
            for ((x, y), gv) in a.iter().zip(b.iter()).zip(gr.iter()) {
                assert!(((y - x) - cfg.lr * gv.signum()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pure_decay_shrinks_geometrically() {
        let mut p = tiny();
        let before = p.clone();
        let zero = filled(&p, 0.0);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            lr: 1e-2,
            ..Default::default()
        };
        let mut s = OptimizerState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &zero, &mut s, &cfg, cfg.lr).unwrap();
        }
        let factor = (1.0 - cfg.lr * cfg.weight_decay).powi(5);
        for ((_, _, a), (_, _, b)) in p.tensors().iter().zip(before.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y * factor).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_decay_matches_coupled_and_decoupled() {
        let p0 = tiny();
        let g = filled(&p0, 0.3);
        let mut a = p0.clone();
        let mut b = p0.clone();
        let mut cfg = TrainConfig::default();
        let (mut sa, mut sb) = (OptimizerState::new(&a), OptimizerState::new(&b));
        adamw_step(&mut a, &g, &mut sa, &cfg, cfg.lr).unwrap();
        cfg.decoupled_weight_decay = false;
        adamw_step(&mut b, &g, &mut sb, &cfg, cfg.lr).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = filled(&p, 0.0);
        g.w_unembed[[0, 0]] = f64::NAN;
        let mut s = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &g, &mut s, &TrainConfig::default(), 1e-3).unwrap_err();
        assert!(err.to_string().contains("w_unembed"), "{err}");
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            weight_decay: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let c = TrainConfig {
            warmup_steps: 10,
            ..Default::default()
        };
        assert_eq!(c.lr_at(5), 0.5e-4);
        assert_eq!(c.lr_at(10), 1e-4);
        assert_eq!(TrainConfig::default().total_steps(1485), 100 * 24);
    }
}
