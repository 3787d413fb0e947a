//! Adam and momentum SGD over a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// SGD momentum.
    pub momentum: f32,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f32>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            clip_norm: None,
        }
    }
}

/// Moment buffers, indexed like the parameters of the store they were
/// created for.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub kind: OptimizerKind,
    pub step: u64,
    /// Adam first moments, or SGD momentum buffers.
    pub first: Vec<Vec<f32>>,
    /// Adam second moments; empty for SGD.
    pub second: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros = || {
            let mut v = vec![Vec::new(); store.len()];
            for (id, _, t) in store.iter() {
                v[id.index()] = vec![0.0; t.numel()];
            }
            v
        };
        Self {
            kind,
            step: 0,
            first: zeros(),
            second: match kind {
                OptimizerKind::Adam => zeros(),
                OptimizerKind::Sgd => Vec::new(),
            },
        }
    }

    /// Applies one update from the gradients held in `store`. Fails, leaving
    /// every parameter untouched, if any gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &OptimConfig) -> Result<()> {
        if self.kind != cfg.kind {
            return Err(Error::Config(format!("optimizer state is {} but config asks for {}", self.kind, cfg.kind)));
        }
        if self.first.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match the parameter set".into()));
        }
        let mut sq_norm = 0.0f64;
        for (_, name, t) in store.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.to_string()));
                }
                sq_norm += g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
            }
        }
        let clip_scale = match cfg.clip_norm {
            Some(c) if sq_norm.sqrt() > f64::from(c) => (f64::from(c) / sq_norm.sqrt()) as f32,
            _ => 1.0,
        };

        self.step += 1;
        let lr = cfg.learning_rate;
        let t = self.step as i32;
        let bc1 = 1.0 - f64::from(cfg.beta1).powi(t);
        let bc2 = 1.0 - f64::from(cfg.beta2).powi(t);
        for id in store.ids() {
            let i = id.index();
            let tensor = store.get_mut(id);
            let grad: Vec<f32> = match tensor.grad() {
                Some(g) => g.iter().map(|v| v * clip_scale).collect(),
                None => vec![0.0; tensor.numel()],
            };
            let data = tensor.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for j in 0..data.len() {
                        let g = grad[j];
                        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                        let m_hat = f64::from(m[j]) / bc1;
                        let v_hat = f64::from(v[j]) / bc2;
                        data[j] -= (f64::from(lr) * m_hat / (v_hat.sqrt() + f64::from(cfg.eps))) as f32;
                    }
                }
                OptimizerKind::Sgd => {
                    let buf = &mut self.first[i];
                    for j in 0..data.len() {
                        buf[j] = cfg.momentum * buf[j] + grad[j];
                        data[j] -= lr * buf[j];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::tape::Tape;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut s = ParamStore::new();
        let id = s.init("w", &[3], Init::Xavier { fan_in: 3, fan_out: 3 }, 1).unwrap();
        s.get_mut(id).grad_mut();
        let before = s.get(id).data().to_vec();
        let mut st = OptimState::new(OptimizerKind::Adam, &s);
        for _ in 0..5 {
            st.step(&mut s, &OptimConfig::default()).unwrap();
        }
        assert_eq!(s.get(id).data(), before.as_slice());
        assert!(st.first[0].iter().chain(&st.second[0]).all(|v| *v == 0.0));
    }

    #[test]
    fn first_adam_step_is_learning_rate_sized() {
        let mut s = ParamStore::new();
        let id = s.init("w", &[1], Init::Zeros, 0).unwrap();
        s.get_mut(id).accumulate_grad(&[1.0]);
        let mut st = OptimState::new(OptimizerKind::Adam, &s);
        let cfg = OptimConfig::default();
        st.step(&mut s, &cfg).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((s.get(id).data()[0] - expected as f32).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut s = ParamStore::new();
        let a = s.init("a", &[1], Init::Zeros, 0).unwrap();
        let b = s.init("b.W", &[2], Init::Zeros, 0).unwrap();
        s.get_mut(a).accumulate_grad(&[1.0]);
        s.get_mut(b).accumulate_grad(&[0.0, f32::NAN]);
        let mut st = OptimState::new(OptimizerKind::Adam, &s);
        match st.step(&mut s, &OptimConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "b.W"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.get(a).data(), &[0.0]);
    }

    #[test]
    fn adam_minimises_a_convex_quadratic() {
        // f(x, y) = (x - 1)² + 3(y + 2)²
        let mut s = ParamStore::new();
        let id = s.init("xy", &[2], Init::Zeros, 0).unwrap();
        let cfg = OptimConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut st = OptimState::new(OptimizerKind::Adam, &s);
        let loss = |s: &ParamStore| {
            let v = s.get(id).data();
            (v[0] - 1.0).powi(2) + 3.0 * (v[1] + 2.0).powi(2)
        };
        for _ in 0..500 {
            s.zero_grads();
            let mut tape = Tape::new();
            let p = tape.param(&s, id);
            let target = tape.constant(&[2], vec![1.0, -2.0]).unwrap();
            let w = tape.constant(&[2], vec![1.0, 3.0]).unwrap();
            let r = tape.sub(p, target).unwrap();
            let r2 = tape.square(r);
            let wr = tape.mul(r2, w).unwrap();
            let l = tape.sum(wr);
            tape.backward_into(l, &mut s).unwrap();
            st.step(&mut s, &cfg).unwrap();
        }
        assert!(loss(&s) < 1e-6, "loss {}", loss(&s));
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut s = ParamStore::new();
        let id = s.init("w", &[1], Init::Zeros, 0).unwrap();
        s.get_mut(id).accumulate_grad(&[100.0]);
        let cfg = OptimConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1.0,
            momentum: 0.0,
            clip_norm: Some(1.0),
            ..Default::default()
        };
        let mut st = OptimState::new(OptimizerKind::Sgd, &s);
        st.step(&mut s, &cfg).unwrap();
        assert_eq!(s.get(id).data(), &[-1.0]);
    }
}
