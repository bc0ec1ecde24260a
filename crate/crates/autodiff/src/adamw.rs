//! AdamW with decoupled weight decay.

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for every parameter of one store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update over all parameters. `grads` must hold one tensor per
    /// parameter in store order; `None` entries are reported by name.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adamw_step",
                detail: format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for (id, name, p) in params.iter() {
            match &grads[id.index()] {
                None => return Err(AutodiffError::MissingGrad(name.to_string())),
                Some(g) if g.shape() != p.shape() => {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "adamw_step",
                        detail: format!("{name}: param {:?} grad {:?}", p.shape(), g.shape()),
                    })
                }
                Some(g) if !g.all_finite() => return Err(AutodiffError::NonFinite { op: "adamw_step" }),
                Some(_) => {}
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let cast = T::from_f64_lossy;
        let (b1, b2) = (cast(c.beta1), cast(c.beta2));
        let bc1 = cast(1.0 - c.beta1.powi(t));
        let bc2 = cast(1.0 - c.beta2.powi(t));
        let lr = cast(c.lr);
        let eps = cast(c.eps);
        let decay = cast(1.0 - c.lr * c.weight_decay);
        let one = T::one();

        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads[i].as_ref().expect("checked above").data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut params = store(0.75);
        let mut opt = AdamWState::new(AdamWConfig::default(), &params);
        for _ in 0..5 {
            opt.step(&mut params, &[Some(Tensor::zeros(&[1]))]).unwrap();
        }
        assert_eq!(params.get(params.id("p").unwrap()).data(), &[0.75]);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut params = store(1.0);
        let mut opt = AdamWState::new(AdamWConfig::default(), &params);
        opt.step(&mut params, &[Some(Tensor::new(vec![1], vec![1.0]).unwrap())]).unwrap();
        let p = params.get(params.id("p").unwrap()).data()[0];
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p as f64 - expected).abs() < 1e-7, "{p}");
        assert!((p - 0.999).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut params = store(2.0);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            lr: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamWState::new(cfg, &params);
        opt.step(&mut params, &[Some(Tensor::zeros(&[1]))]).unwrap();
        let p = params.get(params.id("p").unwrap()).data()[0];
        assert!((p - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut params = store(1.0);
        let mut opt = AdamWState::new(AdamWConfig::default(), &params);
        let err = opt.step(&mut params, &[None]).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
    }
}
