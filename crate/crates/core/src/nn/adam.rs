use crate::error::{Error, Result};

use super::{Model, Param, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-4)
    }
}

/// One bias-corrected Adam update of `p` as step number `t` (1-based).
pub fn adam_update<T: Scalar>(p: &mut Param<T>, t: u64, cfg: &AdamConfig) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for i in 0..p.value.len() {
        let g = p.grad[i];
        p.m[i] = b1 * p.m[i] + (T::one() - b1) * g;
        p.v[i] = b2 * p.v[i] + (T::one() - b2) * g * g;
        let m_hat = p.m[i] / c1;
        let v_hat = p.v[i] / c2;
        p.value[i] = p.value[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every trainable parameter of `model` and
/// increments its step counter. Fails without touching the model if any
/// gradient is non-finite.
pub fn adam_step<T: Scalar>(model: &mut Model<T>, cfg: &AdamConfig) -> Result<()> {
    let t = model.step + 1;
    let mut params = model.named_params_mut();
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFiniteGradient { layer: name.clone() });
    }
    for (_, p) in params.iter_mut() {
        adam_update(p, t, cfg);
    }
    model.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelArchitecture;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::<f64>::new(vec![0.0]);
        p.grad[0] = 1.0;
        adam_update(&mut p, 1, &AdamConfig::with_lr(0.1));
        assert!((p.value[0] + 0.1).abs() < 1e-6, "{}", p.value[0]);
    }

    #[test]
    fn zero_gradient_keeps_value_and_decays_moments() {
        let mut p = Param::<f64>::new(vec![1.0, -2.0]);
        p.m = vec![0.5, 0.5];
        p.v = vec![0.25, 0.25];
        p.grad = vec![0.0, 0.0];
        let cfg = AdamConfig::with_lr(0.1);
        let before = p.value.clone();
        let mut q = p.clone();
        q.m = vec![0.0; 2];
        q.v = vec![0.0; 2];
        adam_update(&mut q, 1, &cfg);
        assert_eq!(q.value, before);
        adam_update(&mut p, 2, &cfg);
        assert_eq!(p.m, vec![0.45, 0.45]);
        assert!((p.v[0] - 0.24975).abs() < 1e-15);
    }

    #[test]
    fn first_step_opposes_gradient_sign() {
        let grads = [3.0, -0.2, 1e-3, -50.0];
        let mut p = Param::<f32>::new(vec![0.0; 4]);
        p.grad = grads.to_vec();
        adam_update(&mut p, 1, &AdamConfig::with_lr(0.01));
        for (v, g) in p.value.iter().zip(grads) {
            assert_eq!(v.signum(), -g.signum());
        }
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let arch = ModelArchitecture {
            num_blocks: 1,
            middle_repeats: 1,
            middle_per_repeat: 1,
            width: 2,
            residual_skip: false,
        };
        let mut model = crate::nn::Model::<f32>::new(arch, 0).unwrap();
        let snapshot = model.clone();
        model.named_params_mut()[3].1.grad[0] = f32::NAN;
        let err = adam_step(&mut model, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("block0.input.beta"), "{err}");
        assert_eq!(model.step, 0);
        let mut snapshot = snapshot;
        for ((_, a), (_, b)) in model.named_params_mut().into_iter().zip(snapshot.named_params_mut()) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.m, b.m);
        }
    }

    #[test]
    fn step_counter_increments() {
        let mut model = crate::nn::Model::<f32>::new(ModelArchitecture::proposed(), 0).unwrap();
        adam_step(&mut model, &AdamConfig::default()).unwrap();
        adam_step(&mut model, &AdamConfig::default()).unwrap();
        assert_eq!(model.step, 2);
    }
}
