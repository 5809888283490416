use crate::error::{Error, Result};

use super::{ParamSet, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One bias-corrected Adam update over every parameter.
///
/// Weight decay is folded into the gradient (`g + wd * theta`) for parameters
/// flagged `decay`. Gradients are left in place.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.tensor.grad.is_none()) {
        return Err(Error::Usage(format!("parameter {} has no gradient", p.name)));
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps, wd) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));
    let one = T::one();
    for p in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let decay = if p.decay { wd } else { T::zero() };
        let grad = p.tensor.grad.take().expect("checked above");
        let theta = p.tensor.data_mut();
        for i in 0..theta.len() {
            let g = grad[i] + decay * theta[i];
            p.adam_m[i] = b1 * p.adam_m[i] + (one - b1) * g;
            p.adam_v[i] = b2 * p.adam_v[i] + (one - b2) * g * g;
            let m_hat = p.adam_m[i] / c1;
            let v_hat = p.adam_v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.tensor.grad = Some(grad);
    }
    Ok(())
}

/// Global L2 norm over all populated gradients, summed in parameter order.
pub fn global_grad_norm<T: Real>(params: &ParamSet<T>) -> T {
    let mut s = T::zero();
    for p in params.iter() {
        if let Some(g) = &p.tensor.grad {
            for &v in g {
                s += v * v;
            }
        }
    }
    s.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamSet<T>, max_norm: f64) -> T {
    let norm = global_grad_norm(params);
    let max = T::lit(max_norm);
    if norm > max {
        let k = max / norm;
        for p in params.iter_mut() {
            if let Some(g) = &mut p.tensor.grad {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Parameter, Tensor};

    fn single(values: &[f64], grad: &[f64], decay: bool) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let mut t = Tensor::from_f64(&[values.len()], values).unwrap();
        t.grad = Some(grad.to_vec());
        ps.push(Parameter::new("w", t, decay)).unwrap();
        ps
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = single(&[0.5], &[1.0], true);
        adam_step(&mut ps, &AdamConfig::default()).unwrap();
        let delta = ps.by_index(0).tensor.data()[0] - 0.5;
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((delta - expected).abs() < 1e-15, "{delta}");
        assert_eq!(ps.by_index(0).step_count, 1);
        assert!(ps.by_index(0).tensor.grad.is_some());
    }

    #[test]
    fn zero_grad_without_decay_is_fixed_point() {
        let mut ps = single(&[0.5, -2.0], &[0.0, 0.0], true);
        adam_step(&mut ps, &AdamConfig::default()).unwrap();
        assert_eq!(ps.by_index(0).tensor.data(), &[0.5, -2.0]);
    }

    #[test]
    fn decay_skips_flagged_params() {
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut with = single(&[1.0], &[0.0], true);
        let mut without = single(&[1.0], &[0.0], false);
        adam_step(&mut with, &cfg).unwrap();
        adam_step(&mut without, &cfg).unwrap();
        assert!(with.by_index(0).tensor.data()[0] < 1.0);
        assert_eq!(without.by_index(0).tensor.data()[0], 1.0);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut ps = ParamSet::new();
        for name in ["a", "b"] {
            let mut t = Tensor::from_f64(&[2], &[0.3, -0.1]).unwrap();
            t.grad = Some(vec![0.7, 0.2]);
            ps.push(Parameter::new(name, t, true)).unwrap();
        }
        for _ in 0..5 {
            adam_step(&mut ps, &AdamConfig::default()).unwrap();
        }
        assert_eq!(ps.by_index(0).tensor.data(), ps.by_index(1).tensor.data());
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut ps = single(&[1.0], &[0.0], true);
        ps.zero_grad();
        assert!(matches!(adam_step(&mut ps, &AdamConfig::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn clip_examples() {
        let mut ps = single(&[0.0, 0.0], &[3.0, 4.0], true);
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
        let g = ps.by_index(0).tensor.grad.clone().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);

        let mut ps = single(&[0.0, 0.0], &[0.3, 0.4], true);
        assert!((clip_grad_norm(&mut ps, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(ps.by_index(0).tensor.grad.as_deref(), Some(&[0.3, 0.4][..]));

        let mut ps = ParamSet::new();
        for (name, g) in [("a", [2.0f64.sqrt(), 0.0]), ("b", [0.0, 2.0f64.sqrt()])] {
            let mut t = Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap();
            t.grad = Some(g.to_vec());
            ps.push(Parameter::new(name, t, true)).unwrap();
        }
        assert!((clip_grad_norm(&mut ps, 1.0) - 2.0).abs() < 1e-12);
        assert!((ps.by_index(0).tensor.grad.as_ref().unwrap()[0] - 2f64.sqrt() / 2.0).abs() < 1e-12);
    }
}
