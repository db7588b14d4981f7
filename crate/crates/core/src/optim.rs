//! AdamW with decoupled weight decay and a polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub poly_power: f64,
    /// Horizon of the poly schedule; the rate reaches zero here.
    pub total_steps: usize,
}

impl AdamWConfig {
    /// `lr · (1 − t/T)^power`, clamped at zero past the horizon.
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = 1.0 - step as f64 / self.total_steps.max(1) as f64;
        self.lr * frac.max(0.0).powf(self.poly_power)
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Updates applied so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid(
                "adamw",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(invalid("adamw", "parameter list changed between updates"));
        }
        let c = &self.config;
        let lr = T::lit(c.lr_at(self.step));
        let t = (self.step + 1) as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (wd, eps) = (T::lit(c.weight_decay), T::lit(c.eps));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut data = p.to_vec();
            for (i, (x, &gi)) in data.iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *x = *x - lr * (step + wd * *x);
            }
            *p = Tensor::new(p.shape(), data)?;
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AdamWConfig {
        AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            poly_power: 0.9,
            total_steps: 100,
        }
    }

    #[test]
    fn poly_schedule() {
        let c = cfg();
        assert_eq!(c.lr_at(0), 0.1);
        assert!((c.lr_at(50) - 0.1 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(c.lr_at(100), 0.0);
        assert_eq!(c.lr_at(150), 0.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first update ±lr·g/(|g|+eps')
        let mut opt = AdamW::<f64>::new(cfg());
        let mut p = vec![Tensor::from_rows(&[&[1.0, -2.0]]).unwrap()];
        let g = vec![Tensor::from_rows(&[&[3.0, -0.5]]).unwrap()];
        opt.update(&mut p, &g).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
        assert!((p[0].data()[1] + 1.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.5,
            ..cfg()
        });
        let mut p = vec![Tensor::from_rows(&[&[2.0]]).unwrap()];
        opt.update(&mut p, &[Tensor::zeros(&[1, 1])]).unwrap();
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn minimises_quadratic() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            total_steps: 1000,
            ..cfg()
        });
        let mut p = vec![Tensor::from_rows(&[&[5.0, -3.0]]).unwrap()];
        for _ in 0..1000 {
            let g = p[0].map(|x| 2.0 * (x - 1.0));
            opt.update(&mut p, &[g]).unwrap();
        }
        assert!(p[0].data().iter().all(|x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn rejects_mismatched_lists() {
        let mut opt = AdamW::<f64>::new(cfg());
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(opt.update(&mut p, &[]).is_err());
        assert!(opt.update(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }
}
