//! Adam over an explicit, ordered parameter list. The moment estimates are
//! plain tensors so they can be checkpointed and restored exactly.

use tch::Tensor;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, betas: (f64, f64)) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn steps_taken(&self) -> i64 {
        self.step
    }

    /// Applies one update. A missing gradient (undefined tensor) is treated as zero.
    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        tch::no_grad(|| {
            for ((p, g), (m, v)) in params.iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                if !g.defined() {
                    // moments still decay so resumed runs see the same sequence
                    *m = &*m * self.beta1;
                    *v = &*v * self.beta2;
                    continue;
                }
                *m = &*m * self.beta1 + g * (1.0 - self.beta1);
                *v = &*v * self.beta2 + g.square() * (1.0 - self.beta2);
                let update = (&*m / bc1) / ((&*v / bc2).sqrt() + self.eps) * self.lr;
                let mut p = p.shallow_clone();
                let _ = p.f_sub_(&update);
            }
        });
        Ok(())
    }

    /// `(step, first moments, second moments)`.
    pub fn state(&self) -> (i64, &[Tensor], &[Tensor]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: i64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameter count".into()));
        }
        for (old, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if old.size() != new.size() {
                return Err(Error::Checkpoint(format!("optimizer moment {:?} vs {:?}", new.size(), old.size())));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Gradients of `loss` with respect to `params`; parameters the loss does not
/// reach get an undefined tensor.
pub fn gradients(loss: &Tensor, params: &[Tensor]) -> Vec<Tensor> {
    Tensor::run_backward(&[loss], params, false, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    #[test]
    fn first_step_moves_by_lr() {
        let p = Tensor::from_slice(&[1.0f32, -2.0]).set_requires_grad(true);
        let mut opt = Adam::new(&[p.shallow_clone()], 0.1, (0.5, 0.999));
        let loss = (&p * &p).sum(Kind::Float);
        let g = gradients(&loss, &[p.shallow_clone()]);
        opt.step(&[p.shallow_clone()], &g).unwrap();
        // bias-corrected first Adam step is lr·sign(g)
        let v: Vec<f32> = Vec::try_from(&p.detach()).unwrap();
        assert!((v[0] - 0.9).abs() < 1e-5 && (v[1] + 1.9).abs() < 1e-5, "{v:?}");
    }

    #[test]
    fn minimizes_quadratic() {
        let p = Tensor::zeros([3], (Kind::Float, Device::Cpu)).set_requires_grad(true);
        let target = Tensor::from_slice(&[0.5f32, -0.25, 1.0]);
        let mut opt = Adam::new(&[p.shallow_clone()], 0.05, (0.9, 0.999));
        for _ in 0..500 {
            let loss = (&p - &target).square().sum(Kind::Float);
            let g = gradients(&loss, &[p.shallow_clone()]);
            opt.step(&[p.shallow_clone()], &g).unwrap();
        }
        assert!((&p - &target).abs().max().double_value(&[]) < 1e-2);
    }
}
