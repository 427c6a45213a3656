//! Task-switched Wasserstein critic `D(x, t_c)` and its gradient penalty.

use tch::{nn, Tensor};

use crate::error::{Error, Result};
use crate::generator::TaskCode;
use crate::model::{conv_init, AdaIn, ModelConfig, TaskEmbedder};

/// Coefficient on the gradient penalty inside the critic loss.
pub const GP_COEFF: f64 = 10.0;
const NORM_EPS: f64 = 1e-16;

#[derive(Debug)]
struct Stage {
    conv: nn::Conv2D,
    norm: AdaIn,
}

#[derive(Debug)]
pub struct Critic {
    config: ModelConfig,
    embed: TaskEmbedder,
    stages: Vec<Stage>,
    out: nn::Conv2D,
}

impl Critic {
    pub fn new(path: &nn::Path, config: &ModelConfig) -> Self {
        let e = config.embedding_width();
        let mut cin = 1;
        let stages = config
            .critic_channels()
            .into_iter()
            .enumerate()
            .map(|(i, cout)| {
                let p = path / format!("stage{i}");
                let cfg = nn::ConvConfig { stride: 2, padding: 1, bias: false, ws_init: conv_init(), ..Default::default() };
                let stage = Stage { conv: nn::conv2d(&p / "conv", cin, cout, 4, cfg), norm: AdaIn::new(&(&p / "adain"), e, cout) };
                cin = cout;
                stage
            })
            .collect();
        let out_cfg = nn::ConvConfig { padding: 1, ws_init: conv_init(), ..Default::default() };
        Critic {
            config: config.clone(),
            embed: TaskEmbedder::new(&(path / "embed"), e),
            stages,
            out: nn::conv2d(path / "out", cin, 1, 3, out_cfg),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// One realism score per image, shape `(B,)`.
    pub fn score(&self, x: &Tensor, task: &TaskCode) -> Result<Tensor> {
        let size = x.size();
        let side = self.config.image_size as i64;
        if size.len() != 4 || size[1] != 1 || size[2] != side || size[3] != side {
            return Err(Error::ShapeMismatch(format!("critic expects (B,1,{side},{side}), got {size:?}")));
        }
        if task.num_classes() != self.config.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "task code for {} classes, model has {}",
                task.num_classes(),
                self.config.num_classes
            )));
        }
        let emb = self.embed.forward(task)?;
        let mut h = x.shallow_clone();
        for stage in &self.stages {
            h = stage.norm.forward(&h.apply(&stage.conv), &emb).relu();
        }
        Ok(h.apply(&self.out).mean_dim(&[1i64, 2, 3][..], false, x.kind()))
    }

    pub fn gradient_penalty(&self, real: &Tensor, fake: &Tensor, task: &TaskCode, eps: &[f32]) -> Result<Tensor> {
        gradient_penalty_with(|x| self.score(x, task), real, fake, eps)
    }
}

/// Mean over the batch of `(‖∇D(x̃)‖₂ − 1)²` at `x̃ = ε·real + (1−ε)·fake`.
/// The returned tensor keeps its graph so it can be differentiated again.
pub fn gradient_penalty_with<F>(critic: F, real: &Tensor, fake: &Tensor, eps: &[f32]) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if real.size() != fake.size() {
        return Err(Error::ShapeMismatch(format!("real {:?} vs fake {:?}", real.size(), fake.size())));
    }
    let b = real.size()[0];
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if eps.len() as i64 != b {
        return Err(Error::ShapeMismatch(format!("{} interpolation weights for batch {b}", eps.len())));
    }
    let mut shape = vec![1i64; real.dim()];
    shape[0] = b;
    let e = Tensor::from_slice(eps).view(shape.as_slice()).to_kind(real.kind());
    let mixed: Tensor = &e * real + (e.ones_like() - &e) * fake;
    // inputs that already carry a graph keep it, so the penalty stays
    // differentiable with respect to them
    let interp = if mixed.requires_grad() { mixed } else { mixed.set_requires_grad(true) };
    let scores = critic(&interp)?;
    let kind = interp.kind();
    let grads = Tensor::run_backward(&[scores.sum(kind)], &[&interp], true, true);
    let norms = (grads[0].flatten(1, -1).square().sum_dim_intlist(&[1i64][..], false, kind) + NORM_EPS).sqrt();
    Ok((norms - 1.0).square().mean(kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::make_task_code;
    use crate::model::Scale;
    use tch::{Device, Kind};

    fn batch(b: i64, side: i64) -> (Tensor, Tensor) {
        let opts = (Kind::Float, Device::Cpu);
        (Tensor::rand([b, 1, side, side], opts) * 2.0 - 1.0, Tensor::rand([b, 1, side, side], opts) * 2.0 - 1.0)
    }

    fn per_item_sum(x: &Tensor) -> Tensor {
        x.flatten(1, -1).sum_dim_intlist(&[1i64][..], false, Kind::Float)
    }

    #[test]
    fn unit_gradient_critic_has_zero_penalty() {
        let (real, fake) = batch(3, 8);
        let n = 64f64.sqrt();
        let gp = gradient_penalty_with(|x| Ok(per_item_sum(x) / n), &real, &fake, &[0.1, 0.5, 0.9]).unwrap();
        assert!(gp.double_value(&[]).abs() < 1e-6);
    }

    #[test]
    fn constant_critic_has_unit_penalty() {
        let (real, fake) = batch(2, 8);
        let gp = gradient_penalty_with(|x| Ok(per_item_sum(x) * 0.0 + 3.0), &real, &fake, &[0.3, 0.7]).unwrap();
        assert!((gp.double_value(&[]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn doubled_linear_critic_has_unit_penalty() {
        let (real, fake) = batch(2, 8);
        let n = 64f64.sqrt();
        let gp = gradient_penalty_with(|x| Ok(per_item_sum(x) * 2.0 / n), &real, &fake, &[0.3, 0.7]).unwrap();
        assert!((gp.double_value(&[]) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn scores_have_batch_shape_and_depend_on_task() {
        tch::manual_seed(11);
        let cfg = ModelConfig { num_classes: 3, image_size: 64, scale: Scale::Desk, pool_factor: 8 };
        let vs = nn::VarStore::new(Device::Cpu);
        let critic = Critic::new(&vs.root(), &cfg);
        let (x, _) = batch(4, 64);
        let a = critic.score(&x, &make_task_code(0, 3).unwrap()).unwrap();
        let again = critic.score(&x, &make_task_code(0, 3).unwrap()).unwrap();
        let b = critic.score(&x, &make_task_code(1, 3).unwrap()).unwrap();
        assert_eq!(a.size(), vec![4]);
        assert!(a.equal(&again));
        assert!((a - b).abs().max().double_value(&[]) > 0.0);
        assert!(critic.score(&x.narrow(2, 0, 32), &make_task_code(0, 3).unwrap()).is_err());
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let (real, _) = batch(2, 8);
        let (fake, _) = batch(3, 8);
        assert!(gradient_penalty_with(|x| Ok(per_item_sum(x)), &real, &fake, &[0.5, 0.5]).is_err());
    }
}
