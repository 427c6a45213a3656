//! The full model: generator, critic, one logistic-regression head and one
//! pair of class centers per class. Each part lives in its own var store so
//! optimizers never see each other's parameters.

use tch::{nn, Device, Kind, Tensor};

use crate::classifier::LogRegHead;
use crate::critic::Critic;
use crate::error::{Error, Result};
use crate::generator::{make_task_code, Generator, TaskCode};
use crate::losses::ClassCenterPair;
use crate::model::ModelConfig;

pub struct AttriNet {
    config: ModelConfig,
    class_names: Vec<String>,
    gen_vs: nn::VarStore,
    critic_vs: nn::VarStore,
    heads_vs: nn::VarStore,
    pub generator: Generator,
    pub critic: Critic,
    pub heads: Vec<LogRegHead>,
    pub centers: Vec<ClassCenterPair>,
}

impl std::fmt::Debug for AttriNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttriNet").field("config", &self.config).field("class_names", &self.class_names).finish()
    }
}

pub fn head_name(class: usize) -> String {
    format!("class_{class}")
}

impl AttriNet {
    /// Fresh model; weight initialization is driven by `init_seed`.
    pub fn new(config: &ModelConfig, class_names: &[String], init_seed: u64) -> Result<Self> {
        config.validate()?;
        if class_names.len() != config.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{} class names for {} classes",
                class_names.len(),
                config.num_classes
            )));
        }
        tch::manual_seed(init_seed as i64);
        let gen_vs = nn::VarStore::new(Device::Cpu);
        let critic_vs = nn::VarStore::new(Device::Cpu);
        let heads_vs = nn::VarStore::new(Device::Cpu);
        let generator = Generator::new(&gen_vs.root(), config);
        let critic = Critic::new(&critic_vs.root(), config);
        let heads = (0..config.num_classes)
            .map(|c| LogRegHead::new(&heads_vs.root(), &head_name(c), config.image_size, config.pool_factor))
            .collect::<Result<Vec<_>>>()?;
        let centers = (0..config.num_classes)
            .map(|_| ClassCenterPair::zeros(config.image_size, config.image_size))
            .collect();
        Ok(AttriNet {
            config: config.clone(),
            class_names: class_names.to_vec(),
            gen_vs,
            critic_vs,
            heads_vs,
            generator,
            critic,
            heads,
            centers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn task(&self, class: usize) -> Result<TaskCode> {
        make_task_code(class, self.config.num_classes)
    }

    pub fn generator_vars(&self) -> Vec<(String, Tensor)> {
        sorted_vars(&self.gen_vs)
    }

    pub fn critic_vars(&self) -> Vec<(String, Tensor)> {
        sorted_vars(&self.critic_vs)
    }

    pub fn head_vars(&self) -> Vec<(String, Tensor)> {
        sorted_vars(&self.heads_vs)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::IndexOutOfRange { index: class, classes: self.num_classes() });
        }
        Ok(())
    }

    /// `M(x, t_c)`.
    pub fn attribution(&self, x: &Tensor, class: usize) -> Result<Tensor> {
        self.check_class(class)?;
        self.generator.forward(x, &self.task(class)?)
    }

    pub fn logits(&self, x: &Tensor, class: usize) -> Result<Tensor> {
        let m = self.attribution(x, class)?;
        self.heads[class].logits(&m)
    }

    /// `(B,C)` probabilities, evaluated in chunks without gradient tracking.
    pub fn predict(&self, x: &Tensor, chunk: i64) -> Result<Tensor> {
        let n = x.size()[0];
        let mut cols = Vec::with_capacity(self.num_classes());
        tch::no_grad(|| -> Result<()> {
            for c in 0..self.num_classes() {
                let mut parts = Vec::new();
                let mut start = 0;
                while start < n {
                    let len = chunk.min(n - start);
                    parts.push(self.logits(&x.narrow(0, start, len), c)?.sigmoid());
                    start += len;
                }
                cols.push(Tensor::cat(&parts, 0));
            }
            Ok(())
        })?;
        Ok(Tensor::stack(&cols, 1))
    }

    /// Attribution maps for every image, `(N,1,H,W)`, without gradient tracking.
    pub fn attributions(&self, x: &Tensor, class: usize, chunk: i64) -> Result<Tensor> {
        let n = x.size()[0];
        tch::no_grad(|| {
            let mut parts = Vec::new();
            let mut start = 0;
            while start < n {
                let len = chunk.min(n - start);
                parts.push(self.attribution(&x.narrow(0, start, len), class)?);
                start += len;
            }
            Ok(Tensor::cat(&parts, 0))
        })
    }

    pub fn set_centers(&mut self, class: usize, pos: Tensor, neg: Tensor) -> Result<()> {
        self.check_class(class)?;
        let side = self.config.image_size as i64;
        for t in [&pos, &neg] {
            if t.size() != [side, side] {
                return Err(Error::ShapeMismatch(format!("center {:?} for {side}x{side} model", t.size())));
            }
        }
        self.centers[class] = ClassCenterPair { pos: pos.to_kind(Kind::Float), neg: neg.to_kind(Kind::Float) };
        Ok(())
    }
}

/// Variables of a store sorted by name, giving every parameter a stable position.
pub fn sorted_vars(vs: &nn::VarStore) -> Vec<(String, Tensor)> {
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let cfg = ModelConfig { num_classes: 2, image_size: 16, scale: crate::model::Scale::Desk, pool_factor: 4 };
        let a = AttriNet::new(&cfg, &names, 5).unwrap();
        let b = AttriNet::new(&cfg, &names, 5).unwrap();
        for ((na, ta), (nb, tb)) in a.generator_vars().iter().zip(b.generator_vars().iter()) {
            assert_eq!(na, nb);
            assert!(ta.equal(tb));
        }
        assert_eq!(a.head_vars().len(), 2);
        let x = Tensor::zeros([3, 1, 16, 16], (Kind::Float, Device::Cpu));
        let p = a.predict(&x, 2).unwrap();
        assert_eq!(p.size(), vec![3, 2]);
        assert!((p - 0.5).abs().max().double_value(&[]) < 1e-7);
    }
}
