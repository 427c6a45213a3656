//! Task-switched class attribution generator.
//!
//! `M(x, t_c)` is an image-to-image network whose output is a residual map; the
//! counterfactual `x + M` is the input with the evidence for class `c` removed.
//! The output layer is `tanh(x + out_up) - x`, so `x + M` always lies in [-1, 1].

use tch::{nn, Tensor};

use crate::error::{Error, Result};
use crate::model::{conv_init, AdaIn, ModelConfig, TaskEmbedder, TASK_CODE_REPEAT};

/// One-hot class selector with every entry repeated [`TASK_CODE_REPEAT`] times.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCode {
    class_index: usize,
    num_classes: usize,
    vector: Vec<f32>,
}

pub fn make_task_code(class_index: usize, num_classes: usize) -> Result<TaskCode> {
    if class_index >= num_classes {
        return Err(Error::IndexOutOfRange { index: class_index, classes: num_classes });
    }
    let vector = (0..num_classes * TASK_CODE_REPEAT)
        .map(|i| if i / TASK_CODE_REPEAT == class_index { 1.0 } else { 0.0 })
        .collect();
    Ok(TaskCode { class_index, num_classes, vector })
}

impl TaskCode {
    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vector
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    /// `(1, 20·C)` row vector.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.vector).view([1, -1])
    }
}

#[derive(Debug)]
struct AdaConv {
    conv: nn::Conv2D,
    norm: AdaIn,
}

impl AdaConv {
    fn new(path: &nn::Path, emb: i64, cin: i64, cout: i64, k: i64, stride: i64, padding: i64) -> Self {
        let cfg = nn::ConvConfig { stride, padding, bias: false, ws_init: conv_init(), ..Default::default() };
        AdaConv { conv: nn::conv2d(path / "conv", cin, cout, k, cfg), norm: AdaIn::new(&(path / "adain"), emb, cout) }
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        self.norm.forward(&x.apply(&self.conv), emb).relu()
    }
}

#[derive(Debug)]
struct AdaDeconv {
    conv: nn::ConvTranspose2D,
    norm: AdaIn,
}

impl AdaDeconv {
    fn new(path: &nn::Path, emb: i64, cin: i64, cout: i64) -> Self {
        let cfg = nn::ConvTransposeConfig { stride: 2, padding: 1, bias: false, ws_init: conv_init(), ..Default::default() };
        AdaDeconv {
            conv: nn::conv_transpose2d(path / "deconv", cin, cout, 4, cfg),
            norm: AdaIn::new(&(path / "adain"), emb, cout),
        }
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        self.norm.forward(&x.apply(&self.conv), emb).relu()
    }
}

/// conv-AdaIN-ReLU-conv-AdaIN with an identity skip.
#[derive(Debug)]
struct AdaResBlock {
    first: AdaConv,
    conv: nn::Conv2D,
    norm: AdaIn,
}

impl AdaResBlock {
    fn new(path: &nn::Path, emb: i64, ch: i64) -> Self {
        let cfg = nn::ConvConfig { padding: 1, bias: false, ws_init: conv_init(), ..Default::default() };
        AdaResBlock {
            first: AdaConv::new(&(path / "a"), emb, ch, ch, 3, 1, 1),
            conv: nn::conv2d(path / "b" / "conv", ch, ch, 3, cfg),
            norm: AdaIn::new(&(path / "b" / "adain"), emb, ch),
        }
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        let h = self.first.forward(x, emb);
        x + self.norm.forward(&h.apply(&self.conv), emb)
    }
}

#[derive(Debug)]
pub struct Generator {
    config: ModelConfig,
    embed: TaskEmbedder,
    down: Vec<AdaConv>,
    blocks: Vec<AdaResBlock>,
    up: Vec<AdaDeconv>,
    out: nn::Conv2D,
}

/// `tanh(x + residual) - x`.
pub fn attribution_from_residual(x: &Tensor, residual: &Tensor) -> Tensor {
    (x + residual).tanh() - x
}

impl Generator {
    pub fn new(path: &nn::Path, config: &ModelConfig) -> Self {
        let e = config.embedding_width();
        let [c1, c2, c3] = config.generator_channels();
        let down = vec![
            AdaConv::new(&(path / "down0"), e, 1, c1, 7, 1, 3),
            AdaConv::new(&(path / "down1"), e, c1, c2, 4, 2, 1),
            AdaConv::new(&(path / "down2"), e, c2, c3, 4, 2, 1),
        ];
        let blocks = (0..config.bottleneck_blocks()).map(|i| AdaResBlock::new(&(path / format!("res{i}")), e, c3)).collect();
        let up = vec![AdaDeconv::new(&(path / "up0"), e, c3, c2), AdaDeconv::new(&(path / "up1"), e, c2, c1)];
        let out_cfg = nn::ConvConfig { padding: 3, bias: false, ws_init: conv_init(), ..Default::default() };
        Generator {
            config: config.clone(),
            embed: TaskEmbedder::new(&(path / "embed"), e),
            down,
            blocks,
            up,
            out: nn::conv2d(path / "out", c1, 1, 7, out_cfg),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedder(&self) -> &TaskEmbedder {
        &self.embed
    }

    /// AdaIN `(scale, shift)` of the first down-sampling layer for `task`.
    pub fn first_affine(&self, task: &TaskCode) -> Result<(Tensor, Tensor)> {
        let emb = self.embed.forward(task)?;
        Ok(self.down[0].norm.affine(&emb))
    }

    pub fn output_conv(&self) -> &nn::Conv2D {
        &self.out
    }

    fn check_input(&self, x: &Tensor, task: &TaskCode) -> Result<()> {
        let size = x.size();
        if size.len() != 4 || size[1] != 1 {
            return Err(Error::ShapeMismatch(format!("generator expects (B,1,H,W), got {size:?}")));
        }
        if size[2] % 4 != 0 || size[3] % 4 != 0 {
            return Err(Error::ShapeMismatch(format!("spatial dims {size:?} must be divisible by 4")));
        }
        if task.num_classes() != self.config.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "task code for {} classes, model has {}",
                task.num_classes(),
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Pre-output residual `out_up`.
    pub fn residual(&self, x: &Tensor, task: &TaskCode) -> Result<Tensor> {
        self.check_input(x, task)?;
        let emb = self.embed.forward(task)?;
        let mut h = x.shallow_clone();
        for layer in &self.down {
            h = layer.forward(&h, &emb);
        }
        for block in &self.blocks {
            h = block.forward(&h, &emb);
        }
        for layer in &self.up {
            h = layer.forward(&h, &emb);
        }
        Ok(h.apply(&self.out))
    }

    /// Attribution map `M(x, t_c)` of shape `(B,1,H,W)`.
    pub fn forward(&self, x: &Tensor, task: &TaskCode) -> Result<Tensor> {
        let residual = self.residual(x, task)?;
        Ok(attribution_from_residual(x, &residual))
    }
}

/// `x + M`.
pub fn counterfactual(x: &Tensor, attribution: &Tensor) -> Result<Tensor> {
    if x.size() != attribution.size() {
        return Err(Error::ShapeMismatch(format!("image {:?} vs attribution {:?}", x.size(), attribution.size())));
    }
    Ok(x + attribution)
}
