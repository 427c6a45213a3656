//! Single-file checkpoints: every parameter, class center and optimizer moment
//! as a named f32 array in a safetensors container, plus a JSON header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Scale};
use crate::net::{head_name, AttriNet};

const HEADER_KEY: &str = "header";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    #[serde(rename = "C")]
    pub num_classes: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub scale: Scale,
    pub channels: [i64; 3],
    pub critic_channels: Vec<i64>,
    pub pool_factor: usize,
    pub class_names: Vec<String>,
    /// Generator steps completed when the checkpoint was written.
    pub step: u64,
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
    /// Per-class AUC; `None` for classes the validation set cannot score.
    #[serde(default)]
    pub validation_auc: Option<Vec<Option<f64>>>,
    /// Completed update count per optimizer group.
    #[serde(default)]
    pub optimizer_steps: BTreeMap<String, i64>,
}

impl CheckpointHeader {
    pub fn for_model(net: &AttriNet, step: u64) -> Self {
        let cfg = net.config();
        CheckpointHeader {
            format: FORMAT_VERSION,
            num_classes: cfg.num_classes,
            height: cfg.image_size,
            width: cfg.image_size,
            scale: cfg.scale,
            channels: cfg.generator_channels(),
            critic_channels: cfg.critic_channels(),
            pool_factor: cfg.pool_factor,
            class_names: net.class_names().to_vec(),
            step,
            train_config: None,
            validation_auc: None,
            optimizer_steps: BTreeMap::new(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { num_classes: self.num_classes, image_size: self.height, scale: self.scale, pool_factor: self.pool_factor }
    }

    pub fn mean_auc(&self) -> Option<f64> {
        let scored: Vec<f64> = self.validation_auc.as_ref()?.iter().flatten().copied().collect();
        (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
    }

    pub fn set_validation_auc(&mut self, auc: &[f64]) {
        self.validation_auc = Some(auc.iter().map(|&a| (!a.is_nan()).then_some(a)).collect());
    }

    /// Stored AUCs with unscored classes as NaN.
    pub fn validation_auc_values(&self) -> Option<Vec<f64>> {
        self.validation_auc.as_ref().map(|a| a.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
    }
}

/// Named arrays gathered for writing.
#[derive(Debug, Default)]
pub struct TensorBundle {
    entries: Vec<(String, Vec<usize>, Vec<u8>)>,
}

impl TensorBundle {
    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let t = t.detach().to_kind(Kind::Float).contiguous();
        let shape: Vec<usize> = t.size().iter().map(|&d| d as usize).collect();
        let values: Vec<f32> = Vec::try_from(&t.flatten(0, -1))?;
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.entries.push((name.into(), shape, bytes));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Every model tensor under its archive name.
pub fn model_tensors(net: &AttriNet) -> Result<TensorBundle> {
    let mut b = TensorBundle::default();
    for (name, t) in net.generator_vars() {
        b.push(format!("generator/{name}"), &t)?;
    }
    for (name, t) in net.critic_vars() {
        b.push(format!("critic/{name}"), &t)?;
    }
    for (c, head) in net.heads.iter().enumerate() {
        b.push(format!("heads/{}", head_name(c)), head.weights())?;
    }
    for (c, centers) in net.centers.iter().enumerate() {
        b.push(format!("centers/class_{c}_pos"), &centers.pos)?;
        b.push(format!("centers/class_{c}_neg"), &centers.neg)?;
    }
    Ok(b)
}

pub fn write(path: &Path, header: &CheckpointHeader, bundle: &TensorBundle) -> Result<()> {
    let views = bundle
        .entries
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(header)?)]);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::tensor::serialize_to_file(views, &Some(meta), path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// A checkpoint read fully into memory.
#[derive(Debug)]
pub struct Archive {
    pub header: CheckpointHeader,
    tensors: HashMap<String, Tensor>,
}

impl Archive {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
        let header_text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing header", path.display())))?;
        let header: CheckpointHeader = serde_json::from_str(header_text)?;
        if header.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", header.format)));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(bad)?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("{name}: expected f32, found {:?}", view.dtype())));
            }
            let values: Vec<f32> =
                view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let shape: Vec<i64> = view.shape().iter().map(|&d| d as i64).collect();
            tensors.insert(name, Tensor::from_slice(&values).view(shape.as_slice()));
        }
        Ok(Archive { header, tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Builds the model stored in this archive.
    pub fn model(&self) -> Result<AttriNet> {
        let cfg = self.header.model_config();
        let mut net = AttriNet::new(&cfg, &self.header.class_names, 0)?;
        copy_into(&net.generator_vars(), "generator", self)?;
        copy_into(&net.critic_vars(), "critic", self)?;
        copy_into(&net.head_vars(), "heads", self)?;
        for c in 0..cfg.num_classes {
            let pos = self.get(&format!("centers/class_{c}_pos"))?.copy();
            let neg = self.get(&format!("centers/class_{c}_neg"))?.copy();
            net.set_centers(c, pos, neg)?;
        }
        Ok(net)
    }
}

fn copy_into(vars: &[(String, Tensor)], prefix: &str, archive: &Archive) -> Result<()> {
    tch::no_grad(|| {
        for (name, var) in vars {
            let src = archive.get(&format!("{prefix}/{name}"))?;
            if src.size() != var.size() {
                return Err(Error::Checkpoint(format!("{prefix}/{name}: shape {:?} vs {:?}", src.size(), var.size())));
            }
            var.shallow_clone().copy_(src);
        }
        Ok(())
    })
}

pub fn save_model(path: &Path, net: &AttriNet, step: u64) -> Result<()> {
    write(path, &CheckpointHeader::for_model(net, step), &model_tensors(net)?)
}

pub fn load_model(path: &Path) -> Result<(AttriNet, CheckpointHeader)> {
    let archive = Archive::read(path)?;
    let net = archive.model()?;
    Ok((net, archive.header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    #[test]
    fn round_trip_is_bitwise() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let cfg = ModelConfig { num_classes: 2, image_size: 16, scale: Scale::Desk, pool_factor: 4 };
        let mut net = AttriNet::new(&cfg, &names, 3).unwrap();
        let opts = (Kind::Float, Device::Cpu);
        net.set_centers(1, Tensor::randn([16, 16], opts), Tensor::randn([16, 16], opts)).unwrap();
        tch::no_grad(|| {
            let _ = net.heads[0].weights().shallow_clone().copy_(&Tensor::randn([4, 4], opts));
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        save_model(&path, &net, 7).unwrap();
        let (back, header) = load_model(&path).unwrap();
        assert_eq!(header.step, 7);
        assert_eq!(header.num_classes, 2);
        for (a, b) in net.generator_vars().iter().zip(back.generator_vars().iter()) {
            assert!(a.1.equal(&b.1), "{}", a.0);
        }
        for (a, b) in net.critic_vars().iter().zip(back.critic_vars().iter()) {
            assert!(a.1.equal(&b.1), "{}", a.0);
        }
        assert!(net.heads[0].weights().equal(back.heads[0].weights()));
        assert!(net.centers[1].pos.equal(&back.centers[1].pos));
        assert!(net.centers[1].neg.equal(&back.centers[1].neg));
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Archive::read(&path), Err(Error::Checkpoint(_))));
    }
}
