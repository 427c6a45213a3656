//! Alternating critic / generator / classifier training over the classes,
//! with checkpointing, resume and validation-AUC model selection.
//!
//! Every random draw is addressed by `(seed, step, purpose, ...)`, so a run
//! resumed from a checkpoint at step K replays steps K+1.. exactly.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::checkpoint::{self, Archive, CheckpointHeader};
use crate::dataset::{Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::guidance::{build_avoidance, build_pseudo_bbox, build_pseudo_binary, build_pseudo_weighted};
use crate::guidance::{select_mask, GuidanceMask, GuidanceMode, GuidancePolicy, OversampleStream, PseudoKind};
use crate::losses::{self, ClassTerms, LossWeights, Term};
use crate::metrics;
use crate::model::{ModelConfig, Scale};
use crate::net::AttriNet;
use crate::optim::{gradients, Adam};
use crate::seed::{derive_seed, rng_for};

const PURPOSE_GENERATOR_BATCH: u64 = 1;
const PURPOSE_CRITIC_BATCH: u64 = 2;
const PURPOSE_PENALTY: u64 = 3;
const PURPOSE_CLASS_ORDER: u64 = 4;
const PURPOSE_OVERSAMPLE: u64 = 5;
const PURPOSE_PSEUDO_SPLIT: u64 = 6;
const PURPOSE_INIT: u64 = 7;

pub const LOSS_LOG: &str = "loss_log.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const NAN_DUMP: &str = "nan_dump.safetensors";
const EVAL_CHUNK: i64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassOrder {
    #[default]
    Cyclic,
    /// A fresh permutation of the classes every `C` steps.
    Random,
}

fn default_scale() -> Scale {
    Scale::Desk
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub generator_steps: u64,
    pub batch_size: usize,
    pub lr_adam: f64,
    pub lr_centers: f64,
    pub betas: (f64, f64),
    pub critic_steps_per_gen: usize,
    pub critic_boost_every: u64,
    pub critic_boost_steps: usize,
    pub critic_boost_initial: u64,
    /// Boosted steps run `boost + base` critic updates when true, `boost` alone otherwise.
    pub critic_boost_additive: bool,
    pub classifier_steps_per_gen: usize,
    pub class_order: ClassOrder,
    pub guidance: GuidancePolicy,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
    #[serde(default = "default_scale")]
    pub scale: Scale,
    pub pool_factor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator_steps: 2000,
            batch_size: 4,
            lr_adam: 1e-4,
            lr_centers: 0.1,
            betas: (0.5, 0.999),
            critic_steps_per_gen: 5,
            critic_boost_every: 100,
            critic_boost_steps: 100,
            critic_boost_initial: 25,
            critic_boost_additive: true,
            classifier_steps_per_gen: 5,
            class_order: ClassOrder::Cyclic,
            guidance: GuidancePolicy::default(),
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 250,
            scale: Scale::Desk,
            pool_factor: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("generator_steps", self.generator_steps),
            ("batch_size", self.batch_size as u64),
            ("critic_steps_per_gen", self.critic_steps_per_gen as u64),
            ("critic_boost_every", self.critic_boost_every),
            ("classifier_steps_per_gen", self.classifier_steps_per_gen as u64),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("lr_adam", self.lr_adam), ("lr_centers", self.lr_centers)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::InvalidConfig(format!("Adam betas {:?} outside [0,1)", self.betas)));
        }
        self.guidance.validate()?;
        self.loss_weights.validate()
    }

    pub fn model_config(&self, num_classes: usize, image_size: usize) -> ModelConfig {
        ModelConfig { num_classes, image_size, scale: self.scale, pool_factor: self.pool_factor }
    }
}

/// `(critic updates, classifier updates)` for generator step `gen_step` (1-based).
pub fn schedule(gen_step: u64, cfg: &TrainConfig) -> (usize, usize) {
    let boosted = gen_step <= cfg.critic_boost_initial || gen_step % cfg.critic_boost_every == 0;
    let critic = match (boosted, cfg.critic_boost_additive) {
        (false, _) => cfg.critic_steps_per_gen,
        (true, true) => cfg.critic_steps_per_gen + cfg.critic_boost_steps,
        (true, false) => cfg.critic_boost_steps,
    };
    (critic, cfg.classifier_steps_per_gen)
}

/// Class visited at generator step `gen_step` (1-based).
pub fn class_for_step(gen_step: u64, num_classes: usize, cfg: &TrainConfig) -> usize {
    let k = (gen_step - 1) as usize;
    match cfg.class_order {
        ClassOrder::Cyclic => k % num_classes,
        ClassOrder::Random => {
            let round = (k / num_classes) as u64;
            let mut order: Vec<usize> = (0..num_classes).collect();
            order.shuffle(&mut rng_for(cfg.seed, &[PURPOSE_CLASS_ORDER, round]));
            order[k % num_classes]
        }
    }
}

/// Index of the best `(step, mean AUC)` entry: highest AUC, earliest step on ties.
pub fn best_index(candidates: &[(u64, f64)]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, (_, auc))| !auc.is_nan())
        .fold(None::<usize>, |best, (i, &(step, auc))| match best {
            None => Some(i),
            Some(b) => {
                let (bstep, bauc) = candidates[b];
                if auc > bauc || (auc == bauc && step < bstep) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        })
}

/// Per-class validation AUC; classes with a single label value give NaN.
pub fn validation_auc(net: &AttriNet, data: &Dataset) -> Result<Vec<f64>> {
    let probs = net.predict(data.all_pixels(), EVAL_CHUNK)?;
    (0..net.num_classes())
        .map(|c| {
            let scores: Vec<f64> = Vec::try_from(&probs.select(1, c as i64).to_kind(Kind::Double))?;
            let labels: Vec<bool> = (0..data.len()).map(|i| data.label(i, c)).collect();
            match metrics::auc(&scores, &labels) {
                Ok(a) => Ok(a),
                Err(Error::DegenerateClass(_)) => Ok(f64::NAN),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Checkpoint with the highest mean validation AUC. AUCs stored in the
/// checkpoint headers are used when present, otherwise computed on `validation`.
pub fn select_best(checkpoints: &[PathBuf], validation: Option<&Dataset>) -> Result<PathBuf> {
    if checkpoints.is_empty() {
        return Err(Error::Checkpoint("no checkpoints to select from".into()));
    }
    let mut scored = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let archive = Archive::read(path)?;
        let auc = match (archive.header.mean_auc(), validation) {
            (Some(a), _) => a,
            (None, Some(v)) => {
                let aucs = validation_auc(&archive.model()?, v)?;
                mean_ignoring_nan(&aucs)
            }
            (None, None) => f64::NAN,
        };
        scored.push((archive.header.step, auc));
    }
    let best = best_index(&scored).unwrap_or(scored.len() - 1);
    Ok(checkpoints[best].clone())
}

fn mean_ignoring_nan(v: &[f64]) -> f64 {
    let valid: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if valid.is_empty() {
        f64::NAN
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    }
}

/// Applies `ATTRINET_THREADS`: 0 selects the serial mode, `n` caps torch at `n` threads.
pub fn configure_threads_from_env() -> Option<usize> {
    let n: usize = std::env::var("ATTRINET_THREADS").ok()?.trim().parse().ok()?;
    tch::set_num_threads(n.max(1) as i32);
    Some(n)
}

/// Guidance inputs prepared once per class.
#[derive(Debug)]
struct ClassGuide {
    /// Replaces every mask of this class when set.
    avoidance: Option<GuidanceMask>,
    pseudo: Option<GuidanceMask>,
    stream: Option<OversampleStream>,
}

fn build_guides(data: &Dataset, cfg: &TrainConfig) -> Result<Vec<ClassGuide>> {
    let policy = &cfg.guidance;
    let size = data.size();
    (0..data.num_classes())
        .map(|c| {
            let avoidance = match &policy.avoidance {
                Some(a) if policy.enabled() && a.class == c => Some(build_avoidance(&a.exclusion, &a.center, size, size)?),
                _ => None,
            };
            let mut guide = ClassGuide { avoidance, pseudo: None, stream: None };
            if policy.mode != GuidanceMode::Mixed {
                return Ok(guide);
            }
            let (annotated, unannotated): (Vec<usize>, Vec<usize>) =
                data.positives(c).iter().partition(|&&i| data.gt_mask(i, c).is_some());
            if guide.avoidance.is_none() {
                let mut split = annotated.clone();
                split.shuffle(&mut rng_for(cfg.seed, &[PURPOSE_PSEUDO_SPLIT, c as u64]));
                let keep = ((split.len() as f64 * policy.pseudo_split).round() as usize).clamp(1.min(split.len()), split.len());
                let records: Vec<_> = split[..keep].iter().map(|&i| data.records()[i].clone()).collect();
                let build = match policy.pseudo_kind {
                    PseudoKind::Binary => build_pseudo_binary,
                    PseudoKind::Weighted => build_pseudo_weighted,
                    PseudoKind::Bbox => build_pseudo_bbox,
                };
                guide.pseudo = Some(build(&records, c, size, size)?);
            }
            if !annotated.is_empty() || !unannotated.is_empty() {
                let seed = derive_seed(cfg.seed, &[PURPOSE_OVERSAMPLE, c as u64]);
                guide.stream = Some(OversampleStream::new(annotated, unannotated, policy.oversample_annotated_freq, seed)?);
            }
            Ok(guide)
        })
        .collect()
}

/// Loss values recorded for one generator step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub class: usize,
    pub values: Vec<(&'static str, f64)>,
}

pub const LOGGED_TERMS: [&str; 8] = ["adv", "cls", "reg", "ctr", "gd", "total", "critic", "gp"];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub path: PathBuf,
    pub step: u64,
    pub validation_auc: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub checkpoints: Vec<CheckpointInfo>,
    pub loss_log: PathBuf,
    pub train_log: PathBuf,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a Dataset,
    validation: Option<&'a Dataset>,
    out_dir: PathBuf,
    net: AttriNet,
    generator_opt: Adam,
    critic_opt: Adam,
    head_opts: Vec<Adam>,
    guides: Vec<ClassGuide>,
    step: u64,
    checkpoints: Vec<CheckpointInfo>,
    started: Instant,
}

fn params(vars: &[(String, Tensor)]) -> Vec<Tensor> {
    vars.iter().map(|(_, t)| t.shallow_clone()).collect()
}

fn check_ready(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    for c in 0..data.num_classes() {
        let (p, n) = (data.positives(c).len(), data.negatives(c).len());
        if p.min(n) < cfg.batch_size {
            return Err(Error::InsufficientSamples { class: c, needed: cfg.batch_size, available: p.min(n) });
        }
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a Dataset, validation: Option<&'a Dataset>, cfg: &TrainConfig, out_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        check_ready(train, cfg)?;
        let model_cfg = cfg.model_config(train.num_classes(), train.size());
        let net = AttriNet::new(&model_cfg, train.class_names(), derive_seed(cfg.seed, &[PURPOSE_INIT]))?;
        let t = Self::assemble(train, validation, cfg, out_dir, net)?;
        t.start_logs()?;
        Ok(t)
    }

    /// Continues from `checkpoint`. `cfg` must match the stored configuration
    /// except for `generator_steps` and `checkpoint_every`.
    pub fn resume(
        checkpoint: &Path,
        train: &'a Dataset,
        validation: Option<&'a Dataset>,
        cfg: &TrainConfig,
        out_dir: &Path,
    ) -> Result<Self> {
        cfg.validate()?;
        let archive = Archive::read(checkpoint)?;
        if let Some(stored) = &archive.header.train_config {
            let mut stored: TrainConfig = serde_json::from_value(stored.clone())?;
            stored.generator_steps = cfg.generator_steps;
            stored.checkpoint_every = cfg.checkpoint_every;
            if &stored != cfg {
                return Err(Error::InvalidConfig("resume configuration differs from the checkpoint's".into()));
            }
        }
        if archive.header.class_names != train.class_names() || archive.header.height != train.size() {
            return Err(Error::Checkpoint("checkpoint does not match the training dataset".into()));
        }
        let net = archive.model()?;
        let mut t = Self::assemble(train, validation, cfg, out_dir, net)?;
        t.step = archive.header.step;
        t.restore_optimizers(&archive)?;
        truncate_log(&out_dir.join(LOSS_LOG), t.step)?;
        truncate_log(&out_dir.join(TRAIN_LOG), t.step)?;
        t.checkpoints = list_checkpoints(out_dir)?.into_iter().filter(|c| c.step <= t.step).collect();
        Ok(t)
    }

    fn assemble(
        train: &'a Dataset,
        validation: Option<&'a Dataset>,
        cfg: &TrainConfig,
        out_dir: &Path,
        net: AttriNet,
    ) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let generator_opt = Adam::new(&params(&net.generator_vars()), cfg.lr_adam, cfg.betas);
        let critic_opt = Adam::new(&params(&net.critic_vars()), cfg.lr_adam, cfg.betas);
        let head_opts =
            net.heads.iter().map(|h| Adam::new(&[h.weights().shallow_clone()], cfg.lr_adam, cfg.betas)).collect();
        let guides = build_guides(train, cfg)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            train,
            validation,
            out_dir: out_dir.to_path_buf(),
            net,
            generator_opt,
            critic_opt,
            head_opts,
            guides,
            step: 0,
            checkpoints: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn net(&self) -> &AttriNet {
        &self.net
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn start_logs(&self) -> Result<()> {
        let write = |name: &str, header: String| {
            let p = self.out_dir.join(name);
            std::fs::write(&p, header + "\n").map_err(|e| Error::io(&p, e))
        };
        write(LOSS_LOG, "step,class,term,value".into())?;
        write(TRAIN_LOG, format!("step,class,{},wall_time", LOGGED_TERMS.join(",")))
    }

    fn append_logs(&self, rec: &StepRecord) -> Result<()> {
        let append = |name: &str, text: String| -> Result<()> {
            let p = self.out_dir.join(name);
            let mut f = OpenOptions::new().append(true).open(&p).map_err(|e| Error::io(&p, e))?;
            f.write_all(text.as_bytes()).map_err(|e| Error::io(&p, e))
        };
        let class = &self.net.class_names()[rec.class];
        let long: String = rec.values.iter().map(|(t, v)| format!("{},{class},{t},{v:e}\n", rec.step)).collect();
        append(LOSS_LOG, long)?;
        let wide: Vec<String> = rec.values.iter().map(|(_, v)| format!("{v:e}")).collect();
        let wall = self.started.elapsed().as_secs_f64();
        append(TRAIN_LOG, format!("{},{class},{},{wall:.3}\n", rec.step, wide.join(",")))
    }

    /// Runs until `generator_steps` are done and returns the produced artifacts.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        self.run_until(self.cfg.generator_steps)?;
        if self.checkpoints.last().map(|c| c.step) != Some(self.step) {
            self.save_checkpoint()?;
        }
        let final_checkpoint = self.checkpoints.last().map(|c| c.path.clone()).expect("final checkpoint written");
        let scored: Vec<(u64, f64)> = self
            .checkpoints
            .iter()
            .map(|c| (c.step, c.validation_auc.as_deref().map(mean_ignoring_nan).unwrap_or(f64::NAN)))
            .collect();
        let best_checkpoint = best_index(&scored).map(|i| self.checkpoints[i].path.clone()).unwrap_or(final_checkpoint.clone());
        Ok(TrainOutcome {
            final_checkpoint,
            best_checkpoint,
            checkpoints: self.checkpoints.clone(),
            loss_log: self.out_dir.join(LOSS_LOG),
            train_log: self.out_dir.join(TRAIN_LOG),
        })
    }

    /// Trains up to generator step `last` (inclusive), checkpointing on schedule.
    pub fn run_until(&mut self, last: u64) -> Result<()> {
        while self.step < last.min(self.cfg.generator_steps) {
            let rec = self.train_step()?;
            self.append_logs(&rec)?;
            if self.step % self.cfg.checkpoint_every == 0 {
                self.save_checkpoint()?;
            }
        }
        Ok(())
    }

    fn draw_generator_batch(&self, class: usize, step: u64) -> Result<(ImageBatch, ImageBatch)> {
        let b = self.cfg.batch_size;
        let seed = derive_seed(self.cfg.seed, &[step, PURPOSE_GENERATOR_BATCH]);
        let (pos, neg) = self.train.sample_pair_indices(class, b, seed)?;
        let pos = match &self.guides[class].stream {
            Some(stream) => (0..b as u64).map(|j| stream.at((step - 1) * b as u64 + j)).collect(),
            None => pos,
        };
        Ok((self.train.batch(&pos)?, self.train.batch(&neg)?))
    }

    /// `(B,1,H,W)` guidance masks for the positive items plus a 0/1 weight per item.
    fn guidance_masks(&self, class: usize, pos: &ImageBatch) -> Option<(Tensor, Tensor)> {
        let policy = &self.cfg.guidance;
        if !policy.enabled() {
            return None;
        }
        let guide = &self.guides[class];
        let size = self.train.size();
        let mut grids = Vec::with_capacity(pos.len());
        let mut used = Vec::with_capacity(pos.len());
        for &i in &pos.indices {
            let mask = match &guide.avoidance {
                Some(a) => Some(a.clone()),
                None => select_mask(self.train.gt_mask(i, class), class, policy.mode, guide.pseudo.as_ref()),
            };
            used.push(mask.is_some() as u8 as f32);
            grids.push(mask.map(|m| m.values).unwrap_or_else(|| Grid::zeros(size, size)).to_tensor().unsqueeze(0));
        }
        Some((Tensor::stack(&grids, 0), Tensor::from_slice(&used)))
    }

    fn critic_update(&mut self, class: usize, step: u64, k: u64) -> Result<(f64, f64)> {
        let b = self.cfg.batch_size;
        let seed = derive_seed(self.cfg.seed, &[step, PURPOSE_CRITIC_BATCH, k]);
        let (pos, neg) = self.train.sample_pair_indices(class, b, seed)?;
        let (pos, neg) = (self.train.batch(&pos)?, self.train.batch(&neg)?);
        let task = self.net.task(class)?;
        let fake = tch::no_grad(|| -> Result<Tensor> {
            let m = self.net.generator.forward(&pos.pixels, &task)?;
            Ok(&pos.pixels + m)
        })?;
        let scores = self.net.critic.score(&Tensor::cat(&[&neg.pixels, &fake], 0), &task)?;
        let (real_s, fake_s) = (scores.narrow(0, 0, b as i64), scores.narrow(0, b as i64, b as i64));
        let mut rng = rng_for(self.cfg.seed, &[step, PURPOSE_PENALTY, k]);
        let eps: Vec<f32> = (0..b).map(|_| rng.gen::<f32>()).collect();
        let gp = self.net.critic.gradient_penalty(&neg.pixels, &fake, &task, &eps)?;
        let loss = losses::critic_loss(&real_s, &fake_s, Some(&gp))?;
        let value = loss.double_value(&[]);
        if value.is_nan() {
            return self.abort(step, "critic");
        }
        let vars = params(&self.net.critic_vars());
        let grads = gradients(&loss, &vars);
        self.critic_opt.step(&vars, &grads)?;
        Ok((value, gp.double_value(&[])))
    }

    fn abort<T>(&self, step: u64, term: &str) -> Result<T> {
        let dump = self.out_dir.join(NAN_DUMP);
        if let Err(e) = self.write_checkpoint(&dump, step.saturating_sub(1), None) {
            log::error!("failed to write state dump {}: {e}", dump.display());
        }
        Err(Error::NaNLoss { step: step as usize, term: term.to_string() })
    }

    /// One generator step: scheduled critic updates, a generator update, the
    /// center update and the scheduled updates of head `c` alone.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let c = class_for_step(step, self.net.num_classes(), &self.cfg);
        let (critic_updates, classifier_updates) = schedule(step, &self.cfg);

        let (mut critic_sum, mut gp_sum) = (0.0, 0.0);
        for k in 0..critic_updates as u64 {
            let (l, gp) = self.critic_update(c, step, k)?;
            critic_sum += l;
            gp_sum += gp;
        }

        let mut values = self.generator_phase(c, step, classifier_updates)?;
        let n = critic_updates.max(1) as f64;
        values.push(("critic", critic_sum / n));
        values.push(("gp", gp_sum / n));
        if let Some((name, _)) = values.iter().find(|(_, v)| v.is_nan()) {
            return self.abort(step, name);
        }
        self.step = step;
        Ok(StepRecord { step, class: c, values })
    }

    /// Generator update on a fresh batch, then the center update and
    /// `classifier_updates` steps of head `c` on the detached maps.
    fn generator_phase(&mut self, c: usize, step: u64, classifier_updates: usize) -> Result<Vec<(&'static str, f64)>> {
        let b = self.cfg.batch_size as i64;
        let (pos, neg) = self.draw_generator_batch(c, step)?;
        let task = self.net.task(c)?;
        let x = Tensor::cat(&[&pos.pixels, &neg.pixels], 0);
        let m = self.net.generator.forward(&x, &task)?;
        let (m_pos, m_neg) = (m.narrow(0, 0, b), m.narrow(0, b, b));
        let w = &self.cfg.loss_weights;

        let adversarial = losses::adversarial_loss(&self.net.critic.score(&(&pos.pixels + &m_pos), &task)?)?;
        let targets = Tensor::cat(&[Tensor::ones([b], (Kind::Float, tch::Device::Cpu)), Tensor::zeros([b], (Kind::Float, tch::Device::Cpu))], 0);
        let classification = losses::classification_loss_logits(&self.net.heads[c].logits(&m)?, &targets)?;
        let regularization = losses::reg_loss(Some(&m_neg), Some(&m_pos), w.alpha_neg, w.alpha_pos, w.pixel_reduction);
        let (ones, zeros) = (vec![1u8; b as usize], vec![0u8; b as usize]);
        let center = losses::center_loss(&m_pos, &ones, &self.net.centers[c])?
            + losses::center_loss(&m_neg, &zeros, &self.net.centers[c])?;
        let guidance = match self.guidance_masks(c, &pos) {
            Some((masks, used)) => Some((losses::guidance_loss_per_item(&m_pos, &masks)? * used).sum(Kind::Float) / b as f64),
            None => None,
        };
        let terms = ClassTerms { adversarial, classification, regularization, center, guidance };
        let total = losses::total_generator_loss(std::slice::from_ref(&terms), w);

        let mut values: Vec<(&'static str, f64)> = Vec::with_capacity(LOGGED_TERMS.len());
        for term in Term::ALL {
            values.push((term.name(), terms.get(term).map(|t| t.double_value(&[])).unwrap_or(0.0)));
        }
        values.push(("total", total.double_value(&[])));
        if let Some((name, _)) = values.iter().find(|(_, v)| v.is_nan()) {
            return self.abort(step, name);
        }

        let vars = params(&self.net.generator_vars());
        let grads = gradients(&total, &vars);
        self.generator_opt.step(&vars, &grads)?;

        let maps = m.detach();
        let bits: Vec<u8> = ones.iter().chain(&zeros).copied().collect();
        self.net.centers[c].update(&maps, &bits, self.cfg.lr_centers)?;

        let head = [self.net.heads[c].weights().shallow_clone()];
        for _ in 0..classifier_updates {
            let loss = losses::classification_loss_logits(&self.net.heads[c].logits(&maps)?, &targets)?;
            let grads = gradients(&loss, &head);
            self.head_opts[c].step(&head, &grads)?;
        }
        Ok(values)
    }

    fn header(&self, step: u64, validation_auc: Option<Vec<f64>>) -> Result<CheckpointHeader> {
        let mut h = CheckpointHeader::for_model(&self.net, step);
        h.train_config = Some(serde_json::to_value(&self.cfg)?);
        if let Some(a) = &validation_auc {
            h.set_validation_auc(a);
        }
        h.optimizer_steps.insert("generator".into(), self.generator_opt.steps_taken());
        h.optimizer_steps.insert("critic".into(), self.critic_opt.steps_taken());
        for (c, opt) in self.head_opts.iter().enumerate() {
            h.optimizer_steps.insert(format!("head_{c}"), opt.steps_taken());
        }
        Ok(h)
    }

    fn write_checkpoint(&self, path: &Path, step: u64, validation_auc: Option<Vec<f64>>) -> Result<()> {
        let mut bundle = checkpoint::model_tensors(&self.net)?;
        let groups = std::iter::once(("generator".to_string(), &self.generator_opt))
            .chain(std::iter::once(("critic".to_string(), &self.critic_opt)))
            .chain(self.head_opts.iter().enumerate().map(|(c, o)| (format!("head_{c}"), o)));
        for (name, opt) in groups {
            let (_, m, v) = opt.state();
            for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
                bundle.push(format!("optim/{name}/m/{i:04}"), mi)?;
                bundle.push(format!("optim/{name}/v/{i:04}"), vi)?;
            }
        }
        checkpoint::write(path, &self.header(step, validation_auc)?, &bundle)
    }

    fn restore_optimizers(&mut self, archive: &Archive) -> Result<()> {
        let restore = |name: &str, opt: &mut Adam, count: usize| -> Result<()> {
            let steps = *archive
                .header
                .optimizer_steps
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{name}`")))?;
            let load = |kind: &str| -> Result<Vec<Tensor>> {
                (0..count).map(|i| archive.get(&format!("optim/{name}/{kind}/{i:04}")).map(Tensor::copy)).collect()
            };
            opt.restore(steps, load("m")?, load("v")?)
        };
        restore("generator", &mut self.generator_opt, self.net.generator_vars().len())?;
        restore("critic", &mut self.critic_opt, self.net.critic_vars().len())?;
        for (c, opt) in self.head_opts.iter_mut().enumerate() {
            restore(&format!("head_{c}"), opt, 1)?;
        }
        Ok(())
    }

    /// Writes `checkpoints/step_XXXXXX.safetensors` with validation AUC in the header.
    pub fn save_checkpoint(&mut self) -> Result<PathBuf> {
        let auc = match self.validation {
            Some(v) => Some(validation_auc(&self.net, v)?),
            None => None,
        };
        let path = checkpoint_path(&self.out_dir, self.step);
        self.write_checkpoint(&path, self.step, auc.clone())?;
        if let Some(a) = &auc {
            log::info!("step {}: validation AUC {:?}", self.step, a);
        }
        self.checkpoints.retain(|c| c.step != self.step);
        self.checkpoints.push(CheckpointInfo { path: path.clone(), step: self.step, validation_auc: auc });
        Ok(path)
    }
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.safetensors"))
}

/// Checkpoints under `out_dir/checkpoints`, ordered by step.
pub fn list_checkpoints(out_dir: &Path) -> Result<Vec<CheckpointInfo>> {
    let dir = out_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("safetensors") {
            continue;
        }
        let header = Archive::read(&path)?.header;
        found.push(CheckpointInfo { path, step: header.step, validation_auc: header.validation_auc_values() });
    }
    found.sort_by_key(|c| c.step);
    Ok(found)
}

/// Drops log rows whose step exceeds `last_step`, keeping the header.
fn truncate_log(path: &Path, last_step: u64) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if i == 0 || step.is_some_and(|s| s <= last_step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains a fresh model on `train` and returns its artifacts.
pub fn train(train: &Dataset, validation: Option<&Dataset>, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    Trainer::new(train, validation, cfg, out_dir)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_synthetic, SyntheticConfig};
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(schedule(10, &cfg), (105, 5));
        assert_eq!(schedule(37, &cfg), (5, 5));
        assert_eq!(schedule(200, &cfg), (105, 5));
        assert_eq!(schedule(26, &cfg), (5, 5));
        let replace = TrainConfig { critic_boost_additive: false, ..TrainConfig::default() };
        assert_eq!(schedule(200, &replace), (100, 5));
    }

    proptest! {
        #[test]
        fn schedule_matches_rule(step in 1u64..20_000) {
            let (critic, cls) = schedule(step, &TrainConfig::default());
            let expected = 5 + if step <= 25 || step % 100 == 0 { 100 } else { 0 };
            prop_assert_eq!(critic, expected);
            prop_assert_eq!(cls, 5);
        }
    }

    #[test]
    fn cyclic_and_random_orders() {
        let cfg = TrainConfig::default();
        let visited: Vec<usize> = (1..=3).map(|s| class_for_step(s, 2, &cfg)).collect();
        assert_eq!(visited, vec![0, 1, 0]);
        let rnd = TrainConfig { class_order: ClassOrder::Random, seed: 3, ..TrainConfig::default() };
        for round in 0..5u64 {
            let mut seen: Vec<usize> = (1..=4).map(|k| class_for_step(round * 4 + k, 4, &rnd)).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn best_index_examples() {
        assert_eq!(best_index(&[(250, 0.6)]), Some(0));
        assert_eq!(best_index(&[(250, 0.6), (500, 0.8), (750, 0.7)]), Some(1));
        assert_eq!(best_index(&[(500, 0.7), (250, 0.7)]), Some(1));
        assert_eq!(best_index(&[(250, f64::NAN), (500, 0.5)]), Some(1));
        assert_eq!(best_index(&[]), None);
    }

    #[test]
    fn rejects_zero_counts_and_unknown_keys() {
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"generator_step": 5}"#);
        assert!(parsed.is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"generator_steps": 5}"#).unwrap();
        assert_eq!(parsed.generator_steps, 5);
        assert_eq!(parsed.batch_size, 4);
    }

    fn tiny_dataset(dir: &Path) -> Dataset {
        let cfg = SyntheticConfig { num_samples: 24, num_classes: 2, size: 32, seed: 4, ..SyntheticConfig::default() };
        let manifest = make_synthetic(&cfg, dir).unwrap();
        Dataset::open(&manifest, 32).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            generator_steps: 3,
            batch_size: 2,
            critic_steps_per_gen: 1,
            critic_boost_steps: 1,
            critic_boost_initial: 1,
            classifier_steps_per_gen: 2,
            checkpoint_every: 2,
            pool_factor: 4,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn step_updates_only_the_visited_head() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&dir.path().join("data"));
        let mut t = Trainer::new(&data, None, &tiny_config(), &dir.path().join("run")).unwrap();
        let before: Vec<Tensor> = t.net().heads.iter().map(|h| h.weights().copy()).collect();
        let rec = t.train_step().unwrap();
        assert_eq!(rec.class, 0);
        assert!(!t.net().heads[0].weights().equal(&before[0]));
        assert!(t.net().heads[1].weights().equal(&before[1]));
        assert!(t.net().centers[1].pos.abs().max().double_value(&[]) == 0.0);
    }

    #[test]
    fn updates_are_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&dir.path().join("data"));
        let mut t = Trainer::new(&data, None, &tiny_config(), &dir.path().join("run")).unwrap();
        let snapshot = |vars: Vec<(String, Tensor)>| -> Vec<Tensor> { vars.iter().map(|(_, v)| v.copy()).collect() };
        let same = |a: &[Tensor], b: &[Tensor]| a.iter().zip(b).all(|(x, y)| x.equal(y));

        let (gen0, critic0) = (snapshot(t.net().generator_vars()), snapshot(t.net().critic_vars()));
        t.critic_update(0, 1, 0).unwrap();
        let (gen1, critic1) = (snapshot(t.net().generator_vars()), snapshot(t.net().critic_vars()));
        assert!(same(&gen0, &gen1));
        assert!(!same(&critic0, &critic1));

        t.generator_phase(0, 1, 1).unwrap();
        let (gen2, critic2) = (snapshot(t.net().generator_vars()), snapshot(t.net().critic_vars()));
        assert!(same(&critic1, &critic2));
        assert!(!same(&gen1, &gen2));
    }

    #[test]
    fn writes_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&dir.path().join("data"));
        let out = dir.path().join("run");
        let outcome = train(&data, Some(&data), &tiny_config(), &out).unwrap();
        let steps: Vec<u64> = outcome.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![2, 3]);
        assert!(outcome.checkpoints.iter().all(|c| c.validation_auc.as_ref().is_some_and(|a| a.len() == 2)));
        let log = std::fs::read_to_string(&outcome.loss_log).unwrap();
        assert_eq!(log.lines().count(), 1 + 3 * LOGGED_TERMS.len());
        let (net, header) = checkpoint::load_model(&outcome.final_checkpoint).unwrap();
        assert_eq!(header.step, 3);
        assert_eq!(header.optimizer_steps["generator"], 3);
        assert!(net.centers[0].pos.abs().max().double_value(&[]) > 0.0);
    }
}
