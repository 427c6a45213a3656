//! Training objectives: critic, adversarial, L1 regularization, classification,
//! center and guidance losses, and their weighted total.

use serde::{Deserialize, Serialize};
use tch::{Kind, Reduction, Tensor};

use crate::critic::GP_COEFF;
use crate::error::{Error, Result};

pub const GUIDANCE_EPS: f64 = 1e-8;

/// The five generator loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Adversarial,
    Classification,
    Regularization,
    Center,
    Guidance,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Adversarial, Term::Classification, Term::Regularization, Term::Center, Term::Guidance];

    /// Short name used in logs.
    pub fn name(self) -> &'static str {
        match self {
            Term::Adversarial => "adv",
            Term::Classification => "cls",
            Term::Regularization => "reg",
            Term::Center => "ctr",
            Term::Guidance => "gd",
        }
    }

    pub fn parse(s: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.name() == s || format!("{t:?}").eq_ignore_ascii_case(s))
    }
}

/// How the per-image L1 norm reduces over pixels.
///
/// `Mean` is the default: with `Sum` at λ_re = 100 the L1 term outweighs the
/// adversarial and classification terms by orders of magnitude on 64×64
/// inputs and the heads stay at chance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelReduction {
    Sum,
    #[default]
    Mean,
}

fn default_adversarial() -> f64 {
    1.0
}
fn default_hundred() -> f64 {
    100.0
}
fn default_center() -> f64 {
    0.01
}
fn default_guidance() -> f64 {
    30.0
}
fn default_alpha_neg() -> f64 {
    2.0
}
fn default_alpha_pos() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_adversarial")]
    pub adversarial: f64,
    #[serde(default = "default_hundred")]
    pub classification: f64,
    #[serde(default = "default_hundred")]
    pub regularization: f64,
    #[serde(default = "default_center")]
    pub center: f64,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    /// α0, weight on negative-sample maps inside the L1 term.
    #[serde(default = "default_alpha_neg")]
    pub alpha_neg: f64,
    /// α1, weight on positive-sample maps inside the L1 term.
    #[serde(default = "default_alpha_pos")]
    pub alpha_pos: f64,
    #[serde(default)]
    pub pixel_reduction: PixelReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: default_adversarial(),
            classification: default_hundred(),
            regularization: default_hundred(),
            center: default_center(),
            guidance: default_guidance(),
            alpha_neg: default_alpha_neg(),
            alpha_pos: default_alpha_pos(),
            pixel_reduction: PixelReduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn weight(&self, term: Term) -> f64 {
        match term {
            Term::Adversarial => self.adversarial,
            Term::Classification => self.classification,
            Term::Regularization => self.regularization,
            Term::Center => self.center,
            Term::Guidance => self.guidance,
        }
    }

    /// Copy with the listed terms switched off.
    pub fn ablate(&self, terms: &[Term]) -> Self {
        let mut w = self.clone();
        for t in terms {
            match t {
                Term::Adversarial => w.adversarial = 0.0,
                Term::Classification => w.classification = 0.0,
                Term::Regularization => w.regularization = 0.0,
                Term::Center => w.center = 0.0,
                Term::Guidance => w.guidance = 0.0,
            }
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.adversarial,
            self.classification,
            self.regularization,
            self.center,
            self.guidance,
            self.alpha_neg,
            self.alpha_pos,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

fn nonempty(t: &Tensor) -> Result<()> {
    if t.numel() == 0 {
        Err(Error::EmptyBatch)
    } else {
        Ok(())
    }
}

/// `mean(−D(real negatives)) + mean(D(fakes)) + 10·gp`.
pub fn critic_loss(real_neg_scores: &Tensor, fake_scores: &Tensor, gradient_penalty: Option<&Tensor>) -> Result<Tensor> {
    nonempty(real_neg_scores)?;
    nonempty(fake_scores)?;
    let base = -real_neg_scores.mean(real_neg_scores.kind()) + fake_scores.mean(fake_scores.kind());
    Ok(match gradient_penalty {
        Some(gp) => base + gp * GP_COEFF,
        None => base,
    })
}

/// `mean(−D(fakes))`.
pub fn adversarial_loss(fake_scores: &Tensor) -> Result<Tensor> {
    nonempty(fake_scores)?;
    Ok(-fake_scores.mean(fake_scores.kind()))
}

fn per_image_l1(m: &Tensor, reduction: PixelReduction) -> Tensor {
    let flat = m.abs().flatten(1, -1);
    let dims: &[i64] = &[1];
    match reduction {
        PixelReduction::Sum => flat.sum_dim_intlist(dims, false, m.kind()),
        PixelReduction::Mean => flat.mean_dim(dims, false, m.kind()),
    }
}

/// `α0·mean_i ‖M_neg,i‖₁ + α1·mean_i ‖M_pos,i‖₁`; a missing or empty batch contributes 0.
pub fn reg_loss(
    m_neg: Option<&Tensor>,
    m_pos: Option<&Tensor>,
    alpha_neg: f64,
    alpha_pos: f64,
    reduction: PixelReduction,
) -> Tensor {
    let part = |m: Option<&Tensor>, alpha: f64| match m {
        Some(m) if m.numel() > 0 => per_image_l1(m, reduction).mean(m.kind()) * alpha,
        _ => Tensor::from(0f32),
    };
    part(m_neg, alpha_neg) + part(m_pos, alpha_pos)
}

/// Binary cross entropy on probabilities, averaged over the batch.
pub fn classification_loss(prob: &Tensor, label: &Tensor) -> Result<Tensor> {
    nonempty(prob)?;
    check_same(prob, label)?;
    Ok(prob.binary_cross_entropy::<Tensor>(&label.to_kind(prob.kind()), None, Reduction::Mean))
}

/// Same loss as [`classification_loss`] computed from logits.
pub fn classification_loss_logits(logits: &Tensor, label: &Tensor) -> Result<Tensor> {
    nonempty(logits)?;
    check_same(logits, label)?;
    Ok(logits.binary_cross_entropy_with_logits::<Tensor>(
        &label.to_kind(logits.kind()),
        None,
        None,
        Reduction::Mean,
    ))
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

/// Learnable mean attribution maps for one class, one per label bit.
#[derive(Debug)]
pub struct ClassCenterPair {
    pub neg: Tensor,
    pub pos: Tensor,
}

impl ClassCenterPair {
    pub fn zeros(height: usize, width: usize) -> Self {
        let opts = (Kind::Float, tch::Device::Cpu);
        ClassCenterPair {
            neg: Tensor::zeros([height as i64, width as i64], opts),
            pos: Tensor::zeros([height as i64, width as i64], opts),
        }
    }

    pub fn get(&self, bit: u8) -> &Tensor {
        if bit == 1 {
            &self.pos
        } else {
            &self.neg
        }
    }

    /// `(B,1,H,W)` stack of the center matching each label bit.
    pub fn targets(&self, bits: &[u8]) -> Tensor {
        let maps: Vec<Tensor> = bits.iter().map(|&b| self.get(b).unsqueeze(0)).collect();
        Tensor::stack(&maps, 0)
    }

    /// `v ← v − lr·mean_{items with this bit}(v − M)`; a bit absent from the
    /// batch leaves its center untouched.
    pub fn update(&mut self, batch_m: &Tensor, bits: &[u8], lr: f64) -> Result<()> {
        let size = batch_m.size();
        if size.len() != 4 || size[0] as usize != bits.len() || size[2..] != self.pos.size()[..] {
            return Err(Error::ShapeMismatch(format!("maps {size:?} for {} bits, centers {:?}", bits.len(), self.pos.size())));
        }
        tch::no_grad(|| {
            let maps = batch_m.detach().squeeze_dim(1);
            for (bit, center) in [(1u8, &mut self.pos), (0u8, &mut self.neg)] {
                let idx: Vec<i64> = bits.iter().enumerate().filter(|(_, &b)| b == bit).map(|(i, _)| i as i64).collect();
                if idx.is_empty() {
                    continue;
                }
                let chosen = maps.index_select(0, &Tensor::from_slice(&idx));
                let grad = (&*center - chosen).mean_dim(&[0i64][..], false, Kind::Float);
                *center = &*center - grad * lr;
            }
        });
        Ok(())
    }
}

/// `½·mean_i ‖M_i − v_{y_i}‖₂²`.
pub fn center_loss(m: &Tensor, bits: &[u8], centers: &ClassCenterPair) -> Result<Tensor> {
    nonempty(m)?;
    let targets = centers.targets(bits);
    check_same(m, &targets)?;
    let sq = (m - targets).square().flatten(1, -1).sum_dim_intlist(&[1i64][..], false, m.kind());
    Ok(sq.mean(m.kind()) * 0.5)
}

/// Per-item `1 − Σ(G⊙|M|)/Σ|M|`, 0 for items whose attribution mass is below
/// [`GUIDANCE_EPS`]. `G` may be soft in [0,1].
pub fn guidance_loss_per_item(m: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_same(m, g)?;
    nonempty(m)?;
    let batched = m.dim() == 4;
    let (m, g) = if batched { (m.shallow_clone(), g.shallow_clone()) } else { (m.unsqueeze(0), g.unsqueeze(0)) };
    let abs = m.abs().flatten(1, -1);
    let dims: &[i64] = &[1];
    let total = abs.sum_dim_intlist(dims, false, abs.kind());
    let inside = (&abs * g.to_kind(abs.kind()).flatten(1, -1)).sum_dim_intlist(dims, false, abs.kind());
    let ratio = inside / total.clamp_min(GUIDANCE_EPS);
    let loss = (ratio.ones_like() - ratio).where_self(&total.ge(GUIDANCE_EPS), &Tensor::zeros_like(&total));
    Ok(if batched { loss } else { loss.squeeze_dim(0) })
}

/// Batch mean of [`guidance_loss_per_item`] for `(B,1,H,W)` inputs; a single `(H,W)` map also works.
pub fn guidance_loss(m: &Tensor, g: &Tensor) -> Result<Tensor> {
    Ok(guidance_loss_per_item(m, g)?.mean(m.kind()))
}

/// Unweighted loss terms for one visited class.
#[derive(Debug)]
pub struct ClassTerms {
    pub adversarial: Tensor,
    pub classification: Tensor,
    pub regularization: Tensor,
    pub center: Tensor,
    /// `None` when guidance is disabled.
    pub guidance: Option<Tensor>,
}

impl ClassTerms {
    pub fn get(&self, term: Term) -> Option<&Tensor> {
        match term {
            Term::Adversarial => Some(&self.adversarial),
            Term::Classification => Some(&self.classification),
            Term::Regularization => Some(&self.regularization),
            Term::Center => Some(&self.center),
            Term::Guidance => self.guidance.as_ref(),
        }
    }
}

/// `Σ_c Σ_term λ_term·L_term` accumulated in double precision; zero-weight
/// terms are dropped from the sum entirely and absent guidance terms are
/// skipped.
pub fn total_generator_loss(terms: &[ClassTerms], weights: &LossWeights) -> Tensor {
    let mut total = Tensor::from(0f64);
    for class_terms in terms {
        for term in Term::ALL {
            let w = weights.weight(term);
            if w == 0.0 {
                continue;
            }
            if let Some(t) = class_terms.get(term) {
                total = total + t.to_kind(Kind::Double) * w;
            }
        }
    }
    total
}
