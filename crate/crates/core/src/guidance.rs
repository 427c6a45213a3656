//! Guidance masks: ground truth, pseudo masks built from a few annotated boxes,
//! loose central squares, spurious-signal avoidance masks, and the mixed
//! strategy that oversamples annotated cases.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{save_gray, ImageRecord};
use crate::error::{Error, Result};
use crate::grid::{Grid, Rect};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Gt,
    PseudoBinary,
    PseudoWeighted,
    PseudoBbox,
    LooseSquare,
    Avoidance,
}

impl MaskKind {
    pub fn is_binary(self) -> bool {
        self != MaskKind::PseudoWeighted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMask {
    pub values: Grid,
    pub class_index: Option<usize>,
    pub kind: MaskKind,
}

impl GuidanceMask {
    pub fn new(values: Grid, class_index: Option<usize>, kind: MaskKind) -> Result<Self> {
        if kind.is_binary() && !values.is_binary() {
            return Err(Error::InvalidConfig(format!("{kind:?} mask must be binary")));
        }
        if values.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("mask values must lie in [0,1]".into()));
        }
        Ok(GuidanceMask { values, class_index, kind })
    }

    /// PNG export: binary masks as 0/255, weighted masks scaled to 8 bits.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_gray(path, &self.values.map(|v| v * 2.0 - 1.0))
    }
}

fn class_boxes<'a>(records: &'a [ImageRecord], class: usize) -> impl Iterator<Item = &'a Rect> + 'a {
    records.iter().flat_map(move |r| r.boxes_for(class))
}

/// Union of every box for `class` across `records`.
pub fn build_pseudo_binary(records: &[ImageRecord], class: usize, height: usize, width: usize) -> Result<GuidanceMask> {
    let mut g = Grid::zeros(height, width);
    let mut any = false;
    for r in class_boxes(records, class) {
        g.fill_rect(r, 1.0);
        any = true;
    }
    if !any {
        return Err(Error::NoAnnotations(class));
    }
    GuidanceMask::new(g, Some(class), MaskKind::PseudoBinary)
}

/// Per-pixel box overlap count normalized by its maximum.
pub fn build_pseudo_weighted(records: &[ImageRecord], class: usize, height: usize, width: usize) -> Result<GuidanceMask> {
    let mut g = Grid::zeros(height, width);
    for r in class_boxes(records, class) {
        for row in r.y..r.bottom().min(height) {
            for col in r.x..r.right().min(width) {
                g.set(row, col, g.get(row, col) + 1.0);
            }
        }
    }
    let peak = g.max();
    if peak <= 0.0 {
        return Err(Error::NoAnnotations(class));
    }
    GuidanceMask::new(g.map(|v| v / peak), Some(class), MaskKind::PseudoWeighted)
}

/// Smallest rectangle enclosing every box for `class`.
pub fn build_pseudo_bbox(records: &[ImageRecord], class: usize, height: usize, width: usize) -> Result<GuidanceMask> {
    let hull = class_boxes(records, class).fold(None::<(usize, usize, usize, usize)>, |acc, r| {
        let (x0, y0, x1, y1) = acc.unwrap_or((r.x, r.y, r.right(), r.bottom()));
        Some((x0.min(r.x), y0.min(r.y), x1.max(r.right()), y1.max(r.bottom())))
    });
    let (x0, y0, x1, y1) = hull.ok_or(Error::NoAnnotations(class))?;
    let g = Grid::from_rect(height, width, &Rect::new(x0, y0, x1 - x0, y1 - y0));
    GuidanceMask::new(g, Some(class), MaskKind::PseudoBbox)
}

/// Centered `side`×`side` square of ones.
pub fn build_loose_square(side: usize, height: usize, width: usize) -> Result<GuidanceMask> {
    if side == 0 {
        return Err(Error::EmptyMask);
    }
    if side > height || side > width {
        return Err(Error::InvalidConfig(format!("square side {side} exceeds {height}x{width}")));
    }
    let rect = Rect::new((width - side) / 2, (height - side) / 2, side, side);
    GuidanceMask::new(Grid::from_rect(height, width, &rect), None, MaskKind::LooseSquare)
}

/// Ones on `center`, zeros elsewhere; `center` must not touch `exclusion`.
pub fn build_avoidance(exclusion: &Rect, center: &Rect, height: usize, width: usize) -> Result<GuidanceMask> {
    if center.area() == 0 {
        return Err(Error::EmptyMask);
    }
    if center.intersects(exclusion) {
        return Err(Error::ConflictingRegions);
    }
    let g = Grid::from_rect(height, width, center);
    debug_assert!((exclusion.y..exclusion.bottom().min(height))
        .all(|r| (exclusion.x..exclusion.right().min(width)).all(|c| g.get(r, c) == 0.0)));
    GuidanceMask::new(g, None, MaskKind::Avoidance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    #[default]
    None,
    Full,
    Mixed,
}

/// Kind of pseudo mask built for unannotated samples in mixed mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoKind {
    #[default]
    Binary,
    Weighted,
    Bbox,
}

/// Replaces the pseudo mask of `class` with a mask that keeps `center` and
/// avoids `exclusion` (a known spurious-signal region).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvoidanceSpec {
    pub class: usize,
    pub center: Rect,
    pub exclusion: Rect,
}

fn default_freq() -> f64 {
    0.1
}

fn default_pseudo_split() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidancePolicy {
    #[serde(default)]
    pub mode: GuidanceMode,
    /// Probability that a positive draw comes from the annotated records.
    #[serde(default = "default_freq")]
    pub oversample_annotated_freq: f64,
    #[serde(default)]
    pub pseudo_kind: PseudoKind,
    /// Fraction of annotated records whose boxes build the pseudo masks.
    #[serde(default = "default_pseudo_split")]
    pub pseudo_split: f64,
    #[serde(default)]
    pub avoidance: Option<AvoidanceSpec>,
}

impl Default for GuidancePolicy {
    fn default() -> Self {
        GuidancePolicy {
            mode: GuidanceMode::None,
            oversample_annotated_freq: default_freq(),
            pseudo_kind: PseudoKind::Binary,
            pseudo_split: default_pseudo_split(),
            avoidance: None,
        }
    }
}

impl GuidancePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.oversample_annotated_freq) {
            return Err(Error::InvalidConfig(format!(
                "oversample frequency {} outside [0,1]",
                self.oversample_annotated_freq
            )));
        }
        if !(0.0..=1.0).contains(&self.pseudo_split) {
            return Err(Error::InvalidConfig(format!("pseudo split {} outside [0,1]", self.pseudo_split)));
        }
        if let Some(a) = &self.avoidance {
            if a.center.intersects(&a.exclusion) {
                return Err(Error::ConflictingRegions);
            }
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.mode != GuidanceMode::None
    }
}

/// Mask guiding `record_gt`'s attribution for one class, or `None` to skip
/// the guidance term for this item.
pub fn select_mask(
    record_gt: Option<&Grid>,
    class: usize,
    mode: GuidanceMode,
    pseudo: Option<&GuidanceMask>,
) -> Option<GuidanceMask> {
    let gt = || record_gt.map(|g| GuidanceMask { values: g.clone(), class_index: Some(class), kind: MaskKind::Gt });
    match mode {
        GuidanceMode::None => None,
        GuidanceMode::Full => gt(),
        GuidanceMode::Mixed => gt().or_else(|| pseudo.cloned()),
    }
}

/// Reproducible stream of record indices in which annotated ids appear with
/// long-run frequency `freq`. Position `k` depends only on `(seed, k)`.
#[derive(Debug, Clone)]
pub struct OversampleStream {
    annotated: Vec<usize>,
    unannotated: Vec<usize>,
    freq: f64,
    seed: u64,
    position: u64,
}

impl OversampleStream {
    pub fn new(annotated: Vec<usize>, unannotated: Vec<usize>, freq: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&freq) {
            return Err(Error::InvalidConfig(format!("oversample frequency {freq} outside [0,1]")));
        }
        if annotated.is_empty() && unannotated.is_empty() {
            return Err(Error::InvalidConfig("oversample stream over no records".into()));
        }
        Ok(OversampleStream { annotated, unannotated, freq, seed, position: 0 })
    }

    pub fn at(&self, k: u64) -> usize {
        let mut rng = rng_for(self.seed, &[k]);
        let pick_annotated = rng.gen::<f64>() < self.freq;
        let pool = match (pick_annotated, self.annotated.is_empty(), self.unannotated.is_empty()) {
            (_, true, _) => &self.unannotated,
            (_, _, true) => &self.annotated,
            (true, _, _) => &self.annotated,
            (false, _, _) => &self.unannotated,
        };
        pool[rng.gen_range(0..pool.len())]
    }

    pub fn seek(&mut self, position: u64) {
        self.position = position;
    }
}

impl Iterator for OversampleStream {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let v = self.at(self.position);
        self.position += 1;
        Some(v)
    }
}

pub fn oversample_indices(annotated: &[usize], unannotated: &[usize], freq: f64, seed: u64) -> Result<OversampleStream> {
    OversampleStream::new(annotated.to_vec(), unannotated.to_vec(), freq, seed)
}
