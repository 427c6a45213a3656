//! Evaluation metrics: ROC AUC, class sensitivity over 2×2 explanation grids,
//! disease sensitivity (energy pointing game) and confounder sensitivity, with
//! bootstrap confidence intervals and a paired t-test.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::grid::{Grid, Rect};
use crate::seed::rng_for;

/// Fraction of pixels forming the "most significant" set in confounder sensitivity.
pub const TOP_FRACTION: f64 = 0.1;
pub const DEFAULT_MAX_GRIDS: usize = 200;

/// How attribution values turn into energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    #[default]
    Abs,
    PositivePart,
}

impl Magnitude {
    pub fn apply(self, v: f32) -> f64 {
        match self {
            Magnitude::Abs => v.abs() as f64,
            Magnitude::PositivePart => v.max(0.0) as f64,
        }
    }

    pub fn energy(self, g: &Grid) -> f64 {
        g.as_slice().iter().map(|&v| self.apply(v)).sum()
    }
}

/// Mann–Whitney AUC: `P(s_pos > s_neg) + ½·P(s_pos = s_neg)`, computed from
/// midranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateClass(0));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Share of the grid's energy carried by the positive cell.
pub fn grid_score(positive: &Grid, negatives: &[&Grid], magnitude: Magnitude) -> Option<f64> {
    let pos = magnitude.energy(positive);
    let total = pos + negatives.iter().map(|g| magnitude.energy(g)).sum::<f64>();
    (total > 0.0).then(|| pos / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSensitivity {
    pub score: f64,
    pub per_grid: Vec<f64>,
}

/// Builds up to `max_grids` grids from the most confident correctly predicted
/// positives (highest probability first), each paired with three distinct
/// negatives taken in order of increasing probability, and averages their
/// grid scores. Grids carrying no energy at all are skipped.
pub fn class_sensitivity(
    explanations: &[Grid],
    probabilities: &[f64],
    labels: &[bool],
    threshold: f64,
    class: usize,
    magnitude: Magnitude,
    max_grids: usize,
) -> Result<ClassSensitivity> {
    let n = explanations.len();
    if probabilities.len() != n || labels.len() != n {
        return Err(Error::ShapeMismatch("explanations, probabilities and labels differ in length".into()));
    }
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] && probabilities[i] >= threshold).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !labels[i]).collect();
    if pos.is_empty() {
        return Err(Error::NoCorrectPositives(class));
    }
    if neg.len() < 3 {
        return Err(Error::InsufficientSamples { class, needed: 3, available: neg.len() });
    }
    pos.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    neg.sort_by(|&a, &b| probabilities[a].total_cmp(&probabilities[b]).then(a.cmp(&b)));
    let grids = max_grids.min(pos.len()).min(neg.len() / 3);
    let per_grid: Vec<f64> = (0..grids)
        .filter_map(|g| {
            let negs: Vec<&Grid> = neg[3 * g..3 * g + 3].iter().map(|&i| &explanations[i]).collect();
            grid_score(&explanations[pos[g]], &negs, magnitude)
        })
        .collect();
    if per_grid.is_empty() {
        return Err(Error::ZeroAttribution);
    }
    let score = per_grid.iter().sum::<f64>() / per_grid.len() as f64;
    Ok(ClassSensitivity { score, per_grid })
}

/// Energy inside `annotation` (nonzero pixels) over total energy.
pub fn disease_sensitivity(explanation: &Grid, annotation: &Grid, magnitude: Magnitude) -> Result<f64> {
    explanation.check_same_shape(annotation)?;
    if annotation.count_nonzero() == 0 {
        return Err(Error::EmptyAnnotation);
    }
    let (mut inside, mut total) = (0.0, 0.0);
    for (&v, &a) in explanation.as_slice().iter().zip(annotation.as_slice()) {
        let e = magnitude.apply(v);
        total += e;
        if a != 0.0 {
            inside += e;
        }
    }
    if total <= 0.0 {
        return Err(Error::ZeroAttribution);
    }
    Ok(inside / total)
}

/// Indices of the `round(0.1·N)` pixels with the largest |value|; ties go to
/// the lower pixel index and exactly-zero pixels never qualify.
pub fn top_pixels(attribution: &Grid) -> Vec<usize> {
    let k = (TOP_FRACTION * attribution.len() as f64).round() as usize;
    let data = attribution.as_slice();
    let mut order: Vec<usize> = (0..data.len()).filter(|&i| data[i] != 0.0).collect();
    order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Fraction of tag pixels (union of `tag_boxes`) that fall in the top-10% set.
pub fn confounder_sensitivity(attribution: &Grid, tag_boxes: &[Rect]) -> Result<f64> {
    let (h, w) = attribution.shape();
    let mut tag = Grid::zeros(h, w);
    for r in tag_boxes {
        tag.fill_rect(r, 1.0);
    }
    let tag_pixels = tag.count_nonzero();
    if tag_pixels == 0 {
        return Err(Error::EmptyTagRegion);
    }
    let hits = top_pixels(attribution).into_iter().filter(|&i| tag.as_slice()[i] != 0.0).count();
    Ok(hits as f64 / tag_pixels as f64)
}

/// Percentile interval from sorted bootstrap statistics.
pub fn percentile_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    let b = sorted.len();
    let alpha = 1.0 - level;
    let lo = ((alpha / 2.0) * b as f64).floor() as usize;
    let hi = (((1.0 - alpha / 2.0) * b as f64).ceil() as usize).clamp(1, b) - 1;
    (sorted[lo.min(b - 1)], sorted[hi])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    /// Fewer than two observations: the interval collapses to the estimate.
    pub degenerate: bool,
}

/// Percentile bootstrap CI of the mean of `values`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Interval {
    bootstrap_ci(values.len(), resamples, level, seed, |idx| {
        Some(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
    })
    .unwrap_or_else(|| {
        let m = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / values.len() as f64 };
        Interval { low: m, high: m, degenerate: true }
    })
}

/// Generic percentile bootstrap over `n` items; `stat` may reject a resample
/// (returning `None`), in which case it is drawn again up to a bounded number of times.
pub fn bootstrap_ci<F>(n: usize, resamples: usize, level: f64, seed: u64, stat: F) -> Option<Interval>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n < 2 || resamples == 0 {
        return None;
    }
    let mut stats = Vec::with_capacity(resamples);
    let mut attempt = 0u64;
    while stats.len() < resamples && attempt < 10 * resamples as u64 {
        let mut rng = rng_for(seed, &[attempt]);
        attempt += 1;
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        if let Some(s) = stat(&idx) {
            stats.push(s);
        }
    }
    if stats.is_empty() {
        return None;
    }
    stats.sort_by(f64::total_cmp);
    let (low, high) = percentile_interval(&stats, level);
    Some(Interval { low, high, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
    pub mean_difference: f64,
}

/// Paired t-test of `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} paired observations", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientSamples { class: 0, needed: 2, available: a.len() });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest { t, df, p, mean_difference: mean });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest { t, df, p, mean_difference: mean })
}

/// One row of a report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub class: String,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl MetricRow {
    pub fn new(class: impl Into<String>, value: f64, ci: Interval, n: usize) -> Self {
        MetricRow { class: class.into(), value, ci_low: ci.low, ci_high: ci.high, n }
    }

    /// Mean over per-class rows, with a bootstrap CI over those class values.
    pub fn mean_of(rows: &[MetricRow], resamples: usize, seed: u64) -> Option<MetricRow> {
        let vals: Vec<f64> = rows.iter().map(|r| r.value).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            return None;
        }
        let ci = bootstrap_mean_ci(&vals, resamples, 0.95, seed);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        Some(MetricRow::new("mean", mean, ci, rows.iter().map(|r| r.n).sum()))
    }
}

pub fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
        let s = [0.1, 0.5, 0.5, 0.7, 0.5, 0.2];
        let l = [false, true, false, true, true, false];
        assert!((auc(&s, &l).unwrap() - pair_count_auc(&s, &l)).abs() < 1e-12);
    }

    #[test]
    fn grid_constructions() {
        let pos = Grid::filled(4, 4, 0.5);
        let zero = Grid::zeros(4, 4);
        assert_eq!(grid_score(&pos, &[&zero, &zero, &zero], Magnitude::Abs), Some(1.0));
        assert_eq!(grid_score(&pos, &[&pos, &pos, &pos], Magnitude::Abs), Some(0.25));
        let p3 = Grid::filled(1, 3, 1.0);
        let n1 = Grid::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(grid_score(&p3, &[&n1, &n1, &n1], Magnitude::Abs), Some(0.5));
        let neg = Grid::filled(4, 4, -0.5);
        assert_eq!(grid_score(&pos, &[&neg, &neg, &neg], Magnitude::PositivePart), Some(1.0));
    }

    #[test]
    fn class_sensitivity_picks_confident_samples() {
        let maps = vec![
            Grid::filled(2, 2, 1.0), // confident positive
            Grid::filled(2, 2, 1.0), // positive below threshold
            Grid::zeros(2, 2),
            Grid::zeros(2, 2),
            Grid::zeros(2, 2),
            Grid::filled(2, 2, 9.0), // least confident negative, left out
        ];
        let probs = [0.9, 0.3, 0.1, 0.2, 0.15, 0.45];
        let labels = [true, true, false, false, false, false];
        let cs = class_sensitivity(&maps, &probs, &labels, 0.5, 0, Magnitude::Abs, 200).unwrap();
        assert_eq!(cs.per_grid, vec![1.0]);
        assert!(matches!(
            class_sensitivity(&maps, &probs, &labels, 0.95, 0, Magnitude::Abs, 200),
            Err(Error::NoCorrectPositives(0))
        ));
    }

    #[test]
    fn disease_sensitivity_area_ratio() {
        let attr = Grid::filled(10, 10, 0.2);
        let ann = Grid::from_rect(10, 10, &Rect::new(0, 0, 5, 2));
        assert!((disease_sensitivity(&attr, &ann, Magnitude::Abs).unwrap() - 0.1).abs() < 1e-12);
        let inside = Grid::from_rect(10, 10, &Rect::new(1, 0, 2, 2));
        assert_eq!(disease_sensitivity(&inside, &ann, Magnitude::Abs).unwrap(), 1.0);
        assert!(matches!(disease_sensitivity(&attr, &Grid::zeros(10, 10), Magnitude::Abs), Err(Error::EmptyAnnotation)));
        assert!(matches!(disease_sensitivity(&Grid::zeros(10, 10), &ann, Magnitude::Abs), Err(Error::ZeroAttribution)));
    }

    #[test]
    fn confounder_constructions() {
        let tag = Rect::new(0, 0, 4, 2);
        let mut attr = Grid::filled(10, 10, 0.01);
        attr.fill_rect(&tag, -5.0);
        assert_eq!(confounder_sensitivity(&attr, &[tag]).unwrap(), 1.0);
        let mut away = Grid::zeros(10, 10);
        away.fill_rect(&Rect::new(5, 5, 5, 5), 1.0);
        assert_eq!(confounder_sensitivity(&away, &[tag]).unwrap(), 0.0);
        assert!(matches!(confounder_sensitivity(&attr, &[]), Err(Error::EmptyTagRegion)));
    }

    #[test]
    fn top_pixels_tie_break_by_index() {
        let g = Grid::filled(4, 5, 1.0);
        assert_eq!(top_pixels(&g), vec![0, 1]);
    }

    #[test]
    fn bootstrap_matches_brute_force_percentiles() {
        let vals: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let ci = bootstrap_mean_ci(&vals, 500, 0.95, 4);
        let mut means: Vec<f64> = (0..500u64)
            .map(|a| {
                let mut rng = rng_for(4, &[a]);
                (0..30).map(|_| vals[rng.gen_range(0..30)]).sum::<f64>() / 30.0
            })
            .collect();
        means.sort_by(f64::total_cmp);
        assert_eq!((ci.low, ci.high), (means[12], means[487]));
        assert_eq!(ci, bootstrap_mean_ci(&vals, 500, 0.95, 4));
        assert!(bootstrap_mean_ci(&[0.4], 100, 0.95, 1).degenerate);
    }

    #[test]
    fn t_test_known_value() {
        // d = [1,2,3,4]: mean 2.5, sd 1.29099, t = 2.5 / (sd/2) = 3.87298, df 3
        let t = paired_t_test(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((t.t - 3.872983346207417).abs() < 1e-9);
        assert!((t.p - 0.030466291662170977).abs() < 1e-6, "{}", t.p);
    }

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("auc.csv");
        let rows = vec![MetricRow { class: "a".into(), value: 0.5, ci_low: 0.4, ci_high: 0.6, n: 10 }];
        write_rows(&path, &rows).unwrap();
        assert_eq!(read_rows(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("class,value,ci_low,ci_high,n"));
    }
}
