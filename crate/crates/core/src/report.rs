//! Per-class evaluation tables for one model on one dataset: AUC, class
//! sensitivity, disease sensitivity and confounder sensitivity, each with a
//! bootstrap confidence interval and a `mean` row.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::classifier::{calibrate_thresholds, ThresholdTable};
use crate::dataset::{Dataset, InjectionEntry};
use crate::error::{Error, Result};
use crate::explain::weighted_maps;
use crate::grid::{Grid, Rect};
use crate::metrics::{self, Interval, Magnitude, MetricRow};
use crate::net::AttriNet;

const CHUNK: i64 = 32;

/// Which per-sample map the sensitivity metrics score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationSource {
    /// Attribution map weighted by the upsampled classifier weights.
    #[default]
    Weighted,
    /// Raw attribution map.
    Attribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSet {
    pub auc: bool,
    pub class_sensitivity: bool,
    pub disease_sensitivity: bool,
    pub confounder_sensitivity: bool,
}

impl MetricSet {
    pub const ALL: MetricSet =
        MetricSet { auc: true, class_sensitivity: true, disease_sensitivity: true, confounder_sensitivity: true };

    /// `all` or a comma list of `auc`, `class`, `disease`, `confounder`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = MetricSet { auc: false, class_sensitivity: false, disease_sensitivity: false, confounder_sensitivity: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "all" => set = MetricSet::ALL,
                "auc" => set.auc = true,
                "class" | "class_sensitivity" => set.class_sensitivity = true,
                "disease" | "disease_sensitivity" => set.disease_sensitivity = true,
                "confounder" | "confounder_sensitivity" => set.confounder_sensitivity = true,
                other => return Err(Error::InvalidConfig(format!("unknown metric `{other}`"))),
            }
        }
        Ok(set)
    }
}

impl Default for MetricSet {
    fn default() -> Self {
        MetricSet::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub metrics: MetricSet,
    pub magnitude: Magnitude,
    pub source: ExplanationSource,
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
    pub max_grids: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            metrics: MetricSet::ALL,
            magnitude: Magnitude::Abs,
            source: ExplanationSource::Weighted,
            resamples: 1000,
            level: 0.95,
            seed: 0,
            max_grids: metrics::DEFAULT_MAX_GRIDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub rows: Vec<MetricRow>,
    /// Classes whose CI collapsed to the point estimate.
    pub degenerate: Vec<String>,
}

impl Table {
    fn push(&mut self, row: MetricRow, ci: Interval) {
        if ci.degenerate {
            self.degenerate.push(row.class.clone());
        }
        self.rows.push(row);
    }

    fn finish(mut self, cfg: &ReportConfig) -> Self {
        if let Some(mean) = MetricRow::mean_of(&self.rows, cfg.resamples, cfg.seed) {
            self.rows.push(mean);
        }
        self
    }

    pub fn get(&self, class: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    pub fn mean(&self) -> Option<f64> {
        self.get("mean").map(|r| r.value)
    }
}

fn empty_table() -> Table {
    Table { rows: Vec::new(), degenerate: Vec::new() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub thresholds: Vec<f64>,
    pub auc: Option<Table>,
    pub class_sensitivity: Option<Table>,
    pub disease_sensitivity: Option<Table>,
    pub confounder_sensitivity: Option<Table>,
    /// `(record index, score)` per class, for paired comparisons between models.
    pub disease_scores: Vec<Vec<(usize, f64)>>,
    /// Per-sample failures such as all-zero explanations, by class.
    pub excluded: Vec<Vec<String>>,
}

/// Per-class probabilities `[c][i]` and explanation grids `[c][i]`.
pub fn explanations(net: &AttriNet, data: &Dataset, source: ExplanationSource) -> Result<(Vec<Vec<f64>>, Vec<Vec<Grid>>)> {
    let x = data.all_pixels();
    let n = x.size()[0];
    let mut probs = Vec::with_capacity(net.num_classes());
    let mut grids = Vec::with_capacity(net.num_classes());
    for c in 0..net.num_classes() {
        let (mut p, mut g) = (Vec::with_capacity(n as usize), Vec::with_capacity(n as usize));
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let (m, weighted, logits) = weighted_maps(net, &x.narrow(0, start, len), c)?;
            p.extend(Vec::<f64>::try_from(&logits.to_kind(Kind::Double).sigmoid())?);
            let maps: &Tensor = match source {
                ExplanationSource::Weighted => &weighted,
                ExplanationSource::Attribution => &m,
            };
            for i in 0..len {
                g.push(Grid::from_tensor(&maps.get(i))?);
            }
            start += len;
        }
        probs.push(p);
        grids.push(g);
    }
    Ok((probs, grids))
}

/// Evaluates `net` on `data`. Without `thresholds`, Youden thresholds are
/// calibrated on `data` itself. `tags` is the injection log of a contaminated
/// training set, if any.
pub fn report(
    net: &AttriNet,
    data: &Dataset,
    thresholds: Option<&ThresholdTable>,
    tags: &[InjectionEntry],
    cfg: &ReportConfig,
) -> Result<Report> {
    if data.class_names() != net.class_names() {
        return Err(Error::InvalidConfig("dataset classes differ from the model's".into()));
    }
    let names = net.class_names();
    let (probs, grids) = explanations(net, data, cfg.source)?;
    let labels: Vec<Vec<bool>> = (0..names.len()).map(|c| (0..data.len()).map(|i| data.label(i, c)).collect()).collect();
    let thresholds = match thresholds {
        Some(t) => t.thresholds.clone(),
        None => {
            let bits: Vec<Vec<u8>> = data.records().iter().map(|r| r.labels.clone()).collect();
            match calibrate_thresholds(names, &probs, &bits) {
                Ok(t) => t.thresholds,
                Err(Error::DegenerateClass(_)) => vec![0.5; names.len()],
                Err(e) => return Err(e),
            }
        }
    };
    let mut out = Report {
        thresholds: thresholds.clone(),
        auc: None,
        class_sensitivity: None,
        disease_sensitivity: None,
        confounder_sensitivity: None,
        disease_scores: vec![Vec::new(); names.len()],
        excluded: vec![Vec::new(); names.len()],
    };

    if cfg.metrics.auc {
        let mut table = empty_table();
        for (c, name) in names.iter().enumerate() {
            let Ok(value) = metrics::auc(&probs[c], &labels[c]) else {
                out.excluded[c].push("auc: single label value".into());
                continue;
            };
            let stat = |idx: &[usize]| {
                let s: Vec<f64> = idx.iter().map(|&i| probs[c][i]).collect();
                let l: Vec<bool> = idx.iter().map(|&i| labels[c][i]).collect();
                metrics::auc(&s, &l).ok()
            };
            let ci = metrics::bootstrap_ci(data.len(), cfg.resamples, cfg.level, cfg.seed, stat)
                .unwrap_or(Interval { low: value, high: value, degenerate: true });
            table.push(MetricRow::new(name, value, ci, data.len()), ci);
        }
        out.auc = Some(table.finish(cfg));
    }

    if cfg.metrics.class_sensitivity {
        let mut table = empty_table();
        for (c, name) in names.iter().enumerate() {
            match metrics::class_sensitivity(&grids[c], &probs[c], &labels[c], thresholds[c], c, cfg.magnitude, cfg.max_grids) {
                Ok(cs) => {
                    let ci = metrics::bootstrap_mean_ci(&cs.per_grid, cfg.resamples, cfg.level, cfg.seed);
                    table.push(MetricRow::new(name, cs.score, ci, cs.per_grid.len()), ci);
                }
                Err(e) => out.excluded[c].push(format!("class sensitivity: {e}")),
            }
        }
        out.class_sensitivity = Some(table.finish(cfg));
    }

    if cfg.metrics.disease_sensitivity {
        let mut table = empty_table();
        for (c, name) in names.iter().enumerate() {
            for i in 0..data.len() {
                let Some(mask) = data.gt_mask(i, c).filter(|_| labels[c][i]) else { continue };
                match metrics::disease_sensitivity(&grids[c][i], mask, cfg.magnitude) {
                    Ok(v) => out.disease_scores[c].push((i, v)),
                    Err(e) => out.excluded[c].push(format!("{}: {e}", data.records()[i].id)),
                }
            }
            let values: Vec<f64> = out.disease_scores[c].iter().map(|&(_, v)| v).collect();
            if values.is_empty() {
                continue;
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let ci = metrics::bootstrap_mean_ci(&values, cfg.resamples, cfg.level, cfg.seed);
            table.push(MetricRow::new(name, mean, ci, values.len()), ci);
        }
        out.disease_sensitivity = Some(table.finish(cfg));
    }

    if cfg.metrics.confounder_sensitivity && !tags.is_empty() {
        let mut table = empty_table();
        for (c, name) in names.iter().enumerate() {
            let boxes: Vec<Rect> = tags.iter().filter(|t| t.class == c).map(InjectionEntry::region).collect();
            if boxes.is_empty() {
                continue;
            }
            let v = confounder_sensitivity_of_center(net, c, &boxes)?;
            let ci = Interval { low: v, high: v, degenerate: true };
            table.push(MetricRow::new(name, v, ci, 1), ci);
        }
        out.confounder_sensitivity = Some(table.finish(cfg));
    }
    Ok(out)
}

/// Confounder sensitivity of the positive class center, counting each
/// distinct tag rectangle once.
pub fn confounder_sensitivity_of_center(net: &AttriNet, class: usize, boxes: &[Rect]) -> Result<f64> {
    let mut unique: Vec<Rect> = boxes.to_vec();
    unique.sort_by_key(|r| r.to_array());
    unique.dedup();
    let center = Grid::from_tensor(&net.centers[class].pos)?;
    metrics::confounder_sensitivity(&center, &unique)
}

impl Report {
    /// Writes one CSV per computed table plus `report.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let tables = [
            ("auc.csv", &self.auc),
            ("class_sensitivity.csv", &self.class_sensitivity),
            ("disease_sensitivity.csv", &self.disease_sensitivity),
            ("confounder_sensitivity.csv", &self.confounder_sensitivity),
        ];
        for (file, table) in tables {
            if let Some(t) = table {
                let p = dir.join(file);
                metrics::write_rows(&p, &t.rows)?;
                written.push(p);
            }
        }
        let p = dir.join("report.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_set_parsing() {
        assert_eq!(MetricSet::parse("all").unwrap(), MetricSet::ALL);
        let s = MetricSet::parse("auc,disease").unwrap();
        assert!(s.auc && s.disease_sensitivity && !s.class_sensitivity && !s.confounder_sensitivity);
        assert!(MetricSet::parse("auc,bogus").is_err());
    }

    #[test]
    fn single_sample_ci_is_degenerate() {
        let mut t = empty_table();
        let ci = metrics::bootstrap_mean_ci(&[0.4], 100, 0.95, 1);
        t.push(MetricRow::new("a", 0.4, ci, 1), ci);
        assert_eq!(t.degenerate, vec!["a".to_string()]);
        assert_eq!((t.rows[0].ci_low, t.rows[0].ci_high), (0.4, 0.4));
    }
}
