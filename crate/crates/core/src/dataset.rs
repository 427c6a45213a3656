//! Manifest parsing, image loading, positive/negative sampling, the synthetic
//! desk-scale dataset and spurious-tag contamination.
//!
//! Manifest layout (CSV, one row per image):
//!
//! ```text
//! id,path,<class_0>,...,<class_C-1>,boxes,masks
//! syn00000,images/syn00000.png,1,0,1,0:20:30:12:9;2:37:19:14:5,0:masks/syn00000_c0.png
//! ```
//!
//! `boxes` is a semicolon-separated list of `class:x:y:w:h` in pixels of the
//! stored image; `masks` is a semicolon-separated list of `class:path`. Paths are
//! relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, Luma};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::font;
use crate::grid::{Grid, Rect};
use crate::seed::rng_for;

/// The five CheXpert findings the model is usually trained on.
pub const CHEXPERT_FINDINGS: [&str; 5] =
    ["Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Pleural effusion"];

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const INJECTION_LOG_FILE: &str = "injection_log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class_index: usize,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// As written in the manifest, relative to the manifest directory.
    pub image_path: PathBuf,
    pub labels: Vec<u8>,
    pub boxes: Vec<BoxAnnotation>,
    /// One optional binary mask path per class.
    pub seg_masks: Vec<Option<PathBuf>>,
}

impl ImageRecord {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn is_positive(&self, class: usize) -> bool {
        self.labels[class] == 1
    }

    pub fn boxes_for(&self, class: usize) -> impl Iterator<Item = &Rect> + '_ {
        self.boxes.iter().filter(move |b| b.class_index == class).map(|b| &b.rect)
    }

    pub fn has_annotation(&self, class: usize) -> bool {
        self.seg_masks[class].is_some() || self.boxes_for(class).next().is_some()
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

const FIXED_COLUMNS: [&str; 4] = ["id", "path", "boxes", "masks"];

/// Class names in header order (every column that is not one of the fixed ones).
pub fn read_manifest_classes(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?;
    Ok(headers.iter().filter(|h| !FIXED_COLUMNS.contains(h)).map(str::to_string).collect())
}

fn parse_class_token(token: &str, class_names: &[String], row: usize) -> Result<usize> {
    let token = token.trim();
    if let Ok(idx) = token.parse::<usize>() {
        if idx < class_names.len() {
            return Ok(idx);
        }
        return Err(Error::UnknownClass { row, class: token.to_string() });
    }
    class_names
        .iter()
        .position(|n| n == token)
        .ok_or_else(|| Error::UnknownClass { row, class: token.to_string() })
}

fn parse_boxes(field: &str, class_names: &[String], row: usize) -> Result<Vec<BoxAnnotation>> {
    let mut boxes = Vec::new();
    for token in field.split(';').map(str::trim).filter(|t| !t.is_empty()) {
        let parts: Vec<&str> = token.split(':').collect();
        if parts.len() != 5 {
            return Err(Error::MalformedBox { row, detail: token.to_string() });
        }
        let class_index = parse_class_token(parts[0], class_names, row)?;
        let mut nums = [0i64; 4];
        for (slot, raw) in nums.iter_mut().zip(&parts[1..]) {
            *slot = raw
                .trim()
                .parse::<i64>()
                .map_err(|_| Error::MalformedBox { row, detail: token.to_string() })?;
        }
        let [x, y, w, h] = nums;
        if x < 0 || y < 0 || w <= 0 || h <= 0 {
            return Err(Error::MalformedBox { row, detail: token.to_string() });
        }
        boxes.push(BoxAnnotation {
            class_index,
            rect: Rect::new(x as usize, y as usize, w as usize, h as usize),
        });
    }
    Ok(boxes)
}

fn parse_masks(field: &str, class_names: &[String], row: usize) -> Result<Vec<Option<PathBuf>>> {
    let mut masks = vec![None; class_names.len()];
    for token in field.split(';').map(str::trim).filter(|t| !t.is_empty()) {
        let (class, path) = token
            .split_once(':')
            .ok_or_else(|| Error::MissingColumn { row, column: format!("masks entry `{token}`") })?;
        let c = parse_class_token(class, class_names, row)?;
        masks[c] = Some(PathBuf::from(path.trim()));
    }
    Ok(masks)
}

fn parse_label(raw: &str, class: &str, row: usize) -> Result<u8> {
    match raw.trim() {
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        other => Err(Error::InvalidLabel { row, class: class.to_string(), value: other.to_string() }),
    }
}

/// Parses a manifest. Data rows are numbered from 1 in errors; the header is row 0.
pub fn load_manifest(path: &Path, class_names: &[String]) -> Result<Vec<ImageRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);

    for h in headers.iter() {
        if !FIXED_COLUMNS.contains(&h) && !class_names.iter().any(|c| c == h) {
            return Err(Error::UnknownClass { row: 0, class: h.to_string() });
        }
    }
    let require = |name: &str| column(name).ok_or_else(|| Error::MissingColumn { row: 0, column: name.to_string() });
    let id_col = require("id")?;
    let path_col = require("path")?;
    let boxes_col = require("boxes")?;
    let masks_col = require("masks")?;
    let label_cols = class_names.iter().map(|c| require(c)).collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let field = |col: usize, name: &str| {
            row.get(col).ok_or_else(|| Error::MissingColumn { row: row_no, column: name.to_string() })
        };
        let labels = class_names
            .iter()
            .zip(&label_cols)
            .map(|(name, &col)| parse_label(field(col, name)?, name, row_no))
            .collect::<Result<Vec<_>>>()?;
        records.push(ImageRecord {
            id: field(id_col, "id")?.to_string(),
            image_path: PathBuf::from(field(path_col, "path")?),
            labels,
            boxes: parse_boxes(field(boxes_col, "boxes")?, class_names, row_no)?,
            seg_masks: parse_masks(field(masks_col, "masks")?, class_names, row_no)?,
        });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, class_names: &[String], records: &[ImageRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "path".to_string()];
    header.extend(class_names.iter().cloned());
    header.push("boxes".into());
    header.push("masks".into());
    writer.write_record(&header)?;
    for r in records {
        let mut row = vec![r.id.clone(), r.image_path.to_string_lossy().into_owned()];
        row.extend(r.labels.iter().map(|l| l.to_string()));
        let boxes: Vec<String> = r
            .boxes
            .iter()
            .map(|b| format!("{}:{}:{}:{}:{}", b.class_index, b.rect.x, b.rect.y, b.rect.w, b.rect.h))
            .collect();
        row.push(boxes.join(";"));
        let masks: Vec<String> = r
            .seg_masks
            .iter()
            .enumerate()
            .filter_map(|(c, m)| m.as_ref().map(|p| format!("{c}:{}", p.to_string_lossy())))
            .collect();
        row.push(masks.join(";"));
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_u8(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

fn open_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_luma8())
}

fn gray_to_grid(img: &GrayImage, f: impl Fn(u8) -> f32) -> Grid {
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| f(p.0[0])).collect();
    Grid::from_vec(h as usize, w as usize, data).expect("dimensions match pixel count")
}

/// Loads an 8-bit grayscale image normalized to [-1, 1].
pub fn load_gray(path: &Path) -> Result<Grid> {
    Ok(gray_to_grid(&open_gray(path)?, from_u8))
}

/// Saves a [-1, 1] image as 8-bit grayscale.
pub fn save_gray(path: &Path, grid: &Grid) -> Result<()> {
    save_u8(path, grid, to_u8)
}

/// Loads a mask PNG; any pixel above mid-gray is inside.
pub fn load_mask(path: &Path) -> Result<Grid> {
    Ok(gray_to_grid(&open_gray(path)?, |p| if p > 127 { 1.0 } else { 0.0 }))
}

/// Saves a [0, 1] mask; binary masks become 0/255.
pub fn save_mask(path: &Path, grid: &Grid) -> Result<()> {
    save_u8(path, grid, |v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn save_u8(path: &Path, grid: &Grid, f: impl Fn(f32) -> u8) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let img = GrayImage::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        Luma([f(grid.get(y as usize, x as usize))])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

// ---------------------------------------------------------------------------
// In-memory dataset and batches
// ---------------------------------------------------------------------------

/// Images `(B,1,H,W)` in [-1,1] with multi-hot labels `(B,C)` and optional
/// binary annotation masks `(B,C,H,W)`.
#[derive(Debug)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Tensor,
    pub masks: Option<Tensor>,
    pub has_gt_annotation: Vec<Vec<bool>>,
    /// Dataset indices of the items, in batch order.
    pub indices: Vec<usize>,
}

impl ImageBatch {
    pub fn new(
        pixels: Tensor,
        labels: Tensor,
        masks: Option<Tensor>,
        has_gt_annotation: Vec<Vec<bool>>,
        indices: Vec<usize>,
    ) -> Result<Self> {
        let size = pixels.size();
        if size.len() != 4 || size[1] != 1 || size[2] != size[3] {
            return Err(Error::ShapeMismatch(format!("pixels must be (B,1,H,H), got {size:?}")));
        }
        let b = size[0];
        let lsize = labels.size();
        if lsize.len() != 2 || lsize[0] != b {
            return Err(Error::ShapeMismatch(format!("labels must be (B,C), got {lsize:?}")));
        }
        if has_gt_annotation.len() as i64 != b || indices.len() as i64 != b {
            return Err(Error::ShapeMismatch("annotation flags / indices length differ from batch".into()));
        }
        if b > 0 {
            let lo = pixels.min().double_value(&[]);
            let hi = pixels.max().double_value(&[]);
            if lo < -1.0 || hi > 1.0 {
                return Err(Error::ShapeMismatch(format!("pixel range [{lo}, {hi}] outside [-1, 1]")));
            }
        }
        if let Some(m) = &masks {
            let msize = m.size();
            if msize != [b, lsize[1], size[2], size[3]] {
                return Err(Error::ShapeMismatch(format!("masks must be (B,C,H,W), got {msize:?}")));
            }
            let binary = m.eq(0.0).logical_or(&m.eq(1.0)).all().int64_value(&[]) == 1;
            if !binary {
                return Err(Error::ShapeMismatch("masks must be binary".into()));
            }
        }
        Ok(ImageBatch { pixels, labels, masks, has_gt_annotation, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A loaded dataset at a fixed working resolution.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    class_names: Vec<String>,
    size: usize,
    records: Vec<ImageRecord>,
    pixels: Tensor,
    labels: Tensor,
    gt_masks: Vec<Vec<Option<Grid>>>,
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
}

impl Dataset {
    /// Loads a manifest and its images, taking class names from the header.
    pub fn open(manifest: &Path, size: usize) -> Result<Self> {
        let classes = read_manifest_classes(manifest)?;
        Dataset::load(manifest, &classes, size)
    }

    /// Loads every image at `size`×`size`. Images of a different size are
    /// resampled (bilinear), boxes scaled proportionally, masks nearest-neighbor.
    pub fn load(manifest: &Path, class_names: &[String], size: usize) -> Result<Self> {
        let records = load_manifest(manifest, class_names)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let n = records.len();
        let c = class_names.len();
        let mut flat = Vec::with_capacity(n * size * size);
        let mut label_flat = Vec::with_capacity(n * c);
        let mut gt_masks = Vec::with_capacity(n);
        let mut scaled_records = Vec::with_capacity(n);

        for (i, rec) in records.into_iter().enumerate() {
            let row = i + 1;
            let path = root.join(&rec.image_path);
            let img = open_gray(&path)?;
            let (w0, h0) = (img.width() as usize, img.height() as usize);
            for b in &rec.boxes {
                if !b.rect.fits(h0, w0) {
                    return Err(Error::MalformedBox {
                        row,
                        detail: format!("{:?} outside {w0}x{h0} image", b.rect.to_array()),
                    });
                }
            }
            let img = if (w0, h0) != (size, size) {
                image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
            } else {
                img
            };
            flat.extend(img.pixels().map(|p| from_u8(p.0[0])));
            label_flat.extend(rec.labels.iter().map(|&l| l as f32));

            let mut rec = rec;
            for b in rec.boxes.iter_mut() {
                b.rect = b.rect.rescale((h0, w0), (size, size));
            }
            let mut per_class = Vec::with_capacity(c);
            for class in 0..c {
                let mask = if let Some(mp) = &rec.seg_masks[class] {
                    let mpath = root.join(mp);
                    let m = open_gray(&mpath)?;
                    if (m.width() as usize, m.height() as usize) != (w0, h0) {
                        return Err(Error::ShapeMismatch(format!(
                            "row {row}: mask {} is {}x{}, image is {w0}x{h0}",
                            mpath.display(),
                            m.width(),
                            m.height()
                        )));
                    }
                    let m = image::imageops::resize(&m, size as u32, size as u32, FilterType::Nearest);
                    Some(gray_to_grid(&m, |p| if p > 127 { 1.0 } else { 0.0 }))
                } else if rec.boxes_for(class).next().is_some() {
                    let mut g = Grid::zeros(size, size);
                    for r in rec.boxes_for(class) {
                        g.fill_rect(r, 1.0);
                    }
                    Some(g)
                } else {
                    None
                };
                per_class.push(mask);
            }
            gt_masks.push(per_class);
            scaled_records.push(rec);
        }

        let s = size as i64;
        let pixels = Tensor::from_slice(&flat).view([n as i64, 1, s, s]);
        let labels = Tensor::from_slice(&label_flat).view([n as i64, c as i64]);
        let mut positives = vec![Vec::new(); c];
        let mut negatives = vec![Vec::new(); c];
        for (i, r) in scaled_records.iter().enumerate() {
            for class in 0..c {
                if r.is_positive(class) {
                    positives[class].push(i);
                } else {
                    negatives[class].push(i);
                }
            }
        }
        Ok(Dataset {
            root,
            class_names: class_names.to_vec(),
            size,
            records: scaled_records,
            pixels,
            labels,
            gt_masks,
            positives,
            negatives,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn positives(&self, class: usize) -> &[usize] {
        &self.positives[class]
    }

    pub fn negatives(&self, class: usize) -> &[usize] {
        &self.negatives[class]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    /// Ground-truth mask of `record` for `class`: its segmentation if present,
    /// else the union of its boxes.
    pub fn gt_mask(&self, record: usize, class: usize) -> Option<&Grid> {
        self.gt_masks[record][class].as_ref()
    }

    pub fn image(&self, index: usize) -> Tensor {
        self.pixels.get(index as i64).unsqueeze(0)
    }

    pub fn all_pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn label(&self, index: usize, class: usize) -> bool {
        self.records[index].is_positive(class)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let idx = Tensor::from_slice(&indices.iter().map(|&i| i as i64).collect::<Vec<_>>());
        let pixels = self.pixels.index_select(0, &idx);
        let labels = self.labels.index_select(0, &idx);
        let c = self.num_classes();
        let has_gt: Vec<Vec<bool>> =
            indices.iter().map(|&i| (0..c).map(|k| self.gt_masks[i][k].is_some()).collect()).collect();
        let masks = if has_gt.iter().flatten().any(|&b| b) {
            let s = self.size;
            let mut flat = vec![0f32; indices.len() * c * s * s];
            for (bi, &i) in indices.iter().enumerate() {
                for k in 0..c {
                    if let Some(m) = &self.gt_masks[i][k] {
                        let off = (bi * c + k) * s * s;
                        flat[off..off + s * s].copy_from_slice(m.as_slice());
                    }
                }
            }
            Some(Tensor::from_slice(&flat).view([indices.len() as i64, c as i64, s as i64, s as i64]))
        } else {
            None
        };
        ImageBatch::new(pixels, labels, masks, has_gt, indices.to_vec())
    }

    /// Draws `batch_size` distinct positives and negatives of `class`.
    pub fn sample_pair_indices(&self, class: usize, batch_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if class >= self.num_classes() {
            return Err(Error::IndexOutOfRange { index: class, classes: self.num_classes() });
        }
        let pos = &self.positives[class];
        let neg = &self.negatives[class];
        for pool in [pos, neg] {
            if pool.len() < batch_size {
                return Err(Error::InsufficientSamples { class, needed: batch_size, available: pool.len() });
            }
        }
        let mut rng = rng_for(seed, &[class as u64]);
        let p = sample(&mut rng, pos.len(), batch_size).into_iter().map(|i| pos[i]).collect();
        let q = sample(&mut rng, neg.len(), batch_size).into_iter().map(|i| neg[i]).collect();
        Ok((p, q))
    }

    pub fn sample_pair(&self, class: usize, batch_size: usize, seed: u64) -> Result<(ImageBatch, ImageBatch)> {
        let (p, q) = self.sample_pair_indices(class, batch_size, seed)?;
        Ok((self.batch(&p)?, self.batch(&q)?))
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub size: usize,
    pub seed: u64,
    /// Marginal probability of each finding.
    pub prevalence: f64,
    /// Probability that class `c` copies the label of class `c-1`.
    pub co_occurrence: f64,
    /// Fraction of records whose positive findings carry box + mask annotations.
    pub annotated_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_samples: 400,
            num_classes: 3,
            size: 64,
            seed: 1,
            prevalence: 0.4,
            co_occurrence: 0.2,
            annotated_fraction: 1.0,
        }
    }
}

pub fn synthetic_class_names(num_classes: usize) -> Vec<String> {
    const NAMED: [&str; 3] = ["enlarged_heart", "corner_wedge", "upper_band"];
    (0..num_classes)
        .map(|c| NAMED.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("blob_{c}")))
        .collect()
}

/// Shapes are laid out on a 64-unit canvas and scaled to the image size.
struct Canvas {
    grid: Grid,
    unit: f64,
    dx: f64,
    dy: f64,
}

impl Canvas {
    fn new(size: usize, fill: f32, dx: f64, dy: f64) -> Self {
        Canvas { grid: Grid::filled(size, size, fill), unit: size as f64 / 64.0, dx, dy }
    }

    fn paint(&mut self, inside: impl Fn(f64, f64) -> bool, value: f32) -> Grid {
        let n = self.grid.height();
        let mut mask = Grid::zeros(n, n);
        for row in 0..n {
            for col in 0..n {
                let u = (col as f64 + 0.5) / self.unit - self.dx;
                let v = (row as f64 + 0.5) / self.unit - self.dy;
                if inside(u, v) {
                    self.grid.set(row, col, value);
                    mask.set(row, col, 1.0);
                }
            }
        }
        mask
    }
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> impl Fn(f64, f64) -> bool {
    move |u, v| ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> impl Fn(f64, f64) -> bool {
    move |u, v| u >= x0 && u < x1 && v >= y0 && v < y1
}

/// Right triangle with the right angle at `(x0, y1)`, legs to `(x1, y1)` and `(x0, y0)`.
fn wedge(x0: f64, y0: f64, x1: f64, y1: f64) -> impl Fn(f64, f64) -> bool {
    move |u, v| u >= x0 && v <= y1 && (u - x0) / (x1 - x0) + (y1 - v) / (y1 - y0) <= 1.0
}

/// Bounding rectangle of the nonzero pixels.
fn support_rect(mask: &Grid) -> Option<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            if mask.get(row, col) != 0.0 {
                x0 = x0.min(col);
                y0 = y0.min(row);
                x1 = x1.max(col + 1);
                y1 = y1.max(row + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
}

/// One synthetic sample: image, labels and per-class masks of the generating
/// feature (present only for positive classes).
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Grid,
    pub labels: Vec<u8>,
    pub feature_masks: Vec<Option<Grid>>,
    pub annotated: bool,
}

const EXTRA_BLOB_SITES: [(f64, f64); 6] =
    [(21.0, 22.0), (43.0, 44.0), (32.0, 17.0), (17.0, 50.0), (47.0, 26.0), (26.0, 40.0)];

/// Renders sample `index` of the synthetic dataset. Pure function of
/// `(cfg, index)`.
///
/// Anatomy is a dark background, a body ellipse, two lungs, a mediastinum and
/// a heart. Findings sit at fixed anatomical sites: class 0 enlarges and
/// brightens the heart, class 1 fills the lower outer corner of the left lung
/// with a wedge, class 2 draws a horizontal band in the upper right lung, and
/// further classes add small discs at fixed sites.
pub fn render_synthetic(cfg: &SyntheticConfig, index: usize) -> SyntheticSample {
    let mut rng = rng_for(cfg.seed, &[index as u64]);
    let c = cfg.num_classes;
    let mut labels = Vec::with_capacity(c);
    for k in 0..c {
        let label = if k > 0 && rng.gen_bool(cfg.co_occurrence) {
            labels[k - 1]
        } else {
            rng.gen_bool(cfg.prevalence) as u8
        };
        labels.push(label);
    }
    let annotated = rng.gen_bool(cfg.annotated_fraction);
    let dx = rng.gen_range(-2.0..=2.0f64).round();
    let dy = rng.gen_range(-2.0..=2.0f64).round();
    let scale: f64 = rng.gen_range(0.92..1.08);
    let gain: f32 = rng.gen_range(0.92..1.08);

    let mut canvas = Canvas::new(cfg.size, -0.85, dx, dy);
    canvas.paint(ellipse(32.0, 36.0, 27.0, 28.0), -0.3);
    canvas.paint(ellipse(21.0, 32.0, 8.5, 17.0), -0.65);
    canvas.paint(ellipse(43.0, 32.0, 8.5, 17.0), -0.65);
    canvas.paint(rect(29.0, 12.0, 35.0, 56.0), -0.15);

    let mut feature_masks = vec![None; c];
    if labels.first() == Some(&1) {
        feature_masks[0] = Some(canvas.paint(ellipse(34.0, 42.0, 10.5 * scale, 8.0 * scale), 0.3));
    } else {
        canvas.paint(ellipse(34.0, 42.0, 7.0, 5.5), 0.1);
    }
    if labels.get(1) == Some(&1) {
        let reach = 13.0 * scale;
        feature_masks[1] = Some(canvas.paint(wedge(13.0, 49.0 - reach, 13.0 + reach, 49.0), 0.25));
    }
    if labels.get(2) == Some(&1) {
        let half = 2.5 * scale;
        feature_masks[2] = Some(canvas.paint(rect(37.0, 21.0 - half, 50.0, 21.0 + half), 0.2));
    }
    for k in 3..c {
        if labels[k] == 1 {
            let (x, y) = EXTRA_BLOB_SITES[(k - 3) % EXTRA_BLOB_SITES.len()];
            feature_masks[k] = Some(canvas.paint(ellipse(x, y, 3.5 * scale, 3.5 * scale), 0.3));
        }
    }

    let mut image = canvas.grid;
    for v in image.as_mut_slice() {
        let noise: f32 = rng.gen_range(-0.05..0.05);
        *v = (*v * gain + noise).clamp(-0.95, 0.95);
    }
    SyntheticSample { image, labels, feature_masks, annotated }
}

/// Writes a synthetic dataset (`images/`, `masks/`, `manifest.csv`) to
/// `out_dir` and returns the manifest path.
pub fn make_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<PathBuf> {
    if cfg.num_classes < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", cfg.num_classes)));
    }
    if cfg.size < 32 || cfg.size % 4 != 0 {
        return Err(Error::InvalidConfig(format!("size must be >= 32 and divisible by 4, got {}", cfg.size)));
    }
    for (name, p) in
        [("prevalence", cfg.prevalence), ("co_occurrence", cfg.co_occurrence), ("annotated_fraction", cfg.annotated_fraction)]
    {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {p}")));
        }
    }
    let class_names = synthetic_class_names(cfg.num_classes);
    let mut records = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let sample = render_synthetic(cfg, i);
        let id = format!("syn{i:05}");
        let image_path = PathBuf::from("images").join(format!("{id}.png"));
        save_gray(&out_dir.join(&image_path), &sample.image)?;
        let mut boxes = Vec::new();
        let mut seg_masks = vec![None; cfg.num_classes];
        if sample.annotated {
            for (k, mask) in sample.feature_masks.iter().enumerate() {
                let Some(mask) = mask else { continue };
                if let Some(r) = support_rect(mask) {
                    boxes.push(BoxAnnotation { class_index: k, rect: r });
                    let mp = PathBuf::from("masks").join(format!("{id}_c{k}.png"));
                    save_mask(&out_dir.join(&mp), mask)?;
                    seg_masks[k] = Some(mp);
                }
            }
        }
        records.push(ImageRecord { id, image_path, labels: sample.labels, boxes, seg_masks });
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &class_names, &records)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Contamination
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContaminationSpec {
    pub target_class: usize,
    pub fraction: f64,
    pub tag_text: String,
    pub tag_region: Rect,
    pub pixel_value: f32,
}

impl ContaminationSpec {
    /// Tag rendered at +1, horizontally centered two pixels below the top edge.
    pub fn centered_top(target_class: usize, fraction: f64, tag_text: &str, image_size: usize) -> Self {
        let (w, h) = font::text_extent(tag_text);
        let x = image_size.saturating_sub(w) / 2;
        ContaminationSpec {
            target_class,
            fraction,
            tag_text: tag_text.to_string(),
            tag_region: Rect::new(x, 2, w.min(image_size), h),
            pixel_value: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidConfig(format!("fraction must be in [0, 1], got {}", self.fraction)));
        }
        if !(-1.0..=1.0).contains(&self.pixel_value) {
            return Err(Error::InvalidConfig(format!("pixel_value must be in [-1, 1], got {}", self.pixel_value)));
        }
        if self.tag_region.area() == 0 {
            return Err(Error::EmptyTagRegion);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionEntry {
    pub id: String,
    pub class: usize,
    #[serde(rename = "box")]
    pub rect: [usize; 4],
}

impl InjectionEntry {
    pub fn region(&self) -> Rect {
        let [x, y, w, h] = self.rect;
        Rect::new(x, y, w, h)
    }
}

#[derive(Debug, Clone)]
pub struct ContaminationOutcome {
    pub manifest: PathBuf,
    pub log: PathBuf,
    pub entries: Vec<InjectionEntry>,
}

/// Picks exactly `round(fraction · n)` of `positives`, reproducibly.
pub fn choose_contaminated(positives: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((fraction * positives.len() as f64).round() as usize).min(positives.len());
    let mut rng = rng_for(seed, &[0xC0DE]);
    let mut chosen: Vec<usize> = sample(&mut rng, positives.len(), k).into_iter().map(|i| positives[i]).collect();
    chosen.sort_unstable();
    chosen
}

fn copy_file(src: &Path, dst: &Path) -> Result<()> {
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::copy(src, dst).map_err(|e| Error::io(src, e))?;
    Ok(())
}

/// Copies the dataset behind `src_manifest` to `dst_dir`, stamping the tag on a
/// seeded subset of the target class's positives. Untouched images are copied
/// byte for byte; tagged images differ only inside `tag_region`.
pub fn contaminate(src_manifest: &Path, dst_dir: &Path, spec: &ContaminationSpec, seed: u64) -> Result<ContaminationOutcome> {
    spec.validate()?;
    let class_names = read_manifest_classes(src_manifest)?;
    if spec.target_class >= class_names.len() {
        return Err(Error::IndexOutOfRange { index: spec.target_class, classes: class_names.len() });
    }
    let src_root = src_manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    if fs::canonicalize(&src_root).ok() == fs::canonicalize(dst_dir).ok() && dst_dir.exists() {
        return Err(Error::InvalidConfig("contaminate must write to a new directory".into()));
    }
    let records = load_manifest(src_manifest, &class_names)?;
    let positives: Vec<usize> =
        records.iter().enumerate().filter(|(_, r)| r.is_positive(spec.target_class)).map(|(i, _)| i).collect();
    if positives.is_empty() {
        return Err(Error::EmptyPositiveSet { class: spec.target_class });
    }
    let chosen: BTreeSet<usize> = choose_contaminated(&positives, spec.fraction, seed).into_iter().collect();
    fs::create_dir_all(dst_dir).map_err(|e| Error::io(dst_dir, e))?;

    let value = to_u8(spec.pixel_value);
    let mut entries = Vec::with_capacity(chosen.len());
    for (i, rec) in records.iter().enumerate() {
        let src = src_root.join(&rec.image_path);
        let dst = dst_dir.join(&rec.image_path);
        if chosen.contains(&i) {
            let mut img = open_gray(&src)?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            if !spec.tag_region.fits(h, w) {
                return Err(Error::InvalidConfig(format!(
                    "tag region {:?} does not fit {w}x{h} image {}",
                    spec.tag_region.to_array(),
                    rec.id
                )));
            }
            let mut stamp = Grid::zeros(h, w);
            font::render(&mut stamp, &spec.tag_text, &spec.tag_region, 1.0)?;
            for (x, y, p) in img.enumerate_pixels_mut() {
                if stamp.get(y as usize, x as usize) == 1.0 {
                    *p = Luma([value]);
                }
            }
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.save(&dst).map_err(|e| Error::image(&dst, e))?;
            entries.push(InjectionEntry { id: rec.id.clone(), class: spec.target_class, rect: spec.tag_region.to_array() });
        } else {
            copy_file(&src, &dst)?;
        }
        for m in rec.seg_masks.iter().flatten() {
            copy_file(&src_root.join(m), &dst_dir.join(m))?;
        }
    }
    let manifest = dst_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &class_names, &records)?;
    let log = dst_dir.join(INJECTION_LOG_FILE);
    let mut file = fs::File::create(&log).map_err(|e| Error::io(&log, e))?;
    for e in &entries {
        writeln!(file, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(&log, err))?;
    }
    Ok(ContaminationOutcome { manifest, log, entries })
}

pub fn read_injection_log(path: &Path) -> Result<Vec<InjectionEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.csv");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn manifest_three_rows_five_classes() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "id,path,c0,c1,c2,c3,c4,boxes,masks\n\
             a,a.png,1,0,0,0,1,0:1:2:3:4;4:0:0:5:5,\n\
             b,b.png,0,0,0,0,0,,\n\
             c,c.png,0,1,1,0,0,c2:3:3:2:2,1:m/c1.png\n",
        );
        let recs = load_manifest(&p, &names(5)).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.labels.len() == 5));
        assert_eq!(recs[0].boxes.len(), 2);
        assert_eq!(recs[2].boxes[0].class_index, 2);
        assert_eq!(recs[2].seg_masks[1].as_deref(), Some(Path::new("m/c1.png")));
        assert!(recs[2].has_annotation(1) && recs[2].has_annotation(2) && !recs[2].has_annotation(0));
    }

    #[test]
    fn negative_box_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "id,path,c0,c1,boxes,masks\na,a.png,1,0,,\nb,b.png,1,0,0:-3:0:10:10,\n");
        match load_manifest(&p, &names(2)) {
            Err(Error::MalformedBox { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected MalformedBox, got {other:?}"),
        }
    }

    #[test]
    fn manifest_errors_name_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "id,path,c0,boxes,masks\na,a.png,1,,\n");
        assert!(matches!(load_manifest(&p, &names(2)), Err(Error::MissingColumn { row: 0, .. })));
        let p = write(dir.path(), "id,path,c0,c1,boxes,masks\na,a.png,1,0,7:0:0:1:1,\n");
        assert!(matches!(load_manifest(&p, &names(2)), Err(Error::UnknownClass { row: 1, .. })));
        let p = write(dir.path(), "id,path,c0,c1,boxes,masks\na,a.png,1,0,,\nb,b.png,2,0,,\n");
        assert!(matches!(load_manifest(&p, &names(2)), Err(Error::InvalidLabel { row: 2, .. })));
        let p = write(dir.path(), "id,path,c0,c1,bogus,boxes,masks\na,a.png,1,0,x,,\n");
        assert!(matches!(load_manifest(&p, &names(2)), Err(Error::UnknownClass { row: 0, .. })));
    }

    #[test]
    fn chexpert_label_set() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = CHEXPERT_FINDINGS.iter().map(|s| s.to_string()).collect();
        let header = format!("id,path,{},boxes,masks\nx,x.png,0,1,0,0,1,,\n", names.join(","));
        let p = write(dir.path(), &header);
        assert_eq!(read_manifest_classes(&p).unwrap(), names);
        assert_eq!(load_manifest(&p, &names).unwrap()[0].labels, vec![0, 1, 0, 0, 1]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![ImageRecord {
            id: "r".into(),
            image_path: "images/r.png".into(),
            labels: vec![1, 0],
            boxes: vec![BoxAnnotation { class_index: 0, rect: Rect::new(1, 2, 3, 4) }],
            seg_masks: vec![Some("masks/r_c0.png".into()), None],
        }];
        let p = dir.path().join("m.csv");
        write_manifest(&p, &names(2), &recs).unwrap();
        assert_eq!(load_manifest(&p, &names(2)).unwrap(), recs);
    }

    #[test]
    fn pixel_quantization_is_exact_at_ends() {
        assert_eq!(from_u8(to_u8(1.0)), 1.0);
        assert_eq!(from_u8(to_u8(-1.0)), -1.0);
        assert!((from_u8(to_u8(0.3)) - 0.3).abs() < 1.0 / 127.0);
    }

    #[test]
    fn synthetic_sample_is_pure_and_in_range() {
        let cfg = SyntheticConfig { num_classes: 5, ..Default::default() };
        for i in 0..20 {
            let a = render_synthetic(&cfg, i);
            let b = render_synthetic(&cfg, i);
            assert_eq!(a.image, b.image);
            assert!(a.image.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
            for (k, m) in a.feature_masks.iter().enumerate() {
                assert_eq!(m.is_some(), a.labels[k] == 1);
                if let Some(m) = m {
                    assert!(m.is_binary() && m.count_nonzero() > 0);
                }
            }
        }
    }

    #[test]
    fn chosen_count_is_rounded_fraction() {
        let pos: Vec<usize> = (0..100).collect();
        assert_eq!(choose_contaminated(&pos, 0.5, 3).len(), 50);
        assert_eq!(choose_contaminated(&pos, 0.0, 3).len(), 0);
        assert_eq!(choose_contaminated(&pos[..7], 1.0, 3).len(), 7);
        assert_eq!(choose_contaminated(&pos, 0.5, 3), choose_contaminated(&pos, 0.5, 3));
    }

    #[test]
    fn spec_validation() {
        let mut s = ContaminationSpec::centered_top(0, 1.5, "CXR-ROOM1", 64);
        assert!(s.validate().is_err());
        s.fraction = 0.5;
        assert!(s.validate().is_ok());
        assert_eq!(s.tag_region, Rect::new(5, 2, 53, 7));
    }
}
