//! Local explanations (attribution maps weighted by the classifier) and global
//! explanations (class centers plus classifier weight grids), with PNG and
//! `.npy` export.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use tch::{Kind, Tensor};

use crate::classifier::pool;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::net::AttriNet;

/// Nearest-neighbor block replication of an `(h,w)` grid by `gamma`.
pub fn upsample_weights(w: &Tensor, gamma: usize) -> Result<Tensor> {
    if w.dim() != 2 || gamma == 0 {
        return Err(Error::ShapeMismatch(format!("weight grid {:?}, factor {gamma}", w.size())));
    }
    let g = gamma as i64;
    Ok(w.repeat_interleave_self_int(g, 0, None).repeat_interleave_self_int(g, 1, None))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalExplanation {
    pub class_index: usize,
    pub attribution: Grid,
    pub weighted_map: Grid,
    pub positive_part: Grid,
    pub probability: f64,
    pub logit: f64,
}

/// Weighted maps `(B,1,H,W)` and logits `(B,)` for `class`, without gradients.
pub fn weighted_maps(net: &AttriNet, x: &Tensor, class: usize) -> Result<(Tensor, Tensor, Tensor)> {
    tch::no_grad(|| {
        let m = net.attribution(x, class)?;
        let head = &net.heads[class];
        let up = upsample_weights(head.weights(), head.pool_factor())?;
        let weighted = &m * up.view([1, 1, up.size()[0], up.size()[1]]);
        let logits = head.logits(&m)?;
        Ok((m, weighted, logits))
    })
}

/// `|Σ pool_γ(weighted) − logit|` per item.
pub fn faithfulness_gap(weighted: &Tensor, logits: &Tensor, gamma: usize) -> Result<Vec<f64>> {
    let size = weighted.size();
    let g = gamma as i64;
    let pooled = pool(weighted, gamma, &[size[2] / g, size[3] / g])?;
    // γ²·avg over a block is the block sum; summing cells of the pooled
    // weighted map is the logistic regression's inner sum
    let sums = pooled.sum_dim_intlist(&[1i64, 2, 3][..], false, Kind::Double);
    let gap = (sums - logits.to_kind(Kind::Double)).abs();
    Ok(Vec::<f64>::try_from(&gap)?)
}

pub fn local_explain(net: &AttriNet, x: &Tensor, class: usize) -> Result<Vec<LocalExplanation>> {
    let (m, weighted, logits) = weighted_maps(net, x, class)?;
    let logits_v: Vec<f64> = Vec::try_from(&logits.to_kind(Kind::Double))?;
    (0..logits_v.len())
        .map(|i| {
            let weighted_map = Grid::from_tensor(&weighted.get(i as i64))?;
            Ok(LocalExplanation {
                class_index: class,
                attribution: Grid::from_tensor(&m.get(i as i64))?,
                positive_part: weighted_map.map(|v| v.max(0.0)),
                weighted_map,
                probability: 1.0 / (1.0 + (-logits_v[i]).exp()),
                logit: logits_v[i],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassGlobal {
    pub class_index: usize,
    pub v_pos: Grid,
    pub v_neg: Grid,
    pub weights: Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalExplanation {
    pub classes: Vec<ClassGlobal>,
}

pub fn global_explain(net: &AttriNet) -> Result<GlobalExplanation> {
    let classes = (0..net.num_classes())
        .map(|c| {
            let head = &net.heads[c];
            Ok(ClassGlobal {
                class_index: c,
                v_pos: Grid::from_tensor(&net.centers[c].pos)?,
                v_neg: Grid::from_tensor(&net.centers[c].neg)?,
                weights: Grid::from_tensor(&upsample_weights(head.weights(), head.pool_factor())?)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GlobalExplanation { classes })
}

/// Blue (negative) through white to red (positive), symmetric about zero.
pub fn diverging(v: f32, scale: f32) -> Rgb<u8> {
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |a: f32| (255.0 * (1.0 - a)).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade(t), fade(t)])
    } else {
        Rgb([fade(-t), fade(-t), 255])
    }
}

fn gray(v: f32) -> Rgb<u8> {
    let u = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    Rgb([u, u, u])
}

pub enum Tile<'a> {
    Image(&'a Grid),
    Signed(&'a Grid, f32),
}

const GAP: u32 = 2;

/// Lays tiles out side by side on a white background.
pub fn render_panel(tiles: &[Tile<'_>]) -> RgbImage {
    let dims = |t: &Tile<'_>| match t {
        Tile::Image(g) | Tile::Signed(g, _) => (g.width() as u32, g.height() as u32),
    };
    let width = tiles.iter().map(|t| dims(t).0).sum::<u32>() + GAP * tiles.len().saturating_sub(1) as u32;
    let height = tiles.iter().map(|t| dims(t).1).max().unwrap_or(0);
    let mut img = RgbImage::from_pixel(width.max(1), height.max(1), Rgb([255, 255, 255]));
    let mut x0 = 0;
    for t in tiles {
        let (w, _) = dims(t);
        let (g, px): (&Grid, Box<dyn Fn(f32) -> Rgb<u8>>) = match t {
            Tile::Image(g) => (g, Box::new(gray)),
            Tile::Signed(g, s) => {
                let s = *s;
                (g, Box::new(move |v| diverging(v, s)))
            }
        };
        for row in 0..g.height() {
            for col in 0..g.width() {
                img.put_pixel(x0 + col as u32, row as u32, px(g.get(row, col)));
            }
        }
        x0 += w + GAP;
    }
    img
}

fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::image(path, e))
}

fn save_npy(path: &Path, g: &Grid) -> Result<()> {
    g.to_tensor().write_npy(path)?;
    Ok(())
}

/// Writes `<id>_<class>.png` (image | attribution | weighted map) and
/// `<id>_<class>.npy` (weighted map). `flip_sign` only affects the PNG.
pub fn export_local(dir: &Path, id: &str, class_name: &str, x: &Grid, e: &LocalExplanation, flip_sign: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let shown = |g: &Grid| if flip_sign { g.map(|v| -v) } else { g.clone() };
    let (attr, weighted) = (shown(&e.attribution), shown(&e.weighted_map));
    let img = render_panel(&[
        Tile::Image(x),
        Tile::Signed(&attr, attr.max_abs()),
        Tile::Signed(&weighted, weighted.max_abs()),
    ]);
    let stem = format!("{id}_{class_name}");
    let png = dir.join(format!("{stem}.png"));
    let npy = dir.join(format!("{stem}.npy"));
    save_png(&png, &img)?;
    save_npy(&npy, &e.weighted_map)?;
    Ok(vec![png, npy])
}

/// Writes `global_<class>.png` (v_pos | v_neg | weights) plus one `.npy` per array.
pub fn export_global(dir: &Path, class_names: &[String], g: &GlobalExplanation) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let mut written = Vec::new();
    for cg in &g.classes {
        let name = &class_names[cg.class_index];
        let center_scale = cg.v_pos.max_abs().max(cg.v_neg.max_abs());
        let img = render_panel(&[
            Tile::Signed(&cg.v_pos, center_scale),
            Tile::Signed(&cg.v_neg, center_scale),
            Tile::Signed(&cg.weights, cg.weights.max_abs()),
        ]);
        let png = dir.join(format!("global_{name}.png"));
        save_png(&png, &img)?;
        written.push(png);
        for (suffix, grid) in [("pos", &cg.v_pos), ("neg", &cg.v_neg), ("weights", &cg.weights)] {
            let p = dir.join(format!("global_{name}_{suffix}.npy"));
            save_npy(&p, grid)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Scale};
    use tch::Device;

    #[test]
    fn block_replication() {
        let w = Tensor::from_slice(&[1.0f32, 2.0, 3.0, 4.0]).view([2, 2]);
        let up = upsample_weights(&w, 2).unwrap();
        let expected = Tensor::from_slice(&[1.0f32, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0])
            .view([4, 4]);
        assert!(up.equal(&expected));
        assert!(upsample_weights(&w, 1).unwrap().equal(&w));
    }

    #[test]
    fn adjointness_on_random_inputs() {
        let opts = (Kind::Float, Device::Cpu);
        let w = Tensor::randn([4, 4], opts);
        let m = Tensor::randn([3, 1, 16, 16], opts);
        let up = upsample_weights(&w, 4).unwrap().view([1, 1, 16, 16]);
        let lhs = pool(&(&up * &m), 4, &[4, 4]).unwrap().sum_dim_intlist(&[1i64, 2, 3][..], false, Kind::Float);
        let rhs = (pool(&m, 4, &[4, 4]).unwrap() * &w).sum_dim_intlist(&[1i64, 2, 3][..], false, Kind::Float);
        assert!((lhs - rhs).abs().max().double_value(&[]) < 1e-5);
    }

    #[test]
    fn zero_weights_give_empty_explanation() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let cfg = ModelConfig { num_classes: 2, image_size: 16, scale: Scale::Desk, pool_factor: 4 };
        let net = AttriNet::new(&cfg, &names, 1).unwrap();
        let x = Tensor::rand([2, 1, 16, 16], (Kind::Float, Device::Cpu)) * 2.0 - 1.0;
        let ex = local_explain(&net, &x, 1).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].weighted_map.abs_sum(), 0.0);
        assert_eq!(ex[0].probability, 0.5);
        let g = global_explain(&net).unwrap();
        assert_eq!(g.classes[0].v_pos.abs_sum(), 0.0);
        assert_eq!(g, global_explain(&net).unwrap());
    }

    #[test]
    fn unit_weights_expose_raw_map() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let cfg = ModelConfig { num_classes: 2, image_size: 16, scale: Scale::Desk, pool_factor: 4 };
        let net = AttriNet::new(&cfg, &names, 2).unwrap();
        tch::no_grad(|| {
            let _ = net.heads[0].weights().shallow_clone().fill_(1.0);
        });
        let x = Tensor::rand([2, 1, 16, 16], (Kind::Float, Device::Cpu)) * 2.0 - 1.0;
        let (m, weighted, logits) = weighted_maps(&net, &x, 0).unwrap();
        assert!(m.equal(&weighted));
        let direct = pool(&m, 4, &[4, 4]).unwrap().sum_dim_intlist(&[1i64, 2, 3][..], false, Kind::Float);
        assert!((direct - &logits).abs().max().double_value(&[]) < 1e-5);
        assert!(faithfulness_gap(&weighted, &logits, 4).unwrap().iter().all(|&g| g < 1e-5));
    }

    #[test]
    fn panels_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let g = GlobalExplanation {
            classes: vec![ClassGlobal {
                class_index: 0,
                v_pos: Grid::filled(8, 8, 0.5),
                v_neg: Grid::zeros(8, 8),
                weights: Grid::filled(8, 8, -1.0),
            }],
        };
        let files = export_global(dir.path(), &["a".to_string()], &g).unwrap();
        assert_eq!(files.len(), 4);
        let back = Tensor::read_npy(&files[1]).unwrap();
        assert_eq!(back.size(), vec![8, 8]);
        assert_eq!(diverging(0.0, 1.0), Rgb([255, 255, 255]));
        assert_eq!(diverging(1.0, 1.0), Rgb([255, 0, 0]));
        assert_eq!(diverging(-2.0, 1.0), Rgb([0, 0, 255]));
    }
}
