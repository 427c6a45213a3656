//! Small row-major 2D arrays and axis-aligned rectangles.
//!
//! Masks, attribution maps and class centers leave the autograd world as
//! [`Grid`]s so metrics and exporters stay independent of tch.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Half-open pixel rectangle `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn contains(&self, col: usize, row: usize) -> bool {
        col >= self.x && col < self.right() && row >= self.y && row < self.bottom()
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w > 0 && self.h > 0 && self.right() <= width && self.bottom() <= height
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.right()
            && other.x < self.right()
            && self.y < other.bottom()
            && other.y < self.bottom()
    }

    /// Proportional rescale between image sizes, clamped to the target bounds.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> Rect {
        let (fh, fw) = from;
        let (th, tw) = to;
        let sx = tw as f64 / fw as f64;
        let sy = th as f64 / fh as f64;
        let x0 = ((self.x as f64) * sx).floor() as usize;
        let y0 = ((self.y as f64) * sy).floor() as usize;
        let x1 = ((self.right() as f64) * sx).ceil().min(tw as f64) as usize;
        let y1 = ((self.bottom() as f64) * sy).ceil().min(th as f64) as usize;
        Rect::new(x0.min(tw - 1), y0.min(th - 1), (x1 - x0).max(1), (y1 - y0).max(1))
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Grid { height, width, data: vec![0.0; height * width] }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Grid { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    /// Ones inside `rect`, zeros elsewhere.
    pub fn from_rect(height: usize, width: usize, rect: &Rect) -> Self {
        let mut grid = Grid::zeros(height, width);
        grid.fill_rect(rect, 1.0);
        grid
    }

    /// Reads a tensor holding exactly `H·W` elements with trailing dims `(H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let size = t.size();
        if size.len() < 2 || size[..size.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::ShapeMismatch(format!("expected a single (H, W) map, got {size:?}")));
        }
        let (h, w) = (size[size.len() - 2] as usize, size[size.len() - 1] as usize);
        let flat = t.detach().to_kind(Kind::Float).contiguous().view([-1]);
        let data = Vec::<f32>::try_from(&flat)?;
        Grid::from_vec(h, w, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.data).view([self.height as i64, self.width as i64])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    pub fn fill_rect(&mut self, rect: &Rect, value: f32) {
        let y1 = rect.bottom().min(self.height);
        let x1 = rect.right().min(self.width);
        for row in rect.y.min(y1)..y1 {
            for col in rect.x.min(x1)..x1 {
                self.data[row * self.width + col] = value;
            }
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f32, f32) -> f32) -> Result<Grid> {
        self.check_same_shape(other)?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Grid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|&v| v.abs() as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_rasterizes_half_open() {
        let g = Grid::from_rect(8, 8, &Rect::new(2, 3, 4, 2));
        assert_eq!(g.count_nonzero(), 8);
        assert_eq!(g.get(3, 2), 1.0);
        assert_eq!(g.get(4, 5), 1.0);
        assert_eq!(g.get(5, 5), 0.0);
        assert_eq!(g.get(3, 6), 0.0);
    }

    #[test]
    fn rescale_is_proportional() {
        let r = Rect::new(32, 64, 64, 32).rescale((320, 320), (64, 64));
        // edges scale outward: rows 12.8..19.2 become 12..20
        assert_eq!(r, Rect::new(6, 12, 14, 8));
        let same = Rect::new(3, 4, 5, 6).rescale((64, 64), (64, 64));
        assert_eq!(same, Rect::new(3, 4, 5, 6));
    }

    #[test]
    fn tensor_round_trip() {
        let g = Grid::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let back = Grid::from_tensor(&g.to_tensor().view([1, 1, 2, 3])).unwrap();
        assert_eq!(g, back);
    }
}
