//! Dense flow fields in the backward-warp convention: the source location
//! matched to target pixel j is j + F(j).

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Per-pixel 2D displacement grid plus validity mask. Displacements are
/// stored interleaved (dx, dy) in pixels at grid resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![0.0; height * width * 2],
            valid: vec![true; height * width],
        }
    }

    pub fn from_array(a: &Array, valid: Vec<bool>) -> Result<Self> {
        if a.shape.len() != 3 || a.shape[2] != 2 {
            return Err(Error::Contract(format!(
                "flow array must be [h,w,2], got {:?}",
                a.shape
            )));
        }
        let (h, w) = (a.shape[0], a.shape[1]);
        if valid.len() != h * w {
            return Err(Error::Contract("flow mask length mismatch".into()));
        }
        Ok(FlowField {
            height: h,
            width: w,
            data: a.data.clone(),
            valid,
        })
    }

    pub fn to_array(&self) -> Array {
        Array::new(vec![self.height, self.width, 2], self.data.clone()).expect("flow shape")
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, dx: f64, dy: f64) {
        let i = (y * self.width + x) * 2;
        self.data[i] = dx;
        self.data[i + 1] = dy;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Bilinear flow lookup at continuous pixel coordinates. Returns None
    /// when the position falls outside the grid or the nearest pixel is
    /// marked invalid.
    pub fn sample(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        let nx = x.round().clamp(0.0, (self.width - 1) as f64) as usize;
        let ny = y.round().clamp(0.0, (self.height - 1) as f64) as usize;
        if !self.is_valid(nx, ny) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let at = |xx: usize, yy: usize| self.get(xx, yy);
        let (a, b, c, d) = (at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1));
        let lerp = |p: f64, q: f64, f: f64| p + (q - p) * f;
        let dx = lerp(lerp(a.0, b.0, fx), lerp(c.0, d.0, fx), fy);
        let dy = lerp(lerp(a.1, b.1, fx), lerp(c.1, d.1, fx), fy);
        Some((dx, dy))
    }
}
