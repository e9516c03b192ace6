//! Dense flow fields in offset convention (`target = x + flow(x)`), bilinear
//! sampling and the forward-backward cycle distance.

use thiserror::Error;

use crate::geometry::Vec2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("pixel ({u}, {v}) outside {width}x{height} grid")]
    OutOfBounds { u: usize, v: usize, width: usize, height: usize },
    #[error("grid dimensions must be at least 1x1, got {0}x{1}")]
    EmptyGrid(usize, usize),
    #[error("buffer length {got} does not match {width}x{height}")]
    ShapeMismatch { width: usize, height: usize, got: usize },
    #[error("valid flow vector at ({u}, {v}) is not finite")]
    NonFinite { u: usize, v: usize },
}

/// Image-sized set of pixel locations, iterated row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize) -> Result<Self, FlowError> {
        if width == 0 || height == 0 {
            return Err(FlowError::EmptyGrid(width, height));
        }
        Ok(Self { width, height })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }

    pub fn point(&self, idx: usize) -> Vec2 {
        let (u, v) = self.coords(idx);
        Vec2::new(u as f64, v as f64)
    }

    /// True when `p` lies in `[0, W-1] × [0, H-1]`.
    pub fn contains_point(&self, p: &Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |v| (0..self.width).map(move |u| (u, v)))
    }
}

/// The four bilinear taps of a sub-pixel location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTaps {
    /// Flat indices of (x0,y0), (x1,y0), (x0,y1), (x1,y1).
    pub indices: [usize; 4],
    pub weights: [f64; 4],
    /// Derivatives of the weights with respect to the sample location.
    pub d_weights: [Vec2; 4],
}

impl BilinearTaps {
    pub fn new(grid: &PixelGrid, p: &Vec2) -> Option<Self> {
        if !p.x.is_finite() || !p.y.is_finite() || !grid.contains_point(p) {
            return None;
        }
        let x0 = (p.x.floor() as usize).min(grid.width.saturating_sub(2));
        let y0 = (p.y.floor() as usize).min(grid.height.saturating_sub(2));
        let x1 = (x0 + 1).min(grid.width - 1);
        let y1 = (y0 + 1).min(grid.height - 1);
        let fx = p.x - x0 as f64;
        let fy = p.y - y0 as f64;
        // single-column/row grids only admit the integer coordinate
        let (fx, dfx) = if x1 == x0 { (0.0, 0.0) } else { (fx, 1.0) };
        let (fy, dfy) = if y1 == y0 { (0.0, 0.0) } else { (fy, 1.0) };
        Some(Self {
            indices: [grid.index(x0, y0), grid.index(x1, y0), grid.index(x0, y1), grid.index(x1, y1)],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            d_weights: [
                Vec2::new(-(1.0 - fy) * dfx, -(1.0 - fx) * dfy),
                Vec2::new((1.0 - fy) * dfx, -fx * dfy),
                Vec2::new(-fy * dfx, (1.0 - fx) * dfy),
                Vec2::new(fy * dfx, fx * dfy),
            ],
        })
    }
}

/// Per-pixel 2-vectors with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    grid: PixelGrid,
    vectors: Vec<Vec2>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(grid: PixelGrid) -> Self {
        Self::constant(grid, Vec2::zeros())
    }

    pub fn constant(grid: PixelGrid, value: Vec2) -> Self {
        Self { grid, vectors: vec![value; grid.len()], valid: vec![true; grid.len()] }
    }

    /// Builds a field from a per-pixel closure; `None` marks the pixel invalid.
    pub fn from_fn(grid: PixelGrid, mut f: impl FnMut(usize, usize) -> Option<Vec2>) -> Self {
        let mut vectors = Vec::with_capacity(grid.len());
        let mut valid = Vec::with_capacity(grid.len());
        for (u, v) in grid.iter() {
            match f(u, v) {
                Some(d) if d.x.is_finite() && d.y.is_finite() => {
                    vectors.push(d);
                    valid.push(true);
                }
                _ => {
                    vectors.push(Vec2::zeros());
                    valid.push(false);
                }
            }
        }
        Self { grid, vectors, valid }
    }

    pub fn from_parts(grid: PixelGrid, vectors: Vec<Vec2>, valid: Vec<bool>) -> Result<Self, FlowError> {
        for len in [vectors.len(), valid.len()] {
            if len != grid.len() {
                return Err(FlowError::ShapeMismatch { width: grid.width, height: grid.height, got: len });
            }
        }
        for (i, (d, ok)) in vectors.iter().zip(&valid).enumerate() {
            if *ok && !(d.x.is_finite() && d.y.is_finite()) {
                let (u, v) = grid.coords(i);
                return Err(FlowError::NonFinite { u, v });
            }
        }
        Ok(Self { grid, vectors, valid })
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn vectors(&self) -> &[Vec2] {
        &self.vectors
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, u: usize, v: usize) -> Option<Vec2> {
        let i = self.grid.index(u, v);
        self.valid[i].then(|| self.vectors[i])
    }

    pub fn vector_at(&self, idx: usize) -> Vec2 {
        self.vectors[idx]
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn set(&mut self, u: usize, v: usize, value: Option<Vec2>) {
        let i = self.grid.index(u, v);
        match value {
            Some(d) if d.x.is_finite() && d.y.is_finite() => {
                self.vectors[i] = d;
                self.valid[i] = true;
            }
            _ => {
                self.vectors[i] = Vec2::zeros();
                self.valid[i] = false;
            }
        }
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Target location of integer pixel `(u, v)`.
    pub fn apply(&self, u: usize, v: usize) -> Result<Vec2, FlowError> {
        if u >= self.grid.width || v >= self.grid.height {
            return Err(FlowError::OutOfBounds { u, v, width: self.grid.width, height: self.grid.height });
        }
        Ok(Vec2::new(u as f64, v as f64) + self.vectors[self.grid.index(u, v)])
    }

    /// Bilinear interpolation of the flow at a sub-pixel location. `None` when
    /// `p` leaves the grid or touches an invalid neighbour.
    pub fn sample(&self, p: &Vec2) -> Option<Vec2> {
        let taps = BilinearTaps::new(&self.grid, p)?;
        self.sample_taps(&taps)
    }

    pub fn sample_taps(&self, taps: &BilinearTaps) -> Option<Vec2> {
        if taps.indices.iter().any(|&i| !self.valid[i]) {
            return None;
        }
        Some(taps.indices.iter().zip(&taps.weights).fold(Vec2::zeros(), |acc, (&i, &w)| acc + self.vectors[i] * w))
    }
}

/// Round-trip error `‖f_ab(f_ba(x)) − x‖` in pixels, with `f_ab` sampled
/// bilinearly at the forward target. `Ok(None)` when the round trip is undefined.
pub fn cycle_distance(fab: &FlowField, fba: &FlowField, u: usize, v: usize) -> Result<Option<f64>, FlowError> {
    let target = fba.apply(u, v)?;
    if !fba.is_valid(fba.grid().index(u, v)) {
        return Ok(None);
    }
    let Some(back) = fab.sample(&target) else { return Ok(None) };
    let x = Vec2::new(u as f64, v as f64);
    Ok(Some((target + back - x).norm()))
}
