//! Lane polylines on a fixed vertical sampling grid, stripe rasterization and
//! stripe IoU.
//!
//! A lane is stored as the horizontal coordinates of `N` points at fixed rows
//! shared by every lane of a dataset. Rows where the lane is not observed are
//! flagged invalid; invalid entries carry `0.0` as a placeholder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vertical sampling rows plus the frame size they live in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleGrid {
    pub n: usize,
    pub y_top: f64,
    pub y_bottom: f64,
    pub height: usize,
    pub width: usize,
}

impl SampleGrid {
    pub fn new(n: usize, y_top: f64, y_bottom: f64, height: usize, width: usize) -> Result<Self> {
        let grid = Self { n, y_top, y_bottom, height, width };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidDimension(format!("grid needs N >= 2, got {}", self.n)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidDimension("empty frame".into()));
        }
        let ok = self.y_top.is_finite()
            && self.y_bottom.is_finite()
            && self.y_top >= 0.0
            && self.y_top < self.y_bottom
            && self.y_bottom <= (self.height - 1) as f64;
        if !ok {
            return Err(Error::InvalidDimension(format!(
                "grid rows [{}, {}] do not fit a frame of height {}",
                self.y_top, self.y_bottom, self.height
            )));
        }
        Ok(())
    }

    pub fn row_spacing(&self) -> f64 {
        (self.y_bottom - self.y_top) / (self.n - 1) as f64
    }

    /// Image row of sample `k`.
    pub fn row_y(&self, k: usize) -> f64 {
        if k + 1 == self.n {
            self.y_bottom
        } else {
            self.y_top + k as f64 * self.row_spacing()
        }
    }

    /// The same sampling expressed on a frame shrunk by an integer factor
    /// (pixel centers map as `(v + 0.5) / f - 0.5`).
    pub fn downscaled(&self, factor: usize) -> SampleGrid {
        let height = self.height / factor;
        SampleGrid {
            n: self.n,
            y_top: downscale_coord(self.y_top, factor).max(0.0),
            y_bottom: downscale_coord(self.y_bottom, factor).min((height.max(1) - 1) as f64),
            height,
            width: self.width / factor,
        }
    }
}

pub fn downscale_coord(v: f64, factor: usize) -> f64 {
    (v + 0.5) / factor as f64 - 0.5
}

pub fn upscale_coord(v: f64, factor: usize) -> f64 {
    (v + 0.5) * factor as f64 - 0.5
}

/// A lane as `N` horizontal coordinates with a validity mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub xs: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LanePolyline {
    /// A lane observed at every sample row.
    pub fn complete(xs: Vec<f64>) -> Self {
        let valid = vec![true; xs.len()];
        Self { xs, valid }
    }

    pub fn new(xs: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if xs.len() != valid.len() {
            return Err(Error::InvalidLane(format!("{} coordinates but {} validity flags", xs.len(), valid.len())));
        }
        Ok(Self { xs, valid })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn check_grid(&self, grid: &SampleGrid) -> Result<()> {
        if self.xs.len() != grid.n || self.valid.len() != grid.n {
            return Err(Error::InvalidLane(format!("lane has {} points, grid has {}", self.xs.len(), grid.n)));
        }
        Ok(())
    }

    /// Observed points as `(x, y)` pairs, top to bottom.
    pub fn points(&self, grid: &SampleGrid) -> Vec<(f64, f64)> {
        (0..self.xs.len()).filter(|&k| self.valid[k]).map(|k| (self.xs[k], grid.row_y(k))).collect()
    }

    /// Lane center at image row `y`, interpolated between the nearest valid
    /// samples; `None` outside the valid vertical extent.
    pub fn x_at(&self, y: f64, grid: &SampleGrid) -> Option<f64> {
        let mut above: Option<usize> = None;
        for k in 0..self.xs.len() {
            if !self.valid[k] {
                continue;
            }
            let yk = grid.row_y(k);
            if yk == y {
                return Some(self.xs[k]);
            }
            if yk < y {
                above = Some(k);
            } else {
                let a = above?;
                let ya = grid.row_y(a);
                let t = (y - ya) / (yk - ya);
                return Some(self.xs[a] + t * (self.xs[k] - self.xs[a]));
            }
        }
        None
    }

    /// Vertical extent `(first, last)` of the valid samples in image rows.
    pub fn valid_extent(&self, grid: &SampleGrid) -> Option<(f64, f64)> {
        let first = self.valid.iter().position(|&v| v)?;
        let last = self.valid.iter().rposition(|&v| v)?;
        Some((grid.row_y(first), grid.row_y(last)))
    }

    /// The lane in the coordinates of a frame shrunk by `factor`.
    pub fn downscaled(&self, factor: usize) -> Self {
        Self { xs: self.xs.iter().map(|&x| downscale_coord(x, factor)).collect(), valid: self.valid.clone() }
    }

    pub fn mean_abs_diff(&self, other: &LanePolyline) -> Option<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for k in 0..self.xs.len().min(other.xs.len()) {
            if self.valid[k] && other.valid[k] {
                total += (self.xs[k] - other.xs[k]).abs();
                count += 1;
            }
        }
        (count > 0).then(|| total / count as f64)
    }
}

/// Linear interpolation of an ordered point list at the grid rows. Rows
/// outside the list's vertical span are marked invalid.
pub fn resample_lane(points: &[(f64, f64)], grid: &SampleGrid) -> Result<LanePolyline> {
    if points.len() < 2 {
        return Err(Error::InvalidLane(format!("need at least 2 points, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidLane("non-finite point".into()));
    }
    if points.windows(2).any(|w| w[1].1 <= w[0].1) {
        return Err(Error::InvalidLane("points must have strictly increasing y".into()));
    }
    let mut xs = vec![0.0; grid.n];
    let mut valid = vec![false; grid.n];
    let mut seg = 0usize;
    for k in 0..grid.n {
        let y = grid.row_y(k);
        if y < points[0].1 || y > points[points.len() - 1].1 {
            continue;
        }
        while seg + 2 < points.len() && points[seg + 1].1 < y {
            seg += 1;
        }
        let (x0, y0) = points[seg];
        let (x1, y1) = points[seg + 1];
        xs[k] = if y == y0 {
            x0
        } else if y == y1 {
            x1
        } else {
            x0 + (y - y0) / (y1 - y0) * (x1 - x0)
        };
        valid[k] = true;
    }
    Ok(LanePolyline { xs, valid })
}

/// Binary `height × width` raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StripeMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl StripeMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &StripeMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape("mask dimensions differ".into()));
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Columns `c` with `center - width/2 <= c < center + width/2`, clipped to the frame.
    pub(crate) fn fill_span(&mut self, row: usize, center: f64, width: f64) {
        let lo = (center - width / 2.0).ceil();
        let hi = (center + width / 2.0).ceil() - 1.0;
        if hi < 0.0 || lo > (self.width - 1) as f64 {
            return;
        }
        let lo = lo.max(0.0) as usize;
        let hi = hi.min((self.width - 1) as f64) as usize;
        let base = row * self.width;
        for c in lo..=hi {
            self.bits[base + c] = true;
        }
    }
}

/// Rasterize a lane as a horizontal stripe of `width` pixels per image row
/// over the lane's valid vertical extent.
pub fn rasterize_stripe(lane: &LanePolyline, width: f64, grid: &SampleGrid) -> Result<StripeMask> {
    lane.check_grid(grid)?;
    if !(width >= 1.0) {
        return Err(Error::InvalidLane(format!("stripe width must be >= 1, got {width}")));
    }
    if lane.valid_count() < 2 {
        return Err(Error::InvalidLane("stripe needs at least 2 valid points".into()));
    }
    let mut mask = StripeMask::empty(grid.height, grid.width);
    let (top, bottom) = lane.valid_extent(grid).expect("at least two valid points");
    let first = top.ceil().max(0.0) as usize;
    let last = bottom.floor().min((grid.height - 1) as f64);
    if last < 0.0 {
        return Ok(mask);
    }
    for row in first..=last as usize {
        if let Some(x) = lane.x_at(row as f64, grid) {
            mask.fill_span(row, x, width);
        }
    }
    Ok(mask)
}

/// `|a ∧ b| / |a ∨ b|`, defined as 0 when both masks are empty.
pub fn stripe_iou(a: &StripeMask, b: &StripeMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!("masks are {}x{} and {}x{}", a.height, a.width, b.height, b.width)));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}
