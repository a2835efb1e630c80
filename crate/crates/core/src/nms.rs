//! Peak selection on the probability map with curve-shaped suppression, and
//! the binary lane mask built from the selected lanes.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::eigenlane::{Coefficient, EigenlaneBasis};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{rasterize_stripe, LanePolyline, SampleGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    pub prob_threshold: f64,
    /// Suppression half-width in map pixels.
    pub removal_halfwidth: f64,
    pub max_lanes: usize,
    /// Half-width of the lane mask stripes, in map pixels.
    pub mask_halfwidth: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self { prob_threshold: 0.5, removal_halfwidth: 4.0, max_lanes: 6, mask_halfwidth: 2.0 }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::Config(format!("prob_threshold must lie in (0,1), got {}", self.prob_threshold)));
        }
        if !(self.removal_halfwidth >= 1.0) {
            return Err(Error::Config(format!("removal_halfwidth must be >= 1, got {}", self.removal_halfwidth)));
        }
        if !(self.mask_halfwidth >= 0.0) {
            return Err(Error::Config(format!("mask_halfwidth must be >= 0, got {}", self.mask_halfwidth)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Lane in the basis (full-resolution) coordinates.
    pub lane: LanePolyline,
    pub score: f64,
    pub coeff: Coefficient,
    /// `(row, col)` on the map.
    pub seed_pixel: (usize, usize),
}

/// Map geometry: the basis grid shrunk to the probability map's size.
pub fn map_grid(basis: &EigenlaneBasis, h: usize, w: usize) -> Result<(SampleGrid, usize)> {
    let g = basis.grid();
    if h == 0 || w == 0 || g.height % h != 0 || g.width % w != 0 || g.height / h != g.width / w {
        return shape_err(format!(
            "{h}x{w} map is not an integer downscale of the {}x{} basis frame",
            g.height, g.width
        ));
    }
    let f = g.height / h;
    Ok((g.downscaled(f), f))
}

fn check_maps(p: &Tensor, c: &Tensor, basis: &EigenlaneBasis) -> Result<(usize, usize)> {
    let (pc, h, w) = p.chw()?;
    let (m, ch, cw) = c.chw()?;
    if pc != 1 || (ch, cw) != (h, w) {
        return shape_err(format!("probability {:?} and coefficient {:?} maps disagree", p.shape(), c.shape()));
    }
    if m != basis.dim() {
        return shape_err(format!("coefficient map has {m} channels, basis has {}", basis.dim()));
    }
    Ok((h, w))
}

fn coefficient_at(c: &Tensor, row: usize, col: usize) -> Coefficient {
    let (m, h, w) = c.chw().expect("checked");
    Coefficient((0..m).map(|k| c.data()[(k * h + row) * w + col]).collect())
}

/// Mark every map pixel within `halfwidth` of the lane, row by row, on rows
/// where the curve is inside the frame.
fn suppress(lane: &LanePolyline, grid: &SampleGrid, factor: usize, halfwidth: f64, out: &mut [bool]) {
    let small = lane.downscaled(factor);
    let (h, w) = (grid.height, grid.width);
    for row in 0..h {
        let Some(x) = small.x_at(row as f64, grid) else { continue };
        let lo = (x - halfwidth).ceil().max(0.0);
        let hi = (x + halfwidth).floor().min((w - 1) as f64);
        if hi < lo {
            continue;
        }
        for col in lo as usize..=hi as usize {
            out[row * w + col] = true;
        }
    }
}

fn detect(p: &Tensor, c: &Tensor, basis: &EigenlaneBasis, row: usize, col: usize) -> Result<Detection> {
    let (_, _, w) = p.chw()?;
    let coeff = coefficient_at(c, row, col);
    let lane = basis.decode(&coeff)?;
    Ok(Detection { lane, score: p.data()[row * w + col], coeff, seed_pixel: (row, col) })
}

/// Iteratively take the most probable unsuppressed pixel while it exceeds the
/// threshold, decode its coefficients and suppress around the decoded curve.
/// Equal probabilities are visited in row-major order.
pub fn nms(p: &Tensor, c: &Tensor, basis: &EigenlaneBasis, cfg: &NmsConfig) -> Result<Vec<Detection>> {
    let (h, w) = check_maps(p, c, basis)?;
    let (grid, factor) = map_grid(basis, h, w)?;
    let probs = p.data();
    let mut order: Vec<usize> = (0..h * w).filter(|&i| probs[i] > cfg.prob_threshold).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; h * w];
    let mut out = Vec::new();
    for i in order {
        if out.len() >= cfg.max_lanes {
            break;
        }
        if suppressed[i] {
            continue;
        }
        let det = detect(p, c, basis, i / w, i % w)?;
        suppressed[i] = true;
        suppress(&det.lane, &grid, factor, cfg.removal_halfwidth, &mut suppressed);
        out.push(det);
    }
    Ok(out)
}

/// Reference version that rescans the whole map on every iteration and tests
/// every pixel's distance to each selected curve.
pub fn nms_naive(p: &Tensor, c: &Tensor, basis: &EigenlaneBasis, cfg: &NmsConfig) -> Result<Vec<Detection>> {
    let (h, w) = check_maps(p, c, basis)?;
    let (grid, factor) = map_grid(basis, h, w)?;
    let mut suppressed = vec![false; h * w];
    let mut out = Vec::new();
    while out.len() < cfg.max_lanes {
        let mut best: Option<(usize, usize)> = None;
        for row in 0..h {
            for col in 0..w {
                if suppressed[row * w + col] {
                    continue;
                }
                let v = p.data()[row * w + col];
                if best.map_or(true, |(r, c)| v > p.data()[r * w + c]) {
                    best = Some((row, col));
                }
            }
        }
        let Some((row, col)) = best else { break };
        if p.data()[row * w + col] <= cfg.prob_threshold {
            break;
        }
        let det = detect(p, c, basis, row, col)?;
        suppressed[row * w + col] = true;
        let small = det.lane.downscaled(factor);
        for r in 0..h {
            if let Some(x) = small.x_at(r as f64, &grid) {
                for k in 0..w {
                    if (k as f64 - x).abs() <= cfg.removal_halfwidth {
                        suppressed[r * w + k] = true;
                    }
                }
            }
        }
        out.push(det);
    }
    Ok(out)
}

/// Union of detections rasterized `2·halfwidth + 1` pixels wide on the map
/// grid, as a `1 × H × W` tensor of zeros and ones.
pub fn lane_mask(dets: &[Detection], grid: &SampleGrid, factor: usize, mask_halfwidth: f64) -> Result<Tensor> {
    let mut data = vec![0.0; grid.height * grid.width];
    for d in dets {
        let small = d.lane.downscaled(factor);
        let m = rasterize_stripe(&small, 2.0 * mask_halfwidth + 1.0, grid)?;
        for (o, &b) in data.iter_mut().zip(&m.bits) {
            if b {
                *o = 1.0;
            }
        }
    }
    Tensor::new(&[1, grid.height, grid.width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigenlane::build_basis;
    use proptest::prelude::*;

    fn basis_16x32() -> EigenlaneBasis {
        let grid = SampleGrid::new(16, 0.0, 15.0, 16, 32).unwrap();
        let lanes: Vec<LanePolyline> = (0..6)
            .map(|j| {
                LanePolyline::complete(
                    (0..16)
                        .map(|i| 3.0 + 4.0 * j as f64 + 0.3 * i as f64 * (j as f64 - 2.0) + 0.01 * (i * i) as f64)
                        .collect(),
                )
            })
            .collect();
        build_basis(&lanes, 3, &grid).unwrap()
    }

    fn maps(basis: &EigenlaneBasis, peaks: &[(usize, usize, f64, f64)]) -> (Tensor, Tensor) {
        let mut p = Tensor::full(&[1, 16, 32], 0.1);
        let mut c = Tensor::zeros(&[3, 16, 32]);
        for &(r, col, prob, x) in peaks {
            p.data_mut()[r * 32 + col] = prob;
            let coeff = basis.encode(&LanePolyline::complete(vec![x; 16])).unwrap();
            for k in 0..3 {
                c.data_mut()[(k * 16 + r) * 32 + col] = coeff.0[k];
            }
        }
        (p, c)
    }

    #[test]
    fn below_threshold_is_empty() {
        let b = basis_16x32();
        let (p, c) = maps(&b, &[]);
        assert!(nms(&p, &c, &b, &NmsConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn single_peak_decodes_its_coefficient() {
        let b = basis_16x32();
        let (p, c) = maps(&b, &[(5, 10, 0.9, 10.0)]);
        let d = nms(&p, &c, &b, &NmsConfig::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].seed_pixel, (5, 10));
        assert_eq!(d[0].lane, b.decode(&coefficient_at(&c, 5, 10)).unwrap());
    }

    #[test]
    fn peak_on_same_curve_is_suppressed() {
        let b = basis_16x32();
        let (p, c) = maps(&b, &[(5, 10, 0.9, 10.0), (12, 11, 0.8, 11.0)]);
        let cfg = NmsConfig::default();
        let fast = nms(&p, &c, &b, &cfg).unwrap();
        assert_eq!(fast.len(), 1);
        assert_eq!(fast, nms_naive(&p, &c, &b, &cfg).unwrap());

        let (p, c) = maps(&b, &[(5, 10, 0.9, 10.0), (12, 25, 0.8, 25.0)]);
        assert_eq!(nms(&p, &c, &b, &cfg).unwrap().len(), 2);
    }

    #[test]
    fn mask_is_union_of_stripes() {
        let b = basis_16x32();
        let grid = *b.grid();
        let dets: Vec<Detection> = [6.0, 20.0]
            .iter()
            .map(|&x| Detection {
                lane: LanePolyline::complete(vec![x; 16]),
                score: 0.9,
                coeff: Coefficient::zeros(3),
                seed_pixel: (0, 0),
            })
            .collect();
        assert!(lane_mask(&[], &grid, 1, 2.0).unwrap().data().iter().all(|&v| v == 0.0));
        let m = lane_mask(&dets, &grid, 1, 2.0).unwrap();
        for row in 0..16 {
            for col in 0..32 {
                let want = (4..=8).contains(&col) || (18..=22).contains(&col);
                assert_eq!(m.data()[row * 32 + col] == 1.0, want, "row {row} col {col}");
            }
        }
    }

    #[test]
    fn curve_just_outside_the_map_still_suppresses_its_border() {
        let b = basis_16x32();
        // A lane centred one pixel beyond the right edge, seeded at the edge.
        let (p, c) = maps(&b, &[(8, 31, 0.9, 32.0), (3, 30, 0.8, 32.0), (3, 5, 0.7, 5.0)]);
        let cfg = NmsConfig::default();
        let d = nms(&p, &c, &b, &cfg).unwrap();
        assert_eq!(d.iter().map(|d| d.seed_pixel).collect::<Vec<_>>(), vec![(8, 31), (3, 5)]);
        assert_eq!(d, nms_naive(&p, &c, &b, &cfg).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_rescanning_reference(
            probs in prop::collection::vec(0u8..20, 16 * 32),
            xs in prop::collection::vec(-8.0f64..40.0, 16 * 32),
            halfwidth in 1.0f64..6.0,
            threshold in 0.3f64..0.9,
            max_lanes in 1usize..8,
        ) {
            let b = basis_16x32();
            // Coarse levels force ties between pixels.
            let p = Tensor::new(&[1, 16, 32], probs.iter().map(|&v| v as f64 / 20.0).collect()).unwrap();
            let mut c = Tensor::zeros(&[3, 16, 32]);
            for (i, &x) in xs.iter().enumerate() {
                let coeff = b.encode(&LanePolyline::complete((0..16).map(|r| x + 0.2 * r as f64).collect())).unwrap();
                for k in 0..3 {
                    c.data_mut()[k * 512 + i] = coeff.0[k];
                }
            }
            let cfg = NmsConfig { prob_threshold: threshold, removal_halfwidth: halfwidth, max_lanes, mask_halfwidth: 2.0 };
            prop_assert_eq!(nms(&p, &c, &b, &cfg).unwrap(), nms_naive(&p, &c, &b, &cfg).unwrap());
        }
    }
}
