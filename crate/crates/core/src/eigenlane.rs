//! Low-rank lane space: the leading left singular vectors of a lane matrix
//! ("eigenlanes") and the linear maps between lanes and coefficient vectors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{LanePolyline, SampleGrid};

/// Coefficient vector of a lane in the eigenlane space.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficient(pub Vec<f64>);

impl Coefficient {
    pub fn zeros(m: usize) -> Self {
        Self(vec![0.0; m])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// `N × M` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenlaneBasis {
    u: DMatrix<f64>,
    singular_values: Vec<f64>,
    grid: SampleGrid,
}

impl EigenlaneBasis {
    /// Wrap an existing orthonormal matrix, e.g. one read back from disk.
    pub fn from_parts(u: DMatrix<f64>, singular_values: Vec<f64>, grid: SampleGrid) -> Result<Self> {
        if u.nrows() != grid.n {
            return Err(Error::InvalidDimension(format!("basis has {} rows, grid has {} samples", u.nrows(), grid.n)));
        }
        if singular_values.len() != u.ncols() || u.ncols() == 0 {
            return Err(Error::InvalidDimension("singular value count must equal M >= 1".into()));
        }
        Ok(Self { u, singular_values, grid })
    }

    pub fn dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn grid(&self) -> &SampleGrid {
        &self.grid
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Column `j` as a lane.
    pub fn eigenlane(&self, j: usize) -> LanePolyline {
        LanePolyline::complete(self.u.column(j).iter().copied().collect())
    }

    /// Row-major copy of `U`.
    pub fn row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n() * self.dim());
        for i in 0..self.n() {
            for j in 0..self.dim() {
                out.push(self.u[(i, j)]);
            }
        }
        out
    }

    /// Orthogonal projection `c = Uᵀ r`.
    pub fn encode(&self, lane: &LanePolyline) -> Result<Coefficient> {
        lane.check_grid(&self.grid)?;
        if !lane.is_complete() {
            return Err(Error::IncompleteLane("encoding needs every sample valid".into()));
        }
        let r = DVector::from_column_slice(&lane.xs);
        Ok(Coefficient((self.u.transpose() * r).iter().copied().collect()))
    }

    /// `r = U c`, all points valid.
    pub fn decode(&self, c: &Coefficient) -> Result<LanePolyline> {
        self.decode_slice(&c.0)
    }

    pub fn decode_slice(&self, c: &[f64]) -> Result<LanePolyline> {
        if c.len() != self.dim() {
            return Err(Error::InvalidDimension(format!(
                "coefficient has {} entries, basis has {}",
                c.len(),
                self.dim()
            )));
        }
        let xs = (0..self.n()).map(|i| (0..self.dim()).map(|j| self.u[(i, j)] * c[j]).sum()).collect();
        Ok(LanePolyline::complete(xs))
    }

    /// Project onto the eigenlane span and back.
    pub fn reconstruct(&self, lane: &LanePolyline) -> Result<LanePolyline> {
        self.decode(&self.encode(lane)?)
    }
}

/// Assemble complete lanes as the columns of an `N × L` matrix.
pub fn lane_matrix(lanes: &[LanePolyline], grid: &SampleGrid) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::zeros(grid.n, lanes.len());
    for (j, lane) in lanes.iter().enumerate() {
        lane.check_grid(grid)?;
        if !lane.is_complete() {
            return Err(Error::IncompleteMatrix(format!("lane {j} has invalid points")));
        }
        for i in 0..grid.n {
            a[(i, j)] = lane.xs[i];
        }
    }
    Ok(a)
}

/// First `m` left singular vectors of the lane matrix. No mean lane is
/// subtracted.
pub fn build_basis(lanes: &[LanePolyline], m: usize, grid: &SampleGrid) -> Result<EigenlaneBasis> {
    let a = lane_matrix(lanes, grid)?;
    basis_from_matrix(&a, m, *grid)
}

pub fn basis_from_matrix(a: &DMatrix<f64>, m: usize, grid: SampleGrid) -> Result<EigenlaneBasis> {
    let (n, l) = a.shape();
    if m < 1 || m > n.min(l) {
        return Err(Error::InvalidDimension(format!("M = {m} outside [1, {}]", n.min(l))));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::IncompleteMatrix("non-finite entries".into()));
    }
    let svd = a.clone().svd(true, false);
    let u_full = svd.u.ok_or_else(|| Error::InvalidDimension("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut u = DMatrix::zeros(n, m);
    let mut sv = Vec::with_capacity(m);
    for (dst, &src) in order.iter().take(m).enumerate() {
        let mut col = u_full.column(src).clone_owned();
        // sign convention: largest-magnitude entry positive
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
        u.set_column(dst, &col);
        sv.push(svd.singular_values[src]);
    }
    EigenlaneBasis::from_parts(u, sv, grid)
}

/// Mean per-point absolute reconstruction error over a set of complete lanes.
pub fn mean_reconstruction_error(basis: &EigenlaneBasis, lanes: &[LanePolyline]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for lane in lanes {
        let rec = basis.reconstruct(lane)?;
        for (a, b) in lane.xs.iter().zip(&rec.xs) {
            total += (a - b).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> SampleGrid {
        SampleGrid::new(n, 0.0, (n * 4) as f64, n * 4 + 1, 64).unwrap()
    }

    fn random_lanes(n: usize, l: usize, seed: u64) -> Vec<LanePolyline> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..l).map(|_| LanePolyline::complete((0..n).map(|_| rng.gen_range(-50.0..50.0)).collect())).collect()
    }

    fn orthonormality_error(b: &EigenlaneBasis) -> f64 {
        let g = b.matrix().transpose() * b.matrix();
        (g - DMatrix::identity(b.dim(), b.dim())).abs().max()
    }

    #[test]
    fn rank_one_matrix_is_exact_with_one_eigenlane() {
        let n = 8;
        let base: Vec<f64> = (0..n).map(|i| 3.0 + i as f64 * 1.5).collect();
        let lanes: Vec<_> = [1.0, -2.0, 0.5, 4.0]
            .iter()
            .map(|s| LanePolyline::complete(base.iter().map(|v| v * s).collect()))
            .collect();
        let b = build_basis(&lanes, 1, &grid(n)).unwrap();
        for lane in &lanes {
            let r = b.reconstruct(lane).unwrap();
            for (x, y) in lane.xs.iter().zip(&r.xs) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_basis_reconstructs_exactly_and_is_orthonormal() {
        let lanes = random_lanes(6, 20, 1);
        let b = build_basis(&lanes, 6, &grid(6)).unwrap();
        assert!(orthonormality_error(&b) < 1e-9);
        assert!(mean_reconstruction_error(&b, &lanes).unwrap() < 1e-9);
        assert!(b.singular_values().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn dimension_and_completeness_errors() {
        let lanes = random_lanes(6, 3, 2);
        assert!(matches!(build_basis(&lanes, 0, &grid(6)), Err(Error::InvalidDimension(_))));
        assert!(matches!(build_basis(&lanes, 4, &grid(6)), Err(Error::InvalidDimension(_))));
        let mut holed = lanes.clone();
        holed[1].valid[2] = false;
        assert!(matches!(build_basis(&holed, 2, &grid(6)), Err(Error::IncompleteMatrix(_))));
    }

    #[test]
    fn encode_decode_examples() {
        let lanes = random_lanes(10, 30, 3);
        let b = build_basis(&lanes, 4, &grid(10)).unwrap();
        assert_eq!(b.encode(&LanePolyline::complete(vec![0.0; 10])).unwrap(), Coefficient::zeros(4));
        let u1 = b.eigenlane(0);
        let scaled = LanePolyline::complete(u1.xs.iter().map(|v| 5.0 * v).collect());
        let c = b.encode(&scaled).unwrap();
        assert!((c.0[0] - 5.0).abs() < 1e-12);
        assert!(c.0[1..].iter().all(|v| v.abs() < 1e-12));
        assert_eq!(b.decode(&Coefficient::zeros(4)).unwrap().xs, vec![0.0; 10]);
        let e1 = b.decode(&Coefficient(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(e1, u1);
        assert!(matches!(b.decode(&Coefficient(vec![1.0])), Err(Error::InvalidDimension(_))));
        let mut partial = scaled.clone();
        partial.valid[0] = false;
        assert!(matches!(b.encode(&partial), Err(Error::IncompleteLane(_))));
    }

    #[test]
    fn span_round_trip_and_isometry() {
        let lanes = random_lanes(12, 40, 4);
        let b = build_basis(&lanes, 5, &grid(12)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let c = Coefficient((0..5).map(|_| rng.gen_range(-10.0..10.0)).collect());
            let lane = b.decode(&c).unwrap();
            let norm = lane.xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - c.norm()).abs() < 1e-9);
            let back = b.decode(&b.encode(&lane).unwrap()).unwrap();
            for (x, y) in lane.xs.iter().zip(&back.xs) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn error_non_increasing_in_m() {
        let lanes = random_lanes(10, 60, 5);
        let errs: Vec<f64> = (1..=10)
            .map(|m| {
                let b = build_basis(&lanes, m, &grid(10)).unwrap();
                let a = lane_matrix(&lanes, &grid(10)).unwrap();
                let u = b.matrix();
                (&a - u * (u.transpose() * &a)).norm()
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{errs:?}");
    }
}
