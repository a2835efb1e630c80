//! Low-rank completion of partially observed lane matrices by alternating
//! least squares.
//!
//! The objective is
//! `Σ_{(i,j)∈O} (A_ij − u_iᵀ v_j)² + λ (Σ_i ‖u_i‖² + Σ_j ‖v_j‖²)`
//! with `u_i` the columns of an `R × N` factor and `v_j` those of an `R × L`
//! factor. Fixing one factor makes the problem a set of independent ridge
//! regressions, each solved exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LanePolyline;

/// `N × L` values with an observation mask, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct IncompleteLaneMatrix {
    n: usize,
    l: usize,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl IncompleteLaneMatrix {
    pub fn new(n: usize, l: usize, values: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        if values.len() != n * l || observed.len() != n * l {
            return Err(Error::Shape(format!("expected {} entries for {n}x{l}", n * l)));
        }
        for j in 0..l {
            if !(0..n).any(|i| observed[i * l + j]) {
                return Err(Error::IncompleteMatrix(format!("column {j} has no observed entry")));
            }
        }
        Ok(Self { n, l, values, observed })
    }

    /// Lanes become columns; invalid points become missing entries.
    pub fn from_lanes(lanes: &[LanePolyline]) -> Result<Self> {
        let l = lanes.len();
        let n = lanes.first().map(|x| x.len()).ok_or(Error::EmptyDataset)?;
        let mut values = vec![0.0; n * l];
        let mut observed = vec![false; n * l];
        for (j, lane) in lanes.iter().enumerate() {
            if lane.len() != n {
                return Err(Error::Shape(format!("lane {j} has {} points, expected {n}", lane.len())));
            }
            for i in 0..n {
                values[i * l + j] = lane.xs[i];
                observed[i * l + j] = lane.valid[i];
            }
        }
        Self::new(n, l, values, observed)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.l)
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.l + j]
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.l + j]
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    fn scaled(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * s).collect(), ..self.clone() }
    }
}

/// `A ≈ Uᵀ V` with `U: R × N` and `V: R × L`, stored column-major so that
/// `u_i` and `v_j` are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Factorization {
    pub rank: usize,
    pub lambda: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Factorization {
    pub fn zeros(rank: usize, n: usize, l: usize, lambda: f64) -> Self {
        Self { rank, lambda, u: vec![0.0; rank * n], v: vec![0.0; rank * l] }
    }

    pub fn u_col(&self, i: usize) -> &[f64] {
        &self.u[i * self.rank..(i + 1) * self.rank]
    }

    pub fn v_col(&self, j: usize) -> &[f64] {
        &self.v[j * self.rank..(j + 1) * self.rank]
    }

    pub fn predict(&self, i: usize, j: usize) -> f64 {
        dot(self.u_col(i), self.v_col(j))
    }

    fn check(&self, m: &IncompleteLaneMatrix) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidDimension("rank must be >= 1".into()));
        }
        if self.u.len() != self.rank * m.n || self.v.len() != self.rank * m.l {
            return Err(Error::Shape(format!("factors of rank {} do not match a {}x{} matrix", self.rank, m.n, m.l)));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn objective(m: &IncompleteLaneMatrix, f: &Factorization) -> Result<f64> {
    f.check(m)?;
    let mut total = 0.0;
    for i in 0..m.n {
        for j in 0..m.l {
            if m.is_observed(i, j) {
                let r = m.value(i, j) - f.predict(i, j);
                total += r * r;
            }
        }
    }
    let reg = f.u.iter().chain(&f.v).map(|x| x * x).sum::<f64>();
    Ok(total + f.lambda * reg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Re-solve `U` with `V` fixed.
    Rows,
    /// Re-solve `V` with `U` fixed.
    Cols,
}

/// One exact half-step of ALS.
pub fn als_step(m: &IncompleteLaneMatrix, f: &Factorization, side: Side) -> Result<Factorization> {
    f.check(m)?;
    let r = f.rank;
    let mut out = f.clone();
    let (count, other_count) = match side {
        Side::Rows => (m.n, m.l),
        Side::Cols => (m.l, m.n),
    };
    for a in 0..count {
        let mut gram = DMatrix::<f64>::identity(r, r) * f.lambda;
        let mut rhs = DVector::<f64>::zeros(r);
        for b in 0..other_count {
            let (i, j) = match side {
                Side::Rows => (a, b),
                Side::Cols => (b, a),
            };
            if !m.is_observed(i, j) {
                continue;
            }
            let fixed = match side {
                Side::Rows => f.v_col(j),
                Side::Cols => f.u_col(i),
            };
            let y = m.value(i, j);
            for p in 0..r {
                rhs[p] += y * fixed[p];
                for q in 0..r {
                    gram[(p, q)] += fixed[p] * fixed[q];
                }
            }
        }
        let chol = gram.cholesky().ok_or_else(|| {
            let what = if side == Side::Rows { "row" } else { "column" };
            Error::SingularSystem(format!("normal equations for {what} {a} are not positive definite"))
        })?;
        let sol = chol.solve(&rhs);
        let dst = match side {
            Side::Rows => &mut out.u[a * r..(a + 1) * r],
            Side::Cols => &mut out.v[a * r..(a + 1) * r],
        };
        dst.copy_from_slice(sol.as_slice());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionConfig {
    pub rank: usize,
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Copy measured entries into the output verbatim.
    pub preserve_observed: bool,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self { rank: 3, lambda: 1e-3, max_iters: 5000, tol: 1e-6, seed: 0, preserve_observed: true }
    }
}

#[derive(Clone, Debug)]
pub struct Completion {
    /// Row-major `N × L`.
    pub values: Vec<f64>,
    pub factors: Factorization,
    /// Objective after initialization and after every half-step.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

impl Completion {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let l = self.factors.v.len() / self.factors.rank;
        self.values[i * l + j]
    }
}

/// Alternate exact solves of `V` then `U` until the relative objective
/// decrease over a full iteration drops below `tol`.
pub fn als_complete(m: &IncompleteLaneMatrix, cfg: &CompletionConfig) -> Result<Completion> {
    if cfg.rank == 0 {
        return Err(Error::InvalidDimension("rank must be >= 1".into()));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut f = Factorization::zeros(cfg.rank, m.n, m.l, cfg.lambda);
    // V is solved first, so only U needs an initial draw; each v_j then
    // depends on column j alone.
    for x in f.u.iter_mut() {
        *x = rng.gen_range(-0.1..0.1);
    }
    let mut trace = vec![objective(m, &f)?];
    let mut iterations = 0;
    let mut prev = trace[0];
    while iterations < cfg.max_iters {
        f = als_step(m, &f, Side::Cols)?;
        trace.push(objective(m, &f)?);
        f = als_step(m, &f, Side::Rows)?;
        let cur = objective(m, &f)?;
        trace.push(cur);
        iterations += 1;
        if cur == 0.0 || (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < cfg.tol {
            break;
        }
        prev = cur;
    }
    let mut values = vec![0.0; m.n * m.l];
    for i in 0..m.n {
        for j in 0..m.l {
            values[i * m.l + j] =
                if cfg.preserve_observed && m.is_observed(i, j) { m.value(i, j) } else { f.predict(i, j) };
        }
    }
    Ok(Completion { values, factors: f, trace, iterations })
}

/// Repair lanes with missing points. Coordinates are divided by `frame_width`
/// before the factorization and scaled back afterwards.
pub fn complete_lanes(
    lanes: &[LanePolyline],
    frame_width: f64,
    cfg: &CompletionConfig,
) -> Result<(Vec<LanePolyline>, Completion)> {
    if !(frame_width > 0.0) {
        return Err(Error::Config("frame width must be positive".into()));
    }
    let m = IncompleteLaneMatrix::from_lanes(lanes)?.scaled(1.0 / frame_width);
    let done = als_complete(&m, cfg)?;
    let (n, l) = m.shape();
    let out = (0..l)
        .map(|j| {
            let xs = (0..n)
                .map(|i| {
                    if cfg.preserve_observed && lanes[j].valid[i] {
                        lanes[j].xs[i]
                    } else {
                        done.values[i * l + j] * frame_width
                    }
                })
                .collect();
            LanePolyline::complete(xs)
        })
        .collect();
    Ok((out, done))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(n: usize, l: usize, values: Vec<f64>) -> IncompleteLaneMatrix {
        IncompleteLaneMatrix::new(n, l, values, vec![true; n * l]).unwrap()
    }

    #[test]
    fn objective_examples() {
        let m = full(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        let zero = Factorization::zeros(1, 2, 2, 0.7);
        assert_eq!(objective(&m, &zero).unwrap(), 1.0 + 4.0 + 4.0 + 16.0);
        let exact = Factorization { rank: 1, lambda: 0.0, u: vec![1.0, 2.0], v: vec![1.0, 2.0] };
        assert_eq!(objective(&m, &exact).unwrap(), 0.0);
        let bad = Factorization { rank: 1, lambda: 0.0, u: vec![1.0], v: vec![1.0, 2.0] };
        assert!(matches!(objective(&m, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn single_entry_least_squares() {
        let mut obs = vec![false; 4];
        obs[0] = true;
        obs[3] = true;
        let m = IncompleteLaneMatrix::new(2, 2, vec![6.0, 0.0, 0.0, 1.0], obs).unwrap();
        let f = Factorization { rank: 1, lambda: 0.0, u: vec![2.0, 1.0], v: vec![0.0, 0.0] };
        let g = als_step(&m, &f, Side::Cols).unwrap();
        assert!((g.v[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn optimal_factor_is_a_fixed_point() {
        let m = full(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        let exact = Factorization { rank: 1, lambda: 0.0, u: vec![1.0, 2.0], v: vec![1.0, 2.0] };
        for side in [Side::Rows, Side::Cols] {
            let g = als_step(&m, &exact, side).unwrap();
            for (a, b) in g.u.iter().chain(&g.v).zip(exact.u.iter().chain(&exact.v)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unregularized_empty_row_is_singular() {
        let obs = vec![true, true, false, false];
        let m = IncompleteLaneMatrix::new(2, 2, vec![1.0, 2.0, 0.0, 0.0], obs).unwrap();
        let f = Factorization { rank: 1, lambda: 0.0, u: vec![1.0, 1.0], v: vec![1.0, 1.0] };
        assert!(matches!(als_step(&m, &f, Side::Rows), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn rejects_unobserved_column() {
        let err = IncompleteLaneMatrix::new(2, 2, vec![0.0; 4], vec![true, false, true, false]);
        assert!(matches!(err, Err(Error::IncompleteMatrix(_))));
    }

    #[test]
    fn fully_observed_full_rank_is_exact() {
        let vals = vec![3.0, -1.0, 2.0, 0.5, 4.0, 1.0, -2.0, 0.0, 1.5];
        let m = full(3, 3, vals.clone());
        let cfg = CompletionConfig { rank: 3, lambda: 1e-9, preserve_observed: false, ..Default::default() };
        let done = als_complete(&m, &cfg).unwrap();
        for (a, b) in done.values.iter().zip(&vals) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn lane_completion_keeps_observed_points() {
        let lanes: Vec<LanePolyline> = (0..6)
            .map(|j| {
                let xs: Vec<f64> = (0..8).map(|i| 40.0 + j as f64 * 10.0 + i as f64 * (1.0 + 0.2 * j as f64)).collect();
                let valid = (0..8).map(|i| (i + j) % 3 != 0).collect();
                LanePolyline::new(xs, valid).unwrap()
            })
            .collect();
        let (out, _) = complete_lanes(&lanes, 160.0, &CompletionConfig::default()).unwrap();
        for (a, b) in lanes.iter().zip(&out) {
            assert!(b.is_complete());
            for i in 0..8 {
                if a.valid[i] {
                    assert_eq!(a.xs[i], b.xs[i]);
                }
            }
        }
    }
}
