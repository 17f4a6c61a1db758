//! Block-tridiagonal solve of one anchor chain.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::blocks::{BlockKind, NormalBlock};
use crate::geom::{Mat6, TrajectoryId, Vec6};

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("blocks from trajectory {found} in the system of {expected}")]
    MixedTrajectories { expected: TrajectoryId, found: TrajectoryId },
    #[error("singular chain {trajectory_id}: pivot at anchor {anchor} is not positive definite")]
    Singular { trajectory_id: TrajectoryId, anchor: u32 },
    #[error("empty chain system")]
    Empty,
}

/// Normal equations `A x = b` of one chain, `A` block-tridiagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSystem {
    pub trajectory_id: TrajectoryId,
    /// Anchor index of the first block row.
    pub first: u32,
    pub d: Vec<Mat6>,
    /// `u[i]` is block `(i, i + 1)`.
    pub u: Vec<Mat6>,
    pub b: Vec<Vec6>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSolution {
    pub first: u32,
    pub x: Vec<Vec6>,
    /// Diagonal blocks of `A^-1`.
    pub cov: Vec<Mat6>,
}

impl ChainSystem {
    pub fn zeros(trajectory_id: TrajectoryId, first: u32, n: usize) -> Self {
        Self {
            trajectory_id,
            first,
            d: vec![Mat6::zeros(); n],
            u: vec![Mat6::zeros(); n.saturating_sub(1)],
            b: vec![Vec6::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    /// Sums blocks over the anchor range they touch. Anchors inside the range
    /// without blocks get zero rows, to be filled by priors.
    pub fn assemble<'a>(
        trajectory_id: TrajectoryId,
        blocks: impl IntoIterator<Item = &'a NormalBlock> + Clone,
    ) -> Result<Self, SolveError> {
        let mut lo = u32::MAX;
        let mut hi = 0u32;
        for b in blocks.clone() {
            if b.trajectory_id != trajectory_id {
                return Err(SolveError::MixedTrajectories {
                    expected: trajectory_id,
                    found: b.trajectory_id,
                });
            }
            let top = if b.kind == BlockKind::OffDiag { b.i + 1 } else { b.i };
            lo = lo.min(b.i);
            hi = hi.max(top);
        }
        if lo == u32::MAX {
            return Err(SolveError::Empty);
        }
        let mut sys = Self::zeros(trajectory_id, lo, (hi - lo + 1) as usize);
        for b in blocks {
            sys.add(b);
        }
        Ok(sys)
    }

    /// Adds a block whose anchors lie inside the system's range.
    pub fn add(&mut self, b: &NormalBlock) {
        let k = (b.i - self.first) as usize;
        match b.kind {
            BlockKind::Diag => {
                self.d[k] += b.m;
                self.b[k] += b.rhs;
            }
            BlockKind::OffDiag => self.u[k] += b.m,
        }
    }

    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.len();
        let mut a = DMatrix::zeros(6 * n, 6 * n);
        let mut rhs = DVector::zeros(6 * n);
        for i in 0..n {
            a.view_mut((6 * i, 6 * i), (6, 6)).copy_from(&self.d[i]);
            rhs.rows_mut(6 * i, 6).copy_from(&self.b[i]);
            if i + 1 < n {
                a.view_mut((6 * i, 6 * i + 6), (6, 6)).copy_from(&self.u[i]);
                a.view_mut((6 * i + 6, 6 * i), (6, 6)).copy_from(&self.u[i].transpose());
            }
        }
        (a, rhs)
    }

    fn singular(&self, k: usize) -> SolveError {
        SolveError::Singular {
            trajectory_id: self.trajectory_id,
            anchor: self.first + k as u32,
        }
    }
}

const PIVOT_RATIO: f64 = 1e-12;

fn pivot_inverse(s: &Mat6) -> Option<Mat6> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || !(min >= PIVOT_RATIO * max) {
        return None;
    }
    let inv = sym.cholesky()?.inverse();
    Some((inv + inv.transpose()) * 0.5)
}

/// Forward elimination and back substitution over block rows; returns the
/// solution and the diagonal covariance blocks.
pub fn solve(sys: &ChainSystem) -> Result<ChainSolution, SolveError> {
    let n = sys.len();
    if n == 0 {
        return Err(SolveError::Empty);
    }
    let mut s_inv: Vec<Mat6> = Vec::with_capacity(n);
    let mut y: Vec<Vec6> = Vec::with_capacity(n);
    for i in 0..n {
        let (s, yi) = if i == 0 {
            (sys.d[0], sys.b[0])
        } else {
            let l = sys.u[i - 1].transpose() * s_inv[i - 1];
            (sys.d[i] - l * sys.u[i - 1], sys.b[i] - l * y[i - 1])
        };
        s_inv.push(pivot_inverse(&s).ok_or_else(|| sys.singular(i))?);
        y.push(yi);
    }
    let mut x = vec![Vec6::zeros(); n];
    let mut cov = vec![Mat6::zeros(); n];
    x[n - 1] = s_inv[n - 1] * y[n - 1];
    cov[n - 1] = s_inv[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = s_inv[i] * (y[i] - sys.u[i] * x[i + 1]);
        let g = s_inv[i] * sys.u[i];
        cov[i] = s_inv[i] + g * cov[i + 1] * g.transpose();
    }
    Ok(ChainSolution {
        first: sys.first,
        x,
        cov,
    })
}

/// Same contract as [`solve`] through a dense Cholesky factorization.
pub fn solve_dense(sys: &ChainSystem) -> Result<ChainSolution, SolveError> {
    let n = sys.len();
    if n == 0 {
        return Err(SolveError::Empty);
    }
    let (a, b) = sys.to_dense();
    let first_bad = || {
        (0..n)
            .find(|&k| {
                let m = a.view((0, 0), (6 * k + 6, 6 * k + 6)).into_owned();
                let eig = m.symmetric_eigen();
                let max = eig.eigenvalues.max();
                !(max > 0.0) || !(eig.eigenvalues.min() >= PIVOT_RATIO * max)
            })
            .unwrap_or(n - 1)
    };
    let chol = a.clone().cholesky().ok_or_else(|| sys.singular(first_bad()))?;
    let l = chol.l();
    let dmax = (0..6 * n).map(|k| l[(k, k)].powi(2)).fold(0.0, f64::max);
    if (0..6 * n).any(|k| !(l[(k, k)].powi(2) >= PIVOT_RATIO * dmax)) {
        return Err(sys.singular(first_bad()));
    }
    let xs = chol.solve(&b);
    let inv = chol.inverse();
    Ok(ChainSolution {
        first: sys.first,
        x: (0..n).map(|i| xs.fixed_rows::<6>(6 * i).into_owned()).collect(),
        cov: (0..n)
            .map(|i| inv.fixed_view::<6, 6>(6 * i, 6 * i).into_owned())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{prior_blocks, smooth_blocks, NoiseConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd_chain(rng: &mut ChaCha8Rng, n: usize) -> ChainSystem {
        let mut sys = ChainSystem::zeros(TrajectoryId(1), 3, n);
        // sum of rank-one terms spanning consecutive pairs, plus a ridge
        for i in 0..n {
            for _ in 0..8 {
                let v = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
                sys.d[i] += v * v.transpose();
            }
            sys.d[i] += Mat6::identity() * rng.random_range(0.01..1.0);
            sys.b[i] = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        }
        for i in 0..n.saturating_sub(1) {
            for _ in 0..3 {
                let a = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
                let c = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
                sys.d[i] += a * a.transpose();
                sys.d[i + 1] += c * c.transpose();
                sys.u[i] += a * c.transpose();
            }
        }
        sys
    }

    fn rel_err(a: &[Vec6], b: &[Vec6]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
        let den: f64 = b.iter().map(|y| y.norm_squared()).sum();
        (num / den.max(1e-300)).sqrt()
    }

    #[test]
    fn matches_dense_on_random_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.random_range(1..=50);
            let sys = random_spd_chain(&mut rng, n);
            let fast = solve(&sys).unwrap();
            let dense = solve_dense(&sys).unwrap();
            assert!(rel_err(&fast.x, &dense.x) <= 1e-8);
            for (a, b) in fast.cov.iter().zip(&dense.cov) {
                assert!((a - b).norm() <= 1e-8 * b.norm());
            }
        }
    }

    #[test]
    fn residual_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..50 {
            let sys = random_spd_chain(&mut rng, 30);
            let sol = solve(&sys).unwrap();
            let (a, b) = sys.to_dense();
            let x = DVector::from_iterator(180, sol.x.iter().flat_map(|v| v.iter().copied()));
            assert!((a * x - &b).norm() <= 1e-9 * b.norm());
        }
    }

    fn prior_only(n: u32) -> ChainSystem {
        let noise = NoiseConfig::default();
        let mut blocks = prior_blocks(TrajectoryId(2), 0, n, &noise);
        blocks.extend(smooth_blocks(TrajectoryId(2), 0, n, &noise));
        ChainSystem::assemble(TrajectoryId(2), &blocks).unwrap()
    }

    #[test]
    fn prior_only_gives_zero() {
        let sys = prior_only(10);
        assert!(solve(&sys).unwrap().x.iter().all(|v| *v == Vec6::zeros()));
        assert!(solve_dense(&sys).unwrap().x.iter().all(|v| *v == Vec6::zeros()));
    }

    #[test]
    fn single_anchor_closed_form() {
        let p0 = 1.0 / 0.05f64.powi(2);
        let p = 1.0 / 0.005f64.powi(2);
        let l = 0.02;
        let mut sys = ChainSystem::zeros(TrajectoryId(0), 0, 1);
        sys.d[0] = Mat6::identity() * p0;
        sys.d[0][(2, 2)] += p;
        sys.b[0][2] = p * l;
        let x = solve(&sys).unwrap().x[0];
        let expect = p * l / (p0 + p);
        assert!((x[2] - expect).abs() < 1e-15);
        assert!(x.iter().enumerate().all(|(k, v)| k == 2 || *v == 0.0));
    }

    #[test]
    fn smoothness_only_is_singular() {
        let blocks = smooth_blocks(TrajectoryId(4), 5, 6, &NoiseConfig::default());
        let sys = ChainSystem::assemble(TrajectoryId(4), &blocks).unwrap();
        assert!(matches!(solve(&sys), Err(SolveError::Singular { trajectory_id: TrajectoryId(4), .. })));
        assert!(matches!(solve_dense(&sys), Err(SolveError::Singular { .. })));
    }

    #[test]
    fn singular_pivot_names_anchor() {
        let mut sys = prior_only(6);
        sys.d[3] = Mat6::zeros();
        sys.u[2] = Mat6::zeros();
        sys.u[3] = Mat6::zeros();
        assert_eq!(solve(&sys), Err(SolveError::Singular { trajectory_id: TrajectoryId(2), anchor: 3 }));
        assert_eq!(solve_dense(&sys), Err(SolveError::Singular { trajectory_id: TrajectoryId(2), anchor: 3 }));
    }

    #[test]
    fn assemble_rejects_mixed_and_sums() {
        let noise = NoiseConfig::default();
        let mut blocks = prior_blocks(TrajectoryId(1), 0, 3, &noise);
        blocks.extend(prior_blocks(TrajectoryId(1), 1, 1, &noise));
        let sys = ChainSystem::assemble(TrajectoryId(1), &blocks).unwrap();
        assert_eq!(sys.d[1], noise.prior_information() * 2.0);
        let mut reversed = blocks.clone();
        reversed.reverse();
        assert_eq!(ChainSystem::assemble(TrajectoryId(1), &reversed).unwrap(), sys);
        blocks.extend(prior_blocks(TrajectoryId(2), 0, 1, &noise));
        assert!(matches!(
            ChainSystem::assemble(TrajectoryId(1), &blocks),
            Err(SolveError::MixedTrajectories { .. })
        ));
        // interior gap filled with zero rows
        let sparse = [prior_blocks(TrajectoryId(1), 2, 1, &noise), prior_blocks(TrajectoryId(1), 6, 1, &noise)].concat();
        let sys = ChainSystem::assemble(TrajectoryId(1), &sparse).unwrap();
        assert_eq!((sys.first, sys.len()), (2, 5));
        assert_eq!(sys.d[2], Mat6::zeros());
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let sys = random_spd_chain(&mut rng, 20);
        let mut scaled = sys.clone();
        for m in scaled.d.iter_mut().chain(scaled.u.iter_mut()) {
            *m *= 7.5;
        }
        for v in scaled.b.iter_mut() {
            *v *= 7.5;
        }
        let a = solve(&sys).unwrap();
        let b = solve(&scaled).unwrap();
        assert!(rel_err(&b.x, &a.x) < 1e-10);
        for (ca, cb) in a.cov.iter().zip(&b.cov) {
            assert!((cb * 7.5 - ca).norm() < 1e-10 * ca.norm());
        }
    }

    #[test]
    fn extra_prior_shrinks_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let sys = random_spd_chain(&mut rng, 15);
            let mut more = sys.clone();
            let k = rng.random_range(0..15);
            more.d[k] += Mat6::identity() * 0.5;
            let (a, b) = (solve(&sys).unwrap(), solve(&more).unwrap());
            for (ca, cb) in a.cov.iter().zip(&b.cov) {
                for j in 0..6 {
                    assert!(cb[(j, j)] <= ca[(j, j)] * (1.0 + 1e-12));
                }
            }
        }
    }
}
