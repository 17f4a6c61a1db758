//! Pose-correction algebra.
//!
//! A correction is a 6-vector `(t, theta)`: a translation in meters and three
//! small rotation angles (omega, phi, kappa) in radians. Corrections live on
//! anchors spaced along a trajectory's arc length and are interpolated
//! linearly in between. A corrected LiDAR point is
//! `(I + [theta]x) r + t + t0`, the small-angle form of `R(theta) r + t + t0`.

use std::ops::{Add, AddAssign, Neg, Sub};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

/// Largest translation magnitude accepted in a solution (meters).
pub const MAX_TRANSLATION: f64 = 1.0;
/// Largest rotation magnitude accepted in a solution (radians).
pub const MAX_ROTATION: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("arc length {arc} outside anchor chain range [{lo}, {hi}]")]
    OutOfRange { arc: f64, lo: f64, hi: f64 },
    #[error("invalid anchor chain: {0}")]
    InvalidChain(&'static str),
    #[error("plane normal is not unit length (norm {0})")]
    NonUnitNormal(f64),
}

/// Identifier of one vehicle trajectory (a drive).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct TrajectoryId(pub u32);

impl std::fmt::Display for TrajectoryId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "traj{}", self.0)
    }
}

/// A 6-DoF pose correction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseCorrection {
    pub t: Vec3,
    pub theta: Vec3,
}

impl PoseCorrection {
    pub const ZERO: PoseCorrection = PoseCorrection {
        t: Vector3::new(0.0, 0.0, 0.0),
        theta: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(t: Vec3, theta: Vec3) -> Self {
        Self { t, theta }
    }

    /// Packs as `(tx, ty, tz, omega, phi, kappa)`.
    pub fn to_vec6(&self) -> Vec6 {
        Vec6::new(
            self.t.x,
            self.t.y,
            self.t.z,
            self.theta.x,
            self.theta.y,
            self.theta.z,
        )
    }

    pub fn from_vec6(v: &Vec6) -> Self {
        Self {
            t: Vec3::new(v[0], v[1], v[2]),
            theta: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().chain(self.theta.iter()).all(|x| x.is_finite())
    }

    /// Sanity bound for accepted solutions.
    pub fn within_bounds(&self) -> bool {
        self.is_finite() && self.t.norm() <= MAX_TRANSLATION && self.theta.norm() <= MAX_ROTATION
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            t: self.t * s,
            theta: self.theta * s,
        }
    }

    /// `(1 - alpha) * self + alpha * other`, componentwise.
    pub fn lerp(&self, other: &PoseCorrection, alpha: f64) -> Self {
        let beta = 1.0 - alpha;
        Self {
            t: self.t * beta + other.t * alpha,
            theta: self.theta * beta + other.theta * alpha,
        }
    }
}

impl Add for PoseCorrection {
    type Output = PoseCorrection;
    fn add(self, rhs: Self) -> Self {
        Self {
            t: self.t + rhs.t,
            theta: self.theta + rhs.theta,
        }
    }
}

impl AddAssign for PoseCorrection {
    fn add_assign(&mut self, rhs: Self) {
        self.t += rhs.t;
        self.theta += rhs.theta;
    }
}

impl Sub for PoseCorrection {
    type Output = PoseCorrection;
    fn sub(self, rhs: Self) -> Self {
        Self {
            t: self.t - rhs.t,
            theta: self.theta - rhs.theta,
        }
    }
}

impl Neg for PoseCorrection {
    type Output = PoseCorrection;
    fn neg(self) -> Self {
        Self {
            t: -self.t,
            theta: -self.theta,
        }
    }
}

/// Corrections at anchors spaced evenly in arc length along one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorChain {
    pub trajectory_id: TrajectoryId,
    pub spacing: f64,
    pub arc_origin: f64,
    pub anchors: Vec<PoseCorrection>,
}

/// Result of locating an arc length on a chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interpolated {
    /// Index of the anchor at or before the arc.
    pub index: usize,
    /// Weight of anchor `index + 1`.
    pub alpha: f64,
    pub corr: PoseCorrection,
}

impl AnchorChain {
    pub fn new(
        trajectory_id: TrajectoryId,
        spacing: f64,
        arc_origin: f64,
        anchors: Vec<PoseCorrection>,
    ) -> Result<Self, GeomError> {
        if anchors.is_empty() {
            return Err(GeomError::InvalidChain("no anchors"));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(GeomError::InvalidChain("spacing must be positive"));
        }
        if !arc_origin.is_finite() {
            return Err(GeomError::InvalidChain("arc origin must be finite"));
        }
        Ok(Self {
            trajectory_id,
            spacing,
            arc_origin,
            anchors,
        })
    }

    /// A chain of zero corrections covering `[arc_min, arc_max]`, with anchors
    /// on the global grid `k * spacing`.
    pub fn zeros_covering(
        trajectory_id: TrajectoryId,
        spacing: f64,
        arc_min: f64,
        arc_max: f64,
    ) -> Result<Self, GeomError> {
        if !(arc_max >= arc_min) {
            return Err(GeomError::InvalidChain("empty arc range"));
        }
        let first = (arc_min / spacing).floor();
        let last = (arc_max / spacing).ceil();
        let n = ((last - first) as usize + 1).max(2);
        Self::new(
            trajectory_id,
            spacing,
            first * spacing,
            vec![PoseCorrection::ZERO; n],
        )
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn arc_of(&self, k: usize) -> f64 {
        self.arc_origin + k as f64 * self.spacing
    }

    pub fn arc_end(&self) -> f64 {
        self.arc_of(self.anchors.len() - 1)
    }

    pub fn contains(&self, arc: f64) -> bool {
        arc >= self.arc_origin && arc <= self.arc_end()
    }
}

/// Locates `arc` between two anchors and interpolates their corrections.
pub fn interpolate_correction(chain: &AnchorChain, arc: f64) -> Result<Interpolated, GeomError> {
    let n = chain.anchors.len();
    let (lo, hi) = (chain.arc_origin, chain.arc_end());
    if !(arc >= lo && arc <= hi) {
        return Err(GeomError::OutOfRange { arc, lo, hi });
    }
    if n == 1 {
        return Ok(Interpolated {
            index: 0,
            alpha: 0.0,
            corr: chain.anchors[0],
        });
    }
    let u = (arc - lo) / chain.spacing;
    let index = (u.floor() as usize).min(n - 2);
    let alpha = (u - index as f64).clamp(0.0, 1.0);
    let corr = if alpha == 0.0 {
        chain.anchors[index]
    } else if alpha == 1.0 {
        chain.anchors[index + 1]
    } else {
        chain.anchors[index].lerp(&chain.anchors[index + 1], alpha)
    };
    Ok(Interpolated { index, alpha, corr })
}

/// Surface target of a point-to-plane observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneTarget {
    pub w: Vec3,
    pub s: Vec3,
}

impl PlaneTarget {
    pub fn new(w: Vec3, s: Vec3) -> Result<Self, GeomError> {
        let norm = w.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(GeomError::NonUnitNormal(norm));
        }
        Ok(Self { w, s })
    }
}

/// One LiDAR return expressed as scan-head origin plus ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayMeasurement {
    pub t0: Vec3,
    pub r: Vec3,
    pub arc: f64,
    pub trajectory_id: TrajectoryId,
}

/// Skew matrix `[v]x` with `[v]x a = v x a`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Full rotation `Rz(kappa) * Ry(phi) * Rx(omega)`.
pub fn rotation_matrix(theta: &Vec3) -> Mat3 {
    let (so, co) = theta.x.sin_cos();
    let (sp, cp) = theta.y.sin_cos();
    let (sk, ck) = theta.z.sin_cos();
    let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, co, -so, 0.0, so, co);
    let ry = Mat3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rz = Mat3::new(ck, -sk, 0.0, sk, ck, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Corrected point `(I + [theta]x) r + t + t0`.
///
/// Linear in the correction, so per-iteration increments compose additively.
/// Agrees with the full rotation to `O(|theta|^2 |r|)`.
pub fn apply_correction(corr: &PoseCorrection, m: &RayMeasurement) -> Vec3 {
    if corr.theta == Vec3::zeros() && corr.t == Vec3::zeros() {
        return m.r + m.t0;
    }
    m.r + corr.theta.cross(&m.r) + corr.t + m.t0
}

/// Rotates a direction by the small-angle part of a correction and renormalizes.
pub fn rotate_direction(corr: &PoseCorrection, n: &Vec3) -> Vec3 {
    (n + corr.theta.cross(n)).normalize()
}

/// Signed distance `<w, s - p>`.
pub fn point_to_plane_residual(target: &PlaneTarget, p: &Vec3) -> f64 {
    target.w.dot(&(target.s - p))
}

/// Sensitivity of `<w, R(theta) r + t>` to the two bracketing anchors at zero
/// increment: `(1 - alpha) * (w, r x w)` and `alpha * (w, r x w)`.
pub fn residual_jacobian(target: &PlaneTarget, m: &RayMeasurement, alpha: f64) -> (Vec6, Vec6) {
    let rot = m.r.cross(&target.w);
    let full = Vec6::new(target.w.x, target.w.y, target.w.z, rot.x, rot.y, rot.z);
    (full * (1.0 - alpha), full * alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain2(a1: PoseCorrection) -> AnchorChain {
        AnchorChain::new(TrajectoryId(0), 0.5, 10.0, vec![PoseCorrection::ZERO, a1]).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let c = chain2(PoseCorrection::new(Vec3::new(0.0, 0.0, 0.02), Vec3::zeros()));
        let at0 = interpolate_correction(&c, 10.0).unwrap();
        assert_eq!(at0.index, 0);
        assert_eq!(at0.alpha, 0.0);
        assert_eq!(at0.corr.t, Vec3::zeros());
        let mid = interpolate_correction(&c, 10.25).unwrap();
        assert!((mid.corr.t - Vec3::new(0.0, 0.0, 0.01)).norm() < 1e-15);
        let end = interpolate_correction(&c, 10.5).unwrap();
        assert_eq!(end.alpha, 1.0);
        assert_eq!(end.corr.t.z, 0.02);
    }

    #[test]
    fn zero_chain_gives_zero() {
        let c = AnchorChain::zeros_covering(TrajectoryId(3), 0.5, 0.3, 7.9).unwrap();
        for k in 0..100 {
            let arc = c.arc_origin + (c.arc_end() - c.arc_origin) * k as f64 / 99.0;
            assert_eq!(
                interpolate_correction(&c, arc).unwrap().corr,
                PoseCorrection::ZERO
            );
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let c = chain2(PoseCorrection::ZERO);
        assert!(matches!(
            interpolate_correction(&c, 9.99),
            Err(GeomError::OutOfRange { .. })
        ));
        assert!(interpolate_correction(&c, 10.51).is_err());
        assert!(interpolate_correction(&c, f64::NAN).is_err());
    }

    #[test]
    fn chain_validation() {
        assert!(AnchorChain::new(TrajectoryId(0), 0.5, 0.0, vec![]).is_err());
        assert!(
            AnchorChain::new(TrajectoryId(0), 0.0, 0.0, vec![PoseCorrection::ZERO]).is_err()
        );
    }

    #[test]
    fn mirrored_chain_swaps_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let anchors: Vec<_> = (0..6)
            .map(|_| PoseCorrection::new(rand_vec(&mut rng, 0.1), rand_vec(&mut rng, 0.01)))
            .collect();
        let mut rev = anchors.clone();
        rev.reverse();
        let c = AnchorChain::new(TrajectoryId(0), 0.5, 0.0, anchors).unwrap();
        let m = AnchorChain::new(TrajectoryId(0), 0.5, 0.0, rev).unwrap();
        for _ in 0..200 {
            let arc = rng.random_range(0.0..c.arc_end());
            let a = interpolate_correction(&c, arc).unwrap();
            let b = interpolate_correction(&m, c.arc_end() - arc).unwrap();
            assert!((a.corr.t - b.corr.t).norm() < 1e-12);
            assert!((a.corr.theta - b.corr.theta).norm() < 1e-12);
        }
    }

    fn ray(t0: Vec3, r: Vec3) -> RayMeasurement {
        RayMeasurement {
            t0,
            r,
            arc: 0.0,
            trajectory_id: TrajectoryId(0),
        }
    }

    #[test]
    fn apply_identity_and_translation() {
        let m = ray(Vec3::new(1.0, 1.0, 1.0), Vec3::new(5.0, 0.0, 0.0));
        assert_eq!(apply_correction(&PoseCorrection::ZERO, &m), m.r + m.t0);
        let c = PoseCorrection::new(Vec3::new(0.0, 0.0, 0.01), Vec3::zeros());
        assert!((apply_correction(&c, &m) - Vec3::new(6.0, 1.0, 1.01)).norm() < 1e-15);
    }

    #[test]
    fn small_rotation_matches_full_rotation() {
        let m = ray(Vec3::zeros(), Vec3::new(10.0, 0.0, 0.0));
        let c = PoseCorrection::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 0.001));
        let full = rotation_matrix(&c.theta) * m.r;
        assert!((apply_correction(&c, &m) - full).norm() < 1e-5);
    }

    #[test]
    fn linearization_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let theta = rand_vec(&mut rng, 0.05 / 3f64.sqrt());
            let r = rand_vec(&mut rng, 30.0);
            let m = ray(rand_vec(&mut rng, 100.0), r);
            let c = PoseCorrection::new(rand_vec(&mut rng, 0.2), theta);
            let lin = apply_correction(&c, &m);
            let full = rotation_matrix(&theta) * r + c.t + m.t0;
            assert!((lin - full).norm() <= theta.norm_squared() * r.norm() + 1e-12);
        }
    }

    #[test]
    fn residual_cases() {
        let t = PlaneTarget::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(point_to_plane_residual(&t, &Vec3::new(3.0, 7.0, 0.0)), 1.0);
        assert_eq!(point_to_plane_residual(&t, &Vec3::new(-2.0, 4.0, 1.0)), 0.0);
        assert!(PlaneTarget::new(Vec3::new(0.0, 0.0, 1.1), Vec3::zeros()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = rand_vec(&mut rng, 1.0).normalize();
            let s = rand_vec(&mut rng, 50.0);
            let p = rand_vec(&mut rng, 50.0);
            let t = PlaneTarget::new(w, s).unwrap();
            let termwise = (w.x * s.x + w.y * s.y + w.z * s.z) - (w.x * p.x + w.y * p.y + w.z * p.z);
            assert!((point_to_plane_residual(&t, &p) - termwise).abs() < 1e-10);
        }
    }

    #[test]
    fn jacobian_simple_cases() {
        let t = PlaneTarget::new(Vec3::new(0.0, 0.0, 1.0), Vec3::zeros()).unwrap();
        let m = ray(Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0));
        let (ji, jn) = residual_jacobian(&t, &m, 0.0);
        assert_eq!(ji, Vec6::new(0.0, 0.0, 1.0, 0.0, -1.0, 0.0));
        assert_eq!(jn, Vec6::zeros());
    }
}
