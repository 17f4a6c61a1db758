//! Synthetic ground truth: planar scenes, vehicle paths, smooth pose errors and
//! raster scan simulation.
//!
//! Each trajectory carries a smooth error `e(arc)` (a uniform cubic B-spline
//! plus an optional constant). Strips are written as the sensor would record
//! them under the erroneous pose, so the correction the estimator should find
//! is `-e(arc)`; that is what the truth sidecar stores.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{skew, Mat3, PoseCorrection, TrajectoryId, Vec3};
use crate::strip::{ScanStrip, StripId, DEFAULT_ROWS};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid error spec: {0}")]
    InvalidErrorSpec(String),
    #[error("invalid scanner: {0}")]
    InvalidScanner(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed truth file: {0}")]
    MalformedTruth(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A planar rectangle `origin + a*u + b*v`, `a, b in [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub origin: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
    /// Unit normal, `normalize(u x v)`.
    pub normal: [f64; 3],
    #[serde(default)]
    pub label: String,
}

impl Rect {
    pub fn new(origin: Vec3, u: Vec3, v: Vec3, label: &str) -> Self {
        let n = u.cross(&v).normalize();
        Self {
            origin: origin.into(),
            u: u.into(),
            v: v.into(),
            normal: n.into(),
            label: label.to_string(),
        }
    }

    /// Same rectangle with the normal flipped (edge vectors swapped).
    pub fn flipped(&self) -> Self {
        Self::new(self.origin.into(), self.v.into(), self.u.into(), &self.label)
    }

    pub fn normal(&self) -> Vec3 {
        self.normal.into()
    }

    /// Signed distance of `p` from the rectangle's plane.
    pub fn plane_distance(&self, p: &Vec3) -> f64 {
        self.normal().dot(&(p - Vec3::from(self.origin)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Rect>,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (i, r) in self.primitives.iter().enumerate() {
            let vals = r.origin.iter().chain(&r.u).chain(&r.v).chain(&r.normal);
            if vals.clone().any(|x| !x.is_finite()) {
                return Err(SynthError::InvalidScene(format!("primitive {i} not finite")));
            }
            if (r.normal().norm() - 1.0).abs() > 1e-9 {
                return Err(SynthError::InvalidScene(format!("primitive {i} normal not unit")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, SynthError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, SynthError> {
        let scene: SceneSpec = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }
}

/// A polyline the vehicle drives, starting at arc length 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPath {
    pub trajectory_id: TrajectoryId,
    /// Horizontal vertices `(x, y)`.
    pub vertices: Vec<[f64; 2]>,
    /// Scan-head height (meters, world z).
    pub height: f64,
    /// Vehicle speed (m/s).
    pub speed: f64,
}

impl TrajectoryPath {
    pub fn length(&self) -> f64 {
        self.vertices
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum()
    }

    /// Position and unit heading at arc length `s` (clamped to the path).
    pub fn pose_at(&self, s: f64) -> (Vec3, Vec3) {
        let mut rest = s.max(0.0);
        let last = self.vertices.len() - 2;
        for (i, w) in self.vertices.windows(2).enumerate() {
            let d = Vec3::new(w[1][0] - w[0][0], w[1][1] - w[0][1], 0.0);
            let len = d.norm();
            if rest <= len || i == last {
                let dir = d / len;
                let p = Vec3::new(w[0][0], w[0][1], self.height) + dir * rest.min(len);
                return (p, dir);
            }
            rest -= len;
        }
        unreachable!("path has at least one segment")
    }
}

/// A rotating line scanner mounted on the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScannerSpec {
    /// Measurements per second.
    pub point_rate: u32,
    /// Revolutions (profiles) per second.
    pub profile_rate: u32,
    /// Yaw of each scan plane relative to the driving direction (degrees).
    pub plane_yaw_deg: [f64; 2],
    pub max_range: f64,
}

impl Default for ScannerSpec {
    fn default() -> Self {
        Self {
            point_rate: 300_000,
            profile_rate: 100,
            plane_yaw_deg: [45.0, -45.0],
            max_range: 100.0,
        }
    }
}

impl ScannerSpec {
    pub fn rows(&self) -> Result<usize, SynthError> {
        if self.profile_rate == 0 || self.point_rate % self.profile_rate != 0 {
            return Err(SynthError::InvalidScanner(format!(
                "point rate {} is not a multiple of profile rate {}",
                self.point_rate, self.profile_rate
            )));
        }
        Ok((self.point_rate / self.profile_rate) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorSpec {
    /// B-spline knot spacing along the arc (meters).
    pub knot_spacing: f64,
    /// Bound of the spline control values per translation axis (meters).
    pub translation_amplitude: [f64; 3],
    /// Bound of the spline control values per rotation axis (degrees).
    pub rotation_amplitude_deg: [f64; 3],
    /// Constant error added on top of the spline, `(t, theta)` in meters/radians.
    pub offset: [f64; 6],
    /// Range noise along the ray (meters, 1 sigma).
    pub noise_sigma: f64,
    pub seed: u64,
    /// Trajectories generated without pose error (noise still applies).
    pub error_free: Vec<u32>,
}

impl Default for ErrorSpec {
    fn default() -> Self {
        Self {
            knot_spacing: 10.0,
            translation_amplitude: [0.1; 3],
            rotation_amplitude_deg: [0.1; 3],
            offset: [0.0; 6],
            noise_sigma: 0.003,
            seed: 1,
            error_free: Vec::new(),
        }
    }
}

pub const MAX_ERROR_TRANSLATION: f64 = 0.2;
pub const MAX_ERROR_ROTATION_DEG: f64 = 0.2;

impl ErrorSpec {
    pub fn none() -> Self {
        Self {
            translation_amplitude: [0.0; 3],
            rotation_amplitude_deg: [0.0; 3],
            noise_sigma: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.knot_spacing > 0.0) {
            return Err(SynthError::InvalidErrorSpec("knot spacing must be positive".into()));
        }
        for k in 0..3 {
            let t = self.translation_amplitude[k].abs() + self.offset[k].abs();
            let r = self.rotation_amplitude_deg[k].abs() + self.offset[3 + k].abs().to_degrees();
            if t > MAX_ERROR_TRANSLATION + 1e-12 || r > MAX_ERROR_ROTATION_DEG + 1e-12 {
                return Err(SynthError::InvalidErrorSpec(format!(
                    "axis {k} exceeds bounds ({MAX_ERROR_TRANSLATION} m, {MAX_ERROR_ROTATION_DEG} deg)"
                )));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(SynthError::InvalidErrorSpec("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Smooth pose error along one trajectory.
#[derive(Debug, Clone)]
pub struct PoseErrorSpline {
    knot_spacing: f64,
    /// Control points for knots -1 ..= n+1.
    control: Vec<[f64; 6]>,
    offset: [f64; 6],
}

impl PoseErrorSpline {
    pub fn new(spec: &ErrorSpec, length: f64, trajectory_id: TrajectoryId) -> Self {
        let n = (length / spec.knot_spacing).ceil() as usize + 4;
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed ^ (0xE77 + trajectory_id.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let free = spec.error_free.contains(&trajectory_id.0);
        let amp: [f64; 6] = std::array::from_fn(|k| {
            if free {
                0.0
            } else if k < 3 {
                spec.translation_amplitude[k]
            } else {
                spec.rotation_amplitude_deg[k - 3].to_radians()
            }
        });
        let control = (0..n)
            .map(|_| {
                std::array::from_fn(|k| {
                    let u: f64 = rng.random_range(-1.0..=1.0);
                    u * amp[k]
                })
            })
            .collect();
        Self {
            knot_spacing: spec.knot_spacing,
            control,
            offset: if free { [0.0; 6] } else { spec.offset },
        }
    }

    /// Error at arc length `s`.
    pub fn error_at(&self, s: f64) -> PoseCorrection {
        let u = (s / self.knot_spacing).max(0.0);
        let i = (u.floor() as usize).min(self.control.len() - 4);
        let t = u - i as f64;
        let t2 = t * t;
        let t3 = t2 * t;
        let b = [
            (1.0 - t).powi(3) / 6.0,
            (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0,
        ];
        let v: [f64; 6] = std::array::from_fn(|k| {
            (0..4).map(|j| b[j] * self.control[i + j][k]).sum::<f64>() + self.offset[k]
        });
        PoseCorrection::from_vec6(&v.into())
    }

    /// The correction that undoes the error.
    pub fn correction_at(&self, s: f64) -> PoseCorrection {
        -self.error_at(s)
    }
}

/// True correction at one arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub arc: f64,
    pub corr: PoseCorrection,
}

#[derive(Debug, Clone)]
pub struct GeneratedTrajectory {
    pub trajectory_id: TrajectoryId,
    pub strips: Vec<ScanStrip>,
    pub truth: Vec<TruthSample>,
}

struct PreparedRect {
    origin: Vec3,
    u: Vec3,
    v: Vec3,
    n: Vec3,
    uu: f64,
    vv: f64,
}

fn prepare(scene: &SceneSpec) -> Vec<PreparedRect> {
    scene
        .primitives
        .iter()
        .map(|r| {
            let u = Vec3::from(r.u);
            let v = Vec3::from(r.v);
            PreparedRect {
                origin: r.origin.into(),
                u,
                v,
                n: r.normal(),
                uu: u.norm_squared(),
                vv: v.norm_squared(),
            }
        })
        .collect()
}

fn cast(prims: &[PreparedRect], o: &Vec3, d: &Vec3, max_range: f64) -> Option<f64> {
    let mut best = max_range;
    let mut hit = false;
    for p in prims {
        let denom = p.n.dot(d);
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = p.n.dot(&(p.origin - o)) / denom;
        if !(t > 1e-6 && t < best) {
            continue;
        }
        let q = o + d * t - p.origin;
        let a = q.dot(&p.u);
        let b = q.dot(&p.v);
        if a >= 0.0 && a <= p.uu && b >= 0.0 && b <= p.vv {
            best = t;
            hit = true;
        }
    }
    hit.then_some(best)
}

/// Simulates both scanners along one path.
///
/// Strip ids are `first_strip_id` and `first_strip_id + 1`. Truth samples
/// are taken every `truth_step` meters of arc.
pub fn generate(
    scene: &SceneSpec,
    path: &TrajectoryPath,
    scanner: &ScannerSpec,
    err: &ErrorSpec,
    first_strip_id: u32,
    truth_step: f64,
) -> Result<GeneratedTrajectory, SynthError> {
    scene.validate()?;
    err.validate()?;
    let rows = scanner.rows()?;
    if path.vertices.len() < 2 || !(path.speed > 0.0) {
        return Err(SynthError::InvalidScene("path needs two vertices and positive speed".into()));
    }
    let prims = prepare(scene);
    let length = path.length();
    let step = path.speed / scanner.profile_rate as f64;
    let cols = (length / step).floor() as usize + 1;
    let spline = PoseErrorSpline::new(err, length, path.trajectory_id);
    let noise = Normal::new(0.0, err.noise_sigma.max(0.0)).expect("sigma >= 0");
    let ez = Vec3::z();

    let mut strips = Vec::with_capacity(2);
    for (s_idx, yaw_deg) in scanner.plane_yaw_deg.iter().enumerate() {
        let strip_id = first_strip_id + s_idx as u32;
        let mut strip = ScanStrip::new(
            StripId(strip_id),
            s_idx as u32,
            path.trajectory_id,
            rows,
            cols,
        )
        .map_err(|e| SynthError::InvalidScanner(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(
            err.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (strip_id as u64 + 1),
        );
        let (sy, cy) = yaw_deg.to_radians().sin_cos();
        let angles: Vec<(f64, f64)> = (0..rows)
            .map(|k| (std::f64::consts::TAU * k as f64 / rows as f64).sin_cos())
            .collect();
        for col in 0..cols {
            let arc = col as f64 * step;
            let (t0, heading) = path.pose_at(arc);
            let axis = Vec3::new(heading.x * cy - heading.y * sy, heading.x * sy + heading.y * cy, 0.0);
            let corr = spline.correction_at(arc);
            let inv_rot: Mat3 = (Mat3::identity() + skew(&corr.theta))
                .try_inverse()
                .expect("small rotation is invertible");
            let t0_meas = t0 - corr.t;
            for (row, &(sin_a, cos_a)) in angles.iter().enumerate() {
                let d = axis * cos_a + ez * sin_a;
                let Some(range) = cast(&prims, &t0, &d, scanner.max_range) else {
                    continue;
                };
                let eps = if err.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let r_true = d * (range + eps);
                let r_meas = inv_rot * r_true;
                strip.set(row, col, t0_meas + r_meas, t0_meas, arc);
            }
        }
        strips.push(strip);
    }
    let n_truth = (length / truth_step).floor() as usize + 1;
    let truth = (0..n_truth)
        .map(|k| {
            let arc = k as f64 * truth_step;
            TruthSample {
                arc,
                corr: spline.correction_at(arc),
            }
        })
        .collect();
    Ok(GeneratedTrajectory {
        trajectory_id: path.trajectory_id,
        strips,
        truth,
    })
}

/// Street-block scene description plus vehicle setup.
#[derive(Debug, Clone)]
pub struct StandardScene {
    pub scene: SceneSpec,
    pub paths: Vec<TrajectoryPath>,
    pub scanner: ScannerSpec,
    pub errors: ErrorSpec,
}

pub const ROAD_Z: f64 = 0.35;
pub const CURB_HEIGHT: f64 = 0.15;
pub const ROAD_HALF_WIDTH: f64 = 5.5;
pub const FACADE_Y: f64 = 8.5;
pub const FACADE_RECESS: f64 = 0.35;
pub const FACADE_HEIGHT: f64 = 8.0;

/// A street with a road slab, two curbs, two sidewalks and two stepped
/// facades; four drives (two per direction) over `length` meters.
///
/// The facades alternate between two depths so that step faces, which face
/// along the street, constrain along-track errors.
pub fn street_scene(length: f64, seed: u64) -> StandardScene {
    let margin = 12.0;
    let (x0, x1) = (-margin, length + margin);
    let dx = x1 - x0;
    let mut prims = Vec::new();
    let zs = ROAD_Z + CURB_HEIGHT;
    prims.push(Rect::new(
        Vec3::new(x0, -ROAD_HALF_WIDTH, ROAD_Z),
        Vec3::new(dx, 0.0, 0.0),
        Vec3::new(0.0, 2.0 * ROAD_HALF_WIDTH, 0.0),
        "road",
    ));
    for side in [-1.0f64, 1.0] {
        let y_curb = side * ROAD_HALF_WIDTH;
        // curb face, normal toward the road centerline
        let curb = Rect::new(
            Vec3::new(x0, y_curb, ROAD_Z),
            Vec3::new(dx, 0.0, 0.0),
            Vec3::new(0.0, 0.0, CURB_HEIGHT),
            "curb",
        );
        prims.push(if curb.normal()[1] * side > 0.0 { curb.flipped() } else { curb });
        let y_far = side * (FACADE_Y + FACADE_RECESS);
        let walk = Rect::new(
            Vec3::new(x0, y_curb.min(y_far), zs),
            Vec3::new(dx, 0.0, 0.0),
            Vec3::new(0.0, (y_far - y_curb).abs(), 0.0),
            "sidewalk",
        );
        prims.push(if walk.normal()[2] < 0.0 { walk.flipped() } else { walk });

        // stepped facade panels
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ if side > 0.0 { 0xFACA } else { 0xDE });
        let mut x = x0;
        let mut recessed = false;
        while x < x1 {
            let w = rng.random_range(1.2..2.4f64).min(x1 - x);
            let y = side * if recessed { FACADE_Y + FACADE_RECESS } else { FACADE_Y };
            let panel = Rect::new(
                Vec3::new(x, y, zs),
                Vec3::new(w, 0.0, 0.0),
                Vec3::new(0.0, 0.0, FACADE_HEIGHT),
                "facade",
            );
            // facade faces the street
            prims.push(if panel.normal()[1] * side > 0.0 { panel.flipped() } else { panel });
            x += w;
            if x < x1 {
                let step = Rect::new(
                    Vec3::new(x, side * FACADE_Y, zs),
                    Vec3::new(0.0, side * FACADE_RECESS, 0.0),
                    Vec3::new(0.0, 0.0, FACADE_HEIGHT),
                    "step",
                );
                // a step faces the protruding panel's open side
                let faces_neg_x = recessed;
                let step = if (step.normal()[0] < 0.0) == faces_neg_x { step } else { step.flipped() };
                prims.push(step);
            }
            recessed = !recessed;
        }
    }
    let scene = SceneSpec {
        primitives: prims,
        bounds_min: [x0, -(FACADE_Y + FACADE_RECESS), ROAD_Z],
        bounds_max: [x1, FACADE_Y + FACADE_RECESS, zs + FACADE_HEIGHT],
    };
    let height = ROAD_Z + 2.5;
    let lanes = [(-2.0, true), (-2.3, true), (2.0, false), (2.3, false)];
    let paths = lanes
        .iter()
        .enumerate()
        .map(|(i, &(y, east))| TrajectoryPath {
            trajectory_id: TrajectoryId(i as u32),
            vertices: if east {
                vec![[0.0, y], [length, y]]
            } else {
                vec![[length, y], [0.0, y]]
            },
            height,
            speed: 10.0,
        })
        .collect();
    StandardScene {
        scene,
        paths,
        // Decimated to a desk-scale point budget; the raster layout is unchanged.
        scanner: ScannerSpec {
            point_rate: 100_000,
            profile_rate: 100,
            plane_yaw_deg: [45.0, -45.0],
            max_range: 60.0,
        },
        errors: ErrorSpec {
            seed,
            ..Default::default()
        },
    }
}

pub const STANDARD_LENGTH: f64 = 40.0;
pub const STANDARD_SEED: u64 = 20160623;

/// The deterministic standard street block (about two million points).
pub fn standard_scene() -> StandardScene {
    street_scene(STANDARD_LENGTH, STANDARD_SEED)
}

pub fn generate_scene(
    s: &StandardScene,
    truth_step: f64,
) -> Result<Vec<GeneratedTrajectory>, SynthError> {
    s.paths
        .iter()
        .enumerate()
        .map(|(i, p)| generate(&s.scene, p, &s.scanner, &s.errors, 2 * i as u32, truth_step))
        .collect()
}

pub fn truth_to_csv(truth: &[TruthSample]) -> String {
    let mut out = String::from("arc,tx,ty,tz,omega,phi,kappa\n");
    for t in truth {
        let v = t.corr.to_vec6();
        let _ = writeln!(out, "{},{},{},{},{},{},{}", t.arc, v[0], v[1], v[2], v[3], v[4], v[5]);
    }
    out
}

pub fn truth_from_csv(text: &str) -> Result<Vec<TruthSample>, SynthError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "arc,tx,ty,tz,omega,phi,kappa" => {}
        _ => return Err(SynthError::MalformedTruth("missing header".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let vals: Vec<f64> = l
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| SynthError::MalformedTruth(e.to_string()))?;
            if vals.len() != 7 {
                return Err(SynthError::MalformedTruth(format!("expected 7 fields: {l}")));
            }
            Ok(TruthSample {
                arc: vals[0],
                corr: PoseCorrection::from_vec6(&nalgebra::Vector6::from_column_slice(&vals[1..])),
            })
        })
        .collect()
}

pub fn write_truth(path: &Path, truth: &[TruthSample]) -> Result<(), SynthError> {
    std::fs::write(path, truth_to_csv(truth))?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthSample>, SynthError> {
    truth_from_csv(&std::fs::read_to_string(path)?)
}

/// Linear interpolation of truth samples at `arc` (clamped at the ends).
pub fn truth_at(truth: &[TruthSample], arc: f64) -> PoseCorrection {
    let i = truth.partition_point(|t| t.arc <= arc);
    if i == 0 {
        return truth[0].corr;
    }
    if i >= truth.len() {
        return truth[truth.len() - 1].corr;
    }
    let (a, b) = (&truth[i - 1], &truth[i]);
    a.corr.lerp(&b.corr, (arc - a.arc) / (b.arc - a.arc))
}

/// Distinct trajectories seen in a strip set.
pub fn trajectories_of(strips: &[ScanStrip]) -> BTreeSet<TrajectoryId> {
    strips.iter().map(|s| s.trajectory_id).collect()
}

/// Small raster strips for unit tests.
pub mod fixtures {
    use super::*;

    fn noisy(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).unwrap().sample(rng)
        } else {
            0.0
        }
    }

    fn empty(rows: usize, cols: usize) -> ScanStrip {
        ScanStrip::new(StripId(1), 0, TrajectoryId(0), rows, cols).unwrap()
    }

    /// Plane `z = 0` sampled on a 2 cm x 10 cm raster from a head at `z = 2`.
    pub fn plane_strip(rows: usize, cols: usize, sigma: f64, seed: u64) -> ScanStrip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = empty(rows, cols);
        for c in 0..cols {
            let t0 = Vec3::new(c as f64 * 0.1, 0.0, 2.0);
            for r in 0..rows {
                let xyz = Vec3::new(c as f64 * 0.1, r as f64 * 0.02 + 0.3, noisy(&mut rng, sigma));
                s.set(r, c, xyz, t0, c as f64 * 0.1);
            }
        }
        s
    }

    /// Plane strip where a fraction of pixels is displaced by `offset` along z.
    pub fn plane_strip_with_outliers(
        rows: usize,
        cols: usize,
        sigma: f64,
        fraction: f64,
        offset: f64,
        seed: u64,
    ) -> (ScanStrip, Vec<bool>) {
        let mut s = plane_strip(rows, cols, sigma, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBAD);
        let mut mask = vec![false; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                if rng.random_bool(fraction) {
                    let p = *s.get(r, c).unwrap();
                    s.set(r, c, p.xyz + Vec3::new(0.0, 0.0, offset), p.t0, p.arc);
                    mask[r * cols + c] = true;
                }
            }
        }
        (s, mask)
    }

    /// Two parallel planes `z = 0` and `z = 1`, split at the middle row.
    pub fn gap_strip(rows: usize, cols: usize, sigma: f64, seed: u64) -> ScanStrip {
        let mut s = plane_strip(rows, cols, sigma, seed);
        for r in rows / 2..rows {
            for c in 0..cols {
                let p = *s.get(r, c).unwrap();
                s.set(r, c, p.xyz + Vec3::new(0.0, 0.0, 1.0), p.t0, p.arc);
            }
        }
        s
    }

    /// A floor `z = 0` meeting a wall (normal `-y`) at a 90 degree crease.
    pub fn crease_strip(rows: usize, cols: usize, sigma: f64, seed: u64) -> ScanStrip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = empty(rows, cols);
        let half = rows / 2;
        let wall_y = 0.3 + half as f64 * 0.02;
        for c in 0..cols {
            let x = c as f64 * 0.1;
            let t0 = Vec3::new(x, 0.0, 2.0);
            for r in 0..rows {
                let xyz = if r < half {
                    Vec3::new(x, 0.3 + r as f64 * 0.02, noisy(&mut rng, sigma))
                } else {
                    Vec3::new(x, wall_y + noisy(&mut rng, sigma), (r - half) as f64 * 0.02 + 0.02)
                };
                s.set(r, c, xyz, t0, x);
            }
        }
        s
    }

    /// An empty strip with the default 3000-row raster.
    pub fn default_rows_strip(cols: usize) -> ScanStrip {
        empty(DEFAULT_ROWS, cols)
    }
}
