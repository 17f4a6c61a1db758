//! Result artifacts: signed-distance histograms, std-dev map images, PLY
//! point export and accuracy reports against ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::geom::{PoseCorrection, TrajectoryId, Vec3};
use crate::latent_map::DumpRow;

pub const DEFAULT_BIN_WIDTH: f64 = 0.0001;

/// Fixed-width histogram with streaming moments. Bins are half-open
/// `[k w, (k + 1) w)`; moments merge exactly in count and up to rounding
/// in mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: BTreeMap<i64, u64>,
    pub count: u64,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
}

impl Histogram {
    pub fn new(bin_width: f64) -> Self {
        assert!(bin_width > 0.0, "bin width must be positive");
        Self {
            bin_width,
            bins: BTreeMap::new(),
            count: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    pub fn bin_of(&self, x: f64) -> i64 {
        (x / self.bin_width).floor() as i64
    }

    pub fn add(&mut self, x: f64) {
        *self.bins.entry(self.bin_of(x)).or_default() += 1;
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn extend(&mut self, xs: impl IntoIterator<Item = f64>) {
        for x in xs {
            self.add(x);
        }
    }

    pub fn merge(&mut self, other: &Histogram) {
        assert_eq!(self.bin_width, other.bin_width, "bin widths differ");
        if other.count == 0 {
            return;
        }
        for (&k, &c) in &other.bins {
            *self.bins.entry(k).or_default() += c;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.mean += d * other.count as f64 / n;
        self.count += other.count;
    }

    /// Sample standard deviation (n - 1).
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }

    pub fn bin_center(&self, k: i64) -> f64 {
        (k as f64 + 0.5) * self.bin_width
    }

    /// Approximate quantile from bin centers.
    pub fn quantile(&self, q: f64) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        let target = ((self.count - 1) as f64 * q.clamp(0.0, 1.0)).round() as u64;
        let mut seen = 0;
        for (&k, &c) in &self.bins {
            seen += c;
            if seen > target {
                return Some(self.bin_center(k));
            }
        }
        None
    }

    /// `# count=.. mean=.. std=..` line, header, then `bin_center,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# count={} mean={} std={}\nbin_center,count\n", self.count, self.mean, self.std());
        for (&k, &c) in &self.bins {
            let _ = writeln!(out, "{},{}", self.bin_center(k), c);
        }
        out
    }
}

/// Histogram of `distances` at `bin_width`.
pub fn histogram(distances: &[f64], bin_width: f64) -> Histogram {
    let mut h = Histogram::new(bin_width);
    h.extend(distances.iter().copied());
    h
}

/// Blue (0) to red (1) through cyan, green and yellow.
pub fn temperature(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 1.0 } else { t.clamp(0.0, 1.0) };
    let s = t * 4.0;
    let (r, g, b) = match s {
        s if s < 1.0 => (0.0, s, 1.0),
        s if s < 2.0 => (0.0, 1.0, 2.0 - s),
        s if s < 3.0 => (s - 2.0, 1.0, 0.0),
        s => (1.0, (4.0 - s).max(0.0), 0.0),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Hue in degrees of a temperature color (blue 240 down to red 0).
pub fn hue(c: [u8; 3]) -> f64 {
    let [r, g, b] = c.map(|x| x as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    h * 60.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let k = 3 * (y * self.width + x);
        [self.rgb[k], self.rgb[k + 1], self.rgb[k + 2]]
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Top view of per-pixel std from a map dump: each image pixel shows the
/// largest std among dump pixels falling into it; empty pixels are black.
/// North (max y) is the top row.
pub fn std_map_render(rows: &[DumpRow], resolution: f64, scale_max: f64) -> Image {
    let with_std: Vec<(&DumpRow, f64)> = rows.iter().filter_map(|r| r.std.map(|s| (r, s))).collect();
    if with_std.is_empty() {
        return Image { width: 0, height: 0, rgb: Vec::new() };
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (r, _) in &with_std {
        x0 = x0.min(r.world.x);
        y0 = y0.min(r.world.y);
        x1 = x1.max(r.world.x);
        y1 = y1.max(r.world.y);
    }
    let ix0 = (x0 / resolution).floor() as i64;
    let iy0 = (y0 / resolution).floor() as i64;
    let width = ((x1 / resolution).floor() as i64 - ix0 + 1) as usize;
    let height = ((y1 / resolution).floor() as i64 - iy0 + 1) as usize;
    let mut grid = vec![f64::NEG_INFINITY; width * height];
    for (r, s) in &with_std {
        let cx = ((r.world.x / resolution).floor() as i64 - ix0) as usize;
        let cy = height - 1 - ((r.world.y / resolution).floor() as i64 - iy0) as usize;
        let g = &mut grid[cy * width + cx];
        *g = g.max(*s);
    }
    let mut rgb = Vec::with_capacity(3 * grid.len());
    for v in grid {
        if v == f64::NEG_INFINITY {
            rgb.extend_from_slice(&[0, 0, 0]);
        } else {
            rgb.extend_from_slice(&temperature(v / scale_max));
        }
    }
    Image { width, height, rgb }
}

/// One exported point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyPoint {
    pub xyz: Vec3,
    pub rgb: [u8; 3],
    pub segment: u32,
}

/// Stable pseudo-random color per segment key.
pub fn segment_color(key: u64) -> [u8; 3] {
    let mut z = key.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    let b = z.to_le_bytes();
    [b[0] / 2 + 64, b[1] / 2 + 64, b[2] / 2 + 64]
}

const PLY_PROPS: &[(&str, &str)] = &[
    ("double", "x"),
    ("double", "y"),
    ("double", "z"),
    ("uchar", "red"),
    ("uchar", "green"),
    ("uchar", "blue"),
    ("uint", "segment"),
];

pub fn write_ply(w: &mut impl Write, points: &[PlyPoint]) -> io::Result<()> {
    write!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", points.len())?;
    for (ty, name) in PLY_PROPS {
        writeln!(w, "property {ty} {name}")?;
    }
    w.write_all(b"end_header\n")?;
    for p in points {
        for c in p.xyz.iter() {
            w.write_all(&c.to_le_bytes())?;
        }
        w.write_all(&p.rgb)?;
        w.write_all(&p.segment.to_le_bytes())?;
    }
    Ok(())
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Reads files written by [`write_ply`].
pub fn read_ply(r: impl Read) -> io::Result<Vec<PlyPoint>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let next = |r: &mut BufReader<_>, line: &mut String| -> io::Result<String> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(bad("unexpected end of PLY header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next(&mut r, &mut line)? != "ply" {
        return Err(bad("not a PLY file"));
    }
    if next(&mut r, &mut line)? != "format binary_little_endian 1.0" {
        return Err(bad("unsupported PLY format"));
    }
    let count: usize = next(&mut r, &mut line)?
        .strip_prefix("element vertex ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing vertex count"))?;
    for (ty, name) in PLY_PROPS {
        if next(&mut r, &mut line)? != format!("property {ty} {name}") {
            return Err(bad("unexpected PLY property layout"));
        }
    }
    if next(&mut r, &mut line)? != "end_header" {
        return Err(bad("missing end_header"));
    }
    let mut rec = [0u8; 31];
    (0..count)
        .map(|_| {
            r.read_exact(&mut rec)?;
            let f = |k: usize| f64::from_le_bytes(rec[8 * k..8 * k + 8].try_into().unwrap());
            Ok(PlyPoint {
                xyz: Vec3::new(f(0), f(1), f(2)),
                rgb: [rec[24], rec[25], rec[26]],
                segment: u32::from_le_bytes(rec[27..31].try_into().unwrap()),
            })
        })
        .collect()
}

/// Estimated versus true correction at one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorComparison {
    pub trajectory_id: TrajectoryId,
    pub arc: f64,
    /// Scan-head position at the anchor (for the gauge lever arm).
    pub position: Vec3,
    pub estimated: PoseCorrection,
    pub truth: PoseCorrection,
}

/// Global rigid motion `(g, omega)` shared by all trajectories: it changes
/// corrections by `dt = g + omega x t0`, `dtheta = omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gauge {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

/// Lever arm weighting rotation residuals against translation residuals.
pub const GAUGE_LEVER: f64 = 10.0;

fn gauge_jacobian(p: &Vec3) -> [[f64; 6]; 6] {
    // dt = g + omega x p = g - [p]x omega, dtheta = omega (lever weighted)
    let l = GAUGE_LEVER;
    [
        [1.0, 0.0, 0.0, 0.0, p.z, -p.y],
        [0.0, 1.0, 0.0, -p.z, 0.0, p.x],
        [0.0, 0.0, 1.0, p.y, -p.x, 0.0],
        [0.0, 0.0, 0.0, l, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, l, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, l],
    ]
}

fn gauge_target(d: &PoseCorrection) -> [f64; 6] {
    let l = GAUGE_LEVER;
    [d.t.x, d.t.y, d.t.z, l * d.theta.x, l * d.theta.y, l * d.theta.z]
}

/// Default knot spacing of the gauge field (meters): about the along-track
/// distance between two passes' views of the same facade point.
pub const GAUGE_KNOT_SPACING: f64 = 20.0;

/// Least-squares rigid gauge from correction differences.
pub fn fit_gauge(rows: &[AnchorComparison]) -> Gauge {
    fit_gauge_field(rows, None).knots[0]
}

/// Gauge that varies piecewise linearly along the principal horizontal
/// axis of the anchor positions. `None` gives a single rigid gauge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeField {
    pub origin: [f64; 2],
    pub axis: [f64; 2],
    pub knot_spacing: Option<f64>,
    pub knots: Vec<Gauge>,
}

impl GaugeField {
    fn weights(&self, p: &Vec3) -> [(usize, f64); 2] {
        let Some(k) = self.knot_spacing else {
            return [(0, 1.0), (0, 0.0)];
        };
        let s = (p.x - self.origin[0]) * self.axis[0] + (p.y - self.origin[1]) * self.axis[1];
        let last = self.knots.len() - 1;
        let u = (s / k).clamp(0.0, last as f64);
        let i = (u.floor() as usize).min(last.saturating_sub(1));
        let f = u - i as f64;
        [(i, 1.0 - f), ((i + 1).min(last), f)]
    }

    pub fn apply(&self, p: &Vec3) -> PoseCorrection {
        let mut out = PoseCorrection::ZERO;
        for (i, w) in self.weights(p) {
            if w != 0.0 {
                let c = self.knots[i].apply(p);
                out = out + PoseCorrection::new(c.t * w, c.theta * w);
            }
        }
        out
    }
}

pub fn fit_gauge_field(rows: &[AnchorComparison], knot_spacing: Option<f64>) -> GaugeField {
    use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};
    let n = rows.len().max(1) as f64;
    let (mx, my) = rows.iter().fold((0.0, 0.0), |a, r| (a.0 + r.position.x, a.1 + r.position.y));
    let (mx, my) = (mx / n, my / n);
    let mut cov = Matrix2::<f64>::zeros();
    for r in rows {
        let d = nalgebra::Vector2::new(r.position.x - mx, r.position.y - my);
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let k = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
    let axis = [eig.eigenvectors[(0, k)], eig.eigenvectors[(1, k)]];
    let along = |p: &Vec3| (p.x - mx) * axis[0] + (p.y - my) * axis[1];
    let smin = rows.iter().map(|r| along(&r.position)).fold(f64::INFINITY, f64::min);
    let smax = rows.iter().map(|r| along(&r.position)).fold(f64::NEG_INFINITY, f64::max);
    let (origin, count) = match knot_spacing {
        Some(ks) if rows.len() > 1 => {
            let o = [mx + smin * axis[0], my + smin * axis[1]];
            (o, ((smax - smin) / ks).ceil() as usize + 1)
        }
        _ => ([mx, my], 1),
    };
    let zero = Gauge { translation: [0.0; 3], rotation: [0.0; 3] };
    let mut field = GaugeField {
        origin,
        axis,
        knot_spacing: knot_spacing.filter(|_| count > 1),
        knots: vec![zero; count],
    };
    let dim = 6 * count;
    let mut ata = DMatrix::<f64>::zeros(dim, dim);
    let mut atb = DVector::<f64>::zeros(dim);
    for r in rows {
        let jac = gauge_jacobian(&r.position);
        let b = gauge_target(&(r.estimated - r.truth));
        let w = field.weights(&r.position);
        for (row, &bk) in jac.iter().zip(&b) {
            for &(i, wi) in &w {
                for &(j, wj) in &w {
                    for a in 0..6 {
                        for c in 0..6 {
                            ata[(6 * i + a, 6 * j + c)] += wi * wj * row[a] * row[c];
                        }
                    }
                }
                for a in 0..6 {
                    atb[6 * i + a] += wi * row[a] * bk;
                }
            }
        }
    }
    // knots without support make the system singular; a tiny ridge pins them
    let chol = ata.clone().cholesky().or_else(|| {
        let ridge = 1e-9 * (0..dim).map(|i| ata[(i, i)]).sum::<f64>() / dim as f64;
        for i in 0..dim {
            ata[(i, i)] += ridge.max(f64::MIN_POSITIVE);
        }
        ata.cholesky()
    });
    if let Some(ch) = chol {
        let x = ch.solve(&atb);
        for (i, g) in field.knots.iter_mut().enumerate() {
            g.translation = [x[6 * i], x[6 * i + 1], x[6 * i + 2]];
            g.rotation = [x[6 * i + 3], x[6 * i + 4], x[6 * i + 5]];
        }
    }
    field
}

impl Gauge {
    pub fn apply(&self, p: &Vec3) -> PoseCorrection {
        let g = Vec3::from(self.translation);
        let w = Vec3::from(self.rotation);
        PoseCorrection::new(g + w.cross(p), w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAccuracy {
    pub trajectory_id: u32,
    pub anchors: usize,
    /// RMS of the 3D position error norm (meters).
    pub rms_position: f64,
    /// Per-axis RMS (meters).
    pub rms_position_axes: [f64; 3],
    /// RMS of the 3D rotation error norm (radians).
    pub rms_rotation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthReport {
    pub gauge: GaugeField,
    pub trajectories: Vec<TrajectoryAccuracy>,
    pub rms_position: f64,
    pub rms_position_axes: [f64; 3],
    pub rms_rotation: f64,
    /// `(percentile, position error norm)`.
    pub position_percentiles: Vec<(f64, f64)>,
    /// RMS without gauge removal.
    pub raw_rms_position: f64,
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }
}

pub fn truth_report(rows: &[AnchorComparison], knot_spacing: Option<f64>) -> TruthReport {
    let gauge = fit_gauge_field(rows, knot_spacing);
    let mut per: BTreeMap<u32, Vec<(Vec3, Vec3)>> = BTreeMap::new();
    let mut all_t = Vec::new();
    let mut all_r = Vec::new();
    let mut raw = Vec::new();
    for r in rows {
        let d = r.estimated - r.truth;
        raw.push(d.t.norm());
        let e = d - gauge.apply(&r.position);
        per.entry(r.trajectory_id.0).or_default().push((e.t, e.theta));
        all_t.push(e.t);
        all_r.push(e.theta.norm());
    }
    let axes = |v: &[Vec3]| -> [f64; 3] {
        std::array::from_fn(|k| rms(&v.iter().map(|x| x[k]).collect::<Vec<_>>()))
    };
    let trajectories = per
        .into_iter()
        .map(|(id, v)| {
            let ts: Vec<Vec3> = v.iter().map(|x| x.0).collect();
            TrajectoryAccuracy {
                trajectory_id: id,
                anchors: v.len(),
                rms_position: rms(&ts.iter().map(|t| t.norm()).collect::<Vec<_>>()),
                rms_position_axes: axes(&ts),
                rms_rotation: rms(&v.iter().map(|x| x.1.norm()).collect::<Vec<_>>()),
            }
        })
        .collect();
    let mut norms: Vec<f64> = all_t.iter().map(|t| t.norm()).collect();
    norms.sort_by(f64::total_cmp);
    let pct = |q: f64| {
        if norms.is_empty() {
            0.0
        } else {
            norms[((norms.len() - 1) as f64 * q / 100.0).round() as usize]
        }
    };
    TruthReport {
        gauge,
        trajectories,
        rms_position: rms(&norms),
        rms_position_axes: axes(&all_t),
        rms_rotation: rms(&all_r),
        position_percentiles: [50.0, 90.0, 95.0, 99.0, 100.0].iter().map(|&q| (q, pct(q))).collect(),
        raw_rms_position: rms(&raw),
    }
}

impl TruthReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("trajectory  anchors  rms_pos_mm  rms_x_mm  rms_y_mm  rms_z_mm  rms_rot_mdeg\n");
        for t in &self.trajectories {
            let _ = writeln!(
                s,
                "{:>10}  {:>7}  {:>10.3}  {:>8.3}  {:>8.3}  {:>8.3}  {:>12.3}",
                t.trajectory_id,
                t.anchors,
                t.rms_position * 1e3,
                t.rms_position_axes[0] * 1e3,
                t.rms_position_axes[1] * 1e3,
                t.rms_position_axes[2] * 1e3,
                t.rms_rotation.to_degrees() * 1e3
            );
        }
        let _ = writeln!(
            s,
            "all: rms position {:.3} mm (raw {:.3} mm), rms rotation {:.3} mdeg",
            self.rms_position * 1e3,
            self.raw_rms_position * 1e3,
            self.rms_rotation.to_degrees() * 1e3
        );
        for (q, v) in &self.position_percentiles {
            let _ = writeln!(s, "p{q:<5} {:.3} mm", v * 1e3);
        }
        s
    }
}
