//! Per-strip pre-segmentation on the scan raster.
//!
//! Each pixel gets a RANSAC plane normal from its raster window. Neighboring
//! pixels are joined by an edge whose weight combines a point-to-plane gap
//! (C0 continuity) and a normal-angle term (C1 continuity). Regions come from
//! Felzenszwalb-Huttenlocher on the 4-connected raster graph; small regions
//! are dropped afterwards.

mod fh;

pub use fh::{segment_graph, Edge};

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Vec3;
use crate::strip::ScanStrip;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    /// Half-width of the raster window.
    pub window: usize,
    pub iterations: usize,
    /// Orthogonal distance below which a point is an inlier (meters).
    pub inlier_dist: f64,
    pub min_inliers: usize,
    /// Mixed into every per-pixel sampler seed.
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            window: 2,
            iterations: 64,
            inlier_dist: 0.01,
            min_inliers: 6,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    /// Felzenszwalb-Huttenlocher scale parameter.
    pub k: f64,
    pub min_region_px: usize,
    /// Gap normalizer for the C0 term (meters).
    pub c0_scale: f64,
    /// Normalizer for the C1 term `1 - cos(angle)`.
    pub c1_scale: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            k: 1.0,
            min_region_px: 50,
            c0_scale: 0.05,
            c1_scale: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPlane {
    /// Unit normal facing the scan head.
    pub normal: Vec3,
    /// Plane offset `<normal, x>` for points on the fitted plane.
    pub offset: f64,
}

/// Per-pixel planes aligned with a strip raster.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub rows: usize,
    pub cols: usize,
    planes: Vec<Option<PixelPlane>>,
}

impl NormalField {
    pub fn get(&self, row: usize, col: usize) -> Option<&PixelPlane> {
        self.planes[row * self.cols + col].as_ref()
    }

    pub fn at(&self, idx: usize) -> Option<&PixelPlane> {
        self.planes[idx].as_ref()
    }

    pub fn defined_count(&self) -> usize {
        self.planes.iter().filter(|p| p.is_some()).count()
    }
}

fn pixel_seed(seed: u64, row: usize, col: usize) -> u64 {
    // splitmix64 finalizer over the raster position
    let mut z = seed ^ ((row as u64) << 32 | col as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Least-squares plane through `pts`: (unit normal, centroid).
pub fn fit_plane(pts: &[Vec3]) -> Option<(Vec3, Vec3)> {
    if pts.len() < 3 {
        return None;
    }
    let centroid = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let n = eig.eigenvectors.column(imin).into_owned();
    let norm = n.norm();
    if !(norm > 0.0) {
        return None;
    }
    Some((n / norm, centroid))
}

fn ransac_pixel(
    center: Vec3,
    neighbors: &[Vec3],
    params: &RansacParams,
    rng: &mut ChaCha8Rng,
    scratch: &mut Vec<Vec3>,
) -> Option<Vec3> {
    // Coordinates are relative to the center pixel; neighbors[0] is the center.
    let n = neighbors.len();
    let mut best: Option<(f64, usize, Vec3)> = None;
    for _ in 0..params.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        if k >= lo {
            k += 1;
        }
        if k >= hi {
            k += 1;
        }
        let (a, b, c) = (neighbors[i], neighbors[j], neighbors[k]);
        let e1 = b - a;
        let e2 = c - a;
        let cr = e1.cross(&e2);
        let len = cr.norm();
        if !(len > 1e-9 * e1.norm() * e2.norm()) {
            continue;
        }
        let nrm = cr / len;
        let d = nrm.dot(&a);
        // The plane must explain the pixel itself; this keeps creases sharp.
        if (nrm.dot(&center) - d).abs() > params.inlier_dist {
            continue;
        }
        // truncated quadratic (MSAC) cost; exact planes beat skewed ones
        // that straddle a crease with the same inlier count
        let tau2 = params.inlier_dist * params.inlier_dist;
        let (mut count, mut cost) = (0, 0.0);
        for p in neighbors.iter() {
            let r2 = (nrm.dot(p) - d).powi(2);
            if r2 <= tau2 {
                count += 1;
                cost += r2;
            } else {
                cost += tau2;
            }
        }
        if best.is_none_or(|(c0, _, _)| cost < c0) {
            best = Some((cost, count, nrm));
            if cost == 0.0 {
                break;
            }
        }
    }
    let (_, count, nrm) = best?;
    if count < params.min_inliers {
        return None;
    }
    let d = nrm.dot(&neighbors[0]);
    scratch.clear();
    scratch.extend(
        neighbors
            .iter()
            .filter(|p| (nrm.dot(p) - d).abs() <= params.inlier_dist),
    );
    let (refit, _) = fit_plane(scratch)?;
    Some(if refit.dot(&nrm) < 0.0 { -refit } else { refit })
}

/// RANSAC plane normal per pixel, refit to the inliers and oriented toward
/// the scan head. Pixels with fewer than three valid window neighbors, or no
/// plane with `min_inliers` support, stay undefined.
pub fn estimate_normals(strip: &ScanStrip, params: &RansacParams) -> NormalField {
    normals_where(strip, params, |_, _| true)
}

/// Re-estimates normals with each window restricted to the pixel's own
/// segment. Pixels that their segment cannot explain (typically crease
/// points that joined the wrong side) become undefined.
pub fn refine_normals(strip: &ScanStrip, labels: &SegmentLabels, params: &RansacParams) -> NormalField {
    normals_where(strip, params, |a, b| {
        let la = labels.labels[a];
        la.is_some() && la == labels.labels[b]
    })
}

fn normals_where(strip: &ScanStrip, params: &RansacParams, same: impl Fn(usize, usize) -> bool) -> NormalField {
    let (rows, cols) = (strip.rows, strip.cols);
    let w = params.window.max(1) as isize;
    let mut planes = vec![None; rows * cols];
    let mut neighbors: Vec<Vec3> = Vec::with_capacity(((2 * w + 1) * (2 * w + 1)) as usize);
    let mut scratch = Vec::with_capacity(neighbors.capacity());
    for row in 0..rows {
        for col in 0..cols {
            let Some(p) = strip.get(row, col) else {
                continue;
            };
            let a = row * cols + col;
            if !same(a, a) {
                continue;
            }
            neighbors.clear();
            neighbors.push(Vec3::zeros());
            for dr in -w..=w {
                let r = row as isize + dr;
                if r < 0 || r >= rows as isize {
                    continue;
                }
                for dc in -w..=w {
                    let c = col as isize + dc;
                    if (dr == 0 && dc == 0) || c < 0 || c >= cols as isize {
                        continue;
                    }
                    if !same(a, r as usize * cols + c as usize) {
                        continue;
                    }
                    if let Some(q) = strip.get(r as usize, c as usize) {
                        neighbors.push(q.xyz - p.xyz);
                    }
                }
            }
            if neighbors.len() < 4 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed(params.seed, row, col));
            let Some(mut n) =
                ransac_pixel(Vec3::zeros(), &neighbors, params, &mut rng, &mut scratch)
            else {
                continue;
            };
            if n.dot(&(p.t0 - p.xyz)) < 0.0 {
                n = -n;
            }
            planes[a] = Some(PixelPlane {
                normal: n,
                offset: n.dot(&p.xyz),
            });
        }
    }
    NormalField { rows, cols, planes }
}

/// Directed weight `|<n_a, x_b - x_a>| / c0 + (1 - <n_a, n_b>) / c1`.
pub fn edge_weight(xa: &Vec3, na: &Vec3, xb: &Vec3, nb: &Vec3, params: &SegmentParams) -> f64 {
    let gap = na.dot(&(xb - xa)).abs();
    gap / params.c0_scale + (1.0 - na.dot(nb)) / params.c1_scale
}

/// Average of both directed weights; exactly symmetric.
pub fn symmetric_edge_weight(
    xa: &Vec3,
    na: &Vec3,
    xb: &Vec3,
    nb: &Vec3,
    params: &SegmentParams,
) -> f64 {
    let d = xb - xa;
    let gap = 0.5 * (na.dot(&d).abs() + nb.dot(&d).abs());
    gap / params.c0_scale + (1.0 - na.dot(nb)) / params.c1_scale
}

/// Per-pixel segment ids with a size table.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLabels {
    pub rows: usize,
    pub cols: usize,
    labels: Vec<Option<u32>>,
    pub sizes: Vec<usize>,
}

impl SegmentLabels {
    pub fn get(&self, row: usize, col: usize) -> Option<u32> {
        self.labels[row * self.cols + col]
    }

    pub fn segment_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn labeled_count(&self) -> usize {
        self.sizes.iter().sum()
    }
}

/// Raster graph edges between 4-neighbors that both have normals, in
/// row-major order (right neighbor, then lower neighbor).
pub fn raster_edges(strip: &ScanStrip, normals: &NormalField, params: &SegmentParams) -> Vec<Edge> {
    let (rows, cols) = (strip.rows, strip.cols);
    let mut edges = Vec::with_capacity(2 * normals.defined_count());
    for row in 0..rows {
        for col in 0..cols {
            let a = row * cols + col;
            let Some(pa) = normals.at(a) else { continue };
            let xa = strip.cell(a).unwrap().xyz;
            let mut link = |b: usize| {
                if let Some(pb) = normals.at(b) {
                    let xb = strip.cell(b).unwrap().xyz;
                    edges.push(Edge {
                        a: a as u32,
                        b: b as u32,
                        w: symmetric_edge_weight(&xa, &pa.normal, &xb, &pb.normal, params),
                    });
                }
            };
            if col + 1 < cols {
                link(a + 1);
            }
            if row + 1 < rows {
                link(a + cols);
            }
        }
    }
    edges
}

/// Graph segmentation of the strip raster followed by small-region removal.
pub fn segment(strip: &ScanStrip, normals: &NormalField, params: &SegmentParams) -> SegmentLabels {
    let n = strip.rows * strip.cols;
    let edges = raster_edges(strip, normals, params);
    let comp = segment_graph(n, &edges, params.k);

    let mut size = vec![0usize; n];
    for (v, &c) in comp.iter().enumerate() {
        if normals.at(v).is_some() {
            size[c as usize] += 1;
        }
    }
    let mut remap = vec![u32::MAX; n];
    let mut sizes = Vec::new();
    let labels = comp
        .iter()
        .enumerate()
        .map(|(v, &c)| {
            let c = c as usize;
            if normals.at(v).is_none() || size[c] < params.min_region_px {
                return None;
            }
            if remap[c] == u32::MAX {
                remap[c] = sizes.len() as u32;
                sizes.push(size[c]);
            }
            Some(remap[c])
        })
        .collect();
    SegmentLabels {
        rows: strip.rows,
        cols: strip.cols,
        labels,
        sizes,
    }
}
