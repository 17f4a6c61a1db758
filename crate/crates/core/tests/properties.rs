use std::fs;

use proptest::prelude::*;
use stripalign_core::blocks::{distance_blocks, prior_blocks, smooth_blocks, NoiseConfig};
use stripalign_core::engine::{run_job, InputSplit, JobSpec, MapContext, ReduceContext, TaskError, Values};
use stripalign_core::geom::{
    apply_correction, interpolate_correction, residual_jacobian, rotation_matrix, AnchorChain, PlaneTarget,
    PoseCorrection, RayMeasurement, TrajectoryId, Vec3, Vec6,
};
use stripalign_core::solver::{solve, solve_dense, ChainSystem};
use stripalign_core::strip::{ScanStrip, StripId};

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn unit() -> impl Strategy<Value = Vec3> {
    vec3(1.0).prop_filter("non-degenerate", |v| v.norm() > 0.1).prop_map(|v| v.normalize())
}

fn correction() -> impl Strategy<Value = PoseCorrection> {
    (vec3(0.5), vec3(0.02)).prop_map(|(t, th)| PoseCorrection::new(t, th))
}

fn chain() -> impl Strategy<Value = AnchorChain> {
    (prop::collection::vec(correction(), 2..12), -50.0f64..50.0)
        .prop_map(|(a, o)| AnchorChain::new(TrajectoryId(3), 0.5, o, a).unwrap())
}

fn ray(arc: f64) -> impl Strategy<Value = RayMeasurement> {
    (vec3(100.0), vec3(30.0)).prop_map(move |(t0, r)| RayMeasurement {
        t0,
        r,
        arc,
        trajectory_id: TrajectoryId(3),
    })
}

fn close(a: &PoseCorrection, b: &PoseCorrection, tol: f64) -> bool {
    (a.to_vec6() - b.to_vec6()).amax() <= tol
}

proptest! {
    #[test]
    fn interpolation_is_exact_at_anchors(c in chain()) {
        for k in 0..c.len() {
            let ip = interpolate_correction(&c, c.arc_of(k)).unwrap();
            prop_assert!(close(&ip.corr, &c.anchors[k], 1e-12));
        }
    }

    #[test]
    fn mirrored_chain_mirrors_interpolation(c in chain(), u in 0.0f64..1.0) {
        let arc = c.arc_origin + u * (c.arc_end() - c.arc_origin);
        let mut rev = c.anchors.clone();
        rev.reverse();
        let m = AnchorChain::new(c.trajectory_id, c.spacing, c.arc_origin, rev).unwrap();
        let a = interpolate_correction(&c, arc).unwrap();
        let b = interpolate_correction(&m, c.arc_origin + c.arc_end() - arc).unwrap();
        prop_assert!(close(&a.corr, &b.corr, 1e-9));
    }

    #[test]
    fn zero_correction_is_bit_exact(m in ray(0.0)) {
        let p = apply_correction(&PoseCorrection::ZERO, &m);
        prop_assert_eq!(p, m.r + m.t0);
    }

    #[test]
    fn linearization_error_is_second_order(th in vec3(0.05), m in ray(0.0)) {
        let c = PoseCorrection::new(Vec3::zeros(), th);
        let lin = apply_correction(&c, &m);
        let full = rotation_matrix(&th) * m.r + m.t0;
        prop_assert!((lin - full).norm() <= th.norm_squared() * m.r.norm() + 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences(
        c in chain(), u in 0.0f64..1.0, w in unit(), m in ray(0.0), dir in 0usize..6,
    ) {
        let arc = c.arc_origin + u * (c.arc_end() - c.arc_origin);
        let m = RayMeasurement { arc, ..m };
        let ip = interpolate_correction(&c, arc).unwrap();
        let target = PlaneTarget::new(w, Vec3::zeros()).unwrap();
        let (ji, jn) = residual_jacobian(&target, &m, ip.alpha);
        let f = |c: &AnchorChain| w.dot(&apply_correction(&interpolate_correction(c, arc).unwrap().corr, &m));
        let h = 1e-6;
        for (k, j) in [(ip.index, ji), (ip.index + 1, jn)] {
            let mut plus = c.clone();
            let mut minus = c.clone();
            let mut e = Vec6::zeros();
            e[dir] = h;
            plus.anchors[k] = PoseCorrection::from_vec6(&(plus.anchors[k].to_vec6() + e));
            minus.anchors[k] = PoseCorrection::from_vec6(&(minus.anchors[k].to_vec6() - e));
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            prop_assert!((fd - j[dir]).abs() <= 1e-5 * (1.0 + j[dir].abs()), "fd {fd} vs {}", j[dir]);
        }
    }

    #[test]
    fn strip_bytes_depend_only_on_content(
        rows in 1usize..8, cols in 1usize..8, cells in prop::collection::vec((any::<bool>(), vec3(50.0)), 64),
    ) {
        let build = |order_rev: bool| {
            let mut s = ScanStrip::new(StripId(4), 1, TrajectoryId(2), rows, cols).unwrap();
            let mut idx: Vec<usize> = (0..rows * cols).collect();
            if order_rev {
                idx.reverse();
            }
            for i in idx {
                let (on, p) = cells[i];
                if on {
                    s.set(i / cols, i % cols, p, p * 0.5, i as f64);
                }
            }
            s
        };
        let a = build(false).to_bytes();
        prop_assert_eq!(&a, &build(true).to_bytes());
        prop_assert_eq!(ScanStrip::from_bytes(&a).unwrap().to_bytes(), a);
    }

    #[test]
    fn observation_blocks_equal_explicit_rows(
        w in unit(), s in vec3(5.0), m in ray(0.0), alpha in 0.0f64..1.0, d in -0.1f64..0.1,
    ) {
        let noise = NoiseConfig::default();
        let target = PlaneTarget::new(w, s).unwrap();
        let c = AnchorChain::new(TrajectoryId(3), 0.5, 0.0, vec![PoseCorrection::ZERO; 2]).unwrap();
        let ip = interpolate_correction(&c, alpha * 0.5).unwrap();
        let m = RayMeasurement { arc: alpha * 0.5, ..m };
        let mut sys = ChainSystem::zeros(TrajectoryId(3), 0, 2);
        for b in distance_blocks(&target, d, &m, &ip, &noise) {
            sys.add(&b);
        }
        let (a, rhs) = sys.to_dense();
        let (ji, jn) = residual_jacobian(&target, &m, ip.alpha);
        let row = nalgebra::DVector::from_iterator(12, ji.iter().chain(jn.iter()).copied());
        let p = 1.0 / (noise.sigma_dist * noise.sigma_dist);
        let want = &row * row.transpose() * p;
        let tol = 1e-9 * p * (1.0 + m.r.norm_squared());
        prop_assert!((a - want).amax() <= tol);
        prop_assert!((rhs - row * (p * d)).amax() <= tol);
    }

    #[test]
    fn priors_make_any_chain_positive_definite(seed in any::<u64>(), n in 1usize..20) {
        let sys = random_chain(seed, n, 50);
        let (a, _) = sys.to_dense();
        prop_assert!(a.cholesky().is_some());
    }

    #[test]
    fn block_solver_matches_dense(seed in any::<u64>(), n in 1usize..30) {
        let sys = random_chain(seed, n, 40);
        let x = solve(&sys).unwrap();
        let y = solve_dense(&sys).unwrap();
        for (a, b) in x.x.iter().zip(&y.x) {
            prop_assert!((a - b).norm() <= 1e-8 * (1.0 + b.norm()));
        }
        let (a, rhs) = sys.to_dense();
        let xs = nalgebra::DVector::from_iterator(6 * n, x.x.iter().flat_map(|v| v.iter().copied()));
        prop_assert!((a * xs - &rhs).norm() <= 1e-8 * (1.0 + rhs.norm()));
    }

    #[test]
    fn solution_is_scale_invariant(seed in any::<u64>(), n in 1usize..12, scale in 1e-3f64..1e3) {
        let sys = random_chain(seed, n, 20);
        let mut scaled = sys.clone();
        scaled.d.iter_mut().for_each(|m| *m *= scale);
        scaled.u.iter_mut().for_each(|m| *m *= scale);
        scaled.b.iter_mut().for_each(|v| *v *= scale);
        let x = solve(&sys).unwrap();
        let y = solve(&scaled).unwrap();
        for (a, b) in x.x.iter().zip(&y.x) {
            prop_assert!((a - b).norm() <= 1e-8 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn extra_prior_never_grows_covariance(seed in any::<u64>(), n in 1usize..12) {
        let sys = random_chain(seed, n, 20);
        let mut tighter = sys.clone();
        for b in prior_blocks(TrajectoryId(3), 0, n as u32, &NoiseConfig::default()) {
            tighter.add(&b);
        }
        let x = solve(&sys).unwrap();
        let y = solve(&tighter).unwrap();
        for (a, b) in x.cov.iter().zip(&y.cov) {
            for k in 0..6 {
                prop_assert!(b[(k, k)] <= a[(k, k)] * (1.0 + 1e-9));
            }
        }
    }
}

/// Priors, smoothness and random point observations on an `n` anchor chain.
fn random_chain(seed: u64, n: usize, obs_per_anchor: usize) -> ChainSystem {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = NoiseConfig::default();
    let tid = TrajectoryId(3);
    let mut sys = ChainSystem::zeros(tid, 0, n);
    for b in prior_blocks(tid, 0, n as u32, &noise).iter().chain(&smooth_blocks(tid, 0, n as u32, &noise)) {
        sys.add(b);
    }
    let chain = AnchorChain::new(tid, 0.5, 0.0, vec![PoseCorrection::ZERO; n]).unwrap();
    for _ in 0..obs_per_anchor * n {
        let arc = rng.random_range(0.0..=chain.arc_end());
        let mut v = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let w = v().normalize();
        let r = v() * 20.0;
        let m = RayMeasurement { t0: Vec3::zeros(), r, arc, trajectory_id: tid };
        let target = PlaneTarget::new(w, Vec3::zeros()).unwrap();
        let ip = interpolate_correction(&chain, arc).unwrap();
        let d = rng.random_range(-0.05..0.05);
        for b in distance_blocks(&target, d, &m, &ip, &noise) {
            sys.add(&b);
        }
    }
    sys
}

fn collect_reduce(key: &[u8], values: &mut Values, ctx: &mut ReduceContext) -> Result<(), TaskError> {
    let mut all = Vec::new();
    for v in values {
        all.extend_from_slice(&(v.len() as u32).to_le_bytes());
        all.extend_from_slice(&v);
    }
    ctx.emit(key, &all)?;
    Ok(())
}

fn line_map(split: &InputSplit, ctx: &mut MapContext) -> Result<(), TaskError> {
    for (i, w) in fs::read_to_string(&split.path)?.split_whitespace().enumerate() {
        ctx.emit(w.as_bytes(), format!("{}:{i}", split.id).into_bytes())?;
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shuffle_preserves_multiplicity_and_order(
        words in prop::collection::vec(prop::collection::vec(0u8..6, 0..40), 1..6),
        workers in 1usize..5, partitions in 1usize..5, spill in prop::sample::select(vec![64usize, 1 << 20]),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut splits = Vec::new();
        for (i, ws) in words.iter().enumerate() {
            let p = dir.path().join(format!("in{i}"));
            fs::write(&p, ws.iter().map(|w| format!("k{w} ")).collect::<String>()).unwrap();
            splits.push(InputSplit { id: i as u32, path: p });
        }
        let mut spec = JobSpec::new("prop", splits, &dir.path().join("scratch"), &dir.path().join("out"), partitions);
        spec.spill_bytes = spill;
        let out = run_job(&spec, workers, line_map, collect_reduce).unwrap();
        let total: usize = words.iter().map(Vec::len).sum();
        prop_assert_eq!(out.manifest.map_records_emitted as usize, total);
        prop_assert_eq!(out.manifest.reduce_records_in as usize, total);
        // values of one key arrive in (split, position) order
        for rec in out.records().unwrap() {
            let mut vals = Vec::new();
            let mut buf = &rec.value[..];
            while !buf.is_empty() {
                let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
                let s = std::str::from_utf8(&buf[4..4 + len]).unwrap();
                let (a, b) = s.split_once(':').unwrap();
                vals.push((a.parse::<u32>().unwrap(), b.parse::<u32>().unwrap()));
                buf = &buf[4 + len..];
            }
            let mut sorted = vals.clone();
            sorted.sort();
            prop_assert_eq!(vals, sorted);
        }
    }
}
