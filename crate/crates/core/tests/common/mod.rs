#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stripalign_core::strip::write_strip;
use stripalign_core::geom::Vec3;
use stripalign_core::synth::{generate, street_scene, Rect, StandardScene, TrajectoryPath, TruthSample};

pub struct World {
    pub strips: Vec<PathBuf>,
    pub truth: BTreeMap<u32, Vec<TruthSample>>,
    pub paths: Vec<TrajectoryPath>,
    pub points: usize,
}

/// Generates the scene's trajectories (all, or those in `keep`) as strip
/// files under `dir`.
pub fn write_world(dir: &Path, scene: &StandardScene, keep: Option<&[u32]>) -> World {
    std::fs::create_dir_all(dir).unwrap();
    let mut w = World {
        strips: Vec::new(),
        truth: BTreeMap::new(),
        paths: Vec::new(),
        points: 0,
    };
    for (i, path) in scene.paths.iter().enumerate() {
        if keep.is_some_and(|k| !k.contains(&path.trajectory_id.0)) {
            continue;
        }
        let g = generate(&scene.scene, path, &scene.scanner, &scene.errors, 2 * i as u32, 0.5).unwrap();
        for s in &g.strips {
            let p = dir.join(format!("strip_{:03}.strip", s.strip_id.0));
            write_strip(s, &p).unwrap();
            w.points += s.point_count();
            w.strips.push(p);
        }
        w.truth.insert(path.trajectory_id.0, g.truth);
        w.paths.push(path.clone());
    }
    w
}

/// The street scene with every surface detached from its neighbors: curbs
/// and sidewalks removed, facade panels and steps shrunk so no two planes
/// meet. Without creases, a zero-error scan is explained exactly.
pub fn detached_street(length: f64, seed: u64) -> StandardScene {
    let mut s = street_scene(length, seed);
    s.scene.primitives = s
        .scene
        .primitives
        .iter()
        .filter(|r| r.label == "road" || r.label == "facade" || r.label == "step")
        .map(|r| if r.label == "road" { r.clone() } else { inset(r) })
        .collect();
    s
}

fn inset(r: &Rect) -> Rect {
    let (u, v) = (Vec3::from(r.u), Vec3::from(r.v));
    // vertical edges lose 0.5 m at both ends, horizontal ones 5 cm
    let margin = |e: &Vec3| if e.z.abs() > 0.5 * e.norm() { 0.5 } else { 0.05 };
    let (mu, mv) = (margin(&u), margin(&v));
    let (du, dv) = (u.normalize() * mu, v.normalize() * mv);
    Rect::new(Vec3::from(r.origin) + du + dv, u - du * 2.0, v - dv * 2.0, &r.label)
}
