//! End-to-end processing on top of the MapReduce engine.
//!
//! Preprocessing segments every strip and routes points into square tiles
//! with a small overlap. Each estimation iteration corrects the points with
//! the current anchor chains (broadcast to all mappers), builds a latent map
//! per tile, matches points against it and sums normal-equation blocks;
//! reducers solve one block-tridiagonal system per trajectory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::blocks::{distance_blocks, prior_blocks, smooth_blocks, BlockAccumulator, NoiseConfig, NormalBlock};
use crate::config::{PipelineConfig, PlanStep};
use crate::diagnostics::{self, AnchorComparison, Histogram, PlyPoint};
use crate::engine::{self, InputSplit, JobSpec, MapContext, ReduceContext, TaskError, Values};
use crate::error::{PipelineError, Result};
use crate::geom::{interpolate_correction, AnchorChain, PoseCorrection, TrajectoryId, Vec3, Vec6};
use crate::latent_map::{LatentMap, MapParams, Rejection};
use crate::segmentation::{estimate_normals, refine_normals, segment};
use crate::solver::{solve, ChainSystem, SolveError};
use crate::strip::{read_strip, PointRecord};
use crate::synth::{truth_at, TrajectoryPath, TruthSample};

// ---------------------------------------------------------------- tiles

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileKey {
    pub tx: i32,
    pub ty: i32,
}

impl TileKey {
    pub fn of(p: &Vec3, size: f64) -> Self {
        Self {
            tx: (p.x / size).floor() as i32,
            ty: (p.y / size).floor() as i32,
        }
    }

    pub fn file_name(&self) -> String {
        format!("tile_{}_{}.pts", self.tx, self.ty)
    }

    /// Order-preserving byte encoding.
    fn to_bytes(self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[..4].copy_from_slice(&((self.tx as u32) ^ 0x8000_0000).to_be_bytes());
        b[4..].copy_from_slice(&((self.ty as u32) ^ 0x8000_0000).to_be_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != 8 {
            return None;
        }
        let u = |k: usize| u32::from_be_bytes(b[k..k + 4].try_into().unwrap()) ^ 0x8000_0000;
        Some(Self { tx: u(0) as i32, ty: u(4) as i32 })
    }
}

/// Tiles receiving a point at `(x, y)`: its own tile plus every neighbor
/// whose border is within `overlap`. Sorted.
pub fn emit_tiles(x: f64, y: f64, size: f64, overlap: f64) -> Vec<TileKey> {
    let axis = |c: f64| {
        let t = (c / size).floor();
        let f = c - t * size;
        let t = t as i32;
        let mut v = Vec::with_capacity(2);
        if f <= overlap {
            v.push(t - 1);
        }
        v.push(t);
        if size - f <= overlap {
            v.push(t + 1);
        }
        v
    };
    let ys = axis(y);
    axis(x)
        .into_iter()
        .flat_map(|tx| ys.iter().map(move |&ty| TileKey { tx, ty }))
        .collect()
}

const TILE_MAGIC: &[u8; 4] = b"TILE";
const TILE_VERSION: u32 = 1;
const TILE_HEADER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TileFile {
    pub key: TileKey,
    pub size: f64,
    pub records: Vec<PointRecord>,
}

impl TileFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TILE_HEADER_LEN + self.records.len() * PointRecord::ENCODED_LEN);
        write_tile_header(&mut out, self.key, self.size, self.records.len() as u64);
        for r in &self.records {
            r.encode_into(&mut out);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        if buf.len() < TILE_HEADER_LEN || &buf[..4] != TILE_MAGIC {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != TILE_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let key = TileKey {
            tx: i32::from_le_bytes(buf[8..12].try_into().unwrap()),
            ty: i32::from_le_bytes(buf[12..16].try_into().unwrap()),
        };
        let size = f64::from_le_bytes(buf[16..24].try_into().unwrap());
        let count = u64::from_le_bytes(buf[24..32].try_into().unwrap()) as usize;
        let body = &buf[TILE_HEADER_LEN..];
        if body.len() != count * PointRecord::ENCODED_LEN {
            return Err(format!("expected {count} records, found {} bytes", body.len()));
        }
        let records = PointRecord::decode_all(body).ok_or("undecodable record")?;
        Ok(Self { key, size, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(PipelineError::io(path))?;
        Self::from_bytes(&buf).map_err(|reason| PipelineError::Format {
            what: "tile file",
            path: path.to_path_buf(),
            reason,
        })
    }
}

fn write_tile_header(out: &mut Vec<u8>, key: TileKey, size: f64, count: u64) {
    out.extend_from_slice(TILE_MAGIC);
    out.extend_from_slice(&TILE_VERSION.to_le_bytes());
    out.extend_from_slice(&key.tx.to_le_bytes());
    out.extend_from_slice(&key.ty.to_le_bytes());
    out.extend_from_slice(&size.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
}

/// Unique id of a raster position across strips.
pub fn point_id(r: &PointRecord) -> u64 {
    (r.strip_id.0 as u64) << 40 | (r.row as u64) << 20 | r.col as u64
}

/// Corrected position; a zero correction returns the stored coordinates.
pub fn corrected_point(corr: &PoseCorrection, r: &PointRecord) -> Vec3 {
    if *corr == PoseCorrection::ZERO {
        r.xyz
    } else {
        crate::geom::apply_correction(corr, &r.ray())
    }
}

// ---------------------------------------------------------- corrections

const CORR_MAGIC: &[u8; 4] = b"CORR";
const CORR_VERSION: u32 = 1;
const CORR_HEADER_LEN: usize = 48;
const CORR_CHAIN_LEN: usize = 24;
const CORR_ANCHOR_LEN: usize = 112;

/// Anchor chains of all trajectories with per-anchor standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionsSet {
    pub iteration: u32,
    /// SHA-256 of the job manifest that produced this set.
    pub provenance: [u8; 32],
    /// Sorted by trajectory id.
    pub chains: Vec<AnchorChain>,
    /// `std[c][k]`: marginal std devs of chain `c`, anchor `k` (NaN if never estimated).
    pub std: Vec<Vec<[f64; 6]>>,
}

impl CorrectionsSet {
    pub fn new(mut chains: Vec<AnchorChain>) -> Self {
        chains.sort_by_key(|c| c.trajectory_id);
        let std = chains.iter().map(|c| vec![[f64::NAN; 6]; c.len()]).collect();
        Self {
            iteration: 0,
            provenance: [0; 32],
            chains,
            std,
        }
    }

    pub fn chain(&self, id: TrajectoryId) -> Option<&AnchorChain> {
        self.chains
            .binary_search_by_key(&id, |c| c.trajectory_id)
            .ok()
            .map(|k| &self.chains[k])
    }

    pub fn anchor_count(&self) -> usize {
        self.chains.iter().map(|c| c.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            CORR_HEADER_LEN + self.chains.len() * CORR_CHAIN_LEN + self.anchor_count() * CORR_ANCHOR_LEN,
        );
        out.extend_from_slice(CORR_MAGIC);
        for v in [CORR_VERSION, self.iteration, self.chains.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.provenance);
        for c in &self.chains {
            out.extend_from_slice(&c.trajectory_id.0.to_le_bytes());
            out.extend_from_slice(&(c.len() as u32).to_le_bytes());
            out.extend_from_slice(&c.spacing.to_le_bytes());
            out.extend_from_slice(&c.arc_origin.to_le_bytes());
        }
        for (c, std) in self.chains.iter().zip(&self.std) {
            for (k, (a, s)) in c.anchors.iter().zip(std).enumerate() {
                out.extend_from_slice(&c.trajectory_id.0.to_le_bytes());
                out.extend_from_slice(&(k as u32).to_le_bytes());
                out.extend_from_slice(&c.arc_of(k).to_le_bytes());
                for v in a.to_vec6().iter().chain(s.iter()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let u32_at = |k: usize| u32::from_le_bytes(buf[k..k + 4].try_into().unwrap());
        let f64_at = |k: usize| f64::from_le_bytes(buf[k..k + 8].try_into().unwrap());
        if buf.len() < CORR_HEADER_LEN || &buf[..4] != CORR_MAGIC {
            return Err("bad magic".into());
        }
        if u32_at(4) != CORR_VERSION {
            return Err(format!("unsupported version {}", u32_at(4)));
        }
        let iteration = u32_at(8);
        let n = u32_at(12) as usize;
        let provenance: [u8; 32] = buf[16..48].try_into().unwrap();
        let mut pos = CORR_HEADER_LEN;
        if buf.len() < pos + n * CORR_CHAIN_LEN {
            return Err("truncated chain table".into());
        }
        let mut heads = Vec::with_capacity(n);
        for _ in 0..n {
            heads.push((u32_at(pos), u32_at(pos + 4) as usize, f64_at(pos + 8), f64_at(pos + 16)));
            pos += CORR_CHAIN_LEN;
        }
        let total: usize = heads.iter().map(|h| h.1).sum();
        if buf.len() != pos + total * CORR_ANCHOR_LEN {
            return Err("anchor records do not match chain table".into());
        }
        let mut chains = Vec::with_capacity(n);
        let mut stds = Vec::with_capacity(n);
        for (tid, len, spacing, origin) in heads {
            let mut anchors = Vec::with_capacity(len);
            let mut std = Vec::with_capacity(len);
            for k in 0..len {
                if u32_at(pos) != tid || u32_at(pos + 4) as usize != k {
                    return Err(format!("anchor record out of order at trajectory {tid}, index {k}"));
                }
                let v: Vec<f64> = (0..12).map(|j| f64_at(pos + 16 + 8 * j)).collect();
                anchors.push(PoseCorrection::from_vec6(&Vec6::from_column_slice(&v[..6])));
                std.push(v[6..].try_into().unwrap());
                pos += CORR_ANCHOR_LEN;
            }
            chains.push(AnchorChain::new(TrajectoryId(tid), spacing, origin, anchors).map_err(|e| e.to_string())?);
            stds.push(std);
        }
        if chains.windows(2).any(|w| w[0].trajectory_id >= w[1].trajectory_id) {
            return Err("chains not sorted by trajectory".into());
        }
        Ok(Self {
            iteration,
            provenance,
            chains,
            std: stds,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(PipelineError::io(path))?;
        Self::from_bytes(&buf).map_err(|reason| PipelineError::Format {
            what: "corrections file",
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn provenance_hex(&self) -> String {
        self.provenance.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(PipelineError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(PipelineError::io(path))
}

fn manifest_hash(dir: &Path) -> Result<[u8; 32]> {
    use sha2::{Digest, Sha256};
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(PipelineError::io(&path))?;
    Ok(Sha256::digest(&bytes).into())
}

// -------------------------------------------------------------- layout

/// File layout of a processing run.
#[derive(Debug, Clone)]
pub struct WorkDir {
    pub root: PathBuf,
    pub scratch: PathBuf,
}

impl WorkDir {
    pub fn new(root: &Path, cfg: &PipelineConfig) -> Self {
        Self {
            root: root.to_path_buf(),
            scratch: cfg.scratch.clone().unwrap_or_else(|| root.join("scratch")),
        }
    }

    pub fn tiles_dir(&self) -> PathBuf {
        self.root.join("preprocess")
    }

    pub fn tile_index(&self) -> PathBuf {
        self.root.join("tiles.json")
    }

    pub fn corrections(&self, iteration: u32) -> PathBuf {
        self.root.join("corrections").join(format!("iter-{iteration:03}.bin"))
    }

    pub fn final_corrections(&self) -> PathBuf {
        self.root.join("corrections.bin")
    }

    pub fn iteration_dir(&self, iteration: u32) -> PathBuf {
        self.root.join("estimate").join(format!("iter-{iteration:03}"))
    }

    pub fn stats(&self, iteration: u32) -> PathBuf {
        self.root.join("stats").join(format!("iter-{iteration:03}.json"))
    }

    pub fn histogram(&self, iteration: u32) -> PathBuf {
        self.root.join("stats").join(format!("residuals-{iteration:03}.csv"))
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.root.join("evaluate")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub key: TileKey,
    pub file: PathBuf,
    pub points: u64,
}

pub fn read_tile_index(work: &WorkDir) -> Result<Vec<TileEntry>> {
    let path = work.tile_index();
    let text = fs::read_to_string(&path).map_err(PipelineError::io(&path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format {
        what: "tile index",
        path,
        reason: e.to_string(),
    })
}

fn job(cfg: &PipelineConfig, name: &str, splits: Vec<InputSplit>, scratch: &Path, out: &Path) -> JobSpec {
    let mut spec = JobSpec::new(name, splits, scratch, out, cfg.partitions);
    spec.spill_bytes = cfg.spill_bytes;
    spec.max_attempts = cfg.max_attempts;
    spec
}

fn task_err(msg: impl Into<String>) -> TaskError {
    msg.into().into()
}

// ---------------------------------------------------------- preprocess

const KEY_TILE: u8 = b'T';
const KEY_ARC: u8 = b'A';
const KEY_TRAJ: u8 = b'J';
const KEY_STATS: u8 = b'S';
const KEY_DUMP: u8 = b'D';

fn tile_key_bytes(k: TileKey, tag: u8) -> Vec<u8> {
    let mut v = vec![tag];
    v.extend_from_slice(&k.to_bytes());
    v
}

fn traj_key_bytes(t: u32, tag: u8) -> Vec<u8> {
    let mut v = vec![tag];
    v.extend_from_slice(&t.to_be_bytes());
    v
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub tiles: Vec<TileEntry>,
    pub corrections: CorrectionsSet,
}

fn preprocess_map(split: &InputSplit, ctx: &mut MapContext, cfg: &PipelineConfig) -> std::result::Result<(), TaskError> {
    let strip = read_strip(&split.path).map_err(|e| task_err(format!("{}: {e}", split.path.display())))?;
    let normals = estimate_normals(&strip, &cfg.ransac);
    let labels = segment(&strip, &normals, &cfg.segment);
    let normals = refine_normals(&strip, &labels, &cfg.ransac);
    let mut per_tile: BTreeMap<TileKey, Vec<u8>> = BTreeMap::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in 0..strip.rows {
        for col in 0..strip.cols {
            let Some(p) = strip.get(row, col) else { continue };
            let (Some(seg), Some(plane)) = (labels.get(row, col), normals.get(row, col)) else {
                continue;
            };
            let rec = PointRecord {
                xyz: p.xyz,
                t0: p.t0,
                arc: p.arc,
                trajectory_id: strip.trajectory_id,
                strip_id: strip.strip_id,
                segment_id: Some(seg),
                row: row as u32,
                col: col as u32,
                normal: plane.normal,
            };
            lo = lo.min(p.arc);
            hi = hi.max(p.arc);
            for t in emit_tiles(p.xyz.x, p.xyz.y, cfg.tiles.size, cfg.tiles.overlap) {
                rec.encode_into(per_tile.entry(t).or_default());
            }
        }
    }
    for (t, buf) in per_tile {
        ctx.emit(&tile_key_bytes(t, KEY_TILE), buf)?;
    }
    if lo <= hi {
        let mut v = lo.to_le_bytes().to_vec();
        v.extend_from_slice(&hi.to_le_bytes());
        ctx.emit(&traj_key_bytes(strip.trajectory_id.0, KEY_ARC), v)?;
    }
    Ok(())
}

fn preprocess_reduce(
    key: &[u8],
    values: &mut Values,
    ctx: &mut ReduceContext,
    cfg: &PipelineConfig,
) -> std::result::Result<(), TaskError> {
    match key.first() {
        Some(&KEY_TILE) => {
            let tile = TileKey::from_bytes(&key[1..]).ok_or_else(|| task_err("bad tile key"))?;
            let mut recs = Vec::new();
            for v in values {
                recs.extend(PointRecord::decode_all(&v).ok_or_else(|| task_err("bad point batch"))?);
            }
            recs.sort_by_key(|r| r.raster_key());
            let n = recs.len() as u64;
            let file = TileFile { key: tile, size: cfg.tiles.size, records: recs };
            ctx.write_side_file(&tile.file_name(), |w| w.write_all(&file.to_bytes()))?;
            ctx.emit(key, &n.to_le_bytes())?;
        }
        Some(&KEY_ARC) => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in values {
                lo = lo.min(f64::from_le_bytes(v[..8].try_into()?));
                hi = hi.max(f64::from_le_bytes(v[8..16].try_into()?));
            }
            let mut v = lo.to_le_bytes().to_vec();
            v.extend_from_slice(&hi.to_le_bytes());
            ctx.emit(key, &v)?;
        }
        _ => return Err(task_err("unknown key")),
    }
    Ok(())
}

/// Segments strips, writes tile files and the initial (zero) corrections.
pub fn preprocess(strips: &[PathBuf], work: &WorkDir, cfg: &PipelineConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    if strips.is_empty() {
        return Err(PipelineError::Input("no strip files given".into()));
    }
    let mut paths = strips.to_vec();
    paths.sort();
    let splits = paths
        .into_iter()
        .enumerate()
        .map(|(i, path)| InputSplit { id: i as u32, path })
        .collect();
    let spec = job(cfg, "preprocess", splits, &work.scratch, &work.tiles_dir());
    info!("preprocess: {} strips", strips.len());
    let out = engine::run_job(
        &spec,
        cfg.workers,
        |s, ctx| preprocess_map(s, ctx, cfg),
        |k, v, ctx| preprocess_reduce(k, v, ctx, cfg),
    )?;
    let mut tiles = Vec::new();
    let mut chains = Vec::new();
    for rec in out.records()? {
        match rec.key[0] {
            KEY_TILE => {
                let key = TileKey::from_bytes(&rec.key[1..]).expect("tile key");
                tiles.push(TileEntry {
                    key,
                    file: work.tiles_dir().join(key.file_name()),
                    points: u64::from_le_bytes(rec.value[..8].try_into().unwrap()),
                });
            }
            _ => {
                let tid = u32::from_be_bytes(rec.key[1..5].try_into().unwrap());
                let lo = f64::from_le_bytes(rec.value[..8].try_into().unwrap());
                let hi = f64::from_le_bytes(rec.value[8..16].try_into().unwrap());
                let chain = AnchorChain::zeros_covering(TrajectoryId(tid), cfg.anchor_spacing, lo, hi)
                    .map_err(|e| PipelineError::Input(format!("trajectory {tid}: {e}")))?;
                chains.push(chain);
            }
        }
    }
    tiles.sort_by_key(|t| t.key);
    let index = serde_json::to_string_pretty(&tiles).expect("tile index serializes");
    write_atomic(&work.tile_index(), index.as_bytes())?;
    let mut corrections = CorrectionsSet::new(chains);
    corrections.provenance = manifest_hash(&work.tiles_dir())?;
    corrections.write(&work.corrections(0))?;
    info!(
        "preprocess: {} tiles, {} trajectories, {} anchors",
        tiles.len(),
        corrections.chains.len(),
        corrections.anchor_count()
    );
    Ok(Preprocessed { tiles, corrections })
}

// ----------------------------------------------------------- estimation

/// Per-tile counters, merged across tiles by the reducer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TileStats {
    considered: u64,
    accepted: u64,
    rejected: BTreeMap<String, u64>,
    dropped: u64,
    lsm_count: u64,
    residuals: Histogram,
    pixel_std: Histogram,
}

impl TileStats {
    fn new(bin: f64) -> Self {
        Self {
            considered: 0,
            accepted: 0,
            rejected: BTreeMap::new(),
            dropped: 0,
            lsm_count: 0,
            residuals: Histogram::new(bin),
            pixel_std: Histogram::new(bin),
        }
    }

    fn merge(&mut self, o: &TileStats) {
        self.considered += o.considered;
        self.accepted += o.accepted;
        for (k, v) in &o.rejected {
            *self.rejected.entry(k.clone()).or_default() += v;
        }
        self.dropped += o.dropped;
        self.lsm_count += o.lsm_count;
        self.residuals.merge(&o.residuals);
        self.pixel_std.merge(&o.pixel_std);
    }
}

fn rejection_name(r: &Rejection) -> &'static str {
    match r {
        Rejection::EmptyCell => "empty_cell",
        Rejection::NoCompatibleLsm => "no_compatible_lsm",
        Rejection::OutsideRaster => "outside_raster",
        Rejection::LowConfidence => "low_confidence",
        Rejection::SelfOnly => "self_only",
        Rejection::BeyondThreshold(_) => "beyond_threshold",
    }
}

#[derive(Debug, Clone, Copy)]
struct IterationParams<'a> {
    cfg: &'a PipelineConfig,
    step: PlanStep,
    dump_maps: bool,
}

fn estimate_map(split: &InputSplit, ctx: &mut MapContext, p: IterationParams) -> std::result::Result<(), TaskError> {
    let cfg = p.cfg;
    let corr = CorrectionsSet::from_bytes(ctx.broadcast()?)?;
    let tile = TileFile::read(&split.path)?;
    let size = cfg.tiles.size;
    let mut stats = TileStats::new(cfg.histogram_bin);
    let mut kept = Vec::new();
    for rec in &tile.records {
        let chain = corr
            .chain(rec.trajectory_id)
            .ok_or_else(|| task_err(format!("tile {:?} references unknown trajectory {}", tile.key, rec.trajectory_id.0)))?;
        let interp = interpolate_correction(chain, rec.arc)?;
        let pc = corrected_point(&interp.corr, rec);
        let home = TileKey::of(&pc, size);
        if home != tile.key {
            let origin = TileKey::of(&rec.xyz, size);
            if origin == tile.key && !emit_tiles(rec.xyz.x, rec.xyz.y, size, cfg.tiles.overlap).contains(&home) {
                stats.dropped += 1;
            }
            continue;
        }
        if rec.segment_id.is_none() || !rec.normal.iter().all(|x| x.is_finite()) {
            continue;
        }
        let n = crate::geom::rotate_direction(&interp.corr, &rec.normal);
        kept.push((rec, pc, n, interp));
    }
    let mut map = LatentMap::new(MapParams {
        cell_size: cfg.map.cell_size,
        pitch: p.step.pitch,
        normal_gate_deg: cfg.map.normal_gate_deg,
        sigma_dist: cfg.noise.sigma_dist,
        layer_gap: p.step.threshold,
    });
    for (rec, pc, n, _) in &kept {
        map.insert(pc, n, point_id(rec))?;
    }
    map.estimate();
    let mut acc = BlockAccumulator::new();
    for (rec, pc, n, interp) in &kept {
        stats.considered += 1;
        match map.correspond(pc, n, p.step.threshold, point_id(rec))? {
            Ok(c) => {
                stats.accepted += 1;
                stats.residuals.add(c.distance);
                for b in distance_blocks(&c.target, c.distance, &rec.ray(), interp, &cfg.noise) {
                    acc.add(&b);
                }
            }
            Err(r) => *stats.rejected.entry(rejection_name(&r).to_string()).or_default() += 1,
        }
    }
    stats.lsm_count = map.lsm_count() as u64;
    stats.pixel_std.extend(map.pixel_stds());
    let blocks = acc.blocks();
    for tid in acc.trajectories() {
        let mut buf = Vec::new();
        for b in blocks.iter().filter(|b| b.trajectory_id == tid) {
            b.encode_into(&mut buf);
        }
        ctx.emit(&traj_key_bytes(tid.0, KEY_TRAJ), buf)?;
    }
    ctx.emit(&[KEY_STATS], serde_json::to_vec(&stats)?)?;
    if p.dump_maps {
        ctx.emit(&tile_key_bytes(tile.key, KEY_DUMP), map.dump_csv().into_bytes())?;
    }
    Ok(())
}

const UPDATE_OK: u8 = 0;
const UPDATE_SINGULAR: u8 = 1;
const UPDATE_FIXED: u8 = 2;

fn estimate_reduce(
    key: &[u8],
    values: &mut Values,
    ctx: &mut ReduceContext,
    p: IterationParams,
) -> std::result::Result<(), TaskError> {
    match key.first() {
        Some(&KEY_TRAJ) => {
            let tid = TrajectoryId(u32::from_be_bytes(key[1..5].try_into()?));
            let mut acc = BlockAccumulator::new();
            for v in values {
                acc.extend(&NormalBlock::decode_all(&v)?);
            }
            if p.cfg.fixed_trajectories.contains(&tid.0) {
                ctx.emit(key, &[UPDATE_FIXED])?;
                return Ok(());
            }
            let blocks = acc.blocks();
            let mut sys = ChainSystem::assemble(tid, &blocks)?;
            let n = sys.len() as u32;
            for b in prior_blocks(tid, sys.first, n, &p.cfg.noise)
                .iter()
                .chain(&smooth_blocks(tid, sys.first, n, &p.cfg.noise))
            {
                sys.add(b);
            }
            let corr = CorrectionsSet::from_bytes(ctx.broadcast()?)?;
            let chain = corr.chain(tid).ok_or_else(|| task_err("trajectory missing from broadcast"))?;
            linearize_at(&mut sys, &chain.anchors, &p.cfg.noise)?;
            let mut out = Vec::new();
            match solve(&sys) {
                Ok(sol) => {
                    out.push(UPDATE_OK);
                    out.extend_from_slice(&sol.first.to_le_bytes());
                    out.extend_from_slice(&(sol.x.len() as u32).to_le_bytes());
                    for (x, c) in sol.x.iter().zip(&sol.cov) {
                        for v in x.iter().copied().chain((0..6).map(|k| c[(k, k)].max(0.0).sqrt())) {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
                Err(SolveError::Singular { anchor, .. }) => {
                    out.push(UPDATE_SINGULAR);
                    out.extend_from_slice(&anchor.to_le_bytes());
                }
                Err(e) => return Err(e.into()),
            }
            ctx.emit(key, &out)?;
        }
        Some(&KEY_STATS) => {
            let mut total: Option<TileStats> = None;
            for v in values {
                let s: TileStats = serde_json::from_slice(&v)?;
                match &mut total {
                    Some(t) => t.merge(&s),
                    None => total = Some(s),
                }
            }
            let total = total.unwrap_or_else(|| TileStats::new(p.cfg.histogram_bin));
            ctx.emit(key, &serde_json::to_vec(&total)?)?;
        }
        Some(&KEY_DUMP) => {
            let tile = TileKey::from_bytes(&key[1..]).ok_or_else(|| task_err("bad tile key"))?;
            let name = format!("map_{}_{}.csv", tile.tx, tile.ty);
            ctx.write_side_file(&name, |w| {
                for v in values {
                    w.write_all(&v)?;
                }
                Ok(())
            })?;
        }
        _ => return Err(task_err("unknown key")),
    }
    Ok(())
}

/// Prior and smoothness residuals are on the accumulated correction, so the
/// normal equations for the increment pick up `-P c` and `-W (c_i - c_j)`.
fn linearize_at(sys: &mut ChainSystem, current: &[PoseCorrection], noise: &NoiseConfig) -> std::result::Result<(), TaskError> {
    let first = sys.first as usize;
    let c: Vec<Vec6> = current
        .get(first..first + sys.len())
        .ok_or_else(|| task_err("block range outside chain"))?
        .iter()
        .map(|a| a.to_vec6())
        .collect();
    let prior = noise.prior_information();
    let smooth = noise.smooth_information();
    for k in 0..c.len() {
        sys.b[k] -= prior * c[k];
        if k + 1 < c.len() {
            let d = smooth * (c[k] - c[k + 1]);
            sys.b[k] -= d;
            sys.b[k + 1] += d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryUpdate {
    pub trajectory_id: u32,
    pub fixed: bool,
    pub anchors_updated: u32,
    pub max_translation_step: f64,
    pub max_rotation_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelStdStats {
    pub pixels: u64,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

/// Per-iteration statistics manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u32,
    pub threshold: f64,
    pub pitch: f64,
    pub points_considered: u64,
    pub points_used: u64,
    pub rejected: BTreeMap<String, u64>,
    pub points_dropped: u64,
    pub residual_mean: f64,
    pub residual_std: f64,
    pub lsm_count: u64,
    pub pixel_std: PixelStdStats,
    pub trajectories: Vec<TrajectoryUpdate>,
    pub manifest_sha256: String,
    pub histogram_file: Option<String>,
}

#[derive(Debug, Clone)]
pub struct IterationResult {
    pub corrections: CorrectionsSet,
    pub stats: IterationStats,
    pub residuals: Histogram,
    pub output_dir: PathBuf,
}

fn tile_splits(tiles: &[TileEntry]) -> Vec<InputSplit> {
    tiles
        .iter()
        .enumerate()
        .map(|(i, t)| InputSplit { id: i as u32, path: t.file.clone() })
        .collect()
}

fn run_iteration(
    tiles: &[TileEntry],
    current: &CorrectionsSet,
    params: IterationParams,
    name: &str,
    out_dir: &Path,
    scratch: &Path,
) -> Result<IterationResult> {
    let cfg = params.cfg;
    let mut spec = job(cfg, name, tile_splits(tiles), scratch, out_dir);
    spec.broadcast = Some(current.to_bytes());
    let out = engine::run_job(
        &spec,
        cfg.workers,
        |s, ctx| estimate_map(s, ctx, params),
        |k, v, ctx| estimate_reduce(k, v, ctx, params),
    )?;
    let mut next = current.clone();
    next.iteration = current.iteration + 1;
    next.provenance = manifest_hash(out_dir)?;
    let mut tile_stats = TileStats::new(cfg.histogram_bin);
    let mut updates = Vec::new();
    for rec in out.records()? {
        match rec.key[0] {
            KEY_STATS => tile_stats = serde_json::from_slice(&rec.value).map_err(|e| PipelineError::Input(e.to_string()))?,
            KEY_TRAJ => {
                let tid = u32::from_be_bytes(rec.key[1..5].try_into().unwrap());
                let c = next
                    .chains
                    .binary_search_by_key(&TrajectoryId(tid), |c| c.trajectory_id)
                    .map_err(|_| PipelineError::Input(format!("update for unknown trajectory {tid}")))?;
                updates.push(apply_update(&mut next, c, tid, &rec.value)?);
            }
            _ => {}
        }
    }
    let q = |x: f64| tile_stats.pixel_std.quantile(x).unwrap_or(0.0);
    let stats = IterationStats {
        iteration: next.iteration,
        threshold: params.step.threshold,
        pitch: params.step.pitch,
        points_considered: tile_stats.considered,
        points_used: tile_stats.accepted,
        rejected: tile_stats.rejected.clone(),
        points_dropped: tile_stats.dropped,
        residual_mean: tile_stats.residuals.mean,
        residual_std: tile_stats.residuals.std(),
        lsm_count: tile_stats.lsm_count,
        pixel_std: PixelStdStats {
            pixels: tile_stats.pixel_std.count,
            mean: tile_stats.pixel_std.mean,
            median: q(0.5),
            p90: q(0.9),
        },
        trajectories: updates,
        manifest_sha256: next.provenance_hex(),
        histogram_file: None,
    };
    if stats.points_dropped > 0 {
        warn!("iteration {}: {} points left every tile they were routed to", stats.iteration, stats.points_dropped);
    }
    Ok(IterationResult {
        corrections: next,
        stats,
        residuals: tile_stats.residuals,
        output_dir: out_dir.to_path_buf(),
    })
}

fn apply_update(set: &mut CorrectionsSet, c: usize, tid: u32, v: &[u8]) -> Result<TrajectoryUpdate> {
    let bad = || PipelineError::Input(format!("malformed update for trajectory {tid}"));
    let mut u = TrajectoryUpdate {
        trajectory_id: tid,
        fixed: false,
        anchors_updated: 0,
        max_translation_step: 0.0,
        max_rotation_step: 0.0,
    };
    match v.first() {
        Some(&UPDATE_FIXED) => u.fixed = true,
        Some(&UPDATE_SINGULAR) => {
            let anchor = u32::from_le_bytes(v.get(1..5).ok_or_else(bad)?.try_into().unwrap());
            return Err(PipelineError::SingularChain { trajectory: tid, anchor });
        }
        Some(&UPDATE_OK) => {
            let first = u32::from_le_bytes(v.get(1..5).ok_or_else(bad)?.try_into().unwrap()) as usize;
            let n = u32::from_le_bytes(v.get(5..9).ok_or_else(bad)?.try_into().unwrap()) as usize;
            let body = v.get(9..).ok_or_else(bad)?;
            if body.len() != n * 96 || first + n > set.chains[c].len() {
                return Err(bad());
            }
            let f = |k: usize| f64::from_le_bytes(body[8 * k..8 * k + 8].try_into().unwrap());
            let mut staged = Vec::with_capacity(n);
            for a in 0..n {
                let x = Vec6::from_fn(|k, _| f(12 * a + k));
                let std: [f64; 6] = std::array::from_fn(|k| f(12 * a + 6 + k));
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(PipelineError::NonFinite { trajectory: tid });
                }
                staged.push((x, std));
            }
            for (a, (x, std)) in staged.into_iter().enumerate() {
                let inc = PoseCorrection::from_vec6(&x);
                u.max_translation_step = u.max_translation_step.max(inc.t.norm());
                u.max_rotation_step = u.max_rotation_step.max(inc.theta.norm());
                set.chains[c].anchors[first + a] += inc;
                set.std[c][first + a] = std;
            }
            u.anchors_updated = n as u32;
        }
        _ => return Err(bad()),
    }
    Ok(u)
}

/// One alternating step: map estimation, correspondence and pose update.
pub fn estimate_iteration(
    work: &WorkDir,
    tiles: &[TileEntry],
    current: &CorrectionsSet,
    step: PlanStep,
    cfg: &PipelineConfig,
) -> Result<IterationResult> {
    let iteration = current.iteration + 1;
    let params = IterationParams { cfg, step, dump_maps: false };
    let mut res = run_iteration(
        tiles,
        current,
        params,
        &format!("estimate-{iteration:03}"),
        &work.iteration_dir(iteration),
        &work.scratch,
    )?;
    let hist_path = work.histogram(iteration);
    write_atomic(&hist_path, res.residuals.to_csv().as_bytes())?;
    res.stats.histogram_file = hist_path.file_name().map(|n| n.to_string_lossy().into_owned());
    let stats_json = serde_json::to_string_pretty(&res.stats).expect("stats serialize");
    write_atomic(&work.stats(iteration), stats_json.as_bytes())?;
    res.corrections.write(&work.corrections(iteration))?;
    info!(
        "iteration {iteration}: threshold {:.4} pitch {:.3} used {} of {} residual std {:.2} mm",
        step.threshold,
        step.pitch,
        res.stats.points_used,
        res.stats.points_considered,
        res.stats.residual_std * 1e3
    );
    Ok(res)
}

/// Runs every plan step from the initial corrections and writes the final
/// corrections file.
pub fn run_schedule(work: &WorkDir, cfg: &PipelineConfig) -> Result<Vec<IterationStats>> {
    cfg.validate()?;
    let tiles = read_tile_index(work)?;
    let mut current = CorrectionsSet::read(&work.corrections(0))?;
    let mut all = Vec::with_capacity(cfg.plan.len());
    for step in &cfg.plan.steps {
        let res = estimate_iteration(work, &tiles, &current, *step, cfg)?;
        current = res.corrections;
        all.push(res.stats);
    }
    current.write(&work.final_corrections())?;
    Ok(all)
}

/// Map-only diagnostic pass with fixed corrections: residual histogram and
/// per-tile map dumps (`map_<tx>_<ty>.csv`) under the evaluation directory.
pub fn evaluate(work: &WorkDir, corrections: &CorrectionsSet, step: PlanStep, cfg: &PipelineConfig) -> Result<IterationResult> {
    let tiles = read_tile_index(work)?;
    let params = IterationParams { cfg, step, dump_maps: true };
    let mut fixed = cfg.clone();
    fixed.fixed_trajectories = corrections.chains.iter().map(|c| c.trajectory_id.0).collect();
    let params = IterationParams { cfg: &fixed, ..params };
    let mut res = run_iteration(&tiles, corrections, params, "evaluate", &work.evaluation_dir(), &work.scratch)?;
    res.corrections = corrections.clone();
    Ok(res)
}

pub fn map_dumps(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(PipelineError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("map_") && n.ends_with(".csv"))
        })
        .collect();
    v.sort();
    Ok(v)
}

// --------------------------------------------------------------- export

/// Corrected points of all tiles, each point once, in strip/raster order.
pub fn corrected_points(tiles: &[TileEntry], corrections: &CorrectionsSet, tile_size: f64) -> Result<Vec<(PointRecord, Vec3)>> {
    let mut out = Vec::new();
    for t in tiles {
        let tile = TileFile::read(&t.file)?;
        for rec in tile.records {
            if TileKey::of(&rec.xyz, tile_size) != tile.key {
                continue;
            }
            let chain = corrections
                .chain(rec.trajectory_id)
                .ok_or_else(|| PipelineError::Input(format!("no corrections for trajectory {}", rec.trajectory_id)))?;
            let interp = interpolate_correction(chain, rec.arc).map_err(|e| PipelineError::Input(e.to_string()))?;
            let p = corrected_point(&interp.corr, &rec);
            out.push((rec, p));
        }
    }
    out.sort_by_key(|(r, _)| r.raster_key());
    Ok(out)
}

pub fn export_ply(work: &WorkDir, corrections: &CorrectionsSet, cfg: &PipelineConfig, out: &Path) -> Result<usize> {
    let tiles = read_tile_index(work)?;
    let pts: Vec<PlyPoint> = corrected_points(&tiles, corrections, cfg.tiles.size)?
        .into_iter()
        .map(|(r, xyz)| match r.segment_id {
            Some(s) => PlyPoint {
                xyz,
                rgb: diagnostics::segment_color((r.strip_id.0 as u64) << 32 | s as u64),
                segment: s,
            },
            None => PlyPoint { xyz, rgb: [128, 128, 128], segment: u32::MAX },
        })
        .collect();
    let mut buf = Vec::with_capacity(pts.len() * 31 + 256);
    diagnostics::write_ply(&mut buf, &pts).map_err(PipelineError::io(out))?;
    write_atomic(out, &buf)?;
    Ok(pts.len())
}

// ---------------------------------------------------------------- truth

/// Pairs every anchor with the true correction and path position.
pub fn compare_with_truth(
    corrections: &CorrectionsSet,
    paths: &[TrajectoryPath],
    truth: &BTreeMap<u32, Vec<TruthSample>>,
    skip: &BTreeSet<u32>,
) -> Vec<AnchorComparison> {
    let mut rows = Vec::new();
    for c in &corrections.chains {
        let id = c.trajectory_id.0;
        if skip.contains(&id) {
            continue;
        }
        let (Some(t), Some(path)) = (truth.get(&id), paths.iter().find(|p| p.trajectory_id.0 == id)) else {
            continue;
        };
        if t.is_empty() {
            continue;
        }
        for (k, a) in c.anchors.iter().enumerate() {
            let arc = c.arc_of(k);
            rows.push(AnchorComparison {
                trajectory_id: c.trajectory_id,
                arc,
                position: path.pose_at(arc).0,
                estimated: *a,
                truth: truth_at(t, arc),
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests;
