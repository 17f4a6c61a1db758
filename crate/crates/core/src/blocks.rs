//! Normal-equation blocks for one trajectory's anchor chain.
//!
//! Three sources contribute: point-to-plane observations (coupling the two
//! anchors around the point's arc), a zero-mean prior on every anchor, and a
//! smoothness term on each consecutive anchor pair. All are expressed as 6x6
//! information blocks plus right-hand sides for the current increment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{residual_jacobian, Interpolated, Mat6, PlaneTarget, RayMeasurement, TrajectoryId, Vec6};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sigma_dist: f64,
    pub sigma_prior: [f64; 6],
    pub sigma_smooth: [f64; 6],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_dist: 0.005,
            sigma_prior: [0.02, 0.02, 0.05, 9e-5, 9e-5, 2.6e-4],
            sigma_smooth: [0.002, 0.002, 0.002, 2e-5, 2e-5, 2e-5],
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BlockError {
    #[error("noise sigmas must be finite and strictly positive")]
    InvalidNoise,
    #[error("block record truncated or malformed")]
    Malformed,
    #[error("unsupported block record version {0}")]
    Version(u16),
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), BlockError> {
        let ok = |s: f64| s.is_finite() && s > 0.0;
        if ok(self.sigma_dist) && self.sigma_prior.iter().all(|&s| ok(s)) && self.sigma_smooth.iter().all(|&s| ok(s)) {
            Ok(())
        } else {
            Err(BlockError::InvalidNoise)
        }
    }

    pub fn prior_information(&self) -> Mat6 {
        Mat6::from_diagonal(&Vec6::from_iterator(self.sigma_prior.iter().map(|s| 1.0 / (s * s))))
    }

    pub fn smooth_information(&self) -> Mat6 {
        Mat6::from_diagonal(&Vec6::from_iterator(self.sigma_smooth.iter().map(|s| 1.0 / (s * s))))
    }
}

/// `Diag` is block `(i, i)`; `OffDiag` is block `(i, i + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    Diag,
    OffDiag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalBlock {
    pub trajectory_id: TrajectoryId,
    pub i: u32,
    pub kind: BlockKind,
    pub m: Mat6,
    /// Zero for off-diagonal blocks.
    pub rhs: Vec6,
}

pub const BLOCK_VERSION: u16 = 1;
/// trajectory_id u32, i u32, version u16, kind u16, 36 + 6 f64.
pub const BLOCK_RECORD_LEN: usize = 12 + 42 * 8;

impl NormalBlock {
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.trajectory_id.0.to_le_bytes());
        out.extend_from_slice(&self.i.to_le_bytes());
        out.extend_from_slice(&BLOCK_VERSION.to_le_bytes());
        let kind: u16 = match self.kind {
            BlockKind::Diag => 0,
            BlockKind::OffDiag => 1,
        };
        out.extend_from_slice(&kind.to_le_bytes());
        // row-major
        for r in 0..6 {
            for c in 0..6 {
                out.extend_from_slice(&self.m[(r, c)].to_le_bytes());
            }
        }
        for v in self.rhs.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Self, BlockError> {
        if buf.len() != BLOCK_RECORD_LEN {
            return Err(BlockError::Malformed);
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(buf[o..o + 2].try_into().unwrap());
        let f_at = |k: usize| f64::from_le_bytes(buf[12 + 8 * k..20 + 8 * k].try_into().unwrap());
        let version = u16_at(8);
        if version != BLOCK_VERSION {
            return Err(BlockError::Version(version));
        }
        let kind = match u16_at(10) {
            0 => BlockKind::Diag,
            1 => BlockKind::OffDiag,
            _ => return Err(BlockError::Malformed),
        };
        Ok(Self {
            trajectory_id: TrajectoryId(u32_at(0)),
            i: u32_at(4),
            kind,
            m: Mat6::from_fn(|r, c| f_at(r * 6 + c)),
            rhs: Vec6::from_fn(|r, _| f_at(36 + r)),
        })
    }

    pub fn decode_all(buf: &[u8]) -> Result<Vec<Self>, BlockError> {
        if buf.len() % BLOCK_RECORD_LEN != 0 {
            return Err(BlockError::Malformed);
        }
        buf.chunks_exact(BLOCK_RECORD_LEN).map(Self::decode).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(self.rhs.iter()).all(|x| x.is_finite())
    }
}

/// Blocks of one point-to-plane observation with current residual `distance`.
///
/// Anchors with zero interpolation weight receive no block.
pub fn distance_blocks(
    target: &PlaneTarget,
    distance: f64,
    m: &RayMeasurement,
    interp: &Interpolated,
    noise: &NoiseConfig,
) -> Vec<NormalBlock> {
    let (ji, jn) = residual_jacobian(target, m, interp.alpha);
    let p = 1.0 / (noise.sigma_dist * noise.sigma_dist);
    let i = interp.index as u32;
    let tid = m.trajectory_id;
    let mut out = Vec::with_capacity(3);
    let lo = interp.alpha < 1.0;
    let hi = interp.alpha > 0.0;
    if lo {
        out.push(NormalBlock {
            trajectory_id: tid,
            i,
            kind: BlockKind::Diag,
            m: ji * ji.transpose() * p,
            rhs: ji * (p * distance),
        });
    }
    if hi {
        out.push(NormalBlock {
            trajectory_id: tid,
            i: i + 1,
            kind: BlockKind::Diag,
            m: jn * jn.transpose() * p,
            rhs: jn * (p * distance),
        });
    }
    if lo && hi {
        out.push(NormalBlock {
            trajectory_id: tid,
            i,
            kind: BlockKind::OffDiag,
            m: ji * jn.transpose() * p,
            rhs: Vec6::zeros(),
        });
    }
    out
}

/// Prior blocks for anchors `first .. first + n`.
pub fn prior_blocks(trajectory_id: TrajectoryId, first: u32, n: u32, noise: &NoiseConfig) -> Vec<NormalBlock> {
    let info = noise.prior_information();
    (first..first + n)
        .map(|i| NormalBlock {
            trajectory_id,
            i,
            kind: BlockKind::Diag,
            m: info,
            rhs: Vec6::zeros(),
        })
        .collect()
}

/// Smoothness blocks for each consecutive pair in `first .. first + n`.
pub fn smooth_blocks(trajectory_id: TrajectoryId, first: u32, n: u32, noise: &NoiseConfig) -> Vec<NormalBlock> {
    let w = noise.smooth_information();
    let mut out = Vec::with_capacity(3 * n.saturating_sub(1) as usize);
    for i in first..(first + n).saturating_sub(1) {
        for (j, kind, m) in [(i, BlockKind::Diag, w), (i + 1, BlockKind::Diag, w), (i, BlockKind::OffDiag, -w)] {
            out.push(NormalBlock {
                trajectory_id,
                i: j,
                kind,
                m,
                rhs: Vec6::zeros(),
            });
        }
    }
    out
}

/// Sums blocks by `(trajectory, anchor, kind)` in insertion order per key.
#[derive(Debug, Clone, Default)]
pub struct BlockAccumulator {
    sums: BTreeMap<(TrajectoryId, u32, BlockKind), (Mat6, Vec6)>,
}

impl BlockAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, b: &NormalBlock) {
        let e = self
            .sums
            .entry((b.trajectory_id, b.i, b.kind))
            .or_insert((Mat6::zeros(), Vec6::zeros()));
        e.0 += b.m;
        e.1 += b.rhs;
    }

    pub fn extend<'a>(&mut self, blocks: impl IntoIterator<Item = &'a NormalBlock>) {
        for b in blocks {
            self.add(b);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    /// Summed blocks in key order.
    pub fn blocks(&self) -> Vec<NormalBlock> {
        self.sums
            .iter()
            .map(|(&(trajectory_id, i, kind), &(m, rhs))| NormalBlock {
                trajectory_id,
                i,
                kind,
                m,
                rhs,
            })
            .collect()
    }

    pub fn trajectories(&self) -> Vec<TrajectoryId> {
        let mut t: Vec<TrajectoryId> = self.sums.keys().map(|k| k.0).collect();
        t.dedup();
        t
    }

    pub fn blocks_of(&self, trajectory_id: TrajectoryId) -> Vec<NormalBlock> {
        self.blocks().into_iter().filter(|b| b.trajectory_id == trajectory_id).collect()
    }
}
