//! Raster-structured scan strips and the per-point records derived from them.
//!
//! A strip is a `rows x cols` raster: one column per scanner profile (time),
//! one row per measurement within a revolution. Empty cells are returns that
//! never came back.
//!
//! The `.strip` file layout (all little-endian) is:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "STRP"
//! 4       4     version (u32, currently 1)
//! 8       4     strip_id (u32)
//! 12      4     scanner_id (u32)
//! 16      4     rows (u32)
//! 20      4     cols (u32)
//! 24      4     trajectory_id (u32)
//! 28      4     reserved, zero
//! 32      B     presence bitmap, B = ceil(rows*cols/8), bit k (LSB first) = cell k
//! 32+B    56*N  present cells in row-major order: xyz, t0 (3 x f64 each), arc (f64)
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::geom::{RayMeasurement, TrajectoryId, Vec3};

pub const STRIP_MAGIC: &[u8; 4] = b"STRP";
pub const STRIP_VERSION: u32 = 1;
pub const DEFAULT_ROWS: usize = 3000;
/// Longer acquisitions must be cut into several strips.
pub const MAX_COLS: usize = 1 << 20;

const HEADER_LEN: usize = 32;
const CELL_LEN: usize = 56;

#[derive(Debug, Error)]
pub enum StripError {
    #[error("not a strip file (bad magic)")]
    BadMagic,
    #[error("unsupported strip version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated strip file: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("strip file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid strip dimensions {rows}x{cols}")]
    InvalidDims { rows: usize, cols: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct StripId(pub u32);

/// One measured return in its raster cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StripPoint {
    pub xyz: Vec3,
    pub t0: Vec3,
    pub arc: f64,
    pub row: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanStrip {
    pub strip_id: StripId,
    pub scanner_id: u32,
    pub trajectory_id: TrajectoryId,
    pub rows: usize,
    pub cols: usize,
    cells: Vec<Option<StripPoint>>,
}

impl ScanStrip {
    pub fn new(
        strip_id: StripId,
        scanner_id: u32,
        trajectory_id: TrajectoryId,
        rows: usize,
        cols: usize,
    ) -> Result<Self, StripError> {
        if rows == 0 || cols == 0 || cols > MAX_COLS || rows > u32::MAX as usize {
            return Err(StripError::InvalidDims { rows, cols });
        }
        Ok(Self {
            strip_id,
            scanner_id,
            trajectory_id,
            rows,
            cols,
            cells: vec![None; rows * cols],
        })
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<&StripPoint> {
        self.cells[self.index(row, col)].as_ref()
    }

    pub fn cell(&self, idx: usize) -> Option<&StripPoint> {
        self.cells[idx].as_ref()
    }

    /// Stores the measurement at `(row, col)`; the point's own indices are
    /// overwritten to match.
    pub fn set(&mut self, row: usize, col: usize, xyz: Vec3, t0: Vec3, arc: f64) {
        let idx = self.index(row, col);
        self.cells[idx] = Some(StripPoint {
            xyz,
            t0,
            arc,
            row: row as u32,
            col: col as u32,
        });
    }

    pub fn clear(&mut self, row: usize, col: usize) {
        let idx = self.index(row, col);
        self.cells[idx] = None;
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn point_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Present points in row-major order.
    pub fn points(&self) -> impl Iterator<Item = &StripPoint> {
        self.cells.iter().flatten()
    }

    pub fn points_mut(&mut self) -> impl Iterator<Item = &mut StripPoint> {
        self.cells.iter_mut().flatten()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.point_count();
        let bitmap_len = self.cells.len().div_ceil(8);
        let mut out = Vec::with_capacity(HEADER_LEN + bitmap_len + n * CELL_LEN);
        out.extend_from_slice(STRIP_MAGIC);
        for v in [
            STRIP_VERSION,
            self.strip_id.0,
            self.scanner_id,
            self.rows as u32,
            self.cols as u32,
            self.trajectory_id.0,
            0,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut bitmap = vec![0u8; bitmap_len];
        for (k, c) in self.cells.iter().enumerate() {
            if c.is_some() {
                bitmap[k / 8] |= 1 << (k % 8);
            }
        }
        out.extend_from_slice(&bitmap);
        for p in self.points() {
            for v in [p.xyz.x, p.xyz.y, p.xyz.z, p.t0.x, p.t0.y, p.t0.z, p.arc] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, StripError> {
        if buf.len() < 4 || &buf[..4] != STRIP_MAGIC {
            return Err(StripError::BadMagic);
        }
        if buf.len() < HEADER_LEN {
            return Err(StripError::Truncated {
                expected: HEADER_LEN,
                actual: buf.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != STRIP_VERSION {
            return Err(StripError::UnsupportedVersion(version));
        }
        let rows = u32_at(16) as usize;
        let cols = u32_at(20) as usize;
        let mut strip = ScanStrip::new(
            StripId(u32_at(8)),
            u32_at(12),
            TrajectoryId(u32_at(24)),
            rows,
            cols,
        )?;
        let ncells = rows * cols;
        let bitmap_len = ncells.div_ceil(8);
        if buf.len() < HEADER_LEN + bitmap_len {
            return Err(StripError::Truncated {
                expected: HEADER_LEN + bitmap_len,
                actual: buf.len(),
            });
        }
        let bitmap = &buf[HEADER_LEN..HEADER_LEN + bitmap_len];
        let present = bitmap.iter().map(|b| b.count_ones() as usize).sum::<usize>();
        let expected = HEADER_LEN + bitmap_len + present * CELL_LEN;
        if buf.len() < expected {
            return Err(StripError::Truncated {
                expected,
                actual: buf.len(),
            });
        }
        if buf.len() > expected {
            return Err(StripError::TrailingBytes(buf.len() - expected));
        }
        let mut off = HEADER_LEN + bitmap_len;
        let f64_at = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        for k in 0..ncells {
            if bitmap[k / 8] & (1 << (k % 8)) == 0 {
                continue;
            }
            let v: [f64; 7] = std::array::from_fn(|i| f64_at(off + 8 * i));
            off += CELL_LEN;
            strip.set(
                k / cols,
                k % cols,
                Vec3::new(v[0], v[1], v[2]),
                Vec3::new(v[3], v[4], v[5]),
                v[6],
            );
        }
        Ok(strip)
    }
}

pub fn write_strip(strip: &ScanStrip, path: &Path) -> Result<(), StripError> {
    let tmp = path.with_extension("strip.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&strip.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_strip(path: &Path) -> Result<ScanStrip, StripError> {
    ScanStrip::from_bytes(&fs::read(path)?)
}

/// Scan-head origin plus ray for a strip point.
pub fn ray_of(point: &StripPoint, trajectory_id: TrajectoryId) -> RayMeasurement {
    RayMeasurement {
        t0: point.t0,
        r: point.xyz - point.t0,
        arc: point.arc,
        trajectory_id,
    }
}

/// A segmented point as it flows through tiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub xyz: Vec3,
    pub t0: Vec3,
    pub arc: f64,
    pub trajectory_id: TrajectoryId,
    pub strip_id: StripId,
    pub segment_id: Option<u32>,
    pub row: u32,
    pub col: u32,
    pub normal: Vec3,
}

impl PointRecord {
    pub const ENCODED_LEN: usize = 100;

    pub fn ray(&self) -> RayMeasurement {
        RayMeasurement {
            t0: self.t0,
            r: self.xyz - self.t0,
            arc: self.arc,
            trajectory_id: self.trajectory_id,
        }
    }

    /// Sort key recovering the raster position.
    pub fn raster_key(&self) -> (u32, u32, u32) {
        (self.strip_id.0, self.row, self.col)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        for v in [self.xyz.x, self.xyz.y, self.xyz.z, self.t0.x, self.t0.y, self.t0.z, self.arc] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [
            self.trajectory_id.0,
            self.strip_id.0,
            self.segment_id.unwrap_or(u32::MAX),
            self.row,
            self.col,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.normal.x, self.normal.y, self.normal.z] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn decode(buf: &[u8]) -> Option<Self> {
        if buf.len() < Self::ENCODED_LEN {
            return None;
        }
        let f = |i: usize| f64::from_le_bytes(buf[i..i + 8].try_into().unwrap());
        let u = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let seg = u(64);
        Some(Self {
            xyz: Vec3::new(f(0), f(8), f(16)),
            t0: Vec3::new(f(24), f(32), f(40)),
            arc: f(48),
            trajectory_id: TrajectoryId(u(56)),
            strip_id: StripId(u(60)),
            segment_id: (seg != u32::MAX).then_some(seg),
            row: u(68),
            col: u(72),
            normal: Vec3::new(f(76), f(84), f(92)),
        })
    }

    /// Decodes a concatenation of records.
    pub fn decode_all(buf: &[u8]) -> Option<Vec<Self>> {
        if buf.len() % Self::ENCODED_LEN != 0 {
            return None;
        }
        buf.chunks_exact(Self::ENCODED_LEN).map(Self::decode).collect()
    }
}
