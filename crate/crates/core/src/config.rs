//! Pipeline configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::NoiseConfig;
use crate::segmentation::{RansacParams, SegmentParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// One alternating step: correspondence threshold and LSM pixel pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub threshold: f64,
    pub pitch: f64,
}

/// Ordered schedule of (threshold, pitch) steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IterationPlan {
    pub steps: Vec<PlanStep>,
}

/// Thresholds may not drop below this multiple of the step's pitch.
pub const THRESHOLD_PITCH_FLOOR: f64 = 0.5;

impl Default for IterationPlan {
    /// Two coarse steps, twelve geometrically tapering steps from 0.2 m to
    /// 3 cm at 2 cm pitch, then four fine steps.
    fn default() -> Self {
        let mut steps = vec![PlanStep { threshold: 0.3, pitch: 0.1 }; 2];
        let ratio = (0.03f64 / 0.2).powf(1.0 / 11.0);
        steps.extend((0..12).map(|k| PlanStep {
            threshold: 0.2 * ratio.powi(k),
            pitch: 0.02,
        }));
        steps.extend([
            PlanStep { threshold: 0.02, pitch: 0.02 },
            PlanStep { threshold: 0.01, pitch: 0.01 },
            PlanStep { threshold: 0.007, pitch: 0.01 },
            PlanStep { threshold: 0.007, pitch: 0.01 },
        ]);
        Self { steps }
    }
}

impl IterationPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (k, s) in self.steps.iter().enumerate() {
            if !(s.threshold > 0.0 && s.threshold.is_finite() && s.pitch > 0.0 && s.pitch.is_finite()) {
                return Err(ConfigError::Invalid(format!("plan step {k}: threshold and pitch must be positive")));
            }
            if s.threshold < THRESHOLD_PITCH_FLOOR * s.pitch {
                return Err(ConfigError::Invalid(format!(
                    "plan step {k}: threshold {} below {}x pitch {}",
                    s.threshold, THRESHOLD_PITCH_FLOOR, s.pitch
                )));
            }
            if k > 0 && s.threshold > self.steps[k - 1].threshold {
                return Err(ConfigError::Invalid(format!("plan step {k}: thresholds must be non-increasing")));
            }
        }
        Ok(())
    }

    /// First `n` steps; repeats the last step when `n` exceeds the plan.
    pub fn truncated(&self, n: usize) -> Self {
        let Some(&last) = self.steps.last() else {
            return self.clone();
        };
        Self {
            steps: (0..n).map(|k| self.steps.get(k).copied().unwrap_or(last)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapSection {
    pub cell_size: f64,
    pub normal_gate_deg: f64,
}

impl Default for MapSection {
    fn default() -> Self {
        Self { cell_size: 1.0, normal_gate_deg: 30.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileSection {
    /// Square tile edge (meters); must be a multiple of the cell size.
    pub size: f64,
    /// Points this close to a tile border are copied into the neighbor.
    pub overlap: f64,
}

impl Default for TileSection {
    fn default() -> Self {
        Self { size: 15.0, overlap: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub workers: usize,
    /// Reduce partitions; independent of `workers` so results do not depend
    /// on parallelism.
    pub partitions: usize,
    pub scratch: Option<PathBuf>,
    pub spill_bytes: usize,
    pub max_attempts: u32,
    pub anchor_spacing: f64,
    /// Trajectories held at zero correction.
    pub fixed_trajectories: Vec<u32>,
    pub histogram_bin: f64,
    pub noise: NoiseConfig,
    pub ransac: RansacParams,
    pub segment: SegmentParams,
    pub map: MapSection,
    pub tiles: TileSection,
    pub plan: IterationPlan,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            partitions: 8,
            scratch: None,
            spill_bytes: crate::engine::DEFAULT_SPILL_BYTES,
            max_attempts: 3,
            anchor_spacing: 0.5,
            fixed_trajectories: Vec::new(),
            histogram_bin: crate::diagnostics::DEFAULT_BIN_WIDTH,
            noise: NoiseConfig::default(),
            ransac: RansacParams::default(),
            segment: SegmentParams::default(),
            map: MapSection::default(),
            tiles: TileSection::default(),
            plan: IterationPlan::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        if self.partitions == 0 {
            return bad("partitions must be >= 1");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be >= 1");
        }
        if self.spill_bytes == 0 {
            return bad("spill_bytes must be > 0");
        }
        if !(self.anchor_spacing > 0.0) {
            return bad("anchor_spacing must be positive");
        }
        if !(self.histogram_bin > 0.0) {
            return bad("histogram_bin must be positive");
        }
        if !(self.map.cell_size > 0.0) {
            return bad("map.cell_size must be positive");
        }
        if !(self.map.normal_gate_deg > 0.0 && self.map.normal_gate_deg < 90.0) {
            return bad("map.normal_gate_deg must be in (0, 90)");
        }
        let ratio = self.tiles.size / self.map.cell_size;
        if !(self.tiles.size > 0.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return bad("tiles.size must be a positive multiple of map.cell_size");
        }
        if !(self.tiles.overlap >= 0.0 && self.tiles.overlap < self.tiles.size / 2.0) {
            return bad("tiles.overlap must be in [0, size / 2)");
        }
        if self.ransac.iterations == 0 || self.ransac.min_inliers < 3 || !(self.ransac.inlier_dist > 0.0) {
            return bad("ransac: iterations >= 1, min_inliers >= 3, inlier_dist > 0");
        }
        if !(self.segment.k >= 0.0 && self.segment.c0_scale > 0.0 && self.segment.c1_scale > 0.0) {
            return bad("segment: k >= 0 and positive scales");
        }
        self.noise.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.plan.validate()
    }
}
