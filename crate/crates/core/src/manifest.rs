//! Run manifest: every knob that influences a run, serialized as JSON.
//!
//! The manifest doubles as the command-line configuration file. Unknown keys
//! are rejected and all fields are validated before any computation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytic::UpdateMode;
use crate::error::{Error, Result};
use crate::labels::ClassId;
use crate::protocol::{ClassSchedule, Setting};
use crate::synth::SynthSpec;

/// `m` classes at the first step, then `n` per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnProtocol {
    pub m: u32,
    pub n: u32,
}

/// Pseudo-labeling rule used in disjoint and overlapped runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Relabeler {
    /// Sigmoid-confidence rule for image elements.
    #[default]
    #[serde(rename = "2d")]
    Image,
    /// Neighborhood BALD rule for point clouds; needs coordinates.
    #[serde(rename = "3d")]
    PointCloud,
}

impl std::str::FromStr for Relabeler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(Relabeler::Image),
            "3d" => Ok(Relabeler::PointCloud),
            other => Err(Error::Config(format!("unknown relabeler '{other}' (expected 2d or 3d)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub setting: Setting,
    pub m_n_protocol: MnProtocol,
    /// Total number of classes, background included.
    pub n_classes: u32,
    #[serde(default = "default_background")]
    pub background: ClassId,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub d_encoder: usize,
    pub d_expanded: usize,
    /// Standard deviation of the random hidden-layer weights.
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k_neighbors: usize,
    #[serde(default)]
    pub relabeler: Relabeler,
    #[serde(default)]
    pub mode: UpdateMode,
    /// Rows expanded at a time; has no effect on values.
    #[serde(default = "default_expand_chunk")]
    pub expand_chunk_rows: usize,
    /// When set, a step is absorbed in several updates of at most this many rows.
    #[serde(default)]
    pub update_chunk_rows: Option<usize>,
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// Class ids introduced at each step. Filled from `m_n_protocol` when empty.
    #[serde(default)]
    pub schedule: Vec<Vec<ClassId>>,
    #[serde(default)]
    pub checkpoints: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

fn default_background() -> ClassId {
    ClassId(0)
}
fn default_gamma() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    0.4
}
fn default_scale() -> f64 {
    1.0
}
fn default_k() -> usize {
    8
}
fn default_expand_chunk() -> usize {
    4096
}
fn default_threads() -> usize {
    1
}

/// Default threshold for the point-cloud rule on S3DIS-like data.
pub const TAU_3D_S3DIS: f64 = 0.0035;
/// Default threshold for the point-cloud rule on ScanNet-like data.
pub const TAU_3D_SCANNET: f64 = 0.001;

impl RunManifest {
    /// A manifest with defaults for everything but the essentials.
    pub fn new(setting: Setting, m: u32, n: u32, n_classes: u32, d_encoder: usize, d_expanded: usize, seed: u64) -> Self {
        Self {
            setting,
            m_n_protocol: MnProtocol { m, n },
            n_classes,
            background: default_background(),
            gamma: default_gamma(),
            tau: default_tau(),
            d_encoder,
            d_expanded,
            scale: default_scale(),
            seed,
            k_neighbors: default_k(),
            relabeler: Relabeler::default(),
            mode: UpdateMode::default(),
            expand_chunk_rows: default_expand_chunk(),
            update_chunk_rows: None,
            threads: default_threads(),
            schedule: Vec::new(),
            checkpoints: Vec::new(),
            synth: None,
        }
    }

    /// Checks every field and fills `schedule` from the m-n protocol if empty.
    pub fn validate(&mut self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if self.d_encoder == 0 || self.d_expanded == 0 {
            return bad("d_encoder and d_expanded must be positive".into());
        }
        if self.k_neighbors == 0 {
            return bad("k_neighbors must be positive".into());
        }
        if self.expand_chunk_rows == 0 || self.update_chunk_rows == Some(0) {
            return bad("chunk sizes must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        let from_protocol = ClassSchedule::m_n(
            self.n_classes,
            self.m_n_protocol.m,
            self.m_n_protocol.n,
            self.background,
        )?;
        if self.schedule.is_empty() {
            self.schedule = from_protocol.steps().to_vec();
        } else {
            ClassSchedule::new(self.schedule.clone())?;
        }
        if let Some(s) = &self.synth {
            s.validate()?;
            if s.n_classes != self.n_classes || s.d_encoder != self.d_encoder {
                return bad("synth spec disagrees with manifest n_classes / d_encoder".into());
            }
        }
        Ok(())
    }

    pub fn class_schedule(&self) -> Result<ClassSchedule> {
        ClassSchedule::new(self.schedule.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses without validating; malformed JSON and unknown keys are config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}
