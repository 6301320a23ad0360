//! On-disk formats.
//!
//! # CFS1 feature blocks
//!
//! Each block is a pair of files sharing a stem:
//!
//! * `<stem>.json`: `{"step", "n_rows", "d_encoder", "has_coords", "class_ids_present"}`
//! * `<stem>.bin`: the 8-byte magic `CFS1FEAT`, then `n_rows × d_encoder`
//!   little-endian `f32` features (row-major), then `n_rows × 3` `f32`
//!   coordinates if `has_coords`, then `n_rows` little-endian `i32` labels
//!   (`-1` = ignored).
//!
//! A stream directory holds `manifest.json`, `step_001.{json,bin}`, … for the
//! training steps and `eval.{json,bin}` (step 0) for the held-out set.
//!
//! # Checkpoints
//!
//! The 8-byte magic `CFS1CKPT`, a little-endian `u64` header length, the JSON
//! header, then `phi` (`d_E × C`) and `psi` (`d_E × d_E`) as row-major
//! little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticState;
use crate::error::{Error, Result};
use crate::labels::{decode_raw, encode_raw, ClassId, RawLabel};
use crate::manifest::RunManifest;
use crate::protocol::{EvalSet, StepBatch};
use crate::scalar::Scalar;

pub const FEATURE_MAGIC: &[u8; 8] = b"CFS1FEAT";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CFS1CKPT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_STEM: &str = "eval";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub step: usize,
    pub n_rows: usize,
    pub d_encoder: usize,
    pub has_coords: bool,
    pub class_ids_present: Vec<ClassId>,
}

/// Raw contents of one CFS1 block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub sidecar: Sidecar,
    pub features: Array2<f32>,
    pub coords: Option<Array2<f32>>,
    pub labels: Vec<i32>,
}

impl FeatureBlock {
    pub fn new(step: usize, features: Array2<f32>, coords: Option<Array2<f32>>, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != features.nrows() {
            return Err(Error::shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.nrows()
            )));
        }
        if let Some(c) = &coords {
            if c.dim() != (features.nrows(), 3) {
                return Err(Error::shape(format!("coordinates have shape {:?}", c.dim())));
            }
        }
        let mut present: Vec<ClassId> = labels
            .iter()
            .map(|&l| decode_raw(l))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        present.sort();
        present.dedup();
        Ok(Self {
            sidecar: Sidecar {
                step,
                n_rows: features.nrows(),
                d_encoder: features.ncols(),
                has_coords: coords.is_some(),
                class_ids_present: present,
            },
            features,
            coords,
            labels,
        })
    }

    pub fn from_batch<T: Scalar>(b: &StepBatch<T>) -> Result<Self> {
        Self::new(
            b.step,
            to_f32(&b.features),
            b.coords.as_ref().map(to_f32),
            b.labels.iter().map(|&l| encode_raw(l)).collect(),
        )
    }

    pub fn from_eval<T: Scalar>(e: &EvalSet<T>) -> Result<Self> {
        Self::new(
            0,
            to_f32(&e.features),
            e.coords.as_ref().map(to_f32),
            e.labels.iter().map(|&l| encode_raw(l)).collect(),
        )
    }

    pub fn raw_labels(&self) -> Result<Vec<RawLabel>> {
        self.labels.iter().map(|&l| decode_raw(l)).collect()
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let (json, bin) = block_paths(dir, stem);
        fs::write(&json, serde_json::to_string_pretty(&self.sidecar)? + "\n")?;
        let mut out = Vec::with_capacity(8 + 4 * (self.features.len() + self.labels.len() + 3 * self.sidecar.n_rows));
        out.extend_from_slice(FEATURE_MAGIC);
        for v in self.features.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(c) = &self.coords {
            for v in c.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &self.labels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(&bin)?.write_all(&out)?;
        Ok(())
    }

    /// Reads and validates a block: magic, exact payload length, and the
    /// sidecar's class list.
    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let (json, bin) = block_paths(dir, stem);
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&json)?)
            .map_err(|e| Error::data(format!("{}: {e}", json.display())))?;
        let mut bytes = Vec::new();
        fs::File::open(&bin)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::data(format!("{}: missing CFS1FEAT magic", bin.display())));
        }
        let n = sidecar.n_rows;
        let n_feat = n * sidecar.d_encoder;
        let n_coord = if sidecar.has_coords { 3 * n } else { 0 };
        let expected = 8 + 4 * (n_feat + n_coord + n);
        if bytes.len() != expected {
            return Err(Error::data(format!(
                "{}: {} bytes, sidecar implies {expected}",
                bin.display(),
                bytes.len()
            )));
        }
        let words: Vec<[u8; 4]> = bytes[8..].chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let features = Array2::from_shape_vec(
            (n, sidecar.d_encoder),
            words[..n_feat].iter().map(|w| f32::from_le_bytes(*w)).collect(),
        )
        .map_err(|e| Error::shape(e.to_string()))?;
        let coords = if sidecar.has_coords {
            Some(
                Array2::from_shape_vec(
                    (n, 3),
                    words[n_feat..n_feat + n_coord].iter().map(|w| f32::from_le_bytes(*w)).collect(),
                )
                .map_err(|e| Error::shape(e.to_string()))?,
            )
        } else {
            None
        };
        let labels: Vec<i32> = words[n_feat + n_coord..].iter().map(|w| i32::from_le_bytes(*w)).collect();
        let block = Self::new(sidecar.step, features, coords, labels)?;
        if block.sidecar != sidecar {
            return Err(Error::data(format!(
                "{}: sidecar class list {:?} disagrees with the labels {:?}",
                json.display(),
                sidecar.class_ids_present,
                block.sidecar.class_ids_present
            )));
        }
        Ok(block)
    }

    pub fn features_as<T: Scalar>(&self) -> Array2<T> {
        self.features.mapv(T::of_f32)
    }

    pub fn coords_as<T: Scalar>(&self) -> Option<Array2<T>> {
        self.coords.as_ref().map(|c| c.mapv(T::of_f32))
    }
}

fn to_f32<T: Scalar>(a: &Array2<T>) -> Array2<f32> {
    a.mapv(|v| v.as_f64() as f32)
}

fn block_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn step_stem(t: usize) -> String {
    format!("step_{t:03}")
}

/// Writes a complete stream directory.
pub fn write_stream<T: Scalar>(
    dir: &Path,
    manifest: &RunManifest,
    steps: &[StepBatch<T>],
    eval: &EvalSet<T>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    for b in steps {
        FeatureBlock::from_batch(b)?.write(dir, &step_stem(b.step))?;
    }
    FeatureBlock::from_eval(eval)?.write(dir, EVAL_STEM)?;
    Ok(())
}

/// A stream directory loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedStream<T> {
    pub manifest: RunManifest,
    pub steps: Vec<StepBatch<T>>,
    pub eval: Option<EvalSet<T>>,
}

/// Reads `manifest.json`, every scheduled step, and `eval` when present.
pub fn read_stream<T: Scalar>(dir: &Path) -> Result<LoadedStream<T>> {
    let mut manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    manifest.validate()?;
    let schedule = manifest.class_schedule()?;
    let mut steps = Vec::with_capacity(schedule.n_steps());
    for t in 1..=schedule.n_steps() {
        let block = FeatureBlock::read(dir, &step_stem(t))?;
        if block.sidecar.step != t {
            return Err(Error::data(format!("{} claims step {}", step_stem(t), block.sidecar.step)));
        }
        steps.push(StepBatch {
            step: t,
            features: block.features_as(),
            coords: block.coords_as(),
            labels: block.raw_labels()?,
            new_classes: schedule.new_classes(t).to_vec(),
        });
    }
    let eval = if block_paths(dir, EVAL_STEM).1.exists() {
        let block = FeatureBlock::read(dir, EVAL_STEM)?;
        Some(EvalSet {
            features: block.features_as(),
            coords: block.coords_as(),
            labels: block.raw_labels()?,
        })
    } else {
        None
    };
    Ok(LoadedStream { manifest, steps, eval })
}

/// Summary returned by [`check_stream`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamCheck {
    pub steps: usize,
    pub rows: Vec<usize>,
    pub has_eval: bool,
}

/// Validates a stream directory without running anything: the manifest,
/// every block's magic and length, feature width, finiteness, and that each
/// label belongs to the schedule.
pub fn check_stream(dir: &Path) -> Result<StreamCheck> {
    let mut manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    manifest.validate()?;
    let schedule = manifest.class_schedule()?;
    let mut stems: Vec<String> = (1..=schedule.n_steps()).map(step_stem).collect();
    let has_eval = block_paths(dir, EVAL_STEM).1.exists();
    if has_eval {
        stems.push(EVAL_STEM.to_string());
    }
    let mut rows = Vec::new();
    for stem in &stems {
        let block = FeatureBlock::read(dir, stem)?;
        if block.sidecar.d_encoder != manifest.d_encoder {
            return Err(Error::data(format!(
                "{stem}: d_encoder {} but the manifest says {}",
                block.sidecar.d_encoder, manifest.d_encoder
            )));
        }
        if block.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{stem} features")));
        }
        if let Some(c) = block.sidecar.class_ids_present.iter().find(|c| schedule.step_of(**c).is_none()) {
            return Err(Error::data(format!("{stem}: class {c} is not in the schedule")));
        }
        rows.push(block.sidecar.n_rows);
    }
    if has_eval {
        rows.pop();
    }
    Ok(StreamCheck {
        steps: schedule.n_steps(),
        rows,
        has_eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    d_expanded: usize,
    n_classes: usize,
    gamma: f64,
    class_ids: Vec<ClassId>,
    step_index: u64,
    endianness: String,
    dtype: String,
}

pub fn write_checkpoint<T: Scalar>(path: &Path, state: &AnalyticState<T>) -> Result<()> {
    let header = CheckpointHeader {
        d_expanded: state.d_expanded(),
        n_classes: state.n_classes(),
        gamma: state.gamma(),
        class_ids: state.class_ids().to_vec(),
        step_index: state.step_index(),
        endianness: "little".into(),
        dtype: "f64".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (state.phi().len() + state.psi().len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in state.phi().iter().chain(state.psi().iter()) {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<AnalyticState<T>> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::data(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing CFS1CKPT magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.endianness != "little" || header.dtype != "f64" {
        return Err(bad("unsupported endianness or dtype"));
    }
    let d = header.d_expanded;
    let c = header.n_classes;
    let payload = &bytes[16 + len..];
    if payload.len() != 8 * (d * c + d * d) {
        return Err(bad("payload length does not match the header"));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|w| T::of(f64::from_le_bytes(w.try_into().unwrap())));
    let phi = Array2::from_shape_vec((d, c), values.by_ref().take(d * c).collect())
        .map_err(|e| Error::shape(e.to_string()))?;
    let psi = Array2::from_shape_vec((d, d), values.collect()).map_err(|e| Error::shape(e.to_string()))?;
    AnalyticState::from_parts(phi, psi, header.gamma, header.class_ids, header.step_index)
}
