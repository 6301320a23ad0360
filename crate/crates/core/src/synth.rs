//! Synthetic segmentation-like data.
//!
//! The generator produces "images": groups of elements around one primary
//! class, with background elements and, optionally, elements of a companion
//! class. Encoder features are Gaussian clusters centered at `10·e_c` (vertex
//! `c` of the unit simplex, scaled). Coordinates place each foreground class
//! around its own spot on a ring, background scattered through a box.
//!
//! Image `g` draws from ChaCha8 stream `g` keyed by the spec seed, so every
//! image is reproducible on its own. All values are rounded to `f32` so a
//! stream survives the on-disk format unchanged.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{ClassId, RawLabel};
use crate::protocol::{mask_labels, ClassSchedule, EvalSet, Setting, StepBatch};
use crate::scalar::Scalar;

/// Distance of class centers from the origin in feature space.
pub const CENTER_SCALE: f64 = 10.0;

/// Element accuracy a jointly trained classifier reaches on the calibrated
/// separable spec (`cluster_spread = 0.1`); see `tests/synth_calibration.rs`.
pub const SEPARABLE_ACCURACY_FLOOR: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Total classes, background (id 0) included.
    pub n_classes: u32,
    /// Feature width; must be at least `n_classes`.
    pub d_encoder: usize,
    /// Training elements of each foreground class, split across its images.
    pub points_per_class: usize,
    pub cluster_spread: f64,
    pub seed: u64,
    #[serde(default = "default_images")]
    pub images_per_class: usize,
    /// Background elements per image, relative to the primary class count.
    #[serde(default = "default_background_fraction")]
    pub background_fraction: f64,
    /// Companion-class elements per image, relative to the primary class count.
    #[serde(default = "default_companion_fraction")]
    pub companion_fraction: f64,
    /// Let odd-numbered images carry a companion from a later class.
    #[serde(default)]
    pub future_companions: bool,
    #[serde(default = "default_eval_images")]
    pub eval_images_per_class: usize,
    #[serde(default = "default_coord_spread")]
    pub coord_spread: f64,
}

fn default_images() -> usize {
    2
}
fn default_background_fraction() -> f64 {
    0.5
}
fn default_companion_fraction() -> f64 {
    0.25
}
fn default_eval_images() -> usize {
    1
}
fn default_coord_spread() -> f64 {
    0.5
}

impl SynthSpec {
    pub fn new(n_classes: u32, d_encoder: usize, points_per_class: usize, cluster_spread: f64, seed: u64) -> Self {
        Self {
            n_classes,
            d_encoder,
            points_per_class,
            cluster_spread,
            seed,
            images_per_class: default_images(),
            background_fraction: default_background_fraction(),
            companion_fraction: default_companion_fraction(),
            future_companions: false,
            eval_images_per_class: default_eval_images(),
            coord_spread: default_coord_spread(),
        }
    }

    /// The separable configuration used for calibration.
    pub fn separable(n_classes: u32, points_per_class: usize, seed: u64) -> Self {
        Self::new(n_classes, n_classes as usize, points_per_class, 0.1, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth spec: {m}")));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2 (background plus one class)".into());
        }
        if self.d_encoder < self.n_classes as usize {
            return bad(format!(
                "d_encoder = {} cannot hold {} simplex vertices",
                self.d_encoder, self.n_classes
            ));
        }
        if self.points_per_class == 0 || self.images_per_class == 0 {
            return bad("points_per_class and images_per_class must be positive".into());
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("background_fraction", self.background_fraction),
            ("companion_fraction", self.companion_fraction),
            ("coord_spread", self.coord_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

/// A group of elements sharing a primary class.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage<T> {
    pub primary: ClassId,
    pub features: Array2<T>,
    pub coords: Array2<T>,
    pub labels: Vec<ClassId>,
}

impl<T> SynthImage<T> {
    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.labels.iter().copied()
    }
}

/// Generated training and held-out images, labels complete.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset<T> {
    pub train: Vec<SynthImage<T>>,
    pub eval: Vec<SynthImage<T>>,
}

/// Draws the dataset. Identical specs give bitwise-identical output.
pub fn synth_generate<T: Scalar>(spec: &SynthSpec) -> Result<SynthDataset<T>> {
    spec.validate()?;
    let n = spec.n_classes;
    let mut stream = 0u64;
    let mut make = |count: usize, future: bool| {
        let mut images = Vec::new();
        for primary in 1..n {
            for j in 0..count {
                images.push(image::<T>(spec, ClassId(primary), j, stream, future));
                stream += 1;
            }
        }
        images
    };
    let train = make(spec.images_per_class, spec.future_companions);
    let eval = make(spec.eval_images_per_class, false);
    Ok(SynthDataset { train, eval })
}

fn companion(spec: &SynthSpec, primary: u32, j: usize, future: bool) -> Option<ClassId> {
    let last = spec.n_classes - 1;
    if future && j % 2 == 1 && primary < last {
        let span = (last - primary) as usize;
        return Some(ClassId(primary + 1 + (j / 2 % span) as u32));
    }
    if primary >= 2 {
        let span = (primary - 1) as usize;
        return Some(ClassId(1 + ((primary as usize - 2 + j) % span) as u32));
    }
    None
}

fn image<T: Scalar>(spec: &SynthSpec, primary: ClassId, j: usize, stream: u64, future: bool) -> SynthImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let n_primary = (spec.points_per_class / spec.images_per_class).max(1);
    let n_bg = (n_primary as f64 * spec.background_fraction).round() as usize;
    let mut plan = vec![(primary, n_primary), (ClassId(0), n_bg)];
    if let Some(c) = companion(spec, primary.0, j, future) {
        let n_c = (n_primary as f64 * spec.companion_fraction).round() as usize;
        plan.push((c, n_c));
    }
    let total: usize = plan.iter().map(|p| p.1).sum();
    let mut features = Array2::<T>::zeros((total, spec.d_encoder));
    let mut coords = Array2::<T>::zeros((total, 3));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (class, count) in plan {
        for _ in 0..count {
            for k in 0..spec.d_encoder {
                let center = if k == class.0 as usize { CENTER_SCALE } else { 0.0 };
                let z: f64 = rng.sample(StandardNormal);
                features[[row, k]] = round32(center + spec.cluster_spread * z);
            }
            let xyz = coord(spec, class, &mut rng);
            for k in 0..3 {
                coords[[row, k]] = round32(xyz[k]);
            }
            labels.push(class);
            row += 1;
        }
    }
    SynthImage {
        primary,
        features,
        coords,
        labels,
    }
}

fn coord(spec: &SynthSpec, class: ClassId, rng: &mut ChaCha8Rng) -> [f64; 3] {
    if class.0 == 0 {
        return [0; 3].map(|_| rng.random_range(-10.0..10.0));
    }
    let theta = std::f64::consts::TAU * class.0 as f64 / (spec.n_classes - 1) as f64;
    let center = [8.0 * theta.cos(), 8.0 * theta.sin(), 1.0 + (class.0 % 3) as f64];
    center.map(|c| {
        let z: f64 = rng.sample(StandardNormal);
        c + spec.coord_spread * z
    })
}

fn round32<T: Scalar>(v: f64) -> T {
    T::of_f32(v as f32)
}

fn stack<T: Scalar>(parts: Vec<ArrayView2<'_, T>>, width: usize) -> Result<Array2<T>> {
    if parts.is_empty() {
        return Ok(Array2::zeros((0, width)));
    }
    concatenate(Axis(0), &parts).map_err(|e| Error::shape(e.to_string()))
}

/// Groups images into steps and masks their labels.
///
/// An image belongs to the step that introduces its primary class. In the
/// disjoint setting, images containing any class from a later step are left
/// out.
pub fn build_stream<T: Scalar>(
    data: &SynthDataset<T>,
    schedule: &ClassSchedule,
    setting: Setting,
    background: ClassId,
) -> Result<(Vec<StepBatch<T>>, EvalSet<T>)> {
    let width = data.train.first().map(|i| i.features.ncols()).unwrap_or(0);
    let step_of = |c: ClassId| {
        schedule
            .step_of(c)
            .ok_or_else(|| Error::data(format!("class {c} is missing from the schedule")))
    };
    let mut steps = Vec::with_capacity(schedule.n_steps());
    for t in 1..=schedule.n_steps() {
        let mut members: Vec<&SynthImage<T>> = Vec::new();
        for class in schedule.new_classes(t) {
            for img in data.train.iter().filter(|i| i.primary == *class) {
                let latest = img.classes().map(step_of).collect::<Result<Vec<_>>>()?;
                if setting == Setting::Disjoint && latest.iter().any(|&s| s > t) {
                    continue;
                }
                members.push(img);
            }
        }
        let full: Vec<RawLabel> = members.iter().flat_map(|i| i.classes().map(Some)).collect();
        steps.push(StepBatch {
            step: t,
            features: stack(members.iter().map(|i| i.features.view()).collect(), width)?,
            coords: Some(stack(members.iter().map(|i| i.coords.view()).collect(), 3)?),
            labels: mask_labels(&full, setting, schedule, t, background)?,
            new_classes: schedule.new_classes(t).to_vec(),
        });
    }
    let eval = EvalSet {
        features: stack(data.eval.iter().map(|i| i.features.view()).collect(), width)?,
        coords: Some(stack(data.eval.iter().map(|i| i.coords.view()).collect(), 3)?),
        labels: data.eval.iter().flat_map(|i| i.classes().map(Some)).collect(),
    };
    Ok((steps, eval))
}
