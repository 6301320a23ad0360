//! Class-incremental protocol: class schedules, label masking per setting,
//! and the step loop that drives expansion, pseudo-labeling and updates.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticState;
use crate::error::{Error, Result};
use crate::features::RhlProjector;
use crate::labels::{ClassId, LabelMatrix, LabelRule, RawLabel};
use crate::manifest::{Relabeler, RunManifest};
use crate::metrics::{iou_from_confusion, ClassGroups, Confusion, SegMetrics};
use crate::pseudo2d::{relabel_2d, RelabelParams};
use crate::pseudo3d::{knn_cosine, relabel_3d, softmax_rows};
use crate::scalar::Scalar;

/// Label availability regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Old and new classes are labeled; future classes are unlabeled.
    Sequential,
    /// Old classes appear as background; samples never contain future classes.
    Disjoint,
    /// Only new classes are labeled; everything else is background.
    Overlapped,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Setting::Sequential),
            "disjoint" => Ok(Setting::Disjoint),
            "overlapped" => Ok(Setting::Overlapped),
            other => Err(Error::config(format!("unknown setting {other:?}"))),
        }
    }
}

/// Classes introduced at each step. Steps are numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSchedule {
    steps: Vec<Vec<ClassId>>,
    step_of: HashMap<ClassId, usize>,
}

impl ClassSchedule {
    pub fn new(steps: Vec<Vec<ClassId>>) -> Result<Self> {
        if steps.is_empty() || steps.iter().any(|s| s.is_empty()) {
            return Err(Error::config("class schedule needs at least one class per step"));
        }
        let mut step_of = HashMap::new();
        for (t, classes) in steps.iter().enumerate() {
            for &c in classes {
                if step_of.insert(c, t + 1).is_some() {
                    return Err(Error::config(format!("class {c} is introduced at more than one step")));
                }
            }
        }
        Ok(Self { steps, step_of })
    }

    /// Background plus classes `1..=m` first, then `n` classes per step.
    pub fn m_n(n_classes: u32, m: u32, n: u32, background: ClassId) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::config("need background plus at least one class"));
        }
        let foreground: Vec<ClassId> = (0..n_classes).map(ClassId).filter(|c| *c != background).collect();
        if foreground.len() as u32 != n_classes - 1 {
            return Err(Error::config(format!("background {background} is outside 0..{n_classes}")));
        }
        if m == 0 || m as usize > foreground.len() {
            return Err(Error::config(format!(
                "m = {m} must lie in 1..={} for {n_classes} classes",
                foreground.len()
            )));
        }
        let mut first = vec![background];
        first.extend_from_slice(&foreground[..m as usize]);
        let mut steps = vec![first];
        let rest = &foreground[m as usize..];
        if !rest.is_empty() {
            if n == 0 {
                return Err(Error::config("n must be positive when m leaves classes for later steps"));
            }
            steps.extend(rest.chunks(n as usize).map(|c| c.to_vec()));
        }
        Self::new(steps)
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[Vec<ClassId>] {
        &self.steps
    }

    /// `S_t`.
    pub fn new_classes(&self, t: usize) -> &[ClassId] {
        &self.steps[t - 1]
    }

    /// `C_t`, in introduction order.
    pub fn seen(&self, t: usize) -> Vec<ClassId> {
        self.steps[..t].iter().flatten().copied().collect()
    }

    pub fn step_of(&self, c: ClassId) -> Option<usize> {
        self.step_of.get(&c).copied()
    }

    pub fn all_classes(&self) -> Vec<ClassId> {
        self.seen(self.n_steps())
    }
}

/// Training labels visible at step `t` under `setting`.
///
/// * sequential: classes in `C_t` kept, future classes ignored;
/// * disjoint: `S_t` kept, `C_{t−1}` becomes background, future classes are
///   an error (such samples must have been excluded upstream);
/// * overlapped: `S_t` kept, everything else becomes background.
pub fn mask_labels(
    full_labels: &[RawLabel],
    setting: Setting,
    schedule: &ClassSchedule,
    t: usize,
    background: ClassId,
) -> Result<Vec<RawLabel>> {
    if t == 0 || t > schedule.n_steps() {
        return Err(Error::config(format!("step {t} outside 1..={}", schedule.n_steps())));
    }
    full_labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let Some(c) = *l else { return Ok(None) };
            let step = schedule
                .step_of(c)
                .ok_or_else(|| Error::data(format!("element {i}: unknown class id {c}")))?;
            Ok(match setting {
                Setting::Sequential if step <= t => Some(c),
                Setting::Sequential => None,
                _ if step == t => Some(c),
                Setting::Disjoint if step < t => Some(background),
                Setting::Disjoint => {
                    return Err(Error::data(format!(
                        "element {i}: future class {c} in a disjoint step {t}"
                    )))
                }
                Setting::Overlapped => Some(background),
            })
        })
        .collect()
}

/// One step of the training stream, labels already masked.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch<T> {
    pub step: usize,
    /// Encoder features, `N_t × d_encoder`.
    pub features: Array2<T>,
    pub labels: Vec<RawLabel>,
    /// xyz per element, required by the point-cloud relabeler.
    pub coords: Option<Array2<T>>,
    pub new_classes: Vec<ClassId>,
}

/// Held-out elements with complete labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet<T> {
    pub features: Array2<T>,
    pub labels: Vec<RawLabel>,
    pub coords: Option<Array2<T>>,
}

/// How the step's training labels were resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelCounts {
    pub kept: usize,
    pub background: usize,
    pub pseudo: usize,
    pub neighbor_pseudo: usize,
    pub ignored: usize,
}

impl RelabelCounts {
    fn tally(rules: &[LabelRule]) -> Self {
        let mut c = Self::default();
        for r in rules {
            match r {
                LabelRule::Keep(_) => c.kept += 1,
                LabelRule::Background => c.background += 1,
                LabelRule::Pseudo(_) => c.pseudo += 1,
                LabelRule::NeighborPseudo(_) => c.neighbor_pseudo += 1,
                LabelRule::Ignore => c.ignored += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.kept + self.background + self.pseudo + self.neighbor_pseudo + self.ignored
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub n_rows: usize,
    pub relabel: RelabelCounts,
    pub metrics: Option<SegMetrics>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub state: AnalyticState<T>,
    pub reports: Vec<StepReport>,
    /// Resolved training labels of every step, kept for inspection.
    pub resolved: Vec<Vec<LabelRule>>,
}

fn at_step(t: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("step {t}: {m}")),
        Error::Data(m) => Error::Data(format!("step {t}: {m}")),
        Error::Shape(m) => Error::Shape(format!("step {t}: {m}")),
        Error::Config(m) => Error::Config(format!("step {t}: {m}")),
        other => other,
    }
}

/// Drives the step loop.
///
/// With no `initial` state the first batch is fit in closed form; every
/// later batch is pseudo-labeled against the frozen previous state (except in
/// the sequential setting), gets its new classes appended, and is absorbed by
/// the recursive update. Each step's data is visited once.
pub fn run_steps<T, I>(
    manifest: &RunManifest,
    stream: I,
    eval: Option<&EvalSet<T>>,
    initial: Option<AnalyticState<T>>,
) -> Result<RunOutcome<T>>
where
    T: Scalar,
    I: IntoIterator<Item = Result<StepBatch<T>>>,
{
    let schedule = manifest.class_schedule()?;
    let projector = RhlProjector::<T>::build(manifest.seed, manifest.d_encoder, manifest.d_expanded, manifest.scale)?;
    let eval_features = match eval {
        Some(ev) => {
            if ev.labels.len() != ev.features.nrows() {
                return Err(Error::shape("evaluation labels and features differ in length"));
            }
            Some(projector.expand_chunked(ev.features.view(), manifest.expand_chunk_rows)?)
        }
        None => None,
    };

    let mut state = initial;
    let mut reports = Vec::new();
    let mut resolved_all = Vec::new();
    for batch in stream {
        let batch = batch?;
        let t = batch.step;
        let started = Instant::now();
        let wrap = at_step(t);
        check_batch(&batch, manifest, &schedule, state.as_ref()).map_err(&wrap)?;

        let features = projector
            .expand_chunked(batch.features.view(), manifest.expand_chunk_rows)
            .map_err(&wrap)?;
        let rules = match &state {
            Some(prev) if t > 1 && manifest.setting != Setting::Sequential => {
                relabel(manifest, &batch, features.view(), prev).map_err(&wrap)?
            }
            _ => batch
                .labels
                .iter()
                .map(|l| match l {
                    Some(c) => LabelRule::Keep(*c),
                    None => LabelRule::Ignore,
                })
                .collect(),
        };
        let labels: Vec<RawLabel> = rules.iter().map(|r| r.resolve(manifest.background)).collect();

        let current = match state.take() {
            None => {
                let matrix = LabelMatrix::new(&labels, &batch.new_classes).map_err(&wrap)?;
                AnalyticState::fit_initial(features.view(), &matrix, manifest.gamma).map_err(&wrap)?
            }
            Some(mut s) => {
                s.expand_classes(&batch.new_classes).map_err(&wrap)?;
                let matrix = LabelMatrix::new(&labels, s.class_ids()).map_err(&wrap)?;
                absorb(&mut s, features.view(), &labels, &matrix, manifest).map_err(&wrap)?;
                s
            }
        };

        let metrics = match (eval, &eval_features) {
            (Some(ev), Some(ef)) => Some(evaluate(&current, ef.view(), &ev.labels, &schedule, manifest.background)?),
            _ => None,
        };
        reports.push(StepReport {
            step: t,
            n_rows: batch.labels.len(),
            relabel: RelabelCounts::tally(&rules),
            metrics,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        log::info!("step {t}: {} rows absorbed", batch.labels.len());
        resolved_all.push(rules);
        state = Some(current);
    }
    let state = state.ok_or_else(|| Error::data("stream contains no steps"))?;
    Ok(RunOutcome {
        state,
        reports,
        resolved: resolved_all,
    })
}

fn check_batch<T: Scalar>(
    batch: &StepBatch<T>,
    manifest: &RunManifest,
    schedule: &ClassSchedule,
    state: Option<&AnalyticState<T>>,
) -> Result<()> {
    let t = batch.step;
    if t == 0 || t > schedule.n_steps() {
        return Err(Error::data(format!("step index outside 1..={}", schedule.n_steps())));
    }
    if batch.new_classes != schedule.new_classes(t) {
        return Err(Error::data(format!(
            "batch introduces {:?} but the schedule lists {:?}",
            batch.new_classes,
            schedule.new_classes(t)
        )));
    }
    if batch.features.nrows() != batch.labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows but {} labels",
            batch.features.nrows(),
            batch.labels.len()
        )));
    }
    if let Some(c) = &batch.coords {
        if c.dim() != (batch.labels.len(), 3) {
            return Err(Error::shape(format!("coordinates have shape {:?}", c.dim())));
        }
    }
    match state {
        None if t != 1 => {
            return Err(Error::data("a stream without an initial state must start at step 1"));
        }
        Some(s) => {
            if s.step_index() + 1 != t as u64 {
                return Err(Error::data(format!("state is at step {}, batch is step {t}", s.step_index())));
            }
            if let Some(c) = batch.new_classes.iter().find(|c| s.class_ids().contains(c)) {
                return Err(Error::data(format!("class {c} was already learned")));
            }
        }
        None => {}
    }
    // No future class may reach the trainer.
    let allowed: HashSet<ClassId> = match manifest.setting {
        Setting::Sequential => schedule.seen(t).into_iter().collect(),
        _ => batch
            .new_classes
            .iter()
            .copied()
            .chain([manifest.background])
            .collect(),
    };
    if let Some((i, c)) = batch
        .labels
        .iter()
        .enumerate()
        .find_map(|(i, l)| l.filter(|c| !allowed.contains(c)).map(|c| (i, c)))
    {
        return Err(Error::data(format!(
            "element {i} carries class {c}, which is not visible under the {:?} setting",
            manifest.setting
        )));
    }
    Ok(())
}

fn relabel<T: Scalar>(
    manifest: &RunManifest,
    batch: &StepBatch<T>,
    features: ndarray::ArrayView2<T>,
    prev: &AnalyticState<T>,
) -> Result<Vec<LabelRule>> {
    let prediction = prev.predict(features)?;
    let params = RelabelParams {
        current: &batch.new_classes,
        background: manifest.background,
        tau: manifest.tau,
    };
    match manifest.relabeler {
        Relabeler::Image => relabel_2d(&batch.labels, prediction.logits.view(), prev.class_ids(), &params),
        Relabeler::PointCloud => {
            let coords = batch.coords.as_ref().ok_or_else(|| {
                Error::config("the point-cloud relabeler needs coordinates, but the step has none")
            })?;
            let neighborhoods = knn_cosine(coords.view(), manifest.k_neighbors)?;
            let probs = softmax_rows(prediction.logits.view());
            relabel_3d(&batch.labels, probs.view(), prev.class_ids(), &neighborhoods, &params)
        }
    }
}

fn absorb<T: Scalar>(
    state: &mut AnalyticState<T>,
    features: ndarray::ArrayView2<T>,
    labels: &[RawLabel],
    matrix: &LabelMatrix,
    manifest: &RunManifest,
) -> Result<()> {
    let n = labels.len();
    let Some(chunk) = manifest.update_chunk_rows.filter(|&c| c < n) else {
        return state.crls_update(features, matrix, manifest.mode);
    };
    let step = state.step_index();
    let mut r0 = 0;
    while r0 < n {
        let r1 = (r0 + chunk).min(n);
        let part = LabelMatrix::new(&labels[r0..r1], state.class_ids())?;
        state.crls_update(features.slice(s![r0..r1, ..]), &part, manifest.mode)?;
        r0 = r1;
    }
    // A chunked step still counts as one step.
    state.set_step_index(step + 1);
    Ok(())
}

/// Scores `state` on elements whose class has been introduced by its step.
pub fn evaluate<T: Scalar>(
    state: &AnalyticState<T>,
    expanded: ndarray::ArrayView2<T>,
    labels: &[RawLabel],
    schedule: &ClassSchedule,
    background: ClassId,
) -> Result<SegMetrics> {
    let prediction = state.predict(expanded)?;
    let column: HashMap<ClassId, usize> = state.class_ids().iter().enumerate().map(|(j, c)| (*c, j)).collect();
    let gt: Vec<Option<usize>> = labels.iter().map(|l| l.and_then(|c| column.get(&c).copied())).collect();
    let mut confusion = Confusion::zeros(state.n_classes());
    confusion.accumulate(&prediction.columns, &gt)?;
    let groups = ClassGroups {
        class_ids: state.class_ids().to_vec(),
        base: schedule.new_classes(1).to_vec(),
        background,
    };
    iou_from_confusion(&confusion, &groups)
}
