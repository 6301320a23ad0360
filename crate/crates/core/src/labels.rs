use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dataset-level class identifier. Background is an ordinary id (usually 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-element label as read from a stream: `None` marks an ignored element.
pub type RawLabel = Option<ClassId>;

/// Sentinel used for ignored elements in the on-disk label vectors.
pub const IGNORE_LABEL: i32 = -1;

pub fn decode_raw(v: i32) -> Result<RawLabel> {
    match v {
        IGNORE_LABEL => Ok(None),
        v if v >= 0 => Ok(Some(ClassId(v as u32))),
        v => Err(Error::data(format!("label {v} is neither a class id nor the ignore marker"))),
    }
}

pub fn encode_raw(label: RawLabel) -> i32 {
    match label {
        None => IGNORE_LABEL,
        Some(c) => c.0 as i32,
    }
}

/// Outcome of pseudo-labeling for one element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// Ground-truth label of a class introduced in the current step.
    Keep(ClassId),
    /// Background ground truth left as background.
    Background,
    /// The previous model's own prediction for the element.
    Pseudo(ClassId),
    /// Prediction of the nearest confident neighbor (point clouds only).
    NeighborPseudo(ClassId),
    Ignore,
}

impl LabelRule {
    /// Training label after resolution; `None` means the element is dropped.
    pub fn resolve(self, background: ClassId) -> RawLabel {
        match self {
            LabelRule::Keep(c) | LabelRule::Pseudo(c) | LabelRule::NeighborPseudo(c) => Some(c),
            LabelRule::Background => Some(background),
            LabelRule::Ignore => None,
        }
    }
}

/// One-hot label matrix stored as one column index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    class_ids: Vec<ClassId>,
    rows: Vec<Option<usize>>,
}

impl LabelMatrix {
    /// Builds the matrix against an explicit column order. Labels outside
    /// `class_ids` are rejected.
    pub fn new(labels: &[RawLabel], class_ids: &[ClassId]) -> Result<Self> {
        let column = column_lookup(class_ids)?;
        let rows = labels
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                None => Ok(None),
                Some(c) => column.get(c).copied().map(Some).ok_or_else(|| {
                    Error::data(format!("row {i} has label {c} which has no classifier column"))
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_ids: class_ids.to_vec(),
            rows,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.class_ids.len()
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    /// Column index of each row, `None` for ignored rows.
    pub fn columns(&self) -> &[Option<usize>] {
        &self.rows
    }

    /// Indices of rows that take part in regression.
    pub fn kept_rows(&self) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|_| i))
            .collect()
    }

    /// Dense one-hot matrix over the kept rows only.
    pub fn dense_kept<T: Scalar>(&self) -> Array2<T> {
        let kept: Vec<usize> = self.rows.iter().filter_map(|c| *c).collect();
        let mut y = Array2::zeros((kept.len(), self.n_cols()));
        for (r, c) in kept.into_iter().enumerate() {
            y[[r, c]] = T::one();
        }
        y
    }
}

pub(crate) fn column_lookup(class_ids: &[ClassId]) -> Result<HashMap<ClassId, usize>> {
    let mut map = HashMap::with_capacity(class_ids.len());
    for (j, c) in class_ids.iter().enumerate() {
        if map.insert(*c, j).is_some() {
            return Err(Error::data(format!("class id {c} listed twice")));
        }
    }
    Ok(map)
}
