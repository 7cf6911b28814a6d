//! Max-IoU label assignment of region proposals against pseudo labels.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_closed, Error, Result};
use crate::geometry::BBox;

/// A foreground class index or the background slot.
///
/// Background sits after the `K` foreground classes, so a foreground index is
/// the same number in pseudo labels, soft targets and logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "Option<usize>", into = "Option<usize>")]
pub enum ClassLabel {
    Foreground(usize),
    Background,
}

impl ClassLabel {
    /// Slot in a `K + 1` vector.
    pub fn slot(self, num_classes: usize) -> usize {
        match self {
            ClassLabel::Foreground(c) => c,
            ClassLabel::Background => num_classes,
        }
    }

    pub fn from_slot(slot: usize, num_classes: usize) -> Self {
        if slot >= num_classes {
            ClassLabel::Background
        } else {
            ClassLabel::Foreground(slot)
        }
    }

    pub fn is_foreground(self) -> bool {
        matches!(self, ClassLabel::Foreground(_))
    }

    pub fn is_valid(self, num_classes: usize) -> bool {
        match self {
            ClassLabel::Foreground(c) => c < num_classes,
            ClassLabel::Background => true,
        }
    }
}

impl From<Option<usize>> for ClassLabel {
    fn from(v: Option<usize>) -> Self {
        v.map_or(ClassLabel::Background, ClassLabel::Foreground)
    }
}

impl From<ClassLabel> for Option<usize> {
    fn from(c: ClassLabel) -> Self {
        match c {
            ClassLabel::Foreground(c) => Some(c),
            ClassLabel::Background => None,
        }
    }
}

/// Detector output used as surrogate supervision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

impl PseudoLabel {
    pub fn new(bbox: BBox, category: usize, score: f64) -> Result<Self> {
        check_closed("score", score, 0.0, 1.0, "[0, 1]")?;
        Ok(Self {
            bbox,
            category,
            score,
        })
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        check_closed("score", self.score, 0.0, 1.0, "[0, 1]")?;
        if self.category >= num_classes {
            return Err(Error::OutOfRange {
                name: "category",
                value: self.category as f64,
                range: "[0, K)",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    /// Simulation-only ground truth; never shown to the learner.
    pub true_category: Option<ClassLabel>,
}

impl Proposal {
    pub fn new(bbox: BBox) -> Self {
        Self {
            bbox,
            true_category: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub max_iou: f64,
    pub matched_index: Option<usize>,
    pub assigned_category: ClassLabel,
    pub matched_score: Option<f64>,
    pub is_positive: bool,
}

impl Assignment {
    pub fn negative(max_iou: f64) -> Self {
        Self {
            max_iou,
            matched_index: None,
            assigned_category: ClassLabel::Background,
            matched_score: None,
            is_positive: false,
        }
    }

    pub fn positive(max_iou: f64, index: usize, label: &PseudoLabel) -> Self {
        Self {
            max_iou,
            matched_index: Some(index),
            assigned_category: ClassLabel::Foreground(label.category),
            matched_score: Some(label.score),
            is_positive: true,
        }
    }

    /// Checks the positive/negative field coupling against `delta_b`.
    pub fn is_consistent(&self, delta_b: f64) -> bool {
        let positive = self.max_iou > delta_b;
        positive == self.is_positive
            && self.is_positive == self.assigned_category.is_foreground()
            && self.is_positive == self.matched_index.is_some()
            && self.is_positive == self.matched_score.is_some()
    }
}

/// Highest IoU between `bbox` and any label, with its index. Ties go to the
/// lowest index.
pub fn max_overlap(bbox: &BBox, labels: &[PseudoLabel]) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for (i, label) in labels.iter().enumerate() {
        let v = bbox.iou(&label.bbox);
        if best.1.is_none() || v > best.0 {
            best = (v, Some(i));
        }
    }
    best
}

/// Assigns a proposal the label of its best-overlapping pseudo label when that
/// overlap strictly exceeds `delta_b`, and background otherwise.
pub fn assign(proposal: &Proposal, labels: &[PseudoLabel], delta_b: f64) -> Assignment {
    let (max_iou, index) = max_overlap(&proposal.bbox, labels);
    match index {
        Some(i) if max_iou > delta_b => Assignment::positive(max_iou, i, &labels[i]),
        _ => Assignment::negative(max_iou),
    }
}

/// Stratified random subset of a pool given per-item positive flags.
///
/// Positives are capped at `ceil(positive_fraction * n_total)`; a short stratum
/// is backfilled from the other. Returns the chosen positives, then the chosen
/// negatives, each in pool order.
pub fn sample_indices<R: Rng + ?Sized>(
    positives: &[bool],
    n_total: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_closed("positive_fraction", positive_fraction, 0.0, 1.0, "[0, 1]")?;
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..positives.len()).partition(|&i| positives[i]);

    let cap = (positive_fraction * n_total as f64).ceil() as usize;
    let n_pos = cap.min(pos.len()).min(n_total);
    let n_neg = (n_total - n_pos).min(neg.len());
    let n_pos = (n_total - n_neg).min(pos.len());

    let mut out = Vec::with_capacity(n_pos + n_neg);
    for (stratum, n) in [(&pos, n_pos), (&neg, n_neg)] {
        let mut picked = index::sample(rng, stratum.len(), n).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|j| stratum[j]));
    }
    Ok(out)
}

/// [`sample_indices`] over proposals, with positives decided by [`assign`].
pub fn sample_proposals<R: Rng + ?Sized>(
    all: &[Proposal],
    labels: &[PseudoLabel],
    n_total: usize,
    positive_fraction: f64,
    delta_b: f64,
    rng: &mut R,
) -> Result<Vec<Proposal>> {
    let positives: Vec<bool> = all
        .iter()
        .map(|p| assign(p, labels, delta_b).is_positive)
        .collect();
    Ok(sample_indices(&positives, n_total, positive_fraction, rng)?
        .into_iter()
        .map(|i| all[i])
        .collect())
}
