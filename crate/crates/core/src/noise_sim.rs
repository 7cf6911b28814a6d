//! Synthetic scenes and corrupted pseudo labels.
//!
//! Pseudo labels are produced from ground truth by three independent
//! mechanisms: dropping objects (missed GT), replacing categories
//! (classification error) and jittering corners (localization error, which
//! shows up downstream as assignment error). Corrupted labels draw their
//! score from a lower-skewed Beta distribution than clean ones.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign, sample_indices, Assignment, ClassLabel, Proposal, PseudoLabel};
use crate::error::{check_closed, Error, Result};
use crate::geometry::BBox;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub objects: Vec<GroundTruth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub width: f64,
    pub height: f64,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 100.0,
            height: 100.0,
            num_classes: 10,
            min_objects: 1,
            max_objects: 6,
            min_size: 8.0,
            max_size: 40.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad("scene extent must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("need 0 < min_size <= max_size".into());
        }
        if self.max_size > self.width.min(self.height) {
            return bad("max_size does not fit in the scene".into());
        }
        Ok(())
    }
}

pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let n = rng.random_range(params.min_objects..=params.max_objects);
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let w = rng.random_range(params.min_size..=params.max_size);
        let h = rng.random_range(params.min_size..=params.max_size);
        let x1 = rng.random_range(0.0..=params.width - w);
        let y1 = rng.random_range(0.0..=params.height - h);
        let category = rng.random_range(0..params.num_classes);
        objects.push(GroundTruth {
            bbox: BBox::new(x1, y1, x1 + w, y1 + h)?,
            category,
        });
    }
    Ok(Scene {
        width: params.width,
        height: params.height,
        objects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreModel {
    pub clean: BetaParams,
    pub noisy: BetaParams,
    /// Jittered labels whose IoU with their source object falls below this
    /// count as corrupted (flag `jittered`) and draw a noisy score.
    pub mislocalized_iou: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        Self {
            clean: BetaParams {
                alpha: 8.0,
                beta: 2.0,
            },
            noisy: BetaParams {
                alpha: 3.0,
                beta: 3.0,
            },
            mislocalized_iou: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub p_miss: f64,
    pub p_flip: f64,
    /// Corner jitter std as a fraction of box width/height.
    pub loc_sigma: f64,
    pub score: ScoreModel,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            p_miss: 0.1,
            p_flip: 0.3,
            loc_sigma: 0.1,
            score: ScoreModel::default(),
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            p_miss: 0.0,
            p_flip: 0.0,
            loc_sigma: 0.0,
            score: ScoreModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_closed("p_miss", self.p_miss, 0.0, 1.0, "[0, 1]")?;
        check_closed("p_flip", self.p_flip, 0.0, 1.0, "[0, 1]")?;
        check_closed("loc_sigma", self.loc_sigma, 0.0, f64::MAX, "[0, inf)")?;
        check_closed(
            "mislocalized_iou",
            self.score.mislocalized_iou,
            0.0,
            1.0,
            "[0, 1]",
        )?;
        for p in [self.score.clean, self.score.noisy] {
            if !(p.alpha > 0.0 && p.beta > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "Beta parameters must be positive, got ({}, {})",
                    p.alpha, p.beta
                )));
            }
        }
        Ok(())
    }
}

/// Where a pseudo label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub gt_index: Option<usize>,
    pub flipped: bool,
    pub jittered: bool,
}

impl Provenance {
    pub fn is_clean(&self) -> bool {
        !self.flipped && !self.jittered
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyLabel {
    pub label: PseudoLabel,
    pub provenance: Provenance,
}

/// Draws from `N(mean, std)` truncated to `[lo, hi]` by rejection; falls back
/// to the clamped mean if the window is far in the tail.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    if std <= 0.0 || lo >= hi {
        return mean.clamp(lo, hi);
    }
    let normal = Normal::new(mean, std).expect("finite positive std");
    for _ in 0..1000 {
        let v = normal.sample(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
    mean.clamp(lo, hi)
}

/// Jitters each corner by `N(0, sigma * size)`, truncated so the box keeps at
/// least 10% of its original width/height on each side of its center and stays
/// inside the extent.
pub fn jitter_box<R: Rng + ?Sized>(
    rng: &mut R,
    bbox: &BBox,
    sigma: f64,
    width: f64,
    height: f64,
) -> Result<BBox> {
    if sigma == 0.0 {
        return Ok(*bbox);
    }
    let (cx, cy) = bbox.center();
    let (w, h) = (bbox.width(), bbox.height());
    let (mx, my) = (0.05 * w, 0.05 * h);
    let x1 = truncated_normal(rng, bbox.x1(), sigma * w, 0.0, cx - mx);
    let y1 = truncated_normal(rng, bbox.y1(), sigma * h, 0.0, cy - my);
    let x2 = truncated_normal(rng, bbox.x2(), sigma * w, cx + mx, width);
    let y2 = truncated_normal(rng, bbox.y2(), sigma * h, cy + my, height);
    BBox::new(x1, y1, x2, y2)
}

fn draw_score<R: Rng + ?Sized>(rng: &mut R, params: BetaParams) -> f64 {
    Beta::new(params.alpha, params.beta)
        .expect("validated Beta parameters")
        .sample(rng)
        .clamp(0.0, 1.0)
}

/// Pseudo labels for `scene` under `spec`. Each object is independently
/// dropped, then possibly flipped to a uniformly chosen other class, then
/// jittered; the score is drawn from the clean or noisy score model.
pub fn corrupt<R: Rng + ?Sized>(
    scene: &Scene,
    spec: &NoiseSpec,
    num_classes: usize,
    rng: &mut R,
) -> Result<Vec<NoisyLabel>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(scene.objects.len());
    for (i, gt) in scene.objects.iter().enumerate() {
        // draws happen unconditionally so that changing one rate does not
        // reshuffle the randomness behind the others
        let miss = rng.random::<f64>() < spec.p_miss;
        let flip = rng.random::<f64>() < spec.p_flip && num_classes > 1;
        let other = rng.random_range(0..num_classes.max(2) - 1);
        let bbox = jitter_box(rng, &gt.bbox, spec.loc_sigma, scene.width, scene.height)?;
        let clean_score = draw_score(rng, spec.score.clean);
        let noisy_score = draw_score(rng, spec.score.noisy);
        if miss {
            continue;
        }
        let category = if flip {
            if other >= gt.category {
                other + 1
            } else {
                other
            }
        } else {
            gt.category
        };
        let jittered = bbox.iou(&gt.bbox) < spec.score.mislocalized_iou;
        let provenance = Provenance {
            gt_index: Some(i),
            flipped: flip,
            jittered,
        };
        let score = if provenance.is_clean() {
            clean_score
        } else {
            noisy_score
        };
        out.push(NoisyLabel {
            label: PseudoLabel::new(bbox, category, score)?,
            provenance,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalParams {
    /// Proposals generated per scene.
    pub per_scene: usize,
    /// Share of proposals derived from ground-truth boxes.
    pub foreground_fraction: f64,
    /// Corner jitter of object-derived proposals is `N(0, j * size)` with
    /// `j ~ U(0, max_jitter)`.
    pub max_jitter: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Training subset drawn per scene.
    pub sample_size: usize,
    pub positive_fraction: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            per_scene: 250,
            foreground_fraction: 0.5,
            max_jitter: 2.0,
            min_size: 4.0,
            max_size: 50.0,
            sample_size: 64,
            positive_fraction: 0.25,
        }
    }
}

impl ProposalParams {
    pub fn validate(&self) -> Result<()> {
        check_closed(
            "foreground_fraction",
            self.foreground_fraction,
            0.0,
            1.0,
            "[0, 1]",
        )?;
        check_closed("max_jitter", self.max_jitter, 0.0, f64::MAX, "[0, inf)")?;
        check_closed(
            "positive_fraction",
            self.positive_fraction,
            0.0,
            1.0,
            "[0, 1]",
        )?;
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::InvalidConfig(
                "proposal sizes need 0 < min_size <= max_size".into(),
            ));
        }
        Ok(())
    }
}

/// Ground-truth label of a box: the category of its best clean object when
/// that overlap exceeds `delta_b`, background otherwise.
pub fn true_category(bbox: &BBox, scene: &Scene, delta_b: f64) -> ClassLabel {
    let mut best: Option<(f64, usize)> = None;
    for gt in &scene.objects {
        let v = bbox.iou(&gt.bbox);
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, gt.category));
        }
    }
    match best {
        Some((v, c)) if v > delta_b => ClassLabel::Foreground(c),
        _ => ClassLabel::Background,
    }
}

/// Mixture of jittered ground-truth boxes and uniform background boxes.
pub fn generate_proposals<R: Rng + ?Sized>(
    scene: &Scene,
    params: &ProposalParams,
    delta_b: f64,
    rng: &mut R,
) -> Result<Vec<Proposal>> {
    params.validate()?;
    let max_size = params.max_size.min(scene.width).min(scene.height);
    let min_size = params.min_size.min(max_size);
    let mut out = Vec::with_capacity(params.per_scene);
    for _ in 0..params.per_scene {
        let from_object = rng.random::<f64>() < params.foreground_fraction;
        let bbox = if from_object && !scene.objects.is_empty() {
            let gt = &scene.objects[rng.random_range(0..scene.objects.len())];
            let j = if params.max_jitter > 0.0 {
                rng.random_range(0.0..params.max_jitter)
            } else {
                0.0
            };
            jitter_box(rng, &gt.bbox, j, scene.width, scene.height)?
        } else {
            let w = rng.random_range(min_size..=max_size);
            let h = rng.random_range(min_size..=max_size);
            let x1 = rng.random_range(0.0..=scene.width - w);
            let y1 = rng.random_range(0.0..=scene.height - h);
            BBox::new(x1, y1, x1 + w, y1 + h)?
        };
        out.push(Proposal {
            bbox,
            true_category: Some(true_category(&bbox, scene, delta_b)),
        });
    }
    Ok(out)
}

/// Merges several detection passes into one label set. Labels of the same
/// category whose IoU with a cluster's seed box is at least `iou_match` join
/// that cluster (one member per pass, best overlap wins); each cluster becomes
/// one label with averaged corners and score.
pub fn distill(detections: &[Vec<PseudoLabel>], iou_match: f64) -> Result<Vec<PseudoLabel>> {
    if detections.is_empty() {
        return Err(Error::InvalidConfig(
            "distill needs at least one pass".into(),
        ));
    }
    if !(iou_match > 0.0 && iou_match < 1.0) {
        return Err(Error::OutOfRange {
            name: "iou_match",
            value: iou_match,
            range: "(0, 1)",
        });
    }
    struct Cluster {
        members: Vec<PseudoLabel>,
        last_pass: usize,
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    for (pass, labels) in detections.iter().enumerate() {
        for label in labels {
            let best = clusters
                .iter()
                .enumerate()
                .filter(|(_, c)| c.last_pass != pass)
                .filter(|(_, c)| c.members[0].category == label.category)
                .map(|(i, c)| (i, c.members[0].bbox.iou(&label.bbox)))
                .filter(|&(_, v)| v >= iou_match)
                .fold(None::<(usize, f64)>, |acc, cur| match acc {
                    Some(a) if a.1 >= cur.1 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((i, _)) => {
                    clusters[i].members.push(*label);
                    clusters[i].last_pass = pass;
                }
                None => clusters.push(Cluster {
                    members: vec![*label],
                    last_pass: pass,
                }),
            }
        }
    }
    clusters
        .into_iter()
        .map(|c| {
            let seed = c.members[0];
            let n = c.members.len() as f64;
            // offsets from the seed keep identical members exact
            let mean_offset = |f: fn(&PseudoLabel) -> f64| {
                f(&seed) + c.members.iter().map(|m| f(m) - f(&seed)).sum::<f64>() / n
            };
            let bbox = BBox::new(
                mean_offset(|l| l.bbox.x1()),
                mean_offset(|l| l.bbox.y1()),
                mean_offset(|l| l.bbox.x2()),
                mean_offset(|l| l.bbox.y2()),
            )?;
            PseudoLabel::new(
                bbox,
                seed.category,
                mean_offset(|l| l.score).clamp(0.0, 1.0),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub proposal: Proposal,
    pub assignment: Assignment,
    /// Part of the per-scene training sample.
    pub sampled: bool,
}

impl ProposalRecord {
    pub fn true_label(&self) -> ClassLabel {
        self.proposal
            .true_category
            .unwrap_or(ClassLabel::Background)
    }

    /// A positive whose assigned category differs from the truth.
    pub fn is_noisy_positive(&self) -> bool {
        self.assignment.is_positive && self.assignment.assigned_category != self.true_label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: usize,
    pub scene: Scene,
    pub labels: Vec<NoisyLabel>,
    pub proposals: Vec<ProposalRecord>,
}

impl SceneRecord {
    pub fn pseudo_labels(&self) -> Vec<PseudoLabel> {
        self.labels.iter().map(|l| l.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub delta_b: f64,
    pub scenes: Vec<SceneRecord>,
}

impl Dataset {
    pub fn proposals(&self) -> impl Iterator<Item = &ProposalRecord> {
        self.scenes.iter().flat_map(|s| s.proposals.iter())
    }

    pub fn num_proposals(&self) -> usize {
        self.scenes.iter().map(|s| s.proposals.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationParams {
    pub num_scenes: usize,
    pub scene: SceneParams,
    pub noise: NoiseSpec,
    pub proposals: ProposalParams,
    /// Independent corruption passes merged with [`distill`]; 1 disables it.
    pub distill_passes: usize,
    pub distill_iou: f64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            num_scenes: 200,
            scene: SceneParams::default(),
            noise: NoiseSpec::default(),
            proposals: ProposalParams::default(),
            distill_passes: 1,
            distill_iou: 0.7,
        }
    }
}

impl SimulationParams {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.noise.validate()?;
        self.proposals.validate()?;
        if self.distill_passes == 0 {
            return Err(Error::InvalidConfig(
                "distill_passes must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Labels after distillation, with provenance recovered by matching each
/// merged box to its best-overlapping object.
fn distilled_labels<R: Rng + ?Sized>(
    scene: &Scene,
    params: &SimulationParams,
    rng: &mut R,
) -> Result<Vec<NoisyLabel>> {
    let k = params.scene.num_classes;
    let passes = (0..params.distill_passes)
        .map(|_| {
            corrupt(scene, &params.noise, k, rng)
                .map(|v| v.into_iter().map(|l| l.label).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = distill(&passes, params.distill_iou)?;
    Ok(merged
        .into_iter()
        .map(|label| {
            let best = scene
                .objects
                .iter()
                .enumerate()
                .map(|(i, gt)| (i, gt.bbox.iou(&label.bbox)))
                .fold(None::<(usize, f64)>, |acc, cur| match acc {
                    Some(a) if a.1 >= cur.1 => Some(a),
                    _ => Some(cur),
                });
            let provenance = match best {
                Some((i, v)) => Provenance {
                    gt_index: Some(i),
                    flipped: scene.objects[i].category != label.category,
                    jittered: v < params.noise.score.mislocalized_iou,
                },
                None => Provenance {
                    gt_index: None,
                    flipped: false,
                    jittered: true,
                },
            };
            NoisyLabel { label, provenance }
        })
        .collect())
}

/// One scene end to end. Every stage draws from its own stream keyed by
/// `(seed, stage, scene_id)`.
pub fn simulate_scene(
    params: &SimulationParams,
    delta_b: f64,
    seed: u64,
    scene_id: usize,
) -> Result<SceneRecord> {
    let idx = scene_id as u64;
    let scene = generate_scene(&mut stream(seed, "scene", idx), &params.scene)?;
    let mut noise_rng = stream(seed, "noise", idx);
    let labels = if params.distill_passes > 1 {
        distilled_labels(&scene, params, &mut noise_rng)?
    } else {
        corrupt(
            &scene,
            &params.noise,
            params.scene.num_classes,
            &mut noise_rng,
        )?
    };
    let pseudo: Vec<PseudoLabel> = labels.iter().map(|l| l.label).collect();
    let proposals = generate_proposals(
        &scene,
        &params.proposals,
        delta_b,
        &mut stream(seed, "proposals", idx),
    )?;
    let assignments: Vec<Assignment> = proposals
        .iter()
        .map(|p| assign(p, &pseudo, delta_b))
        .collect();
    let positives: Vec<bool> = assignments.iter().map(|a| a.is_positive).collect();
    let picked = sample_indices(
        &positives,
        params.proposals.sample_size,
        params.proposals.positive_fraction,
        &mut stream(seed, "sample", idx),
    )?;
    let mut sampled = vec![false; proposals.len()];
    for i in picked {
        sampled[i] = true;
    }
    Ok(SceneRecord {
        scene_id,
        scene,
        labels,
        proposals: proposals
            .into_iter()
            .zip(assignments)
            .zip(sampled)
            .map(|((proposal, assignment), sampled)| ProposalRecord {
                proposal,
                assignment,
                sampled,
            })
            .collect(),
    })
}

/// Simulates `params.num_scenes` scenes in parallel; the result does not
/// depend on thread scheduling.
pub fn simulate(params: &SimulationParams, delta_b: f64, seed: u64) -> Result<Dataset> {
    params.validate()?;
    let scenes = (0..params.num_scenes)
        .into_par_iter()
        .map(|i| simulate_scene(params, delta_b, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        num_classes: params.scene.num_classes,
        delta_b,
        scenes,
    })
}
