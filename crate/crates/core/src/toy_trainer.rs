//! Desk-scale classifier trained on simulated proposals.
//!
//! Each proposal gets a feature vector drawn around the prototype of its true
//! category; a linear head maps features to `K + 1` logits. The learner only
//! sees the (noisy) assigned labels, turned into hard one-hot targets or into
//! uncertainty-aware soft targets whose uncertainty follows the live schedule.
//! Accuracy is always measured against the true category.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{Assignment, ClassLabel};
use crate::error::{check_closed, Error, Result};
use crate::losses::{
    focal_sigmoid_with_grad, kl_softmax_with_grad, sigmoid, softmax, weighted_l1, weighted_l1_grad,
    BoxDelta, CompensatedSum,
};
use crate::noise_sim::{Dataset, SceneRecord};
use crate::rng::{derive_seed, stream};
use crate::soft_target::{build_soft_target, SoftTarget};
use crate::uncertainty::{region_uncertainty, UncertaintyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    SoftmaxKl,
    SigmoidFocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Targets {
    Hard,
    UncertaintySoft,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::SoftmaxKl => "softmax-kl",
            Head::SigmoidFocal => "sigmoid-focal",
        }
    }
}

impl Targets {
    pub fn name(self) -> &'static str {
        match self {
            Targets::Hard => "hard",
            Targets::UncertaintySoft => "uncertainty-soft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    pub dim: usize,
    /// Norm of every class prototype.
    pub separation: f64,
    /// Per-dimension std of the isotropic feature noise.
    pub noise_std: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            dim: 32,
            separation: 3.0,
            noise_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub head: Head,
    pub targets: Targets,
    pub iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub gamma: f64,
    pub regression_weight: f64,
    pub log_every: u64,
    pub heldout_fraction: f64,
    pub features: FeatureParams,
    /// `total_iterations` must equal `iterations`.
    pub uncertainty: UncertaintyConfig,
    /// Replaces `u(beta)` of every positive with a constant (ablations).
    pub uncertainty_override: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let iterations = 2000;
        Self {
            head: Head::SigmoidFocal,
            targets: Targets::UncertaintySoft,
            iterations,
            learning_rate: 0.1,
            batch_size: 64,
            seed: 0,
            gamma: 2.0,
            regression_weight: 1.0,
            log_every: 100,
            heldout_fraction: 0.2,
            features: FeatureParams::default(),
            uncertainty: UncertaintyConfig::with_total_iterations(iterations),
            uncertainty_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 {
            return bad("iterations, batch_size and log_every must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        check_closed(
            "regression_weight",
            self.regression_weight,
            0.0,
            f64::MAX,
            "[0, inf)",
        )?;
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return bad("heldout_fraction must lie in (0, 1)".into());
        }
        if self.features.dim < 2 {
            return bad(format!(
                "features.dim must be at least 2, got {}",
                self.features.dim
            ));
        }
        check_closed(
            "noise_std",
            self.features.noise_std,
            0.0,
            f64::MAX,
            "[0, inf)",
        )?;
        check_closed(
            "separation",
            self.features.separation,
            0.0,
            f64::MAX,
            "[0, inf)",
        )?;
        if let Some(u) = self.uncertainty_override {
            check_closed("uncertainty_override", u, 0.0, 1.0, "[0, 1]")?;
        }
        self.uncertainty.validate()?;
        if self.uncertainty.total_iterations != self.iterations {
            return bad(format!(
                "uncertainty schedule spans {} iterations but training runs {}",
                self.uncertainty.total_iterations, self.iterations
            ));
        }
        Ok(())
    }
}

/// Class prototypes for `K + 1` slots plus the feature noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub prototypes: Vec<Vec<f64>>,
    pub noise_std: f64,
}

impl FeatureModel {
    pub fn new(num_classes: usize, params: &FeatureParams, seed: u64) -> Self {
        let mut rng = stream(seed, "prototypes", 0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let prototypes = (0..=num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..params.dim).map(|_| normal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter()
                    .map(|x| x * params.separation / norm)
                    .collect()
            })
            .collect();
        Self {
            prototypes,
            noise_std: params.noise_std,
        }
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len() - 1
    }

    pub fn sample<R: Rng + ?Sized>(&self, label: ClassLabel, rng: &mut R) -> Vec<f64> {
        let proto = &self.prototypes[label.slot(self.num_classes())];
        if self.noise_std == 0.0 {
            return proto.clone();
        }
        let normal = Normal::new(0.0, self.noise_std).expect("finite noise std");
        proto.iter().map(|p| p + normal.sample(rng)).collect()
    }
}

/// One proposal as the trainer sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scene_id: usize,
    pub features: Vec<f64>,
    pub assignment: Assignment,
    /// Hidden from the loss; used for metrics only.
    pub truth: ClassLabel,
    /// Deltas to the matched pseudo box, for positives.
    pub reg_target: Option<BoxDelta>,
    /// Deltas to the true object, for proposals that truly cover one.
    pub clean_delta: Option<BoxDelta>,
}

impl Sample {
    pub fn is_noisy_positive(&self) -> bool {
        self.assignment.is_positive && self.assignment.assigned_category != self.truth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

/// Whether `scene_id` belongs to the heldout split; spreads the heldout
/// scenes evenly at rate `fraction`.
pub fn is_heldout(scene_id: usize, fraction: f64) -> bool {
    ((scene_id + 1) as f64 * fraction).floor() > (scene_id as f64 * fraction).floor()
}

fn scene_samples(record: &SceneRecord, features: &FeatureModel, seed: u64) -> Vec<Sample> {
    let mut rng = stream(seed, "features", record.scene_id as u64);
    record
        .proposals
        .iter()
        .filter(|p| p.sampled)
        .map(|p| {
            let truth = p.true_label();
            let bbox = p.proposal.bbox;
            let reg_target = p
                .assignment
                .matched_index
                .map(|i| BoxDelta::encode(&bbox, &record.labels[i].label.bbox));
            let clean_delta = match truth {
                ClassLabel::Foreground(_) => record
                    .scene
                    .objects
                    .iter()
                    .map(|gt| (gt.bbox.iou(&bbox), gt))
                    .fold(None, |acc: Option<(f64, _)>, cur| match acc {
                        Some(a) if a.0 >= cur.0 => Some(a),
                        _ => Some(cur),
                    })
                    .map(|(_, gt)| BoxDelta::encode(&bbox, &gt.bbox)),
                ClassLabel::Background => None,
            };
            Sample {
                scene_id: record.scene_id,
                features: features.sample(truth, &mut rng),
                assignment: p.assignment,
                truth,
                reg_target,
                clean_delta,
            }
        })
        .collect()
}

/// Features for the sampled proposals of every scene, split by scene.
pub fn prepare(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainingData> {
    cfg.validate()?;
    let features = FeatureModel::new(dataset.num_classes, &cfg.features, cfg.seed);
    let mut data = TrainingData {
        num_classes: dataset.num_classes,
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for record in &dataset.scenes {
        let samples = scene_samples(record, &features, cfg.seed);
        if is_heldout(record.scene_id, cfg.heldout_fraction) {
            data.heldout.extend(samples);
        } else {
            data.train.extend(samples);
        }
    }
    let positives = data
        .train
        .iter()
        .filter(|s| s.assignment.is_positive)
        .count();
    if positives == 0 || positives == data.train.len() {
        return Err(Error::InvalidConfig(
            "training split needs both positive and negative proposals".into(),
        ));
    }
    Ok(data)
}

/// Anything that maps features to per-slot probabilities.
pub trait Predictor {
    fn num_classes(&self) -> usize;

    /// `K + 1` probabilities (background last). For independent heads these
    /// need not sum to one.
    fn probabilities(&self, features: &[f64]) -> Vec<f64>;

    fn predict(&self, features: &[f64]) -> usize {
        argmax(&self.probabilities(features))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Linear classification head plus a linear box-regression head, both with a
/// bias column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub head: Head,
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `(K + 1) x (dim + 1)`.
    pub class_weights: Vec<f64>,
    /// Row-major `4 x (dim + 1)`.
    pub box_weights: Vec<f64>,
}

impl LinearModel {
    pub fn new(head: Head, num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "init", 0);
        let normal = Normal::new(0.0, 0.01).expect("init std");
        let cols = dim + 1;
        Self {
            head,
            num_classes,
            dim,
            class_weights: (0..(num_classes + 1) * cols)
                .map(|_| normal.sample(&mut rng))
                .collect(),
            box_weights: vec![0.0; 4 * cols],
        }
    }

    fn affine(weights: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
        let cols = x.len() + 1;
        (0..rows)
            .map(|r| {
                let w = &weights[r * cols..(r + 1) * cols];
                w[..cols - 1].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[cols - 1]
            })
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        Self::affine(&self.class_weights, self.num_classes + 1, x)
    }

    pub fn box_delta(&self, x: &[f64]) -> BoxDelta {
        let v = Self::affine(&self.box_weights, 4, x);
        BoxDelta::from_array([v[0], v[1], v[2], v[3]])
    }

    /// Classification loss and its gradient with respect to the logits.
    pub fn class_loss(
        &self,
        target: &SoftTarget,
        x: &[f64],
        gamma: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let slots = target.slots();
        let z = self.logits(x);
        match self.head {
            Head::SoftmaxKl => kl_softmax_with_grad(&slots, &z),
            Head::SigmoidFocal => focal_sigmoid_with_grad(&slots, &z, gamma),
        }
    }
}

impl Predictor for LinearModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn probabilities(&self, features: &[f64]) -> Vec<f64> {
        let z = self.logits(features);
        match self.head {
            Head::SoftmaxKl => softmax(&z),
            Head::SigmoidFocal => z.into_iter().map(sigmoid).collect(),
        }
    }
}

/// Per-sample uncertainty used at iteration `t`: 0 for hard targets.
pub fn sample_uncertainty(sample: &Sample, t: u64, cfg: &TrainConfig) -> Result<f64> {
    if cfg.targets == Targets::Hard || !sample.assignment.is_positive {
        return Ok(0.0);
    }
    match cfg.uncertainty_override {
        Some(u) => Ok(u),
        None => region_uncertainty(&sample.assignment, t, &cfg.uncertainty),
    }
}

pub fn sample_target(sample: &Sample, u: f64, num_classes: usize) -> Result<SoftTarget> {
    build_soft_target(&sample.assignment, u, num_classes)
}

#[derive(Debug)]
struct Gradients {
    class: Vec<f64>,
    boxes: Vec<f64>,
}

/// Mean loss over `batch` at iteration `t`, accumulating into `grads` when
/// given.
fn batch_pass(
    model: &LinearModel,
    batch: &[&Sample],
    t: u64,
    cfg: &TrainConfig,
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    let cols = model.dim + 1;
    let mut total = CompensatedSum::default();
    for sample in batch {
        let x = &sample.features;
        let u = sample_uncertainty(sample, t, cfg)?;
        let target = sample_target(sample, u, model.num_classes)?;
        let (loss, dz) = model.class_loss(&target, x, cfg.gamma)?;
        total.add(loss);
        if let Some(g) = grads.as_deref_mut() {
            for (r, d) in dz.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut g.class[r * cols..(r + 1) * cols];
                for (w, xi) in row.iter_mut().zip(x) {
                    *w += d * xi;
                }
                row[cols - 1] += d;
            }
        }
        if let (Some(reg_target), true) = (sample.reg_target, cfg.regression_weight > 0.0) {
            let pred = model.box_delta(x);
            total.add(cfg.regression_weight * weighted_l1(&pred, &reg_target, u)?);
            if let Some(g) = grads.as_deref_mut() {
                let dp = weighted_l1_grad(&pred, &reg_target, u);
                for (r, d) in dp.iter().enumerate() {
                    let d = d * cfg.regression_weight;
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut g.boxes[r * cols..(r + 1) * cols];
                    for (w, xi) in row.iter_mut().zip(x) {
                        *w += d * xi;
                    }
                    row[cols - 1] += d;
                }
            }
        }
    }
    Ok(total.value() / batch.len().max(1) as f64)
}

/// Mean training loss of `model` on `batch` at iteration `t`.
pub fn batch_loss(
    model: &LinearModel,
    batch: &[&Sample],
    t: u64,
    cfg: &TrainConfig,
) -> Result<f64> {
    batch_pass(model, batch, t, cfg, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub loss: f64,
    pub clean_accuracy: f64,
    pub mean_u_clean: f64,
    pub mean_u_noisy: f64,
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "iteration",
        "loss",
        "clean_accuracy",
        "mean_u_clean",
        "mean_u_noisy",
    ])?;
    for row in trace {
        w.write_record([
            row.iteration.to_string(),
            row.loss.to_string(),
            row.clean_accuracy.to_string(),
            row.mean_u_clean.to_string(),
            row.mean_u_noisy.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Share of samples whose predicted slot is the true one.
pub fn clean_accuracy<P: Predictor + ?Sized>(model: &P, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let k = model.num_classes();
    let hits = samples
        .iter()
        .filter(|s| model.predict(&s.features) == s.truth.slot(k))
        .count();
    hits as f64 / samples.len() as f64
}

fn mean_uncertainty(samples: &[Sample], t: u64, cfg: &UncertaintyConfig) -> Result<(f64, f64)> {
    let mut clean = (CompensatedSum::default(), 0usize);
    let mut noisy = (CompensatedSum::default(), 0usize);
    for s in samples.iter().filter(|s| s.assignment.is_positive) {
        let u = region_uncertainty(&s.assignment, t, cfg)?;
        let bucket = if s.is_noisy_positive() {
            &mut noisy
        } else {
            &mut clean
        };
        bucket.0.add(u);
        bucket.1 += 1;
    }
    let mean = |(s, n): (CompensatedSum, usize)| if n == 0 { 0.0 } else { s.value() / n as f64 };
    Ok((mean(clean), mean(noisy)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: LinearModel,
    pub trace: Vec<TraceRow>,
}

/// Plain SGD with a constant learning rate. Runs single-threaded; the result
/// is a pure function of the data and the config.
pub fn train(train_set: &[Sample], num_classes: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dim = train_set
        .first()
        .map(|s| s.features.len())
        .ok_or_else(|| Error::InvalidConfig("empty training set".into()))?;
    let mut model = LinearModel::new(cfg.head, num_classes, dim, cfg.seed);
    let mut grads = Gradients {
        class: vec![0.0; model.class_weights.len()],
        boxes: vec![0.0; model.box_weights.len()],
    };
    let mut rng = stream(cfg.seed, "batches", 0);
    let mut trace = Vec::new();
    let mut window = (CompensatedSum::default(), 0u64);
    let step = cfg.learning_rate / cfg.batch_size as f64;

    for t in 0..cfg.iterations {
        let batch: Vec<&Sample> = (0..cfg.batch_size)
            .map(|_| &train_set[rng.random_range(0..train_set.len())])
            .collect();
        grads.class.iter_mut().for_each(|g| *g = 0.0);
        grads.boxes.iter_mut().for_each(|g| *g = 0.0);
        let loss = batch_pass(&model, &batch, t, cfg, Some(&mut grads))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: t, loss });
        }
        for (w, g) in model.class_weights.iter_mut().zip(&grads.class) {
            *w -= step * g;
        }
        for (w, g) in model.box_weights.iter_mut().zip(&grads.boxes) {
            *w -= step * g;
        }
        if model.class_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged {
                iteration: t,
                loss: f64::NAN,
            });
        }
        window.0.add(loss);
        window.1 += 1;

        let done = t + 1;
        if done % cfg.log_every == 0 || done == cfg.iterations {
            let (mean_u_clean, mean_u_noisy) = mean_uncertainty(train_set, t, &cfg.uncertainty)?;
            trace.push(TraceRow {
                iteration: done,
                loss: window.0.value() / window.1 as f64,
                clean_accuracy: clean_accuracy(&model, train_set),
                mean_u_clean,
                mean_u_noisy,
            });
            window = (CompensatedSum::default(), 0);
        }
    }
    Ok(TrainOutcome { model, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub accuracy: f64,
    /// Per true slot (background last); `None` when the slot never occurs.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean predicted background probability on positives whose assigned
    /// category is wrong.
    pub mean_background_on_noisy_positives: Option<f64>,
}

pub fn evaluate<P: Predictor + ?Sized>(model: &P, heldout: &[Sample]) -> Result<Evaluation> {
    if heldout.is_empty() {
        return Err(Error::EmptyHeldout);
    }
    let k = model.num_classes();
    let mut per_class = vec![(0usize, 0usize); k + 1];
    let mut hits = 0usize;
    let mut bg_mass = (CompensatedSum::default(), 0usize);
    for s in heldout {
        let probs = model.probabilities(&s.features);
        let slot = s.truth.slot(k);
        let hit = argmax(&probs) == slot;
        hits += usize::from(hit);
        per_class[slot].0 += usize::from(hit);
        per_class[slot].1 += 1;
        if s.is_noisy_positive() {
            bg_mass.0.add(probs[k]);
            bg_mass.1 += 1;
        }
    }
    Ok(Evaluation {
        samples: heldout.len(),
        accuracy: hits as f64 / heldout.len() as f64,
        per_class_accuracy: per_class
            .into_iter()
            .map(|(h, n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
        mean_background_on_noisy_positives: (bg_mass.1 > 0)
            .then(|| bg_mass.0.value() / bg_mass.1 as f64),
    })
}

/// Mean L1 between predicted deltas and deltas to the true object, over
/// samples that truly cover an object.
pub fn regression_error(model: &LinearModel, samples: &[Sample]) -> Option<f64> {
    let errors: Vec<f64> = samples
        .iter()
        .filter_map(|s| s.clean_delta.map(|d| model.box_delta(&s.features).l1(&d)))
        .collect();
    (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub targets: Targets,
    pub head: Head,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellReport>,
}

impl CompareReport {
    pub fn cell(&self, targets: Targets, head: Head) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.targets == targets && c.head == head)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub const GRID: [(Targets, Head); 4] = [
    (Targets::Hard, Head::SoftmaxKl),
    (Targets::Hard, Head::SigmoidFocal),
    (Targets::UncertaintySoft, Head::SoftmaxKl),
    (Targets::UncertaintySoft, Head::SigmoidFocal),
];

/// Runs the `{hard, soft} x {softmax-KL, sigmoid-focal}` grid over `n_seeds`
/// paired seeds: within a seed all four cells share features, initialization
/// and batch order. Cells run in parallel; results do not depend on
/// scheduling.
pub fn compare(dataset: &Dataset, base: &TrainConfig, n_seeds: usize) -> Result<CompareReport> {
    if n_seeds == 0 {
        return Err(Error::InvalidConfig(
            "compare needs at least one seed".into(),
        ));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64)
        .map(|i| derive_seed(base.seed, "compare", i))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..GRID.len()).map(move |c| (s, c)))
        .collect();
    let prepared = seeds
        .par_iter()
        .map(|&seed| prepare(dataset, &TrainConfig { seed, ..*base }))
        .collect::<Result<Vec<_>>>()?;
    let results = jobs
        .par_iter()
        .map(|&(s, c)| {
            let (targets, head) = GRID[c];
            let cfg = TrainConfig {
                seed: seeds[s],
                targets,
                head,
                ..*base
            };
            let data = &prepared[s];
            let outcome = train(&data.train, data.num_classes, &cfg)?;
            Ok(evaluate(&outcome.model, &data.heldout)?.accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let cells = GRID
        .iter()
        .enumerate()
        .map(|(c, &(targets, head))| {
            let accuracies: Vec<f64> = (0..seeds.len())
                .map(|s| results[s * GRID.len() + c])
                .collect();
            let (mean, std) = mean_std(&accuracies);
            CellReport {
                targets,
                head,
                accuracies,
                mean,
                std,
            }
        })
        .collect();
    Ok(CompareReport { seeds, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_sim::{simulate, NoiseSpec, SimulationParams};
    use rand::seq::SliceRandom;

    fn dataset(noise: NoiseSpec, scenes: usize) -> Dataset {
        let params = SimulationParams {
            num_scenes: scenes,
            noise,
            ..SimulationParams::default()
        };
        simulate(&params, 0.5, 21).unwrap()
    }

    fn short(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            log_every: iterations / 4,
            uncertainty: UncertaintyConfig::with_total_iterations(iterations),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn soft_loss_equals_hard_loss_at_start() {
        let data = prepare(&dataset(NoiseSpec::default(), 20), &short(100)).unwrap();
        let batch: Vec<&Sample> = data.train.iter().take(256).collect();
        assert!(batch.iter().any(|s| s.assignment.is_positive));
        for head in [Head::SoftmaxKl, Head::SigmoidFocal] {
            let model = LinearModel::new(head, data.num_classes, 32, 3);
            let cfg = |targets| TrainConfig {
                head,
                targets,
                ..short(100)
            };
            let hard = batch_loss(&model, &batch, 0, &cfg(Targets::Hard)).unwrap();
            let soft = batch_loss(&model, &batch, 0, &cfg(Targets::UncertaintySoft)).unwrap();
            assert!((hard - soft).abs() <= 1e-10, "{head:?}: {hard} vs {soft}");
            let later = batch_loss(&model, &batch, 99, &cfg(Targets::UncertaintySoft)).unwrap();
            assert_ne!(hard, later);
        }
    }

    #[test]
    fn trace_is_reproducible_byte_for_byte() {
        let data = prepare(&dataset(NoiseSpec::default(), 20), &short(200)).unwrap();
        let csv = || {
            let out = train(&data.train, data.num_classes, &short(200)).unwrap();
            let mut buf = Vec::new();
            write_trace_csv(&out.trace, &mut buf).unwrap();
            (buf, out.model)
        };
        let (a, ma) = csv();
        let (b, mb) = csv();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5);
    }

    #[test]
    fn full_uncertainty_teaches_background_everywhere() {
        let base = TrainConfig {
            uncertainty_override: Some(1.0),
            ..short(400)
        };
        let data = prepare(&dataset(NoiseSpec::default(), 30), &base).unwrap();
        for head in [Head::SoftmaxKl, Head::SigmoidFocal] {
            let cfg = TrainConfig { head, ..base };
            let model = train(&data.train, data.num_classes, &cfg).unwrap().model;
            let k = data.num_classes;
            assert!(
                data.heldout.iter().all(|s| model.predict(&s.features) == k),
                "{head:?}"
            );
        }
    }

    struct Oracle(Vec<(Vec<f64>, usize)>, usize);

    impl Predictor for Oracle {
        fn num_classes(&self) -> usize {
            self.1
        }
        fn probabilities(&self, features: &[f64]) -> Vec<f64> {
            let slot = self.0.iter().find(|(f, _)| f == features).unwrap().1;
            (0..=self.1)
                .map(|i| if i == slot { 1.0 } else { 0.0 })
                .collect()
        }
    }

    /// Pseudo-random scores keyed by the feature bits.
    struct Coin(usize);

    impl Predictor for Coin {
        fn num_classes(&self) -> usize {
            self.0
        }
        fn probabilities(&self, features: &[f64]) -> Vec<f64> {
            let key = features
                .iter()
                .fold(0u64, |h, x| h.rotate_left(7) ^ x.to_bits());
            let mut rng = stream(key, "coin", 0);
            (0..=self.0).map(|_| rng.random::<f64>()).collect()
        }
    }

    fn synthetic_heldout(n: usize, k: usize) -> Vec<Sample> {
        let fm = FeatureModel::new(k, &FeatureParams::default(), 5);
        let mut rng = stream(5, "heldout", 0);
        (0..n)
            .map(|_| {
                let truth = ClassLabel::from_slot(rng.random_range(0..=k), k);
                Sample {
                    scene_id: 0,
                    features: fm.sample(truth, &mut rng),
                    assignment: Assignment::negative(0.0),
                    truth,
                    reg_target: None,
                    clean_delta: None,
                }
            })
            .collect()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let heldout = synthetic_heldout(500, 10);
        let oracle = Oracle(
            heldout
                .iter()
                .map(|s| (s.features.clone(), s.truth.slot(10)))
                .collect(),
            10,
        );
        let e = evaluate(&oracle, &heldout).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert!(e.per_class_accuracy.iter().flatten().all(|&a| a == 1.0));
    }

    #[test]
    fn random_predictor_hits_one_in_eleven() {
        let heldout = synthetic_heldout(20_000, 10);
        let acc = evaluate(&Coin(10), &heldout).unwrap().accuracy;
        assert!((acc - 1.0 / 11.0).abs() <= 0.02, "{acc}");
    }

    #[test]
    fn evaluation_ignores_order() {
        let data = prepare(&dataset(NoiseSpec::default(), 30), &short(200)).unwrap();
        let model = train(&data.train, data.num_classes, &short(200))
            .unwrap()
            .model;
        let a = evaluate(&model, &data.heldout).unwrap();
        let mut shuffled = data.heldout.clone();
        shuffled.shuffle(&mut stream(1, "shuffle", 0));
        let b = evaluate(&model, &shuffled).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.per_class_accuracy, b.per_class_accuracy);
        let (x, y) = (
            a.mean_background_on_noisy_positives.unwrap(),
            b.mean_background_on_noisy_positives.unwrap(),
        );
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn empty_heldout_is_an_error() {
        let model = LinearModel::new(Head::SoftmaxKl, 10, 32, 0);
        assert!(matches!(evaluate(&model, &[]), Err(Error::EmptyHeldout)));
    }

    #[test]
    fn sigmoid_head_can_fire_on_two_classes() {
        let cfg = TrainConfig {
            head: Head::SigmoidFocal,
            targets: Targets::Hard,
            ..short(1000)
        };
        let data = prepare(&dataset(NoiseSpec::noiseless(), 40), &cfg).unwrap();
        let model = train(&data.train, data.num_classes, &cfg).unwrap().model;
        let fm = FeatureModel::new(data.num_classes, &cfg.features, cfg.seed);
        let k = data.num_classes;
        let multi_peak = (0..k).any(|a| {
            (a + 1..k).any(|b| {
                let x: Vec<f64> = fm.prototypes[a]
                    .iter()
                    .zip(&fm.prototypes[b])
                    .map(|(p, q)| 2.0 * (p + q))
                    .collect();
                model.probabilities(&x)[..k]
                    .iter()
                    .filter(|&&p| p > 0.5)
                    .count()
                    >= 2
            })
        });
        assert!(multi_peak);
    }

    /// With certain labels (no corruption, scores near 1) and proposals
    /// tight around their objects, every positive has `u(beta)` close to 0
    /// and soft targets collapse onto hard ones.
    #[test]
    fn targets_agree_when_labels_are_certain() {
        let mut noise = NoiseSpec::noiseless();
        noise.score.clean = crate::noise_sim::BetaParams {
            alpha: 1000.0,
            beta: 1.0,
        };
        let mut params = SimulationParams {
            noise,
            ..SimulationParams::default()
        };
        params.proposals.max_jitter = 0.05;
        let d = simulate(&params, 0.5, 21).unwrap();
        for head in [Head::SoftmaxKl, Head::SigmoidFocal] {
            let cfg = |targets| TrainConfig {
                head,
                targets,
                ..TrainConfig::default()
            };
            let data = prepare(&d, &cfg(Targets::Hard)).unwrap();
            let acc = |targets| {
                let m = train(&data.train, data.num_classes, &cfg(targets))
                    .unwrap()
                    .model;
                evaluate(&m, &data.heldout).unwrap().accuracy
            };
            let (hard, soft) = (acc(Targets::Hard), acc(Targets::UncertaintySoft));
            assert!(
                (hard - soft).abs() <= 0.005,
                "{head:?}: hard {hard} soft {soft}"
            );
        }
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            head: Head::SoftmaxKl,
            learning_rate: 1e308,
            ..short(50)
        };
        let data = prepare(&dataset(NoiseSpec::default(), 10), &cfg).unwrap();
        assert!(matches!(
            train(&data.train, data.num_classes, &cfg),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn config_checks_schedule_length() {
        let cfg = TrainConfig {
            iterations: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(short(10).validate().is_ok());
    }

    #[test]
    fn heldout_split_rate() {
        let n = (0..1000).filter(|&i| is_heldout(i, 0.2)).count();
        assert_eq!(n, 200);
    }

    #[test]
    fn compare_reports_every_cell() {
        let report = compare(&dataset(NoiseSpec::default(), 20), &short(100), 1).unwrap();
        assert_eq!(report.cells.len(), 4);
        for (t, h) in GRID {
            let c = report.cell(t, h).unwrap();
            assert_eq!((c.accuracies.len(), c.std), (1, 0.0));
        }
    }
}
