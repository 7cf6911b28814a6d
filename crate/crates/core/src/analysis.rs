//! Aggregations over assigned proposals: label accuracy against max overlap,
//! and the distribution of region uncertainty for clean and noisy positives at
//! several points of the schedule.
//!
//! Everything here is a fold over its input, so results do not depend on input
//! order and partial results merge by addition.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assignment::{Assignment, ClassLabel};
use crate::error::{Error, Result};
use crate::losses::CompensatedSum;
use crate::uncertainty::{region_uncertainty, UncertaintyConfig};

fn bin_index(value: f64, bins: usize) -> usize {
    // the top edge folds into the last bin
    ((value * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBin {
    pub iou_low: f64,
    pub iou_high: f64,
    pub n_pos: u64,
    pub n_neg: u64,
    pub correct_pos: u64,
    pub correct_neg: u64,
}

impl AccuracyBin {
    pub fn acc_pos(&self) -> Option<f64> {
        (self.n_pos > 0).then(|| self.correct_pos as f64 / self.n_pos as f64)
    }

    pub fn acc_neg(&self) -> Option<f64> {
        (self.n_neg > 0).then(|| self.correct_neg as f64 / self.n_neg as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub bins: Vec<AccuracyBin>,
}

impl AccuracyCurve {
    pub fn empty(bins: usize) -> Result<Self> {
        check_bins(bins)?;
        Ok(Self {
            bins: (0..bins)
                .map(|i| AccuracyBin {
                    iou_low: i as f64 / bins as f64,
                    iou_high: (i + 1) as f64 / bins as f64,
                    n_pos: 0,
                    n_neg: 0,
                    correct_pos: 0,
                    correct_neg: 0,
                })
                .collect(),
        })
    }

    pub fn add(&mut self, assignment: &Assignment, truth: ClassLabel) {
        let i = bin_index(assignment.max_iou, self.bins.len());
        let bin = &mut self.bins[i];
        let correct = u64::from(assignment.assigned_category == truth);
        if assignment.is_positive {
            bin.n_pos += 1;
            bin.correct_pos += correct;
        } else {
            bin.n_neg += 1;
            bin.correct_neg += correct;
        }
    }

    pub fn merge(&mut self, other: &AccuracyCurve) {
        assert_eq!(self.bins.len(), other.bins.len(), "bin layouts differ");
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.n_pos += b.n_pos;
            a.n_neg += b.n_neg;
            a.correct_pos += b.correct_pos;
            a.correct_neg += b.correct_neg;
        }
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.n_pos + b.n_neg).sum()
    }

    /// Positive-label accuracies of bins holding at least `min_count`
    /// positives, as `(bin index, accuracy)`.
    pub fn positive_accuracies(&self, min_count: u64) -> Vec<(usize, f64)> {
        self.bins
            .iter()
            .enumerate()
            .filter(|(_, b)| b.n_pos >= min_count)
            .filter_map(|(i, b)| b.acc_pos().map(|a| (i, a)))
            .collect()
    }

    pub fn negative_accuracies(&self, min_count: u64) -> Vec<(usize, f64)> {
        self.bins
            .iter()
            .enumerate()
            .filter(|(_, b)| b.n_neg >= min_count)
            .filter_map(|(i, b)| b.acc_neg().map(|a| (i, a)))
            .collect()
    }

    /// Bin whose lower edge is the first at or above `delta_b`.
    pub fn bin_above(&self, delta_b: f64) -> usize {
        bin_index(delta_b, self.bins.len())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "bin_low", "bin_high", "n_pos", "n_neg", "acc_pos", "acc_neg",
        ])?;
        let opt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
        for b in &self.bins {
            w.write_record([
                b.iou_low.to_string(),
                b.iou_high.to_string(),
                b.n_pos.to_string(),
                b.n_neg.to_string(),
                opt(b.acc_pos()),
                opt(b.acc_neg()),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Fraction of proposals whose assigned category equals the truth, per
/// max-overlap bin and split into positives and negatives.
pub fn accuracy_vs_iou<'a, I>(assigned: I, bins: usize) -> Result<AccuracyCurve>
where
    I: IntoIterator<Item = (&'a Assignment, ClassLabel)>,
{
    let mut curve = AccuracyCurve::empty(bins)?;
    for (a, truth) in assigned {
        curve.add(a, truth);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Early,
    Middle,
    Late,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Early, Stage::Middle, Stage::Late];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Early => "early",
            Stage::Middle => "middle",
            Stage::Late => "late",
        }
    }
}

/// Running count / mean / variance of a population.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    /// Standard error of the mean.
    pub std_error: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct MomentAccumulator {
    n: u64,
    sum: CompensatedSum,
    sum_sq: CompensatedSum,
}

impl MomentAccumulator {
    fn add(&mut self, x: f64) {
        self.n += 1;
        self.sum.add(x);
        self.sum_sq.add(x * x);
    }

    fn finish(&self) -> Moments {
        if self.n == 0 {
            return Moments::default();
        }
        let n = self.n as f64;
        let mean = self.sum.value() / n;
        let var = if self.n > 1 {
            ((self.sum_sq.value() - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Moments {
            count: self.n,
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyHistogram {
    pub stage: Stage,
    pub iteration: u64,
    pub clean_hist: Vec<u64>,
    pub noisy_hist: Vec<u64>,
    pub clean: Moments,
    pub noisy: Moments,
}

impl UncertaintyHistogram {
    pub fn bins(&self) -> usize {
        self.clean_hist.len()
    }

    /// Mean over clean and noisy positives together.
    pub fn population_mean(&self) -> f64 {
        let n = self.clean.count + self.noisy.count;
        if n == 0 {
            return 0.0;
        }
        (self.clean.mean * self.clean.count as f64 + self.noisy.mean * self.noisy.count as f64)
            / n as f64
    }

    /// How many standard errors the noisy mean sits above the clean mean.
    pub fn separation(&self) -> f64 {
        let se = (self.clean.std_error.powi(2) + self.noisy.std_error.powi(2)).sqrt();
        (self.noisy.mean - self.clean.mean) / se
    }
}

/// Histograms of `u(beta(t))` over positives at each `(stage, t)`, split by
/// whether the assigned category matches the truth.
pub fn u_histograms<'a, I>(
    assigned: I,
    cfg: &UncertaintyConfig,
    stages: &[(Stage, u64)],
    bins: usize,
) -> Result<Vec<UncertaintyHistogram>>
where
    I: IntoIterator<Item = (&'a Assignment, ClassLabel)>,
{
    check_bins(bins)?;
    for &(stage, t) in stages {
        if t > cfg.total_iterations {
            return Err(Error::InvalidConfig(format!(
                "{} stage at t={t} lies beyond T={}",
                stage.name(),
                cfg.total_iterations
            )));
        }
    }
    let mut hists: Vec<_> = stages
        .iter()
        .map(|_| {
            (
                vec![0u64; bins],
                vec![0u64; bins],
                MomentAccumulator::default(),
                MomentAccumulator::default(),
            )
        })
        .collect();
    for (a, truth) in assigned {
        if !a.is_positive {
            continue;
        }
        let noisy = a.assigned_category != truth;
        for (&(_, t), h) in stages.iter().zip(hists.iter_mut()) {
            let u = region_uncertainty(a, t, cfg)?;
            let b = bin_index(u, bins);
            if noisy {
                h.1[b] += 1;
                h.3.add(u);
            } else {
                h.0[b] += 1;
                h.2.add(u);
            }
        }
    }
    Ok(stages
        .iter()
        .zip(hists)
        .map(
            |(&(stage, iteration), (clean_hist, noisy_hist, c, n))| UncertaintyHistogram {
                stage,
                iteration,
                clean_hist,
                noisy_hist,
                clean: c.finish(),
                noisy: n.finish(),
            },
        )
        .collect())
}

/// Stage iterations at the given fractions of `T`.
pub fn stage_iterations(total: u64, fractions: [f64; 3]) -> Vec<(Stage, u64)> {
    Stage::ALL
        .iter()
        .zip(fractions)
        .map(|(&s, f)| (s, ((total as f64 * f).round() as u64).min(total)))
        .collect()
}

pub fn write_histograms_csv<W: Write>(hists: &[UncertaintyHistogram], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stage", "bin_low", "bin_high", "clean_count", "noisy_count"])?;
    for h in hists {
        let n = h.bins();
        for i in 0..n {
            w.write_record([
                h.stage.name().to_string(),
                (i as f64 / n as f64).to_string(),
                ((i + 1) as f64 / n as f64).to_string(),
                h.clean_hist[i].to_string(),
                h.noisy_hist[i].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
