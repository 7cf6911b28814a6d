//! Uncertainty-aware soft targets.

use serde::{Deserialize, Serialize};

use crate::assignment::{Assignment, ClassLabel};
use crate::error::{check_closed, Error, Result};

/// Distribution over `K` foreground classes plus a trailing background slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    pub foreground: Vec<f64>,
    pub background: f64,
}

impl SoftTarget {
    pub fn pure_background(num_classes: usize) -> Self {
        Self {
            foreground: vec![0.0; num_classes],
            background: 1.0,
        }
    }

    pub fn one_hot(label: ClassLabel, num_classes: usize) -> Result<Self> {
        let mut target = Self::pure_background(num_classes);
        if let ClassLabel::Foreground(c) = label {
            check_category(c, num_classes)?;
            target.foreground[c] = 1.0;
            target.background = 0.0;
        }
        Ok(target)
    }

    pub fn num_classes(&self) -> usize {
        self.foreground.len()
    }

    /// The `K + 1` slot vector, background last.
    pub fn slots(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.foreground.len() + 1);
        self.write_slots(&mut v);
        v
    }

    pub fn write_slots(&self, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.foreground);
        out.push(self.background);
    }

    pub fn total(&self) -> f64 {
        self.foreground.iter().sum::<f64>() + self.background
    }
}

fn check_category(c: usize, num_classes: usize) -> Result<()> {
    if c < num_classes {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "category",
            value: c as f64,
            range: "[0, K)",
        })
    }
}

/// Moves `u_beta` of the assigned class's mass onto background. Negatives map
/// to pure background whatever `u_beta` is.
pub fn build_soft_target(
    assignment: &Assignment,
    u_beta: f64,
    num_classes: usize,
) -> Result<SoftTarget> {
    check_closed("u_beta", u_beta, 0.0, 1.0, "[0, 1]")?;
    let mut target = SoftTarget::pure_background(num_classes);
    if let (true, ClassLabel::Foreground(c)) =
        (assignment.is_positive, assignment.assigned_category)
    {
        check_category(c, num_classes)?;
        target.foreground[c] = 1.0 - u_beta;
        // background closes the simplex
        target.background = 1.0 - target.foreground[c];
    }
    Ok(target)
}
