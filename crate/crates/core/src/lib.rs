//! Region uncertainty for pseudo-label based semi-supervised detection.
//!
//! Proposals are labeled by max-IoU assignment against (noisy) pseudo labels;
//! each positive gets an uncertainty from its matched score and its overlap,
//! which turns the one-hot target into a soft target that leaks mass to
//! background. A synthetic simulator and a toy linear classifier exercise the
//! whole chain at desk scale.

pub mod analysis;
pub mod assignment;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod noise_sim;
pub mod records;
pub mod rng;
pub mod soft_target;
pub mod toy_trainer;
pub mod uncertainty;

pub use assignment::{assign, Assignment, ClassLabel, Proposal, PseudoLabel};
pub use error::{Error, Result};
pub use geometry::BBox;
pub use soft_target::{build_soft_target, SoftTarget};
pub use uncertainty::UncertaintyConfig;
