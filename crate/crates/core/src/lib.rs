//! Hierarchical multiple-instance classification with coarse/fine feature
//! integration and hierarchy-aware losses.
//!
//! A slide is a bag of patch feature vectors. The network pools the bag into
//! one vector, splits it into a coarse half and a fine half, lets each half see
//! the other through a stop-gradient, projects each level to one feature row
//! per class, and reads one logit per class from its own row.

pub mod ablation;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
