//! Artifact-specific MRI quality assessment on synthetic data.
//!
//! The pipeline runs in stages:
//!
//! 1. [`sim`] builds phantoms, encodes them into multi-coil k-space and
//!    injects graded noise or rigid motion.
//! 2. [`estimators`] score every noise version with a heuristic.
//! 3. [`calibration`] shifts each version set's heuristic scores so that the
//!    rater-picked "minimum acceptable" versions agree.
//! 4. [`network`] trains a dual-task model: a noise score head and a motion
//!    probability head on a shared trunk.
//! 5. [`ruler`] turns raw scores into ruler scores and pass/fail decisions
//!    against graded reference images of the same scan type.
//! 6. [`metrics`] and [`dataset`] evaluate the whole thing.

pub mod benchmark;
pub mod calibration;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod fft;
pub mod io;
pub mod metrics;
pub mod network;
pub mod rater;
pub mod ruler;
pub mod scan;
pub mod sim;

pub use error::{Error, Result};
pub use scan::ScanType;
