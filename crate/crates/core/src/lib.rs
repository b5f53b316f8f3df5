//! Rigid registration of 3D point correspondences.
//!
//! The crate bundles a correspondence-classification and pose-regression
//! network (trained with a small reverse-mode autodiff engine), the classical
//! estimators it is measured against, a synthetic data pipeline and the
//! training/evaluation harness used by the `rigidreg` command-line tool.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod estimators;
pub mod geom3d;
pub mod harness;
pub mod regnet;

pub use error::{Error, Result};
