//! Sharpness-aware parametric category discovery at desk scale.
//!
//! A small MLP encoder with a projection head and a cosine classifier is
//! trained on partially labeled data. Training can take worst-case
//! perturbed gradient steps ([`optim`]) and can promote dense,
//! confident members of each new-class cluster to pseudo-labeled anchors
//! ([`das`]). [`eval`] scores clusterings under the best label permutation
//! and [`hessian`] measures the flatness of the final loss surface.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod das;
pub mod data;
pub mod error;
pub mod eval;
pub mod hessian;
pub mod hungarian;
pub mod losses;
pub mod model;
pub mod objective;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
