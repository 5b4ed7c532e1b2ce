//! Recurrent transformer networks for dense correspondence: a small
//! reverse-mode autodiff core, affine transformation fields, transformable
//! feature extraction, recurrent geometric matching, a weakly supervised
//! loss, synthetic data, metrics and training.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod selfcheck;
pub mod tensor;
pub mod train;
