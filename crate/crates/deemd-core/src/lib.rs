//! Desk-scale screening toolkit for infection phenotypes in cell-population
//! images.
//!
//! The pipeline trains a patch-level instance scorer under a relaxed top-k
//! multiple-instance assumption (a positive well contains at least `k`
//! positive patches), aggregates overlapping patch probabilities into
//! per-pixel infection maps, and turns replicate infection probabilities into
//! dose-dependent efficacy scores via exact sign-test confidence intervals on
//! the median.
//!
//! Modules follow the processing order:
//!
//! - [`manifest`]: screen metadata, class labels, and dataset splits
//! - [`imaging`]: multi-channel image IO, site stitching, channel
//!   normalization, and the overlapping patch grid
//! - [`nuclei`]: Otsu + watershed nucleus counting and empty-sample exclusion
//! - [`scorer`]: the trainable instance classifier and its weighted loss
//! - [`mil`]: top-k selection, the training loop, bag inference, and
//!   evaluation
//! - [`infmap`]: power-weighted aggregation of patch scores into infection
//!   maps
//! - [`efficacy`]: sign-test efficacy scores, treatment ranking, and trend
//!   fits
//! - [`synthscreen`]: deterministic phantom screens with planted ground truth

pub mod efficacy;
pub mod imaging;
pub mod infmap;
pub mod manifest;
pub mod mil;
pub mod nuclei;
pub mod scorer;
pub mod synthscreen;
