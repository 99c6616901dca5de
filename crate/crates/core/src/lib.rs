//! Kernel-distortion generative classifier.
//!
//! Each class is a mixture of Gaussian kernels centered on training images.
//! A kernel's covariance is large along the distortion subspace of its
//! center (small translations, expansions and rotations, expanded to a
//! polynomial order and truncated by SVD) and along the center itself, and
//! small everywhere else. Kernels are chosen by an iterative
//! remove-the-most-expendable / add-the-most-central loop. Posteriors can be
//! combined with an external discriminative classifier by cascading or
//! stacking.
//!
//! | module | contents |
//! |--------|----------|
//! | [`dataset`] | IDX / delimited ingestion, padding, stratified splits |
//! | [`distortion`] | distortion operators, monomial matrix, truncated-SVD basis |
//! | [`density`] | structured-covariance kernel density, class mixtures |
//! | [`selection`] | iterative kernel selection |
//! | [`classify`] | MAP classifier, posteriors, metrics, training |
//! | [`hybrid`] | posterior tables, cascading, stacking, tuning |
//! | [`persist`] | model container format |
//! | [`cli`] | the `kdc` command-line pipeline |

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod cli;
pub mod dataset;
pub mod density;
pub mod distortion;
pub mod error;
pub mod hybrid;
pub mod inspect;
pub mod persist;
pub mod selection;

pub use classify::{evaluate, posterior, predict, train, Classifier, Metrics, PriorMode};
pub use dataset::{load_delimited, load_idx, pad_margin, stratified_sample, Image, LabeledImageSet};
pub use density::{log_kernel_density, log_mixture, ClassModel, Kernel, VarianceParams};
pub use distortion::{BasisBuilder, DistortionBasis, DistortionMode, DistortionOperator};
pub use error::{Error, Result};
pub use hybrid::{cascade, stack, tune, Combiner, PosteriorTable};
pub use persist::{load_model, save_model};
pub use selection::{select_kernels, AssignmentScale, SelectionConfig, SelectionTrace};
