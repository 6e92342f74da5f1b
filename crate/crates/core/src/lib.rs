//! Voxel-wise fMRI encoding from image features.
//!
//! The crate covers the whole analysis loop at desk scale:
//!
//! - [`data_io`]: the VISF tensor container, ROI atlases, datasets and splits
//! - [`extractor`]: the pluggable feature-extractor interface plus a seeded toy extractor
//! - [`encoder`]: per-query shared MLP with an affine voxel head, with analytic gradients
//! - [`optimize`]: MSE loss, Adam and the early-stopping training loop
//! - [`hypersearch`]: tree-structured Parzen estimator search
//! - [`metrics`]: noise ceiling, Pearson correlation, noise-normalized accuracy, paired t-test
//! - [`saliency`]: ScoreCAM attention maps, KL comparisons and the functional-probability score
//! - [`embedviz`]: PCA projection of condensed features and silhouette scoring
//! - [`synth`]: planted synthetic datasets for end-to-end checks

pub mod data_io;
pub mod embedviz;
pub mod encoder;
mod error;
pub mod extractor;
pub mod hypersearch;
pub mod metrics;
pub mod optimize;
mod par;
pub mod saliency;
pub mod synth;

pub use error::{Error, FormatError, Result};
