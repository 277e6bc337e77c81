//! Multi-view supervised contrastive training for motor-imagery EEG decoding.
//!
//! The crate is organised along the training pipeline:
//!
//! - [`dataio`]: archive format, validation, Euclidean Alignment, LOSO splits
//! - [`augment`]: time, space and frequency augmentations and view dispatch
//! - [`models`]: backbones (EEGNet, DeepCNN, ShallowCNN), classifier,
//!   Transformer encoder and projector
//! - [`losses`]: NT-Xent pair distance, cross-view and cross-model losses
//! - [`trainer`]: training loops for every compared method, online evaluation
//!   and leave-one-subject-out runs
//! - [`synthetic`]: constructed two-class dataset for end-to-end checks

pub mod augment;
pub mod dataio;
pub mod losses;
pub mod models;
pub mod synthetic;
pub mod trainer;
