//! Illuminant estimation learned through an object-recognition objective.
//!
//! An illuminant-estimation network (IE) predicts a per-channel diagonal gain,
//! the image is corrected with it and fed to a frozen object-recognition
//! network (OR). IE is trained only through OR's classification loss, never
//! from illuminant labels. The crate contains everything needed to run that
//! experiment at small scale and to evaluate it:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation and SGD.
//! * [`colorops`]: diagonal cast/correction, angular error, gamma,
//!   normalization with support illuminants, gray-world, bias shift.
//! * [`synthgen`]: synthetic color-discriminative classification scenes and
//!   the Gaussian illuminant jitter sampler.
//! * [`dataio`]: PPM images, dataset layout, masks, checkpoints.
//! * [`models`]: the IE and OR networks and their composition.
//! * [`train`]: OR pre-training, end-to-end IE training, regression baseline.
//! * [`eval`]: error statistics, baselines, bias analysis, reports.
//! * [`experiment`]: key=value experiment configs and the full pipeline.

pub mod autodiff;
pub mod colorops;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod rng;
pub mod synthgen;
pub mod train;

pub use colorops::{Illuminant, Image};
pub use error::{Error, Result};
