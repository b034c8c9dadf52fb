//! Time-series imputation with diagonally-masked self-attention.
//!
//! The crate provides the SAITS model and its ablation variants, a
//! joint-optimization trainer, a synthetic and CSV data pipeline, naive
//! baselines with evaluation metrics, and a command-line front end.
//!
//! ```no_run
//! use saits::config::{SaitsConfig, TrainConfig};
//! use saits::data::{synth_generate, SynthKind, SynthSpec};
//! use saits::training::train;
//!
//! let data = synth_generate(&SynthSpec::new(SynthKind::SineMixture, 256, 24, 8, 0.1, 7))?;
//! let config = SaitsConfig::tiny(24, 8);
//! let outcome = train(&config, &TrainConfig { max_epochs: 50, ..TrainConfig::default() }, &data)?;
//! println!("best validation MAE {:.4}", outcome.best.best_val_mae);
//! # Ok::<(), saits::SaitsError>(())
//! ```

pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod training;

pub use config::{SaitsConfig, TrainConfig, Variant};
pub use error::{Result, SaitsError};
pub use model::{joint_loss, ForwardOutput, SaitsModel};
pub use saits_tensor as tensor;
