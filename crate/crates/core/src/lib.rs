//! GasTwinFormer: a hybrid efficient/local attention network for gas-plume
//! segmentation with a scene-level diet classifier, plus its losses,
//! trainer, profiler and synthetic data generator.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod profile;
pub mod selftest;
pub mod train;

pub use config::{parse_config, Attention, Branch, ModelConfig, SegLoss};
pub use error::{Error, Result};
pub use model::GasTwinFormer;
