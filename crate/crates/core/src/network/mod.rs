//! The encoder–decoder network and its three optimisation regimes.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoding;
pub mod train;
pub mod unet;

pub use config::{InputEncoding, Mode, TrainConfig, UNetConfig};
pub use dataset::{Dataset, DatasetItem};
pub use train::{
    ntd_objective, ntd_reconstruct, predict, train_std, train_utd, train_with, utd_objective, EpochLoss, NtdResult,
    TrainOutcome,
};
pub use unet::{ForwardMode, NetworkWeights, HEAD_INIT_GAIN};
