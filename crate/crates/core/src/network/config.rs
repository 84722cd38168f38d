use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUT_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    #[default]
    MagPhase,
    RealImag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Encoder blocks; the decoder mirrors them.
    pub depth: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub input_encoding: InputEncoding,
    pub num_echoes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { depth: 3, base_channels: 16, kernel: 2, input_encoding: InputEncoding::MagPhase, num_echoes: 6 }
    }
}

impl UNetConfig {
    pub fn in_channels(&self) -> usize {
        2 * self.num_echoes
    }

    pub fn out_channels(&self) -> usize {
        OUT_CHANNELS
    }

    /// Feature channels at encoder level `level` (`depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.kernel == 0 || self.num_echoes == 0 {
            return Err(Error::Config(format!("network sizes must be positive: {self:?}")));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} is too large", self.depth)));
        }
        Ok(())
    }

    pub fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        let m = 1 << self.depth;
        if rows % m != 0 || cols % m != 0 || rows == 0 || cols == 0 {
            return Err(Error::Geometry(format!(
                "{rows}×{cols} input is not divisible by 2^{} = {m}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Supervised against reference maps.
    Std,
    /// Signal-model loss over a corpus.
    Utd,
    /// Signal-model loss on the single dataset being reconstructed.
    Ntd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl TrainConfig {
    pub fn std_defaults() -> Self {
        Self { epochs: 2000, batch_size: 2, lr: 1e-3, seed: 0, mode: Mode::Std }
    }

    pub fn utd_defaults() -> Self {
        Self { epochs: 2000, batch_size: 2, lr: 1e-4, seed: 0, mode: Mode::Utd }
    }

    pub fn ntd_defaults() -> Self {
        Self { epochs: 10000, batch_size: 1, lr: 1e-4, seed: 0, mode: Mode::Ntd }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}
