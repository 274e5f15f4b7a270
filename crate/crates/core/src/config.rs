//! Experiment configuration shared by the command-line tools.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dct::DctConfig;
use crate::error::{Error, Result};
use crate::network::Architecture;
use crate::quant::CryptoParams;
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub weights: u64,
    pub calibration: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            weights: 0,
            calibration: 1,
            noise: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paths {
    #[serde(default)]
    pub graph: Option<PathBuf>,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub input: Shape,
    #[serde(default)]
    pub dct: Option<DctConfig>,
    pub bits: u32,
    pub crypto: CryptoParams,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub paths: Paths,
}

impl ExperimentConfig {
    /// Defaults for `arch`: 4-bit, 6 retained bits, `p_err = 0.01`, and the
    /// input sizes of the reference experiments.
    pub fn new(arch: Architecture) -> Self {
        let (input, dct) = match arch {
            Architecture::Resnet18Rgb => (Shape::new(3, 224, 224), None),
            Architecture::Resnet18Dct => (
                Shape::new(64, 28, 28),
                Some(DctConfig {
                    filter_size: 8,
                    channels_kept: 64,
                    normalize: false,
                }),
            ),
            Architecture::Resnet20Rgb => (Shape::new(3, 32, 32), None),
            Architecture::Resnet20Dct => (
                Shape::new(48, 8, 8),
                Some(DctConfig {
                    filter_size: 4,
                    channels_kept: 48,
                    normalize: false,
                }),
            ),
        };
        Self {
            architecture: arch,
            input,
            dct,
            bits: 4,
            crypto: CryptoParams::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }

    /// 5-bit weights and activations with 7 retained bits, used for the
    /// 1000-class task.
    pub fn imagenet(arch: Architecture) -> Self {
        Self {
            bits: 5,
            crypto: CryptoParams::imagenet(),
            ..Self::new(arch)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!("bits {} outside [2, 8]", self.bits)));
        }
        self.crypto.validate()?;
        let arch = self.architecture;
        match (arch.is_dct(), &self.dct) {
            (true, None) => {
                return Err(Error::InvalidConfig(format!("{arch} needs a DCT configuration")));
            }
            (false, Some(_)) => {
                return Err(Error::InvalidConfig(format!("{arch} takes RGB input; drop the DCT configuration")));
            }
            (true, Some(d)) => {
                d.validate()?;
                if self.input.c != d.channels_kept {
                    return Err(Error::InvalidConfig(format!(
                        "input has {} channels but the DCT keeps {}",
                        self.input.c, d.channels_kept
                    )));
                }
            }
            (false, None) => {
                if self.input.c != 3 {
                    return Err(Error::InvalidConfig(format!(
                        "{arch} expects 3 input channels, got {}",
                        self.input.c
                    )));
                }
            }
        }
        crate::network::build_network(arch, self.input, &Default::default())?;
        Ok(())
    }
}
