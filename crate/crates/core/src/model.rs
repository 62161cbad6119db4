//! Shared surface of the two networks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::tape::{Tape, Var};

/// Width/depth preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Tiny,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::InvalidConfig(format!("unknown profile {other:?}"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Tiny => "tiny",
            Profile::Paper => "paper",
        })
    }
}

/// A network architecture bound to its parameters.
pub trait Network {
    /// Stable identifier written into checkpoints.
    fn kind(&self) -> &'static str;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// JSON echo of the configuration, enough to rebuild the architecture.
    fn config_json(&self) -> String;
    /// Expected `[C, H, W]` of one input sample.
    fn input_shape(&self) -> [usize; 3];
    /// Class probabilities (softmax over axis 1).
    fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var>;
    /// Human-readable wiring descriptor.
    fn describe(&self) -> String;
}
