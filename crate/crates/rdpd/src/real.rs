use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distr::uniform::SampleUniform;

use crate::error::{Error, Result};

/// Numeric precision of a training run. Tests and oracles always use
/// 64-bit; 32-bit is available for training via `DISTILL_PRECISION=32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Reads `DISTILL_PRECISION` ({32, 64}); defaults to 64-bit.
    pub fn from_env() -> Result<Self> {
        match std::env::var("DISTILL_PRECISION") {
            Ok(v) => match v.trim() {
                "32" => Ok(Precision::F32),
                "64" => Ok(Precision::F64),
                other => Err(Error::Config(format!(
                    "DISTILL_PRECISION must be 32 or 64, got {other:?}"
                ))),
            },
            Err(_) => Ok(Precision::F64),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar type the engine is generic over. Implemented for f32 and f64.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + SampleUniform
    + Sum<Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64c(x: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64c(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64c(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
