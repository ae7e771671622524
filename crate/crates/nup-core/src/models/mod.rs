//! Network definitions: the co-modulated generator G (mask to
//! histology), the FPN mask generator S with its instance branch
//! (histology to mask), and the two discriminators.

pub mod comod;
pub mod disc;
pub mod fpn;

use thiserror::Error;

pub use comod::{ComodConfig, Generator};
pub use disc::{DiscSConfig, DiscriminatorG, DiscriminatorS, DgConfig};
pub use fpn::{Detections, FpnConfig, SegComponents, SegTargets, Segmenter};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("spatial size must be a power of two of at least 16, got {0}x{1}")]
    NotPowerOfTwo(usize, usize),
    #[error("spatial size must be divisible by 64, got {0}x{1}")]
    NotDivisible64(usize, usize),
    #[error("input shape {got:?} does not match expected {want:?}")]
    ShapeMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}
