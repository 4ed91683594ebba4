//! Bit-exact persistence: the native volume container (JSON header sidecar
//! plus little-endian raw payload), the TCK streamline interchange format,
//! and versioned model checkpoints.

mod checkpoint;
mod tck;
mod volume;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointContents, CHECKPOINT_VERSION};
pub use tck::{read_tck, write_tck};
pub use volume::{read_volume, write_volume, ValueKind, VolumeContainer, VOLUME_VERSION};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("header parse failed: {0}")]
    Header(String),
    #[error("unsupported {what} version {got}, this build reads {want}")]
    Version { what: &'static str, got: u32, want: u32 },
    #[error("payload is {got} bytes, header implies {want}")]
    PayloadSize { got: usize, want: usize },
    #[error("field '{field}': {reason}")]
    BadField { field: String, reason: String },
    #[error("parameter '{name}' blob is {got} bytes, manifest says {want}")]
    BlobSize { name: String, got: usize, want: usize },
    #[error("TCK format violation: {0}")]
    Tck(String),
}
