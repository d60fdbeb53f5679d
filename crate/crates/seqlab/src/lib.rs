//! A desk-scale sequence-to-sequence laboratory.
//!
//! Trains a tiny encoder-decoder transformer on a synthetic dialogue task
//! with exactly known generative probabilities, contrasting token-level
//! maximum-likelihood training against globally normalized sequence-level
//! training (log-probability-average and logits-average scores), and
//! measures the label bias of beam-search decoding with ranking and
//! distribution diagnostics.

pub mod datagen;
pub mod decoding;
pub mod harness;
pub mod kvconfig;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;

use std::fmt;

/// Reserved vocabulary ids. The data module owns this contract; the model
/// and decoders rely on it.
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
/// Number of reserved ids preceding content tokens.
pub const N_RESERVED: u32 = 3;

/// Crate-wide error type. Variants map onto CLI exit codes:
/// validation/contract/numeric/format errors exit 1, IO errors exit 2.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    Shape(String),
    /// Invalid input or configuration.
    Validation(String),
    /// API contract violation (e.g. backward called twice without reset).
    Contract(String),
    /// Non-finite values or numeric failure.
    Numeric(String),
    /// Malformed file or config contents.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl Error {
    /// CLI exit code: IO failures exit 2, everything else exits 1.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io(_) => 2,
            _ => 1,
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Stable 64-bit FNV-1a hash, used for config hashes in artifact names and
/// metric records. Deliberately not std's SipHash: run directory names must
/// be reproducible across builds and Rust versions.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Twelve-hex-digit rendering of [`stable_hash`] for file and directory names.
pub fn stable_hash_hex(bytes: &[u8]) -> String {
    format!("{:012x}", stable_hash(bytes) & 0xffff_ffff_ffff)
}
