//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    ShapeMismatch(String),
    /// A tensor operation produced (or was given) NaN/Inf values.
    NonFinite(&'static str),
    /// Backward was requested from a non-scalar node.
    NonScalarRoot(Vec<usize>),
    /// Label outside `0..class_count`.
    InvalidLabel { label: usize, classes: usize },
    /// Model or dataset specification is inconsistent.
    InvalidSpec(String),
    /// Attack or training configuration violates its invariants.
    InvalidConfig(String),
    /// Archive does not start with the expected magic bytes.
    ArchiveMagic { expected: &'static str },
    /// Archive version is not supported.
    ArchiveVersion { found: u32, supported: u32 },
    /// Archive ended before the declared payload was read.
    ArchiveTruncated,
    /// Archive declares an unknown dtype or layer tag.
    ArchiveTag(u8),
    /// Underlying I/O failure.
    Io(String),
    /// Config file syntax or unknown key.
    Config(String),
    /// Attack name not in the registry.
    UnknownAttack(String),
    /// Unseen-mean accuracy over an empty attack complement.
    EmptyComplement,
    /// Training diverged (non-finite loss).
    Diverged(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite(ctx) => write!(f, "non-finite value in {ctx}"),
            Error::NonScalarRoot(shape) => {
                write!(f, "backward root must be scalar, got shape {shape:?}")
            }
            Error::InvalidLabel { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::InvalidSpec(msg) => write!(f, "invalid model spec: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::ArchiveMagic { expected } => write!(f, "bad magic, expected {expected:?}"),
            Error::ArchiveVersion { found, supported } => {
                write!(f, "unsupported archive version {found} (supported: {supported})")
            }
            Error::ArchiveTruncated => write!(f, "archive truncated"),
            Error::ArchiveTag(tag) => write!(f, "unknown archive tag {tag}"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::UnknownAttack(name) => write!(f, "unknown attack {name:?}"),
            Error::EmptyComplement => {
                write!(f, "unseen-mean accuracy undefined: every attack was trained against")
            }
            Error::Diverged(msg) => write!(f, "training diverged: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
