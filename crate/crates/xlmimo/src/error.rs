use std::path::PathBuf;

/// Errors from file formats, configuration and the command layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] xlmimo_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit status for each failure class.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const NUMERIC: u8 = 4;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Core(xlmimo_core::Error::NonFiniteLoss { .. }) => exit::NUMERIC,
            Error::Core(_) | Error::Config(_) | Error::Dimension(_) => exit::USAGE,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::Malformed(_) => exit::IO,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_class() {
        let nan = Error::Core(xlmimo_core::Error::NonFiniteLoss { step: 3, batch_seed: 1 });
        assert_eq!(nan.exit_code(), 4);
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Core(xlmimo_core::Error::Empty).exit_code(), 2);
        assert_eq!(Error::io("a", std::io::ErrorKind::NotFound.into()).exit_code(), 3);
        assert_eq!(Error::Truncated("x".into()).exit_code(), 3);
        assert_eq!(Error::Malformed("x".into()).exit_code(), 3);
    }
}
