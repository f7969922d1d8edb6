use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid FASTA at line {line}, column {column}: {reason}")]
    Fasta {
        line: usize,
        column: usize,
        reason: String,
    },

    #[error("invalid collection: {0}")]
    InvalidCollection(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("cannot build a Huffman code without any symbol")]
    EmptyAlphabet,

    #[error("byte {0} has no codeword in the table")]
    UnencodableByte(u8),

    #[error("bitstream ended before the requested symbols were decoded")]
    Truncated,

    #[error("reservoir phrase of length {len} is shorter than the minimum {min}")]
    PhraseTooShort { len: u64, min: u64 },

    #[error("range {start}..{end} is out of bounds for length {len}")]
    OutOfRange { start: u64, end: u64, len: u64 },

    #[error("unknown sequence {0:?}")]
    UnknownSequence(String),

    #[error("invalid factor: {0}")]
    InvalidFactor(String),

    #[error("corrupt archive: {0}")]
    Corrupt(String),

    #[error("unsupported archive version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u8, supported: u8 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }

    /// True for errors caused by damaged or foreign archive bytes.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            Error::Corrupt(_) | Error::Truncated | Error::UnsupportedVersion { .. }
        )
    }
}
