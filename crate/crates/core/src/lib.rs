//! Relative Lempel-Ziv compression of genome collections against a
//! reference sequence.
//!
//! ```
//! use rlzg::{compress, decompress, Archive, Collection, Granularity, ParseParams, Sequence};
//!
//! let seqs = vec![
//!     Sequence::from_ascii("ref", b"ACGTACGTTTGACCA")?,
//!     Sequence::from_ascii("alt", b"ACGTACGATTGACCA")?,
//! ];
//! let collection = Collection::new(seqs, 0, Granularity::WholeSequence)?;
//! let bytes = compress(&collection, &ParseParams::default())?;
//! assert_eq!(decompress(&bytes)?, collection);
//! let slice = Archive::open(&bytes)?.extract("alt", 4, 10)?;
//! assert_eq!(slice, collection.sequences()[1].symbols()[4..10]);
//! # Ok::<(), rlzg::Error>(())
//! ```

pub mod archive;
pub mod bits;
pub mod codec;
pub mod error;
pub mod format;
pub mod genome;
pub mod huffman;
pub mod index;
pub mod parse;
pub mod reference;

pub use error::{Error, Result};
pub use genome::{parse_fasta, write_fasta, Collection, Granularity, Record, Sequence, Symbol};
pub use parse::{Factor, GappedSpan, Parse, ParseParams};
pub use archive::{compress, compress_with_report, decompress, extract, select_reference, Archive, ArchiveStats, CompressReport, ExtractStats, FactorCounts};
