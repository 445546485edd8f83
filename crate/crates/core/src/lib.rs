//! Disk-based k-mer counting with signature binning and (k,x)-mer sorting.
//!
//! Reads are cut into super k-mers, binned by signature, and each bin is
//! expanded into (k,x)-mers, radix sorted and merged into counts. The result
//! is stored as a prefix/suffix database pair that can be queried at random
//! or listed in order.

pub mod binning;
pub mod error;
pub mod kmcdb;
pub mod kxmer;
pub mod oracle;
pub mod pipeline;
pub mod seq;
pub mod seqio;
pub mod signature;
pub mod sortcount;

pub use error::{Error, Result};
pub use kmcdb::{Db, DbHeader};
pub use pipeline::{run, CountConfig, RunStats};
pub use seq::{Orientation, PackedSeq};
pub use signature::{SignatureId, SignatureMode, SignatureScheme};
