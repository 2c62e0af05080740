//! Centroid-scored sparse attention over a long shared prefill.
//!
//! Prefill queries are clustered per subspace; each centroid keeps a
//! fixed-capacity list of its best-scoring keys. At decode time a query picks
//! its nearest centroid per subspace, sums the gathered partial scores per
//! key and attends only over the Top-K keys plus a recent window.

pub mod clustering;
pub mod dense;
pub mod dump;
pub mod error;
pub mod harness;
pub mod index;
pub mod retrieval;
pub mod session;
pub mod types;
pub mod workload;

pub mod cli;

pub use error::{Error, LoadError, Result};
pub use index::{build_index, CsIndex, IndexConfig, ScoreBits};
pub use retrieval::{RetrievalConfig, Schedule};
pub use session::{DecodeStepReport, Session};
pub use types::{KvStore, SubspaceLayout};
pub use workload::{SyntheticSpec, Workload};
