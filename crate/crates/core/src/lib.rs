//! AS-aware safety checks for Tor circuit endpoints.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below pick the
//! usual concrete types.

pub mod analytics;
pub mod anti_raptor;
pub mod asdb;
pub mod circuit;
pub mod consensus;
pub mod ingestion;
pub mod path_inference;
pub mod scalar;
pub mod service;

pub use anti_raptor::{circuit_is_safe, unsafe_exits, PathDb, QueryError, SuspectSet, UnsafeExitReport};
pub use asdb::{ip_to_asn, AsBlacklist, AsTopology, Asn, PrefixTable};
pub use consensus::{parse_consensus, serialize_consensus, ConsensusSnapshot, Fingerprint, Flag, RelayRecord};
pub use path_inference::{infer_paths, AsPath};
pub use scalar::Scalar;
pub use service::{emit_torrc, handle_query, DbHandle, QueryRequest, QueryResponse, ServiceError};

/// Floating-point probability used by reports and simulation.
pub type Probability = f64;
/// Exact probability for conservation checks.
pub type ExactProbability = num_rational::BigRational;
pub type AsObservation = circuit::AsObservation<Probability>;
pub type ExactAsObservation = circuit::AsObservation<ExactProbability>;
pub type GrowthStats = analytics::GrowthStats<Probability>;
