//! Dense-retrieval engine built around gap-aware implicit query steering.
//!
//! The crate operates entirely on precomputed embedding vectors: it ingests a
//! multimodal corpus, performs exact top-K search, steers query vectors by
//! gated context-subspace removal (with an additive relevance-feedback
//! baseline), trains the shallow steering layers end-to-end with an InfoNCE
//! objective on its own reverse-mode tape, routes queries between the two
//! paradigms, and reports the retrieval diagnostics used to study semantic
//! anchoring.

pub mod corpus;
pub mod error;
pub mod metrics;
pub mod pool;
pub mod router;
pub mod search;
pub mod steering;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use corpus::{CorpusIndex, EvidenceItem, Modality, RetrievalTask};
pub use error::{Error, Result};
pub use metrics::DiagnosticsReport;
pub use pool::{PoolState, RequestMode, StepSchedule};
pub use router::RouterParams;
pub use search::{RankedList, ScoredHit};
pub use steering::{SteeredQuery, SteeringParams};
pub use synth::SynthSpec;
pub use tape::{GradientMap, Tape, Tensor};
pub use trainer::TrainConfig;
