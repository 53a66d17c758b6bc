//! Embedding expansion and re-ranking for retrieval over precomputed
//! descriptor matrices: ensemble fusion and tracklet-ordered query expansion
//! (DEx), database-side augmentation (DBA), k-reciprocal re-ranking and
//! graph diffusion, plus mAP / CMC evaluation, a seeded synthetic data
//! generator and a file-based pipeline harness.
//!
//! All similarities are cosine on L2-normalized rows. Rankings sort by score
//! descending and break ties by ascending gallery index.

pub mod dba;
pub mod dex;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod kreciprocal;
pub mod meta;
pub mod metrics;
pub mod rank;
pub mod similarity;
pub mod synth;

pub use embedding::EmbeddingMatrix;
pub use error::{Error, Result};
pub use meta::{CatalogMeta, MetaRecord, TrackletTable};
pub use rank::{rank_topk, RankList, Ranked};
pub use similarity::{cosine_similarity, SimilarityMatrix};
