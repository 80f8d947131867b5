pub mod embedding;
pub mod error;
pub mod eval;
pub mod executor;
pub mod generator;
pub mod hnsupcon;
pub mod index;
pub mod orchestrator;
pub mod preference;
pub mod prompt;
pub mod remote;
pub mod retriever;
pub mod scalar;
pub mod schema;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Embedding = embedding::EmbeddingVector<f64>;
pub type Embedding32 = embedding::EmbeddingVector<f32>;
pub type Head = hnsupcon::ProjectionHead<f64>;
pub type Head32 = hnsupcon::ProjectionHead<f32>;
pub type Index = index::SchemaIndex<f64>;
pub type Index32 = index::SchemaIndex<f32>;
