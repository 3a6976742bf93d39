//! Row/column query transformer decoder for dense prediction.
//!
//! A low-resolution `h×w×d` encoder map is upsampled to `H×W×d` by two
//! transformers with decomposed queries: `H` row queries attend over the
//! row-flattened map and `W` column queries over the column-flattened map.
//! Row and column embeddings are combined per pixel as `S_ij = Z_r[i] + Z_c[j]`.

pub mod attention;
pub mod cli;
pub mod complexity;
pub mod config;
pub mod error;
pub mod flatten;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{DflatError, Result};
pub use flatten::{FeatureMap, FlattenedSequence, Orientation};
pub use model::{DenseOutput, Model, ModelConfig, Variant};
pub use params::ParameterStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
