//! Query-key geometry for transformer attention heads.
//!
//! The crate ingests exported query and key vectors, aligns each head's
//! query and key clouds, projects them jointly to 2-D or 3-D, and writes an
//! atlas that the server and CLI read back.

pub mod attention;
pub mod diagnostics;
pub mod error;
pub mod matrix;
pub mod model;
pub mod normalize;
pub mod par;
pub mod project;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{AttentionDirection, HeadTensors, Modality, ModelDescriptor, NormalizationParams, Role, TokenRecord};
