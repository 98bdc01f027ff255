//! On-disk formats: the export bundle consumed by precompute and the atlas it produces.

mod atlas;
mod bundle;
mod colors;
mod precompute;
mod report;
mod sample;

pub use atlas::*;
pub use bundle::*;
pub use colors::*;
pub use precompute::*;
pub use report::*;
pub use sample::*;
