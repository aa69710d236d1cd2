//! Multi-granularity natural-language vehicle retrieval.
//!
//! Visual granularities (target crop, context crop, foreground motion map)
//! and textual granularities (global text, three local sentences, color-type
//! prompt) are embedded by independent encoders and trained with a
//! bidirectional multi-granularity InfoNCE loss plus an auxiliary ID loss.
//! Retrieval averages the similarities of every text/visual granularity pair.

pub mod encoder;
pub mod error;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod model;
pub mod motion;
pub mod raster;
pub mod retrieval;
pub mod scene;
pub mod schedule;
pub mod synth;
pub mod tensor_file;
pub mod text;
pub mod track;
pub mod train;

pub use error::{OmgError, Result};
