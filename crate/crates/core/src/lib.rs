pub mod align;
pub mod artifacts;
pub mod container;
pub mod descent;
pub mod error;
pub mod eval;
pub mod face_model;
pub mod linalg;
pub mod matching;
pub mod net;
pub mod render;
pub mod segmentation;

pub use error::{Error, Result};
