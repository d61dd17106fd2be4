//! Task-guided domain gap reduction for self-supervised monocular depth,
//! at desk scale.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
