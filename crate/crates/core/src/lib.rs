//! Discovery of relighting and recoloring directions in the style space of a
//! synthetic differentiable scene generator.

pub mod config;
pub mod decomp;
pub mod dirsearch;
mod error;
pub mod evalkit;
pub mod losses;
pub mod percept;
pub mod render;
pub mod rng;
pub mod scenegen;
pub mod selfcheck;

pub use error::{Error, Result};
