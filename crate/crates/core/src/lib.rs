//! Cross-sensor feature fusion by dynamic message propagation, and an
//! NMS-free set-based box selector, on a small reverse-mode array engine.

pub mod cdmp;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod numerics;
pub mod scene;
pub mod setdet;

pub use error::{Error, Result};
