//! Slide-level modeling of whole-slide images with RWKV-style time-decayed
//! linear attention, exact streaming aggregation over tile bags and a
//! multi-task head.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod model;
pub mod mtl;
pub mod numerics;
mod parallel;
pub mod rwkv;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use parallel::par_map;
