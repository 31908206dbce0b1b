//! Multi-modal (RGB + thermal/event/depth) single-object tracker with
//! decoupled state-space temporal memory and mixture-of-experts fusion.

pub mod backbone;
pub mod data;
pub mod embed;
pub mod error;
pub mod fusion;
pub mod head;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod temporal;
pub mod verify;

pub use error::{Error, Result};
