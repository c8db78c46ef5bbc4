//! Flow-matching forecasting of 3D volumes from irregularly timed context
//! sequences.
//!
//! A stack of context volumes is transported toward the target volume
//! (broadcast to the same number of frames) by integrating a learned velocity
//! field. The discrete variant bins contexts onto a uniform grid and fills gaps
//! by carry-forward; the continuous variant conditions on the real timestamps,
//! interpolated toward the target time along the flow.

pub mod cli;
pub mod conditioning;
pub mod error;
pub mod eval;
pub mod flow;
pub mod forecast;
pub mod grid;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod series;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
