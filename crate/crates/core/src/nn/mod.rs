//! Minimal layer toolkit with hand-written backward passes.

pub mod conv;
pub mod dense;
pub mod ops;
pub mod params;

pub use conv::{Conv2d, ConvCache};
pub use dense::Dense;
pub use params::{Grads, ParamEntry, ParamGroup, ParamId, ParamStore};
