//! Recursive video lane detection: eigenlane shape basis, a still-image
//! detector, a recurrent refiner driven by motion-compensated memory, and the
//! tooling around them (synthetic data, evaluation, file formats).

pub mod autograd;
pub mod completion;
pub mod eigenlane;
pub mod error;
pub mod geometry;
pub mod ild;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod nms;
pub mod nn;
pub mod pipeline;
pub mod pld;
pub mod synth;

pub use error::{Error, Result};
