pub mod audio;
pub mod autograd;
pub mod backbone;
pub mod codec;
pub mod conditioning;
pub mod config;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod io;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
