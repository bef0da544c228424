pub mod audio;
pub mod codec;
pub mod config;
pub mod director;
pub mod dit;
pub mod dubbing;
pub mod error;
pub mod formats;
pub mod framepack;
pub mod longvideo;
pub mod numerics;
pub mod pipeline;
pub mod probe;
pub mod run;
pub mod sampler;
pub mod synth;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
