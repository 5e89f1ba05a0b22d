pub mod error;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod merge;
pub mod mesh;
pub mod mlp;
pub mod model;
pub mod octree;
pub mod palette;
pub mod pipeline;
pub mod sampler;
pub mod snapshot;
pub mod suite;
pub mod synth;
pub mod train;
pub mod util;

pub use error::{Error, Result};
