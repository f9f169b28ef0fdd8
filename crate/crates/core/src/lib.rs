pub mod archive;
pub mod autodiff;
pub mod batch;
pub mod checkpoint;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod stratgraph;
pub mod synthgen;
pub mod tensorize;
pub mod train;

pub use error::{Error, Result};
