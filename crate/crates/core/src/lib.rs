pub mod autograd;
pub mod checkpoint;
pub mod components;
pub mod convlstm;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod postprocess;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
