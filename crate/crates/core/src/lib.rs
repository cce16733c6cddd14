pub mod decoders;
pub mod error;
pub mod graph;
pub mod harness;
pub mod language;
pub mod mac;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Precision, Real, Tensor};
