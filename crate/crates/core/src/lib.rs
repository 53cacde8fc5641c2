pub mod capsnet;
pub mod cdmm;
pub mod color;
pub mod config;
pub mod crossval;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod io;
pub(crate) mod kernels;
pub mod mask;
pub mod metrics;
pub mod modelfile;
pub mod morphology;
pub mod optim;
pub mod params;
pub mod patches;
pub mod plot;
pub mod rng;
pub mod slic;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod unet;
pub mod wsi;

pub use error::{Error, Result};
pub use mask::SegMask;
pub use params::ParamSet;
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
