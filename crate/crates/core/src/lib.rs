pub mod attention;
pub mod autograd;
pub mod cell_prior;
pub mod checkpoint;
pub mod dataset;
pub mod disentangle;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod mil;
pub mod params;
pub mod seed;
pub mod ssl;
pub mod synth;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use cell_prior::{CellPrior, CentroidMap, ClassPriorSet};
pub use checkpoint::Checkpoint;
pub use encoder::{AttentionRecord, Encoder, EncoderConfig, TokenMatrix};
pub use error::{Error, Result};
pub use image::Image;
pub use params::{Binder, ParamId, ParamSet};
pub use ssl::{DirlConfig, Variant};
pub use tensor::Tensor;
