pub mod error;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use error::{PahsError, Result};
pub use kernels::ConvSpec;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Shape, Tensor};
pub mod model;
pub mod frames;
pub mod metrics;
pub mod sequence;
pub mod synth;
pub mod dataset;
pub mod train;
pub mod ablate;
pub mod gradcheck;

pub use frames::{FrameFormat, FrameSequence};
pub use model::ModelConfig;
pub use synth::{generate_synthetic, SynthSpec};
pub use dataset::{Dataset, PairedSequence};
pub use train::{train, AdamState, TrainOptions};
