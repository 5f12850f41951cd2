//! Dense numerics, the embedding encoder and its optimizer.

pub mod checkpoint;
pub mod encoder;
pub mod linalg;
pub mod optim;

pub use encoder::{Activation, Dense, EncoderNet, EncoderSpec, ForwardCache, ParamGrads};
pub use linalg::{cosine_similarity, l2_normalize};
pub use optim::{sgd_step, OptimizerState, SgdConfig};
