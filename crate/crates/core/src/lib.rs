pub mod container;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use encoder::{Checkpoint, EncoderConfig, EncoderModel, Pooling};
pub use error::{Error, Result};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use params::ParamSet;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use tokenizer::{TokenSeq, Vocab};
