pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod episodes;
pub mod error;
pub mod io;
pub mod kernels;
pub mod meta;
pub mod models;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;
