//! Dense tensors, reverse-mode differentiation, parameters and optimisation.

mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod init;
mod params;
mod scalar;
mod schedule;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
    MAGIC,
};
pub(crate) use checkpoint::Reader;
pub use graph::{activation_meter, BinaryOp, Elementwise, Graph, UnaryOp, Var};
pub use params::{adam_step, AdamConfig, ParamStore};
pub use scalar::Scalar;
pub use schedule::LrSchedule;
pub use tensor::Tensor;
