//! Minimal dense-network engine: tensors, a reverse-mode tape, dense blocks
//! with taps, SGD, and finite-difference gradient checking.

pub mod gradcheck;
pub mod net;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use net::{Activation, DenseBlock, LayeredNet, ParamTensor};
pub use optim::{cosine_lr, sgd_step, SgdConfig};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
