//! Dense tensors, an operation tape with reverse-mode gradients, and Adam.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheck, GRADCHECK_FLOOR};
pub use optim::{Adam, AdamConfig};
pub use tape::{argmax, Gradients, ParamId, ParamStore, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{bce_with_logits, ce_with_logits, sigmoid, softmax, Tensor};
