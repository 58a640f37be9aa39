//! Dense math with hand-written reverse-mode gradients, the layer types the
//! walker needs, and the Adam optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Gru, GruCache, Input, InputLayout, Linear, Mlp, MlpCache, Slot};
pub use ops::{sigmoid, sigmoid_vec, softmax_tau, Activation};
pub use tensor::{AdamConfig, Gradients, ParamId, ParamStore, Real, Tensor};
