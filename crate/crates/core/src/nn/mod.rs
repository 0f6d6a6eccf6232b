//! Minimal differentiable-programming toolkit shared by every trainable
//! component: an autograd tape, named parameter storage, Adam and
//! bit-exact checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{attention, batch_gradients, Linear, Mlp};
pub use optim::Adam;
pub use params::{glorot, uniform, ParamId, ParamStore};
pub use tape::{Gradients, Matrix, Tape, Var};
