//! Dense networks, reverse-mode gradients and Adam.

mod net;
mod optim;
mod tape;

pub use net::{softmax, Activation, DenseNet, Layer, NetBinding};
pub use optim::{Adam, Schedule, StepLr};
pub use tape::{Gradients, ParamId, Tape, Var, BCE_EPS};
pub(crate) use tape::bce_term;
