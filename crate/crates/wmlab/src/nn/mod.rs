//! Hand-rolled neural network substrate: layers, nets, losses, optimizer.

pub mod layers;
pub mod loss;
pub mod net;
pub mod optim;

pub use loss::{argmax, argmax_rows, ce_loss_and_grad, kl_divergence, log_softmax, soft_ce_loss_and_grad, softmax};
pub use net::ClassifierNet;
pub use optim::Adam;
