//! Dense networks executed on crossbars, with manual backpropagation.
//!
//! Sampled device noise is held fixed on the [`Tape`] during the backward
//! pass, so every read `w * (1 + u * kappa / rho)` is differentiable in `w`
//! and in `theta = ln rho`. Quantizers pass gradients straight through.

mod loss;
mod network;
mod optim;
mod tensor;

pub use loss::{cross_entropy, energy_penalty, loss_with_energy_reg, LossConfig};
pub use network::{
    ActScaling, Activation, DenseLayer, ExecMode, ForwardOptions, Gradients, HeldStates, LayerTape, Network,
    NetworkSpec, Quantization, RhoSharing, Tape,
};
pub use optim::{OptimizerKind, OptimizerState};
pub use tensor::Tensor;
