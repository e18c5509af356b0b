//! Dense matrices, activations, loss and the finite-difference oracle.

mod matrix;
mod ops;
mod rng;

pub use matrix::Matrix;
pub use ops::{
    activation_backward, activation_forward, affine_backward, affine_forward, cross_entropy,
    fd_gradient, sigmoid, softmax, ActivationKind, AffineGrads, PROB_FLOOR,
};
pub use rng::{mix_seed, Rng, RNG_ALGORITHM};
