//! Dense network building blocks with hand-written backpropagation.

pub mod adam;
pub mod gaussian;
pub mod gradcheck;
pub mod layer;
pub mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gaussian::{
    gaussian_log_pdf, kl_std_normal, reparameterize, GaussianHead, GaussianHeadGrad,
    GaussianVector, HeadOutput, VAR_FLOOR,
};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use layer::{Activation, DenseGrad, DenseLayer};
pub use rng::{derive_seed, Rng};
