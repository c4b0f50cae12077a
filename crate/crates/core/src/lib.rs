//! Embedded ground truth estimation for multiply-annotated classification
//! data.
//!
//! Each instance's vote counts are modeled as Dirichlet-Multinomial with
//! concentration `exp(z)`, where the latent embedding `z` has a Gaussian
//! prior whose mean and covariance are estimated from the data by
//! stochastic EM with random-walk Metropolis E-steps.

pub mod analysis;
pub mod em;
pub mod error;
pub mod kernels;
pub mod model;
pub mod sampler;
pub mod simulate;

#[cfg(feature = "cli")]
pub mod cli;
#[cfg(feature = "cli")]
pub mod io;

pub use error::{Error, Result};
pub use model::{AnnotationDataset, ClassLabels, DirichletMoments, Embedding, GaussianPrior, Instance, VoteCounts};
