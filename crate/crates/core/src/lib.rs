//! Learning feedforward control for repetitive tasks on MIMO plants with
//! unknown dynamics, using Gaussian-process models and norm-optimal
//! updates with automatically chosen weights.
//!
//! See the guide in `book/` for a walk-through.

pub mod dynamics;
pub mod error;
pub mod gp;
pub mod harness;
pub mod ilc;
pub mod linalg;
pub mod optim;
pub mod plant;
pub mod trajectory;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/trajectories.md")]
    mod trajectories {}
    #[doc = include_str!("../../../book/src/plant.md")]
    mod plant {}
    #[doc = include_str!("../../../book/src/gaussian-processes.md")]
    mod gaussian_processes {}
    #[doc = include_str!("../../../book/src/dynamics-model.md")]
    mod dynamics_model {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
