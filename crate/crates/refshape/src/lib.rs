//! Estimation of reference (pre-deformity) bony shapes from deformed
//! craniofacial surfaces, built from two cooperating point-cloud networks:
//! a *simulator* that transfers a patient's deformity onto a normal subject,
//! and a *corrector* that removes it again. Training is self-supervised:
//! the simulator manufactures (deformed, normal) pairs on the fly and the
//! corrector learns to invert them.
//!
//! The crate is organised bottom-up:
//!
//! - [`surface`]: labeled triangle surfaces, PLY I/O, normalization
//! - [`sampling`]: deterministic, differentiation-free point-set kernels
//! - [`tensor`]: a small reverse-mode autodiff engine with Adam
//! - [`nets`]: PointConv blocks wired into the simulator and corrector
//! - [`losses`]: the training objectives of both networks
//! - [`registration`]: Procrustes, coherent point drift, simplification,
//!   and correspondence remeshing used to build training sets
//! - [`synth`]: a synthetic anatomy generator for tests and experiments
//! - [`trainer`]: alternating training loop, checkpoints, inference
//! - [`metrics`]: evaluation metrics and cohort reports
//! - [`cli`]: the `refshape` command-line front end
//!
//! The user guide under `book/` walks through each layer; its code samples
//! are compiled as doc-tests (see the hidden `book` module at the bottom
//! of this file).

pub mod cli;
pub mod error;
pub mod geom;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod registration;
pub mod sampling;
pub mod surface;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

// Book chapters double as doc-tests so the guide can never drift from the
// API. One module per chapter keeps test failures attributable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/surfaces.md")]
    mod surfaces {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/registration.md")]
    mod registration {}
    #[doc = include_str!("../../../book/src/synthetic-anatomy.md")]
    mod synthetic_anatomy {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
