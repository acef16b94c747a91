//! Joint registration of overlapping image tiles.
//!
//! Each tile gets a transform (translation, affine or polynomial) mapping its
//! pixels into a shared world frame. All transforms are found at once as the
//! minimizer of a sparse least-squares objective over point matches, plus a
//! Tikhonov term pulling every tile toward a rigid approximation estimated
//! from the same matches.
//!
//! [`pipeline::solve_dataset`] is the usual entry point. The `examples/`
//! directory holds one program per capability:
//!
//! - `montage_solve`: solve a synthetic montage and compare with the truth
//! - `rigid_prior`: the rigid approximation on its own
//! - `lambda_sweep`: the deformation/residual trade-off over λ
//! - `volume_freeze`: a multi-section volume with one section frozen
//! - `backend_compare`: direct Cholesky against CG, BiCGSTAB and GMRES
//! - `scale_collapse`: what happens without regularization
//! - `export_matrix_market`: hand the system to an external solver
//!
//! The `tilereg` binary wraps the same operations for files on disk.

pub mod assembly;
pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod regularize;
pub mod rigid_prior;
pub mod solvers;
pub mod synth;
pub mod sparse;

pub use error::{Error, Result};
