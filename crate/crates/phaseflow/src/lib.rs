//! Control synthesis and verification for mechanical Hamiltonian systems.
//!
//! The crate transports phase-space densities along controlled Hamiltonian
//! flows, rearranges densities through mesh permutations compiled into exact
//! Hamiltonian primitives, synthesizes small-time control schedules from
//! Poisson-bracket identities and steers finite point ensembles exactly.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default); every reduction is chunked and ordered so both execution
//! modes return bit-identical results.

// Negated comparisons reject NaN; indexed loops mirror per-axis formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod compiler;
pub mod density;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod fields;
pub mod flow;
pub mod geometry;
pub mod rearrange;
pub mod symbolic;
pub mod synthesis;
pub mod systems;

pub use error::{Error, ErrorClass, Result};
pub use exec::ExecMode;
pub use geometry::{CubeIndex, Mesh, MeshPermutation, PhasePoint, SpaceKind, SpaceSpec};
pub use symbolic::HamExpr;
