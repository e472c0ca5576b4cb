//! Simulation and verification toolkit for the kinetic coagulation-fragmentation
//! equation.

pub mod audit;
pub mod cli;
pub mod diagnostics;
pub mod dsmc;
pub mod homogeneous;
pub mod io;
pub mod kernels;
pub mod state_space;
pub mod stochastics;
pub mod vec3;
pub mod verify;

pub use kernels::{BuiltinCoag, BuiltinFrag, CoagKernel, FragKernel, KernelSuite};
pub use state_space::{ParticleState, PhasePoint, StateBox};
pub use stochastics::{McEstimate, StreamKey};
pub use vec3::Vec3;
