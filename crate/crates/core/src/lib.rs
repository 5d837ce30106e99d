//! Finite element simulation of nonlinear Kelvin–Voigt viscoelasticity with
//! a linearized explicit time discretization.
//!
//! Each step minimizes the linearized power functional over velocities,
//! `min_z  <DE(y), z> - <l, z> + R(grad y, grad z)`, which is a symmetric
//! linear system, and then advances `y <- y + tau z`.

pub mod assembly;
pub mod fem;
pub mod linsolve;
pub mod material;
pub mod mesh;
pub mod sparse;
pub mod stepper;
pub mod oracle;
pub mod vtk;
