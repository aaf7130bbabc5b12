//! Diffusion policies for compliant manipulation.
//!
//! An action is a target pose, a gripper command and a diagonal stiffness;
//! an impedance controller turns it into a wrench on a simulated body. The
//! stack runs from demonstration collection through denoiser training to
//! closed-loop rollout with temporal ensembling.

pub mod autodiff;
pub mod compliance;
pub mod config;
pub mod datastore;
pub mod denoiser;
pub mod diffusion;
pub mod evalkit;
pub mod experts;
pub mod geometry;
pub mod runtime;
pub mod sim;
pub mod teleop;
pub mod train;
pub mod types;
