//! Mapless lidar navigation: simulation, curriculum PPO training,
//! empirical evaluation and formal verification of trained policies.

pub mod envsuite;
pub mod geometry;
pub mod neural;
pub mod sim;
pub mod ppo;
pub mod curriculum;
pub mod verifier;
pub mod eval;
