//! Core library for learned keyframe and grid-size control in visual
//! odometry: pose algebra and trajectory alignment, trajectory-accuracy
//! metrics, the tracking reward, a stochastic desk-scale VO simulator, a
//! from-scratch differentiable policy/value network, and the on-policy
//! training stack. All randomness is seeded and all parallel paths are
//! bitwise-identical to their sequential counterparts.

pub mod env;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod ppo;
pub mod reward;
