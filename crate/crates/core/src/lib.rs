//! Forward-looking actor-critic library.
//!
//! Deterministic-policy actor-critic agents (DDPG, TD3) with the
//! forward-looking actor add-on: a learned system network forecasts the next
//! states, a learned reward network scores them, and the actor loss adds the
//! forecast rewards and values under an adaptive weight.

pub mod algorithms;
pub mod autodiff;
pub mod envs;
pub mod gradcheck;
pub mod harness;
pub mod networks;
pub mod replay;
