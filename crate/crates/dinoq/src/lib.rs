//! Headless dino-runner reinforcement learning stack.
//!
//! The crate bundles a deterministic side-scrolling runner game, a raster
//! pipeline that turns game states into stacked 80x80 grayscale frames, a
//! from-scratch convolutional Q-network with manual backpropagation and Adam,
//! an experience replay memory, and three temporal-difference agents (DQN,
//! Double DQN, Expected SARSA) plus the training harness and CLI that tie
//! them together.
//!
//! Everything is deterministic: all randomness flows through explicitly
//! seeded SplitMix64 streams, so a run is reproducible bit-for-bit from its
//! seed.

pub mod agents;
pub mod cli;
pub mod env;
pub mod harness;
pub mod nn;
pub mod raster;
pub mod replay;
pub mod rng;
