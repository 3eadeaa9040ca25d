//! Helpers shared by the integration tests and the acceptance binary.
#![allow(dead_code)]

pub mod fixtures;
pub mod gradients;
pub mod criteria;
pub mod oracles;
