//! Imitation-learned lane following in a desk-scale simulator.

pub mod tensor;
pub mod sim;
pub mod expert;
pub mod data;
pub mod models;
pub mod train;
pub mod eval;
