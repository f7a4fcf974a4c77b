pub mod dqn;
pub mod harness;
pub mod neural;
pub mod perception;
pub mod sim;
