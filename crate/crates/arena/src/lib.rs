//! Competition backend: accepts agent configs, trains and scores them with a
//! fixed public protocol, keeps a leaderboard and streams live training.

pub mod api;
pub mod model;
pub mod session;
pub mod store;
pub mod worker;

pub use api::{router, AppState, Limits, Settings};
