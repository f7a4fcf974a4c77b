//! Relative-frame highway world.
//!
//! Seven 20 px lanes, 700 px of road, twenty 20×40 px vehicles. Every position
//! is expressed relative to the ego car, whose nose is pinned at `y = 175`.
//! `y` grows toward the rear of the road, so smaller `y` is further ahead.

mod config;
mod vehicle;
mod world;

pub use config::WorldConfig;
pub use vehicle::{Action, Direction, Vehicle, VehicleId, VehicleKind};
pub use world::{StepOutcome, World};

use thiserror::Error;

pub const LANE_COUNT: usize = 7;
pub const LANE_WIDTH: f64 = 20.0;
pub const ROAD_LENGTH: f64 = 700.0;
pub const CELL_LENGTH: f64 = 10.0;
pub const GRID_ROWS: usize = 70;

pub const CAR_WIDTH: f64 = 20.0;
pub const CAR_LENGTH: f64 = 40.0;
pub const VEHICLE_COUNT: usize = 20;

pub const EGO_ID: VehicleId = 0;
pub const EGO_LANE: usize = 3;
pub const EGO_NOSE_Y: f64 = 175.0;

pub const MAX_SPEED: f64 = 80.0;
pub const RED_START_SPEED: f64 = 80.0;
pub const AMBIENT_START_SPEED: f64 = 65.0;

/// Nose-to-nose distance, in cells, at which a follower adopts its leader's speed.
pub const FOLLOW_DISTANCE: f64 = 4.0;
/// Half-width of the band around [`FOLLOW_DISTANCE`] that counts as "exactly 4 cells".
pub const FOLLOW_TOLERANCE: f64 = 0.5;

/// Rows of the lane-change zone ahead of the nose row.
pub const ZONE_ROWS_AHEAD: i64 = 6;
/// Rows abreast of the deciding vehicle, nose row included.
pub const ZONE_ROWS_ABREAST: i64 = 4;
/// Rows of the zone behind the abreast block.
pub const ZONE_ROWS_BEHIND: i64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid world config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("could not place vehicles without safety conflicts after {attempts} attempts")]
    PlacementFailed { attempts: usize },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// Lane index whose column contains the pixel `x`.
#[inline]
pub fn lane_x(lane: usize) -> f64 {
    lane as f64 * LANE_WIDTH
}

/// Grid row containing pixel row `y` (may be negative or past the last row).
#[inline]
pub fn row_of(y: f64) -> i64 {
    (y / CELL_LENGTH).floor() as i64
}
