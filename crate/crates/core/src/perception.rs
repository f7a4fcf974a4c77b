//! Occupancy grid and the agent's input vector.
//!
//! The grid is 7 lanes × 70 rows of 20×10 px cells. A cell holds the speed of
//! the vehicle occupying it, 0 when empty. When two bodies share a cell (they
//! can, without overlapping each other) the slower speed wins.
//!
//! The sensed slice is a window of the grid around a vehicle, normalized by
//! 80 mph. Columns beyond the road edge read [`WALL`]; rows beyond the ends of
//! the road read 0.

use std::collections::VecDeque;

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::sim::{
    row_of, VehicleId, World, CAR_LENGTH, CELL_LENGTH, GRID_ROWS, LANE_COUNT, MAX_SPEED,
};

/// Input value for a cell that lies off the side of the road.
pub const WALL: f64 = -1.0;
/// Speeds are divided by this before entering the network.
pub const SPEED_SCALE: f64 = MAX_SPEED;

const CELLS: usize = LANE_COUNT * GRID_ROWS;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid sensor config: {field}: {reason}")]
pub struct SensorError {
    pub field: &'static str,
    pub reason: String,
}

/// How much of the grid an agent sees, and how much of its past it remembers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub lanes_side: usize,
    pub patches_ahead: usize,
    pub patches_behind: usize,
    pub temporal_window: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            lanes_side: 1,
            patches_ahead: 12,
            patches_behind: 4,
            temporal_window: 0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), SensorError> {
        if 2 * self.lanes_side + 1 > LANE_COUNT {
            return Err(SensorError {
                field: "lanes_side",
                reason: format!("window of {} lanes is wider than the road", 2 * self.lanes_side + 1),
            });
        }
        if self.patches_ahead < 1 {
            return Err(SensorError {
                field: "patches_ahead",
                reason: "must be at least 1".into(),
            });
        }
        if self.patches_ahead + self.patches_behind > GRID_ROWS {
            return Err(SensorError {
                field: "patches_behind",
                reason: format!("patches_ahead + patches_behind must be at most {GRID_ROWS}"),
            });
        }
        if self.temporal_window > 64 {
            return Err(SensorError {
                field: "temporal_window",
                reason: "must be at most 64".into(),
            });
        }
        Ok(())
    }

    pub fn lanes(&self) -> usize {
        2 * self.lanes_side + 1
    }

    pub fn rows(&self) -> usize {
        self.patches_ahead + self.patches_behind
    }

    /// Number of values in one spatial slice.
    pub fn slice_size(&self) -> usize {
        self.lanes() * self.rows()
    }
}

/// `S·(W+1) + A·W`: the current slice, then `W` past slices each followed by
/// the one-hot action taken there.
pub fn input_size(sensor: &SensorConfig, action_count: usize) -> usize {
    let w = sensor.temporal_window;
    sensor.slice_size() * (w + 1) + action_count * w
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    cells: [f64; CELLS],
    pub frame: u64,
}

impl OccupancyGrid {
    pub fn empty(frame: u64) -> Self {
        Self {
            cells: [0.0; CELLS],
            frame,
        }
    }

    pub fn build(world: &World) -> Self {
        let mut grid = Self::empty(world.frame());
        let mut occupied = [false; CELLS];
        for v in world.vehicles() {
            if !v.is_on_road() {
                continue;
            }
            let first = row_of(v.y).max(0) as usize;
            let end = (((v.y + CAR_LENGTH) / CELL_LENGTH).ceil() as i64).min(GRID_ROWS as i64) as usize;
            let mask = v.lane_mask();
            for lane in 0..LANE_COUNT {
                if mask & (1 << lane) == 0 {
                    continue;
                }
                for row in first..end {
                    let k = lane * GRID_ROWS + row;
                    grid.cells[k] = if occupied[k] {
                        grid.cells[k].min(v.speed)
                    } else {
                        v.speed
                    };
                    occupied[k] = true;
                }
            }
        }
        grid
    }

    #[inline]
    pub fn get(&self, lane: usize, row: usize) -> f64 {
        self.cells[lane * GRID_ROWS + row]
    }

    /// Lane-major copy: `rows()[lane][row]`.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.cells.chunks(GRID_ROWS).map(|c| c.to_vec()).collect()
    }
}

impl Serialize for OccupancyGrid {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("OccupancyGrid", 2)?;
        st.serialize_field("frame", &self.frame)?;
        st.serialize_field("cells", &self.rows())?;
        st.end()
    }
}

/// Sensed window around `vehicle`, row by row from the farthest row ahead to
/// the last row behind, lanes left to right within a row.
pub fn slice_state(grid: &OccupancyGrid, world: &World, sensor: &SensorConfig, vehicle: VehicleId) -> Vec<f64> {
    let mut out = Vec::with_capacity(sensor.slice_size());
    slice_into(grid, world, sensor, vehicle, &mut out);
    out
}

pub fn slice_into(
    grid: &OccupancyGrid,
    world: &World,
    sensor: &SensorConfig,
    vehicle: VehicleId,
    out: &mut Vec<f64>,
) {
    out.clear();
    let v = world.vehicle(vehicle);
    let centre = v.lane() as i64;
    let nose = row_of(v.y);
    let side = sensor.lanes_side as i64;
    for dr in -(sensor.patches_ahead as i64)..sensor.patches_behind as i64 {
        let row = nose + dr;
        let row_on_road = (0..GRID_ROWS as i64).contains(&row);
        for dl in -side..=side {
            let lane = centre + dl;
            let value = if !(0..LANE_COUNT as i64).contains(&lane) {
                WALL
            } else if !row_on_road {
                0.0
            } else {
                grid.get(lane as usize, row as usize) / SPEED_SCALE
            };
            out.push(value);
        }
    }
}

/// Past (slice, action) pairs for the temporal window, newest first.
#[derive(Debug, Clone, Default)]
pub struct InputHistory {
    window: usize,
    action_count: usize,
    past: VecDeque<(Vec<f64>, usize)>,
}

impl InputHistory {
    pub fn new(window: usize, action_count: usize) -> Self {
        Self {
            window,
            action_count,
            past: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.past.len()
    }

    pub fn is_empty(&self) -> bool {
        self.past.is_empty()
    }

    pub fn clear(&mut self) {
        self.past.clear();
    }

    /// Record the slice seen and action taken at the decision just made.
    pub fn push(&mut self, slice: Vec<f64>, action: usize) {
        if self.window == 0 {
            return;
        }
        if self.past.len() == self.window {
            self.past.pop_back();
        }
        self.past.push_front((slice, action));
    }

    /// `[current, slice(t-1), onehot(a(t-1)), …, slice(t-W), onehot(a(t-W))]`,
    /// zero-filled where the history is shorter than the window.
    pub fn assemble(&self, current: &[f64]) -> Vec<f64> {
        let s = current.len();
        let mut out = Vec::with_capacity(s * (self.window + 1) + self.action_count * self.window);
        out.extend_from_slice(current);
        for k in 0..self.window {
            match self.past.get(k) {
                Some((slice, action)) => {
                    debug_assert_eq!(slice.len(), s);
                    out.extend_from_slice(slice);
                    out.extend((0..self.action_count).map(|a| if a == *action { 1.0 } else { 0.0 }));
                }
                None => out.extend(std::iter::repeat_n(0.0, s + self.action_count)),
            }
        }
        out
    }
}

/// Convenience for one-shot use: `history.assemble(current)`.
pub fn assemble_input(history: &InputHistory, current: &[f64]) -> Vec<f64> {
    history.assemble(current)
}
