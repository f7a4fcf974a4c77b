use serde::{Deserialize, Serialize};

use super::{lane_x, CAR_LENGTH, CAR_WIDTH, LANE_COUNT, LANE_WIDTH, ROAD_LENGTH};

pub type VehicleId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleKind {
    Ego,
    AgentClone,
    Ambient,
}

/// The five driving actions. Discriminants are the network's output indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    NoOp = 0,
    Accelerate = 1,
    Decelerate = 2,
    LaneLeft = 3,
    LaneRight = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::NoOp,
        Action::Accelerate,
        Action::Decelerate,
        Action::LaneLeft,
        Action::LaneRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Self::ALL.get(index).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: VehicleId,
    pub kind: VehicleKind,
    /// Left edge of the body, pixels.
    pub x: f64,
    /// Nose of the body, pixels; the tail is at `y + 40`.
    pub y: f64,
    pub speed_max: f64,
    pub speed_factor: f64,
    /// Speed actually driven on the most recent frame, after the safety system.
    pub speed: f64,
    pub target_lane: usize,
    pub decision_period: u32,
}

impl Vehicle {
    pub fn new(id: VehicleId, kind: VehicleKind, lane: usize, y: f64, speed: f64) -> Self {
        let speed_max = super::MAX_SPEED;
        Self {
            id,
            kind,
            x: lane_x(lane),
            y,
            speed_max,
            speed_factor: speed / speed_max,
            speed,
            target_lane: lane,
            decision_period: 4,
        }
    }

    pub fn is_red(&self) -> bool {
        !matches!(self.kind, VehicleKind::Ambient)
    }

    /// `speed_max × speed_factor`, the speed the driver is asking for.
    #[inline]
    pub fn commanded_speed(&self) -> f64 {
        self.speed_max * self.speed_factor
    }

    pub fn set_commanded_speed(&mut self, mph: f64) {
        let mph = mph.clamp(0.0, self.speed_max);
        self.speed_factor = mph / self.speed_max;
    }

    pub fn is_changing_lane(&self) -> bool {
        self.x != lane_x(self.target_lane)
    }

    /// Lane the vehicle is in, or heading for while a change is under way.
    pub fn lane(&self) -> usize {
        self.target_lane
    }

    /// Horizontal extent covered by the body now and by its committed destination.
    pub fn footprint_x(&self) -> (f64, f64) {
        let target = lane_x(self.target_lane);
        (self.x.min(target), self.x.max(target) + CAR_WIDTH)
    }

    /// Bit `l` set for every lane the footprint touches.
    #[inline]
    pub fn lane_mask(&self) -> u8 {
        let (left, right) = self.footprint_x();
        let lo = (left / LANE_WIDTH).floor().max(0.0) as usize;
        let hi = ((right / LANE_WIDTH).ceil() as usize).min(LANE_COUNT);
        let mut mask = 0u8;
        for lane in lo..hi {
            mask |= 1 << lane;
        }
        mask
    }

    #[inline]
    pub fn occupies_lane(&self, lane: usize) -> bool {
        self.lane_mask() & (1 << lane) != 0
    }

    /// Any part of the body lies on the 700 px road.
    #[inline]
    pub fn is_on_road(&self) -> bool {
        self.y < ROAD_LENGTH && self.y + CAR_LENGTH > 0.0
    }
}
