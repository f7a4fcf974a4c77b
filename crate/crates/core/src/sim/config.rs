use serde::{Deserialize, Serialize};

use super::{SimError, LANE_COUNT, LANE_WIDTH, MAX_SPEED, ROAD_LENGTH, VEHICLE_COUNT};

/// World parameters. Geometry fields are carried for completeness of the
/// document but must match the fixed 7 × 20 px × 700 px road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub lane_count: usize,
    pub highway_length: f64,
    pub lane_width: f64,
    /// Pixels travelled per frame for each mph of speed difference.
    pub mph_to_px_per_frame: f64,
    pub default_decision_period: u32,
    pub speed_delta_per_action: f64,
    pub ambient_lane_change_prob: f64,
    pub ambient_respawn_speed_range: [f64; 2],
    pub agent_clone_count: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            lane_count: LANE_COUNT,
            highway_length: ROAD_LENGTH,
            lane_width: LANE_WIDTH,
            mph_to_px_per_frame: 0.2,
            default_decision_period: 4,
            speed_delta_per_action: 1.0,
            ambient_lane_change_prob: 0.02,
            ambient_respawn_speed_range: [60.0, 70.0],
            agent_clone_count: 0,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SimError {
    SimError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.lane_count != LANE_COUNT {
            return Err(invalid("lane_count", format!("must be {LANE_COUNT}")));
        }
        if self.highway_length != ROAD_LENGTH {
            return Err(invalid("highway_length", format!("must be {ROAD_LENGTH}")));
        }
        if self.lane_width != LANE_WIDTH {
            return Err(invalid("lane_width", format!("must be {LANE_WIDTH}")));
        }
        let k = self.mph_to_px_per_frame;
        if !(k.is_finite() && k > 0.0 && k <= 1.0) {
            return Err(invalid("mph_to_px_per_frame", "must be in (0, 1]"));
        }
        if self.default_decision_period == 0 || self.default_decision_period > 1000 {
            return Err(invalid("default_decision_period", "must be in 1..=1000"));
        }
        let delta = self.speed_delta_per_action;
        if !(delta.is_finite() && delta > 0.0 && delta <= MAX_SPEED) {
            return Err(invalid("speed_delta_per_action", "must be in (0, 80]"));
        }
        let p = self.ambient_lane_change_prob;
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid("ambient_lane_change_prob", "must be in [0, 1]"));
        }
        let [lo, hi] = self.ambient_respawn_speed_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi && hi <= MAX_SPEED) {
            return Err(invalid(
                "ambient_respawn_speed_range",
                "must satisfy 0 < low <= high <= 80",
            ));
        }
        if self.agent_clone_count > VEHICLE_COUNT - 1 {
            return Err(invalid("agent_clone_count", "at most 19 clones fit beside the ego"));
        }
        Ok(())
    }

    pub fn ambient_count(&self) -> usize {
        VEHICLE_COUNT - 1 - self.agent_clone_count
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| SimError::InvalidScene(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world config serializes")
    }
}
