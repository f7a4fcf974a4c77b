use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    lane_x, row_of, Action, Direction, SimError, Vehicle, VehicleId, VehicleKind, WorldConfig,
    AMBIENT_START_SPEED, CAR_LENGTH, CELL_LENGTH, EGO_ID, EGO_LANE, EGO_NOSE_Y, FOLLOW_DISTANCE,
    FOLLOW_TOLERANCE, GRID_ROWS, LANE_COUNT, RED_START_SPEED, ROAD_LENGTH, VEHICLE_COUNT,
    ZONE_ROWS_ABREAST, ZONE_ROWS_AHEAD, ZONE_ROWS_BEHIND,
};

/// Per-frame displacements are rounded to this many pixels. All positions stay
/// dyadic rationals, so gaps and tangency tests are exact in `f64`.
const POSITION_QUANTUM: f64 = 1.0 / 1024.0;

const PLACEMENT_DRAWS: usize = 400;
const PLACEMENT_RESTARTS: usize = 5_000;
/// Initial same-lane spacing, nose to nose: one full cell beyond the follow band.
const PLACEMENT_SAME_LANE_GAP: f64 = 50.0;
/// Nose-to-nose clearance required in the spawn lane when a vehicle re-enters.
const RESPAWN_CLEARANCE: f64 = 60.0;
const RESPAWN_LANE_DRAWS: usize = LANE_COUNT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Frame that was just simulated.
    pub frame: u64,
    pub ego_speed_mph: f64,
    /// Effective speed of every red car this frame, ego first.
    pub red_speeds_mph: Vec<f64>,
    pub respawned_ids: Vec<VehicleId>,
}

/// Full simulation state. Cheap to clone; owns its RNG.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    frame: u64,
    vehicles: Vec<Vehicle>,
    rng: ChaCha8Rng,
    order: Vec<VehicleId>,
    speeds: Vec<f64>,
    masks: Vec<u8>,
}

/// Speed rule applied to a follower whose nearest leader is `gap_cells`
/// (nose to nose) ahead and driving `leader_speed`.
#[inline]
pub(crate) fn safety_rule(commanded: f64, gap_cells: f64, leader_speed: f64) -> f64 {
    if (gap_cells - FOLLOW_DISTANCE).abs() < FOLLOW_TOLERANCE {
        commanded.min(leader_speed)
    } else if gap_cells < FOLLOW_DISTANCE {
        commanded.min(leader_speed / 2.0)
    } else {
        commanded
    }
}

/// Pixel interval `[lo, hi)` of the lane-change zone of a vehicle whose nose is
/// at `y`, clipped to the road.
#[inline]
pub(crate) fn zone_interval(y: f64) -> (f64, f64) {
    let nose = row_of(y);
    let first = (nose - ZONE_ROWS_AHEAD).max(0);
    let end = (nose + ZONE_ROWS_ABREAST + ZONE_ROWS_BEHIND).min(GRID_ROWS as i64);
    (first as f64 * CELL_LENGTH, end as f64 * CELL_LENGTH)
}

#[inline]
fn body_intersects(y: f64, lo: f64, hi: f64) -> bool {
    y < hi && y + CAR_LENGTH > lo
}

fn quantize(px: f64) -> f64 {
    (px / POSITION_QUANTUM).round() * POSITION_QUANTUM
}

impl World {
    /// Fresh world: ego centred, clones and ambient cars scattered by rejection
    /// sampling so that nobody starts inside anybody's safety envelope.
    pub fn new(config: WorldConfig, seed: u64) -> Result<World, SimError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let period = config.default_decision_period;
        let clones = config.agent_clone_count;

        for _ in 0..PLACEMENT_RESTARTS {
            let mut ego = Vehicle::new(EGO_ID, VehicleKind::Ego, EGO_LANE, EGO_NOSE_Y, RED_START_SPEED);
            ego.decision_period = period;
            let mut placed = vec![ego];
            'vehicles: for id in 1..VEHICLE_COUNT {
                let (kind, speed) = if id <= clones {
                    (VehicleKind::AgentClone, RED_START_SPEED)
                } else {
                    (VehicleKind::Ambient, AMBIENT_START_SPEED)
                };
                for _ in 0..PLACEMENT_DRAWS {
                    let lane = rng.gen_range(0..LANE_COUNT);
                    let y = rng.gen_range(0..=(ROAD_LENGTH - CAR_LENGTH) as i64) as f64;
                    if placed.iter().all(|p| !placement_conflict(p, lane, y)) {
                        let mut v = Vehicle::new(id, kind, lane, y, speed);
                        v.decision_period = period;
                        placed.push(v);
                        continue 'vehicles;
                    }
                }
                break;
            }
            if placed.len() == VEHICLE_COUNT {
                let n = placed.len();
                return Ok(World {
                    config,
                    frame: 0,
                    vehicles: placed,
                    rng,
                    order: Vec::with_capacity(n),
                    speeds: vec![0.0; n],
                    masks: vec![0; n],
                });
            }
        }
        Err(SimError::PlacementFailed {
            attempts: PLACEMENT_RESTARTS,
        })
    }

    /// Hand-built world for tests and fixtures. Ids must equal positions,
    /// vehicle 0 must be the ego at its pinned spot, and no bodies may overlap.
    pub fn from_vehicles(
        config: WorldConfig,
        vehicles: Vec<Vehicle>,
        seed: u64,
    ) -> Result<World, SimError> {
        config.validate()?;
        if vehicles.is_empty() || vehicles.len() > VEHICLE_COUNT {
            return Err(SimError::InvalidScene(format!(
                "expected 1..=20 vehicles, got {}",
                vehicles.len()
            )));
        }
        for (i, v) in vehicles.iter().enumerate() {
            if v.id != i {
                return Err(SimError::InvalidScene(format!("vehicle at index {i} has id {}", v.id)));
            }
            if (v.kind == VehicleKind::Ego) != (i == EGO_ID) {
                return Err(SimError::InvalidScene("vehicle 0, and only vehicle 0, is the ego".into()));
            }
            if v.target_lane >= LANE_COUNT || !(0.0..=lane_x(LANE_COUNT - 1)).contains(&v.x) {
                return Err(SimError::InvalidScene(format!("vehicle {i} is off the lanes")));
            }
            if !(v.speed_max > 0.0 && (0.0..=1.0).contains(&v.speed_factor)) || v.decision_period == 0 {
                return Err(SimError::InvalidScene(format!("vehicle {i} has invalid speed settings")));
            }
        }
        let ego = &vehicles[EGO_ID];
        if ego.y != EGO_NOSE_Y {
            return Err(SimError::InvalidScene("ego nose must sit at y = 175".into()));
        }
        let n = vehicles.len();
        let world = World {
            config,
            frame: 0,
            vehicles,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::with_capacity(n),
            speeds: vec![0.0; n],
            masks: vec![0; n],
        };
        if let Some((a, b)) = world.first_overlap() {
            return Err(SimError::InvalidScene(format!("vehicles {a} and {b} overlap")));
        }
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn vehicle(&self, id: VehicleId) -> &Vehicle {
        &self.vehicles[id]
    }

    /// Mutable access for building test scenes; callers keep the invariants.
    pub fn vehicle_mut(&mut self, id: VehicleId) -> &mut Vehicle {
        &mut self.vehicles[id]
    }

    pub fn set_frame(&mut self, frame: u64) {
        self.frame = frame;
    }

    pub fn ego(&self) -> &Vehicle {
        &self.vehicles[EGO_ID]
    }

    pub fn red_ids(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.vehicles.iter().filter(|v| v.is_red()).map(|v| v.id)
    }

    pub fn is_decision_frame(&self, id: VehicleId) -> bool {
        self.frame.is_multiple_of(u64::from(self.vehicles[id].decision_period))
    }

    /// Signed nose-to-nose distance in cells; positive when `i` is behind `j`.
    pub fn d_long(&self, i: VehicleId, j: VehicleId) -> f64 {
        (self.vehicles[i].y - self.vehicles[j].y) / CELL_LENGTH
    }

    fn shares_lane(&self, i: VehicleId, j: VehicleId) -> bool {
        self.vehicles[i].lane_mask() & self.vehicles[j].lane_mask() != 0
    }

    /// Nearest on-road vehicle ahead of `i` in any lane `i` occupies.
    pub fn leader_of(&self, i: VehicleId) -> Option<VehicleId> {
        let me = &self.vehicles[i];
        if !me.is_on_road() {
            return None;
        }
        let mask = me.lane_mask();
        self.vehicles
            .iter()
            .filter(|v| v.id != i && v.is_on_road() && v.y < me.y && v.lane_mask() & mask != 0)
            .max_by(|a, b| a.y.total_cmp(&b.y).then(b.id.cmp(&a.id)))
            .map(|v| v.id)
    }

    /// Speed `i` would drive after the safety system, given the speeds its
    /// leaders drove on the last frame. Never exceeds the commanded speed.
    pub fn safety_speed(&self, i: VehicleId) -> f64 {
        let commanded = self.vehicles[i].commanded_speed();
        match self.leader_of(i) {
            Some(j) => safety_rule(commanded, self.d_long(i, j), self.vehicles[j].speed),
            None => commanded,
        }
    }

    /// Whether the adjacent lane on `direction` is clear of the 4 cells abreast,
    /// the cell behind and the 6 cells ahead of `i`.
    pub fn lane_change_permitted(&self, i: VehicleId, direction: Direction) -> bool {
        let me = &self.vehicles[i];
        let Some(lane) = adjacent_lane(me.lane(), direction) else {
            return false;
        };
        let (lo, hi) = zone_interval(me.y);
        if lo >= hi {
            return true;
        }
        !self.vehicles.iter().any(|v| {
            v.id != i && v.is_on_road() && v.occupies_lane(lane) && body_intersects(v.y, lo, hi)
        })
    }

    /// Apply a driver decision. Lane changes are silently refused when blocked,
    /// off the edge of the road, or while a previous change is still running.
    pub fn apply_action(&mut self, i: VehicleId, action: Action) {
        let delta = self.config.speed_delta_per_action;
        match action {
            Action::NoOp => {}
            Action::Accelerate => {
                let v = &mut self.vehicles[i];
                v.set_commanded_speed(v.commanded_speed() + delta);
            }
            Action::Decelerate => {
                let v = &mut self.vehicles[i];
                v.set_commanded_speed(v.commanded_speed() - delta);
            }
            Action::LaneLeft | Action::LaneRight => {
                let direction = if action == Action::LaneLeft {
                    Direction::Left
                } else {
                    Direction::Right
                };
                let v = &self.vehicles[i];
                if v.is_changing_lane() {
                    return;
                }
                if let Some(lane) = adjacent_lane(v.lane(), direction) {
                    if self.lane_change_permitted(i, direction) {
                        self.vehicles[i].target_lane = lane;
                    }
                }
            }
        }
    }

    /// White-car driver: a uniformly chosen permitted lane change with the
    /// configured probability, otherwise keep going.
    pub fn ambient_policy(&mut self, i: VehicleId) -> Action {
        let p = self.config.ambient_lane_change_prob;
        if self.rng.gen::<f64>() >= p {
            return Action::NoOp;
        }
        let mut options = [Action::NoOp; 2];
        let mut n = 0;
        for (direction, action) in [(Direction::Left, Action::LaneLeft), (Direction::Right, Action::LaneRight)] {
            if self.lane_change_permitted(i, direction) {
                options[n] = action;
                n += 1;
            }
        }
        match n {
            0 => Action::NoOp,
            _ => options[self.rng.gen_range(0..n)],
        }
    }

    /// Let every vehicle due for a decision this frame make one, in id order.
    /// Red cars ask `red_policy`; ambient cars use [`World::ambient_policy`].
    pub fn decide<F>(&mut self, mut red_policy: F)
    where
        F: FnMut(&World, VehicleId) -> Action,
    {
        for i in 0..self.vehicles.len() {
            if !self.is_decision_frame(i) || !self.vehicles[i].is_on_road() {
                continue;
            }
            let action = if self.vehicles[i].is_red() {
                red_policy(self, i)
            } else {
                self.ambient_policy(i)
            };
            self.apply_action(i, action);
        }
    }

    /// [`World::decide`] followed by [`World::step`].
    pub fn advance<F>(&mut self, red_policy: F) -> StepOutcome
    where
        F: FnMut(&World, VehicleId) -> Action,
    {
        self.decide(red_policy);
        self.step()
    }

    /// Integrate one frame: safety-filter speeds front to back, move every car
    /// relative to the ego, slide lane changes, respawn cars that left the road.
    pub fn step(&mut self) -> StepOutcome {
        let k = self.config.mph_to_px_per_frame;
        let n = self.vehicles.len();

        self.order.clear();
        self.order.extend((0..n).filter(|&i| self.vehicles[i].is_on_road()));
        let vehicles = &self.vehicles;
        self.order
            .sort_unstable_by(|&a, &b| vehicles[a].y.total_cmp(&vehicles[b].y).then(a.cmp(&b)));

        for (i, v) in self.vehicles.iter().enumerate() {
            self.speeds[i] = v.commanded_speed();
            self.masks[i] = v.lane_mask();
        }
        for pos in 0..self.order.len() {
            let i = self.order[pos];
            let me = &self.vehicles[i];
            let mask = self.masks[i];
            let mut speed = me.commanded_speed();
            let mut nearest = true;
            for &j in self.order[..pos].iter().rev() {
                if self.masks[j] & mask == 0 {
                    continue;
                }
                let other = &self.vehicles[j];
                let gap_px = me.y - other.y;
                if nearest {
                    speed = safety_rule(speed, gap_px / CELL_LENGTH, self.speeds[j]);
                    nearest = false;
                }
                // Never close the gap past bumper contact within this frame.
                let bound = self.speeds[j] + (gap_px - CAR_LENGTH).max(0.0) / k;
                speed = speed.min(bound);
            }
            self.speeds[i] = speed.max(0.0);
        }

        // Move in the road frame, resolve contact front to back, then re-centre
        // on the ego. Quantized displacements keep all of this exact.
        // Cars waiting to respawn stay parked where they left the road.
        for &i in &self.order {
            self.vehicles[i].y -= quantize(self.speeds[i] * k);
        }
        for pos in 1..self.order.len() {
            let i = self.order[pos];
            let mask = self.masks[i];
            let mut y = self.vehicles[i].y;
            for &j in &self.order[..pos] {
                let front = &self.vehicles[j];
                if self.masks[j] & mask != 0 && y < front.y + CAR_LENGTH {
                    y = front.y + CAR_LENGTH;
                }
            }
            self.vehicles[i].y = y;
        }
        let shift = EGO_NOSE_Y - self.vehicles[EGO_ID].y;
        for &i in &self.order {
            self.vehicles[i].y += shift;
        }

        let frame = self.frame;
        for (i, v) in self.vehicles.iter_mut().enumerate() {
            v.speed = self.speeds[i];
            let target = lane_x(v.target_lane);
            if v.x != target {
                let period = u64::from(v.decision_period);
                let remaining = period - frame % period;
                if remaining <= 1 {
                    v.x = target;
                } else {
                    v.x += (target - v.x) / remaining as f64;
                }
            }
        }

        let mut respawned_ids = Vec::new();
        for i in 0..n {
            if i != EGO_ID && !self.vehicles[i].is_on_road() && self.respawn(i) {
                respawned_ids.push(i);
            }
        }

        self.frame += 1;
        StepOutcome {
            frame,
            ego_speed_mph: self.vehicles[EGO_ID].speed,
            red_speeds_mph: self
                .vehicles
                .iter()
                .filter(|v| v.is_red())
                .map(|v| v.speed)
                .collect(),
            respawned_ids,
        }
    }

    /// Re-enter a vehicle at the end of the road opposite to where it left.
    /// Returns false if every lane is crowded; the car stays off-road and the
    /// attempt repeats next frame.
    fn respawn(&mut self, i: VehicleId) -> bool {
        let spawn_y = if self.vehicles[i].y >= ROAD_LENGTH {
            0.0
        } else {
            ROAD_LENGTH - CAR_LENGTH
        };
        let mut lane = None;
        for _ in 0..RESPAWN_LANE_DRAWS {
            let candidate = self.rng.gen_range(0..LANE_COUNT);
            if self.spawn_clear(i, candidate, spawn_y) {
                lane = Some(candidate);
                break;
            }
        }
        if lane.is_none() {
            lane = (0..LANE_COUNT).find(|&l| self.spawn_clear(i, l, spawn_y));
        }
        let Some(lane) = lane else {
            return false;
        };
        let speed = if self.vehicles[i].kind == VehicleKind::Ambient {
            let [lo, hi] = self.config.ambient_respawn_speed_range;
            if lo < hi {
                self.rng.gen_range(lo..hi)
            } else {
                lo
            }
        } else {
            self.vehicles[i].commanded_speed()
        };
        let v = &mut self.vehicles[i];
        v.x = lane_x(lane);
        v.target_lane = lane;
        v.y = spawn_y;
        v.set_commanded_speed(speed);
        v.speed = v.commanded_speed();
        true
    }

    fn spawn_clear(&self, i: VehicleId, lane: usize, y: f64) -> bool {
        self.vehicles.iter().all(|v| {
            v.id == i
                || !v.is_on_road()
                || !v.occupies_lane(lane)
                || (v.y - y).abs() >= RESPAWN_CLEARANCE
        })
    }

    /// First pair of on-road vehicles sharing a lane whose bodies intersect.
    pub fn first_overlap(&self) -> Option<(VehicleId, VehicleId)> {
        let n = self.vehicles.len();
        for a in 0..n {
            for b in (a + 1)..n {
                let (va, vb) = (&self.vehicles[a], &self.vehicles[b]);
                if !va.is_on_road() || !vb.is_on_road() || !self.shares_lane(a, b) {
                    continue;
                }
                let (front, back) = if va.y <= vb.y { (va, vb) } else { (vb, va) };
                if back.y < front.y + CAR_LENGTH {
                    return Some((a, b));
                }
            }
        }
        None
    }
}

fn adjacent_lane(lane: usize, direction: Direction) -> Option<usize> {
    match direction {
        Direction::Left => lane.checked_sub(1),
        Direction::Right => (lane + 1 < LANE_COUNT).then_some(lane + 1),
    }
}

/// Would a settled car at (`lane`, `y`) start inside `placed`'s safety envelope,
/// or `placed` inside its own?
fn placement_conflict(placed: &Vehicle, lane: usize, y: f64) -> bool {
    let other = placed.lane();
    if other == lane {
        return (placed.y - y).abs() < PLACEMENT_SAME_LANE_GAP;
    }
    if other.abs_diff(lane) == 1 {
        let (lo, hi) = zone_interval(y);
        let (plo, phi) = zone_interval(placed.y);
        return body_intersects(placed.y, lo, hi) || body_intersects(y, plo, phi);
    }
    false
}
