//! Deterministic 2D simulation of an omnidirectional robot carrying a
//! 360° lidar.
//!
//! The world is a rectangular room with convex polygonal obstacles. Each
//! step the robot either translates by a fixed length in one of several
//! directions relative to its heading (the base is holonomic, so heading is
//! unchanged) or rotates in place. Rewards follow the crash / reach /
//! progress scheme:
//!
//! ```text
//! r_t = r_crash                   if the robot disc touches an obstacle or wall
//!       r_reach                   if the goal is within goal_radius
//!       psi * (d_{t-1} - d_t)     otherwise
//! ```

use crate::geometry::{normalize_angle, Polygon, Rect, Segment, Vec2};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

/// Number of lidar rays.
pub const N_SCANS: usize = 51;
/// Length of the network input vector: scans + goal distance + goal bearing.
pub const OBS_DIM: usize = N_SCANS + 2;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("point ({x}, {y}) lies outside the world bounds")]
    OutsideBounds { x: f64, y: f64 },
    #[error("episode already ended ({0:?})")]
    EpisodeOver(Terminal),
    #[error("action index {index} out of range for {n_actions} actions")]
    InvalidAction { index: usize, n_actions: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

/// Static room layout. Obstacles are convex counterclockwise polygons.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldGeometry {
    bounds: Rect,
    obstacles: Vec<Polygon>,
    // bounding circles for ray culling, one per obstacle
    circles: Vec<(Vec2, f64)>,
}

impl WorldGeometry {
    pub fn new(bounds: Rect, obstacles: Vec<Polygon>) -> Result<Self, SimError> {
        if !bounds.is_well_formed() {
            return Err(SimError::InvalidGeometry(format!(
                "bounds {bounds:?} are empty or non-finite"
            )));
        }
        for (i, poly) in obstacles.iter().enumerate() {
            if poly.vertices.len() < 3 {
                return Err(SimError::InvalidGeometry(format!(
                    "obstacle {i} has {} vertices, need at least 3",
                    poly.vertices.len()
                )));
            }
            if !poly.is_convex_ccw() {
                return Err(SimError::InvalidGeometry(format!(
                    "obstacle {i} is not a convex counterclockwise polygon"
                )));
            }
            if let Some(v) = poly.vertices.iter().find(|v| !bounds.contains_strictly(**v)) {
                return Err(SimError::InvalidGeometry(format!(
                    "obstacle {i} vertex ({}, {}) is not strictly inside the bounds",
                    v.x, v.y
                )));
            }
        }
        let circles = obstacles
            .iter()
            .map(|p| {
                let n = p.vertices.len() as f64;
                let c = p.vertices.iter().fold(Vec2::default(), |acc, &v| acc + v) * (1.0 / n);
                let r = p.vertices.iter().map(|&v| v.distance(c)).fold(0.0, f64::max);
                (c, r)
            })
            .collect();
        Ok(Self {
            bounds,
            obstacles,
            circles,
        })
    }

    pub fn empty(bounds: Rect) -> Result<Self, SimError> {
        Self::new(bounds, Vec::new())
    }

    pub fn bounds(&self) -> &Rect {
        &self.bounds
    }

    pub fn obstacles(&self) -> &[Polygon] {
        &self.obstacles
    }

    /// Whether a disc of `radius` centered at `p` touches a wall or obstacle.
    pub fn disc_collides(&self, p: Vec2, radius: f64) -> bool {
        !self.disc_inside_bounds(p, radius)
            || self
                .obstacles
                .iter()
                .any(|o| o.distance_to_point(p) < radius)
    }

    fn disc_inside_bounds(&self, p: Vec2, radius: f64) -> bool {
        p.x - radius >= self.bounds.min.x
            && p.x + radius <= self.bounds.max.x
            && p.y - radius >= self.bounds.min.y
            && p.y + radius <= self.bounds.max.y
    }

    /// Whether a disc swept along `from → to` touches anything.
    ///
    /// The eroded room is convex, so the wall test only needs the endpoints.
    pub fn sweep_collides(&self, from: Vec2, to: Vec2, radius: f64) -> bool {
        if !self.disc_inside_bounds(from, radius) || !self.disc_inside_bounds(to, radius) {
            return true;
        }
        let path = Segment::new(from, to);
        self.obstacles
            .iter()
            .any(|o| o.distance_to_segment(&path) < radius)
    }
}

/// Robot pose plus its collision disc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Vec2,
    /// Radians in `[-π, π)`.
    pub heading: f64,
    pub radius: f64,
}

impl RobotState {
    pub fn new(position: Vec2, heading: f64, radius: f64) -> Self {
        Self {
            position,
            heading: normalize_angle(heading),
            radius,
        }
    }
}

/// The 53-value network input, every component normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    values: [f64; OBS_DIM],
}

impl Observation {
    pub fn scans(&self) -> &[f64] {
        &self.values[..N_SCANS]
    }

    pub fn goal_distance(&self) -> f64 {
        self.values[N_SCANS]
    }

    pub fn goal_bearing(&self) -> f64 {
        self.values[N_SCANS + 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// What a discrete action does.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// Translate at this angle (degrees) relative to heading; positive is left.
    Translate(f64),
    RotateLeft,
    RotateRight,
}

/// Index of a discrete action in `[0, n_actions)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionId(pub usize);

/// Ordered table mapping output indices to action semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionMap {
    actions: Vec<ActionKind>,
}

impl Default for ActionMap {
    /// Five translations at −90°, −45°, 0°, +45°, +90° then rotate-left,
    /// rotate-right.
    fn default() -> Self {
        Self {
            actions: vec![
                ActionKind::Translate(-90.0),
                ActionKind::Translate(-45.0),
                ActionKind::Translate(0.0),
                ActionKind::Translate(45.0),
                ActionKind::Translate(90.0),
                ActionKind::RotateLeft,
                ActionKind::RotateRight,
            ],
        }
    }
}

impl ActionMap {
    pub fn new(actions: Vec<ActionKind>) -> Self {
        Self { actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, id: ActionId) -> Option<ActionKind> {
        self.actions.get(id.0).copied()
    }

    pub fn kinds(&self) -> &[ActionKind] {
        &self.actions
    }

    /// Indices whose kind satisfies `pred`.
    pub fn indices_where(&self, pred: impl Fn(ActionKind) -> bool) -> Vec<usize> {
        self.actions
            .iter()
            .enumerate()
            .filter(|(_, k)| pred(**k))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Kinematic and reward constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub step_length: f64,
    /// Radians.
    pub turn_angle: f64,
    pub goal_radius: f64,
    pub robot_radius: f64,
    pub max_range: f64,
    pub max_steps: u32,
    pub reward_crash: f64,
    pub reward_reach: f64,
    pub progress_scale: f64,
    pub actions: ActionMap,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            step_length: 0.5,
            turn_angle: 30f64.to_radians(),
            goal_radius: 1.0,
            robot_radius: 0.4,
            max_range: 10.0,
            max_steps: 500,
            reward_crash: -100.0,
            reward_reach: 300.0,
            progress_scale: 10.0,
            actions: ActionMap::default(),
        }
    }
}

impl SimParams {
    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    None,
    Crashed,
    Reached,
    Timeout,
}

impl Terminal {
    pub fn is_terminal(self) -> bool {
        self != Terminal::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Terminal::None => "none",
            Terminal::Crashed => "crashed",
            Terminal::Reached => "reached",
            Terminal::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: Terminal,
}

/// Distance from `origin` to the first wall or obstacle edge along the ray,
/// capped at `max_range`.
pub fn raycast(
    world: &WorldGeometry,
    origin: Vec2,
    angle: f64,
    max_range: f64,
) -> Result<f64, SimError> {
    if !world.bounds.contains(origin) {
        return Err(SimError::OutsideBounds {
            x: origin.x,
            y: origin.y,
        });
    }
    let dir = Vec2::from_angle(angle);
    let mut best = max_range;
    for edge in world.bounds.edges() {
        if let Some(t) = edge.ray_hit(origin, dir) {
            best = best.min(t);
        }
    }
    for (poly, &(center, radius)) in world.obstacles.iter().zip(&world.circles) {
        let to_c = center - origin;
        let along = to_c.dot(dir);
        if along + radius < 0.0 || along - radius > best {
            continue;
        }
        let perp = to_c.cross(dir).abs();
        if perp > radius {
            continue;
        }
        for edge in poly.edges() {
            if let Some(t) = edge.ray_hit(origin, dir) {
                best = best.min(t);
            }
        }
    }
    Ok(best)
}

/// Lidar sweep plus polar goal coordinates, all scaled into `[0, 1]`.
///
/// Ray `i` points at `heading + 2πi/51`, i.e. counterclockwise from the
/// heading.
pub fn observe(
    world: &WorldGeometry,
    robot: &RobotState,
    goal: Vec2,
    max_range: f64,
) -> Result<Observation, SimError> {
    if !world.bounds.contains(goal) {
        return Err(SimError::OutsideBounds {
            x: goal.x,
            y: goal.y,
        });
    }
    let mut values = [0.0; OBS_DIM];
    for (i, v) in values[..N_SCANS].iter_mut().enumerate() {
        let angle = robot.heading + TAU * i as f64 / N_SCANS as f64;
        let d = raycast(world, robot.position, angle, max_range)?;
        *v = (d / max_range).clamp(0.0, 1.0);
    }
    let offset = goal - robot.position;
    values[N_SCANS] = (offset.norm() / world.bounds.diagonal()).clamp(0.0, 1.0);
    let bearing = normalize_angle(offset.y.atan2(offset.x) - robot.heading);
    values[N_SCANS + 1] = ((bearing + PI) / TAU).clamp(0.0, 1.0);
    Ok(Observation { values })
}

/// Applies one action and scores it. Does not track timeouts; see
/// [`Episode::step`].
pub fn step(
    world: &WorldGeometry,
    robot: &RobotState,
    goal: Vec2,
    action: ActionId,
    params: &SimParams,
) -> Result<(RobotState, StepOutcome), SimError> {
    let kind = params.actions.get(action).ok_or(SimError::InvalidAction {
        index: action.0,
        n_actions: params.n_actions(),
    })?;
    let mut next = *robot;
    match kind {
        ActionKind::Translate(deg) => {
            let dir = Vec2::from_angle(robot.heading + deg.to_radians());
            next.position = robot.position + dir * params.step_length;
        }
        ActionKind::RotateLeft => next.heading = normalize_angle(robot.heading + params.turn_angle),
        ActionKind::RotateRight => {
            next.heading = normalize_angle(robot.heading - params.turn_angle)
        }
    }

    let crashed = world.sweep_collides(robot.position, next.position, robot.radius);
    let d_prev = robot.position.distance(goal);
    let d_next = next.position.distance(goal);
    let (reward, terminal) = if crashed {
        (params.reward_crash, Terminal::Crashed)
    } else if d_next < params.goal_radius {
        (params.reward_reach, Terminal::Reached)
    } else {
        (params.progress_scale * (d_prev - d_next), Terminal::None)
    };

    // a crashed robot may sit partly outside the room; clamp so the final
    // observation stays well-defined
    if crashed && !world.bounds.contains(next.position) {
        next.position = Vec2::new(
            next.position.x.clamp(world.bounds.min.x, world.bounds.max.x),
            next.position.y.clamp(world.bounds.min.y, world.bounds.max.y),
        );
    }
    let observation = observe(world, &next, goal, params.max_range)?;
    Ok((
        next,
        StepOutcome {
            observation,
            reward,
            terminal,
        },
    ))
}

/// Mutable state of one running episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub robot: RobotState,
    pub goal: Vec2,
    pub steps: u32,
    pub terminal: Terminal,
    pub path_length: f64,
    pub initial_distance: f64,
    pub total_reward: f64,
}

impl Episode {
    pub fn new(robot: RobotState, goal: Vec2) -> Self {
        Self {
            initial_distance: robot.position.distance(goal),
            robot,
            goal,
            steps: 0,
            terminal: Terminal::None,
            path_length: 0.0,
            total_reward: 0.0,
        }
    }

    pub fn observe(&self, world: &WorldGeometry, params: &SimParams) -> Result<Observation, SimError> {
        observe(world, &self.robot, self.goal, params.max_range)
    }

    /// Advances one step; a non-terminal step that hits `max_steps` ends the
    /// episode with [`Terminal::Timeout`] and keeps its progress reward.
    pub fn step(
        &mut self,
        world: &WorldGeometry,
        action: ActionId,
        params: &SimParams,
    ) -> Result<StepOutcome, SimError> {
        if self.terminal.is_terminal() {
            return Err(SimError::EpisodeOver(self.terminal));
        }
        let (next, mut outcome) = step(world, &self.robot, self.goal, action, params)?;
        self.path_length += next.position.distance(self.robot.position);
        self.robot = next;
        self.steps += 1;
        if outcome.terminal == Terminal::None && self.steps >= params.max_steps {
            outcome.terminal = Terminal::Timeout;
        }
        self.terminal = outcome.terminal;
        self.total_reward += outcome.reward;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room() -> WorldGeometry {
        WorldGeometry::empty(Rect::new(Vec2::new(0.0, 0.0), Vec2::new(50.0, 50.0))).unwrap()
    }

    fn square(x: f64, y: f64, side: f64) -> Polygon {
        Rect::new(Vec2::new(x, y), Vec2::new(x + side, y + side)).to_polygon()
    }

    #[test]
    fn raycast_cap_and_wall() {
        let w = room();
        assert_eq!(raycast(&w, Vec2::new(25.0, 25.0), 0.0, 10.0).unwrap(), 10.0);
        assert_eq!(raycast(&w, Vec2::new(48.0, 25.0), 0.0, 10.0).unwrap(), 2.0);
    }

    #[test]
    fn raycast_hits_obstacle_face() {
        let w = WorldGeometry::new(*room().bounds(), vec![square(30.0, 24.5, 1.0)]).unwrap();
        assert_eq!(raycast(&w, Vec2::new(25.0, 25.0), 0.0, 10.0).unwrap(), 5.0);
    }

    #[test]
    fn raycast_rejects_origin_outside() {
        let err = raycast(&room(), Vec2::new(-1.0, 3.0), 0.0, 10.0).unwrap_err();
        assert!(matches!(err, SimError::OutsideBounds { .. }));
    }

    #[test]
    fn geometry_validation() {
        let b = *room().bounds();
        assert!(WorldGeometry::new(b, vec![square(49.5, 10.0, 1.0)]).is_err());
        let mut cw = square(10.0, 10.0, 1.0);
        cw.vertices.reverse();
        assert!(WorldGeometry::new(b, vec![cw]).is_err());
        let sliver = Polygon::new(vec![Vec2::new(1.0, 1.0), Vec2::new(2.0, 2.0)]);
        assert!(WorldGeometry::new(b, vec![sliver]).is_err());
    }

    #[test]
    fn observation_in_empty_room() {
        let w = room();
        let robot = RobotState::new(Vec2::new(25.0, 25.0), 0.3, 0.4);
        let obs = observe(&w, &robot, robot.position, 10.0).unwrap();
        assert!(obs.scans().iter().all(|&s| s == 1.0));
        assert_eq!(obs.goal_distance(), 0.0);

        let ahead = robot.position + Vec2::from_angle(0.3) * 5.0;
        let obs = observe(&w, &robot, ahead, 10.0).unwrap();
        assert!((obs.goal_bearing() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn first_ray_points_along_heading_then_counterclockwise() {
        let w = room();
        // near the east wall facing north: the east wall is to the right
        let robot = RobotState::new(Vec2::new(48.0, 25.0), PI / 2.0, 0.4);
        let obs = observe(&w, &robot, Vec2::new(25.0, 25.0), 10.0).unwrap();
        let right_ray = (N_SCANS * 3) / 4; // ~270°
        assert!(obs.scans()[right_ray] < 0.25);
        assert_eq!(obs.scans()[N_SCANS / 4], 1.0);
    }

    #[test]
    fn progress_reward_toward_goal() {
        let w = room();
        let p = SimParams::default();
        let robot = RobotState::new(Vec2::new(20.0, 25.0), 0.0, 0.4);
        let goal = Vec2::new(25.0, 25.0);
        let (next, out) = step(&w, &robot, goal, ActionId(2), &p).unwrap();
        assert_eq!(next.position, Vec2::new(20.5, 25.0));
        assert!((out.reward - 5.0).abs() < 1e-12);
        assert_eq!(out.terminal, Terminal::None);
    }

    #[test]
    fn crash_into_wall() {
        let w = room();
        let p = SimParams::default();
        let robot = RobotState::new(Vec2::new(49.3, 25.0), 0.0, 0.4);
        let (_, out) = step(&w, &robot, Vec2::new(10.0, 10.0), ActionId(2), &p).unwrap();
        assert_eq!(out.reward, -100.0);
        assert_eq!(out.terminal, Terminal::Crashed);
    }

    #[test]
    fn swept_motion_catches_thin_obstacle() {
        // a 0.1 m wall between start and end, both endpoints clear of it
        let thin = Polygon::new(vec![
            Vec2::new(25.2, 20.0),
            Vec2::new(25.3, 20.0),
            Vec2::new(25.3, 30.0),
            Vec2::new(25.2, 30.0),
        ]);
        let w = WorldGeometry::new(*room().bounds(), vec![thin]).unwrap();
        let p = SimParams {
            step_length: 2.0,
            robot_radius: 0.05,
            ..SimParams::default()
        };
        let robot = RobotState::new(Vec2::new(24.0, 25.0), 0.0, 0.05);
        let (_, out) = step(&w, &robot, Vec2::new(40.0, 25.0), ActionId(2), &p).unwrap();
        assert_eq!(out.terminal, Terminal::Crashed);
    }

    #[test]
    fn reach_goal() {
        let w = room();
        let p = SimParams::default();
        let robot = RobotState::new(Vec2::new(20.0, 25.0), 0.0, 0.4);
        let (_, out) = step(&w, &robot, Vec2::new(21.2, 25.0), ActionId(2), &p).unwrap();
        assert_eq!(out.reward, 300.0);
        assert_eq!(out.terminal, Terminal::Reached);
    }

    #[test]
    fn rotation_keeps_position_and_zero_reward() {
        let w = room();
        let p = SimParams::default();
        let robot = RobotState::new(Vec2::new(20.0, 25.0), 0.0, 0.4);
        let (next, out) = step(&w, &robot, Vec2::new(30.0, 30.0), ActionId(5), &p).unwrap();
        assert_eq!(next.position, robot.position);
        assert!((next.heading - p.turn_angle).abs() < 1e-15);
        assert_eq!(out.reward, 0.0);
        let (next, _) = step(&w, &robot, Vec2::new(30.0, 30.0), ActionId(6), &p).unwrap();
        assert!((next.heading + p.turn_angle).abs() < 1e-15);
    }

    #[test]
    fn lateral_translation_keeps_heading() {
        let w = room();
        let p = SimParams::default();
        let robot = RobotState::new(Vec2::new(20.0, 25.0), 0.0, 0.4);
        let (next, _) = step(&w, &robot, Vec2::new(30.0, 30.0), ActionId(4), &p).unwrap();
        assert_eq!(next.heading, 0.0);
        assert!((next.position.y - 25.5).abs() < 1e-12);
        let (next, _) = step(&w, &robot, Vec2::new(30.0, 30.0), ActionId(0), &p).unwrap();
        assert!((next.position.y - 24.5).abs() < 1e-12);
    }

    #[test]
    fn episode_timeout_and_terminal_guard() {
        let w = room();
        let p = SimParams {
            max_steps: 3,
            ..SimParams::default()
        };
        let mut ep = Episode::new(RobotState::new(Vec2::new(10.0, 10.0), 0.0, 0.4), Vec2::new(40.0, 40.0));
        for _ in 0..2 {
            assert_eq!(ep.step(&w, ActionId(5), &p).unwrap().terminal, Terminal::None);
        }
        let last = ep.step(&w, ActionId(5), &p).unwrap();
        assert_eq!(last.terminal, Terminal::Timeout);
        assert_eq!(last.reward, 0.0);
        assert_eq!(
            ep.step(&w, ActionId(5), &p).unwrap_err(),
            SimError::EpisodeOver(Terminal::Timeout)
        );
    }

    #[test]
    fn invalid_action_rejected() {
        let w = room();
        let robot = RobotState::new(Vec2::new(10.0, 10.0), 0.0, 0.4);
        let err = step(&w, &robot, Vec2::new(20.0, 20.0), ActionId(7), &SimParams::default());
        assert_eq!(
            err.unwrap_err(),
            SimError::InvalidAction {
                index: 7,
                n_actions: 7
            }
        );
    }
}
