//! Deterministic 2-D racing simulator.
//!
//! Kinematic bicycle dynamics on a procedurally generated closed track, an
//! ego-view pinhole renderer with ground-truth road masks, and the
//! challenge reward: a speed-proportional bonus on the road and
//! `min(-25, -5 * v)` once the car leaves it.

mod env;
mod render;
mod track;

pub use env::{Env, EnvMode, Observation, StepResult};
pub use render::{render_camera, CameraConfig, Palette};
pub use track::{generate_track, TrackParams, TrackSpec};

use thiserror::Error;

use crate::geom::{normalize_angle, Vec2};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("track generation failed for seed {seed} after {attempts} attempts")]
    TrackGeneration { seed: u64, attempts: usize },
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarState {
    /// Rear-axle center in world meters.
    pub position: Vec2,
    /// Radians in (-π, π].
    pub heading: f64,
    /// m/s, never negative.
    pub speed: f64,
    /// Arc length along the centerline, in [0, total_length).
    pub lap_distance: f64,
    pub time_step: u64,
}

impl CarState {
    fn is_finite(&self) -> bool {
        self.position.is_finite() && self.heading.is_finite() && self.speed.is_finite() && self.lap_distance.is_finite()
    }
}

/// Continuous command; both components are clamped to [-1, 1] before use.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Action {
    pub steering: f64,
    pub acceleration: f64,
}

impl Action {
    pub fn new(steering: f64, acceleration: f64) -> Self {
        Self { steering, acceleration }
    }

    pub fn clamped(self) -> Self {
        Self::new(self.steering.clamp(-1.0, 1.0), self.acceleration.clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    /// On-road reward per (m/s) per step.
    pub speed_coeff: f64,
    pub offroad_cap: f64,
    pub offroad_slope: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            speed_coeff: 0.1,
            offroad_cap: -25.0,
            offroad_slope: -5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleParams {
    /// m/s² at full throttle or full brake.
    pub max_accel: f64,
    /// Front-wheel angle at full lock (rad).
    pub max_steer: f64,
    pub wheelbase: f64,
    pub max_speed: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            max_accel: 4.0,
            max_steer: 0.35,
            wheelbase: 2.5,
            max_speed: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub episode_cap: u64,
    pub vehicle: VehicleParams,
    pub reward: RewardConfig,
    pub camera: CameraConfig,
    /// Uniform heading perturbation at episode start, ± rad.
    pub start_heading_jitter: f64,
    /// Uniform lateral offset at episode start, ± fraction of half-width.
    pub start_lateral_jitter: f64,
    /// Proportional gain of the speed controller, per m/s.
    pub speed_gain: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            episode_cap: 2000,
            vehicle: VehicleParams::default(),
            reward: RewardConfig::default(),
            camera: CameraConfig::default(),
            start_heading_jitter: 0.15,
            start_lateral_jitter: 0.3,
            speed_gain: 0.5,
        }
    }
}

/// Kinematic outcome of one step, without the rendered observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next_state: CarState,
    pub reward: f64,
    pub off_road: bool,
    pub done: bool,
}

/// On-road: `speed_coeff * v`. Off-road: `min(offroad_cap, offroad_slope * v)`.
pub fn compute_reward(speed: f64, off_road: bool, cfg: &RewardConfig) -> Result<f64, SimError> {
    if !(speed >= 0.0) {
        return Err(SimError::Contract(format!("speed must be non-negative, got {speed}")));
    }
    Ok(if off_road {
        cfg.offroad_cap.min(cfg.offroad_slope * speed)
    } else {
        cfg.speed_coeff * speed
    })
}

/// Proportional speed tracking, clamped to the action range.
pub fn speed_controller(current_speed: f64, target_speed: f64, gain: f64) -> f64 {
    (gain * (target_speed - current_speed)).clamp(-1.0, 1.0)
}

/// Advances the car by one kinematic-bicycle step.
pub fn step(state: &CarState, action: Action, track: &TrackSpec, cfg: &SimConfig) -> Result<Transition, SimError> {
    if !(cfg.dt > 0.0) {
        return Err(SimError::Contract(format!("dt must be positive, got {}", cfg.dt)));
    }
    if !state.is_finite() {
        return Err(SimError::Contract(format!("non-finite state {state:?}")));
    }
    if !(action.steering.is_finite() && action.acceleration.is_finite()) {
        return Err(SimError::Contract(format!("non-finite action {action:?}")));
    }
    let a = action.clamped();
    let v = &cfg.vehicle;
    let speed = (state.speed + v.max_accel * a.acceleration * cfg.dt).clamp(0.0, v.max_speed);
    let yaw_rate = speed / v.wheelbase * (v.max_steer * a.steering).tan();
    let heading = normalize_angle(state.heading + yaw_rate * cfg.dt);
    let position = state.position + Vec2::from_angle(heading) * (speed * cfg.dt);
    let window = speed * cfg.dt + 5.0;
    let (lap_distance, _) = track.project_near(position, state.lap_distance, window);
    let off_road = !track.on_road(position);
    let reward = compute_reward(speed, off_road, &cfg.reward)?;
    let time_step = state.time_step + 1;
    Ok(Transition {
        next_state: CarState {
            position,
            heading,
            speed,
            lap_distance,
            time_step,
        },
        reward,
        off_road,
        done: off_road || time_step >= cfg.episode_cap,
    })
}

/// Signed change in lap distance, unwrapped across the start line.
pub fn lap_progress(track: &TrackSpec, from: f64, to: f64) -> f64 {
    let mut d = to - from;
    let half = track.total_length / 2.0;
    if d < -half {
        d += track.total_length;
    } else if d > half {
        d -= track.total_length;
    }
    d
}
