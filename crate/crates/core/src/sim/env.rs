//! Gym-style episode wrapper around the pure step function.

use std::sync::Arc;

use rand::Rng as _;

use super::{lap_progress, render_camera, step, Action, CarState, Palette, SimConfig, SimError, TrackSpec};
use crate::geom::{normalize_angle, Vec2};
use crate::image::{BinaryMask, ImageTensor};
use crate::rng::{self, stream, Rng};

/// Whether the environment exposes ground-truth road masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvMode {
    Training,
    /// No ground-truth masks are ever handed out.
    Evaluation,
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub image: ImageTensor,
    ground_truth: Option<BinaryMask>,
}

impl Observation {
    /// Ground-truth road mask at camera resolution; `None` in evaluation mode.
    pub fn ground_truth(&self) -> Option<&BinaryMask> {
        self.ground_truth.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub next_state: CarState,
    pub reward: f64,
    pub off_road: bool,
    pub done: bool,
    pub observation: Observation,
    /// Completed laps since reset, as reported by the timing line.
    pub laps_completed: u32,
}

pub struct Env {
    track: Arc<TrackSpec>,
    cfg: SimConfig,
    palette: Palette,
    mode: EnvMode,
    state: CarState,
    noise: Rng,
    progress: f64,
    laps: u32,
}

impl Env {
    pub fn new(track: Arc<TrackSpec>, cfg: SimConfig, mode: EnvMode) -> Self {
        let palette = Palette::for_track(track.seed);
        let (origin, heading, _) = track.pose_at(0.0);
        Self {
            track,
            cfg,
            palette,
            mode,
            state: CarState {
                position: origin,
                heading,
                speed: 0.0,
                lap_distance: 0.0,
                time_step: 0,
            },
            noise: rng::seeded(0, stream::RENDER_NOISE),
            progress: 0.0,
            laps: 0,
        }
    }

    pub fn track(&self) -> &TrackSpec {
        &self.track
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn mode(&self) -> EnvMode {
        self.mode
    }

    pub fn state(&self) -> &CarState {
        &self.state
    }

    pub fn laps_completed(&self) -> u32 {
        self.laps
    }

    /// Starts an episode on the start line with a perturbed pose.
    pub fn reset(&mut self, episode_seed: u64) -> Observation {
        self.reset_at(0.0, episode_seed)
    }

    /// Starts an episode at arc length `start` with the configured heading and
    /// lateral perturbations drawn from `episode_seed`.
    pub fn reset_at(&mut self, start: f64, episode_seed: u64) -> Observation {
        let (dh, dl) = self.start_jitter(episode_seed);
        self.place(start, dh, dl, episode_seed)
    }

    /// Starts an episode at a uniformly drawn arc length, facing against the
    /// racing direction with probability `reverse_fraction`. Used for data
    /// collection so that both turn directions show up.
    pub fn reset_anywhere(&mut self, rng: &mut Rng, reverse_fraction: f64, episode_seed: u64) -> Observation {
        let start = rng.random_range(0.0..self.track.total_length);
        let reverse = rng.random::<f64>() < reverse_fraction;
        let (dh, dl) = self.start_jitter(episode_seed);
        let dh = if reverse { dh + std::f64::consts::PI } else { dh };
        self.place(start, dh, dl, episode_seed)
    }

    fn start_jitter(&self, episode_seed: u64) -> (f64, f64) {
        let mut rng = rng::seeded(episode_seed, stream::EPISODE_START);
        let jh = self.cfg.start_heading_jitter;
        let jl = self.cfg.start_lateral_jitter;
        let dh = if jh > 0.0 { rng.random_range(-jh..=jh) } else { 0.0 };
        let dl = if jl > 0.0 { rng.random_range(-jl..=jl) } else { 0.0 };
        (dh, dl)
    }

    /// Starts an episode at an explicit offset from the centerline pose.
    pub fn place(&mut self, start: f64, heading_offset: f64, lateral_frac: f64, episode_seed: u64) -> Observation {
        let (center, tangent, half_width) = self.track.pose_at(start);
        let normal = Vec2::new(-tangent.sin(), tangent.cos());
        let position = center + normal * (lateral_frac * half_width);
        let (lap_distance, _) = self.track.project_near(position, start, 5.0);
        self.state = CarState {
            position,
            heading: normalize_angle(tangent + heading_offset),
            speed: 0.0,
            lap_distance,
            time_step: 0,
        };
        self.noise = rng::seeded(episode_seed, stream::RENDER_NOISE);
        self.progress = 0.0;
        self.laps = 0;
        self.observe()
    }

    /// Overrides the current speed, e.g. for a flying start. Clamped to the
    /// vehicle's speed range.
    pub fn set_speed(&mut self, speed: f64) -> Result<(), SimError> {
        if !speed.is_finite() {
            return Err(SimError::Contract(format!("non-finite speed {speed}")));
        }
        self.state.speed = speed.clamp(0.0, self.cfg.vehicle.max_speed);
        Ok(())
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, SimError> {
        let t = step(&self.state, action, &self.track, &self.cfg)?;
        self.progress += lap_progress(&self.track, self.state.lap_distance, t.next_state.lap_distance);
        while self.progress >= (self.laps as f64 + 1.0) * self.track.total_length {
            self.laps += 1;
        }
        self.state = t.next_state;
        Ok(StepResult {
            next_state: t.next_state,
            reward: t.reward,
            off_road: t.off_road,
            done: t.done,
            observation: self.observe(),
            laps_completed: self.laps,
        })
    }

    fn observe(&mut self) -> Observation {
        let (image, mask) = render_camera(&self.state, &self.track, &self.cfg.camera, &self.palette, Some(&mut self.noise));
        Observation {
            image,
            ground_truth: match self.mode {
                EnvMode::Training => Some(mask),
                EnvMode::Evaluation => None,
            },
        }
    }
}
