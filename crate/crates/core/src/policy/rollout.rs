//! Data collection: base-policy rollouts and random-action exploration.

use rand::Rng as _;

use super::{classify_safety, CorrectionBuffer, DiscreteAction, PolicyError, SafetyLabel, StateVec, ValueBuffer};
use crate::image::ImageTensor;
use crate::latent::VaeModel;
use crate::rng::{self, stream};
use crate::sim::{speed_controller, Action, Env, Observation};
use crate::vision::{perceive, SegmenterModel};

/// Camera frame to state: segment, pool, encode, append speed.
#[derive(Debug, Clone, Copy)]
pub struct Perception<'a> {
    pub segmenter: &'a SegmenterModel,
    pub vae: &'a VaeModel,
}

impl Perception<'_> {
    pub fn state(&self, obs: &Observation, speed: f64) -> Result<StateVec, PolicyError> {
        self.state_from_image(&obs.image, speed)
    }

    pub fn state_from_image(&self, image: &ImageTensor, speed: f64) -> Result<StateVec, PolicyError> {
        let mask = perceive(self.segmenter, image)?;
        Ok(StateVec::new(self.vae.encode(&mask)?, speed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: StateVec,
    pub reward: f64,
    pub off_road: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn ended_off_road(&self) -> bool {
        self.steps.last().is_some_and(|s| s.off_road)
    }
}

/// How data-collection episodes begin. Each episode starts anywhere on the
/// loop, facing backwards with probability `reverse_fraction`, already moving
/// at a cruise target drawn uniformly from `base_speed * (1 ± speed_spread)`,
/// so speed in the collected states is not tied to time since reset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectionStarts {
    pub base_speed: f64,
    pub speed_spread: f64,
    pub reverse_fraction: f64,
}

impl CollectionStarts {
    pub fn new(base_speed: f64) -> Self {
        Self {
            base_speed,
            speed_spread: 0.5,
            reverse_fraction: 0.5,
        }
    }

    fn draw_speed(&self, rng: &mut rng::Rng) -> f64 {
        if self.speed_spread > 0.0 {
            self.base_speed * (1.0 + rng.random_range(-self.speed_spread..=self.speed_spread))
        } else {
            self.base_speed
        }
    }
}

fn random_start(
    env: &mut Env,
    rng: &mut rng::Rng,
    starts: CollectionStarts,
    seed: u64,
    episode: usize,
) -> Result<(Observation, f64), PolicyError> {
    let obs = env.reset_anywhere(rng, starts.reverse_fraction, rng::child_seed(seed, episode as u64));
    let target = starts.draw_speed(rng);
    env.set_speed(target)?;
    Ok((obs, target))
}

/// Drives straight at the episode's cruise speed from random perturbed starts until
/// the car leaves the road or the episode cap is hit.
pub fn collect_base_rollouts(
    env: &mut Env,
    perception: Perception<'_>,
    n_episodes: usize,
    starts: CollectionStarts,
    seed: u64,
) -> Result<Vec<Trajectory>, PolicyError> {
    let mut rng = rng::seeded(seed, stream::BASE_ROLLOUT);
    let gain = env.config().speed_gain;
    let mut out = Vec::with_capacity(n_episodes);
    for episode in 0..n_episodes {
        let (mut obs, target) = random_start(env, &mut rng, starts, seed, episode)?;
        let mut steps = Vec::new();
        loop {
            let speed = env.state().speed;
            let state = perception.state(&obs, speed)?;
            let r = env.step(Action::new(0.0, speed_controller(speed, target, gain)))?;
            steps.push(Step {
                state,
                reward: r.reward,
                off_road: r.off_road,
            });
            if r.done {
                break;
            }
            obs = r.observation;
        }
        out.push(Trajectory { episode, steps });
    }
    if out.iter().all(|t| t.steps.is_empty()) {
        return Err(PolicyError::NoRollouts);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExploreStats {
    pub episodes: usize,
    pub steps: usize,
    pub segments_kept: usize,
    pub segments_discarded: usize,
    pub entries: usize,
}

/// Runs the base policy and, whenever the state turns unsafe, holds one
/// uniformly drawn action until the state is safe again (the held segment is
/// stored as good) or the episode ends (the segment is dropped).
pub fn explore_corrections(
    env: &mut Env,
    perception: Perception<'_>,
    value_buffer: &ValueBuffer,
    n_episodes: usize,
    starts: CollectionStarts,
    seed: u64,
) -> Result<(CorrectionBuffer, ExploreStats), PolicyError> {
    let mut rng = rng::seeded(seed, stream::EXPLORE);
    let gain = env.config().speed_gain;
    let mut good: Vec<(StateVec, DiscreteAction)> = Vec::new();
    let mut stats = ExploreStats {
        episodes: n_episodes,
        ..ExploreStats::default()
    };
    for episode in 0..n_episodes {
        let (mut obs, target) = random_start(env, &mut rng, starts, seed, episode)?;
        let mut held: Option<DiscreteAction> = None;
        let mut segment: Vec<(StateVec, DiscreteAction)> = Vec::new();
        loop {
            let speed = env.state().speed;
            let s = perception.state(&obs, speed)?;
            let label = classify_safety(value_buffer, s);
            if label == SafetyLabel::Safe && held.is_some() {
                good.append(&mut segment);
                stats.segments_kept += 1;
                held = None;
            } else if label == SafetyLabel::Unsafe && held.is_none() {
                held = DiscreteAction::from_id(rng.random_range(0..DiscreteAction::COUNT));
            }
            let action = match held {
                Some(a) => {
                    segment.push((s, a));
                    Action::new(a.steering(), speed_controller(speed, target * a.target_speed_scale(), gain))
                }
                None => Action::new(0.0, speed_controller(speed, target, gain)),
            };
            let r = env.step(action)?;
            stats.steps += 1;
            if r.done {
                if held.is_some() {
                    stats.segments_discarded += 1;
                }
                break;
            }
            obs = r.observation;
        }
    }
    stats.entries = good.len();
    if good.is_empty() {
        return Err(PolicyError::ExplorationFailed { episodes: n_episodes });
    }
    let buffer = CorrectionBuffer::new(good, value_buffer.scales(), value_buffer.k())?;
    Ok((buffer, stats))
}
