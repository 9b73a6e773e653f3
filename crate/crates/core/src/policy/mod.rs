//! Nearest-neighbor planning: the drive-straight base policy, the value
//! buffer that labels states safe or unsafe, and the correction buffer that
//! votes on recovery actions.

mod buffers;
mod knn;
mod rollout;

pub use buffers::{build_value_buffer, CorrectionBuffer, ValueBuffer};
pub use knn::{brute_force, KdTree, Point};
pub use rollout::{collect_base_rollouts, explore_corrections, CollectionStarts, ExploreStats, Perception, Step, Trajectory};

use crate::adapt::SegmentSpeedModel;
use crate::latent::{Latent, LatentError};
use crate::sim::{speed_controller, Action, SimError};
use crate::vision::VisionError;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_GAMMA: f64 = 0.95;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no base rollout produced any state")]
    NoRollouts,
    #[error("exploration stored no good transitions after {episodes} episodes; run more episodes or lower the base speed")]
    ExplorationFailed { episodes: usize },
    #[error("bad buffer file: {0}")]
    Format(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

/// The agent's state: latent road shape plus speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVec {
    pub z1: f64,
    pub z2: f64,
    pub speed: f64,
}

impl StateVec {
    pub fn new(latent: Latent, speed: f64) -> Self {
        Self {
            z1: latent.z[0],
            z2: latent.z[1],
            speed,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.z1, self.z2, self.speed]
    }

    pub fn is_finite(&self) -> bool {
        self.z1.is_finite() && self.z2.is_finite() && self.speed.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafetyLabel {
    Safe,
    Unsafe,
}

const STEERING: [f64; 4] = [-1.0, -0.5, 0.5, 1.0];
const SPEED_SCALE: [f64; 2] = [0.5, 1.0];

/// One of the eight recovery actions: a steering value and a fraction of the
/// current target speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiscreteAction {
    id: u8,
}

impl DiscreteAction {
    pub const COUNT: usize = STEERING.len() * SPEED_SCALE.len();

    pub fn from_id(id: usize) -> Option<Self> {
        (id < Self::COUNT).then_some(Self { id: id as u8 })
    }

    pub fn from_parts(steering: f64, target_speed_scale: f64) -> Option<Self> {
        let si = STEERING.iter().position(|s| *s == steering)?;
        let ki = SPEED_SCALE.iter().position(|k| *k == target_speed_scale)?;
        Self::from_id(si * SPEED_SCALE.len() + ki)
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..Self::COUNT).map(|id| Self { id: id as u8 })
    }

    pub fn id(self) -> usize {
        self.id as usize
    }

    pub fn steering(self) -> f64 {
        STEERING[self.id() / SPEED_SCALE.len()]
    }

    pub fn target_speed_scale(self) -> f64 {
        SPEED_SCALE[self.id() % SPEED_SCALE.len()]
    }
}

/// `V_t = r_t + gamma * V_{t+1}`, computed backwards from the last reward.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>, PolicyError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(PolicyError::Contract(format!("discount {gamma} outside [0, 1)")));
    }
    if rewards.is_empty() {
        return Err(PolicyError::Contract("empty reward sequence".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for (v, r) in out.iter_mut().zip(rewards).rev() {
        next = r + gamma * next;
        *v = next;
    }
    Ok(out)
}

/// Safe iff the mean value of the nearest stored states is strictly positive.
pub fn classify_safety(buffer: &ValueBuffer, s: StateVec) -> SafetyLabel {
    let values: Vec<f64> = buffer.neighbors(s).iter().map(|&i| buffer.value(i)).collect();
    if values.is_empty() {
        return SafetyLabel::Unsafe;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean > 0.0 {
        SafetyLabel::Safe
    } else {
        SafetyLabel::Unsafe
    }
}

/// Majority vote over the nearest good transitions; ties go to the nearest
/// neighbor's action.
pub fn correction_action(buffer: &CorrectionBuffer, s: StateVec) -> Option<DiscreteAction> {
    let neighbors = buffer.neighbors(s);
    let actions: Vec<DiscreteAction> = neighbors.iter().map(|&i| buffer.action(i)).collect();
    let mut counts = [0usize; DiscreteAction::COUNT];
    for a in &actions {
        counts[a.id()] += 1;
    }
    let best = *counts.iter().max()?;
    if best == 0 {
        return None;
    }
    let leaders: Vec<usize> = (0..DiscreteAction::COUNT).filter(|&id| counts[id] == best).collect();
    if leaders.len() == 1 {
        return DiscreteAction::from_id(leaders[0]);
    }
    // nearest first, so the first tied action wins
    actions.into_iter().find(|a| leaders.contains(&a.id()))
}

/// What the agent did on one step and why.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub label: SafetyLabel,
    pub correction: Option<DiscreteAction>,
    pub target_speed: f64,
}

/// Base policy in safe states, voted correction in unsafe ones. Without a
/// correction buffer unsafe states also fall back to the base policy.
pub fn agent_act(
    s: StateVec,
    distance: f64,
    value_buffer: &ValueBuffer,
    correction_buffer: Option<&CorrectionBuffer>,
    speed_model: &SegmentSpeedModel,
    speed_gain: f64,
) -> Decision {
    let target = speed_model.target_speed_at(distance);
    let label = classify_safety(value_buffer, s);
    let correction = match label {
        SafetyLabel::Safe => None,
        SafetyLabel::Unsafe => correction_buffer.and_then(|b| correction_action(b, s)),
    };
    let (steering, target_speed) = match correction {
        Some(a) => (a.steering(), target * a.target_speed_scale()),
        None => (0.0, target),
    };
    Decision {
        action: Action::new(steering, speed_controller(s.speed, target_speed, speed_gain)),
        label,
        correction,
        target_speed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_table_is_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        for a in DiscreteAction::all() {
            assert_eq!(DiscreteAction::from_parts(a.steering(), a.target_speed_scale()), Some(a));
            assert!(seen.insert((a.steering().to_bits(), a.target_speed_scale().to_bits())));
        }
        assert_eq!(seen.len(), 8);
        assert!(DiscreteAction::from_id(8).is_none());
        assert!(DiscreteAction::from_parts(0.0, 1.0).is_none());
    }

    #[test]
    fn hand_recursion_example() {
        let v = discounted_returns(&[1.0, 1.0, -25.0], 0.9).unwrap();
        let expected = [-18.35, -21.5, -25.0];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn discount_must_be_below_one() {
        assert!(discounted_returns(&[1.0], 1.0).is_err());
        assert!(discounted_returns(&[1.0], -0.1).is_err());
        assert!(discounted_returns(&[], 0.5).is_err());
    }
}
