//! Two-dimensional latent encoding of 28x28 road masks.

mod vae;

pub use vae::{elbo_loss, grad_check, relative_error, train_vae, Dense, ElboTerms, VaeConfig, VaeMeta, VaeModel, PROB_EPS};

use std::collections::HashSet;


use crate::image::BinaryMask;
use crate::rng::{self, stream};
use crate::sim::{speed_controller, Action, Env, SimError};
use crate::vision::{downsample_mask, ground_truth_mask, preprocess_mask, VisionError, LATENT_SIZE};

pub const LATENT_DIM: usize = 2;
pub const MASK_PIXELS: usize = LATENT_SIZE * LATENT_SIZE;
/// Smallest dataset accepted for VAE training.
pub const MIN_MASKS: usize = 500;
/// Datasets with fewer distinct masks than this fraction are degenerate.
pub const MIN_DISTINCT_FRACTION: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum LatentError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("only {found} masks collected, need {needed}; run more episodes")]
    InsufficientData { found: usize, needed: usize },
    #[error("dataset is degenerate: {distinct} distinct masks out of {total}")]
    Degenerate { distinct: usize, total: usize },
    #[error("non-finite loss in batch {batch}")]
    Numerical { batch: usize },
    #[error("VAE reached only {iou:.4} held-out reconstruction IoU")]
    Training { iou: f64, loss_curve: Vec<f64> },
    #[error("bad model file: {0}")]
    Format(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Vision(#[from] VisionError),
}

/// Posterior mean of a mask's encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub z: [f64; LATENT_DIM],
}

impl Latent {
    pub fn dist(&self, other: &Latent) -> f64 {
        ((self.z[0] - other.z[0]).powi(2) + (self.z[1] - other.z[1]).powi(2)).sqrt()
    }
}

/// Size and variety gate shared by collection and training.
pub fn check_dataset(masks: &[BinaryMask]) -> Result<(), LatentError> {
    if masks.len() < MIN_MASKS {
        return Err(LatentError::InsufficientData {
            found: masks.len(),
            needed: MIN_MASKS,
        });
    }
    let distinct = masks.iter().map(|m| m.data.as_slice()).collect::<HashSet<_>>().len();
    if (distinct as f64) < MIN_DISTINCT_FRACTION * masks.len() as f64 {
        return Err(LatentError::Degenerate {
            distinct,
            total: masks.len(),
        });
    }
    Ok(())
}

/// Drives straight at `constant_speed` from random perturbed starts (facing
/// backwards with probability `reverse_fraction`) and keeps the downsampled
/// ground-truth mask of every visited state.
pub fn collect_vae_dataset(
    env: &mut Env,
    n_episodes: usize,
    constant_speed: f64,
    reverse_fraction: f64,
    seed: u64,
) -> Result<Vec<BinaryMask>, LatentError> {
    if !(0.0..=env.config().vehicle.max_speed).contains(&constant_speed) {
        return Err(LatentError::Contract(format!("constant speed {constant_speed} outside [0, v_max]")));
    }
    let mut starts = rng::seeded(seed, stream::VAE_DATA);
    let gain = env.config().speed_gain;
    let mut masks = Vec::new();
    for episode in 0..n_episodes {
        let mut obs = env.reset_anywhere(&mut starts, reverse_fraction, rng::child_seed(seed, episode as u64));
        loop {
            let gt = ground_truth_mask(&obs, env.mode())?;
            masks.push(downsample_mask(&preprocess_mask(gt)?)?);
            let accel = speed_controller(env.state().speed, constant_speed, gain);
            let r = env.step(Action::new(0.0, accel))?;
            if r.done {
                break;
            }
            obs = r.observation;
        }
    }
    check_dataset(&masks)?;
    Ok(masks)
}
