//! Camera image to road mask: crop/resize geometry, augmentation and a small
//! trainable segmenter.

mod augment;
mod dataset;
mod preprocess;
mod segmenter;

pub use augment::{augment, augment_traced, flip_horizontal, Affine, Applied, AugmentConfig};
pub use dataset::{dataset_files, parse_dataset, render_training_pairs, PoseSampling};
pub use preprocess::{crop_rows, downsample_mask, preprocess, preprocess_mask, LATENT_SIZE, NET_SIZE};
pub use segmenter::{fit, pixel_accuracy, segment, train_segmenter, SegmenterConfig, SegmenterMeta, SegmenterModel, PROB_EPS};

use crate::image::{BinaryMask, ImageError, ImageTensor};
use crate::sim::{EnvMode, Observation};

#[derive(Debug, thiserror::Error)]
pub enum VisionError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("segmenter reached only {accuracy:.4} held-out accuracy")]
    Training { accuracy: f64, loss_curve: Vec<f64> },
    #[error("bad model file: {0}")]
    Format(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Ground-truth mask of a training observation.
///
/// Asking for it in evaluation mode is a contract violation, so no evaluation
/// path can quietly fall back to privileged information.
pub fn ground_truth_mask(obs: &Observation, mode: EnvMode) -> Result<&BinaryMask, VisionError> {
    if mode == EnvMode::Evaluation {
        return Err(VisionError::Contract("ground-truth masks are unavailable during evaluation".into()));
    }
    obs.ground_truth()
        .ok_or_else(|| VisionError::Contract("observation carries no ground-truth mask".into()))
}

/// Full perception path for one camera frame: crop, resize, segment and pool.
pub fn perceive(model: &SegmenterModel, raw: &ImageTensor) -> Result<BinaryMask, VisionError> {
    downsample_mask(&segment(model, &preprocess(raw)?)?)
}
