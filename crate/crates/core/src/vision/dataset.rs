//! Segmenter training data: rendered, augmented, then cropped pairs.

use rand::Rng as _;

use super::{augment, preprocess, preprocess_mask, AugmentConfig, VisionError};
use crate::geom::{normalize_angle, Vec2};
use crate::image::{BinaryMask, ImageTensor};
use crate::rng::{self, stream};
use crate::sim::{render_camera, CarState, Palette, SimConfig, TrackSpec};

/// Spread of the random camera poses used for segmentation data.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSampling {
    /// Lateral offset bound as a fraction of the local half-width.
    pub lateral_frac: f64,
    /// Heading offset bound (rad).
    pub heading: f64,
}

impl Default for PoseSampling {
    fn default() -> Self {
        Self {
            lateral_frac: 1.2,
            heading: 0.6,
        }
    }
}

/// Renders `n` noisy frames from random poses, augments them at camera
/// resolution and then crops both image and mask to the network input.
pub fn render_training_pairs(
    track: &TrackSpec,
    sim: &SimConfig,
    n: usize,
    seed: u64,
    aug: &AugmentConfig,
    poses: &PoseSampling,
) -> Result<Vec<(ImageTensor, BinaryMask)>, VisionError> {
    let mut pose_rng = rng::seeded(seed, stream::VISION_DATA);
    let mut noise_rng = rng::seeded(seed, stream::RENDER_NOISE + 100);
    let mut aug_rng = rng::seeded(aug.rng_seed ^ seed, stream::AUGMENT);
    let palette = Palette::for_track(track.seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let s = pose_rng.random_range(0.0..track.total_length);
        let (center, tangent, hw) = track.pose_at(s);
        let lateral = pose_rng.random_range(-poses.lateral_frac..=poses.lateral_frac) * hw;
        let dh = pose_rng.random_range(-poses.heading..=poses.heading);
        let state = CarState {
            position: center + Vec2::new(-tangent.sin(), tangent.cos()) * lateral,
            heading: normalize_angle(tangent + dh),
            speed: 0.0,
            lap_distance: s,
            time_step: 0,
        };
        let (img, mask) = render_camera(&state, track, &sim.camera, &palette, Some(&mut noise_rng));
        let (img, mask) = augment(&img, &mask, aug, &mut aug_rng);
        out.push((preprocess(&img)?, preprocess_mask(&mask)?));
    }
    Ok(out)
}

/// Paired `img_%05d.ppm` / `mask_%05d.pgm` files in index order.
pub fn dataset_files(pairs: &[(ImageTensor, BinaryMask)]) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::with_capacity(pairs.len() * 2);
    for (i, (img, mask)) in pairs.iter().enumerate() {
        files.push((format!("img_{i:05}.ppm"), img.to_ppm()));
        files.push((format!("mask_{i:05}.pgm"), mask.to_pgm()));
    }
    files
}

/// Inverse of [`dataset_files`]; `read` fetches a file's bytes by name.
pub fn parse_dataset<F>(count: usize, mut read: F) -> Result<Vec<(ImageTensor, BinaryMask)>, VisionError>
where
    F: FnMut(&str) -> Result<Vec<u8>, VisionError>,
{
    (0..count)
        .map(|i| {
            let img = ImageTensor::from_ppm(&read(&format!("img_{i:05}.ppm"))?)?;
            let mask = BinaryMask::from_pgm(&read(&format!("mask_{i:05}.pgm"))?)?;
            Ok((img, mask))
        })
        .collect()
}
