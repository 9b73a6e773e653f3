//! Ego-view pinhole renderer.
//!
//! The camera looks along the car heading with a level optical axis; the
//! horizon sits at a fixed image row. Rows above it are sky, a band at the
//! bottom is the hood, and every ground pixel is back-projected onto the
//! plane and tested for road membership.

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{CarState, TrackSpec};
use crate::geom::Vec2;
use crate::image::{BinaryMask, ImageTensor};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    pub height: usize,
    pub width: usize,
    /// Camera height above the ground (m).
    pub mount_height: f64,
    /// Focal length as a fraction of image width.
    pub focal_frac: f64,
    /// Horizon row as a fraction of image height.
    pub horizon_frac: f64,
    /// Hood band as a fraction of image height.
    pub hood_frac: f64,
    pub noise_sigma: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 128,
            mount_height: 1.5,
            focal_frac: 0.5,
            horizon_frac: 0.6,
            hood_frac: 0.125,
            noise_sigma: 0.03,
        }
    }
}

impl CameraConfig {
    pub fn hood_rows(&self) -> usize {
        (self.height as f64 * self.hood_frac).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub sky: [f32; 3],
    pub hood: [f32; 3],
    pub road: [f32; 3],
    pub grass: [f32; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            sky: [0.55, 0.70, 0.92],
            hood: [0.08, 0.08, 0.10],
            road: [0.50, 0.50, 0.52],
            grass: [0.15, 0.45, 0.12],
        }
    }
}

impl Palette {
    /// Per-track tint so that unseen tracks do not share exact colors.
    pub fn for_track(seed: u64) -> Self {
        let mut rng = crate::rng::seeded(seed, crate::rng::stream::TRACK + 100);
        let base = Self::default();
        let mut tint = |c: [f32; 3], amp: f32| -> [f32; 3] {
            let shift: f32 = rng.random_range(-amp..=amp);
            c.map(|v| (v + shift + rng.random_range(-amp / 2.0..=amp / 2.0)).clamp(0.0, 1.0))
        };
        Self {
            sky: base.sky,
            hood: base.hood,
            road: tint(base.road, 0.05),
            grass: tint(base.grass, 0.05),
        }
    }
}

/// Renders the camera image and its exact road mask (1 = road) at the
/// configured resolution. Noise is added only when `noise` is given.
pub fn render_camera(
    state: &CarState,
    track: &TrackSpec,
    cam: &CameraConfig,
    palette: &Palette,
    mut noise: Option<&mut Rng>,
) -> (ImageTensor, BinaryMask) {
    let (h, w) = (cam.height, cam.width);
    let mut image = ImageTensor::new(h, w);
    let mut mask = BinaryMask::zeros(h, w);
    let focal = cam.focal_frac * w as f64;
    let horizon = cam.horizon_frac * h as f64;
    let hood_start = h - cam.hood_rows();
    let forward = Vec2::from_angle(state.heading);
    let left = Vec2::new(-forward.y, forward.x);
    let cx = w as f64 / 2.0;
    for row in 0..h {
        let v = row as f64 + 0.5;
        for col in 0..w {
            let color = if row >= hood_start {
                palette.hood
            } else if v <= horizon {
                palette.sky
            } else {
                let depth = cam.mount_height * focal / (v - horizon);
                let lateral = -(col as f64 + 0.5 - cx) * depth / focal;
                let p = state.position + forward * depth + left * lateral;
                if track.on_road(p) {
                    mask.set(row, col, true);
                    palette.road
                } else {
                    palette.grass
                }
            };
            image.set_pixel(row, col, color);
        }
    }
    if let Some(rng) = noise.as_deref_mut() {
        if cam.noise_sigma > 0.0 {
            for v in &mut image.data {
                let n: f64 = rng.sample(StandardNormal);
                *v += (n * cam.noise_sigma) as f32;
            }
            image.clamp_unit();
        }
    }
    (image, mask)
}
