//! Color and view augmentation for segmenter training.
//!
//! Each transform fires independently with its own probability. Color
//! transforms touch only the image; the flip and the shift/scale/rotate
//! affine are applied to image and mask alike, the mask with nearest-neighbor
//! sampling so it stays binary.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::image::{BinaryMask, ImageTensor};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub color_jitter: f64,
    pub hue: f64,
    pub saturation: f64,
    pub contrast: f64,
    pub rgb_shift: f64,
    pub channel_shuffle: f64,
    pub clahe: f64,
    pub sepia: f64,
    pub flip: f64,
    pub shift_scale_rotate: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            color_jitter: 0.2,
            hue: 0.2,
            saturation: 0.2,
            contrast: 0.2,
            rgb_shift: 0.5,
            channel_shuffle: 0.5,
            clahe: 0.2,
            sepia: 0.2,
            flip: 0.5,
            shift_scale_rotate: 0.5,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every probability zero: augmentation is the identity.
    pub fn disabled() -> Self {
        Self {
            color_jitter: 0.0,
            hue: 0.0,
            saturation: 0.0,
            contrast: 0.0,
            rgb_shift: 0.0,
            channel_shuffle: 0.0,
            clahe: 0.0,
            sepia: 0.0,
            flip: 0.0,
            shift_scale_rotate: 0.0,
            rng_seed: 0,
        }
    }

    pub fn probabilities(&self) -> [f64; 10] {
        [
            self.color_jitter,
            self.hue,
            self.saturation,
            self.contrast,
            self.rgb_shift,
            self.channel_shuffle,
            self.clahe,
            self.sepia,
            self.flip,
            self.shift_scale_rotate,
        ]
    }

    pub fn is_valid(&self) -> bool {
        self.probabilities().iter().all(|p| (0.0..=1.0).contains(p))
    }
}

/// Parameters of the view transform, in output pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale: f64,
    pub angle: f64,
}

/// Which transforms fired during one call, for inspection in tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Applied {
    pub color: Vec<&'static str>,
    pub flipped: bool,
    pub affine: Option<Affine>,
}

pub fn augment(img: &ImageTensor, mask: &BinaryMask, cfg: &AugmentConfig, rng: &mut Rng) -> (ImageTensor, BinaryMask) {
    let (i, m, _) = augment_traced(img, mask, cfg, rng);
    (i, m)
}

pub fn augment_traced(
    img: &ImageTensor,
    mask: &BinaryMask,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> (ImageTensor, BinaryMask, Applied) {
    assert_eq!((img.height, img.width), (mask.height, mask.width), "image and mask sizes differ");
    let mut out = img.clone();
    let mut m = mask.clone();
    let mut applied = Applied::default();
    let fires = |p: f64, rng: &mut Rng| p > 0.0 && rng.random::<f64>() < p;

    if fires(cfg.color_jitter, rng) {
        let b = rng.random_range(0.8..1.2);
        let c = rng.random_range(0.8..1.2);
        let s = rng.random_range(0.8..1.2);
        let h = rng.random_range(-0.05..0.05);
        scale_brightness(&mut out, b);
        scale_contrast(&mut out, c);
        scale_saturation(&mut out, s);
        shift_hue(&mut out, h);
        applied.color.push("color_jitter");
    }
    if fires(cfg.hue, rng) {
        shift_hue(&mut out, rng.random_range(-0.055..0.055));
        applied.color.push("hue");
    }
    if fires(cfg.saturation, rng) {
        scale_saturation(&mut out, rng.random_range(0.7..1.3));
        applied.color.push("saturation");
    }
    if fires(cfg.contrast, rng) {
        scale_contrast(&mut out, rng.random_range(0.7..1.3));
        applied.color.push("contrast");
    }
    if fires(cfg.rgb_shift, rng) {
        let shift: [f32; 3] = std::array::from_fn(|_| rng.random_range(-20.0 / 255.0..20.0 / 255.0));
        for px in out.data.chunks_exact_mut(3) {
            for (v, s) in px.iter_mut().zip(shift) {
                *v += s;
            }
        }
        out.clamp_unit();
        applied.color.push("rgb_shift");
    }
    if fires(cfg.channel_shuffle, rng) {
        let mut perm = [0usize, 1, 2];
        perm.shuffle(rng);
        for px in out.data.chunks_exact_mut(3) {
            let orig = [px[0], px[1], px[2]];
            for c in 0..3 {
                px[c] = orig[perm[c]];
            }
        }
        applied.color.push("channel_shuffle");
    }
    if fires(cfg.clahe, rng) {
        local_contrast(&mut out, 8, 0.5);
        applied.color.push("clahe");
    }
    if fires(cfg.sepia, rng) {
        sepia(&mut out);
        applied.color.push("sepia");
    }
    if fires(cfg.flip, rng) {
        flip_horizontal(&mut out, &mut m);
        applied.flipped = true;
    }
    if fires(cfg.shift_scale_rotate, rng) {
        let affine = Affine {
            shift_x: rng.random_range(-0.1..0.1) * img.width as f64,
            shift_y: rng.random_range(-0.1..0.1) * img.height as f64,
            scale: rng.random_range(0.9..1.1),
            angle: rng.random_range(-10.0f64..10.0).to_radians(),
        };
        let (i2, m2) = warp(&out, &m, affine);
        out = i2;
        m = m2;
        applied.affine = Some(affine);
    }
    (out, m, applied)
}

fn luminance(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn scale_brightness(img: &mut ImageTensor, factor: f32) {
    for v in &mut img.data {
        *v *= factor;
    }
    img.clamp_unit();
}

fn scale_contrast(img: &mut ImageTensor, factor: f32) {
    let n = (img.data.len() / 3).max(1) as f32;
    let mean = img.data.chunks_exact(3).map(luminance).sum::<f32>() / n;
    for v in &mut img.data {
        *v = mean + (*v - mean) * factor;
    }
    img.clamp_unit();
}

fn scale_saturation(img: &mut ImageTensor, factor: f32) {
    for px in img.data.chunks_exact_mut(3) {
        let g = luminance(px);
        for v in px.iter_mut() {
            *v = g + (*v - g) * factor;
        }
    }
    img.clamp_unit();
}

/// Rotates hue by `shift` turns (1.0 = full circle).
fn shift_hue(img: &mut ImageTensor, shift: f32) {
    for px in img.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        px[0] = r;
        px[1] = g;
        px[2] = b;
    }
    img.clamp_unit();
}

fn sepia(img: &mut ImageTensor) {
    for px in img.data.chunks_exact_mut(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        px[0] = 0.393 * r + 0.769 * g + 0.189 * b;
        px[1] = 0.349 * r + 0.686 * g + 0.168 * b;
        px[2] = 0.272 * r + 0.534 * g + 0.131 * b;
    }
    img.clamp_unit();
}

/// Tile-wise luminance stretching on a `grid x grid` partition, blended with
/// the original by `strength`. The stretch gain is capped at `1 / MIN_RANGE`
/// so flat tiles do not blow their noise up to the full range.
const MIN_RANGE: f32 = 0.5;

fn local_contrast(img: &mut ImageTensor, grid: usize, strength: f32) {
    let (h, w) = (img.height, img.width);
    for ty in 0..grid {
        let (y0, y1) = (ty * h / grid, (ty + 1) * h / grid);
        for tx in 0..grid {
            let (x0, x1) = (tx * w / grid, (tx + 1) * w / grid);
            if y0 == y1 || x0 == x1 {
                continue;
            }
            let (mut lo, mut hi) = (f32::MAX, f32::MIN);
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = img.idx(y, x);
                    let l = luminance(&img.data[i..i + 3]);
                    lo = lo.min(l);
                    hi = hi.max(l);
                }
            }
            let range = (hi - lo).max(MIN_RANGE);
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = img.idx(y, x);
                    for v in &mut img.data[i..i + 3] {
                        let stretched = (*v - lo) / range;
                        *v = *v * (1.0 - strength) + stretched * strength;
                    }
                }
            }
        }
    }
    img.clamp_unit();
}

pub fn flip_horizontal(img: &mut ImageTensor, mask: &mut BinaryMask) {
    let w = img.width;
    for y in 0..img.height {
        for x in 0..w / 2 {
            let (a, b) = (img.idx(y, x), img.idx(y, w - 1 - x));
            for c in 0..3 {
                img.data.swap(a + c, b + c);
            }
            mask.data.swap(y * w + x, y * w + w - 1 - x);
        }
    }
}

/// Inverse-mapped affine warp about the image center; out-of-frame pixels
/// become black image / non-road mask.
fn warp(img: &ImageTensor, mask: &BinaryMask, t: Affine) -> (ImageTensor, BinaryMask) {
    let (h, w) = (img.height, img.width);
    let mut out = ImageTensor::new(h, w);
    let mut m = BinaryMask::zeros(h, w);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = t.angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            // output pixel center -> source coordinates
            let dx = x as f64 + 0.5 - cx - t.shift_x;
            let dy = y as f64 + 0.5 - cy - t.shift_y;
            let sx = (cos * dx + sin * dy) / t.scale + cx - 0.5;
            let sy = (-sin * dx + cos * dy) / t.scale + cy - 0.5;
            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                m.data[y * w + x] = mask.get(ny as usize, nx as usize);
            }
            if sx > -1.0 && sy > -1.0 && sx < w as f64 && sy < h as f64 {
                out.set_pixel(y, x, bilinear(img, sx, sy));
            }
        }
    }
    (out, m)
}

fn bilinear(img: &ImageTensor, sx: f64, sy: f64) -> [f32; 3] {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (tx, ty) = (sx - x0, sy - y0);
    let mut acc = [0.0f64; 3];
    for (yy, wy) in [(y0, 1.0 - ty), (y0 + 1.0, ty)] {
        for (xx, wx) in [(x0, 1.0 - tx), (x0 + 1.0, tx)] {
            if xx < 0.0 || yy < 0.0 || xx >= img.width as f64 || yy >= img.height as f64 {
                continue;
            }
            let px = img.pixel(yy as usize, xx as usize);
            for c in 0..3 {
                acc[c] += wx * wy * px[c] as f64;
            }
        }
    }
    acc.map(|v| v as f32)
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
