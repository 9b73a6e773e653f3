use super::VisionError;
use crate::image::{BinaryMask, ImageTensor};

/// Side of the square network input.
pub const NET_SIZE: usize = 64;
/// Side of the mask fed to the latent encoder.
pub const LATENT_SIZE: usize = 28;

// At the 384-row reference resolution the hood occupies the bottom 48 rows
// and the retained band is the 100 rows directly above it.
const REF_HEIGHT: f64 = 384.0;
const REF_TOP: f64 = 236.0;
const REF_BOTTOM: f64 = 48.0;

/// Rows removed from the top and bottom of an image of the given height.
pub fn crop_rows(height: usize) -> (usize, usize) {
    let scale = height as f64 / REF_HEIGHT;
    ((REF_TOP * scale).round() as usize, (REF_BOTTOM * scale).round() as usize)
}

fn band(height: usize) -> Result<(usize, usize), VisionError> {
    let (top, bottom) = crop_rows(height);
    if height < top + bottom + 1 {
        return Err(VisionError::Contract(format!(
            "image height {height} is smaller than the crop bands ({top} + {bottom})"
        )));
    }
    Ok((top, height - top - bottom))
}

/// Crops the sky and hood bands and bilinearly resizes the rest to 64x64.
pub fn preprocess(raw: &ImageTensor) -> Result<ImageTensor, VisionError> {
    let (top, rows) = band(raw.height)?;
    if raw.width == 0 {
        return Err(VisionError::Contract("image has zero width".into()));
    }
    let mut out = ImageTensor::new(NET_SIZE, NET_SIZE);
    let sy = rows as f64 / NET_SIZE as f64;
    let sx = raw.width as f64 / NET_SIZE as f64;
    for y in 0..NET_SIZE {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (rows - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let ty = fy - y0 as f64;
        for x in 0..NET_SIZE {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (raw.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(raw.width - 1);
            let tx = fx - x0 as f64;
            let a = raw.pixel(top + y0, x0);
            let b = raw.pixel(top + y0, x1);
            let c = raw.pixel(top + y1, x0);
            let d = raw.pixel(top + y1, x1);
            let mut px = [0.0f32; 3];
            for ch in 0..3 {
                let upper = a[ch] as f64 * (1.0 - tx) + b[ch] as f64 * tx;
                let lower = c[ch] as f64 * (1.0 - tx) + d[ch] as f64 * tx;
                px[ch] = (upper * (1.0 - ty) + lower * ty) as f32;
            }
            out.set_pixel(y, x, px);
        }
    }
    Ok(out)
}

/// Same crop as [`preprocess`], nearest-neighbor resized so the mask stays binary.
pub fn preprocess_mask(raw: &BinaryMask) -> Result<BinaryMask, VisionError> {
    let (top, rows) = band(raw.height)?;
    let mut out = BinaryMask::zeros(NET_SIZE, NET_SIZE);
    for y in 0..NET_SIZE {
        // source index of the output pixel center, in exact integer arithmetic
        let sy = ((2 * y + 1) * rows) / (2 * NET_SIZE);
        for x in 0..NET_SIZE {
            let sx = ((2 * x + 1) * raw.width) / (2 * NET_SIZE);
            out.data[y * NET_SIZE + x] = raw.get(top + sy, sx);
        }
    }
    Ok(out)
}

/// Area-average pooling from 64x64 to 28x28, then threshold at 0.5.
pub fn downsample_mask(mask: &BinaryMask) -> Result<BinaryMask, VisionError> {
    if (mask.height, mask.width) != (NET_SIZE, NET_SIZE) {
        return Err(VisionError::Contract(format!(
            "expected a {NET_SIZE}x{NET_SIZE} mask, got {}x{}",
            mask.height, mask.width
        )));
    }
    let weights = pooling_weights(NET_SIZE, LATENT_SIZE);
    let mut out = BinaryMask::zeros(LATENT_SIZE, LATENT_SIZE);
    let cell_area = (NET_SIZE as f64 / LATENT_SIZE as f64).powi(2);
    for (oy, wy) in weights.iter().enumerate() {
        for (ox, wx) in weights.iter().enumerate() {
            let mut acc = 0.0;
            for &(iy, fy) in wy {
                for &(ix, fx) in wx {
                    acc += fy * fx * mask.get(iy, ix) as f64;
                }
            }
            out.set(oy, ox, acc / cell_area >= 0.5);
        }
    }
    Ok(out)
}

/// For each output cell, the input indices it overlaps and the overlap lengths.
fn pooling_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = lo + ratio;
            (lo.floor() as usize..(hi.ceil() as usize).min(input))
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap))
                })
                .collect()
        })
        .collect()
}
