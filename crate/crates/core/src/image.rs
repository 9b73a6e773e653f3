//! Image and mask containers plus portable-pixmap (PPM/PGM) encoding.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed portable pixmap: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
}

/// Row-major RGB image, channel-interleaved, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * 3
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = self.idx(row, col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = self.idx(row, col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, ImageError> {
        let (magic, width, height, body) = parse_header(bytes)?;
        if magic != "P6" {
            return Err(ImageError::Format(format!("expected P6, found {magic}")));
        }
        if body.len() != width * height * 3 {
            return Err(ImageError::Format("truncated P6 body".into()));
        }
        Ok(Self {
            height,
            width,
            data: body.iter().map(|b| *b as f32 / 255.0).collect(),
        })
    }
}

/// Row-major 0/1 road mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v as u8;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v <= 1)
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|v| *v as usize).sum()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (*a & *b) as usize;
            union += (*a | *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn accuracy(&self, other: &BinaryMask) -> f64 {
        let same = self.data.iter().zip(&other.data).filter(|(a, b)| a == b).count();
        same as f64 / self.data.len().max(1) as f64
    }

    /// Binary PGM (P5) with maxval 1.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n1\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, ImageError> {
        let (magic, width, height, body) = parse_header(bytes)?;
        if magic != "P5" {
            return Err(ImageError::Format(format!("expected P5, found {magic}")));
        }
        if body.len() != width * height {
            return Err(ImageError::Format("truncated P5 body".into()));
        }
        let mask = Self {
            height,
            width,
            data: body.to_vec(),
        };
        if !mask.is_binary() {
            return Err(ImageError::Format("mask values must be 0 or 1".into()));
        }
        Ok(mask)
    }

    /// Stacks equally sized masks vertically into one tall PGM.
    pub fn stack_to_pgm(masks: &[BinaryMask]) -> Result<Vec<u8>, ImageError> {
        let Some(first) = masks.first() else {
            return Err(ImageError::Dimensions("cannot stack zero masks".into()));
        };
        let mut tall = BinaryMask::zeros(first.height * masks.len(), first.width);
        for (k, m) in masks.iter().enumerate() {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(ImageError::Dimensions(format!("mask {k} has a different size")));
            }
            let off = k * m.data.len();
            tall.data[off..off + m.data.len()].copy_from_slice(&m.data);
        }
        Ok(tall.to_pgm())
    }

    pub fn unstack_pgm(bytes: &[u8], tile_height: usize) -> Result<Vec<BinaryMask>, ImageError> {
        let tall = Self::from_pgm(bytes)?;
        if tile_height == 0 || tall.height % tile_height != 0 {
            return Err(ImageError::Dimensions(format!(
                "height {} is not a multiple of {tile_height}",
                tall.height
            )));
        }
        let tile = tile_height * tall.width;
        Ok(tall
            .data
            .chunks_exact(tile)
            .map(|c| BinaryMask {
                height: tile_height,
                width: tall.width,
                data: c.to_vec(),
            })
            .collect())
    }
}

fn parse_header(bytes: &[u8]) -> Result<(String, usize, usize, &[u8]), ImageError> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Format("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|e| ImageError::Format(format!("{s}: {e}")));
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    parse(&fields[3])?;
    let body = bytes.get(pos..).unwrap_or(&[]);
    Ok((fields[0].clone(), width, height, body))
}
