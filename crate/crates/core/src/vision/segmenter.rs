//! Two-layer convolutional road classifier with hand-written gradients.
//!
//! The input planes are the three color channels, per-pixel chroma (max
//! minus min channel, unchanged by channel permutations and hue rotations)
//! and intensity standardized over the whole frame (unchanged by brightness,
//! contrast and tint shifts). A `5 -> hidden` 3x3 convolution with tanh feeds a `hidden -> 1`
//! 3x3 convolution and a per-pixel sigmoid. Both convolutions use zero
//! padding so the output mask has the input's 64x64 footprint.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::preprocess::NET_SIZE;
use super::VisionError;
use crate::image::{BinaryMask, ImageTensor};
use crate::rng::{self, stream};

const P: usize = NET_SIZE + 2;
const PIXELS: usize = NET_SIZE * NET_SIZE;
const IN: usize = 5;
/// Probability clamp applied before the cross-entropy logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub heldout_fraction: f64,
    /// Training fails below this held-out pixel accuracy.
    pub min_accuracy: f64,
    pub min_pairs: usize,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            hidden: 6,
            learning_rate: 0.2,
            momentum: 0.9,
            batch_size: 8,
            epochs: 15,
            heldout_fraction: 0.2,
            min_accuracy: 0.90,
            min_pairs: 200,
            shuffle: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmenterMeta {
    pub epochs: u32,
    pub final_loss: f64,
    pub heldout_accuracy: f64,
    /// Fraction of road pixels in the training split.
    pub road_fraction: f64,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterModel {
    hidden: usize,
    params: Vec<f64>,
    trained: bool,
    pub meta: SegmenterMeta,
}

/// Per-call scratch buffers.
#[derive(Debug, Clone)]
struct Workspace {
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dlogit: Vec<f64>,
    dpre: Vec<f64>,
}

impl Workspace {
    fn new(hidden: usize) -> Self {
        Self {
            input: vec![0.0; IN * P * P],
            hidden: vec![0.0; hidden * P * P],
            logits: vec![0.0; PIXELS],
            dlogit: vec![0.0; P * P],
            dpre: vec![0.0; hidden * PIXELS],
        }
    }
}

impl SegmenterModel {
    pub fn param_count_for(hidden: usize) -> usize {
        hidden * IN * 9 + hidden + hidden * 9 + 1
    }

    /// A model that refuses inference until trained.
    pub fn untrained(hidden: usize) -> Self {
        Self {
            hidden,
            params: vec![0.0; Self::param_count_for(hidden)],
            trained: false,
            meta: SegmenterMeta::default(),
        }
    }

    /// Glorot-uniform initialization from `seed`.
    pub fn initialized(hidden: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed, stream::SEGMENTER);
        let mut m = Self::untrained(hidden);
        let a1 = (6.0 / (9.0 * IN as f64 + 9.0 * hidden as f64)).sqrt();
        let a2 = (6.0 / (9.0 * hidden as f64 + 9.0)).sqrt();
        let (w1, _, w2, _) = m.offsets();
        for p in &mut m.params[w1..w1 + hidden * IN * 9] {
            *p = rng.random_range(-a1..a1);
        }
        for p in &mut m.params[w2..w2 + hidden * 9] {
            *p = rng.random_range(-a2..a2);
        }
        m
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let w1 = 0;
        let b1 = self.hidden * IN * 9;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.hidden * 9;
        (w1, b1, w2, b2)
    }

    fn load_input(img: &ImageTensor, ws: &mut Workspace) {
        let intensity: Vec<f64> = img.data.chunks_exact(3).map(|px| px.iter().map(|v| *v as f64).sum::<f64>() / 3.0).collect();
        let mean = intensity.iter().sum::<f64>() / PIXELS as f64;
        let var = intensity.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / PIXELS as f64;
        let spread = var.sqrt() + 0.05;
        for y in 0..NET_SIZE {
            for x in 0..NET_SIZE {
                let px = &img.data[(y * NET_SIZE + x) * 3..(y * NET_SIZE + x) * 3 + 3];
                let at = (y + 1) * P + x + 1;
                for c in 0..3 {
                    ws.input[c * P * P + at] = px[c] as f64 - 0.5;
                }
                let hi = px[0].max(px[1]).max(px[2]);
                let lo = px[0].min(px[1]).min(px[2]);
                ws.input[3 * P * P + at] = 2.0 * (hi - lo) as f64;
                ws.input[4 * P * P + at] = (intensity[y * NET_SIZE + x] - mean) / spread;
            }
        }
    }

    fn forward(&self, img: &ImageTensor, ws: &mut Workspace) {
        Self::load_input(img, ws);
        let (w1, b1, w2, b2) = self.offsets();
        let mut acc = vec![0.0; PIXELS];
        for o in 0..self.hidden {
            acc.fill(self.params[b1 + o]);
            for i in 0..IN {
                let src = &ws.input[i * P * P..(i + 1) * P * P];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let w = self.params[w1 + ((o * IN + i) * 3 + ky) * 3 + kx];
                        for y in 0..NET_SIZE {
                            let row = &src[(y + ky) * P + kx..(y + ky) * P + kx + NET_SIZE];
                            for (a, s) in acc[y * NET_SIZE..(y + 1) * NET_SIZE].iter_mut().zip(row) {
                                *a += w * s;
                            }
                        }
                    }
                }
            }
            let plane = &mut ws.hidden[o * P * P..(o + 1) * P * P];
            for y in 0..NET_SIZE {
                for x in 0..NET_SIZE {
                    plane[(y + 1) * P + x + 1] = acc[y * NET_SIZE + x].tanh();
                }
            }
        }
        ws.logits.fill(self.params[b2]);
        for o in 0..self.hidden {
            let src = &ws.hidden[o * P * P..(o + 1) * P * P];
            for ky in 0..3 {
                for kx in 0..3 {
                    let w = self.params[w2 + (o * 3 + ky) * 3 + kx];
                    for y in 0..NET_SIZE {
                        let row = &src[(y + ky) * P + kx..(y + ky) * P + kx + NET_SIZE];
                        for (a, s) in ws.logits[y * NET_SIZE..(y + 1) * NET_SIZE].iter_mut().zip(row) {
                            *a += w * s;
                        }
                    }
                }
            }
        }
    }

    /// Mean per-pixel cross-entropy of one pair; adds `scale * dLoss/dθ` into `grad`.
    fn loss_and_grad(&self, img: &ImageTensor, mask: &BinaryMask, ws: &mut Workspace, grad: &mut [f64], scale: f64) -> f64 {
        self.forward(img, ws);
        let (w1, b1, w2, b2) = self.offsets();
        let mut loss = 0.0;
        let norm = scale / PIXELS as f64;
        ws.dlogit.fill(0.0);
        for y in 0..NET_SIZE {
            for x in 0..NET_SIZE {
                let t = mask.data[y * NET_SIZE + x] as f64;
                let p = sigmoid(ws.logits[y * NET_SIZE + x]);
                let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
                // the clamp is flat outside its range
                let d = if pc == p { p - t } else { 0.0 };
                ws.dlogit[(y + 1) * P + x + 1] = d * norm;
            }
        }
        grad[b2] += ws.dlogit.iter().sum::<f64>();
        for o in 0..self.hidden {
            let h = &ws.hidden[o * P * P..(o + 1) * P * P];
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut g = 0.0;
                    for y in 0..NET_SIZE {
                        let hr = &h[(y + ky) * P + kx..(y + ky) * P + kx + NET_SIZE];
                        let dr = &ws.dlogit[(y + 1) * P + 1..(y + 1) * P + 1 + NET_SIZE];
                        g += hr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad[w2 + (o * 3 + ky) * 3 + kx] += g;
                }
            }
            // back through the second convolution and the tanh
            let dpre = &mut ws.dpre[o * PIXELS..(o + 1) * PIXELS];
            dpre.fill(0.0);
            for ky in 0..3 {
                for kx in 0..3 {
                    let w = self.params[w2 + (o * 3 + ky) * 3 + kx];
                    for y in 0..NET_SIZE {
                        let base = (y + 2 - ky) * P + 2 - kx;
                        let dr = &ws.dlogit[base..base + NET_SIZE];
                        for (a, d) in dpre[y * NET_SIZE..(y + 1) * NET_SIZE].iter_mut().zip(dr) {
                            *a += w * d;
                        }
                    }
                }
            }
            for y in 0..NET_SIZE {
                for x in 0..NET_SIZE {
                    let hv = h[(y + 1) * P + x + 1];
                    dpre[y * NET_SIZE + x] *= 1.0 - hv * hv;
                }
            }
            grad[b1 + o] += dpre.iter().sum::<f64>();
            for i in 0..IN {
                let src = &ws.input[i * P * P..(i + 1) * P * P];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut g = 0.0;
                        for y in 0..NET_SIZE {
                            let sr = &src[(y + ky) * P + kx..(y + ky) * P + kx + NET_SIZE];
                            let dr = &dpre[y * NET_SIZE..(y + 1) * NET_SIZE];
                            g += sr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>();
                        }
                        grad[w1 + ((o * IN + i) * 3 + ky) * 3 + kx] += g;
                    }
                }
            }
        }
        loss / PIXELS as f64
    }

    /// Mean loss over `pairs` and its gradient with respect to every parameter.
    pub fn batch_loss_and_grad(&self, pairs: &[(ImageTensor, BinaryMask)]) -> (f64, Vec<f64>) {
        let mut ws = Workspace::new(self.hidden);
        let mut grad = vec![0.0; self.params.len()];
        let scale = 1.0 / pairs.len() as f64;
        let mut loss = 0.0;
        for (img, mask) in pairs {
            loss += self.loss_and_grad(img, mask, &mut ws, &mut grad, scale);
        }
        (loss * scale, grad)
    }

    pub fn batch_loss(&self, pairs: &[(ImageTensor, BinaryMask)]) -> f64 {
        self.batch_loss_and_grad(pairs).0
    }

    /// Raw logits for a preprocessed image, row-major 64x64.
    pub fn logits(&self, img: &ImageTensor) -> Result<Vec<f64>, VisionError> {
        check_input(img)?;
        let mut ws = Workspace::new(self.hidden);
        self.forward(img, &mut ws);
        Ok(ws.logits)
    }

    fn quantize(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    /// `SEG1` little-endian model file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.len() * 4);
        out.extend_from_slice(b"SEG1");
        out.extend_from_slice(&2u32.to_le_bytes());
        for shape in [[self.hidden, IN, 3, 3], [1, self.hidden, 3, 3]] {
            for d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.meta.epochs.to_le_bytes());
        out.extend_from_slice(&(self.meta.final_loss as f32).to_le_bytes());
        out.extend_from_slice(&(self.meta.heldout_accuracy as f32).to_le_bytes());
        out.extend_from_slice(&(self.meta.road_fraction as f32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VisionError> {
        let mut r = crate::codec::Reader::new(bytes);
        if r.take(4).map_err(VisionError::Format)? != b"SEG1" {
            return Err(VisionError::Format("missing SEG1 magic".into()));
        }
        let layers = r.u32().map_err(VisionError::Format)?;
        if layers != 2 {
            return Err(VisionError::Format(format!("expected 2 layers, found {layers}")));
        }
        let mut shapes = [[0u32; 4]; 2];
        for shape in &mut shapes {
            for d in shape.iter_mut() {
                *d = r.u32().map_err(VisionError::Format)?;
            }
        }
        let hidden = shapes[0][0] as usize;
        if shapes != [[hidden as u32, IN as u32, 3, 3], [1, hidden as u32, 3, 3]] {
            return Err(VisionError::Format(format!("unsupported layer shapes {shapes:?}")));
        }
        let epochs = r.u32().map_err(VisionError::Format)?;
        let final_loss = r.f32().map_err(VisionError::Format)? as f64;
        let heldout_accuracy = r.f32().map_err(VisionError::Format)? as f64;
        let road_fraction = r.f32().map_err(VisionError::Format)? as f64;
        let n = Self::param_count_for(hidden);
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(r.f32().map_err(VisionError::Format)? as f64);
        }
        r.finish().map_err(VisionError::Format)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(VisionError::Format("non-finite parameter".into()));
        }
        Ok(Self {
            hidden,
            params,
            trained: true,
            meta: SegmenterMeta {
                epochs,
                final_loss,
                heldout_accuracy,
                road_fraction,
                loss_curve: Vec::new(),
            },
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_input(img: &ImageTensor) -> Result<(), VisionError> {
    if (img.height, img.width) != (NET_SIZE, NET_SIZE) {
        return Err(VisionError::Contract(format!(
            "segmenter expects {NET_SIZE}x{NET_SIZE} input, got {}x{}",
            img.height, img.width
        )));
    }
    Ok(())
}

/// Thresholds the per-pixel road probability at 0.5.
pub fn segment(model: &SegmenterModel, img: &ImageTensor) -> Result<BinaryMask, VisionError> {
    if !model.trained {
        return Err(VisionError::Contract("segmenter has not been trained".into()));
    }
    let logits = model.logits(img)?;
    Ok(BinaryMask {
        height: NET_SIZE,
        width: NET_SIZE,
        data: logits.iter().map(|l| (*l > 0.0) as u8).collect(),
    })
}

/// Mean pixel accuracy of `model` on `pairs`.
pub fn pixel_accuracy(model: &SegmenterModel, pairs: &[(ImageTensor, BinaryMask)]) -> Result<f64, VisionError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (img, mask) in pairs {
        acc += segment(model, img)?.accuracy(mask);
    }
    Ok(acc / pairs.len() as f64)
}

/// Splits off the held-out fraction (seeded) and trains on the rest.
pub fn train_segmenter(dataset: &[(ImageTensor, BinaryMask)], cfg: &SegmenterConfig) -> Result<SegmenterModel, VisionError> {
    if dataset.len() < cfg.min_pairs {
        return Err(VisionError::Contract(format!(
            "need at least {} training pairs, got {}",
            cfg.min_pairs,
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::seeded(cfg.seed, stream::SEGMENTER + 100));
    let n_heldout = ((dataset.len() as f64 * cfg.heldout_fraction).round() as usize).clamp(1, dataset.len() - 1);
    let (held, train) = order.split_at(n_heldout);
    let train: Vec<_> = train.iter().map(|&i| dataset[i].clone()).collect();
    let held: Vec<_> = held.iter().map(|&i| dataset[i].clone()).collect();
    fit(&train, &held, cfg)
}

/// Minibatch SGD with momentum on an explicit train/held-out split.
pub fn fit(
    train: &[(ImageTensor, BinaryMask)],
    heldout: &[(ImageTensor, BinaryMask)],
    cfg: &SegmenterConfig,
) -> Result<SegmenterModel, VisionError> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(VisionError::Contract("empty training split or zero batch size".into()));
    }
    for (img, mask) in train.iter().chain(heldout) {
        check_input(img)?;
        if (mask.height, mask.width) != (NET_SIZE, NET_SIZE) {
            return Err(VisionError::Contract("mask is not 64x64".into()));
        }
    }
    let road: usize = train.iter().map(|(_, m)| m.count_ones()).sum();
    let mut model = SegmenterModel::initialized(cfg.hidden, cfg.seed);
    let mut velocity = vec![0.0; model.params.len()];
    let mut ws = Workspace::new(cfg.hidden);
    let mut grad = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::seeded(cfg.seed, stream::SEGMENTER + 200);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)) as f64;
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            // cosine annealing to zero over the run
            let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            step += 1;
            grad.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += model.loss_and_grad(&train[i].0, &train[i].1, &mut ws, &mut grad, scale) / train.len() as f64;
            }
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - lr * g;
                *p += *v;
            }
        }
        if !epoch_loss.is_finite() {
            return Err(VisionError::Training {
                accuracy: 0.0,
                loss_curve: curve,
            });
        }
        curve.push(epoch_loss);
    }
    model.quantize();
    model.trained = true;
    let accuracy = pixel_accuracy(&model, heldout)?;
    if accuracy < cfg.min_accuracy {
        return Err(VisionError::Training {
            accuracy,
            loss_curve: curve,
        });
    }
    model.meta = SegmenterMeta {
        epochs: cfg.epochs as u32,
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
        heldout_accuracy: accuracy,
        road_fraction: road as f64 / (train.len() * PIXELS) as f64,
        loss_curve: curve,
    };
    Ok(model)
}
