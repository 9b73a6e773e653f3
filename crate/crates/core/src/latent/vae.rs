//! Fully connected VAE on flattened 28x28 masks with hand-written backprop.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Latent, LatentError, LATENT_DIM, MASK_PIXELS};
use crate::codec::{self, Reader};
use crate::image::BinaryMask;
use crate::rng::{self, stream, Rng};
use crate::vision::LATENT_SIZE;

/// Probability clamp applied before the cross-entropy logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: [usize; 2],
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub heldout_fraction: f64,
    /// Training fails below this held-out reconstruction IoU.
    pub min_iou: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            hidden: [256, 64],
            kl_weight: 1.0,
            learning_rate: 0.0003,
            momentum: 0.9,
            epochs: 40,
            batch_size: 32,
            heldout_fraction: 0.1,
            min_iou: 0.7,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), LatentError> {
        let ok = self.hidden.iter().all(|h| *h > 0)
            && self.kl_weight >= 0.0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.epochs > 0
            && self.batch_size > 0
            && self.heldout_fraction > 0.0
            && self.heldout_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(LatentError::Contract(format!("invalid VAE configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VaeMeta {
    pub epochs: u32,
    /// Mean negative ELBO of the last training epoch.
    pub final_loss: f64,
    pub heldout_iou: f64,
    pub loss_curve: Vec<f64>,
}

/// Affine layer `x W + b` with `W` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Array2::zeros((inputs, outputs)),
            b: Array1::zeros(outputs),
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut d = Self::zeros(inputs, outputs);
        d.w.mapv_inplace(|_| rng.random_range(-a..a));
        d
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

// layer order: encoder 784->h0->h1, encoder head h1->4 (mu, log-variance),
// decoder 2->h1->h0, decoder output h0->784
const ENC1: usize = 0;
const ENC2: usize = 1;
const HEAD: usize = 2;
const DEC1: usize = 3;
const DEC2: usize = 4;
const OUT: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    layers: Vec<Dense>,
    trained: bool,
    pub meta: VaeMeta,
}

/// Everything the backward pass needs from one forward pass.
struct Cache {
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    mu: Array2<f64>,
    logvar: Array2<f64>,
    eps: Array2<f64>,
    z: Array2<f64>,
    g1: Array2<f64>,
    g2: Array2<f64>,
    p: Array2<f64>,
}

/// ELBO decomposition, each term averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl VaeModel {
    pub fn new(hidden: [usize; 2], seed: u64) -> Self {
        let mut rng = rng::seeded(seed, stream::VAE);
        let [h0, h1] = hidden;
        let layers = vec![
            Dense::glorot(MASK_PIXELS, h0, &mut rng),
            Dense::glorot(h0, h1, &mut rng),
            Dense::glorot(h1, 2 * LATENT_DIM, &mut rng),
            Dense::glorot(LATENT_DIM, h1, &mut rng),
            Dense::glorot(h1, h0, &mut rng),
            Dense::glorot(h0, MASK_PIXELS, &mut rng),
        ];
        Self {
            layers,
            trained: false,
            meta: VaeMeta::default(),
        }
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.layers[ENC1].b.len(), self.layers[ENC2].b.len()]
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    /// Flat parameter view: each layer's weights row-major, then its bias.
    pub fn param(&self, index: usize) -> f64 {
        let (l, i) = self.locate(index);
        let d = &self.layers[l];
        if i < d.w.len() {
            d.w.as_slice().unwrap()[i]
        } else {
            d.b[i - d.w.len()]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (l, i) = self.locate(index);
        let d = &mut self.layers[l];
        if i < d.w.len() {
            d.w.as_slice_mut().unwrap()[i] = value;
        } else {
            let n = d.w.len();
            d.b[i - n] = value;
        }
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (l, d) in self.layers.iter().enumerate() {
            if index < d.len() {
                return (l, index);
            }
            index -= d.len();
        }
        panic!("parameter index out of range");
    }

    fn encoder_head(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let h1 = self.layers[ENC1].apply(x).mapv(f64::tanh);
        let h2 = self.layers[ENC2].apply(&h1).mapv(f64::tanh);
        let head = self.layers[HEAD].apply(&h2);
        (h1, h2, head)
    }

    fn decoder(&self, z: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let g1 = self.layers[DEC1].apply(z).mapv(f64::tanh);
        let g2 = self.layers[DEC2].apply(&g1).mapv(f64::tanh);
        let p = self.layers[OUT].apply(&g2).mapv(sigmoid);
        (g1, g2, p)
    }

    fn forward(&self, x: Array2<f64>, eps: Array2<f64>) -> Cache {
        let (h1, h2, head) = self.encoder_head(&x);
        let mu = head.slice(ndarray::s![.., ..LATENT_DIM]).to_owned();
        let logvar = head.slice(ndarray::s![.., LATENT_DIM..]).to_owned();
        let z = &mu + &(logvar.mapv(|v| (0.5 * v).exp()) * &eps);
        let (g1, g2, p) = self.decoder(&z);
        Cache {
            x,
            h1,
            h2,
            mu,
            logvar,
            eps,
            z,
            g1,
            g2,
            p,
        }
    }

    fn terms(cache: &Cache, beta: f64) -> ElboTerms {
        let n = cache.x.nrows() as f64;
        let mut recon = 0.0;
        for (p, x) in cache.p.iter().zip(cache.x.iter()) {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            recon -= x * pc.ln() + (1.0 - x) * (1.0 - pc).ln();
        }
        let mut kl = 0.0;
        for (m, lv) in cache.mu.iter().zip(cache.logvar.iter()) {
            kl += 0.5 * (m * m + lv.exp() - lv - 1.0);
        }
        let (recon, kl) = (recon / n, kl / n);
        ElboTerms {
            total: recon + beta * kl,
            reconstruction: recon,
            kl,
        }
    }

    fn backward(&self, c: &Cache, beta: f64) -> Vec<Dense> {
        let n = c.x.nrows() as f64;
        let mut grads: Vec<Dense> = self.layers.iter().map(|d| Dense::zeros(d.w.nrows(), d.w.ncols())).collect();
        // sigmoid + cross-entropy; zero where the clamp is active
        let mut d_out = Array2::zeros(c.p.raw_dim());
        ndarray::Zip::from(&mut d_out).and(&c.p).and(&c.x).for_each(|d, &p, &x| {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            *d = if pc == p { (p - x) / n } else { 0.0 };
        });
        let d_g2 = dense_back(&self.layers[OUT], &mut grads[OUT], &c.g2, &d_out) * &c.g2.mapv(|g| 1.0 - g * g);
        let d_g1 = dense_back(&self.layers[DEC2], &mut grads[DEC2], &c.g1, &d_g2) * &c.g1.mapv(|g| 1.0 - g * g);
        let d_z = dense_back(&self.layers[DEC1], &mut grads[DEC1], &c.z, &d_g1);
        let sigma = c.logvar.mapv(|v| (0.5 * v).exp());
        let d_mu = &d_z + &(&c.mu * (beta / n));
        let d_logvar = &d_z * &c.eps * &sigma * 0.5 + (sigma.mapv(|s| s * s) - 1.0) * (0.5 * beta / n);
        let d_head = ndarray::concatenate![Axis(1), d_mu, d_logvar];
        let d_h2 = dense_back(&self.layers[HEAD], &mut grads[HEAD], &c.h2, &d_head) * &c.h2.mapv(|h| 1.0 - h * h);
        let d_h1 = dense_back(&self.layers[ENC2], &mut grads[ENC2], &c.h1, &d_h2) * &c.h1.mapv(|h| 1.0 - h * h);
        // input gradient is not needed
        grads[ENC1].w = c.x.t().dot(&d_h1);
        grads[ENC1].b = d_h1.sum_axis(Axis(0));
        grads
    }

    /// Negative ELBO on `batch` with reparameterization noise drawn from `rng`.
    pub fn elbo(&self, batch: &[BinaryMask], beta: f64, rng: &mut Rng) -> Result<ElboTerms, LatentError> {
        let x = to_matrix(batch)?;
        let eps = draw_noise(batch.len(), rng);
        let t = Self::terms(&self.forward(x, eps), beta);
        if !t.total.is_finite() {
            return Err(LatentError::Numerical { batch: 0 });
        }
        Ok(t)
    }

    /// Loss and flat gradient for a fixed noise draw.
    pub fn loss_and_grad(&self, batch: &[BinaryMask], eps: &Array2<f64>, beta: f64) -> Result<(ElboTerms, Vec<f64>), LatentError> {
        let cache = self.forward(to_matrix(batch)?, eps.clone());
        let terms = Self::terms(&cache, beta);
        let grads = self.backward(&cache, beta);
        Ok((terms, flatten(&grads)))
    }

    fn loss_with_noise(&self, x: &Array2<f64>, eps: &Array2<f64>, beta: f64) -> f64 {
        Self::terms(&self.forward(x.clone(), eps.clone()), beta).total
    }

    /// Posterior mean; deterministic.
    pub fn encode(&self, mask: &BinaryMask) -> Result<Latent, LatentError> {
        if !self.trained {
            return Err(LatentError::Contract("VAE has not been trained".into()));
        }
        let x = to_matrix(std::slice::from_ref(mask))?;
        let (_, _, head) = self.encoder_head(&x);
        Ok(Latent {
            z: [head[[0, 0]], head[[0, 1]]],
        })
    }

    /// Batched [`encode`](Self::encode).
    pub fn encode_many(&self, masks: &[BinaryMask]) -> Result<Vec<Latent>, LatentError> {
        if !self.trained {
            return Err(LatentError::Contract("VAE has not been trained".into()));
        }
        let (_, _, head) = self.encoder_head(&to_matrix(masks)?);
        Ok(head.rows().into_iter().map(|r| Latent { z: [r[0], r[1]] }).collect())
    }

    /// Per-pixel road probabilities, row-major 28x28, each in (0, 1).
    pub fn decode(&self, z: Latent) -> Vec<f64> {
        let zm = Array2::from_shape_vec((1, LATENT_DIM), z.z.to_vec()).unwrap();
        self.decoder(&zm).2.into_raw_vec_and_offset().0
    }

    /// Mean IoU between masks and their thresholded reconstructions.
    pub fn reconstruction_iou(&self, masks: &[BinaryMask]) -> Result<f64, LatentError> {
        if masks.is_empty() {
            return Ok(0.0);
        }
        let latents = self.encode_many(masks)?;
        let mut total = 0.0;
        for (m, z) in masks.iter().zip(latents) {
            let rec = BinaryMask {
                height: LATENT_SIZE,
                width: LATENT_SIZE,
                data: self.decode(z).iter().map(|p| (*p >= 0.5) as u8).collect(),
            };
            total += rec.iou(m);
        }
        Ok(total / masks.len() as f64)
    }

    fn quantize(&mut self) {
        for d in &mut self.layers {
            d.w.mapv_inplace(|v| v as f32 as f64);
            d.b.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// `VAE2` little-endian model file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"VAE2");
        codec::put_u32(&mut out, self.layers.len() as u32);
        for d in &self.layers {
            codec::put_u32(&mut out, d.w.nrows() as u32);
            codec::put_u32(&mut out, d.w.ncols() as u32);
        }
        codec::put_u32(&mut out, self.meta.epochs);
        codec::put_f32(&mut out, self.meta.final_loss as f32);
        codec::put_f32(&mut out, self.meta.heldout_iou as f32);
        for d in &self.layers {
            for v in d.w.iter().chain(d.b.iter()) {
                codec::put_f32(&mut out, *v as f32);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LatentError> {
        let fmt = LatentError::Format;
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(fmt)? != b"VAE2" {
            return Err(LatentError::Format("missing VAE2 magic".into()));
        }
        let count = r.u32().map_err(fmt)? as usize;
        if count != 6 {
            return Err(LatentError::Format(format!("expected 6 layers, found {count}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            shapes.push((r.u32().map_err(fmt)? as usize, r.u32().map_err(fmt)? as usize));
        }
        let (h0, h1) = (shapes[0].1, shapes[1].1);
        let expected = [
            (MASK_PIXELS, h0),
            (h0, h1),
            (h1, 2 * LATENT_DIM),
            (LATENT_DIM, h1),
            (h1, h0),
            (h0, MASK_PIXELS),
        ];
        if shapes != expected {
            return Err(LatentError::Format(format!("unsupported layer shapes {shapes:?}")));
        }
        let epochs = r.u32().map_err(fmt)?;
        let final_loss = r.f32().map_err(fmt)? as f64;
        let heldout_iou = r.f32().map_err(fmt)? as f64;
        let mut layers = Vec::with_capacity(count);
        for &(i, o) in &shapes {
            let mut d = Dense::zeros(i, o);
            for v in d.w.iter_mut().chain(d.b.iter_mut()) {
                *v = r.f32().map_err(fmt)? as f64;
                if !v.is_finite() {
                    return Err(LatentError::Format("non-finite parameter".into()));
                }
            }
            layers.push(d);
        }
        r.finish().map_err(fmt)?;
        Ok(Self {
            layers,
            trained: true,
            meta: VaeMeta {
                epochs,
                final_loss,
                heldout_iou,
                loss_curve: Vec::new(),
            },
        })
    }
}

/// Accumulates the parameter gradient of `layer` and returns the input gradient.
fn dense_back(layer: &Dense, grad: &mut Dense, input: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
    grad.w = input.t().dot(d_out);
    grad.b = d_out.sum_axis(Axis(0));
    d_out.dot(&layer.w.t())
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Dense::len).sum());
    for d in layers {
        out.extend(d.w.iter().copied());
        out.extend(d.b.iter().copied());
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn to_matrix(masks: &[BinaryMask]) -> Result<Array2<f64>, LatentError> {
    if masks.is_empty() {
        return Err(LatentError::Contract("empty batch".into()));
    }
    let mut x = Array2::zeros((masks.len(), MASK_PIXELS));
    for (mut row, m) in x.rows_mut().into_iter().zip(masks) {
        if (m.height, m.width) != (LATENT_SIZE, LATENT_SIZE) {
            return Err(LatentError::Contract(format!(
                "expected a {LATENT_SIZE}x{LATENT_SIZE} mask, got {}x{}",
                m.height, m.width
            )));
        }
        for (v, b) in row.iter_mut().zip(&m.data) {
            *v = *b as f64;
        }
    }
    Ok(x)
}

fn draw_noise(rows: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, LATENT_DIM), |_| rng.sample(StandardNormal))
}

/// Negative ELBO of `batch`; noise for the reparameterization comes from `rng`.
pub fn elbo_loss(model: &VaeModel, batch: &[BinaryMask], beta: f64, rng: &mut Rng) -> Result<ElboTerms, LatentError> {
    model.elbo(batch, beta, rng)
}

/// Largest relative error between analytic and central-difference gradients
/// over `n_params` parameters picked with `seed`, with the noise frozen.
pub fn grad_check(model: &VaeModel, batch: &[BinaryMask], n_params: usize, seed: u64) -> Result<f64, LatentError> {
    let mut rng = rng::seeded(seed, stream::GRAD_CHECK);
    let eps = draw_noise(batch.len(), &mut rng);
    let beta = 1.0;
    let (_, grad) = model.loss_and_grad(batch, &eps, beta)?;
    let x = to_matrix(batch)?;
    let h = 1e-3;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..n_params {
        let i = rng.random_range(0..grad.len());
        let orig = probe.param(i);
        probe.set_param(i, orig + h);
        let plus = probe.loss_with_noise(&x, &eps, beta);
        probe.set_param(i, orig - h);
        let minus = probe.loss_with_noise(&x, &eps, beta);
        probe.set_param(i, orig);
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    Ok(worst)
}

/// `|a - b| / max(|a|, |b|)`, with differences below 1e-8 counted as exact.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff < 1e-8 {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

/// Momentum SGD on the negative ELBO with a seeded held-out split.
pub fn train_vae(dataset: &[BinaryMask], cfg: &VaeConfig) -> Result<VaeModel, LatentError> {
    cfg.validate()?;
    super::check_dataset(dataset)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rng::seeded(cfg.seed, stream::VAE + 100);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_held = ((dataset.len() as f64 * cfg.heldout_fraction).round() as usize).clamp(1, dataset.len() - 1);
    let held: Vec<BinaryMask> = order[..n_held].iter().map(|&i| dataset[i].clone()).collect();
    let train: Vec<BinaryMask> = order[n_held..].iter().map(|&i| dataset[i].clone()).collect();
    let x_all = to_matrix(&train)?;

    let mut model = VaeModel::new(cfg.hidden, cfg.seed);
    // start the output layer at the mean pixel occupancy
    let mean = x_all.mean_axis(Axis(0)).unwrap();
    model.layers[OUT].b = mean.mapv(|m| {
        let m = m.clamp(1e-3, 1.0 - 1e-3);
        (m / (1.0 - m)).ln()
    });
    let mut velocity: Vec<Dense> = model.layers.iter().map(|d| Dense::zeros(d.w.nrows(), d.w.ncols())).collect();
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let x = x_all.select(Axis(0), chunk);
            let eps = draw_noise(chunk.len(), &mut rng);
            let cache = model.forward(x, eps);
            let terms = VaeModel::terms(&cache, cfg.kl_weight);
            if !terms.total.is_finite() {
                return Err(LatentError::Numerical { batch: b });
            }
            debug_assert!(terms.kl >= 0.0);
            epoch_loss += terms.total * chunk.len() as f64;
            let grads = model.backward(&cache, cfg.kl_weight);
            for ((p, v), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                v.w.zip_mut_with(&g.w, |v, g| *v = cfg.momentum * *v - cfg.learning_rate * g);
                v.b.zip_mut_with(&g.b, |v, g| *v = cfg.momentum * *v - cfg.learning_rate * g);
                p.w += &v.w;
                p.b += &v.b;
            }
        }
        curve.push(epoch_loss / train.len() as f64);
    }
    model.quantize();
    model.trained = true;
    let iou = model.reconstruction_iou(&held)?;
    if iou < cfg.min_iou {
        return Err(LatentError::Training { iou, loss_curve: curve });
    }
    model.meta = VaeMeta {
        epochs: cfg.epochs as u32,
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
        heldout_iou: iou,
        loss_curve: curve,
    };
    Ok(model)
}
