//! Residual-predicting restoration network and its training loop.
//!
//! The network sees the degraded render and the decoded side-information
//! residual (six input channels) and predicts a residual `R_hat`; the
//! restored image is `clamp(degraded + R_hat, 0, 1)`.

mod net;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::compress::{compress_cloud, decompress_cloud, CompressionConfig};
use crate::error::{Error, Result, ResultExt};
use crate::optim::Adam;
use crate::render::render_view;
use crate::residual::{requantize, MAX_QUALITY, MIN_QUALITY};
use crate::scene::{Camera, GaussianCloud, Image, SignedImage};

pub use net::{ConvLayer, Real, Shape, INPUT_CHANNELS, LEAKY_SLOPE, OUTPUT_CHANNELS};

const MAGIC: &[u8; 4] = b"GSRN";
const VERSION: u8 = 1;

/// Weights of a `depth`-layer 3x3 CNN with widths `6 -> width -> ... -> 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorerParams<T = f32> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> RestorerParams<T> {
    /// He-initialised network whose last layer is zero, so it starts as the identity restorer.
    pub fn init(depth: usize, width: usize, seed: u64) -> Result<Self> {
        if depth < 1 {
            return Err(Error::invalid("restorer depth must be at least 1"));
        }
        if width < 1 && depth > 1 {
            return Err(Error::invalid("restorer width must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { INPUT_CHANNELS } else { width };
            let cout = if i + 1 == depth { OUTPUT_CHANNELS } else { width };
            let mut layer = ConvLayer::zeros(cin, cout);
            if i + 1 < depth {
                let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * (cin * 9) as f64)).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                for w in layer.weights.iter_mut() {
                    *w = T::of(normal.sample(&mut rng));
                }
            }
            layers.push(layer);
        }
        Ok(RestorerParams { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Hidden width (0 for a single-layer network).
    pub fn width(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[0].out_channels
        } else {
            0
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Weights and biases of every layer, concatenated.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count());
        let mut pos = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
    }

    pub fn cast<U: Real>(&self) -> RestorerParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.to_f64().unwrap())).collect();
        RestorerParams {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    weights: conv(&l.weights),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.layers.len();
        if d == 0 {
            return Err(Error::invalid("restorer has no layers"));
        }
        if self.layers[0].in_channels != INPUT_CHANNELS || self.layers[d - 1].out_channels != OUTPUT_CHANNELS {
            return Err(Error::invalid("restorer must map 6 input channels to 3 outputs"));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].out_channels != w[1].in_channels {
                return Err(Error::invalid(format!("layer {i} output width does not match layer {}", i + 1)));
            }
        }
        for l in &self.layers {
            if l.weights.len() != l.in_channels * 9 * l.out_channels || l.bias.len() != l.out_channels {
                return Err(Error::invalid("layer weight count does not match its shape"));
            }
        }
        Ok(())
    }
}

impl RestorerParams<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.depth() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 17 {
            return Err(Error::format("truncated restorer checkpoint"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format("not a GSRN checkpoint (bad magic)"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(format!("unsupported GSRN version {}", bytes[4])));
        }
        let body = &bytes[..bytes.len() - 4];
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            return Err(Error::format("restorer checkpoint checksum mismatch"));
        }
        let depth = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        if depth == 0 || depth > 1024 || (depth > 1 && (width == 0 || width > 4096)) {
            return Err(Error::format(format!("bad restorer shape: depth {depth}, width {width}")));
        }
        let count: usize = (0..depth)
            .map(|i| {
                let cin = if i == 0 { INPUT_CHANNELS } else { width };
                let cout = if i + 1 == depth { OUTPUT_CHANNELS } else { width };
                cin * 9 * cout + cout
            })
            .sum();
        let expected = 13 + 4 * count;
        if body.len() != expected {
            return Err(Error::format(format!(
                "checkpoint holds {} weight bytes, shape needs {}",
                body.len() - 13,
                expected - 13
            )));
        }
        let flat: Vec<f32> = body[13..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("checkpoint contains non-finite weights"));
        }
        let mut params = RestorerParams::<f32>::init(depth, width.max(1), 0)?;
        params.unflatten(&flat);
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).context(|| format!("reading {}", path.display()))
    }
}

/// One `(original, degraded, side information)` training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub degraded: Image,
    pub original: Image,
    pub side: SignedImage,
    pub scene_id: usize,
    pub view_id: usize,
}

impl TrainingPair {
    pub fn new(degraded: Image, original: Image, side: SignedImage, scene_id: usize, view_id: usize) -> Result<Self> {
        let d = degraded.dims();
        if original.dims() != d || side.dims() != d {
            return Err(Error::invalid(format!(
                "pair images differ in size: {:?}, {:?}, {:?}",
                d,
                original.dims(),
                side.dims()
            )));
        }
        Ok(TrainingPair {
            degraded,
            original,
            side,
            scene_id,
            view_id,
        })
    }

    /// True residual `original - degraded`.
    pub fn residual(&self) -> SignedImage {
        self.original.residual(&self.degraded).expect("dims checked")
    }
}

/// Renders every cloud from every camera before and after compression and
/// codes the residual at quality `q`.
pub fn build_pair_dataset(
    clouds: &[GaussianCloud],
    cameras: &[Camera],
    compression: &CompressionConfig,
    q: u8,
    background: [f64; 3],
) -> Result<Vec<TrainingPair>> {
    if clouds.is_empty() || cameras.is_empty() {
        return Err(Error::invalid("need at least one cloud and one camera"));
    }
    let per_scene = clouds
        .par_iter()
        .enumerate()
        .map(|(scene, cloud)| -> Result<Vec<TrainingPair>> {
            let degraded_cloud = compress_cloud(cloud, compression)
                .and_then(|cc| decompress_cloud(&cc))
                .context(|| format!("scene {scene}"))?;
            cameras
                .iter()
                .enumerate()
                .map(|(view, cam)| {
                    let original = render_view(cloud, cam, background);
                    let degraded = render_view(&degraded_cloud, cam, background);
                    let side = requantize(&original.residual(&degraded)?, q)
                        .context(|| format!("scene {scene} view {view}"))?;
                    TrainingPair::new(degraded, original, side, scene, view)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

const PAIRS_MAGIC: &[u8; 4] = b"GSPD";

/// Serialises pairs as f32 planes: per pair `u32 scene, u32 view, u32 w, u32 h`
/// then degraded, original and side RGB, followed by a CRC32 of everything.
pub fn pairs_to_bytes(pairs: &[TrainingPair]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PAIRS_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for p in pairs {
        let (w, h) = p.degraded.dims();
        for v in [p.scene_id, p.view_id, w, h] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in p.degraded.data().iter().chain(p.original.data()).chain(p.side.data()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn pairs_from_bytes(bytes: &[u8]) -> Result<Vec<TrainingPair>> {
    if bytes.len() < 13 || &bytes[..4] != PAIRS_MAGIC {
        return Err(Error::format("not a GSPD pair dataset"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(format!("unsupported GSPD version {}", bytes[4])));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::format("pair dataset checksum mismatch"));
    }
    let mut pos = 5;
    let u32_at = |pos: &mut usize| -> Result<usize> {
        let v = body
            .get(*pos..*pos + 4)
            .ok_or_else(|| Error::format("truncated pair dataset"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(v.try_into().unwrap()) as usize)
    };
    let count = u32_at(&mut pos)?;
    let mut pairs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let scene = u32_at(&mut pos)?;
        let view = u32_at(&mut pos)?;
        let w = u32_at(&mut pos)?;
        let h = u32_at(&mut pos)?;
        let n = w
            .checked_mul(h)
            .and_then(|v| v.checked_mul(3))
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::format("bad image size in pair dataset"))?;
        let floats = |pos: &mut usize| -> Result<Vec<f64>> {
            let raw = body
                .get(*pos..*pos + 4 * n)
                .ok_or_else(|| Error::format("truncated pair dataset"))?;
            *pos += 4 * n;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect())
        };
        let degraded = Image::new(w, h, floats(&mut pos)?)?;
        let original = Image::new(w, h, floats(&mut pos)?)?;
        let side = SignedImage::new(w, h, floats(&mut pos)?)?;
        pairs.push(TrainingPair::new(degraded, original, side, scene, view)?);
    }
    if pos != body.len() {
        return Err(Error::format("trailing bytes after pair dataset"));
    }
    Ok(pairs)
}

pub fn save_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    std::fs::write(path, pairs_to_bytes(pairs)).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    pairs_from_bytes(&bytes).context(|| format!("reading {}", path.display()))
}

fn planar<T: Real>(data: &[f64], channels: usize, out: &mut [T], batch: usize, index: usize, hw: usize) {
    for (p, px) in data.chunks_exact(channels).enumerate() {
        for (c, v) in px.iter().enumerate() {
            out[c * batch * hw + index * hw + p] = T::of(*v);
        }
    }
}

/// Predicted residual for a degraded render and its side information.
pub fn restorer_forward<T: Real>(params: &RestorerParams<T>, degraded: &Image, side: &SignedImage) -> Result<SignedImage> {
    params.validate()?;
    if degraded.dims() != side.dims() {
        return Err(Error::invalid(format!(
            "degraded image is {:?} but side information is {:?}",
            degraded.dims(),
            side.dims()
        )));
    }
    let (w, h) = degraded.dims();
    let shape = Shape { batch: 1, height: h, width: w };
    let hw = w * h;
    let mut input = vec![T::zero(); INPUT_CHANNELS * hw];
    planar(degraded.data(), 3, &mut input[..3 * hw], 1, 0, hw);
    planar(side.data(), 3, &mut input[3 * hw..], 1, 0, hw);
    let (out, _) = net::forward(&params.layers, &input, shape, false);
    let mut data = vec![0.0; 3 * hw];
    for c in 0..3 {
        for p in 0..hw {
            data[p * 3 + c] = out[c * hw + p].to_f64().unwrap();
        }
    }
    SignedImage::new(w, h, data)
}

/// `clamp(degraded + restorer_forward(..), 0, 1)`.
pub fn restore_image<T: Real>(params: &RestorerParams<T>, degraded: &Image, side: &SignedImage) -> Result<Image> {
    degraded.add_residual(&restorer_forward(params, degraded, side)?)
}

/// A batch of equally sized patches in planar layout.
#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    pub shape: Shape,
    /// Six channels: degraded RGB then side-information RGB.
    pub input: Vec<T>,
    /// Three channels: true residual RGB.
    pub target: Vec<T>,
}

impl<T: Real> PatchBatch<T> {
    /// Stacks `(degraded, side, target residual)` patches of equal size.
    pub fn from_patches(patches: &[(Image, SignedImage, SignedImage)]) -> Result<Self> {
        let first = patches.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (w, h) = first.0.dims();
        let batch = patches.len();
        let hw = w * h;
        let mut input = vec![T::zero(); INPUT_CHANNELS * batch * hw];
        let mut target = vec![T::zero(); OUTPUT_CHANNELS * batch * hw];
        let plane = batch * hw;
        for (i, (deg, side, res)) in patches.iter().enumerate() {
            if deg.dims() != (w, h) || side.dims() != (w, h) || res.dims() != (w, h) {
                return Err(Error::invalid("all patches in a batch must share one size"));
            }
            planar(deg.data(), 3, &mut input[..3 * plane], batch, i, hw);
            planar(side.data(), 3, &mut input[3 * plane..], batch, i, hw);
            planar(res.data(), 3, &mut target, batch, i, hw);
        }
        Ok(PatchBatch {
            shape: Shape { batch, height: h, width: w },
            input,
            target,
        })
    }
}

/// Loss value and its two parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestoreLoss {
    pub total: f64,
    pub l1: f64,
    pub grad_term: f64,
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// `mean|R - R_hat| + lambda * mean|sobel(R - R_hat)|` over both Sobel axes
/// and the interior pixels, with its gradient with respect to `R_hat`.
fn loss_and_grad<T: Real>(pred: &[T], target: &[T], shape: Shape, lambda: f64) -> (RestoreLoss, Vec<T>) {
    let n = pred.len();
    let err: Vec<f64> = target
        .iter()
        .zip(pred)
        .map(|(t, p)| t.to_f64().unwrap() - p.to_f64().unwrap())
        .collect();
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let l1 = err.iter().map(|e| e.abs()).sum::<f64>() / n as f64;
    // d loss / d err
    let mut d_err: Vec<f64> = err.iter().map(|e| sign(*e) / n as f64).collect();
    let (h, w) = (shape.height, shape.width);
    let mut grad_term = 0.0;
    if lambda > 0.0 && h >= 3 && w >= 3 {
        let planes = n / (h * w);
        let count = (planes * (h - 2) * (w - 2) * 2) as f64;
        for p in 0..planes {
            let e = &err[p * h * w..(p + 1) * h * w];
            let mut d_local = vec![0.0; h * w];
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    for kernel in [&SOBEL_X, &SOBEL_Y] {
                        let mut g = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                g += kernel[ky][kx] * e[(y + ky - 1) * w + x + kx - 1];
                            }
                        }
                        grad_term += g.abs();
                        let s = lambda * sign(g) / count;
                        if s != 0.0 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    d_local[(y + ky - 1) * w + x + kx - 1] += s * kernel[ky][kx];
                                }
                            }
                        }
                    }
                }
            }
            for (d, l) in d_err[p * h * w..(p + 1) * h * w].iter_mut().zip(d_local) {
                *d += l;
            }
        }
        grad_term /= count;
    }
    let d_pred = d_err.iter().map(|d| T::of(-d)).collect();
    (
        RestoreLoss {
            total: l1 + lambda * grad_term,
            l1,
            grad_term,
        },
        d_pred,
    )
}

/// Loss of `params` on `batch` and its gradient with respect to every weight.
pub fn restorer_loss_and_grad<T: Real>(
    params: &RestorerParams<T>,
    batch: &PatchBatch<T>,
    lambda_grad: f64,
) -> Result<(RestoreLoss, RestorerParams<T>)> {
    params.validate()?;
    let (out, trace) = net::forward(&params.layers, &batch.input, batch.shape, true);
    let (loss, d_out) = loss_and_grad(&out, &batch.target, batch.shape, lambda_grad);
    let layers = net::backward(&params.layers, &trace.expect("trace kept"), &d_out);
    Ok((loss, RestorerParams { layers }))
}

/// Optimiser state carried across training steps.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    adam: Adam<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: &RestorerParams<T>) -> Self {
        TrainState {
            adam: Adam::new(params.param_count()),
        }
    }
}

/// One Adam step on `batch` at learning rate `lr`. Returns the loss before the step.
pub fn restorer_train_step<T: Real>(
    params: &mut RestorerParams<T>,
    state: &mut TrainState<T>,
    batch: &PatchBatch<T>,
    lambda_grad: f64,
    lr: f64,
) -> Result<RestoreLoss> {
    let (loss, grads) = restorer_loss_and_grad(params, batch, lambda_grad)?;
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite restorer loss {}", loss.total)));
    }
    let mut flat = params.flatten();
    state.adam.step(&mut flat, &grads.flatten(), |_| lr);
    params.unflatten(&flat);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreTrainConfig {
    pub depth: usize,
    pub width: usize,
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub lambda_grad: f64,
    /// Side information is re-coded at a quality drawn uniformly from this range.
    pub augment_quality: (u8, u8),
    /// Probability of zeroing the side information of a sample.
    pub side_dropout: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for RestoreTrainConfig {
    fn default() -> Self {
        RestoreTrainConfig {
            depth: 6,
            width: 32,
            steps: 20_000,
            batch: 8,
            patch: 64,
            lr: 1e-3,
            lr_min: 1e-5,
            lambda_grad: 0.1,
            augment_quality: (2, 8),
            side_dropout: 0.1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl RestoreTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 8 != 0 {
            return Err(Error::invalid(format!("patch size must be a positive multiple of 8, got {}", self.patch)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be at least 1"));
        }
        let (lo, hi) = self.augment_quality;
        if lo > hi || lo < MIN_QUALITY || hi > MAX_QUALITY {
            return Err(Error::invalid(format!("augmentation quality range {lo}..={hi} is invalid")));
        }
        if !(0.0..=1.0).contains(&self.side_dropout) {
            return Err(Error::invalid("side_dropout must be in [0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::invalid("learning rates must satisfy 0 <= lr_min <= lr, lr > 0"));
        }
        if self.lambda_grad < 0.0 || !self.lambda_grad.is_finite() {
            return Err(Error::invalid("lambda_grad must be finite and non-negative"));
        }
        Ok(())
    }

    /// Cosine decay from `lr` to `lr_min` over `steps`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: RestoreLoss,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: RestorerParams<f32>,
    pub log: Vec<TrainLogEntry>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn write_train_log(path: &Path, log: &[TrainLogEntry]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "step,total,l1,grad_term").map_err(io)?;
    for e in log {
        writeln!(f, "{},{:.9},{:.9},{:.9}", e.step, e.loss.total, e.loss.l1, e.loss.grad_term).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Draws one augmented patch: an 8-aligned crop whose side information is
/// re-coded from the true residual at a random quality, or zeroed.
fn sample_patch(
    pair: &TrainingPair,
    patch: usize,
    config: &RestoreTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, SignedImage, SignedImage)> {
    let (w, h) = pair.degraded.dims();
    let pw = patch.min(w / 8 * 8).max(8).min(w);
    let ph = patch.min(h / 8 * 8).max(8).min(h);
    let x0 = 8 * rng.gen_range(0..=(w - pw) / 8);
    let y0 = 8 * rng.gen_range(0..=(h - ph) / 8);
    let degraded = pair.degraded.crop(x0, y0, pw, ph)?;
    let residual = pair.residual().crop(x0, y0, pw, ph)?;
    let (lo, hi) = config.augment_quality;
    let q = rng.gen_range(lo..=hi);
    let drop = rng.gen::<f64>() < config.side_dropout;
    let side = if drop {
        SignedImage::zeros(pw, ph)
    } else {
        requantize(&residual, q)?
    };
    Ok((degraded, side, residual))
}

/// Trains a restorer from scratch on `dataset`.
///
/// With `checkpoint_dir` set, writes `restorer_step{N}.gsrn` every
/// `checkpoint_every` steps and `restorer_final.gsrn` at the end. A
/// non-finite loss aborts with [`Error::Diverged`] naming the last checkpoint.
pub fn train_restorer(dataset: &[TrainingPair], config: &RestoreTrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainResult> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    let mut params = RestorerParams::<f32>::init(config.depth, config.width, config.seed)?;
    let mut state = TrainState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_DA7A);
    let mut log = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    for step in 0..config.steps {
        // Patches in one batch share a size; draw them from pairs of the first pair's size.
        let mut patches = Vec::with_capacity(config.batch);
        let mut dims = None;
        while patches.len() < config.batch {
            let pair = &dataset[rng.gen_range(0..dataset.len())];
            let d = pair.degraded.dims();
            if *dims.get_or_insert(d) != d {
                continue;
            }
            patches.push(sample_patch(pair, config.patch, config, &mut rng)?);
        }
        let batch = PatchBatch::<f32>::from_patches(&patches)?;
        let lr = config.learning_rate(step);
        let loss = match restorer_train_step(&mut params, &mut state, &batch, config.lambda_grad, lr) {
            Ok(l) => l,
            Err(Error::Numeric(reason)) => {
                return Err(Error::Diverged {
                    step,
                    reason,
                    last_good,
                })
            }
            Err(e) => return Err(e),
        };
        if !params.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite weights after update".into(),
                last_good,
            });
        }
        log.push(TrainLogEntry { step, loss });
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                let path = dir.join(format!("restorer_step{}.gsrn", step + 1));
                params.save(&path)?;
                checkpoints.push(path.clone());
                last_good = Some(path);
            }
        }
        if step % 1000 == 0 {
            log::info!("restorer step {step}: loss {:.6}", loss.total);
        }
    }
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("restorer_final.gsrn");
        params.save(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainResult {
        params,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_last_layer_predicts_nothing() {
        let p = RestorerParams::<f32>::init(3, 4, 1).unwrap();
        let img = Image::filled(9, 7, [0.3, 0.6, 0.9]);
        let side = SignedImage::filled(9, 7, [0.1, -0.2, 0.05]);
        let r = restorer_forward(&p, &img, &side).unwrap();
        assert!(r.data().iter().all(|v| *v == 0.0));
        assert_eq!(restore_image(&p, &img, &side).unwrap(), img);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut p = RestorerParams::<f32>::init(4, 5, 2).unwrap();
        let mut flat = p.flatten();
        flat.iter_mut().enumerate().for_each(|(i, v)| *v += i as f32 * 1e-3);
        p.unflatten(&flat);
        let bytes = p.to_bytes();
        assert_eq!(RestorerParams::from_bytes(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[20] ^= 4;
        assert!(matches!(RestorerParams::from_bytes(&bad), Err(Error::Format(_))));
        assert!(RestorerParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = RestoreTrainConfig { steps: 101, ..Default::default() };
        assert!((c.learning_rate(0) - 1e-3).abs() < 1e-15);
        assert!((c.learning_rate(100) - 1e-5).abs() < 1e-15);
        assert!(c.learning_rate(50) < 1e-3 && c.learning_rate(50) > 1e-5);
    }

    #[test]
    fn config_validation() {
        assert!(RestoreTrainConfig { patch: 12, ..Default::default() }.validate().is_err());
        assert!(RestoreTrainConfig { augment_quality: (0, 4), ..Default::default() }.validate().is_err());
        assert!(RestoreTrainConfig::default().validate().is_ok());
    }
}
