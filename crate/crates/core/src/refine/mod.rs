//! Re-optimisation of a compressed cloud against restored target views.
//!
//! Parameters are optimised in raw space: positions, an unnormalised
//! quaternion (renormalised after every step), log-scales, logit-opacity and
//! SH coefficients. The Gaussian count never changes.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim_with_grad};
use crate::optim::Adam;
use crate::render::render_with_backward;
use crate::scene::{canonical_quaternion, Camera, Gaussian, GaussianCloud, Image};

/// Per-group Adam learning rates. The position rate is multiplied by the
/// scene extent (half the bounding-box diagonal of the input cloud). `sh` is
/// the rate of the DC colour term, `sh_rest` of the higher bands.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
    pub sh_rest: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 2e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            sh_rest: 1.25e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub iterations: usize,
    pub lambda_ssim: f64,
    pub sample_ratio: f64,
    pub lr: LearningRates,
    /// Every rate decays exponentially to this fraction of itself by the last iteration.
    pub lr_final_factor: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 5000,
            lambda_ssim: 0.2,
            sample_ratio: 0.4,
            lr: LearningRates::default(),
            lr_final_factor: 0.01,
            background: [0.0; 3],
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "sample ratio must be in (0, 1], got {}",
                self.sample_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::invalid(format!("lambda_ssim must be in [0, 1], got {}", self.lambda_ssim)));
        }
        if !(self.lr_final_factor > 0.0 && self.lr_final_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "lr_final_factor must be in (0, 1], got {}",
                self.lr_final_factor
            )));
        }
        let lr = &self.lr;
        if [lr.position, lr.rotation, lr.scale, lr.opacity, lr.sh, lr.sh_rest]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::invalid("learning rates must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Evenly spaced subset of `ceil(ratio * count)` view indices.
pub fn sample_views(count: usize, ratio: f64) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::invalid("cannot sample from zero views"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("sample ratio must be in (0, 1], got {ratio}")));
    }
    // Guard against 0.4 * 10 = 4.000000000000001 style round-up.
    let m = ((ratio * count as f64) * (1.0 - 1e-12)).ceil().clamp(1.0, count as f64) as usize;
    let mut out: Vec<usize> = (0..m).map(|j| j * count / m).collect();
    out.dedup();
    Ok(out)
}

/// Value and parts of the refinement loss.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineLoss {
    pub loss: f64,
    pub l1: f64,
    /// `1 - SSIM`.
    pub ssim_term: f64,
    /// Gradient with respect to `render`, interleaved RGB.
    pub grad: Vec<f64>,
}

/// `(1 - lambda) * L1 + lambda * (1 - SSIM)` between a target and a render.
pub fn refine_loss(target: &Image, render: &Image, lambda: f64) -> Result<RefineLoss> {
    if target.dims() != render.dims() {
        return Err(Error::invalid(format!(
            "target is {:?} but render is {:?}",
            target.dims(),
            render.dims()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let n = target.data().len() as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = target
        .data()
        .iter()
        .zip(render.data())
        .map(|(t, r)| {
            let d = r - t;
            l1 += d.abs();
            (1.0 - lambda) * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / n
        })
        .collect();
    l1 /= n;
    let mut ssim_term = 0.0;
    if lambda > 0.0 {
        let (s, g) = ssim_with_grad(target, render)?;
        ssim_term = 1.0 - s;
        for (o, gi) in grad.iter_mut().zip(g) {
            *o -= lambda * gi;
        }
    }
    Ok(RefineLoss {
        loss: (1.0 - lambda) * l1 + lambda * ssim_term,
        l1,
        ssim_term,
        grad,
    })
}

/// One row of the refinement log.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineLogEntry {
    pub iteration: usize,
    pub view: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim_term: f64,
    /// PSNR of this iteration's render against its target.
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub cloud: GaussianCloud,
    pub log: Vec<RefineLogEntry>,
    /// Set when optimisation stopped early on a non-finite loss; `cloud` is
    /// then the last finite iterate.
    pub warning: Option<String>,
}

impl RefineResult {
    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        write_refine_log(path, &self.log)
    }
}

pub fn write_refine_log(path: &Path, log: &[RefineLogEntry]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "iteration,loss,l1,ssim_term,psnr_on_probe_view").map_err(io)?;
    for e in log {
        writeln!(
            f,
            "{},{:.8},{:.8},{:.8},{}",
            e.iteration,
            e.loss,
            e.l1,
            e.ssim_term,
            crate::metrics::format_metric(e.psnr)
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}

const OPACITY_EPS: f64 = 1e-6;

/// Raw-space parameter vector of one Gaussian:
/// `[position 3 | quaternion 4 | log-scale 3 | logit-opacity 1 | sh]`.
fn to_raw(g: &Gaussian, out: &mut Vec<f64>) {
    out.extend_from_slice(&g.position);
    out.extend_from_slice(&g.rotation);
    out.extend(g.scale.iter().map(|s| s.ln()));
    let o = g.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    out.push((o / (1.0 - o)).ln());
    out.extend_from_slice(&g.sh);
}

/// Re-activates only the attributes whose raw values moved, so untouched
/// parameters keep their exact input values. Renormalises the quaternion.
fn update_changed(g: &mut Gaussian, raw: &mut [f64], old: &[f64]) {
    for k in 0..3 {
        if raw[k] != old[k] {
            g.position[k] = raw[k];
        }
        if raw[7 + k] != old[7 + k] {
            g.scale[k] = raw[7 + k].exp();
        }
    }
    if raw[3..7] != old[3..7] {
        let q = canonical_quaternion([raw[3], raw[4], raw[5], raw[6]]);
        raw[3..7].copy_from_slice(&q);
        g.rotation = q;
    }
    if raw[10] != old[10] {
        g.opacity = 1.0 / (1.0 + (-raw[10]).exp());
    }
    for (i, v) in g.sh.iter_mut().enumerate() {
        if raw[11 + i] != old[11 + i] {
            *v = raw[11 + i];
        }
    }
}

/// Refines `cloud` against `(camera, target)` pairs, visiting targets round-robin.
pub fn refine_cloud(cloud: &GaussianCloud, targets: &[(Camera, Image)], config: &RefineConfig) -> Result<RefineResult> {
    config.validate()?;
    if targets.is_empty() {
        return Err(Error::invalid("refinement needs at least one target view"));
    }
    for (i, (cam, img)) in targets.iter().enumerate() {
        if img.dims() != (cam.width, cam.height) {
            return Err(Error::invalid(format!(
                "target {i} is {:?} but its camera renders {}x{}",
                img.dims(),
                cam.width,
                cam.height
            )));
        }
    }
    if config.iterations == 0 || cloud.is_empty() {
        return Ok(RefineResult {
            cloud: cloud.clone(),
            log: Vec::new(),
            warning: None,
        });
    }
    let stride = 11 + cloud.sh_len();
    let mut raw = Vec::with_capacity(stride * cloud.len());
    for g in cloud.gaussians() {
        to_raw(g, &mut raw);
    }
    let extent = cloud.bbox().map_or(1.0, |b| b.radius()).max(1e-6);
    let lr = config.lr;
    let rate = move |i: usize| match i % stride {
        0..=2 => lr.position * extent,
        3..=6 => lr.rotation,
        7..=9 => lr.scale,
        10 => lr.opacity,
        11..=13 => lr.sh,
        _ => lr.sh_rest,
    };
    let mut adam = Adam::new(raw.len());
    let mut current = cloud.clone();
    let mut log = Vec::with_capacity(config.iterations);
    let mut grads = vec![0.0; raw.len()];
    let mut warning = None;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for it in 0..config.iterations {
        if it % targets.len() == 0 {
            order.shuffle(&mut rng);
        }
        let view = order[it % targets.len()];
        let decay = config
            .lr_final_factor
            .powf(it as f64 / (config.iterations - 1).max(1) as f64);
        let (cam, target) = &targets[view];
        let mut parts = None;
        let (image, rg) = render_with_backward(&current, cam, config.background, |img| {
            let l = refine_loss(target, img, config.lambda_ssim)?;
            let g = std::mem::take(&mut parts.insert(l).grad);
            Ok(g)
        })?;
        let parts = parts.expect("loss evaluated");
        if !parts.loss.is_finite() || !rg.is_finite() {
            warning = Some(format!("non-finite loss or gradient at iteration {it}; returning the last finite iterate"));
            log::warn!("refinement stopped at iteration {it}: non-finite loss");
            break;
        }
        log.push(RefineLogEntry {
            iteration: it,
            view,
            loss: parts.loss,
            l1: parts.l1,
            ssim_term: parts.ssim_term,
            psnr: psnr(&image, target)?,
        });
        for (k, (g, gg)) in current.gaussians().iter().zip(&rg.gaussians).enumerate() {
            let out = &mut grads[k * stride..(k + 1) * stride];
            out[..3].copy_from_slice(&gg.position);
            out[3..7].copy_from_slice(&gg.rotation);
            for a in 0..3 {
                out[7 + a] = gg.scale[a] * g.scale[a];
            }
            out[10] = gg.opacity * g.opacity * (1.0 - g.opacity);
            out[11..].copy_from_slice(&gg.sh);
        }
        let previous = raw.clone();
        adam.step(&mut raw, &grads, |i| rate(i) * decay);
        if raw.iter().any(|v| !v.is_finite()) {
            warning = Some(format!("non-finite parameters after iteration {it}; returning the last finite iterate"));
            break;
        }
        let mut gaussians = current.into_gaussians();
        for ((g, chunk), old) in gaussians
            .iter_mut()
            .zip(raw.chunks_exact_mut(stride))
            .zip(previous.chunks_exact(stride))
        {
            update_changed(g, chunk, old);
        }
        current = GaussianCloud::new(gaussians, cloud.sh_degree())?;
    }
    Ok(RefineResult {
        cloud: current,
        log,
        warning,
    })
}
