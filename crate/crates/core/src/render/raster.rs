//! Front-to-back alpha compositing over a global depth order, and its adjoint.

use super::project::{project_backward, project_gaussian, GaussianGrad, ProjectedGaussian, ScreenGrad};
use super::{ALPHA_MAX, ALPHA_MIN, TRANSMITTANCE_MIN};
use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianCloud, Image};

/// A projected Gaussian with its pixel footprint (inclusive ranges).
struct Splat {
    p: ProjectedGaussian,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Projects, culls and depth-sorts (ties by source index).
fn prepare(cloud: &GaussianCloud, cam: &Camera) -> Vec<Splat> {
    let mut splats: Vec<Splat> = cloud
        .gaussians()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let p = project_gaussian(g, i, cam, cloud.sh_degree())?;
            footprint(&p, cam)
        })
        .collect();
    splats.sort_by(|a, b| {
        a.p.depth
            .total_cmp(&b.p.depth)
            .then(a.p.source_index.cmp(&b.p.source_index))
    });
    splats
}

/// Pixel box outside of which `alpha < ALPHA_MIN` is guaranteed.
fn footprint(p: &ProjectedGaussian, cam: &Camera) -> Option<Splat> {
    let level = 255.0 * p.opacity.min(ALPHA_MAX);
    if !(level >= 1.0) {
        return None;
    }
    // alpha >= 1/255 needs d^T conic d <= 2 ln(255 o); the ellipse's extents follow from the covariance.
    let r2 = 2.0 * level.ln() * (1.0 + 1e-9) + 1e-12;
    let ex = (r2 * p.cov2d[0]).sqrt();
    let ey = (r2 * p.cov2d[2]).sqrt();
    let (w, h) = (cam.width as f64, cam.height as f64);
    let lo_x = (p.mean2d[0] - ex).ceil().max(0.0);
    let hi_x = (p.mean2d[0] + ex).floor().min(w - 1.0);
    let lo_y = (p.mean2d[1] - ey).ceil().max(0.0);
    let hi_y = (p.mean2d[1] + ey).floor().min(h - 1.0);
    if !(lo_x <= hi_x && lo_y <= hi_y) {
        return None;
    }
    Some(Splat {
        p: p.clone(),
        x0: lo_x as usize,
        x1: hi_x as usize,
        y0: lo_y as usize,
        y1: hi_y as usize,
    })
}

/// Per-pixel alpha and its pieces. `None` when the contribution is skipped.
#[inline]
fn alpha_at(p: &ProjectedGaussian, px: f64, py: f64) -> Option<Alpha> {
    let dx = px - p.mean2d[0];
    let dy = py - p.mean2d[1];
    let power = -0.5 * (p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy);
    let gauss = power.exp();
    let raw = p.opacity * gauss;
    let alpha = raw.min(ALPHA_MAX);
    (alpha >= ALPHA_MIN).then_some(Alpha {
        alpha,
        gauss,
        dx,
        dy,
        clamped: raw > ALPHA_MAX,
    })
}

struct Alpha {
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

/// Forward pass state kept for the backward pass and debug output.
pub struct ForwardState {
    /// Unclamped composite colour per pixel.
    pub raw_color: Vec<f64>,
    pub transmittance: Vec<f64>,
    /// Sum of blending weights `alpha_i T_i` per pixel.
    pub weight_sum: Vec<f64>,
    /// One past the depth-order position of the last contributing splat.
    n_contrib: Vec<usize>,
    splats: Vec<Splat>,
}

fn forward(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> ForwardState {
    let (w, h) = (cam.width, cam.height);
    let n = w * h;
    let splats = prepare(cloud, cam);
    let mut color = vec![0.0; n * 3];
    let mut trans = vec![1.0; n];
    let mut weight_sum = vec![0.0; n];
    let mut n_contrib = vec![0usize; n];
    let mut done = vec![false; n];
    for (order, s) in splats.iter().enumerate() {
        for y in s.y0..=s.y1 {
            for x in s.x0..=s.x1 {
                let pix = y * w + x;
                if done[pix] {
                    continue;
                }
                let Some(a) = alpha_at(&s.p, x as f64, y as f64) else {
                    continue;
                };
                let t = trans[pix];
                let next = t * (1.0 - a.alpha);
                if next < TRANSMITTANCE_MIN {
                    done[pix] = true;
                    continue;
                }
                let weight = a.alpha * t;
                for ch in 0..3 {
                    color[pix * 3 + ch] += s.p.color[ch] * weight;
                }
                weight_sum[pix] += weight;
                trans[pix] = next;
                n_contrib[pix] = order + 1;
            }
        }
    }
    for pix in 0..n {
        for ch in 0..3 {
            color[pix * 3 + ch] += trans[pix] * background[ch];
        }
    }
    ForwardState {
        raw_color: color,
        transmittance: trans,
        weight_sum,
        n_contrib,
        splats,
    }
}

/// Renders `cloud` from `cam` over a constant background.
pub fn render_view(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> Image {
    let state = forward(cloud, cam, background);
    Image::new(cam.width, cam.height, state.raw_color).expect("buffer sized from camera")
}

/// Render output with per-pixel compositing diagnostics.
pub struct RenderDebug {
    pub image: Image,
    pub transmittance: Vec<f64>,
    pub weight_sum: Vec<f64>,
}

impl RenderDebug {
    /// Final transmittance as a grey image.
    pub fn transmittance_image(&self) -> Image {
        let data = self.transmittance.iter().flat_map(|&t| [t; 3]).collect();
        Image::new(self.image.width(), self.image.height(), data).expect("same dims")
    }

    /// Largest `|sum of weights + transmittance - 1|` over all pixels.
    pub fn conservation_error(&self) -> f64 {
        self.weight_sum
            .iter()
            .zip(&self.transmittance)
            .map(|(w, t)| (w + t - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn render_view_debug(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> RenderDebug {
    let state = forward(cloud, cam, background);
    RenderDebug {
        image: Image::new(cam.width, cam.height, state.raw_color).expect("buffer sized from camera"),
        transmittance: state.transmittance,
        weight_sum: state.weight_sum,
    }
}

/// Per-Gaussian loss gradients, indexed like the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub gaussians: Vec<GaussianGrad>,
}

impl RenderGradients {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        RenderGradients {
            gaussians: vec![GaussianGrad::zeros(cloud.sh_len()); cloud.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gaussians.iter().all(GaussianGrad::is_finite)
    }

    /// Adds `other` element-wise.
    pub fn accumulate(&mut self, other: &RenderGradients) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            a.add_assign(b);
        }
    }
}

/// Renders and returns the image together with the gradient of a pixel loss.
///
/// `loss_grad` receives the rendered image and must return `dL/dI` with one
/// value per image component.
pub fn render_with_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    loss_grad: impl FnOnce(&Image) -> Result<Vec<f64>>,
) -> Result<(Image, RenderGradients)> {
    let state = forward(cloud, cam, background);
    let image = Image::new(cam.width, cam.height, state.raw_color.clone()).expect("sized");
    let grad = loss_grad(&image)?;
    let grads = backward(cloud, cam, background, &state, &grad)?;
    Ok((image, grads))
}

/// Gradient of `L` with respect to every Gaussian attribute given `dL/dI`.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    d_image: &[f64],
) -> Result<RenderGradients> {
    let state = forward(cloud, cam, background);
    backward(cloud, cam, background, &state, d_image)
}

fn backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    state: &ForwardState,
    d_image: &[f64],
) -> Result<RenderGradients> {
    let (w, h) = (cam.width, cam.height);
    let n = w * h;
    if d_image.len() != n * 3 {
        return Err(Error::invalid(format!(
            "image gradient has {} values, expected {}",
            d_image.len(),
            n * 3
        )));
    }
    // Output clamp to [0, 1]: no gradient through saturated channels.
    let d_pix: Vec<f64> = d_image
        .iter()
        .zip(&state.raw_color)
        .map(|(g, c)| if (0.0..=1.0).contains(c) { *g } else { 0.0 })
        .collect();

    let mut trans = state.transmittance.clone();
    let mut accum = vec![0.0; n * 3];
    let mut last_alpha = vec![0.0; n];
    let mut last_color = vec![0.0; n * 3];
    let mut screen = vec![ScreenGrad::default(); state.splats.len()];

    for order in (0..state.splats.len()).rev() {
        let s = &state.splats[order];
        let sg = &mut screen[order];
        for y in s.y0..=s.y1 {
            for x in s.x0..=s.x1 {
                let pix = y * w + x;
                if order >= state.n_contrib[pix] {
                    continue;
                }
                let Some(a) = alpha_at(&s.p, x as f64, y as f64) else {
                    continue;
                };
                let t = trans[pix] / (1.0 - a.alpha);
                trans[pix] = t;
                let dp = &d_pix[pix * 3..pix * 3 + 3];
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    let acc = last_alpha[pix] * last_color[pix * 3 + ch]
                        + (1.0 - last_alpha[pix]) * accum[pix * 3 + ch];
                    accum[pix * 3 + ch] = acc;
                    last_color[pix * 3 + ch] = s.p.color[ch];
                    d_alpha += (s.p.color[ch] - acc) * dp[ch];
                    sg.color[ch] += a.alpha * t * dp[ch];
                }
                last_alpha[pix] = a.alpha;
                d_alpha *= t;
                let bg_dot: f64 = (0..3).map(|ch| background[ch] * dp[ch]).sum();
                d_alpha -= state.transmittance[pix] / (1.0 - a.alpha) * bg_dot;
                if a.clamped {
                    continue;
                }
                sg.opacity += a.gauss * d_alpha;
                let d_power = a.alpha * d_alpha;
                let (cn, dx, dy) = (&s.p.conic, a.dx, a.dy);
                // power = -(a dx^2 + 2 b dx dy + c dy^2)/2 with d = pixel - mean.
                sg.mean2d[0] += d_power * (cn[0] * dx + cn[1] * dy);
                sg.mean2d[1] += d_power * (cn[1] * dx + cn[2] * dy);
                sg.conic[0] += -0.5 * dx * dx * d_power;
                sg.conic[1] += -dx * dy * d_power;
                sg.conic[2] += -0.5 * dy * dy * d_power;
            }
        }
    }

    let mut grads = RenderGradients::zeros(cloud);
    for (s, sg) in state.splats.iter().zip(&screen) {
        let i = s.p.source_index;
        project_backward(
            &cloud.gaussians()[i],
            cam,
            cloud.sh_degree(),
            sg,
            &mut grads.gaussians[i],
        );
    }
    Ok(grads)
}
