//! Shared fixtures and independent reference implementations for the integration tests.
#![allow(dead_code)]

use gsr_core::render::{eval_sh_color, render_backward, render_view, GaussianGrad};
use gsr_core::scene::{make_orbit_cameras, sh_basis_count, Camera, Gaussian, GaussianCloud, Image};
use nalgebra::{Matrix2, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small random scene in front of an orbit camera.
pub fn random_scene(seed: u64, n: usize, sh_degree: usize, res: usize) -> (GaussianCloud, Camera) {
    let mut r = rng(seed);
    let cam = make_orbit_cameras(8, 3.0, [0.0; 3], (res, res), 55.0).unwrap()[(seed % 8) as usize].clone();
    let gaussians = (0..n)
        .map(|_| {
            let mut sh = vec![0.0; 3 * sh_basis_count(sh_degree)];
            for c in 0..3 {
                sh[c] = r.gen_range(-1.2..1.2);
            }
            for v in sh.iter_mut().skip(3) {
                *v = r.gen_range(-0.15..0.15);
            }
            let q: [f64; 4] = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            Gaussian {
                position: [(); 3].map(|_| r.gen_range(-0.6..0.6)),
                scale: [(); 3].map(|_| r.gen_range(0.04..0.3)),
                rotation: q.map(|v| v / n),
                opacity: r.gen_range(0.2..0.95),
                sh,
            }
        })
        .collect();
    (GaussianCloud::new(gaussians, sh_degree).unwrap(), cam)
}

/// Direct double-precision evaluation of the compositing equations: every
/// Gaussian contributes at every pixel, no alpha cutoff, clamp or early stop.
pub fn brute_force_render(cloud: &GaussianCloud, cam: &Camera, bg: [f64; 3]) -> Image {
    let w_rot = Matrix3::from_fn(|i, j| cam.rotation[i][j]);
    let t = Vector3::from(cam.translation);
    let center = -w_rot.transpose() * t;
    struct P {
        depth: f64,
        idx: usize,
        mean: Vector2<f64>,
        inv: Matrix2<f64>,
        color: [f64; 3],
        opacity: f64,
    }
    let mut ps: Vec<P> = Vec::new();
    for (idx, g) in cloud.gaussians().iter().enumerate() {
        let pw = Vector3::from(g.position);
        let pc = w_rot * pw + t;
        if pc.z <= cam.near {
            continue;
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]));
        let r = q.to_rotation_matrix().into_inner();
        let s2 = Matrix3::from_diagonal(&Vector3::new(g.scale[0].powi(2), g.scale[1].powi(2), g.scale[2].powi(2)));
        let sigma = r * s2 * r.transpose();
        let j = nalgebra::Matrix2x3::new(
            cam.fx / pc.z, 0.0, -cam.fx * pc.x / (pc.z * pc.z),
            0.0, cam.fy / pc.z, -cam.fy * pc.y / (pc.z * pc.z),
        );
        let cov = j * w_rot * sigma * w_rot.transpose() * j.transpose() + Matrix2::identity() * 0.3;
        let dir = (pw - center).normalize();
        ps.push(P {
            depth: pc.z,
            idx,
            mean: Vector2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy),
            inv: cov.try_inverse().unwrap(),
            color: eval_sh_color(&g.sh, [dir.x, dir.y, dir.z], cloud.sh_degree()).unwrap(),
            opacity: g.opacity,
        });
    }
    ps.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.idx.cmp(&b.idx)));
    let mut data = Vec::with_capacity(cam.width * cam.height * 3);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut c = [0.0; 3];
            let mut tr = 1.0;
            for p in &ps {
                let d = Vector2::new(x as f64, y as f64) - p.mean;
                let alpha = p.opacity * (-0.5 * (d.transpose() * p.inv * d)[(0, 0)]).exp();
                for ch in 0..3 {
                    c[ch] += p.color[ch] * alpha * tr;
                }
                tr *= 1.0 - alpha;
            }
            for ch in 0..3 {
                data.push(c[ch] + tr * bg[ch]);
            }
        }
    }
    Image::new(cam.width, cam.height, data).unwrap()
}

pub fn random_image(seed: u64, w: usize, h: usize) -> Image {
    let mut r = rng(seed);
    Image::new(w, h, (0..w * h * 3).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64
}

/// Central-difference agreement: relative 1e-3 or absolute 1e-6.
pub fn fd_agrees(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-6 || diff <= 1e-3 * analytic.abs().max(numeric.abs())
}

/// Mutable access to the `k`-th raw scalar of a Gaussian, in the order
/// position, scale, rotation, opacity, sh.
pub fn param_mut(g: &mut Gaussian, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut g.position[k],
        3..=5 => &mut g.scale[k - 3],
        6..=9 => &mut g.rotation[k - 6],
        10 => &mut g.opacity,
        _ => &mut g.sh[k - 11],
    }
}

pub fn param_count(cloud: &GaussianCloud) -> usize {
    11 + cloud.sh_len()
}

pub fn with_param(cloud: &GaussianCloud, i: usize, k: usize, delta: f64) -> GaussianCloud {
    let mut gs = cloud.gaussians().to_vec();
    *param_mut(&mut gs[i], k) += delta;
    GaussianCloud::new(gs, cloud.sh_degree()).unwrap()
}

pub fn flat(g: &GaussianGrad, k: usize) -> f64 {
    match k {
        0..=2 => g.position[k],
        3..=5 => g.scale[k - 3],
        6..=9 => g.rotation[k - 6],
        10 => g.opacity,
        _ => g.sh[k - 11],
    }
}

/// Background used by the render gradient check.
pub const FD_BG: [f64; 3] = [0.1, 0.2, 0.3];

/// Returns (passed, total) central-difference checks over random scenes.
pub fn render_gradient_check(seeds: std::ops::Range<u64>) -> (usize, usize) {
    let (mut pass, mut total) = (0, 0);
    for seed in seeds {
        let (cloud, cam) = random_scene(100 + seed, 5, (seed % 3) as usize, 24);
        let target = random_image(seed, 24, 24);
        let loss = |c: &GaussianCloud| mse(&render_view(c, &cam, FD_BG), &target);
        let img = render_view(&cloud, &cam, FD_BG);
        let n = img.data().len() as f64;
        let d: Vec<f64> = img.data().iter().zip(target.data()).map(|(a, b)| 2.0 * (a - b) / n).collect();
        let grads = render_backward(&cloud, &cam, FD_BG, &d).unwrap();
        let h = 1e-4;
        for i in 0..cloud.len() {
            for k in 0..param_count(&cloud) {
                let fd = (loss(&with_param(&cloud, i, k, h)) - loss(&with_param(&cloud, i, k, -h))) / (2.0 * h);
                let an = flat(&grads.gaussians[i], k);
                total += 1;
                if fd_agrees(an, fd) {
                    pass += 1;
                }
            }
        }
    }
    (pass, total)
}
