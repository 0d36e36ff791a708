mod common;

use common::*;
use gsr_core::render::{
    build_covariance, project_gaussian, render_backward, render_view, render_view_debug, sh_basis,
    GaussianGrad,
};
use gsr_core::scene::{make_orbit_cameras, synth_cloud, Gaussian, GaussianCloud, Image};
use rand::seq::SliceRandom;
use rand::Rng;

const BG: [f64; 3] = [0.1, 0.2, 0.3];

#[test]
fn empty_cloud_renders_background() {
    let cam = make_orbit_cameras(1, 3.0, [0.0; 3], (16, 12), 50.0).unwrap().remove(0);
    let img = render_view(&GaussianCloud::empty(0), &cam, BG);
    assert_eq!(img, Image::filled(16, 12, BG));
}

#[test]
fn single_gaussian_center_pixel_blends_opacity() {
    let cam = make_orbit_cameras(1, 3.0, [0.0; 3], (32, 32), 50.0).unwrap().remove(0);
    let color = [0.9, 0.4, 0.1];
    let sh = color.map(|c| (c - 0.5) / gsr_core::render::SH_C0).to_vec();
    let g = Gaussian {
        position: [0.0; 3],
        scale: [0.05; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity: 0.8,
        sh,
    };
    let cloud = GaussianCloud::new(vec![g], 0).unwrap();
    let img = render_view(&cloud, &cam, BG);
    let px = img.pixel(16, 16);
    for ch in 0..3 {
        let want = 0.8 * color[ch] + 0.2 * BG[ch];
        assert!((px[ch] - want).abs() < 1e-9, "{px:?}");
    }
}

#[test]
fn matches_brute_force_evaluator() {
    let mut worst: f64 = 0.0;
    for seed in 0..25 {
        let (cloud, cam) = random_scene(seed, 5, (seed % 3) as usize, 32);
        let fast = render_view(&cloud, &cam, BG);
        let slow = brute_force_render(&cloud, &cam, BG);
        let err = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        assert!(err <= 2.0 / 255.0, "seed {seed}: {err}");
    }
    println!("worst pixel error {worst:.3e}");
}

#[test]
fn blend_weights_conserve() {
    for seed in 0..10 {
        let cloud = synth_cloud(seed, 400, 1.0, 1).unwrap();
        for cam in make_orbit_cameras(3, 2.5, [0.0; 3], (48, 40), 60.0).unwrap() {
            let dbg = render_view_debug(&cloud, &cam, BG);
            assert!(dbg.conservation_error() <= 1e-6);
            assert!(dbg.weight_sum.iter().all(|w| *w >= 0.0));
            assert_eq!(dbg.image, render_view(&cloud, &cam, BG));
        }
    }
}

#[test]
fn render_is_order_invariant_and_deterministic() {
    let cloud = synth_cloud(11, 300, 1.0, 2).unwrap();
    let cam = make_orbit_cameras(5, 2.5, [0.0; 3], (40, 40), 60.0).unwrap().remove(2);
    let base = render_view(&cloud, &cam, BG);
    assert_eq!(base, render_view(&cloud, &cam, BG));
    let mut r = rng(3);
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.shuffle(&mut r);
        let shuffled = cloud.permuted(&order).unwrap();
        assert_eq!(render_view(&shuffled, &cam, BG), base);
    }
}

#[test]
fn covariance_eigenvalues_are_squared_scales() {
    let mut r = rng(5);
    for _ in 0..50 {
        let s: [f64; 3] = [(); 3].map(|_| r.gen_range(0.1..2.0));
        let q: [f64; 4] = [(); 4].map(|_| r.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sigma = build_covariance(s, q.map(|v| v / n));
        let m = nalgebra::Matrix3::from_fn(|i, j| sigma[i][j]);
        assert!((m - m.transpose()).abs().max() < 1e-14);
        let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
        want.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{eig:?} vs {want:?}");
        }
    }
}

#[test]
fn screen_covariance_matches_numeric_jacobian() {
    let mut r = rng(9);
    for seed in 0..20 {
        let (cloud, cam) = random_scene(seed, 1, 0, 32);
        let g = &cloud.gaussians()[0];
        let Some(p) = project_gaussian(g, 0, &cam, 0) else { continue };
        // Numeric Jacobian of the pixel projection at the mean.
        let h = 1e-6 * (1.0 + r.gen_range(0.0..0.1));
        let mut jac = [[0.0; 3]; 2];
        for k in 0..3 {
            let mut a = g.position;
            let mut b = g.position;
            a[k] += h;
            b[k] -= h;
            let (pa, pb) = (cam.project(a).unwrap(), cam.project(b).unwrap());
            for i in 0..2 {
                jac[i][k] = (pa[i] - pb[i]) / (2.0 * h);
            }
        }
        let sigma = build_covariance(g.scale, g.rotation);
        let mut cov = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] = (0..3)
                    .flat_map(|a| (0..3).map(move |b| (a, b)))
                    .map(|(a, b)| jac[i][a] * sigma[a][b] * jac[j][b])
                    .sum::<f64>();
            }
        }
        let got = [p.cov2d[0] - 0.3, p.cov2d[1], p.cov2d[2] - 0.3];
        let want = [cov[0][0], cov[0][1], cov[1][1]];
        let scale = want[0].abs().max(want[2].abs());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-3 * scale, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn zero_image_gradient_gives_zero_gradients() {
    let (cloud, cam) = random_scene(1, 5, 1, 24);
    let g = render_backward(&cloud, &cam, BG, &vec![0.0; 24 * 24 * 3]).unwrap();
    let zero = GaussianGrad::zeros(cloud.sh_len());
    assert!(g.gaussians.iter().all(|x| *x == zero));
    assert!(render_backward(&cloud, &cam, BG, &[0.0; 5]).is_err());
}

#[test]
fn occluded_gaussian_gets_no_gradient() {
    let cam = make_orbit_cameras(1, 3.0, [0.0; 3], (24, 24), 50.0).unwrap().remove(0);
    let blocker = Gaussian {
        position: [0.5, 0.0, 0.0],
        scale: [0.01, 20.0, 20.0],
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity: 1.0,
        sh: vec![0.2, 0.2, 0.2],
    };
    let hidden = Gaussian {
        position: [-0.2, 0.0, 0.0],
        scale: [0.05; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity: 0.9,
        sh: vec![1.0, -1.0, 0.5],
    };
    let d = vec![1.0; 24 * 24 * 3];
    let mag = |g: &GaussianGrad| {
        g.position
            .iter()
            .chain(&g.scale)
            .chain(&g.rotation)
            .chain(std::iter::once(&g.opacity))
            .chain(&g.sh)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let alone = GaussianCloud::new(vec![hidden.clone()], 0).unwrap();
    let visible = mag(&render_backward(&alone, &cam, BG, &d).unwrap().gaussians[0]);
    let cloud = GaussianCloud::new(vec![blocker, hidden], 0).unwrap();
    let occluded = mag(&render_backward(&cloud, &cam, BG, &d).unwrap().gaussians[1]);
    // Transmittance behind the blocker is 1 - 0.999.
    assert!(occluded <= 1.5e-3 * visible, "{occluded} vs {visible}");
}

#[test]
fn gradients_match_finite_differences() {
    let (pass, total) = render_gradient_check(0..6);
    println!("render gradient check: {pass}/{total}");
    assert!(total >= 100);
    assert!(pass as f64 >= 0.95 * total as f64, "{pass}/{total}");
}

#[test]
fn sh_basis_matches_legendre_oracle() {
    let mut r = rng(21);
    for _ in 0..20 {
        let v: [f64; 3] = [(); 3].map(|_| r.gen_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d = v.map(|x| x / n);
        let got = sh_basis(d, 3);
        let theta = d[2].clamp(-1.0, 1.0).acos();
        let phi = d[1].atan2(d[0]);
        let mut b = 0;
        for l in 0..=3i32 {
            for m in -l..=l {
                let want = real_sh(l, m, theta, phi);
                assert!((got[b] - want).abs() < 1e-12, "l={l} m={m}: {} vs {want}", got[b]);
                b += 1;
            }
        }
    }
    assert!((sh_basis([0.0, 0.0, 1.0], 0)[0] - 0.2820948).abs() < 1e-7);
}

#[test]
fn sh_colour_matches_oracle_for_degree_two() {
    let mut r = rng(33);
    let k: Vec<f64> = (0..27).map(|_| r.gen_range(-0.3..0.3)).collect();
    let c = gsr_core::render::eval_sh_color(&k, [0.0, 0.0, 1.0], 2).unwrap();
    let mut want = [0.5; 3];
    let mut b = 0;
    for l in 0..=2i32 {
        for m in -l..=l {
            let y = real_sh(l, m, 0.0, 0.0);
            for ch in 0..3 {
                want[ch] += k[3 * b + ch] * y;
            }
            b += 1;
        }
    }
    for ch in 0..3 {
        assert!((c[ch] - want[ch].max(0.0)).abs() < 1e-12);
    }
}

/// Associated Legendre polynomial with the Condon-Shortley phase.
fn legendre(l: i32, m: i32, x: f64) -> f64 {
    let mut pmm = 1.0;
    let s = (1.0 - x * x).sqrt();
    for i in 1..=m {
        pmm *= -(2 * i - 1) as f64 * s;
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut pl = 0.0;
    for ll in m + 2..=l {
        pl = ((2 * ll - 1) as f64 * x * pm1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pm1;
        pm1 = pl;
    }
    pl
}

fn factorial(n: i32) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

fn real_sh(l: i32, m: i32, theta: f64, phi: f64) -> f64 {
    let am = m.abs();
    let norm = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(l - am) / factorial(l + am)).sqrt();
    let p = legendre(l, am, theta.cos());
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => norm * p,
        std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * norm * p * (am as f64 * phi).cos(),
        std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * norm * p * (am as f64 * phi).sin(),
    }
}
