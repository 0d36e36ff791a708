//! Windowed SSIM with an 11x11 Gaussian window (sigma 1.5) and reflection
//! padding, plus its gradient with respect to the second image.

use crate::error::{Error, Result};
use crate::scene::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;
const HALF: isize = (WINDOW / 2) as isize;

fn kernel() -> &'static [f64; WINDOW] {
    static K: std::sync::OnceLock<[f64; WINDOW]> = std::sync::OnceLock::new();
    K.get_or_init(|| {
        let mut k = [0.0; WINDOW];
        for (i, v) in k.iter_mut().enumerate() {
            let d = i as f64 - HALF as f64;
            *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        }
        let s: f64 = k.iter().sum();
        k.map(|v| v / s)
    })
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1);
    if period == 0 {
        return 0;
    }
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur of a single-channel `w x h` plane.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = kernel();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * row[reflect(x as isize + j as isize - HALF, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (j, kv) in k.iter().enumerate() {
            let sy = reflect(y as isize + j as isize - HALF, h);
            let src_row = &tmp[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Adjoint of [`blur`].
fn blur_adjoint(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = kernel();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for (j, kv) in k.iter().enumerate() {
            let sy = reflect(y as isize + j as isize - HALF, h);
            let src_row = &src[y * w..(y + 1) * w];
            let dst = &mut tmp[sy * w..(sy + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = tmp[y * w + x];
            for (j, kv) in k.iter().enumerate() {
                out[y * w + reflect(x as isize + j as isize - HALF, w)] += kv * v;
            }
        }
    }
    out
}

fn check(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "image dimensions differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (w, h) = a.dims();
    if w < WINDOW || h < WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {WINDOW}x{WINDOW}, got {w}x{h}"
        )));
    }
    Ok(())
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_impl(a, b, false).map(|(v, _)| v)
}

/// Mean SSIM and its gradient with respect to `b`, interleaved like `b.data()`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    ssim_impl(a, b, true)
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    check(a, b)?;
    let (w, h) = a.dims();
    let n = w * h;
    let norm = 1.0 / (3 * n) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; 3 * n] } else { Vec::new() };
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let mx = blur(&x, w, h);
        let my = blur(&y, w, h);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let bxx = blur(&xx, w, h);
        let byy = blur(&yy, w, h);
        let bxy = blur(&xy, w, h);
        let (mut d_a, mut d_b, mut d_c) = if want_grad {
            (vec![0.0; n], vec![0.0; n], vec![0.0; n])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        for i in 0..n {
            let sxx = bxx[i] - mx[i] * mx[i];
            let syy = byy[i] - my[i] * my[i];
            let sxy = bxy[i] - mx[i] * my[i];
            let n1 = 2.0 * mx[i] * my[i] + C1;
            let n2 = 2.0 * sxy + C2;
            let d1 = mx[i] * mx[i] + my[i] * my[i] + C1;
            let d2 = sxx + syy + C2;
            let f = n1 * n2 / (d1 * d2);
            total += f;
            if want_grad {
                let df_dmy = f * (2.0 * mx[i] / n1 - 2.0 * my[i] / d1);
                let df_dsyy = -f / d2;
                let df_dsxy = 2.0 * f / n2;
                d_a[i] = norm * (df_dmy - 2.0 * my[i] * df_dsyy - mx[i] * df_dsxy);
                d_b[i] = norm * df_dsyy;
                d_c[i] = norm * df_dsxy;
            }
        }
        if want_grad {
            d_a = blur_adjoint(&d_a, w, h);
            d_b = blur_adjoint(&d_b, w, h);
            d_c = blur_adjoint(&d_c, w, h);
            for i in 0..n {
                grad[3 * i + c] = d_a[i] + 2.0 * y[i] * d_b[i] + x[i] * d_c[i];
            }
        }
    }
    Ok((total * norm, grad))
}
