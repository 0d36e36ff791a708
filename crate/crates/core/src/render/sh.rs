//! Real spherical harmonics up to degree 3 (with the Condon-Shortley phase,
//! matching the usual 3DGS coefficient convention).

use crate::error::{Error, Result};
use crate::scene::sh_basis_count;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values `Y_b(dir)` for `b < (degree+1)^2`.
pub fn sh_basis(dir: [f64; 3], degree: usize) -> [f64; 16] {
    let [x, y, z] = dir;
    let mut out = [0.0; 16];
    out[0] = SH_C0;
    if degree >= 1 {
        out[1] = -SH_C1 * y;
        out[2] = SH_C1 * z;
        out[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = SH_C2[0] * x * y;
        out[5] = SH_C2[1] * y * z;
        out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        out[7] = SH_C2[3] * x * z;
        out[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            out[9] = SH_C3[0] * y * (3.0 * xx - yy);
            out[10] = SH_C3[1] * x * y * z;
            out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            out[14] = SH_C3[5] * z * (xx - yy);
            out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    out
}

/// Partial derivatives of each basis polynomial with respect to `(x, y, z)`,
/// treating the components as independent.
pub fn sh_basis_grad(dir: [f64; 3], degree: usize) -> [[f64; 3]; 16] {
    let [x, y, z] = dir;
    let mut g = [[0.0; 3]; 16];
    if degree >= 1 {
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        g[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
        if degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            g[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * 3.0 * (xx - yy), 0.0];
            g[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
            g[11] = [
                SH_C3[2] * -2.0 * x * y,
                SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
                SH_C3[2] * 8.0 * y * z,
            ];
            g[12] = [
                SH_C3[3] * -6.0 * x * z,
                SH_C3[3] * -6.0 * y * z,
                SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
                SH_C3[4] * -2.0 * x * y,
                SH_C3[4] * 8.0 * x * z,
            ];
            g[14] = [SH_C3[5] * 2.0 * x * z, SH_C3[5] * -2.0 * y * z, SH_C3[5] * (xx - yy)];
            g[15] = [SH_C3[6] * 3.0 * (xx - yy), SH_C3[6] * -6.0 * x * y, 0.0];
        }
    }
    g
}

/// Colour before the non-negativity clamp: `0.5 + sum_b k_b Y_b(dir)` per channel.
pub(crate) fn sh_color_raw(k: &[f64], dir: [f64; 3], degree: usize) -> [f64; 3] {
    let basis = sh_basis(dir, degree);
    let mut c = [0.5; 3];
    for (b, y) in basis.iter().enumerate().take(sh_basis_count(degree)) {
        for ch in 0..3 {
            c[ch] += k[3 * b + ch] * y;
        }
    }
    c
}

/// View-dependent RGB colour `max(0, 0.5 + sum k_lm Y_lm(dir))`.
pub fn eval_sh_color(k: &[f64], dir: [f64; 3], degree: usize) -> Result<[f64; 3]> {
    if degree > 3 {
        return Err(Error::invalid(format!("sh degree {degree} > 3")));
    }
    let expected = 3 * sh_basis_count(degree);
    if k.len() != expected {
        return Err(Error::invalid(format!(
            "{} sh coefficients for degree {degree}, expected {expected}",
            k.len()
        )));
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(Error::invalid(format!("direction norm {norm} is not 1")));
    }
    Ok(sh_color_raw(k, dir, degree).map(|v| v.max(0.0)))
}
