//! Gaussian to screen-space projection and its adjoint.

use super::sh::{sh_basis, sh_basis_grad, sh_color_raw};
use super::DILATION;
use crate::scene::{sh_basis_count, Camera, Gaussian};

pub type Mat3 = [[f64; 3]; 3];
type Mat2x3 = [[f64; 3]; 2];

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose3(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn mul_2x3_3x3(a: &Mat2x3, b: &Mat3) -> Mat2x3 {
    let mut out = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `a b a^T` for a 2x3 `a` and symmetric 3x3 `b`.
fn sandwich(a: &Mat2x3, b: &Mat3) -> [[f64; 2]; 2] {
    let ab = mul_2x3_3x3(a, b);
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = (0..3).map(|k| ab[i][k] * a[j][k]).sum();
        }
    }
    out
}

/// Rotation matrix of the quaternion `(w, x, y, z)` after normalisation.
pub fn quat_to_rotation(q: [f64; 4]) -> Mat3 {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// World-space covariance `R diag(s^2) R^T`.
pub fn build_covariance(scale: [f64; 3], rotation: [f64; 4]) -> Mat3 {
    let r = quat_to_rotation(rotation);
    let mut m = r;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= scale[j];
        }
    }
    mat3_mul(&m, &transpose3(&m))
}

/// A Gaussian after projection into one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel-space mean.
    pub mean2d: [f64; 2],
    /// Dilated screen covariance `(xx, xy, yy)`.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, `(a, b, c)` so that the exponent is `-(a dx^2 + 2 b dx dy + c dy^2) / 2`.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Clamped view-dependent colour.
    pub color: [f64; 3],
    pub opacity: f64,
    pub source_index: usize,
}

fn jacobian(cam: &Camera, t: [f64; 3]) -> Mat2x3 {
    let [x, y, z] = t;
    [
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ]
}

/// Unit vector from the camera centre to `p`, and the distance.
fn view_dir(cam: &Camera, p: [f64; 3]) -> ([f64; 3], f64) {
    let c = cam.center();
    let v = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (v.map(|x| x / len), len)
}

/// Projects `g` into `cam`. Returns `None` when the mean is not beyond the near plane.
pub fn project_gaussian(
    g: &Gaussian,
    source_index: usize,
    cam: &Camera,
    sh_degree: usize,
) -> Option<ProjectedGaussian> {
    let t = cam.to_camera(g.position);
    if !(t[2] > cam.near) {
        return None;
    }
    let mean2d = [
        cam.fx * t[0] / t[2] + cam.cx,
        cam.fy * t[1] / t[2] + cam.cy,
    ];
    let sigma = build_covariance(g.scale, g.rotation);
    let tw = mul_2x3_3x3(&jacobian(cam, t), &cam.rotation);
    let s2 = sandwich(&tw, &sigma);
    let cov2d = [s2[0][0] + DILATION, s2[0][1], s2[1][1] + DILATION];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    let (dir, _) = view_dir(cam, g.position);
    let color = sh_color_raw(&g.sh, dir, sh_degree).map(|v| v.max(0.0));
    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        conic,
        depth: t[2],
        color,
        opacity: g.opacity,
        source_index,
    })
}

/// Loss gradients with respect to one projected Gaussian's screen-space quantities.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct ScreenGrad {
    pub mean2d: [f64; 2],
    /// With respect to the conic scalars `(a, b, c)`.
    pub conic: [f64; 3],
    pub opacity: f64,
    /// With respect to the clamped colour.
    pub color: [f64; 3],
}

/// Gradient of the loss with respect to one Gaussian's stored attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub sh: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros(sh_len: usize) -> Self {
        GaussianGrad {
            position: [0.0; 3],
            scale: [0.0; 3],
            rotation: [0.0; 4],
            opacity: 0.0,
            sh: vec![0.0; sh_len],
        }
    }

    pub(crate) fn add_assign(&mut self, other: &GaussianGrad) {
        for k in 0..3 {
            self.position[k] += other.position[k];
            self.scale[k] += other.scale[k];
        }
        for k in 0..4 {
            self.rotation[k] += other.rotation[k];
        }
        self.opacity += other.opacity;
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(&self.scale)
            .chain(&self.rotation)
            .chain(std::iter::once(&self.opacity))
            .chain(&self.sh)
            .all(|v| v.is_finite())
    }
}

/// Chains screen-space gradients back to the Gaussian attributes, accumulating into `out`.
pub(crate) fn project_backward(
    g: &Gaussian,
    cam: &Camera,
    sh_degree: usize,
    sg: &ScreenGrad,
    out: &mut GaussianGrad,
) {
    let t = cam.to_camera(g.position);
    let (fx, fy) = (cam.fx, cam.fy);
    let [x, y, z] = t;
    let w = &cam.rotation;

    // Recompute the forward intermediates.
    let qn = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = g.rotation.map(|v| v / qn);
    let r = quat_to_rotation(g.rotation);
    let mut m = r;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= g.scale[j];
        }
    }
    let sigma = mat3_mul(&m, &transpose3(&m));
    let jac = jacobian(cam, t);
    let tw = mul_2x3_3x3(&jac, w);
    let s2 = sandwich(&tw, &sigma);
    let cov = [s2[0][0] + DILATION, s2[0][1], s2[1][1] + DILATION];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    let k = [[cov[2] / det, -cov[1] / det], [-cov[1] / det, cov[0] / det]];

    // Conic -> dilated covariance: dL/dS' = -K G K, G the symmetric conic gradient.
    let gk = [
        [sg.conic[0], 0.5 * sg.conic[1]],
        [0.5 * sg.conic[1], sg.conic[2]],
    ];
    let mut g2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    acc += k[i][a] * gk[a][b] * k[b][j];
                }
            }
            g2[i][j] = -acc;
        }
    }

    // S' = T Sigma T^T: dL/dT = 2 G2 T Sigma, dL/dSigma = T^T G2 T.
    let t_sigma = mul_2x3_3x3(&tw, &sigma);
    let mut d_tw = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            d_tw[i][j] = 2.0 * (0..2).map(|a| g2[i][a] * t_sigma[a][j]).sum::<f64>();
        }
    }
    let mut d_sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    acc += tw[a][i] * g2[a][b] * tw[b][j];
                }
            }
            d_sigma[i][j] = acc;
        }
    }

    // T = J W: dL/dJ = dL/dT W^T.
    let mut d_j = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            d_j[i][j] = (0..3).map(|a| d_tw[i][a] * w[j][a]).sum();
        }
    }

    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_t = [0.0; 3];
    d_t[0] += fx / z * sg.mean2d[0];
    d_t[1] += fy / z * sg.mean2d[1];
    d_t[2] += -fx * x / z2 * sg.mean2d[0] - fy * y / z2 * sg.mean2d[1];
    d_t[0] += d_j[0][2] * (-fx / z2);
    d_t[1] += d_j[1][2] * (-fy / z2);
    d_t[2] += d_j[0][0] * (-fx / z2)
        + d_j[0][2] * (2.0 * fx * x / z3)
        + d_j[1][1] * (-fy / z2)
        + d_j[1][2] * (2.0 * fy * y / z3);
    for j in 0..3 {
        out.position[j] += (0..3).map(|i| w[i][j] * d_t[i]).sum::<f64>();
    }

    // Sigma = M M^T with M = R diag(s).
    let mut d_m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d_m[i][j] = (0..3)
                .map(|a| (d_sigma[i][a] + d_sigma[a][i]) * m[a][j])
                .sum();
        }
    }
    let mut d_r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d_r[i][j] = d_m[i][j] * g.scale[j];
            out.scale[j] += d_m[i][j] * r[i][j];
        }
    }
    let [qw, qx, qy, qz] = q;
    let dq = [
        // d/dw
        2.0 * (-qz * d_r[0][1] + qy * d_r[0][2] + qz * d_r[1][0] - qx * d_r[1][2]
            - qy * d_r[2][0]
            + qx * d_r[2][1]),
        // d/dx
        2.0 * (qy * d_r[0][1] + qz * d_r[0][2] + qy * d_r[1][0] - qw * d_r[1][2]
            + qz * d_r[2][0]
            + qw * d_r[2][1])
            - 4.0 * qx * (d_r[1][1] + d_r[2][2]),
        // d/dy
        2.0 * (qx * d_r[0][1] + qw * d_r[0][2] + qx * d_r[1][0] + qz * d_r[1][2]
            - qw * d_r[2][0]
            + qz * d_r[2][1])
            - 4.0 * qy * (d_r[0][0] + d_r[2][2]),
        // d/dz
        2.0 * (-qw * d_r[0][1] + qx * d_r[0][2] + qw * d_r[1][0] + qy * d_r[1][2]
            + qx * d_r[2][0]
            + qy * d_r[2][1])
            - 4.0 * qz * (d_r[0][0] + d_r[1][1]),
    ];
    let dot: f64 = (0..4).map(|i| q[i] * dq[i]).sum();
    for i in 0..4 {
        out.rotation[i] += (dq[i] - q[i] * dot) / qn;
    }

    out.opacity += sg.opacity;

    // Colour: zero gradient through channels clamped at 0.
    let (dir, dist) = view_dir(cam, g.position);
    let raw = sh_color_raw(&g.sh, dir, sh_degree);
    let gc: [f64; 3] = [0, 1, 2].map(|ch| if raw[ch] > 0.0 { sg.color[ch] } else { 0.0 });
    if gc.iter().all(|v| *v == 0.0) {
        return;
    }
    let nb = sh_basis_count(sh_degree);
    let basis = sh_basis(dir, sh_degree);
    let dbasis = sh_basis_grad(dir, sh_degree);
    let mut d_dir = [0.0; 3];
    for b in 0..nb {
        let mut d_y = 0.0;
        for ch in 0..3 {
            out.sh[3 * b + ch] += gc[ch] * basis[b];
            d_y += gc[ch] * g.sh[3 * b + ch];
        }
        for a in 0..3 {
            d_dir[a] += d_y * dbasis[b][a];
        }
    }
    let dd: f64 = (0..3).map(|a| dir[a] * d_dir[a]).sum();
    for a in 0..3 {
        out.position[a] += (d_dir[a] - dir[a] * dd) / dist;
    }
}
