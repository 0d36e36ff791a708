//! Gaussian clouds, cameras and images.
//!
//! Clouds hold *activated* attribute values: opacity in `[0, 1]`, strictly
//! positive scales and unit quaternions. The log / logit parameterisations
//! only appear at PLY boundaries and inside optimisers.

mod camera;
mod image;
mod ply;
mod synth;

pub use camera::{load_cameras, make_orbit_cameras, save_cameras, Camera};
pub use image::{load_image, load_image_pair, save_image, Image, SignedImage};
pub use ply::{load_cloud_ply, read_cloud_ply, save_cloud_ply, write_cloud_ply};
pub use synth::synth_cloud;

use crate::error::{Error, Result};

/// Highest supported spherical-harmonics degree.
pub const MAX_SH_DEGREE: usize = 3;

/// Number of SH basis functions per colour channel for degree `degree`.
pub fn sh_basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// A single anisotropic Gaussian primitive.
///
/// `sh` is RGB-interleaved: coefficient `b` of channel `c` lives at `sh[3 * b + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub sh: Vec<f64>,
}

impl Gaussian {
    /// Scales `rotation` to unit length and flips it into the `w >= 0` half.
    pub fn canonicalize_rotation(&mut self) {
        self.rotation = canonical_quaternion(self.rotation);
    }
}

/// Unit-normalises `q` and flips its sign so that `w >= 0`.
/// A zero quaternion maps to the identity rotation.
pub fn canonical_quaternion(q: [f64; 4]) -> [f64; 4] {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|v| sign * v / norm)
}

/// Axis-aligned bounding box of Gaussian positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a [f64; 3]>) -> Option<Aabb> {
        let mut iter = points.into_iter();
        let first = *iter.next()?;
        let mut bbox = Aabb {
            min: first,
            max: first,
        };
        for p in iter {
            for k in 0..3 {
                bbox.min[k] = bbox.min[k].min(p[k]);
                bbox.max[k] = bbox.max[k].max(p[k]);
            }
        }
        Some(bbox)
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| 0.5 * (self.min[k] + self.max[k]))
    }

    /// Half the length of the box diagonal.
    pub fn radius(&self) -> f64 {
        (0..3)
            .map(|k| (self.max[k] - self.min[k]).powi(2))
            .sum::<f64>()
            .sqrt()
            * 0.5
    }
}

/// An ordered set of Gaussians sharing one SH degree.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    gaussians: Vec<Gaussian>,
    sh_degree: usize,
    bbox: Option<Aabb>,
}

impl GaussianCloud {
    /// Builds a cloud, checking that every Gaussian carries `3 (L+1)^2` SH values.
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: usize) -> Result<Self> {
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::invalid(format!(
                "sh degree {sh_degree} exceeds {MAX_SH_DEGREE}"
            )));
        }
        let expected = 3 * sh_basis_count(sh_degree);
        if let Some((i, g)) = gaussians
            .iter()
            .enumerate()
            .find(|(_, g)| g.sh.len() != expected)
        {
            return Err(Error::invalid(format!(
                "gaussian {i} has {} sh coefficients, expected {expected}",
                g.sh.len()
            )));
        }
        let bbox = Aabb::of_points(gaussians.iter().map(|g| &g.position));
        Ok(GaussianCloud {
            gaussians,
            sh_degree,
            bbox,
        })
    }

    pub fn empty(sh_degree: usize) -> Self {
        GaussianCloud {
            gaussians: Vec::new(),
            sh_degree,
            bbox: None,
        }
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn into_gaussians(self) -> Vec<Gaussian> {
        self.gaussians
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    /// Number of SH scalars per Gaussian.
    pub fn sh_len(&self) -> usize {
        3 * sh_basis_count(self.sh_degree)
    }

    /// Bounding box of the positions; `None` for an empty cloud.
    pub fn bbox(&self) -> Option<Aabb> {
        self.bbox
    }

    /// Returns a copy with the Gaussians in the given order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let gaussians = order
            .iter()
            .map(|&i| {
                self.gaussians
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianCloud::new(gaussians, self.sh_degree)
    }
}

/// One broken invariant found by [`validate_cloud`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gaussian {}: {}: {}", self.index, self.field, self.message)
    }
}

/// Reports every Gaussian invariant that does not hold. Empty means valid.
pub fn validate_cloud(cloud: &GaussianCloud) -> Vec<Violation> {
    let mut out = Vec::new();
    let expected_sh = cloud.sh_len();
    for (index, g) in cloud.gaussians().iter().enumerate() {
        let mut push = |field: &'static str, message: String| {
            out.push(Violation {
                index,
                field,
                message,
            })
        };
        if g.position.iter().any(|v| !v.is_finite()) {
            push("position", format!("non-finite {:?}", g.position));
        }
        if g.scale.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            push("scale", format!("must be finite and > 0, got {:?}", g.scale));
        }
        if g.rotation.iter().any(|v| !v.is_finite()) {
            push("rotation", format!("non-finite {:?}", g.rotation));
        } else {
            let norm = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                push("rotation", format!("norm {norm} is not 1"));
            }
        }
        if !g.opacity.is_finite() || !(0.0..=1.0).contains(&g.opacity) {
            push("opacity", format!("{} outside [0, 1]", g.opacity));
        }
        if g.sh.len() != expected_sh {
            push(
                "sh",
                format!("{} coefficients, expected {expected_sh}", g.sh.len()),
            );
        } else if g.sh.iter().any(|v| !v.is_finite()) {
            push("sh", "non-finite coefficient".to_string());
        }
    }
    if let Some(bbox) = cloud.bbox() {
        let exact = Aabb::of_points(cloud.gaussians().iter().map(|g| &g.position));
        if exact != Some(bbox) && cloud.gaussians().iter().all(|g| g.position.iter().all(|v| v.is_finite())) {
            out.push(Violation {
                index: 0,
                field: "bbox",
                message: "cached bounding box is stale".to_string(),
            });
        }
    }
    out
}
