use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera with a world-to-camera pose.
///
/// Camera space is x right, y down, z forward. A point `p` maps to
/// `q = R p + t` and then to pixel `(fx q.x / q.z + cx, fy q.y / q.z + cy)`.
/// Pixel `(i, j)` is sampled at the integer coordinate `(i, j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    rotation: [f64; 9],
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    near: f64,
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let m = r.rotation;
        let cam = Camera {
            rotation: [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]],
            translation: r.translation,
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            width: r.width,
            height: r.height,
            near: r.near,
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        let r = c.rotation;
        CameraRecord {
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: c.translation,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            near: c.near,
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if !dot.is_finite() || (dot - want).abs() > 1e-6 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.near > 0.0) {
            return Err(Error::invalid("camera fx, fy and near must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera resolution must be at least 1x1"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite())
            || self.translation.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid("camera has non-finite parameters"));
        }
        Ok(())
    }

    /// World to camera coordinates.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }

    /// Pixel coordinates of a world point, `None` when it is not in front of the near plane.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let q = self.to_camera(p);
        (q[2] > self.near).then(|| [self.fx * q[0] / q[2] + self.cx, self.fy * q[1] / q[2] + self.cy])
    }

    /// Camera centre in world coordinates, `-R^T t`.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [0, 1, 2].map(|j| -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// `n` cameras evenly spaced on a horizontal circle around `look_at`.
///
/// World up is `+z`; camera `i` sits at azimuth `2 pi i / n` measured from `+x`.
pub fn make_orbit_cameras(
    n: usize,
    radius: f64,
    look_at: [f64; 3],
    resolution: (usize, usize),
    fov_deg: f64,
) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(Error::invalid("need at least one camera"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("orbit radius must be positive"));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::invalid("field of view must be in (0, 180) degrees"));
    }
    let (w, h) = resolution;
    let focal = (w as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    (0..n)
        .map(|i| {
            let azimuth = std::f64::consts::TAU * i as f64 / n as f64;
            let (sin, cos) = azimuth.sin_cos();
            let center = [
                look_at[0] + radius * cos,
                look_at[1] + radius * sin,
                look_at[2],
            ];
            let forward = normalize([0, 1, 2].map(|k| look_at[k] - center[k]));
            let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
            let down = cross(forward, right);
            let rotation = [right, down, forward];
            let translation =
                [0, 1, 2].map(|r| -(0..3).map(|k| rotation[r][k] * center[k]).sum::<f64>());
            let cam = Camera {
                rotation,
                translation,
                fx: focal,
                fy: focal,
                cx: w as f64 / 2.0,
                cy: h as f64 / 2.0,
                width: w,
                height: h,
                near: radius / 100.0,
            };
            cam.validate()?;
            Ok(cam)
        })
        .collect()
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: camera json: {e}", path.display())))
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(cameras)
        .map_err(|e| Error::format(format!("camera json: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_cameras_at_quarter_turns() {
        let cams = make_orbit_cameras(4, 3.0, [0.0; 3], (32, 32), 60.0).unwrap();
        let az: Vec<f64> = cams
            .iter()
            .map(|c| {
                let p = c.center();
                let a = p[1].atan2(p[0]).to_degrees();
                if a < -1e-9 { a + 360.0 } else { a }
            })
            .collect();
        for (got, want) in az.iter().zip([0.0, 90.0, 180.0, 270.0]) {
            assert!((got - want).abs() < 1e-9, "{az:?}");
        }
        for c in &cams {
            let p = c.center();
            assert!((p[0].hypot(p[1]) - 3.0).abs() < 1e-12);
            assert!(p[2].abs() < 1e-12);
        }
    }

    #[test]
    fn rotations_are_orthonormal() {
        let cams = make_orbit_cameras(13, 2.5, [0.1, -0.2, 0.3], (40, 30), 45.0).unwrap();
        for c in &cams {
            c.validate().unwrap();
        }
    }

    #[test]
    fn look_at_projects_to_principal_point() {
        let target = [0.3, -0.1, 0.2];
        let cams = make_orbit_cameras(5, 2.0, target, (64, 48), 50.0).unwrap();
        let px = cams[0].project(target).unwrap();
        assert!((px[0] - cams[0].cx).abs() < 1e-4);
        assert!((px[1] - cams[0].cy).abs() < 1e-4);
        let focal = 32.0 / (25f64.to_radians()).tan();
        assert!((cams[0].fx - focal).abs() < 1e-12);
        assert_eq!(cams[0].near, 0.02);
    }

    #[test]
    fn json_round_trip() {
        let cams = make_orbit_cameras(3, 2.0, [0.0; 3], (16, 16), 60.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.json");
        save_cameras(&cams, &path).unwrap();
        let back = load_cameras(&path).unwrap();
        assert_eq!(cams, back);
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v[0]["rotation"].as_array().unwrap().len(), 9);
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let json = r#"[{"rotation":[2,0,0,0,1,0,0,0,1],"translation":[0,0,0],
            "fx":1,"fy":1,"cx":0,"cy":0,"width":4,"height":4,"near":0.1}]"#;
        assert!(serde_json::from_str::<Vec<Camera>>(json).is_err());
    }
}
