//! CPU rasterizer for Gaussian clouds with analytic gradients.
//!
//! Gaussians are projected with the local affine (EWA) approximation,
//! sorted globally by camera depth and composited front to back per pixel.
//! Compositing constants follow the reference 3DGS rasterizer.

mod project;
mod raster;
mod sh;

pub use project::{build_covariance, project_gaussian, quat_to_rotation, GaussianGrad, Mat3, ProjectedGaussian};
pub use raster::{
    render_backward, render_view, render_view_debug, render_with_backward, RenderDebug,
    RenderGradients,
};
pub use sh::{eval_sh_color, sh_basis, sh_basis_grad, SH_C0, SH_C1};

/// Screen-space covariance dilation in pixels squared.
pub const DILATION: f64 = 0.3;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Upper clamp on per-Gaussian alpha.
pub const ALPHA_MAX: f64 = 0.999;
/// A pixel stops accumulating once its transmittance would fall below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
