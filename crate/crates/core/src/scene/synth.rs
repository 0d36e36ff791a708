use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{canonical_quaternion, sh_basis_count, Gaussian, GaussianCloud, MAX_SH_DEGREE};
use crate::error::{Error, Result};
use crate::render::SH_C0;

/// Procedural toy scene: `n` Gaussians scattered uniformly in a cube of half-width `extent`.
///
/// Scales are log-uniform in `[extent/200, extent/20]`, opacities uniform in
/// `[0.3, 1]`, base colours uniform in `[0, 1]` and higher SH bands are
/// zero-mean normal with standard deviation 0.05.
pub fn synth_cloud(seed: u64, n: usize, extent: f64, sh_degree: usize) -> Result<GaussianCloud> {
    if n == 0 {
        return Err(Error::invalid("synth_cloud needs n >= 1"));
    }
    if sh_degree > MAX_SH_DEGREE {
        return Err(Error::invalid(format!("sh degree {sh_degree} > {MAX_SH_DEGREE}")));
    }
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::invalid(format!("extent must be positive, got {extent}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rest = Normal::new(0.0, 0.05).expect("valid std");
    let (log_lo, log_hi) = ((extent / 200.0).ln(), (extent / 20.0).ln());
    let basis = sh_basis_count(sh_degree);

    let gaussians = (0..n)
        .map(|_| {
            let position = [(); 3].map(|_| rng.gen_range(-extent..=extent));
            let scale = [(); 3].map(|_| rng.gen_range(log_lo..=log_hi).exp());
            let q: [f64; 4] = [(); 4].map(|_| StandardNormal.sample(&mut rng));
            let opacity = rng.gen_range(0.3..=1.0);
            let mut sh = vec![0.0; 3 * basis];
            for c in 0..3 {
                let base: f64 = rng.gen_range(0.0..=1.0);
                sh[c] = (base - 0.5) / SH_C0;
            }
            for v in sh.iter_mut().skip(3) {
                *v = rest.sample(&mut rng);
            }
            Gaussian {
                position,
                scale,
                rotation: canonical_quaternion(q),
                opacity,
                sh,
            }
        })
        .collect();
    GaussianCloud::new(gaussians, sh_degree)
}
