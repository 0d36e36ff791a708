mod common;

use gsr_core::compress::{
    compress_cloud, compress_with, decompress_cloud, CompressedCloud, CompressionConfig, Grid,
};
use gsr_core::scene::{synth_cloud, validate_cloud, GaussianCloud};
use gsr_core::Error;
use proptest::prelude::*;

fn logit(o: f64) -> f64 {
    let o = o.clamp(1e-4, 1.0 - 1e-4);
    (o / (1.0 - o)).ln()
}

/// Largest |error| / step per attribute family, with the step from the stored grids.
fn worst_step_ratios(cloud: &GaussianCloud, cc: &CompressedCloud) -> [f64; 4] {
    let out = decompress_cloud(cc).unwrap();
    let g = cc.grids();
    let c = cc.config();
    let ratio = |grid: &Grid, bits: u8, a: f64, b: f64| (a - b).abs() / grid.step(bits);
    let mut worst = [0.0f64; 4];
    for (a, b) in cloud.gaussians().iter().zip(out.gaussians()) {
        for k in 0..3 {
            worst[0] = worst[0].max(ratio(&g.position[k], c.pos_bits, a.position[k], b.position[k]));
            worst[1] = worst[1].max(ratio(&g.scale[k], c.scalar_bits, a.scale[k].ln(), b.scale[k].ln()));
            worst[3] = worst[3].max(ratio(&g.dc[k], c.dc_bits, a.sh[k], b.sh[k]));
        }
        worst[2] = worst[2].max(ratio(&g.opacity, c.scalar_bits, logit(a.opacity), logit(b.opacity)));
    }
    worst
}

#[test]
fn count_is_preserved() {
    for (seed, n, degree) in [(1, 1, 0), (2, 17, 1), (3, 300, 2), (4, 64, 3)] {
        let cloud = synth_cloud(seed, n, 1.0, degree).unwrap();
        let out = decompress_cloud(&compress_cloud(&cloud, &CompressionConfig::default()).unwrap()).unwrap();
        assert_eq!(out.len(), n);
        assert_eq!(out.sh_degree(), degree);
        assert!(validate_cloud(&out).is_empty());
    }
}

#[test]
fn default_config_compresses_at_least_four_times() {
    let cloud = synth_cloud(7, 5000, 1.0, 2).unwrap();
    let cc = compress_cloud(&cloud, &CompressionConfig::default()).unwrap();
    let raw = 59 * 4 * cloud.len();
    let ratio = raw as f64 / cc.total_bytes() as f64;
    println!("compression ratio {ratio:.3} ({} bytes)", cc.total_bytes());
    assert!(ratio >= 4.0, "ratio {ratio}");
    assert_eq!(cc.to_bytes().len(), cc.total_bytes());
}

#[test]
fn sixteen_bit_reconstruction_is_within_half_step() {
    let cloud = synth_cloud(11, 256, 1.5, 2).unwrap();
    let config = CompressionConfig::lossless_for(cloud.len());
    let cc = compress_cloud(&cloud, &config).unwrap();
    let worst = worst_step_ratios(&cloud, &cc);
    for (name, w) in ["position", "log-scale", "logit-opacity", "dc"].iter().zip(worst) {
        assert!(w <= 0.5 + 1e-6, "{name}: error is {w} steps");
    }
    let out = decompress_cloud(&cc).unwrap();
    for (a, b) in cloud.gaussians().iter().zip(out.gaussians()) {
        for (x, y) in a.sh[3..].iter().zip(&b.sh[3..]) {
            assert!((x - y).abs() <= 1e-7 * x.abs().max(1e-3), "{x} vs {y}");
        }
        let dot: f64 = a.rotation.iter().zip(&b.rotation).map(|(x, y)| x * y).sum();
        assert!(dot.abs() > 1.0 - 1e-8);
    }
}

#[test]
fn round_trip_is_idempotent() {
    for config in [CompressionConfig::default(), CompressionConfig::alternate()] {
        let cloud = synth_cloud(5, 700, 1.0, 3).unwrap();
        let first = compress_cloud(&cloud, &config).unwrap();
        let once = decompress_cloud(&first).unwrap();
        let second = compress_with(&once, &config, first.grids(), first.codebook()).unwrap();
        assert_eq!(first.to_bytes(), second.to_bytes());
        let twice = decompress_cloud(&second).unwrap();
        assert_eq!(once, twice);
    }
}

#[test]
fn compression_is_deterministic() {
    let cloud = synth_cloud(21, 900, 1.0, 2).unwrap();
    let a = compress_cloud(&cloud, &CompressionConfig::default()).unwrap().to_bytes();
    let b = compress_cloud(&cloud, &CompressionConfig::default()).unwrap().to_bytes();
    assert_eq!(a, b);
}

#[test]
fn truncated_or_corrupt_containers_are_format_errors() {
    let cloud = synth_cloud(8, 120, 1.0, 1).unwrap();
    let bytes = compress_cloud(&cloud, &CompressionConfig::default()).unwrap().to_bytes();
    for cut in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
        let r = CompressedCloud::from_bytes(&bytes[..cut]);
        assert!(matches!(r, Err(Error::Format(_))), "cut at {cut}: {r:?}");
    }
    let mut rng = common::rng(3);
    for _ in 0..200 {
        let mut bad = bytes.clone();
        let i = rand::Rng::gen_range(&mut rng, 0..bad.len());
        bad[i] ^= 1 << rand::Rng::gen_range(&mut rng, 0..8);
        let decoded = CompressedCloud::from_bytes(&bad).and_then(|cc| decompress_cloud(&cc));
        assert!(matches!(decoded, Err(Error::Format(_))), "flip at byte {i}");
    }
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(CompressedCloud::from_bytes(&wrong_magic), Err(Error::Format(_))));
    let mut wrong_version = bytes;
    wrong_version[4] = 9;
    assert!(matches!(CompressedCloud::from_bytes(&wrong_version), Err(Error::Format(_))));
}

fn mean_errors(cloud: &GaussianCloud, config: &CompressionConfig) -> f64 {
    let out = decompress_cloud(&compress_cloud(cloud, config).unwrap()).unwrap();
    let mut sum = 0.0;
    let mut count = 0.0;
    for (a, b) in cloud.gaussians().iter().zip(out.gaussians()) {
        for k in 0..3 {
            sum += (a.position[k] - b.position[k]).abs() + (a.scale[k].ln() - b.scale[k].ln()).abs();
        }
        sum += (logit(a.opacity) - logit(b.opacity)).abs();
        sum += a.sh.iter().zip(&b.sh).map(|(x, y)| (x - y).abs()).sum::<f64>();
        count += 1.0;
    }
    sum / count
}

#[test]
fn distortion_decreases_with_bits() {
    let bits = [3u8, 5, 7, 9, 12];
    let mut inversions = 0;
    let mut curves = Vec::new();
    for seed in 0..20 {
        let cloud = synth_cloud(100 + seed, 150, 1.0, 1).unwrap();
        let errs: Vec<f64> = bits
            .iter()
            .map(|&b| {
                let config = CompressionConfig {
                    pos_bits: b,
                    scalar_bits: b,
                    dc_bits: b,
                    codebook_size: 1 << (b - 1),
                    ..Default::default()
                };
                mean_errors(&cloud, &config)
            })
            .collect();
        inversions += errs.windows(2).filter(|w| w[1] > w[0]).count();
        curves.push(errs);
    }
    let mean: Vec<f64> = (0..bits.len()).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / 20.0).collect();
    assert!(mean.windows(2).all(|w| w[1] <= w[0]), "{mean:?}");
    assert!(inversions <= 1, "{inversions} inversions");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fewer_bits_never_cost_more(seed in 0u64..1000, field in 0usize..4, hi in 2u8..=16) {
        let cloud = synth_cloud(seed, 200, 1.0, 1).unwrap();
        let at = |b: u8| {
            let mut c = CompressionConfig::default();
            match field {
                0 => c.pos_bits = b,
                1 => c.scalar_bits = b,
                2 => c.dc_bits = b,
                _ => c.codebook_size = 1 << b,
            }
            compress_cloud(&cloud, &c).unwrap().total_bytes()
        };
        prop_assert!(at(hi - 1) <= at(hi));
    }

    #[test]
    fn reconstruction_stays_within_half_step(seed in 0u64..10_000, bits in 2u8..=16, n in 1usize..80) {
        let cloud = synth_cloud(seed, n, 2.0, 0).unwrap();
        let config = CompressionConfig { pos_bits: bits, scalar_bits: bits, dc_bits: bits, ..Default::default() };
        let cc = compress_cloud(&cloud, &config).unwrap();
        for w in worst_step_ratios(&cloud, &cc) {
            prop_assert!(w <= 0.5 + 1e-6, "{w}");
        }
    }
}
