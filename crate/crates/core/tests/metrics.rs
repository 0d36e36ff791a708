mod common;

use gsr_core::metrics::{
    measure_sizes, psnr, read_rd_csv, rd_plot_svg, ssim, ssim_with_grad, write_rd_csv, write_report_csv,
    QualityReport, RDPoint,
};
use gsr_core::scene::Image;

/// SSIM evaluated window-by-window with explicit mirrored indexing.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (w, h) = a.dims();
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let i = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
        i as usize
    };
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wt = g[i] * g[j] / (gs * gs);
                        let sx = mirror(x as isize + i as isize - 5, w);
                        let sy = mirror(y as isize + j as isize - 5, h);
                        let p = a.pixel(sx, sy)[c];
                        let q = b.pixel(sx, sy)[c];
                        mx += wt * p;
                        my += wt * q;
                        xx += wt * p * p;
                        yy += wt * q * q;
                        xy += wt * p * q;
                    }
                }
                let (sxx, syy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
            }
        }
    }
    total / (3 * w * h) as f64
}

#[test]
fn psnr_matches_direct_mse() {
    for seed in 0..10 {
        let a = common::random_image(seed, 23, 17);
        let b = common::random_image(seed + 100, 23, 17);
        let m: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (23.0 * 17.0 * 3.0);
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    }
}

#[test]
fn ssim_matches_window_oracle() {
    for seed in 0..4 {
        let a = common::random_image(seed, 19, 14);
        let b = common::random_image(seed + 7, 19, 14);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn ssim_basic_identities() {
    let a = common::random_image(1, 20, 20);
    let b = common::random_image(2, 20, 20);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    let c5 = Image::filled(16, 16, [0.5; 3]);
    let c6 = Image::filled(16, 16, [0.6; 3]);
    let expected = (0.6 + 1e-4) / (0.61 + 1e-4);
    assert!((ssim(&c5, &c6).unwrap() - expected).abs() < 1e-9);
    assert!(ssim(&Image::zeros(10, 20), &Image::zeros(10, 20)).is_err());
    assert!(ssim(&a, &Image::zeros(20, 21)).is_err());
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let a = common::random_image(5, 14, 12);
    let b = common::random_image(6, 14, 12);
    let (_, grad) = ssim_with_grad(&a, &b).unwrap();
    let mut r = common::rng(9);
    let h = 1e-6;
    for _ in 0..60 {
        let i = rand::Rng::gen_range(&mut r, 0..b.data().len());
        let shifted = |d: f64| {
            let mut data = b.data().to_vec();
            data[i] += d;
            // Image::new clamps, so stay away from the bounds.
            Image::new(14, 12, data).unwrap()
        };
        if !(h..1.0 - h).contains(&b.data()[i]) {
            continue;
        }
        let numeric = (ssim(&a, &shifted(h)).unwrap() - ssim(&a, &shifted(-h)).unwrap()) / (2.0 * h);
        assert!(common::fd_agrees(grad[i], numeric), "{i}: {} vs {numeric}", grad[i]);
    }
}

#[test]
fn sizes_match_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("cloud.gscc");
    std::fs::write(&cloud, vec![0u8; 1234]).unwrap();
    let r = dir.path().join("r.gsrs");
    std::fs::write(&r, vec![1u8; 77]).unwrap();
    assert_eq!(measure_sizes(&cloud, &[]).unwrap(), (1234, 0));
    assert_eq!(measure_sizes(&cloud, &[r.clone(), r.clone()]).unwrap(), (1234, 154));
    let missing = dir.path().join("nope.gsrs");
    let err = measure_sizes(&cloud, &[missing]).unwrap_err();
    assert!(err.to_string().contains("nope.gsrs"), "{err}");
}

#[test]
fn rd_csv_round_trips_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rd.csv");
    let pts = vec![
        RDPoint::new("q6", 1000, 500, 31.5, 0.93),
        RDPoint::new("q2", 1000, 100, 29.25, 0.9),
        RDPoint::new("lossless", 9000, 0, f64::INFINITY, 1.0),
    ];
    write_rd_csv(&path, &pts).unwrap();
    let back = read_rd_csv(&path).unwrap();
    assert_eq!(back.iter().map(|p| p.label.as_str()).collect::<Vec<_>>(), ["q2", "q6", "lossless"]);
    assert_eq!(back[2].psnr, f64::INFINITY);
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("label,cloud_bytes,residual_bytes,total_bytes,psnr,ssim\n"));
    let svg = rd_plot_svg(&back);
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    let report = QualityReport::from_rows(vec![(1, 20.0, 0.5)]);
    write_report_csv(&dir.path().join("report.csv"), &report).unwrap();
}
