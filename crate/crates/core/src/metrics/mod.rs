//! Image quality metrics, storage accounting and CSV / SVG reporting.

mod ssim;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{save_image, Image};

pub use ssim::{ssim, ssim_with_grad, C1, C2, SIGMA, WINDOW};

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "image dimensions differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn mean_abs_error(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio for `[0, 1]` images. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Formats a metric value, writing the infinite PSNR sentinel as `inf`.
pub fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn parse_metric(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        _ => s.parse().map_err(|_| Error::format(format!("bad metric value {s:?}"))),
    }
}

/// One point on a rate-distortion curve.
#[derive(Clone, Debug, PartialEq)]
pub struct RDPoint {
    pub label: String,
    pub cloud_bytes: usize,
    pub residual_bytes: usize,
    pub total_bytes: usize,
    pub psnr: f64,
    pub ssim: f64,
}

impl RDPoint {
    pub fn new(label: impl Into<String>, cloud_bytes: usize, residual_bytes: usize, psnr: f64, ssim: f64) -> Self {
        RDPoint {
            label: label.into(),
            cloud_bytes,
            residual_bytes,
            total_bytes: cloud_bytes + residual_bytes,
            psnr,
            ssim,
        }
    }
}

/// Per-view quality of a set of renders.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub view_ids: Vec<usize>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl QualityReport {
    /// Builds a report from `(view_id, psnr, ssim)` rows.
    pub fn from_rows(rows: Vec<(usize, f64, f64)>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.2).sum::<f64>() / n;
        QualityReport {
            view_ids: rows.iter().map(|r| r.0).collect(),
            psnr: rows.iter().map(|r| r.1).collect(),
            ssim: rows.iter().map(|r| r.2).collect(),
            mean_psnr,
            mean_ssim,
        }
    }

    pub fn len(&self) -> usize {
        self.view_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view_ids.is_empty()
    }
}

/// Compares `(view_id, prediction, reference)` triples in parallel.
pub fn evaluate_views(views: &[(usize, &Image, &Image)]) -> Result<QualityReport> {
    let rows = views
        .par_iter()
        .map(|(id, pred, gt)| Ok((*id, psnr(pred, gt)?, ssim(pred, gt)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(QualityReport::from_rows(rows))
}

/// Byte sizes of a compressed cloud and residual bitstreams as stored on disk.
///
/// Restorer checkpoints are not part of per-scene storage.
pub fn measure_sizes(cloud: &Path, residuals: &[PathBuf]) -> Result<(usize, usize)> {
    let size = |p: &Path, what: &str| -> Result<usize> {
        std::fs::metadata(p)
            .map(|m| m.len() as usize)
            .map_err(|e| Error::io(p, e).context(format!("missing {what} artifact {}", p.display())))
    };
    let cloud_bytes = size(cloud, "compressed cloud")?;
    let mut residual_bytes = 0;
    for r in residuals {
        residual_bytes += size(r, "residual")?;
    }
    Ok((cloud_bytes, residual_bytes))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::data(format!("{}: {e}", path.display()))
}

/// Writes `rd.csv` rows sorted by total size (stable for equal sizes).
pub fn write_rd_csv(path: &Path, points: &[RDPoint]) -> Result<()> {
    let mut sorted: Vec<&RDPoint> = points.iter().collect();
    sorted.sort_by_key(|p| p.total_bytes);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["label", "cloud_bytes", "residual_bytes", "total_bytes", "psnr", "ssim"])
        .map_err(|e| csv_error(path, e))?;
    for p in sorted {
        w.write_record([
            p.label.clone(),
            p.cloud_bytes.to_string(),
            p.residual_bytes.to_string(),
            p.total_bytes.to_string(),
            format_metric(p.psnr),
            format_metric(p.ssim),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RDPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != 6 {
            return Err(Error::format(format!("{}: expected 6 columns", path.display())));
        }
        let int = |i: usize| -> Result<usize> {
            rec[i].parse().map_err(|_| Error::format(format!("bad integer {:?}", &rec[i])))
        };
        let p = RDPoint::new(&rec[0], int(1)?, int(2)?, parse_metric(&rec[4])?, parse_metric(&rec[5])?);
        if p.total_bytes != int(3)? {
            return Err(Error::format(format!("row {}: total_bytes is not the sum of its parts", p.label)));
        }
        out.push(p);
    }
    Ok(out)
}

/// Writes `report.csv` with one row per view.
pub fn write_report_csv(path: &Path, report: &QualityReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["view_id", "psnr", "ssim"]).map_err(|e| csv_error(path, e))?;
    for i in 0..report.len() {
        w.write_record([
            report.view_ids[i].to_string(),
            format_metric(report.psnr[i]),
            format_metric(report.ssim[i]),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// SVG line chart of PSNR against total size, one polyline per label prefix
/// (the part of the label before the first `/`, or the whole label).
pub fn rd_plot_svg(points: &[RDPoint]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 60.0;
    let finite: Vec<&RDPoint> = points.iter().filter(|p| p.psnr.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &finite {
        x0 = x0.min(p.total_bytes as f64);
        x1 = x1.max(p.total_bytes as f64);
        y0 = y0.min(p.psnr);
        y1 = y1.max(p.psnr);
    }
    if finite.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut series: Vec<(String, Vec<&RDPoint>)> = Vec::new();
    for p in &finite {
        let key = p.label.split('/').next().unwrap_or("").to_string();
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(p),
            None => series.push((key, vec![p])),
        }
    }
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{t}\" text-anchor=\"middle\" font-size=\"13\">total size (bytes)</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 {cy})\">PSNR (dB)</text>\n",
        b = H - M,
        r = W - M,
        cx = W / 2.0,
        t = H - 15.0,
        cy = H / 2.0,
    );
    for (label, x, y, anchor) in [
        (format!("{x0:.0}"), sx(x0), H - M + 18.0, "start"),
        (format!("{x1:.0}"), sx(x1), H - M + 18.0, "end"),
    ] {
        svg += &format!("<text x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\" font-size=\"11\">{label}</text>\n");
    }
    for (label, v) in [(format!("{y0:.2}"), y0), (format!("{y1:.2}"), y1)] {
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{label}</text>\n",
            M - 6.0,
            sy(v) + 4.0
        );
    }
    for (i, (name, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by_key(|p| p.total_bytes);
        let color = colors[i % colors.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.total_bytes as f64), sy(p.psnr)))
            .collect();
        svg += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            coords.join(" ")
        );
        for p in &pts {
            svg += &format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(p.total_bytes as f64),
                sy(p.psnr)
            );
        }
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            W - M + 4.0 - 120.0,
            M + 16.0 * i as f64,
            xml_escape(&name)
        );
    }
    svg += "</svg>\n";
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grayscale map of the per-pixel mean squared error, scaled so the largest
/// error is white.
pub fn error_map(a: &Image, b: &Image) -> Result<Image> {
    check_dims(a, b)?;
    let per_pixel: Vec<f64> = a
        .data()
        .chunks_exact(3)
        .zip(b.data().chunks_exact(3))
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 3.0)
        .collect();
    let peak = per_pixel.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let data = per_pixel.iter().flat_map(|v| [v * scale; 3]).collect();
    Image::new(a.width(), a.height(), data)
}

pub fn save_error_map(a: &Image, b: &Image, path: &Path) -> Result<()> {
    save_image(&error_map(a, b)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_constant_offset() {
        let a = Image::filled(4, 3, [0.2, 0.5, 0.7]);
        let b = Image::filled(4, 3, [0.3, 0.6, 0.8]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Image::zeros(3, 4)).is_err());
    }

    #[test]
    fn report_means() {
        let r = QualityReport::from_rows(vec![(0, 20.0, 0.5), (3, 30.0, 0.7)]);
        assert_eq!(r.mean_psnr, 25.0);
        assert!((r.mean_ssim - 0.6).abs() < 1e-12);
    }

    #[test]
    fn metric_formatting() {
        assert_eq!(format_metric(f64::INFINITY), "inf");
        assert_eq!(parse_metric("inf").unwrap(), f64::INFINITY);
        assert_eq!(parse_metric(&format_metric(1.25)).unwrap(), 1.25);
    }
}
