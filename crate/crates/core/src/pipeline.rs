//! End-to-end runs: compress, code residuals of sampled views, restore,
//! refine and evaluate on held-out views. Also the rate-distortion sweep and
//! the ablation grid built on top of a single run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::compress::{compress_cloud, decompress_cloud, CompressedCloud, CompressionConfig};
use crate::error::{Error, Result, ResultExt};
use crate::metrics::{evaluate_views, format_metric, write_rd_csv, write_report_csv, QualityReport, RDPoint};
use crate::refine::{refine_cloud, sample_views, write_refine_log, RefineConfig, RefineLogEntry};
use crate::render::render_view;
use crate::residual::{decode_residual, encode_residual, ResidualBitstream, MAX_QUALITY, MIN_QUALITY, QUALITY_HIGH};
use crate::restore::{restore_image, RestorerParams};
use crate::scene::{save_cloud_ply, save_image, Camera, GaussianCloud, Image, SignedImage};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub compression: CompressionConfig,
    /// Residual codec quality for side information.
    pub quality: u8,
    pub use_prior: bool,
    pub use_side_info: bool,
    /// Also supervise unsampled training views, with targets restored without side information.
    pub include_unsampled: bool,
    /// Fraction of views held out for evaluation and never used for supervision.
    pub holdout_fraction: f64,
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            compression: CompressionConfig::default(),
            quality: QUALITY_HIGH,
            use_prior: true,
            use_side_info: true,
            include_unsampled: false,
            holdout_fraction: 0.2,
            refine: RefineConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.compression.validate()?;
        self.refine.validate()?;
        if !(MIN_QUALITY..=MAX_QUALITY).contains(&self.quality) {
            return Err(Error::invalid(format!("residual quality must be in 1..=10, got {}", self.quality)));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "holdout fraction must be in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }

    /// Short name of the prior / side-information combination.
    pub fn cell_name(&self) -> &'static str {
        match (self.use_prior, self.use_side_info) {
            (true, true) => "full",
            (false, true) => "no-prior",
            (true, false) => "no-side",
            (false, false) => "none",
        }
    }
}

/// Which views are held out, which supervise refinement and which carry side information.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSplit {
    pub held_out: Vec<usize>,
    pub train: Vec<usize>,
    pub sampled: Vec<usize>,
}

/// Holds out an evenly spaced `holdout` fraction of `count` views, then
/// samples a `ratio` fraction of the remaining training views.
pub fn split_views(count: usize, holdout: f64, ratio: f64) -> Result<ViewSplit> {
    if count < 2 {
        return Err(Error::invalid("need at least two views to hold one out"));
    }
    let held_out = sample_views(count, holdout)?;
    let train: Vec<usize> = (0..count).filter(|i| !held_out.contains(i)).collect();
    if train.is_empty() {
        return Err(Error::invalid("holdout leaves no training views"));
    }
    let sampled = sample_views(train.len(), ratio)?.into_iter().map(|j| train[j]).collect();
    Ok(ViewSplit {
        held_out,
        train,
        sampled,
    })
}

/// Everything a pipeline run produces.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub config: PipelineConfig,
    pub compressed: CompressedCloud,
    pub refined: GaussianCloud,
    pub split: ViewSplit,
    /// Side-information bitstreams of the sampled views.
    pub residuals: Vec<(usize, ResidualBitstream)>,
    /// Refinement targets by view.
    pub targets: Vec<(usize, Image)>,
    pub refine_log: Vec<RefineLogEntry>,
    pub refine_warning: Option<String>,
    /// Held-out quality of the compressed cloud before refinement.
    pub baseline: QualityReport,
    /// Held-out quality of the refined cloud.
    pub report: QualityReport,
}

impl PipelineOutcome {
    pub fn cloud_bytes(&self) -> usize {
        self.compressed.total_bytes()
    }

    pub fn residual_bytes(&self) -> usize {
        self.residuals.iter().map(|(_, b)| b.total_bytes()).sum()
    }

    pub fn rd_point(&self, label: impl Into<String>) -> RDPoint {
        RDPoint::new(
            label,
            self.cloud_bytes(),
            self.residual_bytes(),
            self.report.mean_psnr,
            self.report.mean_ssim,
        )
    }

    /// Writes every artifact under `dir` with fixed names.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mk(dir)?;
        let res_dir = dir.join("residuals");
        let tgt_dir = dir.join("targets");
        mk(&res_dir)?;
        mk(&tgt_dir)?;
        self.compressed.save(&dir.join("compressed.gscc"))?;
        for (view, bs) in &self.residuals {
            bs.save(&res_dir.join(format!("view_{view:04}.gsrs")))?;
        }
        for (view, img) in &self.targets {
            save_image(img, tgt_dir.join(format!("view_{view:04}.png")))?;
        }
        save_cloud_ply(&self.refined, dir.join("refined.ply"))?;
        write_refine_log(&dir.join("refine_log.csv"), &self.refine_log)?;
        write_report_csv(&dir.join("report.csv"), &self.report)?;
        write_report_csv(&dir.join("baseline_report.csv"), &self.baseline)?;
        write_rd_csv(&dir.join("rd.csv"), &[self.rd_point(self.config.cell_name())])?;
        let manifest = serde_json::json!({
            "config": self.config,
            "held_out": self.split.held_out,
            "sampled": self.split.sampled,
            "refine_warning": self.refine_warning,
        });
        let path = dir.join("run.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Compresses `original` and runs the rest of the pipeline.
pub fn run_pipeline(
    original: &GaussianCloud,
    cameras: &[Camera],
    config: &PipelineConfig,
    restorer: Option<&RestorerParams<f32>>,
) -> Result<PipelineOutcome> {
    config.validate()?;
    let compressed = compress_cloud(original, &config.compression).context(|| "stage compress".into())?;
    run_pipeline_with(original, cameras, &compressed, config, restorer)
}

/// Runs the pipeline from an already compressed cloud. Ground truth views are
/// renders of `original`.
pub fn run_pipeline_with(
    original: &GaussianCloud,
    cameras: &[Camera],
    compressed: &CompressedCloud,
    config: &PipelineConfig,
    restorer: Option<&RestorerParams<f32>>,
) -> Result<PipelineOutcome> {
    config.validate()?;
    let restorer = match (config.use_prior, restorer) {
        (true, None) => return Err(Error::invalid("the learned prior is enabled but no restorer was given")),
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    let split = split_views(cameras.len(), config.holdout_fraction, config.refine.sample_ratio)?;
    let bg = config.refine.background;
    let degraded_cloud = decompress_cloud(compressed).context(|| "stage decompress".into())?;

    let supervised: Vec<usize> = if config.include_unsampled {
        split.train.clone()
    } else {
        split.sampled.clone()
    };
    let prepared = supervised
        .par_iter()
        .map(|&v| -> Result<(usize, Image, Option<ResidualBitstream>)> {
            let cam = &cameras[v];
            let degraded = render_view(&degraded_cloud, cam, bg);
            let (w, h) = degraded.dims();
            let mut side = SignedImage::zeros(w, h);
            let mut stream = None;
            if config.use_side_info && split.sampled.contains(&v) {
                let gt = render_view(original, cam, bg);
                let bs = encode_residual(&gt.residual(&degraded)?, config.quality)
                    .context(|| format!("stage residual, view {v}"))?;
                side = decode_residual(&bs)?;
                stream = Some(bs);
            }
            let target = match restorer {
                Some(params) => restore_image(params, &degraded, &side).context(|| format!("stage restore, view {v}"))?,
                None => degraded.add_residual(&side)?,
            };
            Ok((v, target, stream))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut residuals = Vec::new();
    let mut targets = Vec::with_capacity(prepared.len());
    for (v, target, stream) in prepared {
        if let Some(bs) = stream {
            residuals.push((v, bs));
        }
        targets.push((v, target));
    }
    let pairs: Vec<(Camera, Image)> = targets.iter().map(|(v, img)| (cameras[*v].clone(), img.clone())).collect();
    let refined = refine_cloud(&degraded_cloud, &pairs, &config.refine).context(|| "stage refine".into())?;
    if refined.cloud.len() != degraded_cloud.len() {
        return Err(Error::data("refinement changed the Gaussian count"));
    }

    let evals = split
        .held_out
        .par_iter()
        .map(|&v| {
            let cam = &cameras[v];
            (
                v,
                render_view(original, cam, bg),
                render_view(&degraded_cloud, cam, bg),
                render_view(&refined.cloud, cam, bg),
            )
        })
        .collect::<Vec<_>>();
    let rows = |pick: fn(&(usize, Image, Image, Image)) -> &Image| {
        evaluate_views(&evals.iter().map(|e| (e.0, pick(e), &e.1)).collect::<Vec<_>>())
    };
    let baseline = rows(|e| &e.2).context(|| "stage evaluate".into())?;
    let report = rows(|e| &e.3).context(|| "stage evaluate".into())?;

    Ok(PipelineOutcome {
        config: config.clone(),
        compressed: compressed.clone(),
        refined: refined.cloud,
        split,
        residuals,
        targets,
        refine_log: refined.log,
        refine_warning: refined.warning,
        baseline,
        report,
    })
}

/// Runs the pipeline at every residual quality in `qualities`, sharing one
/// initial compression. Labels are `<cell>/q<quality>`.
pub fn rd_sweep(
    original: &GaussianCloud,
    cameras: &[Camera],
    qualities: &[u8],
    config: &PipelineConfig,
    restorer: Option<&RestorerParams<f32>>,
) -> Result<Vec<RDPoint>> {
    if qualities.is_empty() {
        return Err(Error::invalid("quality list is empty"));
    }
    config.validate()?;
    let compressed = compress_cloud(original, &config.compression).context(|| "stage compress".into())?;
    qualities
        .iter()
        .map(|&q| {
            let cfg = PipelineConfig { quality: q, ..config.clone() };
            let out = run_pipeline_with(original, cameras, &compressed, &cfg, restorer)
                .context(|| format!("quality {q}"))?;
            Ok(out.rd_point(format!("{}/q{q}", cfg.cell_name())))
        })
        .collect()
}

/// Axis of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Prior,
    SideInfo,
    Ratio,
    Compressor,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Axis::Prior),
            "sideinfo" => Ok(Axis::SideInfo),
            "ratio" => Ok(Axis::Ratio),
            "compressor" => Ok(Axis::Compressor),
            _ => Err(Error::invalid(format!(
                "unknown ablation axis {s:?} (expected prior, sideinfo, ratio or compressor)"
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Prior => "prior",
            Axis::SideInfo => "sideinfo",
            Axis::Ratio => "ratio",
            Axis::Compressor => "compressor",
        })
    }
}

/// Sampling ratios swept by the ratio axis.
pub const ABLATION_RATIOS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub use_prior: bool,
    pub use_side_info: bool,
    pub ratio: f64,
    pub compressor: String,
    pub cloud_bytes: usize,
    pub residual_bytes: usize,
    pub total_bytes: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Held-out PSNR of the compressed cloud before refinement.
    pub baseline_psnr: f64,
    /// `ok`, or the error that stopped this cell.
    pub status: String,
}

impl AblationRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

fn grid_cells(base: &PipelineConfig, axes: &[Axis]) -> Vec<(String, String, PipelineConfig)> {
    let mut cells = Vec::new();
    let has = |a| axes.contains(&a);
    if has(Axis::Prior) || has(Axis::SideInfo) {
        let priors: &[bool] = if has(Axis::Prior) { &[true, false] } else { &[base.use_prior] };
        let sides: &[bool] = if has(Axis::SideInfo) { &[true, false] } else { &[base.use_side_info] };
        for &side in sides {
            for &prior in priors {
                let cfg = PipelineConfig {
                    use_prior: prior,
                    use_side_info: side,
                    ..base.clone()
                };
                cells.push((cfg.cell_name().to_string(), "default".to_string(), cfg));
            }
        }
    }
    if has(Axis::Ratio) {
        for r in ABLATION_RATIOS {
            let mut cfg = base.clone();
            cfg.refine.sample_ratio = r;
            cells.push((format!("ratio={r}"), "default".to_string(), cfg));
        }
    }
    if has(Axis::Compressor) {
        for (name, comp) in [("default", CompressionConfig::default()), ("alternate", CompressionConfig::alternate())] {
            let cfg = PipelineConfig {
                compression: comp,
                ..base.clone()
            };
            cells.push((format!("compressor={name}"), name.to_string(), cfg));
        }
    }
    cells
}

/// Runs the cross product of the requested axes around `base`.
///
/// Prior and side-information cells come first, ordered (on, on), (off, on),
/// (on, off), (off, off). Failed cells are reported in `status` and the grid
/// carries on.
pub fn ablation_grid(
    original: &GaussianCloud,
    cameras: &[Camera],
    base: &PipelineConfig,
    restorer: Option<&RestorerParams<f32>>,
    axes: &[Axis],
) -> Result<Vec<AblationRow>> {
    if axes.is_empty() {
        return Err(Error::invalid("no ablation axes given"));
    }
    base.validate()?;
    let cells = grid_cells(base, axes);
    let mut compressed: Vec<(CompressionConfig, std::result::Result<CompressedCloud, String>)> = Vec::new();
    for (_, _, cfg) in &cells {
        if !compressed.iter().any(|(c, _)| *c == cfg.compression) {
            let cc = compress_cloud(original, &cfg.compression).map_err(|e| e.to_string());
            compressed.push((cfg.compression.clone(), cc));
        }
    }
    let rows = cells
        .par_iter()
        .map(|(cell, compressor, cfg)| {
            let cc = &compressed.iter().find(|(c, _)| *c == cfg.compression).expect("compressed above").1;
            let outcome = cc
                .as_ref()
                .map_err(|e| e.clone())
                .and_then(|cc| run_pipeline_with(original, cameras, cc, cfg, restorer).map_err(|e| e.to_string()));
            let mut row = AblationRow {
                cell: cell.clone(),
                use_prior: cfg.use_prior,
                use_side_info: cfg.use_side_info,
                ratio: cfg.refine.sample_ratio,
                compressor: compressor.clone(),
                cloud_bytes: 0,
                residual_bytes: 0,
                total_bytes: 0,
                psnr: f64::NAN,
                ssim: f64::NAN,
                baseline_psnr: f64::NAN,
                status: "ok".into(),
            };
            match outcome {
                Ok(out) => {
                    row.cloud_bytes = out.cloud_bytes();
                    row.residual_bytes = out.residual_bytes();
                    row.total_bytes = row.cloud_bytes + row.residual_bytes;
                    row.psnr = out.report.mean_psnr;
                    row.ssim = out.report.mean_ssim;
                    row.baseline_psnr = out.baseline.mean_psnr;
                }
                Err(e) => {
                    log::warn!("ablation cell {cell} failed: {e}");
                    row.status = format!("failed: {e}");
                }
            }
            row
        })
        .collect();
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    w.write_record([
        "cell",
        "prior",
        "sideinfo",
        "ratio",
        "compressor",
        "cloud_bytes",
        "residual_bytes",
        "total_bytes",
        "psnr",
        "ssim",
        "baseline_psnr",
        "status",
    ])
    .map_err(err)?;
    for r in rows {
        w.write_record([
            r.cell.clone(),
            r.use_prior.to_string(),
            r.use_side_info.to_string(),
            r.ratio.to_string(),
            r.compressor.clone(),
            r.cloud_bytes.to_string(),
            r.residual_bytes.to_string(),
            r.total_bytes.to_string(),
            format_metric(r.psnr),
            format_metric(r.ssim),
            format_metric(r.baseline_psnr),
            r.status.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_covers_every_view() {
        for count in 2..60 {
            let s = split_views(count, 0.2, 0.4).unwrap();
            assert_eq!(s.held_out.len() + s.train.len(), count);
            assert!(s.held_out.iter().all(|v| !s.train.contains(v)));
            assert!(s.sampled.iter().all(|v| s.train.contains(v)));
            assert!(!s.sampled.is_empty());
        }
        assert!(split_views(1, 0.2, 0.4).is_err());
    }

    #[test]
    fn grid_cell_order() {
        let cells = grid_cells(&PipelineConfig::default(), &[Axis::Prior, Axis::SideInfo]);
        let names: Vec<_> = cells.iter().map(|c| c.0.as_str()).collect();
        assert_eq!(names, ["full", "no-prior", "no-side", "none"]);
        assert_eq!(grid_cells(&PipelineConfig::default(), &[Axis::Ratio]).len(), 5);
        assert_eq!(grid_cells(&PipelineConfig::default(), &[Axis::Compressor]).len(), 2);
    }

    #[test]
    fn axis_names_round_trip() {
        for a in [Axis::Prior, Axis::SideInfo, Axis::Ratio, Axis::Compressor] {
            assert_eq!(a.to_string().parse::<Axis>().unwrap(), a);
        }
        assert!("bogus".parse::<Axis>().is_err());
    }
}
