use std::path::{Path, PathBuf};

use gsr_core::compress::{compress_cloud, decompress_cloud, CompressedCloud, CompressionConfig};
use gsr_core::metrics::{
    evaluate_views, format_metric, read_rd_csv, rd_plot_svg, save_error_map, write_rd_csv, write_report_csv,
};
use gsr_core::pipeline::{ablation_grid, rd_sweep, run_pipeline, write_ablation_csv, PipelineConfig};
use gsr_core::refine::{refine_cloud, RefineConfig};
use gsr_core::render::render_view;
use gsr_core::residual::{decode_residual, encode_residual, ResidualBitstream};
use gsr_core::restore::{
    build_pair_dataset, load_pairs, restore_image, save_pairs, train_restorer, write_train_log, RestoreTrainConfig,
    RestorerParams,
};
use gsr_core::scene::{
    load_cameras, load_cloud_ply, load_image, load_image_pair, make_orbit_cameras, save_cameras, save_cloud_ply,
    save_image, synth_cloud, Camera, GaussianCloud, SignedImage,
};
use gsr_core::{Error, Result};

use crate::{Command, CompressArgs, PipelineArgs};

fn rgb(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Creates the parent directory of an output file.
fn prepare_output(p: &Path) -> Result<&Path> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    Ok(p)
}

/// Loads a cloud from `.gscc` (decoded) or `.ply`.
fn load_any_cloud(path: &Path) -> Result<GaussianCloud> {
    if path.extension().is_some_and(|e| e == "gscc") {
        decompress_cloud(&CompressedCloud::load(path)?)
    } else {
        load_cloud_ply(path)
    }
}

fn view_file(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("view_{view:04}.png"))
}

fn pick_views(cameras: &[Camera], views: Option<Vec<usize>>) -> Result<Vec<usize>> {
    let views = views.unwrap_or_else(|| (0..cameras.len()).collect());
    if let Some(v) = views.iter().find(|v| **v >= cameras.len()) {
        return Err(Error::invalid(format!("view {v} out of range (have {} cameras)", cameras.len())));
    }
    Ok(views)
}

impl CompressArgs {
    fn config(&self) -> CompressionConfig {
        if self.alternate {
            return CompressionConfig::alternate();
        }
        CompressionConfig {
            pos_bits: self.pos_bits,
            scalar_bits: self.scalar_bits,
            dc_bits: self.dc_bits,
            codebook_size: self.codebook_size,
            kmeans_iters: self.kmeans_iters,
            kmeans_seed: self.kmeans_seed,
        }
    }
}

struct LoadedPipeline {
    cloud: GaussianCloud,
    cameras: Vec<Camera>,
    restorer: Option<RestorerParams<f32>>,
    config: PipelineConfig,
}

impl PipelineArgs {
    fn load(&self) -> Result<LoadedPipeline> {
        let config = PipelineConfig {
            compression: self.compress.config(),
            quality: self.quality,
            use_prior: !self.no_prior,
            use_side_info: !self.no_sideinfo,
            include_unsampled: self.include_unsampled,
            holdout_fraction: self.holdout,
            refine: RefineConfig {
                iterations: self.iterations,
                lambda_ssim: self.lambda_ssim,
                sample_ratio: self.ratio,
                background: rgb(&self.background),
                seed: self.seed,
                ..Default::default()
            },
        };
        config.validate()?;
        let restorer = match (&self.restorer, config.use_prior) {
            (Some(p), _) => Some(RestorerParams::load(p)?),
            (None, true) => return Err(Error::invalid("--restorer is required unless --no-prior is given")),
            (None, false) => None,
        };
        Ok(LoadedPipeline {
            cloud: load_cloud_ply(&self.cloud)?,
            cameras: load_cameras(&self.cameras)?,
            restorer,
            config,
        })
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            seed,
            count,
            extent,
            sh_degree,
            out,
        } => {
            let cloud = synth_cloud(seed, count, extent, sh_degree)?;
            save_cloud_ply(&cloud, prepare_output(&out)?)?;
            println!("wrote {} Gaussians to {}", cloud.len(), out.display());
        }
        Command::Cameras {
            count,
            radius,
            look_at,
            width,
            height,
            fov,
            out,
        } => {
            let cams = make_orbit_cameras(count, radius, rgb(&look_at), (width, height), fov)?;
            save_cameras(&cams, prepare_output(&out)?)?;
            println!("wrote {} cameras to {}", cams.len(), out.display());
        }
        Command::Render {
            cloud,
            cameras,
            out_dir,
            views,
            background,
        } => {
            let cloud = load_any_cloud(&cloud)?;
            let cams = load_cameras(&cameras)?;
            mkdir(&out_dir)?;
            for v in pick_views(&cams, views)? {
                save_image(&render_view(&cloud, &cams[v], rgb(&background)), view_file(&out_dir, v))?;
            }
        }
        Command::Compress { cloud, out, args } => {
            let cloud = load_cloud_ply(&cloud)?;
            let cc = compress_cloud(&cloud, &args.config())?;
            cc.save(prepare_output(&out)?)?;
            let raw = cloud.len() * (11 + 3 * cloud.sh_len()) * 4;
            println!(
                "{} Gaussians: {} bytes (ratio {:.2})",
                cloud.len(),
                cc.total_bytes(),
                raw as f64 / cc.total_bytes() as f64
            );
        }
        Command::Decompress { input, out } => {
            let cloud = decompress_cloud(&CompressedCloud::load(&input)?)?;
            save_cloud_ply(&cloud, prepare_output(&out)?)?;
        }
        Command::Pairs {
            clouds,
            cameras,
            quality,
            compress,
            background,
            out,
        } => {
            let clouds = clouds.iter().map(load_cloud_ply).collect::<Result<Vec<_>>>()?;
            let cams = load_cameras(&cameras)?;
            let pairs = build_pair_dataset(&clouds, &cams, &compress.config(), quality, rgb(&background))?;
            save_pairs(prepare_output(&out)?, &pairs)?;
            println!("wrote {} pairs to {}", pairs.len(), out.display());
        }
        Command::TrainRestorer {
            pairs,
            out,
            depth,
            width,
            steps,
            batch,
            patch,
            lr,
            lr_min,
            lambda_grad,
            augment_quality,
            side_dropout,
            seed,
            log,
            checkpoint_dir,
            checkpoint_every,
        } => {
            let mut data = Vec::new();
            for p in &pairs {
                data.extend(load_pairs(p)?);
            }
            let config = RestoreTrainConfig {
                depth,
                width,
                steps,
                batch,
                patch,
                lr,
                lr_min,
                lambda_grad,
                augment_quality: (augment_quality[0], augment_quality[1]),
                side_dropout,
                seed,
                checkpoint_every,
            };
            if let Some(dir) = &checkpoint_dir {
                mkdir(dir)?;
            }
            let result = train_restorer(&data, &config, checkpoint_dir.as_deref())?;
            result.params.save(prepare_output(&out)?)?;
            if let Some(log) = log {
                write_train_log(prepare_output(&log)?, &result.log)?;
            }
            if let Some(last) = result.log.last() {
                println!("final loss {:.6} after {} steps", last.loss.total, steps);
            }
        }
        Command::EncodeResidual {
            original,
            degraded,
            quality,
            out,
        } => {
            let (orig, deg) = load_image_pair(&original, &degraded)?;
            let bs = encode_residual(&orig.residual(&deg)?, quality)?;
            bs.save(prepare_output(&out)?)?;
            println!("{} bytes", bs.total_bytes());
        }
        Command::Restore {
            degraded,
            residual,
            restorer,
            out,
        } => {
            let deg = load_image(&degraded)?;
            let side = match residual {
                Some(p) => decode_residual(&ResidualBitstream::load(&p)?)?,
                None => SignedImage::zeros(deg.width(), deg.height()),
            };
            let restored = match restorer {
                Some(p) => restore_image(&RestorerParams::load(&p)?, &deg, &side)?,
                None => deg.add_residual(&side)?,
            };
            save_image(&restored, prepare_output(&out)?)?;
        }
        Command::Refine {
            cloud,
            cameras,
            targets_dir,
            out,
            iterations,
            lambda_ssim,
            seed,
            background,
            log,
        } => {
            let start = load_any_cloud(&cloud)?;
            let cams = load_cameras(&cameras)?;
            let mut targets = Vec::new();
            for (v, cam) in cams.iter().enumerate() {
                let path = view_file(&targets_dir, v);
                if path.exists() {
                    targets.push((cam.clone(), load_image(&path)?));
                }
            }
            if targets.is_empty() {
                return Err(Error::invalid(format!("no view_NNNN.png targets in {}", targets_dir.display())));
            }
            let config = RefineConfig {
                iterations,
                lambda_ssim,
                background: rgb(&background),
                seed,
                ..Default::default()
            };
            let result = refine_cloud(&start, &targets, &config)?;
            if let Some(w) = &result.warning {
                log::warn!("{w}");
            }
            save_cloud_ply(&result.cloud, prepare_output(&out)?)?;
            if let Some(log) = log {
                result.write_log_csv(prepare_output(&log)?)?;
            }
        }
        Command::Eval {
            cloud,
            reference,
            cameras,
            views,
            background,
            out: out_file,
            error_maps,
        } => {
            let test = load_any_cloud(&cloud)?;
            let gt = load_any_cloud(&reference)?;
            let cams = load_cameras(&cameras)?;
            let bg = rgb(&background);
            let views = pick_views(&cams, views)?;
            let renders: Vec<_> = views
                .iter()
                .map(|&v| (v, render_view(&test, &cams[v], bg), render_view(&gt, &cams[v], bg)))
                .collect();
            let report = evaluate_views(&renders.iter().map(|(v, a, b)| (*v, a, b)).collect::<Vec<_>>())?;
            if let Some(dir) = error_maps {
                mkdir(&dir)?;
                for (v, a, b) in &renders {
                    save_error_map(a, b, &view_file(&dir, *v))?;
                }
            }
            if let Some(path) = out_file {
                write_report_csv(prepare_output(&path)?, &report)?;
            }
            println!(
                "views {} psnr {} ssim {}",
                report.len(),
                format_metric(report.mean_psnr),
                format_metric(report.mean_ssim)
            );
        }
        Command::RdSweep { pipeline, qualities, out } => {
            let p = pipeline.load()?;
            let points = rd_sweep(&p.cloud, &p.cameras, &qualities, &p.config, p.restorer.as_ref())?;
            write_rd_csv(prepare_output(&out)?, &points)?;
            for pt in &points {
                println!("{} {} bytes psnr {}", pt.label, pt.total_bytes, format_metric(pt.psnr));
            }
        }
        Command::Ablate { pipeline, axes, out } => {
            let p = pipeline.load_for_grid()?;
            let rows = ablation_grid(&p.cloud, &p.cameras, &p.config, p.restorer.as_ref(), &axes)?;
            write_ablation_csv(prepare_output(&out)?, &rows)?;
            for r in &rows {
                println!("{} psnr {} {}", r.cell, format_metric(r.psnr), r.status);
            }
        }
        Command::Plot { rd, out } => {
            let mut points = Vec::new();
            for p in &rd {
                points.extend(read_rd_csv(p)?);
            }
            std::fs::write(prepare_output(&out)?, rd_plot_svg(&points)).map_err(|e| Error::io(&out, e))?;
        }
        Command::Run { pipeline, out_dir } => {
            let p = pipeline.load()?;
            let outcome = run_pipeline(&p.cloud, &p.cameras, &p.config, p.restorer.as_ref())?;
            outcome.write_artifacts(&out_dir)?;
            println!(
                "{}: {} + {} bytes, held-out psnr {} (before refinement {})",
                p.config.cell_name(),
                outcome.cloud_bytes(),
                outcome.residual_bytes(),
                format_metric(outcome.report.mean_psnr),
                format_metric(outcome.baseline.mean_psnr)
            );
        }
    }
    Ok(())
}

impl PipelineArgs {
    /// Like [`PipelineArgs::load`], but a grid may toggle the prior off itself,
    /// so a missing restorer is only an error for the cells that need it.
    fn load_for_grid(&self) -> Result<LoadedPipeline> {
        if self.restorer.is_none() && !self.no_prior {
            let mut args = self.clone();
            args.no_prior = true;
            let mut p = args.load()?;
            p.config.use_prior = true;
            return Ok(p);
        }
        self.load()
    }
}
