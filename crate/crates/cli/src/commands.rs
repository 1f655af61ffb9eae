//! The five pipeline commands. Each validates its inputs, does the work via
//! the core library, prints a short human summary, and records a manifest.

use std::path::{Path, PathBuf};

use kscan::config::{DataKind, RunConfig};
use kscan::data::{self, DatasetManifest, SliceSample};
use kscan::error::Result;
use kscan::kspace::{self, SamplingMask};
use kscan::metrics::{self, ReconReport, ReportMeta, SliceMetrics};
use kscan::network::{self, load_checkpoint, ModelConfig, ReconModel};
use kscan::ssm::{ConvPlacement, GateMode};
use kscan::tensor::Tensor;
use kscan::training::{fit, resume_fit, val_split, FitOptions, FitOutcome};

use crate::manifest::{ensure_fresh_run_dir, RunManifest};
use crate::preview::write_gray_png;

/// Upper clip for difference-image previews; errors above this render white.
const ERROR_MAP_CLIP: f64 = 0.2;

pub struct Ctx {
    pub cfg: RunConfig,
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
}

impl Ctx {
    fn begin(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::begin(
            command,
            self.config_path.as_deref(),
            &self.out,
            Some(self.cfg.train.seed),
        );
        m.input_text("config_effective", &self.cfg.to_toml_string());
        m
    }

    /// Copies the effective (post-override) config next to the artifacts so
    /// the run is reproducible without the original file.
    fn snapshot_config(&self) -> Result<()> {
        self.cfg.save(&self.out.join("config.toml"))
    }
}

fn dataset_manifest_for(
    cfg: &RunConfig,
    samples: &[SliceSample],
    mask: &SamplingMask,
) -> DatasetManifest {
    let kind = match cfg.data.kind {
        DataKind::Phantom => "phantom",
        DataKind::Volumes => "volumes",
    };
    DatasetManifest {
        kind: kind.to_string(),
        n: samples.len(),
        height: samples[0].target.shape()[0],
        width: samples[0].target.shape()[1],
        seed: cfg.train.seed,
        af: mask.meta().af,
        center_fraction: mask.meta().center_fraction,
        slices: samples.iter().map(|s| s.slice_id.clone()).collect(),
    }
}

pub fn cmd_simulate(ctx: &Ctx) -> Result<()> {
    ensure_fresh_run_dir(&ctx.out, false)?;
    let mut manifest = ctx.begin("simulate");
    let t = &ctx.cfg.train;
    let (mask, samples) = ctx.cfg.data.build_dataset(t.af, t.center_fraction, t.seed)?;
    let ds_dir = ctx.out.join("dataset");
    let ds_manifest = dataset_manifest_for(&ctx.cfg, &samples, &mask);
    data::save_dataset(&ds_dir, &ds_manifest, &mask, &samples)?;
    ctx.snapshot_config()?;
    println!(
        "simulate: wrote {} slices of {}x{} (AF={}, {} of {} columns sampled) to {}",
        samples.len(),
        ds_manifest.height,
        ds_manifest.width,
        mask.meta().af,
        mask.meta().n_total,
        mask.meta().width,
        ds_dir.display()
    );
    manifest.output_file("dataset_manifest", &ds_dir.join("manifest.json"))?;
    manifest.output_file("mask_csv", &ds_dir.join("mask.csv"))?;
    for s in &samples {
        manifest.output_file(
            &format!("slice:{}", s.slice_id),
            &ds_dir.join("slices").join(format!("{}.bin", s.slice_id)),
        )?;
    }
    manifest.finish()?;
    Ok(())
}

/// Samples for training/evaluation: an explicit dataset directory wins;
/// otherwise the config's data source is materialized in memory.
fn obtain_samples(
    cfg: &RunConfig,
    dataset: Option<&Path>,
) -> Result<(Option<DatasetManifest>, Vec<SliceSample>)> {
    match dataset {
        Some(dir) => {
            let (m, _mask, samples) = data::load_dataset(dir)?;
            Ok((Some(m), samples))
        }
        None => {
            let t = &cfg.train;
            let (_mask, samples) = cfg.data.build_dataset(t.af, t.center_fraction, t.seed)?;
            Ok((None, samples))
        }
    }
}

pub fn cmd_train(ctx: &Ctx, dataset: Option<&Path>, resume: bool) -> Result<()> {
    ensure_fresh_run_dir(&ctx.out, resume)?;
    let mut manifest = ctx.begin("train");
    if let Some(dir) = dataset {
        manifest.input_file("dataset_manifest", &dir.join("manifest.json"))?;
    }
    let (_ds, samples) = obtain_samples(&ctx.cfg, dataset)?;
    let outcome: FitOutcome = if resume {
        resume_fit(&ctx.cfg.train, &samples, &ctx.out, None)?
    } else {
        let (model, mut ps) = network::build_model(&ctx.cfg.model, ctx.cfg.train.seed)?;
        fit(&model, &mut ps, &ctx.cfg.train, &samples, &ctx.out, &FitOptions::default())?
    };
    ctx.snapshot_config()?;
    println!(
        "train: {} epochs over {} slices; best val PSNR {:.3} dB at epoch {}; final train loss {:.6}",
        outcome.next_epoch,
        samples.len(),
        outcome.best_val_psnr,
        outcome.best_epoch,
        outcome.final_train_loss
    );
    println!("train: log {}", outcome.log_path.display());
    manifest.output_file("best_checkpoint", &outcome.best_checkpoint)?;
    manifest.output_file("last_checkpoint", &outcome.last_checkpoint)?;
    manifest.output_file("training_log", &outcome.log_path)?;
    manifest.finish()?;
    Ok(())
}

pub fn cmd_reconstruct(
    ctx: &Ctx,
    checkpoint: &Path,
    dataset: &Path,
    limit: Option<usize>,
) -> Result<()> {
    ensure_fresh_run_dir(&ctx.out, false)?;
    let mut manifest = ctx.begin("reconstruct");
    manifest.input_file("checkpoint", checkpoint)?;
    manifest.input_file("dataset_manifest", &dataset.join("manifest.json"))?;
    let (model, ps, _meta) = load_checkpoint(checkpoint)?;
    let (_m, _mask, samples) = data::load_dataset(dataset)?;
    let n = limit.unwrap_or(samples.len()).min(samples.len());
    for sub in ["png", "raw", "error"] {
        std::fs::create_dir_all(ctx.out.join(sub))?;
    }
    let mut worst_residual = 0.0f64;
    for s in samples.iter().take(n) {
        let recon = model.reconstruct(&ps, &s.meas)?;
        worst_residual = worst_residual.max(kspace::sampled_column_error(&recon, &s.meas));
        let mag = recon.magnitude();
        let err = mag.zip(&s.target, |a, b| (a - b).abs().min(ERROR_MAP_CLIP));
        data::write_slice(&ctx.out.join("raw").join(format!("{}.bin", s.slice_id)), &mag)?;
        write_gray_png(&ctx.out.join("png").join(format!("{}.png", s.slice_id)), &mag, 0.0, 1.0)?;
        write_gray_png(
            &ctx.out.join("error").join(format!("{}.png", s.slice_id)),
            &err,
            0.0,
            ERROR_MAP_CLIP,
        )?;
    }
    ctx.snapshot_config()?;
    println!(
        "reconstruct: {} slices -> {}; max sampled-column residual {:.2e}",
        n,
        ctx.out.display(),
        worst_residual
    );
    for s in samples.iter().take(n) {
        manifest
            .output_file(&format!("raw:{}", s.slice_id), &ctx.out.join("raw").join(format!("{}.bin", s.slice_id)))?;
    }
    manifest.finish()?;
    Ok(())
}

/// Rebuilds measurements at a different acceleration factor from the stored
/// fully sampled targets, for protocol-style sweeps over one dataset.
fn resample(samples: &[SliceSample], af: usize, cf: f64, seed: u64) -> Result<Vec<SliceSample>> {
    let images: Vec<(String, Tensor)> =
        samples.iter().map(|s| (s.slice_id.clone(), s.target.clone())).collect();
    Ok(data::build_samples(images, af, cf, seed)?.1)
}

pub fn cmd_evaluate(ctx: &Ctx, checkpoint: Option<&Path>, dataset: &Path, af: Option<usize>) -> Result<()> {
    ensure_fresh_run_dir(&ctx.out, false)?;
    let mut manifest = ctx.begin("evaluate");
    manifest.input_file("dataset_manifest", &dataset.join("manifest.json"))?;
    let (ds, _mask, mut samples) = data::load_dataset(dataset)?;
    if let Some(af) = af {
        if af != ds.af {
            samples = resample(&samples, af, ds.center_fraction, ds.seed)?;
        }
    }
    let model: Option<(ReconModel, _)> = match checkpoint {
        Some(p) => {
            manifest.input_file("checkpoint", p)?;
            let (m, ps, _) = load_checkpoint(p)?;
            Some((m, ps))
        }
        None => None,
    };
    let label = checkpoint
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "zero-filled".to_string());
    let mask_line = samples[0].meas.mask.to_csv_line();
    let mut report = ReconReport::new(ReportMeta {
        dataset: dataset.display().to_string(),
        af: samples[0].meas.mask.meta().af,
        mask_hash: crate::manifest::sha256_bytes(mask_line.as_bytes()),
        checkpoint: label.clone(),
    });
    for s in &samples {
        let mag = match &model {
            Some((m, ps)) => m.reconstruct(ps, &s.meas)?.magnitude(),
            None => kspace::zero_filled(&s.meas).magnitude(),
        };
        report.push(SliceMetrics {
            slice_id: s.slice_id.clone(),
            psnr: metrics::psnr(&mag, &s.target, 1.0)?,
            ssim: metrics::ssim(&mag, &s.target, 1.0)?,
            nmse: metrics::nmse(&mag, &s.target)?,
        });
    }
    let report_path = ctx.out.join("report.csv");
    report.save(&report_path)?;
    ctx.snapshot_config()?;
    let s = report.summary();
    println!(
        "evaluate [{label}]: {} slices — PSNR {:.3} dB, SSIM {:.4}, NMSE {:.5}",
        s.n_slices, s.mean_psnr, s.mean_ssim, s.mean_nmse
    );
    manifest.output_file("report_csv", &report_path)?;
    manifest.output_file("report_json", &report_path.with_extension("json"))?;
    manifest.finish()?;
    Ok(())
}

pub fn gate_name(g: GateMode) -> &'static str {
    match g {
        GateMode::GateBc => "gate_bc",
        GateMode::GateAll => "gate_all",
        GateMode::GatePre => "gate_pre",
    }
}

pub fn placement_name(p: ConvPlacement) -> &'static str {
    match p {
        ConvPlacement::PostSplit => "post_split",
        ConvPlacement::PreSplit => "pre_split",
    }
}

pub fn cmd_ablate(ctx: &Ctx) -> Result<()> {
    ensure_fresh_run_dir(&ctx.out, false)?;
    let mut manifest = ctx.begin("ablate");
    let t = &ctx.cfg.train;
    let (_mask, samples) = ctx.cfg.data.build_dataset(t.af, t.center_fraction, t.seed)?;
    let (_, val_idx) = val_split(&samples)?;
    let mut zf_val = 0.0;
    for &i in &val_idx {
        let s = &samples[i];
        zf_val += metrics::psnr(&s.zero_filled.magnitude(), &s.target, 1.0)?;
    }
    zf_val /= val_idx.len() as f64;

    let gates = [GateMode::GateBc, GateMode::GateAll, GateMode::GatePre];
    let placements = [ConvPlacement::PostSplit, ConvPlacement::PreSplit];
    let kernels = [3usize, 5, 7];
    let default = ctx.cfg.model.scan.clone();

    let mut rows: Vec<(String, String, usize, f64, f64, bool)> = Vec::new();
    for &gate in &gates {
        for &placement in &placements {
            for &kernel in &kernels {
                let mut mc: ModelConfig = ctx.cfg.model.clone();
                mc.scan.gate_mode = gate;
                mc.scan.conv_placement = placement;
                mc.scan.conv_kernel = kernel;
                let run_dir = ctx.out.join(format!(
                    "runs/{}_{}_{}",
                    gate_name(gate),
                    placement_name(placement),
                    kernel
                ));
                let (model, mut ps) = network::build_model(&mc, t.seed)?;
                let outcome =
                    fit(&model, &mut ps, t, &samples, &run_dir, &FitOptions::default())?;
                let (_m, _ps, meta) = load_checkpoint(&outcome.best_checkpoint)?;
                let ssim = meta["val_ssim"].as_f64().unwrap_or(f64::NAN);
                let is_default = gate == default.gate_mode
                    && placement == default.conv_placement
                    && kernel == default.conv_kernel;
                println!(
                    "ablate: ({}, {}, k={}) -> {:.3} dB{}",
                    gate_name(gate),
                    placement_name(placement),
                    kernel,
                    outcome.best_val_psnr,
                    if is_default { "  [default]" } else { "" }
                );
                rows.push((
                    gate_name(gate).to_string(),
                    placement_name(placement).to_string(),
                    kernel,
                    outcome.best_val_psnr,
                    ssim,
                    is_default,
                ));
            }
        }
    }

    let mut csv = String::from("gate_mode,conv_placement,kernel,val_psnr,val_ssim,default\n");
    for (g, p, k, psnr, ssim, d) in &rows {
        csv.push_str(&format!("{g},{p},{k},{psnr:.6},{ssim:.6},{d}\n"));
    }
    let csv_path = ctx.out.join("ablation.csv");
    std::fs::write(&csv_path, &csv)?;

    let mut md = String::new();
    md.push_str(&format!(
        "Structural sweep over {} slices (zero-filled baseline {:.3} dB val PSNR).\n\n",
        samples.len(),
        zf_val
    ));
    md.push_str("| gate mode | conv placement | kernel | val PSNR (dB) | val SSIM |\n");
    md.push_str("|---|---|---|---|---|\n");
    for (g, p, k, psnr, ssim, d) in &rows {
        let marker = if *d { " **(default)**" } else { "" };
        md.push_str(&format!("| {g}{marker} | {p} | {k} | {psnr:.3} | {ssim:.4} |\n"));
    }
    let md_path = ctx.out.join("ablation.md");
    std::fs::write(&md_path, &md)?;

    ctx.snapshot_config()?;
    println!("ablate: {} rows -> {}", rows.len(), csv_path.display());
    manifest.output_file("ablation_csv", &csv_path)?;
    manifest.output_file("ablation_md", &md_path)?;
    manifest.finish()?;
    Ok(())
}
