//! Optimization loop: learning-rate schedule, the optimizer, and the fitting
//! driver that shuffles, steps, validates, logs, and checkpoints each epoch.
//!
//! Everything here is deterministic given the config seed: the per-epoch
//! shuffle draws from a stream keyed by `(seed, epoch)` rather than one
//! continuing generator, so resuming from a saved state replays exactly the
//! same batches an uninterrupted run would have seen.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamStore};
use crate::data::SliceSample;
use crate::error::{Error, Result};
use crate::kspace::ComplexImage;
use crate::metrics::{self, ReconReport, ReportMeta, SliceMetrics};
use crate::network::{self, ReconModel};
use crate::tensor::Tensor;

/// Training objective. Only a mean absolute error on the complex image pair
/// is implemented; the enum keeps the config format open to alternatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
}

/// Hyper-parameters for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub af: usize,
    pub center_fraction: f64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_epochs: 5,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            af: 4,
            center_fraction: 0.08,
            loss: LossKind::L1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.af == 0 {
            return Err(Error::Config("acceleration factor must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.center_fraction) {
            return Err(Error::Config(format!(
                "center_fraction must lie in [0, 1], got {}",
                self.center_fraction
            )));
        }
        Ok(())
    }
}

/// Learning rate for a zero-based epoch index: a linear ramp up to `lr`
/// across the warmup epochs, then a half-cosine decay toward zero over the
/// remainder of the schedule.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        let span = (cfg.epochs - cfg.warmup_epochs) as f64;
        let t = (epoch - cfg.warmup_epochs) as f64 / span;
        cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay. Moment buffers are aligned with the
/// parameter store's registration order, matching `Graph::param_grads`.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(ps: &ParamStore) -> Self {
        let m: Vec<Tensor> = ps.ids().map(|id| Tensor::zeros(ps.get(id).shape())).collect();
        let v = m.clone();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `grads[k]` must be the gradient of the
    /// k-th registered parameter.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        let ids: Vec<_> = ps.ids().collect();
        if grads.len() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                ids.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, &id) in ids.iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = ps.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * self.weight_decay * p[i] + lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

const STATE_MAGIC: &[u8; 8] = b"KSSTATE1";

#[derive(Serialize, Deserialize)]
struct StateHeader {
    version: String,
    next_epoch: usize,
    step: u64,
    best_epoch: usize,
    best_val_psnr: f64,
    best_loss: f64,
    last_train_loss: f64,
    shapes: Vec<Vec<usize>>,
}

/// Mutable progress carried across epochs and, through the state file,
/// across interrupted runs.
#[derive(Clone, Debug)]
struct Progress {
    next_epoch: usize,
    best_epoch: usize,
    best_val_psnr: f64,
    best_loss: f64,
    last_train_loss: f64,
}

impl Progress {
    fn fresh() -> Self {
        Progress {
            next_epoch: 0,
            best_epoch: 0,
            best_val_psnr: f64::NEG_INFINITY,
            best_loss: f64::INFINITY,
            last_train_loss: f64::NAN,
        }
    }
}

fn save_train_state(path: &Path, opt: &AdamW, prog: &Progress) -> Result<()> {
    let header = StateHeader {
        version: env!("CARGO_PKG_VERSION").to_string(),
        next_epoch: prog.next_epoch,
        step: opt.step,
        best_epoch: prog.best_epoch,
        best_val_psnr: prog.best_val_psnr,
        best_loss: prog.best_loss,
        last_train_loss: prog.last_train_loss,
        shapes: opt.m.iter().map(|t| t.shape().to_vec()).collect(),
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for t in opt.m.iter().chain(opt.v.iter()) {
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_train_state(path: &Path, ps: &ParamStore) -> Result<(AdamW, Progress)> {
    if !path.exists() {
        return Err(Error::MissingDataset(format!("no training state at {}", path.display())));
    }
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::CorruptFile(format!("{}: {m}", path.display()));
    if bytes.len() < 48 || &bytes[..8] != STATE_MAGIC {
        return Err(bad("bad magic"));
    }
    let body = &bytes[..bytes.len() - 32];
    if Sha256::digest(body).as_slice() != &bytes[bytes.len() - 32..] {
        return Err(bad("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: StateHeader = serde_json::from_slice(
        body.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?,
    )
    .map_err(|e| bad(&e.to_string()))?;
    let expected: Vec<Vec<usize>> = ps.ids().map(|id| ps.get(id).shape().to_vec()).collect();
    if header.shapes != expected {
        return Err(Error::CheckpointMismatch(format!(
            "optimizer state in {} does not match the model's parameters",
            path.display()
        )));
    }
    let n_scalars: usize = expected.iter().map(|s| s.iter().product::<usize>()).sum();
    let payload = body.get(16 + hlen..).ok_or_else(|| bad("truncated payload"))?;
    if payload.len() != 2 * 8 * n_scalars {
        return Err(bad("payload size mismatch"));
    }
    let read_all = |off: usize| -> Vec<Tensor> {
        let mut out = Vec::with_capacity(expected.len());
        let mut pos = off;
        for shape in &expected {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let s = pos + 8 * i;
                data.push(f64::from_le_bytes(payload[s..s + 8].try_into().unwrap()));
            }
            pos += 8 * n;
            out.push(Tensor::from_vec(shape, data));
        }
        out
    };
    let m = read_all(0);
    let v = read_all(8 * n_scalars);
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
        step: header.step,
        m,
        v,
    };
    let prog = Progress {
        next_epoch: header.next_epoch,
        best_epoch: header.best_epoch,
        best_val_psnr: header.best_val_psnr,
        best_loss: header.best_loss,
        last_train_loss: header.last_train_loss,
    };
    Ok((opt, prog))
}

/// Deterministic train/validation split: a slice goes to validation when the
/// first eight bytes of the SHA-256 of its id, read little-endian, land in
/// the lowest tenth of the residues mod 10. The split therefore depends only
/// on slice ids, never on dataset order or size.
pub fn val_split(samples: &[SliceSample]) -> Result<(Vec<usize>, Vec<usize>)> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 samples to split train/val, got {}",
            samples.len()
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let digest = Sha256::digest(s.slice_id.as_bytes());
        let h = u64::from_le_bytes(digest[..8].try_into().unwrap());
        if h % 10 == 0 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    // Degenerate splits are repaired deterministically: move the sample with
    // the lexicographically largest id across.
    if val.is_empty() {
        let k = (0..train.len())
            .max_by(|&a, &b| samples[train[a]].slice_id.cmp(&samples[train[b]].slice_id))
            .unwrap();
        val.push(train.remove(k));
    }
    if train.is_empty() {
        let k = (0..val.len())
            .max_by(|&a, &b| samples[val[a]].slice_id.cmp(&samples[val[b]].slice_id))
            .unwrap();
        train.push(val.remove(k));
    }
    Ok((train, val))
}

/// Runs one optimization step over a batch and returns the mean batch loss.
/// The optimizer is not stepped when the loss is non-finite, so a caller can
/// abort with the parameters still in their pre-explosion state.
pub fn train_step(
    model: &ReconModel,
    ps: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[&SliceSample],
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut acc: Vec<Tensor> = ps.ids().map(|id| Tensor::zeros(ps.get(id).shape())).collect();
    let mut loss_sum = 0.0;
    for s in batch {
        let mut g = Graph::recording();
        let out = model.forward(&mut g, ps, &s.zero_filled, &s.meas)?;
        let tgt = g.leaf(ComplexImage::from_real(&s.target)?.into_tensor());
        let l = g.mean_abs_diff(out, tgt);
        loss_sum += g.value(l).data()[0];
        let grads = g.backward(l);
        for (a, t) in acc.iter_mut().zip(g.param_grads(&grads, ps)) {
            a.add_scaled(&t, scale);
        }
    }
    let loss = loss_sum * scale;
    if loss.is_finite() {
        opt.step(ps, &acc, lr)?;
    }
    Ok(loss)
}

/// Knobs that change how `fit` runs without being model hyper-parameters.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Continue from `train_state.bin` in the output directory. The caller
    /// must pass the parameters loaded from that directory's `last.ckpt`.
    pub resume: bool,
    /// Checkpoint and return after this many epochs of the schedule have
    /// completed, leaving state a later resumed run can pick up. `None`
    /// runs the full schedule.
    pub stop_after: Option<usize>,
}

/// What a (possibly partial) fitting run produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitOutcome {
    pub epochs_run: usize,
    pub next_epoch: usize,
    pub final_train_loss: f64,
    pub best_epoch: usize,
    pub best_val_psnr: f64,
    pub log_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn dump_diagnostics(
    out_dir: &Path,
    epoch: usize,
    step: usize,
    loss: f64,
    ps: &ParamStore,
) -> Result<PathBuf> {
    let params: Vec<serde_json::Value> = ps
        .ids()
        .map(|id| {
            let t = ps.get(id);
            serde_json::json!({
                "name": ps.name(id),
                "abs_max": format!("{:e}", t.abs_max()),
                "l2": format!("{:e}", t.sq_norm().sqrt()),
                "finite": t.is_finite(),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "epoch": epoch,
        "step": step,
        "loss": format!("{loss:e}"),
        "params": params,
    });
    let path = out_dir.join("diagnostics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap())?;
    Ok(path)
}

fn mask_hash(sample: &SliceSample) -> String {
    let digest = Sha256::digest(sample.meas.mask.to_csv_line().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains `model` on `samples`, writing into `out_dir`:
///
/// * `training_log.csv` — one row per epoch,
/// * `reports/epoch_NNN.csv` (+ `.json`) — per-slice validation metrics,
/// * `best.ckpt` — weights with the highest mean validation PSNR so far,
/// * `last.ckpt` + `train_state.bin` — everything needed to resume.
pub fn fit(
    model: &ReconModel,
    ps: &mut ParamStore,
    cfg: &TrainConfig,
    samples: &[SliceSample],
    out_dir: &Path,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let reports_dir = out_dir.join("reports");
    std::fs::create_dir_all(&reports_dir)?;
    let log_path = out_dir.join("training_log.csv");
    let state_path = out_dir.join("train_state.bin");
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    let (train_idx, val_idx) = val_split(samples)?;
    let (mut opt, mut prog) = if opts.resume {
        load_train_state(&state_path, ps)?
    } else {
        (AdamW::new(ps), Progress::fresh())
    };
    if !opts.resume || !log_path.exists() {
        std::fs::write(&log_path, "epoch,lr,train_loss,best_loss,val_psnr,val_ssim,val_nmse\n")?;
    }
    let mut log = std::fs::OpenOptions::new().append(true).open(&log_path)?;

    let start = prog.next_epoch;
    let stop = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut epochs_run = 0usize;
    let mut step_counter = (opt.step_count()) as usize;
    for epoch in start..stop {
        let lr = lr_at(cfg, epoch);

        // The shuffle stream is keyed by (seed, epoch) so that a resumed run
        // sees exactly the batches the uninterrupted run would have.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);

        let mut loss_weighted = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &samples[i]).collect();
            step_counter += 1;
            let loss = train_step(model, ps, &mut opt, &batch, lr)?;
            if !loss.is_finite() {
                let diagnostics = dump_diagnostics(out_dir, epoch, step_counter, loss, ps)?;
                return Err(Error::NonFiniteLoss { step: step_counter, diagnostics });
            }
            loss_weighted += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_weighted / seen as f64;
        prog.last_train_loss = train_loss;
        prog.best_loss = prog.best_loss.min(train_loss);

        let mut report = ReconReport::new(ReportMeta {
            dataset: format!("val[{}]", val_idx.len()),
            af: cfg.af,
            mask_hash: mask_hash(&samples[val_idx[0]]),
            checkpoint: format!("epoch {epoch}"),
        });
        for &i in &val_idx {
            let s = &samples[i];
            let mag = model.reconstruct(ps, &s.meas)?.magnitude();
            report.push(SliceMetrics {
                slice_id: s.slice_id.clone(),
                psnr: metrics::psnr(&mag, &s.target, 1.0)?,
                ssim: metrics::ssim(&mag, &s.target, 1.0)?,
                nmse: metrics::nmse(&mag, &s.target)?,
            });
        }
        let summary = report.summary();
        report.save(&reports_dir.join(format!("epoch_{epoch:03}.csv")))?;

        writeln!(
            log,
            "{epoch},{lr},{train_loss},{},{},{},{}",
            prog.best_loss, summary.mean_psnr, summary.mean_ssim, summary.mean_nmse
        )?;

        let meta = serde_json::json!({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_psnr": summary.mean_psnr,
            "val_ssim": summary.mean_ssim,
            "val_nmse": summary.mean_nmse,
        });
        if summary.mean_psnr > prog.best_val_psnr {
            prog.best_val_psnr = summary.mean_psnr;
            prog.best_epoch = epoch;
            network::save_checkpoint(&best_path, model.config(), ps, meta.clone())?;
        }
        network::save_checkpoint(&last_path, model.config(), ps, meta)?;
        prog.next_epoch = epoch + 1;
        save_train_state(&state_path, &opt, &prog)?;
        epochs_run += 1;
    }

    Ok(FitOutcome {
        epochs_run,
        next_epoch: prog.next_epoch,
        final_train_loss: prog.last_train_loss,
        best_epoch: prog.best_epoch,
        best_val_psnr: prog.best_val_psnr,
        log_path,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Loads `last.ckpt` plus the optimizer state from `out_dir` and continues
/// the schedule where it stopped.
pub fn resume_fit(
    cfg: &TrainConfig,
    samples: &[SliceSample],
    out_dir: &Path,
    stop_after: Option<usize>,
) -> Result<FitOutcome> {
    let (model, mut ps, _meta) = network::load_checkpoint(&out_dir.join("last.ckpt"))?;
    fit(&model, &mut ps, cfg, samples, out_dir, &FitOptions { resume: true, stop_after })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom_dataset;
    use crate::network::{build_model, checkpoint_digest, load_checkpoint, ModelConfig};
    use crate::ssm::ScanConfig;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            k_groups: 1,
            units_per_group: 1,
            patch: 1,
            channels: 2,
            scan: ScanConfig { d_state: 4, conv_kernel: 3, ..ScanConfig::default() },
            ..ModelConfig::default()
        }
    }

    fn tiny_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 2e-3,
            warmup_epochs: 1,
            epochs,
            batch_size: 2,
            seed: 7,
            af: 4,
            center_fraction: 0.08,
            loss: LossKind::L1,
        }
    }

    #[test]
    fn lr_schedule_matches_its_closed_form() {
        let cfg = TrainConfig { lr: 1e-3, warmup_epochs: 5, epochs: 25, ..TrainConfig::default() };
        assert!((lr_at(&cfg, 0) - 2e-4).abs() < 1e-15);
        assert!((lr_at(&cfg, 4) - 1e-3).abs() < 1e-15);
        // The cosine phase starts at full rate and halves at its midpoint.
        assert!((lr_at(&cfg, 5) - 1e-3).abs() < 1e-15);
        assert!((lr_at(&cfg, 15) - 5e-4).abs() < 1e-15);
        for e in 5..24 {
            assert!(lr_at(&cfg, e + 1) < lr_at(&cfg, e));
            assert!(lr_at(&cfg, e) > 0.0);
        }
        let no_warmup = TrainConfig { warmup_epochs: 0, ..cfg };
        assert!((lr_at(&no_warmup, 0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn config_validation_rejects_inconsistent_settings() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { warmup_epochs: 30, ..ok.clone() },
            TrainConfig { warmup_epochs: 31, ..ok.clone() },
            TrainConfig { epochs: 0, warmup_epochs: 0, ..ok.clone() },
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { lr: f64::NAN, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { af: 0, ..ok.clone() },
            TrainConfig { center_fraction: 1.5, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.register("x", Tensor::from_vec(&[3], vec![5.0, -3.0, 2.0]));
        let mut opt = AdamW::new(&ps);
        for _ in 0..600 {
            let grad = ps.get(id).scale(2.0);
            opt.step(&mut ps, &[grad], 0.05).unwrap();
        }
        assert!(ps.get(id).sq_norm() < 1e-4, "left {:?}", ps.get(id).data());
        assert_eq!(opt.step_count(), 600);
    }

    #[test]
    fn optimizer_state_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamStore::new();
        let a = ps.register("a", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]));
        let b = ps.register("b", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]));
        let mut opt = AdamW::new(&ps);
        for k in 0..3 {
            let ga = ps.get(a).map(|x| x * 0.3 + k as f64);
            let gb = ps.get(b).map(|x| x - 0.7);
            opt.step(&mut ps, &[ga, gb], 1e-2).unwrap();
        }
        let prog = Progress {
            next_epoch: 4,
            best_epoch: 2,
            best_val_psnr: 31.5,
            best_loss: 0.125,
            last_train_loss: 0.25,
        };
        let path = dir.path().join("train_state.bin");
        save_train_state(&path, &opt, &prog).unwrap();
        let (opt2, prog2) = load_train_state(&path, &ps).unwrap();
        assert_eq!(opt2.step_count(), 3);
        for k in 0..2 {
            assert_eq!(opt.m[k].data(), opt2.m[k].data());
            assert_eq!(opt.v[k].data(), opt2.v[k].data());
        }
        assert_eq!(prog2.next_epoch, 4);
        assert_eq!(prog2.best_epoch, 2);
        assert_eq!(prog2.best_val_psnr, 31.5);
        assert_eq!(prog2.best_loss, 0.125);
        assert_eq!(prog2.last_train_loss, 0.25);

        // A store with different shapes must be rejected.
        let mut other = ParamStore::new();
        other.register("a", Tensor::zeros(&[2, 2]));
        other.register("b", Tensor::zeros(&[4]));
        assert!(matches!(
            load_train_state(&path, &other),
            Err(Error::CheckpointMismatch(_))
        ));

        // Flipping one payload byte must fail the checksum.
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_train_state(&path, &ps), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn val_split_is_deterministic_and_disjoint() {
        let (_mask, samples) = phantom_dataset(30, 32, 11, 4, 0.08).unwrap();
        let (t1, v1) = val_split(&samples).unwrap();
        let (t2, v2) = val_split(&samples).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert!(!t1.is_empty() && !v1.is_empty());
        assert_eq!(t1.len() + v1.len(), samples.len());
        for i in &v1 {
            assert!(!t1.contains(i));
        }
        // Membership is decided by id alone: a shuffled copy assigns the
        // same ids to validation.
        let mut shuffled: Vec<SliceSample> = samples.clone();
        shuffled.reverse();
        let (_, v3) = val_split(&shuffled).unwrap();
        let ids1: Vec<&str> = v1.iter().map(|&i| samples[i].slice_id.as_str()).collect();
        let mut ids3: Vec<&str> =
            v3.iter().map(|&i| shuffled[i].slice_id.as_str()).collect();
        ids3.reverse();
        assert_eq!(ids1, ids3);
        assert!(val_split(&samples[..1]).is_err());
    }

    #[test]
    fn fit_descends_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (_mask, samples) = phantom_dataset(5, 32, 3, 4, 0.08).unwrap();
        let (model, mut ps) = build_model(&tiny_model_cfg(), 5).unwrap();
        let cfg = tiny_train_cfg(3);
        let out =
            fit(&model, &mut ps, &cfg, &samples, dir.path(), &FitOptions::default()).unwrap();
        assert_eq!(out.epochs_run, 3);
        assert_eq!(out.next_epoch, 3);

        let log = std::fs::read_to_string(&out.log_path).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], "epoch,lr,train_loss,best_loss,val_psnr,val_ssim,val_nmse");
        assert_eq!(lines.len(), 1 + cfg.epochs);
        let rows: Vec<Vec<f64>> = lines[1..]
            .iter()
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect();
        for (e, r) in rows.iter().enumerate() {
            assert_eq!(r[0] as usize, e);
            assert!((r[1] - lr_at(&cfg, e)).abs() < 1e-15);
        }
        // best_loss is the running minimum of train_loss.
        let mut running = f64::INFINITY;
        for r in &rows {
            running = running.min(r[2]);
            assert_eq!(r[3], running);
        }
        // The final epoch must have improved on the initial one.
        assert!(
            rows.last().unwrap()[2] < rows[0][2],
            "no descent: {} -> {}",
            rows[0][2],
            rows.last().unwrap()[2]
        );

        for e in 0..cfg.epochs {
            assert!(dir.path().join(format!("reports/epoch_{e:03}.csv")).exists());
        }
        assert!(dir.path().join("train_state.bin").exists());
        let (_m, _ps2, meta) = load_checkpoint(&out.best_checkpoint).unwrap();
        let best_row_psnr = rows
            .iter()
            .map(|r| r[4])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((meta["val_psnr"].as_f64().unwrap() - best_row_psnr).abs() < 1e-12);
        assert_eq!(meta["epoch"].as_u64().unwrap() as usize, out.best_epoch);
        assert!((out.best_val_psnr - best_row_psnr).abs() < 1e-12);
        assert!(out.last_checkpoint.exists());
    }

    #[test]
    fn same_seed_runs_are_checksum_identical() {
        let (_mask, samples) = phantom_dataset(4, 32, 9, 4, 0.08).unwrap();
        let cfg = tiny_train_cfg(2);
        let mut digests = Vec::new();
        let mut logs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let (model, mut ps) = build_model(&tiny_model_cfg(), 5).unwrap();
            let out =
                fit(&model, &mut ps, &cfg, &samples, dir.path(), &FitOptions::default())
                    .unwrap();
            digests.push((
                checkpoint_digest(&out.best_checkpoint).unwrap(),
                checkpoint_digest(&out.last_checkpoint).unwrap(),
            ));
            logs.push(std::fs::read_to_string(&out.log_path).unwrap());
        }
        assert_eq!(digests[0], digests[1]);
        assert_eq!(logs[0], logs[1]);
    }

    #[test]
    fn resumed_run_matches_an_uninterrupted_one() {
        let (_mask, samples) = phantom_dataset(5, 32, 21, 4, 0.08).unwrap();
        let cfg = tiny_train_cfg(3);

        let full_dir = tempfile::tempdir().unwrap();
        let (model, mut ps) = build_model(&tiny_model_cfg(), 5).unwrap();
        let full =
            fit(&model, &mut ps, &cfg, &samples, full_dir.path(), &FitOptions::default())
                .unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        let (model2, mut ps2) = build_model(&tiny_model_cfg(), 5).unwrap();
        let part = fit(
            &model2,
            &mut ps2,
            &cfg,
            &samples,
            part_dir.path(),
            &FitOptions { resume: false, stop_after: Some(2) },
        )
        .unwrap();
        assert_eq!(part.epochs_run, 2);
        assert_eq!(part.next_epoch, 2);

        let resumed = resume_fit(&cfg, &samples, part_dir.path(), None).unwrap();
        assert_eq!(resumed.epochs_run, 1);
        assert_eq!(resumed.next_epoch, 3);
        assert!((resumed.final_train_loss - full.final_train_loss).abs() < 1e-6);

        assert_eq!(
            checkpoint_digest(&full.last_checkpoint).unwrap(),
            checkpoint_digest(&resumed.last_checkpoint).unwrap()
        );
        assert_eq!(
            checkpoint_digest(&full.best_checkpoint).unwrap(),
            checkpoint_digest(&resumed.best_checkpoint).unwrap()
        );
        let log_a = std::fs::read_to_string(&full.log_path).unwrap();
        let log_b = std::fs::read_to_string(&resumed.log_path).unwrap();
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn non_finite_loss_aborts_with_a_diagnostics_dump() {
        let dir = tempfile::tempdir().unwrap();
        let (_mask, samples) = phantom_dataset(3, 32, 2, 4, 0.08).unwrap();
        let (model, mut ps) = build_model(&tiny_model_cfg(), 5).unwrap();
        let id = ps.find("embed.weight").unwrap();
        for x in ps.get_mut(id).data_mut() {
            *x = 1e300;
        }
        let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, ..tiny_train_cfg(3) };
        let err = fit(&model, &mut ps, &cfg, &samples, dir.path(), &FitOptions::default())
            .unwrap_err();
        match err {
            Error::NonFiniteLoss { step, diagnostics } => {
                assert_eq!(step, 1);
                let doc: serde_json::Value =
                    serde_json::from_str(&std::fs::read_to_string(&diagnostics).unwrap())
                        .unwrap();
                assert_eq!(doc["step"], 1);
                assert!(doc["params"].as_array().unwrap().len() > 5);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
        // The poisoned weights were not stepped into m/v garbage: the value
        // is exactly what the test wrote.
        assert_eq!(ps.get(id).data()[0], 1e300);
    }
}
