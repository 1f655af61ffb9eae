//! Reconstruction quality metrics and the per-slice evaluation report.
//!
//! All metrics operate on real 2D images (magnitude images in the pipeline).
//! PSNR and SSIM take the nominal data range explicitly; inputs are expected
//! on `[0, 1]` after normalization, so callers pass `1.0`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// PSNR sentinel for an exact match, and the cap for near-exact ones.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    pred.same_shape(gt)?;
    let s = pred.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch(format!("metrics expect (h, w), got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Tensor, gt: &Tensor, data_range: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = gt.len() as f64;
    let mse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized mean squared error `||pred - gt||^2 / ||gt||^2`.
pub fn nmse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let denom = gt.sq_norm();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(num / denom)
}

/// Summed-area table: `s[(y, x)]` holds the sum over the rectangle
/// `[0, y) x [0, x)` of the source image.
fn integral(img: &[f64], h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let (sh, sw) = (h + 1, w + 1);
    let mut s = vec![0.0; sh * sw];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * sw + (x + 1)] = s[y * sw + (x + 1)] + row;
        }
    }
    let _ = img;
    s
}

/// Mean structural similarity over all fully interior 7x7 windows
/// (uniform window, sample covariance). Images must be at least 7x7.
pub fn ssim(pred: &Tensor, gt: &Tensor, data_range: f64) -> Result<f64> {
    let (h, w) = check_pair(pred, gt)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall(format!(
            "{h}x{w} below the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (x, y) = (pred.data(), gt.data());
    let sx = integral(x, h, w, |i| x[i]);
    let sy = integral(y, h, w, |i| y[i]);
    let sxx = integral(x, h, w, |i| x[i] * x[i]);
    let syy = integral(y, h, w, |i| y[i] * y[i]);
    let sxy = integral(x, h, w, |i| x[i] * y[i]);
    let sw = w + 1;
    let rect = |s: &[f64], y0: usize, x0: usize| {
        let (y1, x1) = (y0 + SSIM_WINDOW, x0 + SSIM_WINDOW);
        s[y1 * sw + x1] - s[y0 * sw + x1] - s[y1 * sw + x0] + s[y0 * sw + x0]
    };
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov_norm = n / (n - 1.0);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let ux = rect(&sx, y0, x0) / n;
            let uy = rect(&sy, y0, x0) / n;
            let vx = cov_norm * (rect(&sxx, y0, x0) / n - ux * ux);
            let vy = cov_norm * (rect(&syy, y0, x0) / n - uy * uy);
            let cxy = cov_norm * (rect(&sxy, y0, x0) / n - ux * uy);
            let s = ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// One evaluated slice.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub slice_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

/// Provenance recorded alongside every report.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub af: usize,
    pub mask_hash: String,
    pub checkpoint: String,
}

/// Aggregate view of a report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n_slices: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_nmse: f64,
}

/// Per-slice metric table plus metadata; serialized as a CSV with a JSON
/// sidecar holding the metadata and aggregates.
#[derive(Clone, Debug)]
pub struct ReconReport {
    pub meta: ReportMeta,
    pub slices: Vec<SliceMetrics>,
}

impl ReconReport {
    pub fn new(meta: ReportMeta) -> Self {
        ReconReport { meta, slices: Vec::new() }
    }

    pub fn push(&mut self, slice: SliceMetrics) {
        self.slices.push(slice);
    }

    pub fn summary(&self) -> ReportSummary {
        let n = self.slices.len();
        let mean = |f: fn(&SliceMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.slices.iter().map(f).sum::<f64>() / n as f64
            }
        };
        ReportSummary {
            n_slices: n,
            mean_psnr: mean(|s| s.psnr),
            mean_ssim: mean(|s| s.ssim),
            mean_nmse: mean(|s| s.nmse),
        }
    }

    /// Writes `<path>` as CSV and `<path with .json>` as the sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(csv_path)?;
        writeln!(f, "slice_id,psnr,ssim,nmse")?;
        for s in &self.slices {
            writeln!(f, "{},{:.6},{:.6},{:.8}", s.slice_id, s.psnr, s.ssim, s.nmse)?;
        }
        let sidecar = serde_json::json!({
            "meta": self.meta,
            "summary": self.summary(),
        });
        let json_path = csv_path.with_extension("json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar).unwrap())?;
        Ok(())
    }

    /// Reads a report back (CSV plus sidecar).
    pub fn load(csv_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(csv_path)
            .map_err(|_| Error::MissingDataset(csv_path.display().to_string()))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("slice_id,psnr,ssim,nmse") => {}
            _ => return Err(Error::CorruptFile(format!("{}: bad header", csv_path.display()))),
        }
        let mut slices = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::CorruptFile(format!("{}: bad row {line}", csv_path.display())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::CorruptFile(format!("{}: bad number {s}", csv_path.display())))
            };
            slices.push(SliceMetrics {
                slice_id: parts[0].to_string(),
                psnr: num(parts[1])?,
                ssim: num(parts[2])?,
                nmse: num(parts[3])?,
            });
        }
        let side = csv_path.with_extension("json");
        let meta = match std::fs::read_to_string(&side) {
            Ok(text) => {
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::CorruptFile(format!("{}: {e}", side.display())))?;
                serde_json::from_value(v["meta"].clone())
                    .map_err(|e| Error::CorruptFile(format!("{}: {e}", side.display())))?
            }
            Err(_) => ReportMeta::default(),
        };
        Ok(ReconReport { meta, slices })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn psnr_of_uniform_tenth_offset_is_twenty_db() {
        let gt = rt(12, 12, 1);
        let pred = gt.map(|v| v + 0.1);
        let p = psnr(&pred, &gt, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn psnr_caps_at_sentinel_for_exact_match() {
        let gt = rt(10, 10, 2);
        assert_eq!(psnr(&gt, &gt, 1.0).unwrap(), PSNR_CAP_DB);
        // nearly exact is capped too, never above the sentinel
        let pred = gt.map(|v| v + 1e-12);
        assert_eq!(psnr(&pred, &gt, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_is_scale_covariant_with_data_range() {
        let gt = rt(9, 11, 3);
        let pred = rt(9, 11, 4);
        let a = psnr(&pred, &gt, 1.0).unwrap();
        let b = psnr(&pred.scale(3.0), &gt.scale(3.0), 3.0).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn psnr_drops_as_noise_grows() {
        let gt = rt(16, 16, 5);
        let mut prev = f64::INFINITY;
        for k in 1..5 {
            let pred = gt.map(|v| v + 0.02 * k as f64);
            let p = psnr(&pred, &gt, 1.0).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn nmse_matches_closed_form() {
        let gt = rt(8, 8, 6);
        assert_eq!(nmse(&gt, &gt).unwrap(), 0.0);
        // pred = 1.1 * gt: ||0.1 gt||^2 / ||gt||^2 = 0.01
        let pred = gt.scale(1.1);
        assert!((nmse(&pred, &gt).unwrap() - 0.01).abs() < 1e-12);
        // pred = gt + e_k: nmse = 1 / ||gt||^2
        let mut pred = gt.clone();
        pred.data_mut()[5] += 1.0;
        assert!((nmse(&pred, &gt).unwrap() - 1.0 / gt.sq_norm()).abs() < 1e-12);
    }

    #[test]
    fn nmse_rejects_zero_reference() {
        let z = Tensor::zeros(&[8, 8]);
        assert!(matches!(nmse(&rt(8, 8, 7), &z), Err(Error::ZeroReference)));
    }

    /// Direct double-loop SSIM, computing every window from scratch; the
    /// production path uses summed-area tables, so agreement is meaningful.
    fn ssim_reference(pred: &Tensor, gt: &Tensor, data_range: f64) -> f64 {
        let (h, w) = (pred.shape()[0], pred.shape()[1]);
        let win = 7;
        let n = (win * win) as f64;
        let c1 = (0.01 * data_range).powi(2);
        let c2 = (0.03 * data_range).powi(2);
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let mut xs = Vec::with_capacity(49);
                let mut ys = Vec::with_capacity(49);
                for dy in 0..win {
                    for dx in 0..win {
                        xs.push(pred.at2(y0 + dy, x0 + dx));
                        ys.push(gt.at2(y0 + dy, x0 + dx));
                    }
                }
                let ux = xs.iter().sum::<f64>() / n;
                let uy = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - ux) * (v - ux)).sum::<f64>() / (n - 1.0);
                let vy = ys.iter().map(|v| (v - uy) * (v - uy)).sum::<f64>() / (n - 1.0);
                let cov = xs
                    .iter()
                    .zip(&ys)
                    .map(|(&a, &b)| (a - ux) * (b - uy))
                    .sum::<f64>()
                    / (n - 1.0);
                acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_matches_bruteforce_reference() {
        for (h, w, seed) in [(7, 7, 10), (12, 9, 11), (24, 20, 12)] {
            let gt = rt(h, w, seed);
            let jitter = rt(h, w, seed + 100);
            let pred = Tensor::from_vec(
                &[h, w],
                gt.data()
                    .iter()
                    .zip(jitter.data())
                    .map(|(&g, &j)| (g + 0.2 * (j - 0.5)).clamp(0.0, 1.0))
                    .collect(),
            );
            let fast = ssim(&pred, &gt, 1.0).unwrap();
            let slow = ssim_reference(&pred, &gt, 1.0);
            assert!((fast - slow).abs() <= 1e-7, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_is_one_for_identical_and_symmetric() {
        let a = rt(16, 16, 13);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let b = rt(16, 16, 14);
        let ab = ssim(&a, &b, 1.0).unwrap();
        let ba = ssim(&b, &a, 1.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0);
    }

    #[test]
    fn ssim_degrades_with_noise_amplitude() {
        let gt = rt(20, 20, 15);
        let noise = rt(20, 20, 16);
        let mut prev = 1.0;
        for k in 1..5 {
            let amp = 0.05 * k as f64;
            let pred = Tensor::from_vec(
                &[20, 20],
                gt.data().iter().zip(noise.data()).map(|(&g, &n)| g + amp * (n - 0.5)).collect(),
            );
            let s = ssim(&pred, &gt, 1.0).unwrap();
            assert!(s < prev, "ssim should fall with noise ({s} !< {prev})");
            prev = s;
        }
    }

    #[test]
    fn ssim_rejects_images_below_window() {
        let a = rt(6, 9, 17);
        assert!(matches!(ssim(&a, &a, 1.0), Err(Error::ImageTooSmall(_))));
    }

    #[test]
    fn report_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let meta = ReportMeta {
            dataset: "synthetic".into(),
            af: 4,
            mask_hash: "abc123".into(),
            checkpoint: "deadbeef".into(),
        };
        let mut rep = ReconReport::new(meta);
        rep.push(SliceMetrics { slice_id: "s0".into(), psnr: 31.5, ssim: 0.91, nmse: 0.012 });
        rep.push(SliceMetrics { slice_id: "s1".into(), psnr: 29.25, ssim: 0.88, nmse: 0.02 });
        rep.save(&path).unwrap();

        let back = ReconReport::load(&path).unwrap();
        assert_eq!(back.slices.len(), 2);
        assert_eq!(back.meta.af, 4);
        assert_eq!(back.meta.mask_hash, "abc123");
        assert!((back.slices[1].psnr - 29.25).abs() < 1e-6);
        let sum = back.summary();
        assert_eq!(sum.n_slices, 2);
        assert!((sum.mean_psnr - 30.375).abs() < 1e-6);
        // sidecar exists and carries the summary
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap())
                .unwrap();
        assert_eq!(side["summary"]["n_slices"], 2);
    }
}
