//! Retrospective Cartesian undersampling and data consistency.
//!
//! The measurement model: a real magnitude image is min-max normalized,
//! transformed with the centered orthonormal FFT, and multiplied by a 1D
//! column mask (phase-encode direction = last axis). Reconstruction starts
//! from the zero-filled inverse transform, and every candidate image can be
//! projected back onto the measurements with [`apply_dc`], which overwrites
//! sampled columns with their measured values exactly.

use crate::error::{Error, Result};
use crate::fft;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Two-channel complex plane stored as a `(2, h, w)` tensor: channel 0 holds
/// the real part, channel 1 the imaginary part. Used for both image-domain
/// and k-space-domain grids.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    data: Tensor,
}

impl ComplexImage {
    /// Wraps a `(2, h, w)` tensor; h and w must be even and at least 8, the
    /// smallest grid on which the masking and wavelet pipeline is defined.
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "complex image expects (2, h, w), got {s:?}"
            )));
        }
        let (h, w) = (s[1], s[2]);
        if h < 8 || w < 8 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "complex image needs even h, w >= 8, got {h}x{w}"
            )));
        }
        Ok(ComplexImage { data })
    }

    /// Promotes a real `(h, w)` image to a complex one with zero imaginary part.
    pub fn from_real(img: &Tensor) -> Result<Self> {
        let s = img.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("expected (h, w), got {s:?}")));
        }
        let (h, w) = (s[0], s[1]);
        let mut data = img.data().to_vec();
        data.extend(std::iter::repeat(0.0).take(h * w));
        ComplexImage::new(Tensor::from_vec(&[2, h, w], data))
    }

    pub fn from_planes(re: Vec<f64>, im: Vec<f64>, h: usize, w: usize) -> Result<Self> {
        assert_eq!(re.len(), h * w);
        assert_eq!(im.len(), h * w);
        let mut data = re;
        data.extend(im);
        ComplexImage::new(Tensor::from_vec(&[2, h, w], data))
    }

    pub fn h(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn re(&self) -> &[f64] {
        &self.data.data()[..self.h() * self.w()]
    }

    pub fn im(&self) -> &[f64] {
        &self.data.data()[self.h() * self.w()..]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Pointwise modulus, `(h, w)`.
    pub fn magnitude(&self) -> Tensor {
        let n = self.h() * self.w();
        let mut out = vec![0.0; n];
        let (re, im) = (self.re(), self.im());
        for i in 0..n {
            out[i] = re[i].hypot(im[i]);
        }
        Tensor::from_vec(&[self.h(), self.w()], out)
    }

    pub fn max_abs_diff(&self, other: &ComplexImage) -> f64 {
        self.data.max_abs_diff(&other.data)
    }
}

/// Rescales a real image to `[0, 1]` by its own extrema.
pub fn normalize_minmax(img: &Tensor) -> Result<Tensor> {
    let (lo, hi) = (img.min(), img.max());
    if !(hi - lo).is_normal() || hi <= lo {
        return Err(Error::ConstantImage);
    }
    Ok(img.map(|x| (x - lo) / (hi - lo)))
}

pub fn image_to_kspace(img: &ComplexImage) -> ComplexImage {
    let (re, im) = fft::fft2c(img.re(), img.im(), img.h(), img.w());
    ComplexImage::from_planes(re, im, img.h(), img.w()).expect("shape preserved")
}

pub fn kspace_to_image(k: &ComplexImage) -> ComplexImage {
    let (re, im) = fft::ifft2c(k.re(), k.im(), k.h(), k.w());
    ComplexImage::from_planes(re, im, k.h(), k.w()).expect("shape preserved")
}

/// Metadata mirrored into the JSON sidecar next to the CSV column pattern.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MaskMeta {
    pub width: usize,
    pub af: usize,
    pub center_fraction: f64,
    pub n_center: usize,
    pub n_total: usize,
    pub seed: u64,
}

/// 1D equispaced Cartesian column mask with a fully sampled center block.
///
/// `n_center = round(center_fraction * width)` contiguous center columns are
/// always kept; the remaining `n_total - n_center` columns (with
/// `n_total = round(width / af)`) are spread equispaced over the complement.
/// The seed shifts the equispaced pattern's phase and nothing else, so counts
/// are exact for every seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    meta: MaskMeta,
    cols: Vec<bool>,
}

impl SamplingMask {
    pub fn equispaced(width: usize, af: usize, center_fraction: f64, seed: u64) -> Result<Self> {
        if width < 2 || af < 1 || !(0.0..=1.0).contains(&center_fraction) {
            return Err(Error::InfeasibleMask(format!(
                "width {width}, af {af}, center fraction {center_fraction} out of range"
            )));
        }
        let n_center = (center_fraction * width as f64).round() as usize;
        let n_total = (width as f64 / af as f64).round() as usize;
        if n_total == 0 || n_total > width {
            return Err(Error::InfeasibleMask(format!(
                "round(width/af) = {n_total} columns not in [1, {width}]"
            )));
        }
        if n_center > n_total {
            return Err(Error::InfeasibleMask(format!(
                "center block of {n_center} columns exceeds total budget of {n_total}"
            )));
        }

        let mut cols = vec![false; width];
        let start = (width - n_center) / 2;
        for c in cols.iter_mut().skip(start).take(n_center) {
            *c = true;
        }

        let k = n_total - n_center;
        if k > 0 {
            let complement: Vec<usize> =
                (0..width).filter(|&i| !(start..start + n_center).contains(&i)).collect();
            let step = complement.len() as f64 / k as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phase: f64 = rng.random_range(0.0..step);
            for m in 0..k {
                // step >= 1, so consecutive floors are strictly increasing
                // and the k picks are distinct.
                let pos = ((phase + m as f64 * step) as usize).min(complement.len() - 1);
                cols[complement[pos]] = true;
            }
        }
        debug_assert_eq!(cols.iter().filter(|&&c| c).count(), n_total);

        Ok(SamplingMask {
            meta: MaskMeta { width, af, center_fraction, n_center, n_total, seed },
            cols,
        })
    }

    pub fn meta(&self) -> &MaskMeta {
        &self.meta
    }

    pub fn width(&self) -> usize {
        self.meta.width
    }

    pub fn n_center(&self) -> usize {
        self.meta.n_center
    }

    pub fn n_total(&self) -> usize {
        self.meta.n_total
    }

    pub fn is_sampled(&self, col: usize) -> bool {
        self.cols[col]
    }

    pub fn cols(&self) -> &[bool] {
        &self.cols
    }

    /// One CSV row of 0/1 flags, one per column.
    pub fn to_csv_line(&self) -> String {
        let cells: Vec<&str> = self.cols.iter().map(|&c| if c { "1" } else { "0" }).collect();
        cells.join(",")
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv_line() + "\n")?;
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::Config(format!("mask metadata: {e}")))?;
        std::fs::write(json_path, json + "\n")?;
        Ok(())
    }

    pub fn load(csv_path: &Path, json_path: &Path) -> Result<Self> {
        let line = std::fs::read_to_string(csv_path)?;
        let mut cols = Vec::new();
        for cell in line.trim().split(',') {
            match cell.trim() {
                "0" => cols.push(false),
                "1" => cols.push(true),
                other => {
                    return Err(Error::CorruptFile(format!(
                        "{}: mask cell {other:?} is not 0/1",
                        csv_path.display()
                    )))
                }
            }
        }
        let meta: MaskMeta = serde_json::from_str(&std::fs::read_to_string(json_path)?)
            .map_err(|e| Error::CorruptFile(format!("{}: {e}", json_path.display())))?;
        if meta.width != cols.len() || cols.iter().filter(|&&c| c).count() != meta.n_total {
            return Err(Error::CorruptFile(format!(
                "{}: pattern disagrees with sidecar counts",
                csv_path.display()
            )));
        }
        Ok(SamplingMask { meta, cols })
    }
}

/// A retrospectively undersampled slice: masked k-space plus its mask.
#[derive(Clone, Debug)]
pub struct Measurement {
    pub kspace: ComplexImage,
    pub mask: SamplingMask,
}

/// Masks the full k-space of `img`, keeping only sampled columns.
pub fn undersample(img: &ComplexImage, mask: &SamplingMask) -> Result<Measurement> {
    if mask.width() != img.w() {
        return Err(Error::ShapeMismatch(format!(
            "mask width {} vs image width {}",
            mask.width(),
            img.w()
        )));
    }
    let full = image_to_kspace(img);
    let (h, w) = (full.h(), full.w());
    let (mut re, mut im) = (full.re().to_vec(), full.im().to_vec());
    for y in 0..h {
        for x in 0..w {
            if !mask.is_sampled(x) {
                re[y * w + x] = 0.0;
                im[y * w + x] = 0.0;
            }
        }
    }
    Ok(Measurement { kspace: ComplexImage::from_planes(re, im, h, w)?, mask: mask.clone() })
}

/// Direct inverse transform of the masked measurements.
pub fn zero_filled(meas: &Measurement) -> ComplexImage {
    kspace_to_image(&meas.kspace)
}

/// Hard data consistency: transforms `pred` to k-space, overwrites every
/// sampled column with the measured values, and transforms back. Sampled
/// columns of the result match the measurements to FFT round-trip precision.
pub fn apply_dc(pred: &ComplexImage, meas: &Measurement) -> Result<ComplexImage> {
    if pred.h() != meas.kspace.h() || pred.w() != meas.kspace.w() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs measurement {}x{}",
            pred.h(),
            pred.w(),
            meas.kspace.h(),
            meas.kspace.w()
        )));
    }
    let k = image_to_kspace(pred);
    let (h, w) = (k.h(), k.w());
    let (mut re, mut im) = (k.re().to_vec(), k.im().to_vec());
    let (mre, mim) = (meas.kspace.re(), meas.kspace.im());
    for y in 0..h {
        for x in 0..w {
            if meas.mask.is_sampled(x) {
                re[y * w + x] = mre[y * w + x];
                im[y * w + x] = mim[y * w + x];
            }
        }
    }
    Ok(kspace_to_image(&ComplexImage::from_planes(re, im, h, w)?))
}

/// Removes all sampled-column content: `ifft2c((1 - M) * fft2c(x))`.
///
/// This is the linear part of [`apply_dc`]; the projector is symmetric as a
/// real-linear map, so it is also its own adjoint, which the backward pass
/// relies on.
pub fn project_unsampled(x: &ComplexImage, mask: &SamplingMask) -> Result<ComplexImage> {
    if mask.width() != x.w() {
        return Err(Error::ShapeMismatch(format!(
            "mask width {} vs image width {}",
            mask.width(),
            x.w()
        )));
    }
    let k = image_to_kspace(x);
    let (h, w) = (k.h(), k.w());
    let (mut re, mut im) = (k.re().to_vec(), k.im().to_vec());
    for y in 0..h {
        for x in 0..w {
            if mask.is_sampled(x) {
                re[y * w + x] = 0.0;
                im[y * w + x] = 0.0;
            }
        }
    }
    Ok(kspace_to_image(&ComplexImage::from_planes(re, im, h, w)?))
}

/// Largest deviation between `fft2c(pred)` and the measurements over sampled
/// columns; the quantity the data-consistency guarantee bounds.
pub fn sampled_column_error(pred: &ComplexImage, meas: &Measurement) -> f64 {
    let k = image_to_kspace(pred);
    let (h, w) = (k.h(), k.w());
    let mut worst = 0.0_f64;
    for y in 0..h {
        for x in 0..w {
            if meas.mask.is_sampled(x) {
                let i = y * w + x;
                worst = worst.max((k.re()[i] - meas.kspace.re()[i]).abs());
                worst = worst.max((k.im()[i] - meas.kspace.im()[i]).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        ComplexImage::new(Tensor::from_vec(&[2, h, w], data)).unwrap()
    }

    #[test]
    fn normalize_spans_unit_interval() {
        let img = Tensor::from_vec(&[1, 3], vec![2.0, 4.0, 6.0]);
        let n = normalize_minmax(&img).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_rejects_constant_image() {
        let img = Tensor::filled(&[4, 4], 3.0);
        assert!(matches!(normalize_minmax(&img), Err(Error::ConstantImage)));
    }

    #[test]
    fn magnitude_of_three_four_is_five() {
        let mut data = vec![0.0; 2 * 64];
        data[0] = 3.0;
        data[64] = 4.0;
        let img = ComplexImage::new(Tensor::from_vec(&[2, 8, 8], data)).unwrap();
        assert_eq!(img.magnitude().data()[0], 5.0);
    }

    // Frozen from the rounding rules: n_center = round(cf * w),
    // n_total = round(w / af).
    #[test]
    fn mask_counts_at_reference_settings() {
        let cases = [
            (320, 4, 0.08, 26, 80),
            (256, 8, 0.04, 10, 32),
            (64, 4, 0.08, 5, 16),
            (8, 1, 0.5, 4, 8),
        ];
        for (w, af, cf, n_center, n_total) in cases {
            let m = SamplingMask::equispaced(w, af, cf, 0).unwrap();
            assert_eq!(m.n_center(), n_center, "center count for w={w} af={af}");
            assert_eq!(m.n_total(), n_total, "total count for w={w} af={af}");
            assert_eq!(m.cols().iter().filter(|&&c| c).count(), n_total);
        }
    }

    #[test]
    fn center_block_is_contiguous_and_centered() {
        let m = SamplingMask::equispaced(320, 4, 0.08, 42).unwrap();
        // 26 center columns starting at (320 - 26) / 2 = 147.
        for c in 147..173 {
            assert!(m.is_sampled(c), "center column {c}");
        }
    }

    #[test]
    fn oversized_center_fraction_is_infeasible() {
        let err = SamplingMask::equispaced(320, 4, 0.9, 0).unwrap_err();
        assert!(matches!(err, Error::InfeasibleMask(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn full_sampling_reconstructs_exactly() {
        let img = random_image(16, 16, 3);
        let mask = SamplingMask::equispaced(16, 1, 0.08, 0).unwrap();
        assert_eq!(mask.n_total(), 16);
        let meas = undersample(&img, &mask).unwrap();
        let zf = zero_filled(&meas);
        assert!(zf.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn dc_restores_sampled_columns_exactly() {
        let img = random_image(16, 24, 5);
        let mask = SamplingMask::equispaced(24, 4, 0.1, 7).unwrap();
        let meas = undersample(&img, &mask).unwrap();
        let pred = random_image(16, 24, 11);
        assert!(sampled_column_error(&pred, &meas) > 1e-3, "pred should start inconsistent");
        let out = apply_dc(&pred, &meas).unwrap();
        assert!(sampled_column_error(&out, &meas) < 1e-12);
    }

    #[test]
    fn dc_preserves_unsampled_columns() {
        let img = random_image(16, 16, 5);
        let mask = SamplingMask::equispaced(16, 2, 0.125, 1).unwrap();
        let meas = undersample(&img, &mask).unwrap();
        let pred = random_image(16, 16, 13);
        let out = apply_dc(&pred, &meas).unwrap();
        let (kp, ko) = (image_to_kspace(&pred), image_to_kspace(&out));
        let w = 16;
        for y in 0..16 {
            for x in 0..w {
                if !meas.mask.is_sampled(x) {
                    let i = y * w + x;
                    assert!((kp.re()[i] - ko.re()[i]).abs() < 1e-12);
                    assert!((kp.im()[i] - ko.im()[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dc_is_idempotent() {
        let img = random_image(16, 16, 2);
        let mask = SamplingMask::equispaced(16, 4, 0.125, 3).unwrap();
        let meas = undersample(&img, &mask).unwrap();
        let pred = random_image(16, 16, 17);
        let once = apply_dc(&pred, &meas).unwrap();
        let twice = apply_dc(&once, &meas).unwrap();
        assert!(twice.max_abs_diff(&once) < 1e-12);
    }

    #[test]
    fn projector_plus_zero_filled_decomposes_dc() {
        // apply_dc(x) = project_unsampled(x) + zero_filled(meas): the output
        // splits into prediction content on unsampled columns plus measured
        // content on sampled ones.
        let img = random_image(16, 16, 21);
        let mask = SamplingMask::equispaced(16, 4, 0.125, 9).unwrap();
        let meas = undersample(&img, &mask).unwrap();
        let pred = random_image(16, 16, 23);
        let dc = apply_dc(&pred, &meas).unwrap();
        let proj = project_unsampled(&pred, &mask).unwrap();
        let zf = zero_filled(&meas);
        let sum = ComplexImage::new(proj.tensor().add(zf.tensor())).unwrap();
        assert!(sum.max_abs_diff(&dc) < 1e-12);
    }

    #[test]
    fn mask_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = SamplingMask::equispaced(64, 4, 0.08, 99).unwrap();
        let csv = dir.path().join("mask.csv");
        let json = dir.path().join("mask.json");
        m.save(&csv, &json).unwrap();
        let again = SamplingMask::load(&csv, &json).unwrap();
        assert_eq!(again, m);
        // The CSV is a single row of width comma-separated 0/1 flags.
        let line = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(line.trim().split(',').count(), 64);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mask_counts_are_exact_for_any_seed(
            wh in 4usize..200,
            af in 1usize..12,
            cf in 0.0f64..0.2,
            seed in 0u64..10_000,
        ) {
            let w = wh * 2;
            let n_total = (w as f64 / af as f64).round() as usize;
            let n_center = (cf * w as f64).round() as usize;
            prop_assume!(n_total >= 1 && n_center <= n_total);
            let m = SamplingMask::equispaced(w, af, cf, seed).unwrap();
            prop_assert_eq!(m.cols().iter().filter(|&&c| c).count(), n_total);
            prop_assert_eq!(m.n_center(), n_center);
        }

        #[test]
        fn same_seed_same_mask(seed in 0u64..10_000) {
            let a = SamplingMask::equispaced(128, 4, 0.08, seed).unwrap();
            let b = SamplingMask::equispaced(128, 4, 0.08, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
