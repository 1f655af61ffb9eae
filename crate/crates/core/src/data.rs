//! Dataset generation, persistence, and scanner-export ingestion.
//!
//! The synthetic path rasterizes random-ellipse phantoms; the ingestion path
//! reads HDF5 volumes holding either reconstructed slices or raw k-space.
//! Either way a dataset run pairs every target slice with measurements taken
//! through one shared sampling mask.

use crate::error::{Error, Result};
use crate::hdf5;
use crate::kspace::{self, normalize_minmax, ComplexImage, Measurement, SamplingMask};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One training/evaluation example.
#[derive(Clone, Debug)]
pub struct SliceSample {
    pub slice_id: String,
    /// Ground-truth magnitude image on `[0, 1]`, `(h, w)`.
    pub target: Tensor,
    /// Inverse transform of the masked measurements.
    pub zero_filled: ComplexImage,
    pub meas: Measurement,
}

/// Dataset names the ingester recognizes, in preference order.
const VOLUME_DATASETS: &[&str] =
    &["reconstruction_esc", "reconstruction_rss", "reconstruction", "kspace"];

fn add_ellipse(
    img: &mut Tensor,
    size: usize,
    (cx, cy): (f64, f64),
    (a, b): (f64, f64),
    theta: f64,
    value: f64,
) {
    let (sin, cos) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            // pixel center in [-1, 1] coordinates
            let px = (2.0 * x as f64 + 1.0) / size as f64 - 1.0 - cx;
            let py = (2.0 * y as f64 + 1.0) / size as f64 - 1.0 - cy;
            let u = px * cos + py * sin;
            let v = -px * sin + py * cos;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                img.data_mut()[y * size + x] += value;
            }
        }
    }
}

fn ellipse_phantom(size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut img = Tensor::zeros(&[size, size]);
    // outer shell
    add_ellipse(
        &mut img,
        size,
        (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        (rng.random_range(0.72..0.9), rng.random_range(0.66..0.86)),
        rng.random_range(-0.25..0.25),
        rng.random_range(0.7..1.0),
    );
    // interior structures, additive and subtractive
    let n_inner = rng.random_range(4..=7);
    for _ in 0..n_inner {
        let sign = if rng.random_range(0.0..1.0) < 0.4 { -1.0 } else { 1.0 };
        add_ellipse(
            &mut img,
            size,
            (rng.random_range(-0.45..0.45), rng.random_range(-0.45..0.45)),
            (rng.random_range(0.06..0.38), rng.random_range(0.06..0.38)),
            rng.random_range(-1.5..1.5),
            sign * rng.random_range(0.1..0.55),
        );
    }
    for v in img.data_mut() {
        *v = v.max(0.0);
    }
    normalize_minmax(&img)
}

/// Deterministic random-ellipse phantoms: `(slice id, target image)` pairs.
/// `size` must be even and at least 32; every sample derives its own child
/// seed, so prefixes of longer runs coincide with shorter ones.
pub fn phantom_images(n: usize, size: usize, seed: u64) -> Result<Vec<(String, Tensor)>> {
    if n == 0 {
        return Err(Error::Config("phantom count must be >= 1".into()));
    }
    if size < 32 || size % 2 != 0 {
        return Err(Error::Config(format!(
            "phantom size must be even and >= 32, got {size}"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let child = master.random::<u64>();
        let mut rng = ChaCha8Rng::seed_from_u64(child);
        out.push((format!("phantom{i:04}"), ellipse_phantom(size, &mut rng)?));
    }
    Ok(out)
}

/// Undersamples every target through one shared mask.
pub fn build_samples(
    images: Vec<(String, Tensor)>,
    af: usize,
    center_fraction: f64,
    mask_seed: u64,
) -> Result<(SamplingMask, Vec<SliceSample>)> {
    let width = match images.first() {
        Some((_, img)) => img.shape()[1],
        None => return Err(Error::Config("empty dataset".into())),
    };
    let mask = SamplingMask::equispaced(width, af, center_fraction, mask_seed)?;
    let mut samples = Vec::with_capacity(images.len());
    for (slice_id, target) in images {
        let ci = ComplexImage::from_real(&target)?;
        let meas = kspace::undersample(&ci, &mask)?;
        let zero_filled = kspace::zero_filled(&meas);
        samples.push(SliceSample { slice_id, target, zero_filled, meas });
    }
    Ok((mask, samples))
}

/// Phantom generation plus undersampling in one step.
pub fn phantom_dataset(
    n: usize,
    size: usize,
    seed: u64,
    af: usize,
    center_fraction: f64,
) -> Result<(SamplingMask, Vec<SliceSample>)> {
    build_samples(phantom_images(n, size, seed)?, af, center_fraction, seed)
}

/// Reads one scanner-export volume and returns its usable slices as
/// `(slice id, normalized magnitude image)`. `slice_trim` slices are dropped
/// from each end of the stack, where anatomy is typically absent.
pub fn ingest_volume(path: &Path, slice_trim: usize) -> Result<Vec<(String, Tensor)>> {
    let (name, vol) = hdf5::read_volume(path, VOLUME_DATASETS)?;
    let (n, h, w) = match vol.dims.as_slice() {
        [n, h, w] => (*n, *h, *w),
        [h, w] => (1, *h, *w),
        other => {
            return Err(Error::CorruptFile(format!(
                "{}: dataset {name} has rank {} (expected 2 or 3)",
                path.display(),
                other.len()
            )))
        }
    };
    if n <= 2 * slice_trim {
        return Err(Error::EmptyVolume(format!(
            "{}: {n} slices with {slice_trim} trimmed from each end",
            path.display()
        )));
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut out = Vec::with_capacity(n - 2 * slice_trim);
    for s in slice_trim..n - slice_trim {
        let off = s * h * w;
        let plane = match &vol.im {
            // k-space slices: inverse transform, then magnitude
            Some(im) => {
                let ci = ComplexImage::from_planes(
                    vol.re[off..off + h * w].to_vec(),
                    im[off..off + h * w].to_vec(),
                    h,
                    w,
                )?;
                kspace::kspace_to_image(&ci).magnitude()
            }
            None => Tensor::from_vec(&[h, w], vol.re[off..off + h * w].to_vec()),
        };
        out.push((format!("{stem}_s{s:03}"), normalize_minmax(&plane)?));
    }
    Ok(out)
}

// ----- dataset directory persistence -----

/// Manifest describing a simulated dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub kind: String,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub af: usize,
    pub center_fraction: f64,
    pub slices: Vec<String>,
}

const SLICE_MAGIC: &[u8; 8] = b"KSSLICE1";

/// Writes one raw magnitude tensor in the dataset slice format.
pub fn write_slice(path: &Path, img: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * img.len());
    buf.extend_from_slice(SLICE_MAGIC);
    buf.extend_from_slice(&(img.shape()[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(img.shape()[1] as u32).to_le_bytes());
    for &v in img.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a tensor written by [`write_slice`].
pub fn read_slice(path: &Path) -> Result<Tensor> {
    let buf = std::fs::read(path).map_err(|_| Error::MissingDataset(path.display().to_string()))?;
    if buf.len() < 16 || &buf[..8] != SLICE_MAGIC {
        return Err(Error::CorruptFile(format!("{}: bad slice header", path.display())));
    }
    let h = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    if buf.len() != 16 + 8 * h * w {
        return Err(Error::CorruptFile(format!("{}: truncated slice", path.display())));
    }
    let data: Vec<f64> = buf[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(&[h, w], data))
}

/// Writes a dataset directory: `manifest.json`, the shared mask as
/// `mask.csv`/`mask.json`, and one raw tensor file per slice. Output bytes
/// are a pure function of the inputs.
pub fn save_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    mask: &SamplingMask,
    samples: &[SliceSample],
) -> Result<()> {
    std::fs::create_dir_all(dir.join("slices"))?;
    let mani = serde_json::to_string_pretty(manifest).unwrap();
    std::fs::write(dir.join("manifest.json"), mani)?;
    mask.save(&dir.join("mask.csv"), &dir.join("mask.json"))?;
    for s in samples {
        write_slice(&dir.join("slices").join(format!("{}.bin", s.slice_id)), &s.target)?;
    }
    Ok(())
}

/// Loads a dataset directory, re-deriving the measurements from the stored
/// targets and mask.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, SamplingMask, Vec<SliceSample>)> {
    let mani_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mani_path)
        .map_err(|_| Error::MissingDataset(mani_path.display().to_string()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptFile(format!("{}: {e}", mani_path.display())))?;
    let mask = SamplingMask::load(&dir.join("mask.csv"), &dir.join("mask.json"))?;
    let mut samples = Vec::with_capacity(manifest.slices.len());
    for id in &manifest.slices {
        let target = read_slice(&dir.join("slices").join(format!("{id}.bin")))?;
        let ci = ComplexImage::from_real(&target)?;
        let meas = kspace::undersample(&ci, &mask)?;
        let zero_filled = kspace::zero_filled(&meas);
        samples.push(SliceSample { slice_id: id.clone(), target, zero_filled, meas });
    }
    Ok((manifest, mask, samples))
}
