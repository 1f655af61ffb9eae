//! The unrolled reconstruction network and its checkpoint format.
//!
//! A model embeds the zero-filled complex image into patch tokens, applies
//! `k_groups` groups of [`GuidedUnit`]s — each group re-imposing measured
//! k-space columns in image space between groups — then projects back to an
//! image and applies a final hard data-consistency step. That last step is
//! structural: whatever the weights, sampled k-space columns of the output
//! equal the measurements.

use crate::autodiff::{accum_slot, Graph, ParamId, ParamStore, Var};
use crate::blocks::{GuidedUnit, UnitConfig};
use crate::error::{Error, Result};
use crate::kspace::{self, ComplexImage, Measurement};
use crate::ssm::ScanConfig;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of unit groups, each followed by a data-consistency step.
    pub k_groups: usize,
    pub units_per_group: usize,
    /// Patch side length; 1, 2, or 4.
    pub patch: usize,
    /// Token width; even, and at least `2 * patch^2` so the patch embedding
    /// can be a left-invertible expansion.
    pub channels: usize,
    pub scan: ScanConfig,
    pub unit: UnitConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k_groups: 6,
            units_per_group: 2,
            patch: 2,
            channels: 32,
            scan: ScanConfig::default(),
            unit: UnitConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.patch, 1 | 2 | 4) {
            return Err(Error::Config(format!("patch must be 1, 2, or 4, got {}", self.patch)));
        }
        if self.k_groups == 0 || self.units_per_group == 0 {
            return Err(Error::Config("k_groups and units_per_group must be >= 1".into()));
        }
        if self.channels % 2 != 0 || self.channels == 0 {
            return Err(Error::Config(format!("channels must be even, got {}", self.channels)));
        }
        let d = 2 * self.patch * self.patch;
        if self.channels < d {
            return Err(Error::Config(format!(
                "channels {} below patch dimension {d}; the embedding could not be inverted",
                self.channels
            )));
        }
        self.scan.validate(self.channels / 2)
    }

    /// Checks an image size against the patch grid the units require.
    pub fn validate_dims(&self, h: usize, w: usize) -> Result<()> {
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::IndivisibleShape(format!("{h}x{w} not divisible by patch {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        if gh % 2 != 0 || gw % 2 != 0 || gh < 4 || gw < 4 {
            return Err(Error::ShapeMismatch(format!(
                "token grid {gh}x{gw} must be even and at least 4x4"
            )));
        }
        Ok(())
    }
}

/// Hard data consistency as a differentiable op. The forward pass replaces
/// sampled k-space columns with the measurements; the backward pass is the
/// projector onto unsampled columns, which is its own adjoint.
pub fn data_consistency(g: &mut Graph, img: Var, meas: &Measurement) -> Result<Var> {
    let ci = ComplexImage::new(g.value(img).clone())?;
    let out = kspace::apply_dc(&ci, meas)?;
    let mask = meas.mask.clone();
    Ok(g.push_node(
        out.into_tensor(),
        Box::new(move |grad, slots| {
            let gi = ComplexImage::new(grad.clone()).expect("gradient shape");
            let d = kspace::project_unsampled(&gi, &mask).expect("projector");
            accum_slot(slots, img, d.into_tensor());
        }),
    ))
}

/// Random matrix with orthonormal columns (`rows >= cols`), via
/// Gram-Schmidt on a dense random draw.
fn orthonormal_cols(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    assert!(rows >= cols);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    let mut t = Tensor::zeros(&[rows, cols]);
    for (j, b) in basis.iter().enumerate() {
        for (i, &v) in b.iter().enumerate() {
            t.set2(i, j, v);
        }
    }
    t
}

struct GroupLayer {
    units: Vec<GuidedUnit>,
    unpatch_w: ParamId,
    unpatch_b: ParamId,
    embed_w: ParamId,
    embed_b: ParamId,
}

/// The full reconstruction model. Parameters live in an external
/// [`ParamStore`]; the model holds only ids and wiring.
pub struct ReconModel {
    cfg: ModelConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    groups: Vec<GroupLayer>,
    final_w: ParamId,
    final_b: ParamId,
}

impl ReconModel {
    /// Registers all parameters. Every patch embedding starts as a shared
    /// column-orthonormal matrix `Q` and every unpatch projection as its
    /// transpose, so projecting to image space and re-embedding preserves any
    /// token map that lies in the embedding's range; combined with the units
    /// being exact identities at init, a fresh model computes exactly the
    /// data-consistent zero-filled image.
    pub fn new(cfg: &ModelConfig, ps: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, p) = (cfg.channels, cfg.patch);
        let d = 2 * p * p;
        let q = orthonormal_cols(c, d, rng);
        let mut qt = Tensor::zeros(&[d, c]);
        for i in 0..c {
            for j in 0..d {
                qt.set2(j, i, q.at2(i, j));
            }
        }
        let embed_w = ps.register("embed.weight".to_string(), q.clone());
        let embed_b = ps.register("embed.bias".to_string(), Tensor::zeros(&[c]));
        let mut groups = Vec::with_capacity(cfg.k_groups);
        for gi in 0..cfg.k_groups {
            let mut units = Vec::with_capacity(cfg.units_per_group);
            for ui in 0..cfg.units_per_group {
                units.push(GuidedUnit::new(
                    ps,
                    rng,
                    &format!("group{gi}.unit{ui}"),
                    c,
                    &cfg.scan,
                    &cfg.unit,
                )?);
            }
            groups.push(GroupLayer {
                units,
                unpatch_w: ps.register(format!("group{gi}.unpatch.weight"), qt.clone()),
                unpatch_b: ps.register(format!("group{gi}.unpatch.bias"), Tensor::zeros(&[d])),
                embed_w: ps.register(format!("group{gi}.embed.weight"), q.clone()),
                embed_b: ps.register(format!("group{gi}.embed.bias"), Tensor::zeros(&[c])),
            });
        }
        let final_w = ps.register("final_unpatch.weight".to_string(), qt);
        let final_b = ps.register("final_unpatch.bias".to_string(), Tensor::zeros(&[d]));
        Ok(ReconModel { cfg: cfg.clone(), embed_w, embed_b, groups, final_w, final_b })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// One group in token space: units, then project to image space, impose
    /// the measurements, re-embed.
    fn group_forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        layer: &GroupLayer,
        feat: Var,
        meas: &Measurement,
    ) -> Result<Var> {
        let mut feat = feat;
        for unit in &layer.units {
            feat = unit.forward(g, ps, feat)?;
        }
        let uw = g.param(ps, layer.unpatch_w);
        let ub = g.param(ps, layer.unpatch_b);
        let img = g.unpatchify(feat, uw, ub, self.cfg.patch);
        let img = data_consistency(g, img, meas)?;
        let ew = g.param(ps, layer.embed_w);
        let eb = g.param(ps, layer.embed_b);
        g.patch_embed(img, ew, eb, self.cfg.patch)
    }

    /// Full reconstruction pass: `(2, H, W)` complex image in and out.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        zf: &ComplexImage,
        meas: &Measurement,
    ) -> Result<Var> {
        self.cfg.validate_dims(zf.h(), zf.w())?;
        if zf.w() != meas.kspace.w() || zf.h() != meas.kspace.h() {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{} vs measurement {}x{}",
                zf.h(),
                zf.w(),
                meas.kspace.h(),
                meas.kspace.w()
            )));
        }
        let x = g.leaf(zf.tensor().clone());
        let ew = g.param(ps, self.embed_w);
        let eb = g.param(ps, self.embed_b);
        let mut feat = g.patch_embed(x, ew, eb, self.cfg.patch)?;
        for layer in &self.groups {
            feat = self.group_forward(g, ps, layer, feat, meas)?;
        }
        let fw = g.param(ps, self.final_w);
        let fb = g.param(ps, self.final_b);
        let img = g.unpatchify(feat, fw, fb, self.cfg.patch);
        data_consistency(g, img, meas)
    }

    /// Convenience inference entry point.
    pub fn reconstruct(&self, ps: &ParamStore, meas: &Measurement) -> Result<ComplexImage> {
        let zf = kspace::zero_filled(meas);
        let mut g = Graph::inference();
        let out = self.forward(&mut g, ps, &zf, meas)?;
        ComplexImage::new(g.value(out).clone())
    }
}

/// Builds a model plus its freshly initialized parameter store.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<(ReconModel, ParamStore)> {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ReconModel::new(cfg, &mut ps, &mut rng)?;
    Ok((model, ps))
}

/// Total number of trainable scalars.
pub fn count_params(ps: &ParamStore) -> usize {
    ps.n_scalars()
}

// ----- checkpoint archive -----
//
// Layout: magic, little-endian u64 header length, JSON header (crate
// version, model config, caller metadata, tensor manifest with shapes),
// tensor payloads as little-endian f64 in manifest order, and a trailing
// SHA-256 over everything before it.

const CKPT_MAGIC: &[u8; 8] = b"KSCKPT1\n";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: String,
    model: ModelConfig,
    meta: serde_json::Value,
    manifest: Vec<CkptEntry>,
}

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    ps: &ParamStore,
    meta: serde_json::Value,
) -> Result<()> {
    let manifest: Vec<CkptEntry> = ps
        .ids()
        .map(|id| CkptEntry { name: ps.name(id).to_string(), shape: ps.get(id).shape().to_vec() })
        .collect();
    let header = CkptHeader {
        version: env!("CARGO_PKG_VERSION").to_string(),
        model: cfg.clone(),
        meta,
        manifest,
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut buf = Vec::with_capacity(hjson.len() + 16 + 8 * ps.n_scalars());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for id in ps.ids() {
        for &v in ps.get(id).data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    // write-then-rename so a crash cannot leave a truncated checkpoint
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex digest identifying a checkpoint's exact contents.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn load_checkpoint(path: &Path) -> Result<(ReconModel, ParamStore, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| Error::MissingDataset(path.display().to_string()))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < CKPT_MAGIC.len() + 8 + 32 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::CorruptFile(format!("{}: not a checkpoint", path.display())));
    }
    let body = &bytes[..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::CorruptFile(format!("{}: checksum mismatch", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + hlen > body.len() {
        return Err(Error::CorruptFile(format!("{}: truncated header", path.display())));
    }
    let header: CkptHeader = serde_json::from_slice(&body[16..16 + hlen])
        .map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))?;
    let (model, mut ps) = build_model(&header.model, 0)?;
    let mut off = 16 + hlen;
    let mut loaded = std::collections::HashMap::new();
    for entry in &header.manifest {
        let n: usize = entry.shape.iter().product();
        if off + 8 * n > body.len() {
            return Err(Error::CorruptFile(format!("{}: truncated tensors", path.display())));
        }
        let data: Vec<f64> = body[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data));
        off += 8 * n;
    }
    for id in ps.ids().collect::<Vec<_>>() {
        let name = ps.name(id).to_string();
        let t = loaded.remove(&name).ok_or_else(|| {
            Error::CheckpointMismatch(format!("missing tensor {name}"))
        })?;
        if t.shape() != ps.get(id).shape() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {name}: shape {:?} vs model {:?}",
                t.shape(),
                ps.get(id).shape()
            )));
        }
        *ps.get_mut(id) = t;
    }
    if let Some(name) = loaded.keys().next() {
        return Err(Error::CheckpointMismatch(format!("unexpected tensor {name}")));
    }
    Ok((model, ps, header.meta))
}
