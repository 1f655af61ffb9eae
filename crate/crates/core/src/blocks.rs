//! Feature-space building blocks of the reconstruction unit.
//!
//! A [`GuidedUnit`] splits its channels into two halves, separates the first
//! half into low/high frequency bands ([`BandSplit`]), folds the high band
//! into the second half, refines that high stream with small conv residual
//! blocks ([`ConvRefiner`]), runs the low band through a scan block guided by
//! the refined high stream, and fuses the two streams back with
//! channel attention ([`ChannelFusion`]) plus a residual connection.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::ssm::{init_linear, GuidedScanBlock, ScanConfig};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Residual conv refiner: pointwise expand (C -> 2C), depthwise 3x3, a
/// strided depthwise 3x3 halving the resolution, bilinear restore, pointwise
/// squeeze (2C -> C, zero-initialized), plus the input.
///
/// The zero-initialized squeeze makes a fresh refiner the exact identity.
pub struct ConvRefiner {
    pw1_w: ParamId,
    pw1_b: ParamId,
    dw1_w: ParamId,
    dw1_b: ParamId,
    dw2_w: ParamId,
    dw2_b: ParamId,
    pw2_w: ParamId,
    pw2_b: ParamId,
    channels: usize,
}

impl ConvRefiner {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, prefix: &str, channels: usize) -> Self {
        let c2 = 2 * channels;
        ConvRefiner {
            pw1_w: ps.register(
                format!("{prefix}.expand.weight"),
                init_linear(&[c2, channels], channels, rng),
            ),
            pw1_b: ps.register(format!("{prefix}.expand.bias"), Tensor::zeros(&[c2])),
            dw1_w: ps.register(format!("{prefix}.mix.weight"), init_linear(&[c2, 3, 3], 9, rng)),
            dw1_b: ps.register(format!("{prefix}.mix.bias"), Tensor::zeros(&[c2])),
            dw2_w: ps.register(format!("{prefix}.down.weight"), init_linear(&[c2, 3, 3], 9, rng)),
            dw2_b: ps.register(format!("{prefix}.down.bias"), Tensor::zeros(&[c2])),
            pw2_w: ps.register(format!("{prefix}.squeeze.weight"), Tensor::zeros(&[channels, c2])),
            pw2_b: ps.register(format!("{prefix}.squeeze.bias"), Tensor::zeros(&[channels])),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "refiner input {:?}, expected ({}, h, w)",
                shape, self.channels
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddSpatialDim(format!("({h}, {w})")));
        }
        let pw1_w = g.param(ps, self.pw1_w);
        let pw1_b = g.param(ps, self.pw1_b);
        let t = g.linear(x, pw1_w, Some(pw1_b));
        let dw1_w = g.param(ps, self.dw1_w);
        let dw1_b = g.param(ps, self.dw1_b);
        let t = g.dwconv2d(t, dw1_w, Some(dw1_b), 1);
        let t = g.silu(t);
        let dw2_w = g.param(ps, self.dw2_w);
        let dw2_b = g.param(ps, self.dw2_b);
        let t = g.dwconv2d(t, dw2_w, Some(dw2_b), 2);
        let t = g.silu(t);
        let t = g.bilinear_up2(t, 1.0);
        let pw2_w = g.param(ps, self.pw2_w);
        let pw2_b = g.param(ps, self.pw2_b);
        let t = g.linear(t, pw2_w, Some(pw2_b));
        Ok(g.add(t, x))
    }
}

/// Frequency split of a refined feature map: `low` is the bilinear-upsampled
/// Haar LL subband, `high` the pointwise residual, so `low + high` always
/// reassembles the refined map exactly.
pub struct BandSplit {
    pub refiner: ConvRefiner,
}

impl BandSplit {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, prefix: &str, channels: usize) -> Self {
        BandSplit { refiner: ConvRefiner::new(ps, rng, &format!("{prefix}.refine"), channels) }
    }

    /// Returns `(low, high)`, both shaped like the input.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let refined = self.refiner.forward(g, ps, x)?;
        let ll = g.haar_ll(refined);
        // gain 0.5 cancels the Haar DC gain of 2, preserving mean intensity
        let low = g.bilinear_up2(ll, 0.5);
        let high = g.sub(refined, low);
        Ok((low, high))
    }
}

/// Squeeze-excite fusion of the two half-width streams: concat, global
/// average, bottleneck MLP to per-channel sigmoid weights, reweight, and a
/// zero-initialized pointwise projection.
pub struct ChannelFusion {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    pw_w: ParamId,
    pw_b: ParamId,
    channels: usize,
}

impl ChannelFusion {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, prefix: &str, channels: usize) -> Self {
        let hidden = (channels / 4).max(4);
        ChannelFusion {
            fc1_w: ps.register(
                format!("{prefix}.gate1.weight"),
                init_linear(&[hidden, channels], channels, rng),
            ),
            fc1_b: ps.register(format!("{prefix}.gate1.bias"), Tensor::zeros(&[hidden])),
            fc2_w: ps.register(
                format!("{prefix}.gate2.weight"),
                init_linear(&[channels, hidden], hidden, rng),
            ),
            fc2_b: ps.register(format!("{prefix}.gate2.bias"), Tensor::zeros(&[channels])),
            pw_w: ps.register(format!("{prefix}.fuse.weight"), Tensor::zeros(&[channels, channels])),
            pw_b: ps.register(format!("{prefix}.fuse.bias"), Tensor::zeros(&[channels])),
            channels,
        }
    }

    /// `low`, `high`: `(C/2, h, w)` each; output `(C, h, w)`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, low: Var, high: Var) -> Result<Var> {
        let cl = g.value(low).shape()[0];
        let ch = g.value(high).shape()[0];
        if cl + ch != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "fusion inputs {cl}+{ch} channels, expected {}",
                self.channels
            )));
        }
        let cat = g.concat_rows(low, high);
        let gap = g.global_avg(cat);
        let w1 = g.param(ps, self.fc1_w);
        let b1 = g.param(ps, self.fc1_b);
        let a = g.linear(gap, w1, Some(b1));
        let a = g.silu(a);
        let w2 = g.param(ps, self.fc2_w);
        let b2 = g.param(ps, self.fc2_b);
        let a = g.linear(a, w2, Some(b2));
        let att = g.sigmoid(a);
        let rew = g.mul_rows(cat, att);
        let pw_w = g.param(ps, self.pw_w);
        let pw_b = g.param(ps, self.pw_b);
        Ok(g.linear(rew, pw_w, Some(pw_b)))
    }
}

/// Ablation switches for the unit's three optional components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnitConfig {
    /// Refine the high stream with two conv refiners (guidance + output).
    pub use_refiner: bool,
    /// Run the low band through the guided scan block.
    pub use_scan: bool,
    /// Fuse with channel attention instead of a plain pointwise projection.
    pub use_fusion: bool,
}

impl Default for UnitConfig {
    fn default() -> Self {
        UnitConfig { use_refiner: true, use_scan: true, use_fusion: true }
    }
}

enum Fusion {
    Attention(ChannelFusion),
    /// Plain zero-initialized pointwise projection of the concatenated streams.
    Plain { w: ParamId, b: ParamId },
}

/// One shape-preserving reconstruction unit over `(C, h, w)` feature maps.
///
/// Wiring: split channels in half by index; band-split the first half; add
/// the high band onto the second half; refine that stream once to form the
/// guidance map and once more for the fused output; scan the low band under
/// that guidance; fuse; add the unit input back.
pub struct GuidedUnit {
    band: BandSplit,
    scan: Option<GuidedScanBlock>,
    refine_guide: Option<ConvRefiner>,
    refine_high: Option<ConvRefiner>,
    fusion: Fusion,
    channels: usize,
}

impl GuidedUnit {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        scan_cfg: &ScanConfig,
        unit_cfg: &UnitConfig,
    ) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::Config(format!(
                "unit channels must be even and nonzero, got {channels}"
            )));
        }
        let half = channels / 2;
        let band = BandSplit::new(ps, rng, &format!("{prefix}.band"), half);
        let scan = unit_cfg
            .use_scan
            .then(|| GuidedScanBlock::new(ps, rng, &format!("{prefix}.scan"), half, scan_cfg))
            .transpose()?;
        let (refine_guide, refine_high) = if unit_cfg.use_refiner {
            (
                Some(ConvRefiner::new(ps, rng, &format!("{prefix}.guide"), half)),
                Some(ConvRefiner::new(ps, rng, &format!("{prefix}.high"), half)),
            )
        } else {
            (None, None)
        };
        let fusion = if unit_cfg.use_fusion {
            Fusion::Attention(ChannelFusion::new(ps, rng, &format!("{prefix}.fusion"), channels))
        } else {
            Fusion::Plain {
                w: ps.register(
                    format!("{prefix}.fusion.fuse.weight"),
                    Tensor::zeros(&[channels, channels]),
                ),
                b: ps.register(format!("{prefix}.fusion.fuse.bias"), Tensor::zeros(&[channels])),
            }
        };
        Ok(GuidedUnit { band, scan, refine_guide, refine_high, fusion, channels })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "unit input {:?}, expected ({}, h, w)",
                shape, self.channels
            )));
        }
        let half = self.channels / 2;
        let halves = g.split_rows(x, &[half, half]);
        let (f1, f2) = (halves[0], halves[1]);
        let (low, high_part) = self.band.forward(g, ps, f1)?;
        let f_high = g.add(f2, high_part);
        let guide = match &self.refine_guide {
            Some(r) => r.forward(g, ps, f_high)?,
            None => f_high,
        };
        let high_out = match &self.refine_high {
            Some(r) => r.forward(g, ps, guide)?,
            None => guide,
        };
        let low_out = match &self.scan {
            Some(s) => s.forward(g, ps, low, guide)?,
            None => low,
        };
        let fused = match &self.fusion {
            Fusion::Attention(f) => f.forward(g, ps, low_out, high_out)?,
            Fusion::Plain { w, b } => {
                let cat = g.concat_rows(low_out, high_out);
                let wv = g.param(ps, *w);
                let bv = g.param(ps, *b);
                g.linear(cat, wv, Some(bv))
            }
        };
        Ok(g.add(fused, x))
    }
}
