//! Single-level orthonormal Haar analysis and the low/high frequency split.
//!
//! The split used by the reconstruction blocks is deliberately redundant
//! rather than critically sampled: the low band is the Haar LL subband
//! bilinearly upsampled back to full resolution with a fixed 0.5 gain (which
//! cancels the Haar DC gain of 2, so constants map to themselves), and the
//! high band is defined as the residual `x - low`. That makes
//! `low + high == x` an identity by construction instead of a numerical
//! accident.
//!
//! All maps are channel-wise on `(C, H, W)` tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four half-resolution subbands of one analysis level, each `(C, H/2, W/2)`.
///
/// Filter convention: `l*`/`h*` name the vertical (row) filter first, then
/// the horizontal (column) filter, with low = sum/sqrt(2), high = diff/sqrt(2).
#[derive(Clone, Debug)]
pub struct Subbands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

fn check_even(x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected (c, h, w), got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::OddDimension(format!("{h}x{w}")));
    }
    Ok((c, h, w))
}

/// One level of the orthonormal Haar transform. Energy is conserved exactly:
/// the four subbands are an orthonormal change of basis per 2x2 block.
pub fn dwt2(x: &Tensor) -> Result<Subbands> {
    let (c, h, w) = check_even(x)?;
    let (hh2, wh2) = (h / 2, w / 2);
    let mut ll = Tensor::zeros(&[c, hh2, wh2]);
    let mut lh = Tensor::zeros(&[c, hh2, wh2]);
    let mut hl = Tensor::zeros(&[c, hh2, wh2]);
    let mut hh = Tensor::zeros(&[c, hh2, wh2]);
    for ch in 0..c {
        for y in 0..hh2 {
            for xx in 0..wh2 {
                let a = x.at3(ch, 2 * y, 2 * xx);
                let b = x.at3(ch, 2 * y, 2 * xx + 1);
                let cc = x.at3(ch, 2 * y + 1, 2 * xx);
                let d = x.at3(ch, 2 * y + 1, 2 * xx + 1);
                ll.set3(ch, y, xx, 0.5 * (a + b + cc + d));
                lh.set3(ch, y, xx, 0.5 * (a - b + cc - d));
                hl.set3(ch, y, xx, 0.5 * (a + b - cc - d));
                hh.set3(ch, y, xx, 0.5 * (a - b - cc + d));
            }
        }
    }
    Ok(Subbands { ll, lh, hl, hh })
}

/// Exact inverse of [`dwt2`].
pub fn idwt2(s: &Subbands) -> Result<Tensor> {
    let sh = s.ll.shape();
    if sh.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected (c, h, w), got {sh:?}")));
    }
    for other in [&s.lh, &s.hl, &s.hh] {
        s.ll.same_shape(other)?;
    }
    let (c, hh2, wh2) = (sh[0], sh[1], sh[2]);
    let mut x = Tensor::zeros(&[c, 2 * hh2, 2 * wh2]);
    for ch in 0..c {
        for y in 0..hh2 {
            for xx in 0..wh2 {
                let ll = s.ll.at3(ch, y, xx);
                let lh = s.lh.at3(ch, y, xx);
                let hl = s.hl.at3(ch, y, xx);
                let hh = s.hh.at3(ch, y, xx);
                x.set3(ch, 2 * y, 2 * xx, 0.5 * (ll + lh + hl + hh));
                x.set3(ch, 2 * y, 2 * xx + 1, 0.5 * (ll - lh + hl - hh));
                x.set3(ch, 2 * y + 1, 2 * xx, 0.5 * (ll + lh - hl - hh));
                x.set3(ch, 2 * y + 1, 2 * xx + 1, 0.5 * (ll - lh - hl + hh));
            }
        }
    }
    Ok(x)
}

/// Interpolation stencil for doubling one axis from `n` samples: for each
/// output index, the two source indices and the weight of the second one.
/// Half-pixel-centered sampling (`src = out/2 - 0.25`) with clamped borders.
pub(crate) fn up2_axis_map(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = i as f64 / 2.0 - 0.25;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = (floor.max(0.0) as usize).min(n - 1);
            let i1 = ((floor + 1.0).max(0.0) as usize).min(n - 1);
            (i0, i1, frac)
        })
        .collect()
}

/// Separable bilinear 2x upsampling with a constant output gain.
pub fn bilinear_up2(x: &Tensor, gain: f64) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 3, "expected (c, h, w)");
    let (c, h, w) = (s[0], s[1], s[2]);
    let ymap = up2_axis_map(h);
    let xmap = up2_axis_map(w);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                let top = (1.0 - fx) * x.at3(ch, y0, x0) + fx * x.at3(ch, y0, x1);
                let bot = (1.0 - fx) * x.at3(ch, y1, x0) + fx * x.at3(ch, y1, x1);
                out.set3(ch, oy, ox, gain * ((1.0 - fy) * top + fy * bot));
            }
        }
    }
    out
}

/// LL subband back to full resolution; the 0.5 gain cancels the Haar DC gain.
pub fn upsample_ll(ll: &Tensor) -> Tensor {
    bilinear_up2(ll, 0.5)
}

/// Full-resolution low/high frequency pair with `low + high == input` exact.
#[derive(Clone, Debug)]
pub struct FreqPair {
    pub low: Tensor,
    pub high: Tensor,
}

/// Splits `x` into a smooth band (upsampled Haar LL) and its residual.
pub fn decompose(x: &Tensor) -> Result<FreqPair> {
    check_even(x)?;
    let low = upsample_ll(&dwt2(x)?.ll);
    let high = x.sub(&low);
    Ok(FreqPair { low, high })
}
