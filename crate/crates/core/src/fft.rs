//! Centered, orthonormal 2D Fourier transforms on split re/im planes.
//!
//! `fft2c` computes the DC-centered spectrum: the zero-frequency bin sits at
//! `(h/2, w/2)` rather than `(0, 0)`, matching the usual k-space convention,
//! and both directions carry a `1/sqrt(h*w)` factor so the pair is unitary
//! (`ifft2c(fft2c(x)) == x` and energy is preserved exactly).
//!
//! Plans are cached globally keyed by `(length, direction)`; transforms of
//! the handful of sizes a run touches are planned once.

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

type PlanCache = Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>;

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut cache = cache.lock().unwrap();
    cache
        .entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

/// Circular shift moving bin 0 to the center (`floor(n/2)` for each axis).
fn shift2(buf: &[Complex<f64>], h: usize, w: usize, dy: usize, dx: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for y in 0..h {
        let ty = (y + dy) % h;
        for x in 0..w {
            out[ty * w + (x + dx) % w] = buf[y * w + x];
        }
    }
    out
}

fn fftshift(buf: &[Complex<f64>], h: usize, w: usize) -> Vec<Complex<f64>> {
    shift2(buf, h, w, h / 2, w / 2)
}

fn ifftshift(buf: &[Complex<f64>], h: usize, w: usize) -> Vec<Complex<f64>> {
    shift2(buf, h, w, h - h / 2, w - w / 2)
}

/// Unnormalized separable 2D FFT over rows then columns.
fn fft2_inplace(buf: &mut Vec<Complex<f64>>, h: usize, w: usize, inverse: bool) {
    let row = plan(w, inverse);
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let mut t = vec![Complex::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            t[x * h + y] = buf[y * w + x];
        }
    }
    let col = plan(h, inverse);
    for c in t.chunks_mut(h) {
        col.process(c);
    }
    for y in 0..h {
        for x in 0..w {
            buf[y * w + x] = t[x * h + y];
        }
    }
}

fn pack(re: &[f64], im: &[f64]) -> Vec<Complex<f64>> {
    re.iter().zip(im).map(|(&r, &i)| Complex::new(r, i)).collect()
}

fn unpack(buf: &[Complex<f64>], scale: f64) -> (Vec<f64>, Vec<f64>) {
    let re = buf.iter().map(|c| c.re * scale).collect();
    let im = buf.iter().map(|c| c.im * scale).collect();
    (re, im)
}

/// Centered orthonormal forward transform of an `h x w` complex plane.
pub fn fft2c(re: &[f64], im: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(re.len(), h * w);
    debug_assert_eq!(im.len(), h * w);
    let mut buf = ifftshift(&pack(re, im), h, w);
    fft2_inplace(&mut buf, h, w, false);
    let buf = fftshift(&buf, h, w);
    unpack(&buf, 1.0 / ((h * w) as f64).sqrt())
}

/// Centered orthonormal inverse transform; exact inverse of [`fft2c`].
pub fn ifft2c(re: &[f64], im: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(re.len(), h * w);
    debug_assert_eq!(im.len(), h * w);
    let mut buf = ifftshift(&pack(re, im), h, w);
    fft2_inplace(&mut buf, h, w, true);
    let buf = fftshift(&buf, h, w);
    unpack(&buf, 1.0 / ((h * w) as f64).sqrt())
}
