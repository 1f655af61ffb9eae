//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass as a flat tape of values plus
//! backward closures; [`Graph::backward`] walks the tape in reverse creation
//! order (a topological order by construction) and accumulates gradients.
//! Model parameters live outside the graph in a [`ParamStore`] and are bound
//! into a pass with [`Graph::param`], which lets the optimizer map gradients
//! back to storage indices after the tape is dropped.
//!
//! Everything is f64 and loops are written directly; per-channel kernels
//! parallelize over disjoint output rows through [`crate::parallel`], with
//! reductions kept sequential so results do not depend on thread count.

use crate::error::{Error, Result};
use crate::parallel::{for_each_chunk_mut, map_indexed};
use crate::tensor::Tensor;
use crate::wavelet::up2_axis_map;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors, owned by the model and updated by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub(crate) type BackFn = Box<dyn Fn(&Tensor, &mut [Option<Tensor>]) + Send>;

struct Entry {
    value: Tensor,
    back: Option<BackFn>,
}

fn accum(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => t.add_scaled(&delta, 1.0),
        None => *slot = Some(delta),
    }
}

/// Accumulates `t` into the gradient slot of `v`; for custom ops defined in
/// sibling modules.
pub(crate) fn accum_slot(slots: &mut [Option<Tensor>], v: Var, t: Tensor) {
    accum(&mut slots[v.0], t);
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_var[v.0].as_ref()
    }
}

pub struct Graph {
    entries: Vec<Entry>,
    /// One slot per ParamId; binds each parameter to at most one leaf.
    bindings: Vec<Option<Var>>,
    recording: bool,
}

impl Graph {
    /// Tape that records backward closures (training path).
    pub fn recording() -> Self {
        Graph { entries: Vec::new(), bindings: Vec::new(), recording: true }
    }

    /// Value-only tape for inference and finite differences.
    pub fn inference() -> Self {
        Graph { entries: Vec::new(), bindings: Vec::new(), recording: false }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn n_nodes(&self) -> usize {
        self.entries.len()
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Var {
        let back = if self.recording { back } else { None };
        self.entries.push(Entry { value, back });
        Var(self.entries.len() - 1)
    }

    /// Entry point for custom ops defined in sibling modules.
    pub(crate) fn push_node(&mut self, value: Tensor, back: BackFn) -> Var {
        self.push(value, Some(back))
    }

    pub(crate) fn is_recording(&self) -> bool {
        self.recording
    }

    /// New leaf holding an input tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Binds a parameter as a leaf, reusing the node if already bound so a
    /// parameter used twice accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bindings.len() < store.len() {
            self.bindings.resize(store.len(), None);
        }
        if let Some(v) = self.bindings[id.0] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bindings[id.0] = v.into();
        v
    }

    /// Runs the tape backwards from a scalar loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.recording, "backward on an inference graph");
        let mut by_var: Vec<Option<Tensor>> = Vec::with_capacity(self.entries.len());
        by_var.resize_with(self.entries.len(), || None);
        let seed = self.entries[loss.0].value.map(|_| 1.0);
        by_var[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if self.entries[i].back.is_some() {
                if let Some(g) = by_var[i].take() {
                    let back = self.entries[i].back.as_ref().unwrap();
                    back(&g, &mut by_var);
                }
            }
        }
        Gradients { by_var }
    }

    /// Gradients aligned with the store: one tensor per parameter, zeros for
    /// parameters unused in this pass.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.bindings
                    .get(id.0)
                    .copied()
                    .flatten()
                    .and_then(|v| grads.of(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.clone());
                accum(&mut slots[b.0], g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.clone());
                accum(&mut slots[b.0], g.scale(-1.0));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = va.zip(&vb, |x, y| x * y);
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.zip(&vb, |gi, y| gi * y));
                accum(&mut slots[b.0], g.zip(&va, |gi, x| gi * x));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.scale(c));
            })),
        )
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let va = self.value(a).clone();
        let out = va.map(f);
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.zip(&va, |gi, x| gi * df(x)));
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, silu, dsilu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, dgelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, dsigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, sigmoid)
    }

    /// Reinterprets the value under a new shape (same volume).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.value(a).shape().to_vec();
        let out = self.value(a).clone().reshaped(shape);
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.clone().reshaped(&in_shape));
            })),
        )
    }

    // ----- broadcasting over leading channel axis -----

    /// Adds `b[c]` to every element of row/plane `c` of `x` (`(C, ...)`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(b);
        let c = vx.shape()[0];
        assert_eq!(vb.len(), c, "bias length mismatch");
        let n = vx.len() / c;
        let mut out = vx.clone();
        for ch in 0..c {
            let bias = vb.data()[ch];
            for v in &mut out.data_mut()[ch * n..(ch + 1) * n] {
                *v += bias;
            }
        }
        let bshape = vb.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[x.0], g.clone());
                let mut db = Tensor::zeros(&bshape);
                for ch in 0..c {
                    db.data_mut()[ch] = g.data()[ch * n..(ch + 1) * n].iter().sum();
                }
                accum(&mut slots[b.0], db);
            })),
        )
    }

    /// Scales row/plane `c` of `x` by `s[c]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Var {
        let vx = self.value(x).clone();
        let vs = self.value(s).clone();
        let c = vx.shape()[0];
        assert_eq!(vs.len(), c, "scale length mismatch");
        let n = vx.len() / c;
        let mut out = vx.clone();
        for ch in 0..c {
            let f = vs.data()[ch];
            for v in &mut out.data_mut()[ch * n..(ch + 1) * n] {
                *v *= f;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let mut dx = g.clone();
                let mut ds = Tensor::zeros(vs.shape());
                for ch in 0..c {
                    let f = vs.data()[ch];
                    let row = ch * n..(ch + 1) * n;
                    let mut acc = 0.0;
                    for (dv, (&gv, &xv)) in dx.data_mut()[row.clone()]
                        .iter_mut()
                        .zip(g.data()[row.clone()].iter().zip(&vx.data()[row]))
                    {
                        acc += gv * xv;
                        *dv = gv * f;
                    }
                    ds.data_mut()[ch] = acc;
                }
                accum(&mut slots[x.0], dx);
                accum(&mut slots[s.0], ds);
            })),
        )
    }

    /// Global average over all trailing axes: `(C, ...) -> (C)`.
    pub fn global_avg(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.shape()[0];
        let n = vx.len() / c;
        let mut out = Tensor::zeros(&[c]);
        for ch in 0..c {
            out.data_mut()[ch] =
                vx.data()[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64;
        }
        let in_shape = vx.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let mut dx = Tensor::zeros(&in_shape);
                for ch in 0..c {
                    let gv = g.data()[ch] / n as f64;
                    for v in &mut dx.data_mut()[ch * n..(ch + 1) * n] {
                        *v = gv;
                    }
                }
                accum(&mut slots[x.0], dx);
            })),
        )
    }

    /// Concatenates along the leading axis; trailing shapes must match.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape()[1..], vb.shape()[1..], "concat trailing shape mismatch");
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let na = va.len();
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            Tensor::from_vec(&shape, data),
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], Tensor::from_vec(&sa, g.data()[..na].to_vec()));
                accum(&mut slots[b.0], Tensor::from_vec(&sb, g.data()[na..].to_vec()));
            })),
        )
    }

    /// Splits along the leading axis into consecutive row groups.
    pub fn split_rows(&mut self, x: Var, sizes: &[usize]) -> Vec<Var> {
        let vx = self.value(x).clone();
        let c = vx.shape()[0];
        assert_eq!(sizes.iter().sum::<usize>(), c, "split sizes must cover rows");
        let n = vx.len() / c;
        let in_shape = vx.shape().to_vec();
        let mut outs = Vec::with_capacity(sizes.len());
        let mut offset = 0usize;
        for &sz in sizes {
            let mut shape = in_shape.clone();
            shape[0] = sz;
            let data = vx.data()[offset * n..(offset + sz) * n].to_vec();
            let off = offset;
            let ishape = in_shape.clone();
            let v = self.push(
                Tensor::from_vec(&shape, data),
                Some(Box::new(move |g, slots| {
                    let mut dx = Tensor::zeros(&ishape);
                    dx.data_mut()[off * n..(off + sz) * n].copy_from_slice(g.data());
                    accum(&mut slots[x.0], dx);
                })),
            );
            outs.push(v);
            offset += sz;
        }
        outs
    }

    // ----- dense and convolution kernels -----

    /// `w (Cout, Cin) * x (Cin, N) + b`: shared kernel for projections and
    /// pointwise (1x1) convolutions; trailing axes of `x` are flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x).clone();
        let vw = self.value(w).clone();
        let (cout, cin) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.shape()[0], cin, "linear input channels");
        let n = vx.len() / cin;
        let mut out_shape = vx.shape().to_vec();
        out_shape[0] = cout;
        let mut out = vec![0.0; cout * n];
        for_each_chunk_mut(&mut out, n, |o, row| {
            for i in 0..cin {
                let wv = vw.at2(o, i);
                let xrow = &vx.data()[i * n..(i + 1) * n];
                for (r, &xv) in row.iter_mut().zip(xrow) {
                    *r += wv * xv;
                }
            }
        });
        let out = Tensor::from_vec(&out_shape, out);
        let out = self.push(
            out,
            Some(Box::new(move |g, slots| {
                let mut dw = vec![0.0; cout * cin];
                for_each_chunk_mut(&mut dw, cin, |o, row| {
                    let grow = &g.data()[o * n..(o + 1) * n];
                    for (i, r) in row.iter_mut().enumerate() {
                        let xrow = &vx.data()[i * n..(i + 1) * n];
                        *r = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
                    }
                });
                let mut dx = vec![0.0; cin * n];
                for_each_chunk_mut(&mut dx, n, |i, row| {
                    for o in 0..cout {
                        let wv = vw.at2(o, i);
                        let grow = &g.data()[o * n..(o + 1) * n];
                        for (r, &gv) in row.iter_mut().zip(grow) {
                            *r += wv * gv;
                        }
                    }
                });
                accum(&mut slots[w.0], Tensor::from_vec(&[cout, cin], dw));
                accum(&mut slots[x.0], Tensor::from_vec(vx.shape(), dx));
            })),
        );
        match b {
            Some(b) => self.add_bias(out, b),
            None => out,
        }
    }

    /// Depthwise 2D convolution, odd kernel, zero padding `k/2`, stride 1 or 2.
    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let vx = self.value(x).clone();
        let vw = self.value(w).clone();
        let (c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let k = vw.shape()[1];
        assert_eq!(vw.shape(), &[c, k, k], "depthwise kernel shape");
        assert!(k % 2 == 1, "kernel must be odd");
        assert!(stride == 1 || stride == 2, "stride 1 or 2");
        let p = k / 2;
        let (oh, ow) = ((h + 2 * p - k) / stride + 1, (wd + 2 * p - k) / stride + 1);
        let mut out = vec![0.0; c * oh * ow];
        for_each_chunk_mut(&mut out, oh * ow, |ch, plane| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        let iy = (oy * stride + dy) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = (ox * stride + dx) as isize - p as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += vw.at3(ch, dy, dx) * vx.at3(ch, iy as usize, ix as usize);
                        }
                    }
                    plane[oy * ow + ox] = acc;
                }
            }
        });
        let out = Tensor::from_vec(&[c, oh, ow], out);
        let out = self.push(
            out,
            Some(Box::new(move |g, slots| {
                let mut dx = vec![0.0; c * h * wd];
                let mut dw = vec![0.0; c * k * k];
                let planes: Vec<(Vec<f64>, Vec<f64>)> = map_indexed(c, |ch| {
                    let mut dxp = vec![0.0; h * wd];
                    let mut dwp = vec![0.0; k * k];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.at3(ch, oy, ox);
                            for dy in 0..k {
                                let iy = (oy * stride + dy) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx2 in 0..k {
                                    let ix = (ox * stride + dx2) as isize - p as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    dxp[iy as usize * wd + ix as usize] += gv * vw.at3(ch, dy, dx2);
                                    dwp[dy * k + dx2] += gv * vx.at3(ch, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    (dxp, dwp)
                });
                for (ch, (dxp, dwp)) in planes.into_iter().enumerate() {
                    dx[ch * h * wd..(ch + 1) * h * wd].copy_from_slice(&dxp);
                    dw[ch * k * k..(ch + 1) * k * k].copy_from_slice(&dwp);
                }
                accum(&mut slots[x.0], Tensor::from_vec(&[c, h, wd], dx));
                accum(&mut slots[w.0], Tensor::from_vec(&[c, k, k], dw));
            })),
        );
        match b {
            Some(b) => self.add_bias(out, b),
            None => out,
        }
    }

    /// Depthwise 1D convolution along the sequence axis, zero padding `k/2`.
    pub fn dwconv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x).clone();
        let vw = self.value(w).clone();
        let (c, l) = (vx.shape()[0], vx.shape()[1]);
        let k = vw.shape()[1];
        assert_eq!(vw.shape()[0], c, "depthwise kernel channels");
        assert!(k % 2 == 1, "kernel must be odd");
        let p = k / 2;
        let mut out = vec![0.0; c * l];
        for_each_chunk_mut(&mut out, l, |ch, row| {
            for (t, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..k {
                    let i = t as isize + d as isize - p as isize;
                    if i >= 0 && i < l as isize {
                        acc += vw.at2(ch, d) * vx.at2(ch, i as usize);
                    }
                }
                *r = acc;
            }
        });
        let out = Tensor::from_vec(&[c, l], out);
        let out = self.push(
            out,
            Some(Box::new(move |g, slots| {
                let mut dx = vec![0.0; c * l];
                let mut dw = vec![0.0; c * k];
                let rows: Vec<(Vec<f64>, Vec<f64>)> = map_indexed(c, |ch| {
                    let mut dxr = vec![0.0; l];
                    let mut dwr = vec![0.0; k];
                    for t in 0..l {
                        let gv = g.at2(ch, t);
                        for d in 0..k {
                            let i = t as isize + d as isize - p as isize;
                            if i >= 0 && i < l as isize {
                                dxr[i as usize] += gv * vw.at2(ch, d);
                                dwr[d] += gv * vx.at2(ch, i as usize);
                            }
                        }
                    }
                    (dxr, dwr)
                });
                for (ch, (dxr, dwr)) in rows.into_iter().enumerate() {
                    dx[ch * l..(ch + 1) * l].copy_from_slice(&dxr);
                    dw[ch * k..(ch + 1) * k].copy_from_slice(&dwr);
                }
                accum(&mut slots[x.0], Tensor::from_vec(&[c, l], dx));
                accum(&mut slots[w.0], Tensor::from_vec(&[c, k], dw));
            })),
        );
        match b {
            Some(b) => self.add_bias(out, b),
            None => out,
        }
    }

    /// LayerNorm over the channel axis, independently at each position of a
    /// `(C, N)` map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x).clone();
        let vg = self.value(gamma).clone();
        let vb = self.value(beta);
        let c = vx.shape()[0];
        assert_eq!(vg.len(), c, "gamma length");
        assert_eq!(vb.len(), c, "beta length");
        let n = vx.len() / c;
        let mut xhat = vec![0.0; c * n];
        let mut inv_std = vec![0.0; n];
        for t in 0..n {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += vx.data()[ch * n + t];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = vx.data()[ch * n + t] - mean;
                var += d * d;
            }
            var /= c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[t] = is;
            for ch in 0..c {
                xhat[ch * n + t] = (vx.data()[ch * n + t] - mean) * is;
            }
        }
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let (gm, bt) = (vg.data()[ch], vb.data()[ch]);
            for t in 0..n {
                out[ch * n + t] = gm * xhat[ch * n + t] + bt;
            }
        }
        let shape = vx.shape().to_vec();
        let gshape = vg.shape().to_vec();
        let xhat_t = Tensor::from_vec(&shape, xhat);
        self.push(
            Tensor::from_vec(&shape, out),
            Some(Box::new(move |g, slots| {
                let mut dgamma = Tensor::zeros(&gshape);
                let mut dbeta = Tensor::zeros(&gshape);
                for ch in 0..c {
                    let (mut sg, mut sb) = (0.0, 0.0);
                    for t in 0..n {
                        let gv = g.data()[ch * n + t];
                        sg += gv * xhat_t.data()[ch * n + t];
                        sb += gv;
                    }
                    dgamma.data_mut()[ch] = sg;
                    dbeta.data_mut()[ch] = sb;
                }
                let mut dx = Tensor::zeros(&shape);
                for t in 0..n {
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for ch in 0..c {
                        let gg = g.data()[ch * n + t] * vg.data()[ch];
                        m1 += gg;
                        m2 += gg * xhat_t.data()[ch * n + t];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for ch in 0..c {
                        let gg = g.data()[ch * n + t] * vg.data()[ch];
                        dx.data_mut()[ch * n + t] =
                            inv_std[t] * (gg - m1 - xhat_t.data()[ch * n + t] * m2);
                    }
                }
                accum(&mut slots[x.0], dx);
                accum(&mut slots[gamma.0], dgamma);
                accum(&mut slots[beta.0], dbeta);
            })),
        )
    }

    // ----- resampling -----

    /// Separable bilinear 2x upsampling with constant gain (see
    /// [`crate::wavelet::bilinear_up2`]).
    pub fn bilinear_up2(&mut self, x: Var, gain: f64) -> Var {
        let vx = self.value(x).clone();
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let out = crate::wavelet::bilinear_up2(&vx, gain);
        let ymap = up2_axis_map(h);
        let xmap = up2_axis_map(w);
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                            let gv = gain * g.at3(ch, oy, ox);
                            let (wy0, wy1) = (1.0 - fy, fy);
                            let (wx0, wx1) = (1.0 - fx, fx);
                            let d = dx.data_mut();
                            d[(ch * h + y0) * w + x0] += gv * wy0 * wx0;
                            d[(ch * h + y0) * w + x1] += gv * wy0 * wx1;
                            d[(ch * h + y1) * w + x0] += gv * wy1 * wx0;
                            d[(ch * h + y1) * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                accum(&mut slots[x.0], dx);
            })),
        )
    }

    /// Haar LL subband: per 2x2 block, half the sum. Linear, self-contained
    /// backward (each input receives half its block gradient).
    pub fn haar_ll(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "haar_ll needs even dims");
        let (h2, w2) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, h2, w2]);
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let s = vx.at3(ch, 2 * y, 2 * xx)
                        + vx.at3(ch, 2 * y, 2 * xx + 1)
                        + vx.at3(ch, 2 * y + 1, 2 * xx)
                        + vx.at3(ch, 2 * y + 1, 2 * xx + 1);
                    out.set3(ch, y, xx, 0.5 * s);
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let gv = 0.5 * g.at3(ch, y, xx);
                            dx.set3(ch, 2 * y, 2 * xx, gv);
                            dx.set3(ch, 2 * y, 2 * xx + 1, gv);
                            dx.set3(ch, 2 * y + 1, 2 * xx, gv);
                            dx.set3(ch, 2 * y + 1, 2 * xx + 1, gv);
                        }
                    }
                }
                accum(&mut slots[x.0], dx);
            })),
        )
    }

    // ----- patching -----

    /// Folds `(2, H, W)` into non-overlapping `p x p` patches and projects
    /// each flattened patch (layout `c * p * p`) to `C` channels:
    /// `(2, H, W) -> (C, H/p, W/p)`.
    pub fn patch_embed(&mut self, img: Var, w: Var, b: Var, p: usize) -> Result<Var> {
        let vi = self.value(img).clone();
        let vw = self.value(w).clone();
        let (ci, hh, ww) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        if hh % p != 0 || ww % p != 0 {
            return Err(Error::IndivisibleShape(format!(
                "{hh}x{ww} not divisible by patch {p}"
            )));
        }
        let d = ci * p * p;
        let cout = vw.shape()[0];
        assert_eq!(vw.shape()[1], d, "patch projection width");
        let (gh, gw) = (hh / p, ww / p);
        let mut out = vec![0.0; cout * gh * gw];
        for_each_chunk_mut(&mut out, gh * gw, |o, plane| {
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for dy in 0..p {
                            for dx in 0..p {
                                let idx = (c * p + dy) * p + dx;
                                acc += vw.at2(o, idx) * vi.at3(c, gy * p + dy, gx * p + dx);
                            }
                        }
                    }
                    plane[gy * gw + gx] = acc;
                }
            }
        });
        let out = self.push(
            Tensor::from_vec(&[cout, gh, gw], out),
            Some(Box::new(move |g, slots| {
                let mut dw = Tensor::zeros(&[cout, d]);
                let mut di = Tensor::zeros(&[ci, hh, ww]);
                for o in 0..cout {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let gv = g.at3(o, gy, gx);
                            for c in 0..ci {
                                for dy in 0..p {
                                    for dx in 0..p {
                                        let idx = (c * p + dy) * p + dx;
                                        let (iy, ix) = (gy * p + dy, gx * p + dx);
                                        dw.data_mut()[o * d + idx] += gv * vi.at3(c, iy, ix);
                                        di.data_mut()[(c * hh + iy) * ww + ix] +=
                                            gv * vw.at2(o, idx);
                                    }
                                }
                            }
                        }
                    }
                }
                accum(&mut slots[w.0], dw);
                accum(&mut slots[img.0], di);
            })),
        );
        Ok(self.add_bias(out, b))
    }

    /// Inverse of [`Graph::patch_embed`]: `(C, h, w) -> (2, h*p, w*p)` with a
    /// `(2p^2, C)` projection (patch layout as in `patch_embed`).
    pub fn unpatchify(&mut self, x: Var, w: Var, b: Var, p: usize) -> Var {
        let vx = self.value(x).clone();
        let vw = self.value(w).clone();
        let (cin, gh, gw) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let d = vw.shape()[0];
        let ci = d / (p * p);
        assert_eq!(d % (p * p), 0, "projection rows must be c*p*p");
        assert_eq!(vw.shape()[1], cin, "projection width");
        let (hh, ww) = (gh * p, gw * p);
        let vb = self.value(b).clone();
        assert_eq!(vb.len(), d, "bias length");
        let mut out = Tensor::zeros(&[ci, hh, ww]);
        for gy in 0..gh {
            for gx in 0..gw {
                for idx in 0..d {
                    let mut acc = vb.data()[idx];
                    for o in 0..cin {
                        acc += vw.at2(idx, o) * vx.at3(o, gy, gx);
                    }
                    let (c, rem) = (idx / (p * p), idx % (p * p));
                    let (dy, dx) = (rem / p, rem % p);
                    out.set3(c, gy * p + dy, gx * p + dx, acc);
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, slots| {
                let mut dx = Tensor::zeros(&[cin, gh, gw]);
                let mut dw = Tensor::zeros(&[d, cin]);
                let mut db = Tensor::zeros(&[d]);
                for gy in 0..gh {
                    for gx in 0..gw {
                        for idx in 0..d {
                            let (c, rem) = (idx / (p * p), idx % (p * p));
                            let (dy, dx2) = (rem / p, rem % p);
                            let gv = g.at3(c, gy * p + dy, gx * p + dx2);
                            db.data_mut()[idx] += gv;
                            for o in 0..cin {
                                dw.data_mut()[idx * cin + o] += gv * vx.at3(o, gy, gx);
                                dx.data_mut()[(o * gh + gy) * gw + gx] += gv * vw.at2(idx, o);
                            }
                        }
                    }
                }
                accum(&mut slots[x.0], dx);
                accum(&mut slots[w.0], dw);
                accum(&mut slots[b.0], db);
            })),
        )
    }

    // ----- reductions -----

    /// Mean absolute difference, the training loss. Scalar output.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        assert_eq!(va.shape(), vb.shape(), "loss operands");
        let n = va.len() as f64;
        let loss = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |g, slots| {
                let g0 = g.data()[0] / n;
                let da = va.zip(&vb, |x, y| g0 * (x - y).signum());
                accum(&mut slots[b.0], da.scale(-1.0));
                accum(&mut slots[a.0], da);
            })),
        )
    }

    /// Sum of squares, a smooth scalar head for gradient checking.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let s = va.data().iter().map(|&x| x * x).sum::<f64>();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, slots| {
                let g0 = g.data()[0];
                accum(&mut slots[a.0], va.scale(2.0 * g0));
            })),
        )
    }
}

// Scalar nonlinearities shared by forward and backward.

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dsigmoid(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn dsilu(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn gelu(x: f64) -> f64 {
    // tanh form; smooth, so finite differences agree to high order.
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn dgelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Central-difference check of the whole backward pass behind `build`.
///
/// `build` must construct a scalar loss from leaves bound to `inputs` (in
/// order). Returns the worst relative error over all checked coordinates,
/// where relative error is `|analytic - numeric| / max(|analytic|, |numeric|,
/// 1e-8)`. With `max_coords_per_input` set, coordinates are strided
/// deterministically so large tensors stay affordable.
pub fn finite_diff_check<F>(
    inputs: &[Tensor],
    max_coords_per_input: Option<usize>,
    build: F,
) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::recording();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).len(), 1, "loss must be scalar");
    let grads = g.backward(loss);

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };

    let mut worst = 0.0_f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[i]);
        let n = input.len();
        let step = match max_coords_per_input {
            Some(m) if n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(step) {
            let x0 = input.data()[j];
            let eps = 1e-5 * x0.abs().max(1.0);
            let mut work: Vec<Tensor> = inputs.to_vec();
            work[i].data_mut()[j] = x0 + eps;
            let fp = eval(&work);
            work[i].data_mut()[j] = x0 - eps;
            let fm = eval(&work);
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.map_or(0.0, |t| t.data()[j]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
