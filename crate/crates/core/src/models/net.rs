use rand::Rng;

use super::arch::{ArchSpec, LayerSpec, Layout};
use super::params::{Param, ParamSet};
use crate::error::{Error, Result};
use crate::real::Real;

/// Train/eval mode flag. The reference architectures have no mode-dependent
/// layers, so both modes compute the same function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// A sequential differentiable classifier with owned parameters.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    arch: ArchSpec,
    layouts: Vec<Layout>,
    /// For each layer, the index of its weight in `params` (bias follows).
    param_slot: Vec<Option<usize>>,
    params: ParamSet<T>,
    mode: Mode,
}

/// Activations recorded on the forward pass, consumed by the backward pass.
pub(crate) struct Trace<T> {
    pub n: usize,
    /// `acts[i]` is the input of layer `i` when the backward pass needs it
    /// (empty otherwise); the last entry holds the logits.
    acts: Vec<Vec<T>>,
    cols: Vec<Vec<T>>,
    pool_idx: Vec<Vec<u32>>,
}

impl<T> Trace<T> {
    pub fn logits(&self) -> &[T] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl<T: Real> Classifier<T> {
    /// Fan-in-scaled uniform initialization: weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn new<R: Rng + ?Sized>(arch: ArchSpec, rng: &mut R) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        let params = shapes
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let len = shape.iter().product();
                let data = if name.ends_with(".weight") {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..len).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
                } else {
                    vec![T::zero(); len]
                };
                Param { name, shape, data }
            })
            .collect();
        Self::from_params(arch, ParamSet { params })
    }

    /// All parameters zero.
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        let params = arch
            .param_shapes()?
            .into_iter()
            .map(|(name, shape, _)| Param {
                data: vec![T::zero(); shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Self::from_params(arch, ParamSet { params })
    }

    pub fn from_params(arch: ArchSpec, params: ParamSet<T>) -> Result<Self> {
        let layouts = arch.layouts()?;
        let expected = arch.param_shapes()?;
        if expected.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "architecture needs {} parameter arrays, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in expected.iter().zip(params.iter()) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::InvalidInput(format!(
                    "parameter {} {:?} inconsistent with architecture ({name} {shape:?})",
                    p.name, p.shape
                )));
            }
        }
        let mut param_slot = Vec::with_capacity(arch.layers.len());
        let mut next = 0;
        for layer in &arch.layers {
            match layer {
                LayerSpec::Conv { .. } | LayerSpec::Linear { .. } => {
                    param_slot.push(Some(next));
                    next += 2;
                }
                _ => param_slot.push(None),
            }
        }
        Ok(Classifier {
            arch,
            layouts,
            param_slot,
            params,
            mode: Mode::Train,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Replace all parameters; names and shapes must match.
    pub fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len()
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            arch: self.arch.clone(),
            layouts: self.layouts.clone(),
            param_slot: self.param_slot.clone(),
            params: self.params.cast(),
            mode: self.mode,
        }
    }

    pub(crate) fn check_inputs(&self, inputs: &[T], n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidInput("batch must contain at least one sample".into()));
        }
        let want = n * self.input_len();
        if inputs.len() != want {
            return Err(Error::InvalidInput(format!(
                "expected {n} x {:?} = {want} input values, got {}",
                self.arch.input_shape,
                inputs.len()
            )));
        }
        Ok(())
    }

    /// Logits `[n, classes]` for sample-major inputs.
    pub fn logits(&self, inputs: &[T], n: usize) -> Result<Vec<T>> {
        self.check_inputs(inputs, n)?;
        let mut trace = self.trace(inputs, n, false);
        let logits = trace.acts.pop().unwrap_or_default();
        ensure_finite(&logits, "logits")?;
        Ok(logits)
    }

    /// Forward pass. When `keep` is false only the logits are retained.
    pub(crate) fn trace(&self, inputs: &[T], n: usize, keep: bool) -> Trace<T> {
        let layers = self.arch.layers.len();
        let mut trace = Trace {
            n,
            acts: vec![Vec::new(); layers + 1],
            cols: vec![Vec::new(); layers],
            pool_idx: vec![Vec::new(); layers],
        };
        // Relu backward reads the relu output, i.e. the next layer's input.
        let needed: Vec<bool> = (0..layers)
            .map(|i| {
                keep && (matches!(self.arch.layers[i], LayerSpec::Linear { .. })
                    || (i > 0 && matches!(self.arch.layers[i - 1], LayerSpec::Relu)))
            })
            .collect();
        let store = |trace: &mut Trace<T>, i: usize, x: Vec<T>| {
            if needed[i] {
                trace.acts[i] = x;
            }
        };
        let mut cur = to_internal(inputs, n, self.layouts[0]);
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let input_layout = self.layouts[i];
            let x = std::mem::take(&mut cur);
            if needed[i] && matches!(layer, LayerSpec::Normalize { .. } | LayerSpec::Relu | LayerSpec::Flatten) {
                trace.acts[i] = x.clone();
            }
            cur = match (layer, input_layout) {
                (LayerSpec::Normalize { mean, std }, l) => normalize_forward(x, n, l, mean, std),
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        padding,
                    },
                    Layout::Spatial { c, h, w },
                ) => {
                    let slot = self.param_slot[i].expect("conv has parameters");
                    let (out, col) = conv_forward(
                        &x,
                        n,
                        [c, h, w],
                        &self.params.params[slot].data,
                        &self.params.params[slot + 1].data,
                        *out_channels,
                        *kernel,
                        *padding,
                    );
                    if keep {
                        trace.cols[i] = col;
                    }
                    store(&mut trace, i, x);
                    out
                }
                (LayerSpec::Relu, _) => {
                    let mut x = x;
                    x.iter_mut().for_each(|v| {
                        if !(*v > T::zero()) {
                            *v = T::zero()
                        }
                    });
                    x
                }
                (LayerSpec::MaxPool { size }, Layout::Spatial { c, h, w }) => {
                    let (out, idx) = maxpool_forward(&x, c * n, h, w, *size);
                    if keep {
                        trace.pool_idx[i] = idx;
                    }
                    store(&mut trace, i, x);
                    out
                }
                (LayerSpec::Flatten, l) => flatten_forward(x, n, l),
                (LayerSpec::Linear { out_features }, Layout::Flat { f }) => {
                    let slot = self.param_slot[i].expect("linear has parameters");
                    let out = linear_forward(
                        &x,
                        n,
                        f,
                        &self.params.params[slot].data,
                        &self.params.params[slot + 1].data,
                        *out_features,
                    );
                    store(&mut trace, i, x);
                    out
                }
                _ => unreachable!("layouts validated at construction"),
            };
        }
        trace.acts[layers] = cur;
        trace
    }

    /// Back-propagate `d_logits` through a kept trace.
    ///
    /// Returns the sample-major input gradient when `want_input` is set and
    /// accumulates parameter gradients into `grads` when given.
    pub(crate) fn backward(
        &self,
        trace: &Trace<T>,
        d_logits: Vec<T>,
        want_input: bool,
        mut grads: Option<&mut ParamSet<T>>,
    ) -> Option<Vec<T>> {
        let n = trace.n;
        let mut g = d_logits;
        for (i, layer) in self.arch.layers.iter().enumerate().rev() {
            let need_dx = i > 0 || want_input;
            let input = &trace.acts[i];
            let output = &trace.acts[i + 1];
            let layout = self.layouts[i];
            g = match (layer, layout) {
                (LayerSpec::Normalize { std, .. }, l) => {
                    if !need_dx {
                        return None;
                    }
                    normalize_backward(&g, n, l, std)
                }
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        padding,
                    },
                    Layout::Spatial { c, h, w },
                ) => {
                    let slot = self.param_slot[i].expect("conv has parameters");
                    if let Some(grads) = grads.as_deref_mut() {
                        let (gw, gb) = split_pair(&mut grads.params, slot);
                        conv_param_grad(&g, &trace.cols[i], *out_channels, gw, gb);
                    }
                    if !need_dx {
                        return None;
                    }
                    conv_input_grad(
                        &g,
                        n,
                        [c, h, w],
                        &self.params.params[slot].data,
                        *out_channels,
                        *kernel,
                        *padding,
                    )
                }
                (LayerSpec::Relu, _) => {
                    if !need_dx {
                        return None;
                    }
                    let mut g = g;
                    for (d, &y) in g.iter_mut().zip(output) {
                        if !(y > T::zero()) {
                            *d = T::zero();
                        }
                    }
                    g
                }
                (LayerSpec::MaxPool { .. }, l) => {
                    if !need_dx {
                        return None;
                    }
                    maxpool_backward(&g, &trace.pool_idx[i], l.len() * n)
                }
                (LayerSpec::Flatten, l) => {
                    if !need_dx {
                        return None;
                    }
                    flatten_backward(&g, n, l)
                }
                (LayerSpec::Linear { out_features }, Layout::Flat { f }) => {
                    let slot = self.param_slot[i].expect("linear has parameters");
                    if let Some(grads) = grads.as_deref_mut() {
                        let (gw, gb) = split_pair(&mut grads.params, slot);
                        linear_param_grad(&g, input, n, f, *out_features, gw, gb);
                    }
                    if !need_dx {
                        return None;
                    }
                    linear_input_grad(&g, n, f, &self.params.params[slot].data, *out_features)
                }
                _ => unreachable!("layouts validated at construction"),
            };
        }
        want_input.then(|| from_internal(&g, n, self.layouts[0]))
    }
}

fn split_pair<T>(params: &mut [Param<T>], slot: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = params[slot..slot + 2].split_at_mut(1);
    (&mut a[0].data, &mut b[0].data)
}

pub(crate) fn ensure_finite<T: Real>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow(format!("non-finite {what}")))
    }
}

/// Sample-major `[n][c][h][w]` to channel-major `[c][n][h][w]`.
fn to_internal<T: Real>(inputs: &[T], n: usize, layout: Layout) -> Vec<T> {
    match layout {
        Layout::Flat { .. } => inputs.to_vec(),
        Layout::Spatial { c, h, w } => {
            let hw = h * w;
            let mut out = vec![T::zero(); inputs.len()];
            for s in 0..n {
                for ch in 0..c {
                    let src = (s * c + ch) * hw;
                    let dst = (ch * n + s) * hw;
                    out[dst..dst + hw].copy_from_slice(&inputs[src..src + hw]);
                }
            }
            out
        }
    }
}

fn from_internal<T: Real>(grad: &[T], n: usize, layout: Layout) -> Vec<T> {
    match layout {
        Layout::Flat { .. } => grad.to_vec(),
        Layout::Spatial { c, h, w } => {
            let hw = h * w;
            let mut out = vec![T::zero(); grad.len()];
            for ch in 0..c {
                for s in 0..n {
                    let src = (ch * n + s) * hw;
                    let dst = (s * c + ch) * hw;
                    out[dst..dst + hw].copy_from_slice(&grad[src..src + hw]);
                }
            }
            out
        }
    }
}

fn stat(values: &[f64], group: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[group]
    }
}

fn normalize_forward<T: Real>(x: Vec<T>, n: usize, layout: Layout, mean: &[f64], std: &[f64]) -> Vec<T> {
    let mut out = x;
    match layout {
        Layout::Spatial { c, h, w } => {
            let plane = n * h * w;
            for ch in 0..c {
                let (m, s) = (T::of(stat(mean, ch)), T::of(stat(std, ch)));
                out[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        Layout::Flat { f } => {
            for row in out.chunks_mut(f) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - T::of(stat(mean, j))) / T::of(stat(std, j));
                }
            }
        }
    }
    out
}

fn normalize_backward<T: Real>(g: &[T], n: usize, layout: Layout, std: &[f64]) -> Vec<T> {
    let mut out = g.to_vec();
    match layout {
        Layout::Spatial { c, h, w } => {
            let plane = n * h * w;
            for ch in 0..c {
                let s = T::of(stat(std, ch));
                out[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = *v / s);
            }
        }
        Layout::Flat { f } => {
            for row in out.chunks_mut(f) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = *v / T::of(stat(std, j));
                }
            }
        }
    }
    out
}

/// Unfold `[c][n][h][w]` into `[c*k*k][n*ho*wo]`.
fn im2col<T: Real>(x: &[T], n: usize, [c, h, w]: [usize; 3], k: usize, pad: usize) -> Vec<T> {
    let (ho, wo) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let cols = n * ho * wo;
    let mut col = vec![T::zero(); c * k * k * cols];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                // valid output columns: 0 <= x + kx - pad < w
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(wo);
                for s in 0..n {
                    let src_plane = &x[(ch * n + s) * h * w..(ch * n + s + 1) * h * w];
                    for y in 0..ho {
                        let iy = y + ky;
                        if iy < pad || iy - pad >= h || x_lo >= x_hi {
                            continue;
                        }
                        let iy = iy - pad;
                        let dst = (s * ho + y) * wo;
                        let src = iy * w + x_lo + kx - pad;
                        dst_row[dst + x_lo..dst + x_hi].copy_from_slice(&src_plane[src..src + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], n: usize, [c, h, w]: [usize; 3], k: usize, pad: usize) -> Vec<T> {
    let (ho, wo) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let cols = n * ho * wo;
    let mut x = vec![T::zero(); c * n * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(wo);
                for s in 0..n {
                    let dst_plane = &mut x[(ch * n + s) * h * w..(ch * n + s + 1) * h * w];
                    for y in 0..ho {
                        let iy = y + ky;
                        if iy < pad || iy - pad >= h || x_lo >= x_hi {
                            continue;
                        }
                        let iy = iy - pad;
                        let src = (s * ho + y) * wo;
                        let dst = iy * w + x_lo + kx - pad;
                        for (d, &v) in dst_plane[dst..dst + (x_hi - x_lo)]
                            .iter_mut()
                            .zip(&src_row[src + x_lo..src + x_hi])
                        {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    x
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    x: &[T],
    n: usize,
    dims: [usize; 3],
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    k: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>) {
    let [c, h, w] = dims;
    let col = im2col(x, n, dims, k, pad);
    let kk = c * k * k;
    let cols = n * (h + 2 * pad + 1 - k) * (w + 2 * pad + 1 - k);
    let mut out = vec![T::zero(); out_channels * cols];
    for (co, row) in out.chunks_mut(cols).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[co]);
    }
    T::gemm(
        out_channels,
        kk,
        cols,
        T::one(),
        weight,
        kk as isize,
        1,
        &col,
        cols as isize,
        1,
        T::one(),
        &mut out,
        cols as isize,
        1,
    );
    (out, col)
}

fn conv_param_grad<T: Real>(g: &[T], col: &[T], out_channels: usize, gw: &mut [T], gb: &mut [T]) {
    let cols = g.len() / out_channels;
    let kk = col.len() / cols;
    // dW[co][kk] += dOut[co][j] * col[kk][j]
    T::gemm(
        out_channels,
        cols,
        kk,
        T::one(),
        g,
        cols as isize,
        1,
        col,
        1,
        cols as isize,
        T::one(),
        gw,
        kk as isize,
        1,
    );
    for (co, row) in g.chunks(cols).enumerate() {
        gb[co] = row.iter().fold(gb[co], |acc, &v| acc + v);
    }
}

fn conv_input_grad<T: Real>(
    g: &[T],
    n: usize,
    dims: [usize; 3],
    weight: &[T],
    out_channels: usize,
    k: usize,
    pad: usize,
) -> Vec<T> {
    let [c, h, w] = dims;
    let kk = c * k * k;
    let cols = n * (h + 2 * pad + 1 - k) * (w + 2 * pad + 1 - k);
    let mut dcol = vec![T::zero(); kk * cols];
    // dcol[kk][j] = W^T[kk][co] * dOut[co][j]
    T::gemm(
        kk,
        out_channels,
        cols,
        T::one(),
        weight,
        1,
        kk as isize,
        g,
        cols as isize,
        1,
        T::zero(),
        &mut dcol,
        cols as isize,
        1,
    );
    col2im(&dcol, n, dims, k, pad)
}

fn maxpool_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, s: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / s, w / s);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    if s == 2 {
        for (p, plane) in x.chunks_exact(h * w).enumerate() {
            let base = p * h * w;
            for y in 0..ho {
                let r0 = &plane[2 * y * w..(2 * y + 1) * w];
                let r1 = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
                for (xo, (a, b)) in r0.chunks_exact(2).zip(r1.chunks_exact(2)).enumerate() {
                    let at = base + 2 * y * w + 2 * xo;
                    let (mut best_v, mut best) = (a[0], at);
                    if a[1] > best_v {
                        best_v = a[1];
                        best = at + 1;
                    }
                    if b[0] > best_v {
                        best_v = b[0];
                        best = at + w;
                    }
                    if b[1] > best_v {
                        best_v = b[1];
                        best = at + w + 1;
                    }
                    out.push(best_v);
                    idx.push(best as u32);
                }
            }
        }
        return (out, idx);
    }
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..ho {
            for xo in 0..wo {
                let mut best = base + y * s * w + xo * s;
                let mut best_v = x[best];
                for dy in 0..s {
                    for dx in 0..s {
                        let at = base + (y * s + dy) * w + xo * s + dx;
                        if x[at] > best_v {
                            best_v = x[at];
                            best = at;
                        }
                    }
                }
                out.push(best_v);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

fn maxpool_backward<T: Real>(g: &[T], idx: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&d, &i) in g.iter().zip(idx) {
        dx[i as usize] = dx[i as usize] + d;
    }
    dx
}

/// `[c][n][hw]` to `[n][c*hw]`, matching the sample-major flattening order.
fn flatten_forward<T: Real>(x: Vec<T>, n: usize, layout: Layout) -> Vec<T> {
    match layout {
        Layout::Flat { .. } => x,
        Layout::Spatial { c, h, w } => {
            let hw = h * w;
            let mut out = vec![T::zero(); x.len()];
            for ch in 0..c {
                for s in 0..n {
                    let src = (ch * n + s) * hw;
                    let dst = s * c * hw + ch * hw;
                    out[dst..dst + hw].copy_from_slice(&x[src..src + hw]);
                }
            }
            out
        }
    }
}

fn flatten_backward<T: Real>(g: &[T], n: usize, layout: Layout) -> Vec<T> {
    match layout {
        Layout::Flat { .. } => g.to_vec(),
        Layout::Spatial { c, h, w } => {
            let hw = h * w;
            let mut out = vec![T::zero(); g.len()];
            for ch in 0..c {
                for s in 0..n {
                    let dst = (ch * n + s) * hw;
                    let src = s * c * hw + ch * hw;
                    out[dst..dst + hw].copy_from_slice(&g[src..src + hw]);
                }
            }
            out
        }
    }
}

fn linear_forward<T: Real>(x: &[T], n: usize, f: usize, weight: &[T], bias: &[T], out_f: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * out_f);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    // out[n][o] += x[n][i] * W[o][i]
    T::gemm(
        n,
        f,
        out_f,
        T::one(),
        x,
        f as isize,
        1,
        weight,
        1,
        f as isize,
        T::one(),
        &mut out,
        out_f as isize,
        1,
    );
    out
}

fn linear_param_grad<T: Real>(g: &[T], x: &[T], n: usize, f: usize, out_f: usize, gw: &mut [T], gb: &mut [T]) {
    // dW[o][i] += g[n][o] * x[n][i]
    T::gemm(
        out_f,
        n,
        f,
        T::one(),
        g,
        1,
        out_f as isize,
        x,
        f as isize,
        1,
        T::one(),
        gw,
        f as isize,
        1,
    );
    for row in g.chunks(out_f) {
        for (b, &v) in gb.iter_mut().zip(row) {
            *b = *b + v;
        }
    }
}

fn linear_input_grad<T: Real>(g: &[T], n: usize, f: usize, weight: &[T], out_f: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * f];
    T::gemm(
        n,
        out_f,
        f,
        T::one(),
        g,
        out_f as isize,
        1,
        weight,
        f as isize,
        1,
        T::zero(),
        &mut dx,
        f as isize,
        1,
    );
    dx
}
