//! Batched forward and reverse passes over a [`ModelSpec`], generic over the
//! scalar type.
//!
//! Spatial activations are stored channel-major across the batch,
//! `[C, N, spatial...]`, so convolutions become one matrix product per chunk
//! of examples and batch-norm statistics are contiguous per channel. Flat
//! activations are `[N, F]` row-major.

use super::scalar::{Dual, MatMut, MatRef, Scalar};
use crate::models::{Layer, LayerSpec, ModelSpec, Padding, BATCH_NORM_EPS};
use crate::tasks::LabeledExample;
use crate::{Error, Result};

/// Per-channel `(mean, variance)` of every batch-norm layer, in layer order.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStatistics {
    pub layers: Vec<Vec<(f64, f64)>>,
}

impl NormStatistics {
    /// Exponential moving average towards `batch`, with unbiased batch
    /// variances over `m` elements per channel. An empty `self` is replaced.
    pub fn update(&mut self, batch: &NormStatistics, momentum: f64) {
        if self.layers.is_empty() {
            self.layers = batch.layers.clone();
            return;
        }
        for (run, cur) in self.layers.iter_mut().zip(&batch.layers) {
            for (r, c) in run.iter_mut().zip(cur) {
                r.0 += momentum * (c.0 - r.0);
                r.1 += momentum * (c.1 - r.1);
            }
        }
    }
}

/// How batch-norm layers obtain their statistics.
pub(crate) enum Norm<'a> {
    /// Current-batch statistics.
    Batch,
    /// Current-batch statistics, also reported with unbiased variances.
    Record(&'a mut NormStatistics),
    /// Fixed statistics; forward only.
    Fixed(&'a NormStatistics),
}

/// Upper bound on im2col buffer entries per chunk of examples.
const IM2COL_BUDGET: usize = 1 << 21;

enum Cache<T> {
    None,
    Conv { input: Vec<T> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T> },
    Relu { mask: Vec<bool> },
    Tanh { output: Vec<T> },
    Pool { argmax: Vec<usize> },
    Linear { input: Vec<T> },
}

/// Geometry shared by 1-D and 2-D convolutions; 1-D uses `height = 1`.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(l: &LayerSpec) -> Option<Self> {
        let (in_c, out_c, kernel, padding, two_d) = match l.layer {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => (in_channels, out_channels, kernel, padding, true),
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => (in_channels, out_channels, kernel, padding, false),
            _ => return None,
        };
        let pad = match padding {
            Padding::Same => (kernel - 1) / 2,
            Padding::Valid => 0,
        };
        let (h, w, oh, ow) = if two_d {
            (
                l.input_shape[1],
                l.input_shape[2],
                l.output_shape[1],
                l.output_shape[2],
            )
        } else {
            (1, l.input_shape[1], 1, l.output_shape[1])
        };
        Some(Self {
            in_c,
            out_c,
            h,
            w,
            kh: if two_d { kernel } else { 1 },
            kw: kernel,
            ph: if two_d { pad } else { 0 },
            pw: pad,
            oh,
            ow,
        })
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }

    fn in_spatial(&self) -> usize {
        self.h * self.w
    }

    fn chunk(&self) -> usize {
        (IM2COL_BUDGET / (self.patch() * self.out_spatial()).max(1)).max(1)
    }

    /// Output columns `lo..hi` whose input column `ox + kx - pw` is inside
    /// the image.
    fn valid_x(&self, kx: usize) -> (usize, usize) {
        let lo = self.pw.saturating_sub(kx).min(self.ow);
        let hi = (self.w + self.pw).saturating_sub(kx).min(self.ow).max(lo);
        (lo, hi)
    }

    /// Builds `cols[patch, nc·out_spatial]` for examples `n0..n0+nc`.
    fn im2col<T: Scalar>(&self, input: &[T], n: usize, n0: usize, nc: usize, cols: &mut Vec<T>) {
        let os = self.out_spatial();
        let width = nc * os;
        // Every entry is written below, so stale contents need no clearing.
        cols.resize(self.patch() * width, T::zero());
        for ci in 0..self.in_c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    let (lo, hi) = self.valid_x(kx);
                    for j in 0..nc {
                        let plane =
                            &input[(ci * n + n0 + j) * self.in_spatial()..][..self.in_spatial()];
                        for oy in 0..self.oh {
                            let dst_row = &mut dst[j * os + oy * self.ow..][..self.ow];
                            let iy = (oy + ky) as isize - self.ph as isize;
                            if iy < 0 || iy >= self.h as isize {
                                dst_row.fill(T::zero());
                                continue;
                            }
                            let src_row = &plane[iy as usize * self.w..][..self.w];
                            dst_row[..lo].fill(T::zero());
                            dst_row[hi..].fill(T::zero());
                            if hi > lo {
                                let start = lo + kx - self.pw;
                                dst_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into `dx` (inverse of [`Self::im2col`]).
    fn col2im<T: Scalar>(&self, cols: &[T], n: usize, n0: usize, nc: usize, dx: &mut [T]) {
        let os = self.out_spatial();
        let width = nc * os;
        for ci in 0..self.in_c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * width..(row + 1) * width];
                    let (lo, hi) = self.valid_x(kx);
                    for j in 0..nc {
                        let plane =
                            &mut dx[(ci * n + n0 + j) * self.in_spatial()..][..self.in_spatial()];
                        for oy in 0..self.oh {
                            let iy = (oy + ky) as isize - self.ph as isize;
                            if iy < 0 || iy >= self.h as isize || hi == lo {
                                continue;
                            }
                            let start = lo + kx - self.pw;
                            let dst_row = &mut plane[iy as usize * self.w + start..][..hi - lo];
                            let src_row = &src[j * os + oy * self.ow + lo..][..hi - lo];
                            for (d, &s) in dst_row.iter_mut().zip(src_row) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    n: usize,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let os = g.out_spatial();
    let mut out = vec![T::zero(); g.out_c * n * os];
    let mut cols = Vec::new();
    let chunk = g.chunk();
    let mut n0 = 0;
    while n0 < n {
        let nc = chunk.min(n - n0);
        g.im2col(input, n, n0, nc, &mut cols);
        let dst = MatMut {
            data: &mut out[n0 * os..],
            rows: g.out_c,
            cols: nc * os,
            row_stride: n * os,
            col_stride: 1,
        };
        T::gemm(
            MatRef::row_major(weight, g.out_c, g.patch()),
            MatRef::row_major(&cols, g.patch(), nc * os),
            dst,
            false,
        );
        n0 += nc;
    }
    for (co, block) in out.chunks_mut(n * os).enumerate() {
        let b = bias[co];
        for v in block {
            *v += b;
        }
    }
    out
}

/// Returns `dx` (if requested) and accumulates weight and bias gradients.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    n: usize,
    weight: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Vec<T> {
    let os = g.out_spatial();
    for (co, block) in dout.chunks(n * os).enumerate() {
        let mut acc = T::zero();
        for &v in block {
            acc += v;
        }
        dbias[co] += acc;
    }
    let mut dx = if want_dx {
        vec![T::zero(); g.in_c * n * g.in_spatial()]
    } else {
        Vec::new()
    };
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let chunk = g.chunk();
    let mut n0 = 0;
    while n0 < n {
        let nc = chunk.min(n - n0);
        g.im2col(input, n, n0, nc, &mut cols);
        let dview = MatRef {
            data: &dout[n0 * os..],
            rows: g.out_c,
            cols: nc * os,
            row_stride: n * os,
            col_stride: 1,
        };
        T::gemm(
            dview,
            MatRef::row_major(&cols, g.patch(), nc * os).t(),
            MatMut::row_major(dweight, g.out_c, g.patch()),
            true,
        );
        if want_dx {
            dcols.resize(g.patch() * nc * os, T::zero());
            T::gemm(
                MatRef::row_major(weight, g.out_c, g.patch()).t(),
                dview,
                MatMut::row_major(&mut dcols, g.patch(), nc * os),
                false,
            );
            g.col2im(&dcols, n, n0, nc, &mut dx);
        }
        n0 += nc;
    }
    dx
}

/// Element positions of batch-norm channel `c`: `(base, stride, count)`.
fn bn_channel(shape: &[usize], n: usize, c: usize) -> (usize, usize, usize) {
    if shape.len() == 1 {
        (c, shape[0], n)
    } else {
        let m = n * shape[1..].iter().product::<usize>();
        (c * m, 1, m)
    }
}

fn pool_geom(l: &LayerSpec) -> (usize, usize, usize, usize, usize) {
    // (planes-per-example-channel dims) h, w, size, oh, ow
    match l.layer {
        Layer::MaxPool2d { size } => (
            l.input_shape[1],
            l.input_shape[2],
            size,
            l.output_shape[1],
            l.output_shape[2],
        ),
        Layer::MaxPool1d { size } => (1, l.input_shape[1], size, 1, l.output_shape[1]),
        _ => unreachable!("not a pooling layer"),
    }
}

/// Runs every layer before the softmax and returns the logits `[N, classes]`.
fn forward_pass<T: Scalar>(
    spec: &ModelSpec,
    params: &[T],
    mut act: Vec<T>,
    n: usize,
    keep: bool,
    mut norm: Norm<'_>,
) -> (Vec<T>, Vec<Cache<T>>) {
    debug_assert!(!(keep && matches!(norm, Norm::Fixed(_))));
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut offset = 0;
    let mut bn_index = 0;
    for l in &spec.layers {
        let (next, cache) = match l.layer {
            Layer::Conv2d { .. } | Layer::Conv1d { .. } => {
                let g = ConvGeom::new(l).expect("convolution layer");
                let wlen = g.out_c * g.patch();
                let weight = &params[offset..offset + wlen];
                let bias = &params[offset + wlen..offset + wlen + g.out_c];
                offset += wlen + g.out_c;
                let out = conv_forward(&g, &act, n, weight, bias);
                (
                    out,
                    if keep {
                        Cache::Conv { input: act }
                    } else {
                        Cache::None
                    },
                )
            }
            Layer::BatchNorm { channels } => {
                let scale = &params[offset..offset + channels];
                let shift = &params[offset + channels..offset + 2 * channels];
                offset += 2 * channels;
                let mut inv_stds = Vec::with_capacity(channels);
                let mut recorded = Vec::new();
                for c in 0..channels {
                    let (base, stride, m) = bn_channel(&l.input_shape, n, c);
                    let (mean, var) = match &norm {
                        Norm::Fixed(stats) => {
                            let (mu, v) = stats.layers[bn_index][c];
                            (T::from_f64(mu), T::from_f64(v))
                        }
                        _ => {
                            let inv_m = 1.0 / m as f64;
                            let mut mean = T::zero();
                            for i in 0..m {
                                mean += act[base + i * stride];
                            }
                            mean = mean.scale(inv_m);
                            let mut ss = T::zero();
                            for i in 0..m {
                                let d = act[base + i * stride] - mean;
                                ss += d * d;
                            }
                            if m > 1 {
                                recorded.push((mean.value(), ss.value() / (m - 1) as f64));
                            } else {
                                recorded.push((mean.value(), 0.0));
                            }
                            (mean, ss.scale(inv_m))
                        }
                    };
                    let inv_std = T::from_f64(1.0) / (var + T::from_f64(BATCH_NORM_EPS)).sqrt();
                    for i in 0..m {
                        let x = &mut act[base + i * stride];
                        *x = (*x - mean) * inv_std;
                    }
                    inv_stds.push(inv_std);
                }
                if let Norm::Record(stats) = &mut norm {
                    stats.layers.push(recorded);
                }
                bn_index += 1;
                let cache = if keep {
                    Cache::BatchNorm {
                        xhat: act.clone(),
                        inv_std: inv_stds,
                    }
                } else {
                    Cache::None
                };
                for c in 0..channels {
                    let (base, stride, m) = bn_channel(&l.input_shape, n, c);
                    for i in 0..m {
                        let x = &mut act[base + i * stride];
                        *x = *x * scale[c] + shift[c];
                    }
                }
                (act, cache)
            }
            Layer::Relu => {
                let mut mask = if keep {
                    Vec::with_capacity(act.len())
                } else {
                    Vec::new()
                };
                for x in act.iter_mut() {
                    let on = x.value() > 0.0;
                    if !on {
                        *x = T::zero();
                    }
                    if keep {
                        mask.push(on);
                    }
                }
                (
                    act,
                    if keep {
                        Cache::Relu { mask }
                    } else {
                        Cache::None
                    },
                )
            }
            Layer::Tanh => {
                for x in act.iter_mut() {
                    *x = x.tanh();
                }
                let cache = if keep {
                    Cache::Tanh {
                        output: act.clone(),
                    }
                } else {
                    Cache::None
                };
                (act, cache)
            }
            Layer::MaxPool2d { .. } | Layer::MaxPool1d { .. } => {
                let (h, w, size, oh, ow) = pool_geom(l);
                let planes = l.input_shape[0] * n;
                let mut out = Vec::with_capacity(planes * oh * ow);
                let mut argmax = if keep {
                    Vec::with_capacity(planes * oh * ow)
                } else {
                    Vec::new()
                };
                let ph = if h == 1 { 1 } else { size };
                for p in 0..planes {
                    let base = p * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + oy * ph * w + ox * size;
                            for ky in 0..ph {
                                for kx in 0..size {
                                    let idx = base + (oy * ph + ky) * w + ox * size + kx;
                                    if act[idx].value() > act[best].value() {
                                        best = idx;
                                    }
                                }
                            }
                            out.push(act[best]);
                            if keep {
                                argmax.push(best);
                            }
                        }
                    }
                }
                (
                    out,
                    if keep {
                        Cache::Pool { argmax }
                    } else {
                        Cache::None
                    },
                )
            }
            Layer::Flatten => {
                if l.input_shape.len() == 1 {
                    (act, Cache::None)
                } else {
                    let c = l.input_shape[0];
                    let s: usize = l.input_shape[1..].iter().product();
                    let mut out = vec![T::zero(); act.len()];
                    for ci in 0..c {
                        for j in 0..n {
                            out[j * c * s + ci * s..][..s]
                                .copy_from_slice(&act[(ci * n + j) * s..][..s]);
                        }
                    }
                    (out, Cache::None)
                }
            }
            Layer::Linear {
                in_features,
                out_features,
            } => {
                let wlen = in_features * out_features;
                let weight = &params[offset..offset + wlen];
                let bias = &params[offset + wlen..offset + wlen + out_features];
                offset += wlen + out_features;
                let mut out = vec![T::zero(); n * out_features];
                T::gemm(
                    MatRef::row_major(&act, n, in_features),
                    MatRef::row_major(weight, out_features, in_features).t(),
                    MatMut::row_major(&mut out, n, out_features),
                    false,
                );
                for row in out.chunks_mut(out_features) {
                    for (y, &b) in row.iter_mut().zip(bias) {
                        *y += b;
                    }
                }
                (
                    out,
                    if keep {
                        Cache::Linear { input: act }
                    } else {
                        Cache::None
                    },
                )
            }
            Layer::Softmax => (act, Cache::None),
        };
        act = next;
        caches.push(cache);
    }
    (act, caches)
}

/// Reverse pass from `dlogits`; returns the parameter gradient.
fn backward_pass<T: Scalar>(
    spec: &ModelSpec,
    params: &[T],
    caches: Vec<Cache<T>>,
    dlogits: Vec<T>,
    n: usize,
) -> Vec<T> {
    let mut grad = vec![T::zero(); params.len()];
    // parameter offsets per layer, computed forward
    let mut offsets = Vec::with_capacity(spec.layers.len());
    let mut offset = 0;
    for l in &spec.layers {
        offsets.push(offset);
        offset += l
            .layer
            .parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum::<usize>();
    }
    let first_param_layer = spec
        .layers
        .iter()
        .position(|l| !l.layer.parameter_shapes().is_empty())
        .unwrap_or(0);

    let mut delta = dlogits;
    for (i, (l, cache)) in spec.layers.iter().zip(caches).enumerate().rev() {
        let off = offsets[i];
        // no input gradient is needed below the first parameterized layer
        let want_dx = i > first_param_layer;
        delta = match (l.layer.clone(), cache) {
            (Layer::Softmax, _) => delta,
            (Layer::Conv2d { .. } | Layer::Conv1d { .. }, Cache::Conv { input }) => {
                let g = ConvGeom::new(l).expect("convolution layer");
                let wlen = g.out_c * g.patch();
                let (dw, rest) = grad[off..].split_at_mut(wlen);
                conv_backward(
                    &g,
                    &input,
                    n,
                    &params[off..off + wlen],
                    &delta,
                    dw,
                    &mut rest[..g.out_c],
                    want_dx,
                )
            }
            (Layer::BatchNorm { channels }, Cache::BatchNorm { xhat, inv_std }) => {
                let scale = &params[off..off + channels];
                let mut dx = delta;
                for c in 0..channels {
                    let (base, stride, m) = bn_channel(&l.input_shape, n, c);
                    let mut dscale = T::zero();
                    let mut dshift = T::zero();
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for k in 0..m {
                        let idx = base + k * stride;
                        let dy = dx[idx];
                        dscale += dy * xhat[idx];
                        dshift += dy;
                        let dxh = dy * scale[c];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[idx];
                    }
                    grad[off + c] += dscale;
                    grad[off + channels + c] += dshift;
                    let inv_m = 1.0 / m as f64;
                    let mean_dxhat = sum_dxhat.scale(inv_m);
                    let mean_dxhat_xhat = sum_dxhat_xhat.scale(inv_m);
                    for k in 0..m {
                        let idx = base + k * stride;
                        let dxh = dx[idx] * scale[c];
                        dx[idx] = inv_std[c] * (dxh - mean_dxhat - xhat[idx] * mean_dxhat_xhat);
                    }
                }
                dx
            }
            (Layer::Relu, Cache::Relu { mask }) => {
                let mut dx = delta;
                for (d, on) in dx.iter_mut().zip(mask) {
                    if !on {
                        *d = T::zero();
                    }
                }
                dx
            }
            (Layer::Tanh, Cache::Tanh { output }) => {
                let mut dx = delta;
                for (d, y) in dx.iter_mut().zip(output) {
                    *d = *d * (T::from_f64(1.0) - y * y);
                }
                dx
            }
            (Layer::MaxPool2d { .. } | Layer::MaxPool1d { .. }, Cache::Pool { argmax }) => {
                let in_len = l.input_shape.iter().product::<usize>() * n;
                let mut dx = vec![T::zero(); in_len];
                for (d, idx) in delta.into_iter().zip(argmax) {
                    dx[idx] += d;
                }
                dx
            }
            (Layer::Flatten, _) => {
                if l.input_shape.len() == 1 {
                    delta
                } else {
                    let c = l.input_shape[0];
                    let s: usize = l.input_shape[1..].iter().product();
                    let mut dx = vec![T::zero(); delta.len()];
                    for ci in 0..c {
                        for j in 0..n {
                            dx[(ci * n + j) * s..][..s]
                                .copy_from_slice(&delta[j * c * s + ci * s..][..s]);
                        }
                    }
                    dx
                }
            }
            (
                Layer::Linear {
                    in_features,
                    out_features,
                },
                Cache::Linear { input },
            ) => {
                let wlen = in_features * out_features;
                let (dw, rest) = grad[off..].split_at_mut(wlen);
                T::gemm(
                    MatRef::row_major(&delta, n, out_features).t(),
                    MatRef::row_major(&input, n, in_features),
                    MatMut::row_major(dw, out_features, in_features),
                    true,
                );
                let db = &mut rest[..out_features];
                for row in delta.chunks(out_features) {
                    for (b, &d) in db.iter_mut().zip(row) {
                        *b += d;
                    }
                }
                if want_dx {
                    let mut dx = vec![T::zero(); n * in_features];
                    T::gemm(
                        MatRef::row_major(&delta, n, out_features),
                        MatRef::row_major(&params[off..off + wlen], out_features, in_features),
                        MatMut::row_major(&mut dx, n, in_features),
                        false,
                    );
                    dx
                } else {
                    Vec::new()
                }
            }
            _ => unreachable!("layer cache mismatch"),
        };
        if !want_dx && i <= first_param_layer {
            break;
        }
    }
    grad
}

fn check_batch(spec: &ModelSpec, batch: &[&[f64]]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let want = spec.input_len();
    for (i, x) in batch.iter().enumerate() {
        if x.len() != want {
            return Err(Error::Shape(format!(
                "example {i} has {} features, {} expects {:?}",
                x.len(),
                spec.name,
                spec.input_shape
            )));
        }
    }
    Ok(())
}

fn check_labels(spec: &ModelSpec, data: &[LabeledExample]) -> Result<()> {
    for (i, ex) in data.iter().enumerate() {
        if ex.label >= spec.class_count {
            return Err(Error::Label(format!(
                "example {i} has label {} outside [0, {})",
                ex.label, spec.class_count
            )));
        }
    }
    Ok(())
}

/// Packs per-example features into the engine's batch layout.
fn gather<T: Scalar>(spec: &ModelSpec, batch: &[&[f64]]) -> Vec<T> {
    let n = batch.len();
    let len = spec.input_len();
    let mut out = vec![T::zero(); n * len];
    if spec.input_shape.len() == 1 {
        for (j, x) in batch.iter().enumerate() {
            for (o, &v) in out[j * len..(j + 1) * len].iter_mut().zip(x.iter()) {
                *o = T::from_f64(v);
            }
        }
    } else {
        let c = spec.input_shape[0];
        let s = len / c;
        for (j, x) in batch.iter().enumerate() {
            for ci in 0..c {
                let dst = &mut out[(ci * n + j) * s..][..s];
                for (o, &v) in dst.iter_mut().zip(&x[ci * s..(ci + 1) * s]) {
                    *o = T::from_f64(v);
                }
            }
        }
    }
    out
}

/// Mean cross-entropy and `∂loss/∂logits`, via log-sum-exp.
fn cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> (T, Vec<T>) {
    let n = labels.len();
    let inv_n = 1.0 / n as f64;
    let mut total = T::zero();
    let mut dlogits = vec![T::zero(); logits.len()];
    for (j, &y) in labels.iter().enumerate() {
        let row = &logits[j * classes..(j + 1) * classes];
        let mut max = row[0];
        for &z in &row[1..] {
            if z.value() > max.value() {
                max = z;
            }
        }
        let mut sum = T::zero();
        for &z in row {
            sum += (z - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - row[y];
        let drow = &mut dlogits[j * classes..(j + 1) * classes];
        for (k, (d, &z)) in drow.iter_mut().zip(row).enumerate() {
            let p = (z - lse).exp();
            *d = if k == y { p - T::from_f64(1.0) } else { p }.scale(inv_n);
        }
    }
    (total.scale(inv_n), dlogits)
}

fn features(data: &[LabeledExample]) -> Vec<&[f64]> {
    data.iter().map(|e| &e.features[..]).collect()
}

fn labels(data: &[LabeledExample]) -> Vec<usize> {
    data.iter().map(|e| e.label).collect()
}

/// Forward-only logits `[N, classes]` in `f64`.
pub fn logits(
    spec: &ModelSpec,
    params: &crate::diffcore::ParameterVector,
    batch: &[&[f64]],
) -> Result<Vec<f64>> {
    logits_with(spec, params, batch, None)
}

/// [`logits`] with batch-norm normalized by fixed `stats` when given.
pub fn logits_with(
    spec: &ModelSpec,
    params: &crate::diffcore::ParameterVector,
    batch: &[&[f64]],
    stats: Option<&NormStatistics>,
) -> Result<Vec<f64>> {
    if let Some(st) = stats {
        check_statistics(spec, st)?;
    }
    check_batch(spec, batch)?;
    if params.len() != spec.parameter_count() {
        return Err(Error::Layout(format!(
            "{} parameters supplied, {} expects {}",
            params.len(),
            spec.name,
            spec.parameter_count()
        )));
    }
    let input = gather::<f64>(spec, batch);
    let norm = match stats {
        Some(st) => Norm::Fixed(st),
        None => Norm::Batch,
    };
    Ok(forward_pass(spec, params.values(), input, batch.len(), false, norm).0)
}

pub(crate) fn loss(spec: &ModelSpec, params: &[f64], data: &[LabeledExample]) -> Result<f64> {
    let batch = features(data);
    check_batch(spec, &batch)?;
    check_labels(spec, data)?;
    let input = gather::<f64>(spec, &batch);
    let (logits, _) = forward_pass(spec, params, input, data.len(), false, Norm::Batch);
    Ok(cross_entropy(&logits, &labels(data), spec.class_count).0)
}

fn check_statistics(spec: &ModelSpec, stats: &NormStatistics) -> Result<()> {
    let channels: Vec<usize> = spec
        .layers
        .iter()
        .filter_map(|l| match l.layer {
            Layer::BatchNorm { channels } => Some(channels),
            _ => None,
        })
        .collect();
    let given: Vec<usize> = stats.layers.iter().map(Vec::len).collect();
    if channels != given {
        return Err(Error::Layout(format!(
            "batch-norm statistics for channels {given:?}, {} has {channels:?}",
            spec.name
        )));
    }
    Ok(())
}

/// Mean loss under fixed batch-norm statistics.
pub(crate) fn loss_fixed(
    spec: &ModelSpec,
    params: &[f64],
    data: &[LabeledExample],
    stats: &NormStatistics,
) -> Result<f64> {
    let batch = features(data);
    check_batch(spec, &batch)?;
    check_labels(spec, data)?;
    check_statistics(spec, stats)?;
    let input = gather::<f64>(spec, &batch);
    let (logits, _) = forward_pass(spec, params, input, data.len(), false, Norm::Fixed(stats));
    Ok(cross_entropy(&logits, &labels(data), spec.class_count).0)
}

/// Loss, gradient and the batch-norm statistics of this batch.
pub(crate) fn loss_gradient_and_statistics(
    spec: &ModelSpec,
    params: &[f64],
    data: &[LabeledExample],
) -> Result<(f64, Vec<f64>, NormStatistics)> {
    let batch = features(data);
    check_batch(spec, &batch)?;
    check_labels(spec, data)?;
    let n = data.len();
    let input = gather::<f64>(spec, &batch);
    let mut stats = NormStatistics::default();
    let (logits, caches) = forward_pass(spec, params, input, n, true, Norm::Record(&mut stats));
    let (loss, dlogits) = cross_entropy(&logits, &labels(data), spec.class_count);
    let grad = backward_pass(spec, params, caches, dlogits, n);
    Ok((loss, grad, stats))
}

/// Mean loss together with the logits it was computed from.
pub(crate) fn loss_and_logits(
    spec: &ModelSpec,
    params: &[f64],
    data: &[LabeledExample],
) -> Result<(f64, Vec<f64>)> {
    let batch = features(data);
    check_batch(spec, &batch)?;
    check_labels(spec, data)?;
    let input = gather::<f64>(spec, &batch);
    let (logits, _) = forward_pass(spec, params, input, data.len(), false, Norm::Batch);
    let loss = cross_entropy(&logits, &labels(data), spec.class_count).0;
    Ok((loss, logits))
}

pub(crate) fn loss_and_gradient<T: Scalar>(
    spec: &ModelSpec,
    params: &[T],
    data: &[LabeledExample],
) -> Result<(T, Vec<T>)> {
    let batch = features(data);
    check_batch(spec, &batch)?;
    check_labels(spec, data)?;
    let n = data.len();
    let input = gather::<T>(spec, &batch);
    let (logits, caches) = forward_pass(spec, params, input, n, true, Norm::Batch);
    let (loss, dlogits) = cross_entropy(&logits, &labels(data), spec.class_count);
    let grad = backward_pass(spec, params, caches, dlogits, n);
    Ok((loss, grad))
}

/// Gradient and `H·v` from a single dual-number pass.
pub(crate) fn gradient_and_hvp(
    spec: &ModelSpec,
    params: &[f64],
    v: &[f64],
    data: &[LabeledExample],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dual: Vec<Dual> = params
        .iter()
        .zip(v)
        .map(|(&p, &t)| Dual::new(p, t))
        .collect();
    let (_, grad) = loss_and_gradient::<Dual>(spec, &dual, data)?;
    Ok(grad.into_iter().map(|d| (d.value, d.tangent)).unzip())
}
