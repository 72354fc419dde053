//! A small reverse-mode automatic differentiation tape over dense `f64` arrays.
//!
//! Every operation appends one node holding its output value and, when the
//! tape records, a closure that maps the output gradient to gradients of its
//! inputs. The operation set is exactly what the separator network needs:
//! 2-D convolutions over `(channels, time, freq)` maps and sequence ops over
//! `(sequences, length, features)` token arrays.

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3, IxDyn, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut Gradients)>;

pub struct Tape {
    values: Vec<ArrayD<f64>>,
    backward: Vec<Option<BackwardFn>>,
    record: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v.0].take()
    }

    pub fn accumulate(&mut self, v: Var, g: ArrayD<f64>) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Geometry of a 2-D convolution over `(channels, time, freq)` maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride_f: usize,
    pub dilation_t: usize,
    pub pad_t: (usize, usize),
    pub pad_f: (usize, usize),
}

impl Conv2dGeometry {
    pub const POINTWISE: Self = Self {
        stride_f: 1,
        dilation_t: 1,
        pad_t: (0, 0),
        pad_f: (0, 0),
    };

    fn output_dims(&self, t: usize, f: usize, kt: usize, kf: usize) -> Option<(usize, usize)> {
        let span_t = self.dilation_t * (kt - 1) + 1;
        let pt = t + self.pad_t.0 + self.pad_t.1;
        let pf = f + self.pad_f.0 + self.pad_f.1;
        if pt < span_t || pf < kf {
            return None;
        }
        Some((pt - span_t + 1, (pf - kf) / self.stride_f + 1))
    }
}

fn as3(a: &ArrayD<f64>) -> ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 tensor")
}

fn rows2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    let d = *a.shape().last().expect("non-scalar");
    a.view().into_shape_with_order((a.len() / d, d)).expect("contiguous tensor")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (t, &v) in y.iter_mut().zip(x) {
        *t += k * v;
    }
}

/// Copies columns `off..off + dh` of a `(l, stride)` block into a `(dh, l)` buffer.
fn gather_head(seq: &[f64], stride: usize, off: usize, dh: usize, dst: &mut [f64]) {
    let l = seq.len() / stride;
    for j in 0..l {
        let src = &seq[j * stride + off..][..dh];
        for c in 0..dh {
            dst[c * l + j] = src[c];
        }
    }
}

fn scatter_head(src: &[f64], stride: usize, off: usize, dh: usize, seq: &mut [f64]) {
    let l = seq.len() / stride;
    for j in 0..l {
        let dst = &mut seq[j * stride + off..][..dh];
        for c in 0..dh {
            dst[c] = src[c * l + j];
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct ConvShape {
    cin: usize,
    t: usize,
    f: usize,
    kt: usize,
    kf: usize,
    to: usize,
    fo: usize,
}

fn im2col(x: ArrayView3<f64>, sh: &ConvShape, g: &Conv2dGeometry) -> Array2<f64> {
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("contiguous");
    let mut cols = Array2::zeros((sh.cin * sh.kt * sh.kf, sh.to * sh.fo));
    for ci in 0..sh.cin {
        for a in 0..sh.kt {
            for b in 0..sh.kf {
                let r = (ci * sh.kt + a) * sh.kf + b;
                let mut row = cols.row_mut(r);
                let row = row.as_slice_mut().expect("contiguous");
                for to in 0..sh.to {
                    let ti = (to + a * g.dilation_t) as isize - g.pad_t.0 as isize;
                    if ti < 0 || ti >= sh.t as isize {
                        continue;
                    }
                    let xrow = &xs[(ci * sh.t + ti as usize) * sh.f..][..sh.f];
                    let base = to * sh.fo;
                    for fo in 0..sh.fo {
                        let fi = (fo * g.stride_f + b) as isize - g.pad_f.0 as isize;
                        if fi >= 0 && (fi as usize) < sh.f {
                            row[base + fo] = xrow[fi as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: ArrayView2<f64>, sh: &ConvShape, g: &Conv2dGeometry) -> Array3<f64> {
    let mut x = Array3::zeros((sh.cin, sh.t, sh.f));
    let xs = x.as_slice_mut().expect("contiguous");
    for ci in 0..sh.cin {
        for a in 0..sh.kt {
            for b in 0..sh.kf {
                let r = (ci * sh.kt + a) * sh.kf + b;
                let row = cols.row(r);
                let row = row.as_slice().expect("contiguous");
                for to in 0..sh.to {
                    let ti = (to + a * g.dilation_t) as isize - g.pad_t.0 as isize;
                    if ti < 0 || ti >= sh.t as isize {
                        continue;
                    }
                    let xrow = &mut xs[(ci * sh.t + ti as usize) * sh.f..][..sh.f];
                    let base = to * sh.fo;
                    for fo in 0..sh.fo {
                        let fi = (fo * g.stride_f + b) as isize - g.pad_f.0 as isize;
                        if fi >= 0 && (fi as usize) < sh.f {
                            xrow[fi as usize] += row[base + fo];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape for inference: values only, no backward closures.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(record: bool) -> Self {
        Self {
            values: Vec::new(),
            backward: Vec::new(),
            record,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.values.push(value);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    /// Appends a node with a caller-supplied backward rule.
    ///
    /// The closure receives all node values, the gradient of this node and the
    /// gradient accumulator; it must only touch nodes created before this one.
    pub fn push_op<F>(&mut self, value: ArrayD<f64>, backward: F) -> Var
    where
        F: Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut Gradients) + 'static,
    {
        self.values.push(value);
        self.backward.push(if self.record { Some(Box::new(backward)) } else { None });
        Var(self.values.len() - 1)
    }

    /// Back-propagates `seed` from `root` through every recorded node.
    pub fn backward(&self, root: Var, seed: ArrayD<f64>) -> Gradients {
        assert!(self.record, "backward on an inference tape");
        assert_eq!(seed.shape(), self.values[root.0].shape(), "seed shape");
        let mut grads = Gradients {
            grads: vec![None; self.values.len()],
        };
        grads.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads.grads[i].take() else { continue };
            if let Some(f) = &self.backward[i] {
                f(&self.values, &g, &mut grads);
            }
            grads.grads[i] = Some(g);
        }
        grads
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.values[a.0] + &self.values[b.0];
        self.push_op(out, move |_, g, grads| {
            grads.accumulate(a, g.clone());
            grads.accumulate(b, g.clone());
        })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = &self.values[a.0] * k;
        self.push_op(out, move |_, g, grads| grads.accumulate(a, g * k))
    }

    /// `a + k·b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, k: f64) -> Var {
        let out = &self.values[a.0] + &(&self.values[b.0] * k);
        self.push_op(out, move |_, g, grads| {
            grads.accumulate(a, g.clone());
            grads.accumulate(b, g * k);
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.values[a.0] * &self.values[b.0];
        self.push_op(out, move |v, g, grads| {
            grads.accumulate(a, g * &v[b.0]);
            grads.accumulate(b, g * &v[a.0]);
        })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes = axes.to_vec();
        let out = self.values[a.0]
            .view()
            .permuted_axes(IxDyn(&axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push_op(out, move |_, g, grads| {
            let back = g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
            grads.accumulate(a, back);
        })
    }

    /// Concatenates rank-3 maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| as3(&self.values[p.0])).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("matching map shapes").into_dyn();
        let sizes: Vec<usize> = views.iter().map(|v| v.dim().0).collect();
        let parts = parts.to_vec();
        self.push_op(out, move |_, g, grads| {
            let g = as3(g);
            let mut start = 0;
            for (p, &c) in parts.iter().zip(&sizes) {
                grads.accumulate(*p, g.slice(s![start..start + c, .., ..]).to_owned().into_dyn());
                start += c;
            }
        })
    }

    /// Convolution of `x: (cin, t, f)` with `w: (cout, cin, kt, kf)` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeometry) -> Var {
        let xv = as3(&self.values[x.0]);
        let wv = &self.values[w.0];
        let (cin, t, f) = xv.dim();
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv weight rank");
        assert_eq!(ws[1], cin, "conv input channels");
        let (cout, kt, kf) = (ws[0], ws[2], ws[3]);
        let (to, fo) = geom
            .output_dims(t, f, kt, kf)
            .unwrap_or_else(|| panic!("conv kernel {kt}x{kf} larger than padded input {t}x{f}"));
        let sh = ConvShape { cin, t, f, kt, kf, to, fo };
        let k = cin * kt * kf;
        let w2 = wv.view().into_shape_with_order((cout, k)).expect("contiguous weight");
        let cols = im2col(xv, &sh, &geom);
        let mut out = w2.dot(&cols);
        let bias = as1(&self.values[b.0]);
        for (mut row, &bv) in out.outer_iter_mut().zip(bias.iter()) {
            row += bv;
        }
        let out = out.into_shape_with_order((cout, to, fo)).expect("reshape").into_dyn();
        self.push_op(out, move |v, g, grads| {
            let g2 = g.view().into_shape_with_order((cout, to * fo)).expect("contiguous grad");
            let cols = im2col(as3(&v[x.0]), &sh, &geom);
            let dw = g2.dot(&cols.t());
            grads.accumulate(w, dw.into_shape_with_order(IxDyn(&[cout, cin, kt, kf])).expect("reshape"));
            grads.accumulate(b, g2.sum_axis(Axis(1)).into_dyn());
            let w2 = v[w.0].view().into_shape_with_order((cout, k)).expect("contiguous weight");
            let dcols = w2.t().dot(&g2);
            grads.accumulate(x, col2im(dcols.view(), &sh, &geom).into_dyn());
        })
    }

    /// Channel-wise PReLU on a `(c, ...)` tensor with slopes `alpha: (c)`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Var {
        let xv = &self.values[x.0];
        let av = as1(&self.values[alpha.0]).to_vec();
        let c = xv.shape()[0];
        let inner = xv.len() / c;
        let mut out = xv.as_standard_layout().into_owned();
        for (chunk, &a) in out.as_slice_mut().expect("contiguous").chunks_exact_mut(inner).zip(&av) {
            for v in chunk {
                if *v <= 0.0 {
                    *v *= a;
                }
            }
        }
        let shape = xv.raw_dim();
        self.push_op(out, move |v, g, grads| {
            let xs = v[x.0].as_slice().expect("contiguous input");
            let gs = g.as_slice().expect("contiguous grad");
            let av = as1(&v[alpha.0]);
            let mut dx = vec![0.0; c * inner];
            let mut da = vec![0.0; c];
            for ci in 0..c {
                let a = av[ci];
                let mut acc = 0.0;
                let xr = &xs[ci * inner..][..inner];
                let gr = &gs[ci * inner..][..inner];
                let dr = &mut dx[ci * inner..][..inner];
                for j in 0..inner {
                    if xr[j] > 0.0 {
                        dr[j] = gr[j];
                    } else {
                        dr[j] = a * gr[j];
                        acc += gr[j] * xr[j];
                    }
                }
                da[ci] = acc;
            }
            grads.accumulate(x, ArrayD::from_shape_vec(shape.clone(), dx).expect("shape"));
            grads.accumulate(alpha, Array1::from(da).into_dyn());
        })
    }

    /// `x @ w + b` over the last axis of `x`; `w: (din, dout)`, `b: (dout)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.values[x.0];
        let x2 = rows2(xv);
        let w2 = as2(&self.values[w.0]);
        let mut out = x2.dot(&w2);
        out += &as1(&self.values[b.0]);
        let mut shape = xv.shape().to_vec();
        let dout = w2.ncols();
        *shape.last_mut().expect("non-scalar") = dout;
        let in_shape = xv.raw_dim();
        let out = out.into_shape_with_order(IxDyn(&shape)).expect("reshape");
        self.push_op(out, move |v, g, grads| {
            let g2 = rows2(g);
            let x2 = rows2(&v[x.0]);
            let w2 = as2(&v[w.0]);
            grads.accumulate(w, x2.t().dot(&g2).into_dyn());
            grads.accumulate(b, g2.sum_axis(Axis(0)).into_dyn());
            let dx = g2.dot(&w2.t());
            grads.accumulate(x, dx.into_shape_with_order(in_shape.clone()).expect("reshape"));
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = &self.values[x.0];
        let d = *xv.shape().last().expect("non-scalar");
        let n = xv.len() / d;
        let xs = xv.as_slice().expect("contiguous input");
        let gv = as1(&self.values[gamma.0]).to_vec();
        let bv = as1(&self.values[beta.0]).to_vec();
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &xs[r * d..][..d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            let hr = &mut xhat[r * d..][..d];
            let or = &mut out[r * d..][..d];
            for j in 0..d {
                hr[j] = (row[j] - mean) * is;
                or[j] = hr[j] * gv[j] + bv[j];
            }
        }
        let shape = xv.raw_dim();
        let out = ArrayD::from_shape_vec(shape.clone(), out).expect("shape");
        self.push_op(out, move |v, g, grads| {
            let gs = g.as_slice().expect("contiguous grad");
            let gv = as1(&v[gamma.0]);
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut dx = vec![0.0; n * d];
            let mut dxhat = vec![0.0; d];
            for r in 0..n {
                let gr = &gs[r * d..][..d];
                let hr = &xhat[r * d..][..d];
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    dgamma[j] += gr[j] * hr[j];
                    dbeta[j] += gr[j];
                    dxhat[j] = gr[j] * gv[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * hr[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                let dr = &mut dx[r * d..][..d];
                for j in 0..d {
                    dr[j] = inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                }
            }
            grads.accumulate(gamma, Array1::from(dgamma).into_dyn());
            grads.accumulate(beta, Array1::from(dbeta).into_dyn());
            grads.accumulate(x, ArrayD::from_shape_vec(shape.clone(), dx).expect("shape"));
        })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let shape = xv.raw_dim();
        let xs = xv.as_slice().expect("contiguous input");
        let sig: Vec<f64> = xs.iter().map(|&v| sigmoid(v)).collect();
        let out: Vec<f64> = xs.iter().zip(&sig).map(|(a, b)| a * b).collect();
        let out = ArrayD::from_shape_vec(shape.clone(), out).expect("shape");
        let sig = if self.record { sig } else { Vec::new() };
        self.push_op(out, move |v, g, grads| {
            let xs = v[x.0].as_slice().expect("contiguous input");
            let gs = g.as_slice().expect("contiguous grad");
            let dx: Vec<f64> = gs
                .iter()
                .zip(xs)
                .zip(&sig)
                .map(|((&g, &xv), &s)| g * s * (1.0 + xv * (1.0 - s)))
                .collect();
            grads.accumulate(x, ArrayD::from_shape_vec(shape.clone(), dx).expect("shape"));
        })
    }

    /// `k · sigmoid(x)`.
    pub fn scaled_sigmoid(&mut self, x: Var, k: f64) -> Var {
        let out = self.values[x.0].mapv(|v| k * sigmoid(v));
        self.push_op(out, move |v, g, grads| {
            let mut dx = v[x.0].mapv(|xv| {
                let s = sigmoid(xv);
                k * s * (1.0 - s)
            });
            dx *= g;
            grads.accumulate(x, dx);
        })
    }

    /// Gated linear unit over the last axis: first half ⊙ sigmoid(second half).
    pub fn glu(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let d2 = *xv.shape().last().expect("non-scalar");
        assert!(d2.is_multiple_of(2), "glu needs an even feature axis");
        let d = d2 / 2;
        let n = xv.len() / d2;
        let xs = xv.as_slice().expect("contiguous input");
        let mut sig = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d2..][..d2];
            for j in 0..d {
                let sb = sigmoid(row[d + j]);
                sig[r * d + j] = sb;
                out[r * d + j] = row[j] * sb;
            }
        }
        let in_shape = xv.raw_dim();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = d;
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape");
        self.push_op(out, move |v, g, grads| {
            let xs = v[x.0].as_slice().expect("contiguous input");
            let gs = g.as_slice().expect("contiguous grad");
            let mut dx = vec![0.0; n * d2];
            for r in 0..n {
                for j in 0..d {
                    let a = xs[r * d2 + j];
                    let sb = sig[r * d + j];
                    let gj = gs[r * d + j];
                    dx[r * d2 + j] = gj * sb;
                    dx[r * d2 + d + j] = gj * a * sb * (1.0 - sb);
                }
            }
            grads.accumulate(x, ArrayD::from_shape_vec(in_shape.clone(), dx).expect("shape"));
        })
    }

    /// Depthwise 1-D convolution along axis 1 of `x: (s, l, d)` with
    /// `w: (d, k)` (odd `k`, same padding) and bias `b: (d)`.
    pub fn depthwise_conv_seq(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.values[x.0];
        let (ns, l, d) = as3(xv).dim();
        let wt = as2(&self.values[w.0]).t().as_standard_layout().into_owned();
        let k = wt.nrows();
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        let p = k / 2;
        let xs = xv.as_slice().expect("contiguous input");
        let wts = wt.as_slice().expect("contiguous kernel");
        let bias = as1(&self.values[b.0]).to_vec();
        let mut out = vec![0.0; ns * l * d];
        for si in 0..ns {
            for li in 0..l {
                let o = &mut out[(si * l + li) * d..][..d];
                o.copy_from_slice(&bias);
                let lo = p.saturating_sub(li);
                let hi = k.min(l + p - li);
                for j in lo..hi {
                    let src = li + j - p;
                    let xr = &xs[(si * l + src) * d..][..d];
                    let wr = &wts[j * d..][..d];
                    for c in 0..d {
                        o[c] += xr[c] * wr[c];
                    }
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[ns, l, d]), out).expect("shape");
        self.push_op(out, move |v, g, grads| {
            let xs = v[x.0].as_slice().expect("contiguous input");
            let gs = g.as_slice().expect("contiguous grad");
            let wt = as2(&v[w.0]).t().as_standard_layout().into_owned();
            let wts = wt.as_slice().expect("contiguous kernel");
            let mut dx = vec![0.0; ns * l * d];
            let mut dwt = vec![0.0; k * d];
            let mut db = vec![0.0; d];
            for si in 0..ns {
                for li in 0..l {
                    let gr = &gs[(si * l + li) * d..][..d];
                    for c in 0..d {
                        db[c] += gr[c];
                    }
                    let lo = p.saturating_sub(li);
                    let hi = k.min(l + p - li);
                    for j in lo..hi {
                        let src = li + j - p;
                        let base = (si * l + src) * d;
                        let wr = &wts[j * d..][..d];
                        let dwr = &mut dwt[j * d..][..d];
                        for c in 0..d {
                            dx[base + c] += gr[c] * wr[c];
                            dwr[c] += gr[c] * xs[base + c];
                        }
                    }
                }
            }
            let dw = Array2::from_shape_vec((k, d), dwt).expect("shape").t().as_standard_layout().into_owned();
            grads.accumulate(x, ArrayD::from_shape_vec(IxDyn(&[ns, l, d]), dx).expect("shape"));
            grads.accumulate(w, dw.into_dyn());
            grads.accumulate(b, Array1::from(db).into_dyn());
        })
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv: (s, l, 3d)` packs queries, keys and values along the last axis;
    /// attention runs independently over each of the `s` sequences and the
    /// result is `(s, l, d)`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let xv = &self.values[qkv.0];
        let (ns, l, d3) = {
            let sh = xv.shape();
            assert_eq!(sh.len(), 3, "attention expects (seq, len, 3d)");
            (sh[0], sh[1], sh[2])
        };
        assert!(d3 % 3 == 0, "packed qkv axis");
        let d = d3 / 3;
        assert!(heads > 0 && d % heads == 0, "heads must divide model width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let xs = xv.as_slice().expect("contiguous input");
        let mut out = vec![0.0; ns * l * d];
        let mut probs = if self.record { vec![0.0; ns * heads * l * l] } else { Vec::new() };
        let mut p = vec![0.0; l * l];
        let mut qt = vec![0.0; dh * l];
        let mut kt = vec![0.0; dh * l];
        let mut vt = vec![0.0; dh * l];
        for si in 0..ns {
            let xseq = &xs[si * l * d3..][..l * d3];
            for h in 0..heads {
                gather_head(xseq, d3, h * dh, dh, &mut qt);
                gather_head(xseq, d3, d + h * dh, dh, &mut kt);
                gather_head(xseq, d3, 2 * d + h * dh, dh, &mut vt);
                for i in 0..l {
                    let row = &mut p[i * l..][..l];
                    row.iter_mut().for_each(|v| *v = 0.0);
                    for c in 0..dh {
                        axpy(qt[c * l + i] * scale, &kt[c * l..][..l], row);
                    }
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut z = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    let inv = 1.0 / z;
                    row.iter_mut().for_each(|v| *v *= inv);
                    let orow = &mut out[(si * l + i) * d + h * dh..][..dh];
                    for (c, o) in orow.iter_mut().enumerate() {
                        *o = dot(row, &vt[c * l..][..l]);
                    }
                }
                if self.record {
                    probs[(si * heads + h) * l * l..][..l * l].copy_from_slice(&p);
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[ns, l, d]), out).expect("shape");
        self.push_op(out, move |v, g, grads| {
            let xs = v[qkv.0].as_slice().expect("contiguous input");
            let gs = g.as_slice().expect("contiguous grad");
            let mut dx = vec![0.0; ns * l * d3];
            let mut ds = vec![0.0; l];
            let mut qt = vec![0.0; dh * l];
            let mut kt = vec![0.0; dh * l];
            let mut vt = vec![0.0; dh * l];
            let mut dqt = vec![0.0; dh * l];
            let mut dkt = vec![0.0; dh * l];
            let mut dvt = vec![0.0; dh * l];
            for si in 0..ns {
                let xseq = &xs[si * l * d3..][..l * d3];
                let gseq = &gs[si * l * d..][..l * d];
                for h in 0..heads {
                    gather_head(xseq, d3, h * dh, dh, &mut qt);
                    gather_head(xseq, d3, d + h * dh, dh, &mut kt);
                    gather_head(xseq, d3, 2 * d + h * dh, dh, &mut vt);
                    dkt.iter_mut().for_each(|v| *v = 0.0);
                    dvt.iter_mut().for_each(|v| *v = 0.0);
                    let p = &probs[(si * heads + h) * l * l..][..l * l];
                    for i in 0..l {
                        let prow = &p[i * l..][..l];
                        let go = &gseq[i * d + h * dh..][..dh];
                        ds.iter_mut().for_each(|v| *v = 0.0);
                        for c in 0..dh {
                            axpy(go[c], &vt[c * l..][..l], &mut ds);
                            axpy(go[c], prow, &mut dvt[c * l..][..l]);
                        }
                        let pd = dot(prow, &ds);
                        for (dv, &pv) in ds.iter_mut().zip(prow) {
                            *dv = pv * (*dv - pd) * scale;
                        }
                        for c in 0..dh {
                            dqt[c * l + i] = dot(&ds, &kt[c * l..][..l]);
                            axpy(qt[c * l + i], &ds, &mut dkt[c * l..][..l]);
                        }
                    }
                    let dseq = &mut dx[si * l * d3..][..l * d3];
                    scatter_head(&dqt, d3, h * dh, dh, dseq);
                    scatter_head(&dkt, d3, d + h * dh, dh, dseq);
                    scatter_head(&dvt, d3, 2 * d + h * dh, dh, dseq);
                }
            }
            grads.accumulate(qkv, ArrayD::from_shape_vec(IxDyn(&[ns, l, d3]), dx).expect("shape"));
        })
    }

    /// Adds a per-(channel, bin) embedding `e: (c, f)` to every frame of `x: (c, t, f)`.
    pub fn add_freq_embedding(&mut self, x: Var, e: Var) -> Var {
        let mut out = as3(&self.values[x.0]).to_owned();
        let ev = as2(&self.values[e.0]);
        for mut frame in out.axis_iter_mut(Axis(1)) {
            frame += &ev;
        }
        self.push_op(out.into_dyn(), move |_, g, grads| {
            grads.accumulate(e, as3(g).sum_axis(Axis(1)).into_dyn());
            grads.accumulate(x, g.clone());
        })
    }

    /// Sub-pixel upsampling along frequency: `(c·r, t, fd)` → `(c, t, f_out)`
    /// with `out[c, t, i] = x[c·r + i % r, t, i / r]`, cropped to `f_out ≤ fd·r`.
    pub fn subpixel_freq(&mut self, x: Var, r: usize, f_out: usize) -> Var {
        let xv = as3(&self.values[x.0]);
        let (cr, t, fd) = xv.dim();
        assert!(cr % r == 0, "channel count divisible by upsampling factor");
        assert!(f_out <= fd * r, "cannot upsample {fd} bins by {r} to {f_out}");
        let c = cr / r;
        let xs = xv.as_slice().expect("contiguous");
        let mut out = Array3::zeros((c, t, f_out));
        let os = out.as_slice_mut().expect("contiguous");
        for ci in 0..c {
            for j in 0..r {
                for ti in 0..t {
                    let src = &xs[((ci * r + j) * t + ti) * fd..][..fd];
                    let dst = &mut os[(ci * t + ti) * f_out..][..f_out];
                    for (q, &v) in src.iter().enumerate() {
                        let fi = q * r + j;
                        if fi < f_out {
                            dst[fi] = v;
                        }
                    }
                }
            }
        }
        self.push_op(out.into_dyn(), move |_, g, grads| {
            let gs = g.as_slice().expect("contiguous grad");
            let mut dx = Array3::zeros((cr, t, fd));
            let ds = dx.as_slice_mut().expect("contiguous");
            for ci in 0..c {
                for j in 0..r {
                    for ti in 0..t {
                        let src = &gs[(ci * t + ti) * f_out..][..f_out];
                        let dst = &mut ds[((ci * r + j) * t + ti) * fd..][..fd];
                        for (q, d) in dst.iter_mut().enumerate() {
                            let fi = q * r + j;
                            if fi < f_out {
                                *d = src[fi];
                            }
                        }
                    }
                }
            }
            grads.accumulate(x, dx.into_dyn());
        })
    }

    /// Multiplies every plane of `x: (p, t, f)` by the single plane `mask: (1, t, f)`.
    pub fn mask_planes(&mut self, mask: Var, x: Var) -> Var {
        let mv = as3(&self.values[mask.0]);
        let mut out = as3(&self.values[x.0]).to_owned();
        let plane = mv.index_axis(Axis(0), 0);
        for mut p in out.outer_iter_mut() {
            p *= &plane;
        }
        self.push_op(out.into_dyn(), move |v, g, grads| {
            let g3 = as3(g);
            let xv = as3(&v[x.0]);
            let mv = as3(&v[mask.0]);
            let plane = mv.index_axis(Axis(0), 0);
            let mut dm = Array2::<f64>::zeros(plane.raw_dim());
            let mut dx = g3.to_owned();
            for (mut dp, (gp, xp)) in dx.outer_iter_mut().zip(g3.outer_iter().zip(xv.outer_iter())) {
                dp *= &plane;
                Zip::from(&mut dm).and(&gp).and(&xp).for_each(|d, &a, &b| *d += a * b);
            }
            grads.accumulate(mask, dm.insert_axis(Axis(0)).into_dyn());
            grads.accumulate(x, dx.into_dyn());
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
