//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are copied in
//! from a [`ParamStore`] under their names, so two modules asking for the same
//! name share one node and their gradients accumulate.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulMask { x: Var, mask: Var },
    OneMinus(Var),
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Concat { parts: Vec<Var>, axis_sizes: Vec<usize> },
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupMean { x: Var, group: usize },
    Upsample { x: Var },
    CosineGram { x: Var, group: usize, norms: Vec<T> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Mse(Var, Var),
    HalfMseTo(Var, T),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    flops: u64,
    zero_norm_events: usize,
}

fn conv_out(size: usize, k: usize, spec: Conv2dSpec) -> usize {
    (size + 2 * spec.pad).saturating_sub(k) / spec.stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: Conv2dSpec,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: Conv2dSpec,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear sampling taps (align-corners off) for resizing `src` samples to `dst`.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Row-normalized Gram matrices over groups of `group` consecutive rows.
///
/// Returns the flattened `group x group` similarities per group and the row norms.
/// Rows with zero norm get similarity 0 to every other row and 1 to themselves.
pub(crate) fn cosine_gram_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    dim: usize,
    group: usize,
) -> (Vec<T>, Vec<T>, usize) {
    let groups = rows / group;
    let mut out = vec![T::zero(); groups * group * group];
    let mut norms = Vec::with_capacity(rows);
    let mut zero_rows = 0;
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n <= T::min_positive_value() {
            zero_rows += 1;
        }
        norms.push(n);
    }
    for s in 0..groups {
        let block = &mut out[s * group * group..(s + 1) * group * group];
        for i in 0..group {
            block[i * group + i] = T::one();
            let ri = s * group + i;
            for j in (i + 1)..group {
                let rj = s * group + j;
                let (ni, nj) = (norms[ri], norms[rj]);
                let sim = if ni <= T::min_positive_value() || nj <= T::min_positive_value() {
                    T::zero()
                } else {
                    let a = &x[ri * dim..(ri + 1) * dim];
                    let b = &x[rj * dim..(rj + 1) * dim];
                    let dot: T = a.iter().zip(b).map(|(&p, &q)| p * q).sum();
                    (dot / (ni * nj)).max(-T::one()).min(T::one())
                };
                block[i * group + j] = sim;
                block[j * group + i] = sim;
            }
        }
    }
    (out, norms, zero_rows)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), flops: 0, zero_norm_events: 0 }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Looks up (or inserts) the named parameter.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?
            .clone();
        let trainable = !store.is_frozen(name);
        let v = self.push(value, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copies `v` into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    /// Multiply-accumulate count times two, over all conv and linear ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Number of zero-norm rows encountered by cosine similarity ops.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x [N,C,H,W] * mask [N,1,H,W]`, broadcasting the mask over channels.
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(mask).to_vec();
        if xs.len() != 4 || ms.len() != 4 || ms[1] != 1 || xs[0] != ms[0] || xs[2..] != ms[2..] {
            return Err(Error::dims(&xs, &ms));
        }
        let plane = xs[2] * xs[3];
        let vx = self.value(x).data();
        let vm = self.value(mask).data();
        let mut out = Vec::with_capacity(vx.len());
        for n in 0..xs[0] {
            let m = &vm[n * plane..(n + 1) * plane];
            for c in 0..xs[1] {
                let off = (n * xs[1] + c) * plane;
                out.extend(vx[off..off + plane].iter().zip(m).map(|(&a, &b)| a * b));
            }
        }
        let rg = self.rg(x) || self.rg(mask);
        Ok(self.push(Tensor::from_vec(&xs, out)?, Op::MulMask { x, mask }, rg))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() - v);
        let rg = self.rg(x);
        self.push(value, Op::OneMinus(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// 2-D convolution, `x [N,Ci,H,W]`, `w [Co,Ci,kh,kw]`, `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::dims(format!("input with {} channels", ws.get(1).unwrap_or(&0)), &xs));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
            return Err(Error::Shape(format!("kernel {kh}x{kw} larger than padded input {xs:?}")));
        }
        let (ho, wo) = (conv_out(h, kh, spec), conv_out(wd, kw, spec));
        let kdim = ci * kh * kw;
        let plane = ho * wo;
        let mut out = vec![T::zero(); n * co * plane];
        let mut cols = vec![T::zero(); kdim * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            im2col(&xv[s * ci * h * wd..(s + 1) * ci * h * wd], (ci, h, wd), (kh, kw), spec, (ho, wo), &mut cols);
            let dst = &mut out[s * co * plane..(s + 1) * co * plane];
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                for c in 0..co {
                    dst[c * plane..(c + 1) * plane].fill(bv[c]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            T::gemm(
                co,
                kdim,
                plane,
                T::one(),
                wv,
                (kdim as isize, 1),
                &cols,
                (plane as isize, 1),
                beta,
                dst,
                (plane as isize, 1),
            );
        }
        self.flops += 2 * (n * co * plane * kdim) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(&[n, co, ho, wo], out)?, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// Max pooling with a square `k x k` window; padded positions never win.
    pub fn max_pool(&mut self, x: Var, k: usize, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dims("[N,C,H,W]", &xs));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (conv_out(h, k, spec), conv_out(w, k, spec));
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best_idx == usize::MAX || xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[n, c, ho, wo], out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// `[N,C,H,W] -> [N,C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dims("[N,C,H,W]", &xs));
        }
        let plane = xs[2] * xs[3];
        let inv = T::one() / T::from_usize(plane).unwrap();
        let data: Vec<T> = self.value(x).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&xs[..2], data)?, Op::GlobalAvgPool(x), rg))
    }

    /// Concatenation along axis 1. All other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?).to_vec();
        if first.len() < 2 {
            return Err(Error::dims("rank >= 2", &first));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut axis_sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::dims(&first, s));
            }
            axis_sizes.push(s[1]);
        }
        let total: usize = axis_sizes.iter().sum();
        let mut out = Vec::with_capacity(n * total * inner);
        for s in 0..n {
            for (&p, &a) in parts.iter().zip(&axis_sizes) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[s * a * inner..(s + 1) * a * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis_sizes }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Flattens every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let rows = s[0];
        let inner = s[1..].iter().product();
        self.reshape(x, &[rows, inner])
    }

    /// `x [N,D] * w[O,D]^T + b[O]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dims(format!("[N,{}]", ws.get(1).unwrap_or(&0)), &xs));
        }
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            d,
            o,
            T::one(),
            self.value(x).data(),
            (d as isize, 1),
            self.value(w).data(),
            (1, d as isize),
            beta,
            &mut out,
            (o as isize, 1),
        );
        self.flops += 2 * (n * d * o) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(&[n, o], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Averages consecutive groups of `group` rows: `[S*group, ...] -> [S, ...]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if group == 0 || xs.is_empty() || !xs[0].is_multiple_of(group) {
            return Err(Error::Shape(format!("cannot group {xs:?} by {group}")));
        }
        let inner: usize = xs[1..].iter().product();
        let groups = xs[0] / group;
        let inv = T::one() / T::from_usize(group).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); groups * inner];
        for s in 0..groups {
            let dst = &mut out[s * inner..(s + 1) * inner];
            for r in 0..group {
                let src = &xv[(s * group + r) * inner..(s * group + r + 1) * inner];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let mut shape = xs.clone();
        shape[0] = groups;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::GroupMean { x, group }, rg))
    }

    /// Bilinear resize of `[N,C,h,w]` to `[N,C,H,W]`.
    pub fn upsample_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dims("[N,C,H,W]", &xs));
        }
        let (h, w) = (xs[2], xs[3]);
        let ty = bilinear_taps(h, height);
        let tx = bilinear_taps(w, width);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xs[0] * xs[1] * height * width);
        for plane in xv.chunks(h * w) {
            for &(y0, y1, ly) in &ty {
                let ly = T::lit(ly);
                for &(x0, x1, lx) in &tx {
                    let lx = T::lit(lx);
                    let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                    out.push(top * (T::one() - ly) + bot * ly);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[xs[0], xs[1], height, width], out)?, Op::Upsample { x }, rg))
    }

    /// Pairwise cosine similarity between rows inside each group of `group` rows.
    ///
    /// `x [S*group, D] -> [S, group*group]`
    pub fn cosine_gram(&mut self, x: Var, group: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || group == 0 || !xs[0].is_multiple_of(group) {
            return Err(Error::Shape(format!("cosine_gram needs [S*{group}, D], got {xs:?}")));
        }
        let (out, norms, zeros) = cosine_gram_forward(self.value(x).data(), xs[0], xs[1], group);
        self.zero_norm_events += zeros;
        let rg = self.rg(x);
        let shape = [xs[0] / group, group * group];
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::CosineGram { x, group, norms }, rg))
    }

    /// Mean (optionally class-weighted) softmax cross-entropy over rows of `logits [S,C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: Option<&[T]>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dims(format!("[{}, C]", labels.len()), &ls));
        }
        let c = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Shape(format!("label {bad} out of range for {c} classes")));
        }
        let weights: Vec<T> = match class_weights {
            Some(w) if w.len() == c => labels.iter().map(|&l| w[l]).collect(),
            Some(w) => return Err(Error::dims(c, w.len())),
            None => vec![T::one(); labels.len()],
        };
        let total_w: T = weights.iter().copied().sum();
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = T::zero();
        for (r, row) in lv.chunks(c).enumerate() {
            let p = softmax(row);
            loss -= weights[r] * p[labels[r]].max(T::min_positive_value()).ln();
            probs.extend(p);
        }
        let loss = if total_w > T::zero() { loss / total_w } else { T::zero() };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), weights, probs },
            rg,
        ))
    }

    /// `mean((a - b)^2)`
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let n = T::from_usize(va.numel().max(1)).unwrap();
        let s: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    /// `0.5 * mean((x - target)^2)`
    pub fn half_mse_to(&mut self, x: Var, target: T) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.numel().max(1)).unwrap();
        let s: T = v.data().iter().map(|&a| (a - target) * (a - target)).sum();
        let value = Tensor::scalar(T::lit(0.5) * s / n);
        let rg = self.rg(x);
        self.push(value, Op::HalfMseTo(x, target), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut pending: Vec<(Var, Tensor<T>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut pending)?;
            for (v, t) in pending.drain(..) {
                if !self.rg(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    /// Gradients of every trainable parameter touched by this graph.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Names of parameters referenced by this graph.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, out: &mut Vec<(Var, Tensor<T>)>) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.rg(*a) {
                    out.push((*a, elementwise(g, vb, |gv, bv| gv * bv)));
                }
                if self.rg(*b) {
                    out.push((*b, elementwise(g, va, |gv, av| gv * av)));
                }
            }
            Op::MulMask { x, mask } => {
                let xs = self.shape(*x);
                let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let vx = self.value(*x).data();
                let vm = self.value(*mask).data();
                let gd = g.data();
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    for s in 0..n {
                        let m = &vm[s * plane..(s + 1) * plane];
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            dx.extend(gd[off..off + plane].iter().zip(m).map(|(&a, &b)| a * b));
                        }
                    }
                    out.push((*x, Tensor::from_vec(xs, dx)?));
                }
                if self.rg(*mask) {
                    let mut dm = vec![T::zero(); n * plane];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            for p in 0..plane {
                                dm[s * plane + p] += gd[off + p] * vx[off + p];
                            }
                        }
                    }
                    out.push((*mask, Tensor::from_vec(self.shape(*mask), dm)?));
                }
            }
            Op::OneMinus(x) => out.push((*x, g.map(|v| -v))),
            Op::Scale(x, c) => {
                let c = *c;
                out.push((*x, g.map(|v| v * c)));
            }
            Op::Relu(x) => {
                out.push((*x, elementwise(g, y, |gv, yv| if yv > T::zero() { gv } else { T::zero() })));
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let vx = self.value(*x);
                out.push((*x, elementwise(g, vx, |gv, xv| if xv > T::zero() { gv } else { gv * s })));
            }
            Op::Sigmoid(x) => {
                out.push((*x, elementwise(g, y, |gv, yv| gv * yv * (T::one() - yv))));
            }
            Op::Conv2d { x, w, b, spec } => self.conv_backward(*x, *w, *b, *spec, g, out)?,
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    if idx != usize::MAX {
                        d[idx] += gv;
                    }
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let inv = T::one() / T::from_usize(plane).unwrap();
                let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect();
                out.push((*x, Tensor::from_vec(xs, data)?));
            }
            Op::Concat { parts, axis_sizes } => {
                let shape = y.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total: usize = axis_sizes.iter().sum();
                let gd = g.data();
                let mut offset = 0;
                for (&p, &a) in parts.iter().zip(axis_sizes) {
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * a * inner);
                        for s in 0..n {
                            let start = (s * total + offset) * inner;
                            d.extend_from_slice(&gd[start..start + a * inner]);
                        }
                        out.push((p, Tensor::from_vec(self.shape(p), d)?));
                    }
                    offset += a;
                }
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(self.shape(*x))?)),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(
                        n,
                        o,
                        d,
                        T::one(),
                        g.data(),
                        (o as isize, 1),
                        self.value(*w).data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut dx,
                        (d as isize, 1),
                    );
                    out.push((*x, Tensor::from_vec(xs, dx)?));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); o * d];
                    T::gemm(
                        o,
                        n,
                        d,
                        T::one(),
                        g.data(),
                        (1, o as isize),
                        self.value(*x).data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut dw,
                        (d as isize, 1),
                    );
                    out.push((*w, Tensor::from_vec(&[o, d], dw)?));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((b, Tensor::from_vec(&[o], db)?));
                }
            }
            Op::GroupMean { x, group } => {
                let xs = self.shape(*x);
                let inner: usize = xs[1..].iter().product();
                let inv = T::one() / T::from_usize(*group).unwrap();
                let mut dx = Vec::with_capacity(xs[0] * inner);
                for row in g.data().chunks(inner) {
                    for _ in 0..*group {
                        dx.extend(row.iter().map(|&v| v * inv));
                    }
                }
                out.push((*x, Tensor::from_vec(xs, dx)?));
            }
            Op::Upsample { x } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (y.dim(2), y.dim(3));
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let mut dx = Tensor::zeros(xs);
                for (plane, gplane) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    let mut k = 0;
                    for &(y0, y1, ly) in &ty {
                        let ly = T::lit(ly);
                        for &(x0, x1, lx) in &tx {
                            let lx = T::lit(lx);
                            let gv = gplane[k];
                            k += 1;
                            plane[y0 * w + x0] += gv * (T::one() - ly) * (T::one() - lx);
                            plane[y0 * w + x1] += gv * (T::one() - ly) * lx;
                            plane[y1 * w + x0] += gv * ly * (T::one() - lx);
                            plane[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::CosineGram { x, group, norms } => {
                let xs = self.shape(*x);
                let (rows, dim) = (xs[0], xs[1]);
                let k = *group;
                let xv = self.value(*x).data();
                let gd = g.data();
                let mut dx = vec![T::zero(); rows * dim];
                let tiny = T::min_positive_value();
                for s in 0..rows / k {
                    let gb = &gd[s * k * k..(s + 1) * k * k];
                    for i in 0..k {
                        let ri = s * k + i;
                        let ni = norms[ri];
                        if ni <= tiny {
                            continue;
                        }
                        // d/d(xhat_i) of sum_{j != i} (G_ij + G_ji) <xhat_i, xhat_j>
                        let mut gh = vec![T::zero(); dim];
                        for j in 0..k {
                            let rj = s * k + j;
                            if j == i || norms[rj] <= tiny {
                                continue;
                            }
                            let coef = (gb[i * k + j] + gb[j * k + i]) / norms[rj];
                            for (acc, &v) in gh.iter_mut().zip(&xv[rj * dim..(rj + 1) * dim]) {
                                *acc += coef * v;
                            }
                        }
                        let xi = &xv[ri * dim..(ri + 1) * dim];
                        let proj: T = gh.iter().zip(xi).map(|(&a, &b)| a * b).sum::<T>() / ni;
                        let d = &mut dx[ri * dim..(ri + 1) * dim];
                        for ((o, &a), &b) in d.iter_mut().zip(&gh).zip(xi) {
                            *o = (a - proj * b / ni) / ni;
                        }
                    }
                }
                out.push((*x, Tensor::from_vec(xs, dx)?));
            }
            Op::SoftmaxCe { logits, labels, weights, probs } => {
                let c = self.shape(*logits)[1];
                let total_w: T = weights.iter().copied().sum();
                let scale = if total_w > T::zero() { g.data()[0] / total_w } else { T::zero() };
                let mut d = probs.clone();
                for (r, row) in d.chunks_mut(c).enumerate() {
                    row[labels[r]] -= T::one();
                    for v in row.iter_mut() {
                        *v *= weights[r] * scale;
                    }
                }
                out.push((*logits, Tensor::from_vec(self.shape(*logits), d)?));
            }
            Op::Mse(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let k = g.data()[0] * T::lit(2.0) / T::from_usize(va.numel().max(1)).unwrap();
                let da = elementwise(va, vb, |x, yv| k * (x - yv));
                if self.rg(*b) {
                    out.push((*b, da.map(|v| -v)));
                }
                out.push((*a, da));
            }
            Op::HalfMseTo(x, target) => {
                let vx = self.value(*x);
                let k = g.data()[0] / T::from_usize(vx.numel().max(1)).unwrap();
                let t = *target;
                out.push((*x, vx.map(|v| k * (v - t))));
            }
            Op::MeanAll(x) => {
                let xs = self.shape(*x);
                let n = self.value(*x).numel().max(1);
                out.push((*x, Tensor::full(xs, g.data()[0] / T::from_usize(n).unwrap())));
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
        g: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) -> Result<()> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (g.dim(2), g.dim(3));
        let kdim = ci * kh * kw;
        let plane = ho * wo;
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        let mut dw = vec![T::zero(); co * kdim];
        let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut cols = vec![T::zero(); kdim * plane];
        for s in 0..n {
            let gs = &gd[s * co * plane..(s + 1) * co * plane];
            if need_w {
                im2col(&xv[s * ci * h * wd..(s + 1) * ci * h * wd], (ci, h, wd), (kh, kw), spec, (ho, wo), &mut cols);
                T::gemm(
                    co,
                    plane,
                    kdim,
                    T::one(),
                    gs,
                    (plane as isize, 1),
                    &cols,
                    (1, plane as isize),
                    T::one(),
                    &mut dw,
                    (kdim as isize, 1),
                );
            }
            if need_x {
                T::gemm(
                    kdim,
                    co,
                    plane,
                    T::one(),
                    wv,
                    (1, kdim as isize),
                    gs,
                    (plane as isize, 1),
                    T::zero(),
                    &mut cols,
                    (plane as isize, 1),
                );
                col2im(&cols, (ci, h, wd), (kh, kw), spec, (ho, wo), &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd]);
            }
        }
        if need_x {
            out.push((x, Tensor::from_vec(xs, dx)?));
        }
        if need_w {
            out.push((w, Tensor::from_vec(ws, dw)?));
        }
        if let Some(b) = b.filter(|b| self.rg(*b)) {
            let mut db = vec![T::zero(); co];
            for s in 0..n {
                for (c, acc) in db.iter_mut().enumerate() {
                    let off = (s * co + c) * plane;
                    *acc += gd[off..off + plane].iter().copied().sum::<T>();
                }
            }
            out.push((b, Tensor::from_vec(&[co], db)?));
        }
        Ok(())
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// Numerically stable softmax of one row.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
