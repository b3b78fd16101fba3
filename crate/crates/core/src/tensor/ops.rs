//! Differentiable operations and their backward rules.

use super::tape::{Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride and dilation of a same-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const UNIT: ConvSpec = ConvSpec {
        stride: 1,
        dilation: 1,
    };

    pub fn dilated(dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            dilation: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn n_out(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Output positions `o` (along one axis) whose tap `o*stride + offset - pad` is in range.
    fn valid_range(&self, offset: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = offset as isize - self.pad as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        // largest o with o*s + shift <= len_in - 1
        let top = len_in as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = (lo as usize).min(len_out);
        let hi = (hi as usize).min(len_out);
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let n = self.n_out();
        let mut cols = vec![T::zero(); self.rows() * n];
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (i_lo, i_hi) = self.valid_range(ky * self.dilation, self.h, self.h_out);
                for kx in 0..self.k {
                    let (j_lo, j_hi) = self.valid_range(kx * self.dilation, self.w, self.w_out);
                    let r = (c * self.k + ky) * self.k + kx;
                    let row = &mut cols[r * n..(r + 1) * n];
                    for oi in i_lo..i_hi {
                        let iy = oi * self.stride + ky * self.dilation - self.pad;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut row[oi * self.w_out..(oi + 1) * self.w_out];
                        for oj in j_lo..j_hi {
                            dst[oj] = src[oj * self.stride + kx * self.dilation - self.pad];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let n = self.n_out();
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (i_lo, i_hi) = self.valid_range(ky * self.dilation, self.h, self.h_out);
                for kx in 0..self.k {
                    let (j_lo, j_hi) = self.valid_range(kx * self.dilation, self.w, self.w_out);
                    let r = (c * self.k + ky) * self.k + kx;
                    let row = &cols[r * n..(r + 1) * n];
                    for oi in i_lo..i_hi {
                        let iy = oi * self.stride + ky * self.dilation - self.pad;
                        let src = &row[oi * self.w_out..(oi + 1) * self.w_out];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for oj in j_lo..j_hi {
                            dst[oj * self.stride + kx * self.dilation - self.pad] += src[oj];
                        }
                    }
                }
            }
        }
    }
}

/// Taps `(lo, hi, weight_of_hi)` of half-pixel-centred linear interpolation along one axis.
pub(crate) fn linear_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            msg: format!("rank mismatch: {a:?} vs {b:?}"),
        });
    }
    for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(Error::Dimension {
                op,
                axis,
                expected: x,
                found: y,
            });
        }
    }
    Ok(())
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::Shape {
            op,
            msg: format!("expected rank {rank}, got shape {shape:?}"),
        });
    }
    Ok(())
}

fn expect_dim(op: &'static str, shape: &[usize], axis: usize, expected: usize) -> Result<()> {
    if shape[axis] != expected {
        return Err(Error::Dimension {
            op,
            axis,
            expected,
            found: shape[axis],
        });
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Same-padded 2-D cross-correlation of `x: [C_in,H,W]` with `w: [C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        expect_rank(OP, &xs, 3)?;
        expect_rank(OP, &ws, 4)?;
        let k = ws[2];
        if ws[3] != k {
            return Err(Error::Config(format!("conv2d: non-square kernel {ws:?}")));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d: kernel size {k} must be odd")));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::Config(
                "conv2d: stride and dilation must be positive".into(),
            ));
        }
        expect_dim(OP, &ws, 1, xs[0])?;
        if let Some(b) = b {
            expect_rank(OP, self.shape(b), 1)?;
            expect_dim(OP, self.shape(b), 0, ws[0])?;
        }
        let pad = (k - 1) * spec.dilation / 2;
        let span = spec.dilation * (k - 1);
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ws[0],
            k,
            stride: spec.stride,
            dilation: spec.dilation,
            pad,
            h_out: (xs[1] + 2 * pad - span - 1) / spec.stride + 1,
            w_out: (xs[2] + 2 * pad - span - 1) / spec.stride + 1,
        };
        let n = geom.n_out();
        let cols = if k == 1 && spec.stride == 1 {
            None
        } else {
            Some(geom.im2col(self.value(x).data()))
        };
        let mut out = vec![T::zero(); geom.c_out * n];
        {
            let rhs = cols.as_deref().unwrap_or(self.value(x).data());
            let rows = geom.rows();
            T::gemm(
                geom.c_out,
                rows,
                n,
                T::one(),
                self.value(w).data(),
                (rows as isize, 1),
                rhs,
                (n as isize, 1),
                T::zero(),
                &mut out,
                (n as isize, 1),
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n);
        }
        let value = Tensor::from_vec(vec![geom.c_out, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// 1x1 convolution: `y[d,..] = sum_c weight[d,c] * x[c,..] + bias[d]`.
    pub fn pointwise_linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.grouped_linear(x, weight, bias, 1)
    }

    /// Grouped 1x1 convolution.
    ///
    /// `x: [G*D_in, ...]`, `weight: [G*D_out, D_in]`; output group `g` occupies channels
    /// `[g*D_out, (g+1)*D_out)` and only reads input channels `[g*D_in, (g+1)*D_in)`.
    pub fn grouped_linear(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
    ) -> Result<Var> {
        const OP: &str = "grouped_linear";
        if groups == 0 {
            return Err(Error::Config("grouped_linear: zero groups".into()));
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.is_empty() {
            return Err(Error::Shape {
                op: OP,
                msg: "input must have a channel axis".into(),
            });
        }
        expect_rank(OP, &ws, 2)?;
        if ws[0] % groups != 0 {
            return Err(Error::Config(format!(
                "grouped_linear: {} output channels not divisible into {groups} groups",
                ws[0]
            )));
        }
        expect_dim(OP, &xs, 0, ws[1] * groups)?;
        if let Some(b) = bias {
            expect_rank(OP, self.shape(b), 1)?;
            expect_dim(OP, self.shape(b), 0, ws[0])?;
        }
        let d_in = ws[1];
        let d_out = ws[0] / groups;
        let n: usize = xs[1..].iter().product();
        let mut out = vec![T::zero(); ws[0] * n];
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            for g in 0..groups {
                T::gemm(
                    d_out,
                    d_in,
                    n,
                    T::one(),
                    &wv[g * d_out * d_in..(g + 1) * d_out * d_in],
                    (d_in as isize, 1),
                    &xv[g * d_in * n..(g + 1) * d_in * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[g * d_out * n..(g + 1) * d_out * n],
                    (n as isize, 1),
                );
            }
        }
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.value(b).data(), n);
        }
        let mut shape = xs.clone();
        shape[0] = ws[0];
        let value = Tensor::from_vec(shape, out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            value,
            rg,
            Op::GroupedLinear {
                x,
                w: weight,
                b: bias,
                groups,
            },
        ))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        check_same_shape(op, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * c).collect();
        let v = Tensor::from_vec(src.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(v, rg, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data: Vec<T> = src.data().iter().map(|&v| v.max(T::zero())).collect();
        let v = Tensor::from_vec(src.shape().to_vec(), data).expect("same shape");
        let active: Vec<bool> = src.data().iter().map(|&v| v > T::zero()).collect();
        self.record_kinks(active.into_iter());
        let rg = self.requires_grad(x);
        self.push(v, rg, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(v, rg, Op::Reshape(x)))
    }

    /// Concatenate along axis 0; trailing extents must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = inputs
            .first()
            .ok_or_else(|| Error::Config("concat: no inputs".into()))?;
        let rest = self.shape(*first).to_vec();
        if rest.is_empty() {
            return Err(Error::Shape {
                op: OP,
                msg: "cannot concatenate scalars".into(),
            });
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != rest.len() {
                return Err(Error::Shape {
                    op: OP,
                    msg: format!("rank mismatch: {rest:?} vs {s:?}"),
                });
            }
            for axis in 1..rest.len() {
                expect_dim(OP, s, axis, rest[axis])?;
            }
            lead += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = rest;
        shape[0] = lead;
        let value = Tensor::from_vec(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, rg, Op::Concat(inputs.to_vec())))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "softmax",
                axis,
                expected: shape.len(),
                found: axis,
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..n {
                    m = m.max(src[base + j * inner]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Softmax { x, axis }))
    }

    /// Sum out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "sum_axis",
                axis,
                expected: shape.len(),
                found: axis,
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::from_vec(out_shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::SumAxis { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x).data();
        let total: T = src.iter().copied().sum();
        let n = T::from_usize(src.len()).expect("size");
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total / n), rg, Op::Mean(x))
    }

    /// Cosine similarity along axis 0: `[D, ...] x [D, ...] -> [...]`.
    ///
    /// Norms are clamped below by `eps`, so zero vectors give similarity 0.
    pub fn cosine_similarity(&mut self, u: Var, v: Var, eps: T) -> Result<Var> {
        const OP: &str = "cosine_similarity";
        check_same_shape(OP, self.shape(u), self.shape(v))?;
        let shape = self.shape(u).to_vec();
        if shape.is_empty() {
            return Err(Error::Shape {
                op: OP,
                msg: "needs a feature axis".into(),
            });
        }
        let (_, d, n) = split_axis(&shape, 0);
        let (uv, vv) = (self.value(u).data(), self.value(v).data());
        let out: Vec<T> = (0..n)
            .map(|p| {
                let (mut dot, mut nu, mut nv) = (T::zero(), T::zero(), T::zero());
                for c in 0..d {
                    let (a, b) = (uv[c * n + p], vv[c * n + p]);
                    dot += a * b;
                    nu += a * a;
                    nv += b * b;
                }
                dot / (nu.sqrt().max(eps) * nv.sqrt().max(eps))
            })
            .collect();
        let value = Tensor::from_vec(shape[1..].to_vec(), out)?;
        let rg = self.any_grad(&[u, v]);
        Ok(self.push(value, rg, Op::Cosine { u, v, eps }))
    }

    /// Mean over non-ignored pixels of `-log softmax(logits)[target]`.
    ///
    /// `logits: [C, ...]`, `targets` holds one label per position. With no counted
    /// pixels the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let shape = self.shape(logits).to_vec();
        if shape.is_empty() {
            return Err(Error::Shape {
                op: OP,
                msg: "needs a class axis".into(),
            });
        }
        let (_, c, n) = split_axis(&shape, 0);
        if targets.len() != n {
            return Err(Error::Shape {
                op: OP,
                msg: format!("{} targets for {n} positions", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c && t != ignore) {
            return Err(Error::Data(format!(
                "cross_entropy: target label {bad} out of range for {c} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); c * n];
        let mut total = T::zero();
        let mut count = 0usize;
        for p in 0..n {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(lv[k * n + p]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (lv[k * n + p] - m).exp();
                probs[k * n + p] = e;
                z += e;
            }
            for k in 0..c {
                probs[k * n + p] /= z;
            }
            let t = targets[p];
            if t != ignore {
                total += z.ln() + m - lv[t as usize * n + p];
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).expect("count")
        };
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
        ))
    }

    /// Bilinear resize of `x: [C,H,W]` with half-pixel centres and edge clamping.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        expect_rank("bilinear_resize", &shape, 3)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("bilinear_resize: empty output".into()));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let ty = linear_taps(h, out_h);
        let tx = linear_taps(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
                let wy = T::from_f64_lossy(wy);
                for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let wx = T::from_f64_lossy(wx);
                    let top = plane[y0 * w + x0] * (T::one() - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (T::one() - wx) + plane[y1 * w + x1] * wx;
                    out[(ch * out_h + i) * out_w + j] = top * (T::one() - wy) + bot * wy;
                }
            }
        }
        let value = Tensor::from_vec(vec![c, out_h, out_w], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Bilinear(x)))
    }

    pub(crate) fn backward_node(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let n = geom.n_out();
                let rows = geom.rows();
                let xv = self.value(*x).data();
                let rhs = cols.as_deref().unwrap_or(xv);
                if let Some(dw) = self.adj_slot(adj, *w) {
                    T::gemm(
                        geom.c_out,
                        n,
                        rows,
                        T::one(),
                        g,
                        (n as isize, 1),
                        rhs,
                        (1, n as isize),
                        T::one(),
                        dw,
                        (rows as isize, 1),
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = self.adj_slot(adj, *b) {
                        add_channel_sums(db, g, n);
                    }
                }
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data();
                    if cols.is_none() {
                        let dx = self.adj_slot(adj, *x).expect("requires grad");
                        T::gemm(
                            rows,
                            geom.c_out,
                            n,
                            T::one(),
                            wv,
                            (1, rows as isize),
                            g,
                            (n as isize, 1),
                            T::one(),
                            dx,
                            (n as isize, 1),
                        );
                    } else {
                        let mut dcols = vec![T::zero(); rows * n];
                        T::gemm(
                            rows,
                            geom.c_out,
                            n,
                            T::one(),
                            wv,
                            (1, rows as isize),
                            g,
                            (n as isize, 1),
                            T::zero(),
                            &mut dcols,
                            (n as isize, 1),
                        );
                        let dx = self.adj_slot(adj, *x).expect("requires grad");
                        geom.col2im_add(&dcols, dx);
                    }
                }
            }
            Op::GroupedLinear { x, w, b, groups } => {
                let ws = self.shape(*w);
                let (d_in, d_out) = (ws[1], ws[0] / groups);
                let n = g.len() / ws[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(dw) = self.adj_slot(adj, *w) {
                    for gi in 0..*groups {
                        T::gemm(
                            d_out,
                            n,
                            d_in,
                            T::one(),
                            &g[gi * d_out * n..(gi + 1) * d_out * n],
                            (n as isize, 1),
                            &xv[gi * d_in * n..(gi + 1) * d_in * n],
                            (1, n as isize),
                            T::one(),
                            &mut dw[gi * d_out * d_in..(gi + 1) * d_out * d_in],
                            (d_in as isize, 1),
                        );
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.adj_slot(adj, *b) {
                        add_channel_sums(db, g, n);
                    }
                }
                if let Some(dx) = self.adj_slot(adj, *x) {
                    for gi in 0..*groups {
                        T::gemm(
                            d_in,
                            d_out,
                            n,
                            T::one(),
                            &wv[gi * d_out * d_in..(gi + 1) * d_out * d_in],
                            (1, d_in as isize),
                            &g[gi * d_out * n..(gi + 1) * d_out * n],
                            (n as isize, 1),
                            T::one(),
                            &mut dx[gi * d_in * n..(gi + 1) * d_in * n],
                            (n as isize, 1),
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.adj_slot(adj, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.adj_slot(adj, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.adj_slot(adj, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.adj_slot(adj, *a) {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * o;
                    }
                }
                if let Some(d) = self.adj_slot(adj, *b) {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(av) {
                        *d += g * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.adj_slot(adj, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                if let Some(d) = self.adj_slot(adj, *x) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.adj_slot(adj, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Concat(inputs) => {
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).numel();
                    if let Some(d) = self.adj_slot(adj, v) {
                        d.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, &g)| *d += g);
                    }
                    offset += len;
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                if let Some(d) = self.adj_slot(adj, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = T::zero();
                            for j in 0..n {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..n {
                                let p = base + j * inner;
                                d[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                if let Some(d) = self.adj_slot(adj, *x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut d[(o * n + j) * inner..(o * n + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.adj_slot(adj, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.adj_slot(adj, *x) {
                    let s = g[0] / T::from_usize(d.len()).expect("size");
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Cosine { u, v, eps } => {
                let shape = self.shape(*u);
                let (_, dim, n) = split_axis(shape, 0);
                let (uv, vv) = (self.value(*u).data(), self.value(*v).data());
                let mut du = vec![T::zero(); uv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                for p in 0..n {
                    let (mut dot, mut nu2, mut nv2) = (T::zero(), T::zero(), T::zero());
                    for c in 0..dim {
                        let (a, b) = (uv[c * n + p], vv[c * n + p]);
                        dot += a * b;
                        nu2 += a * a;
                        nv2 += b * b;
                    }
                    let (nu, nv) = (nu2.sqrt(), nv2.sqrt());
                    let (cu, cv) = (nu.max(*eps), nv.max(*eps));
                    let inv = T::one() / (cu * cv);
                    let sim = dot * inv;
                    let ku = if nu > *eps { sim / nu2 } else { T::zero() };
                    let kv = if nv > *eps { sim / nv2 } else { T::zero() };
                    for c in 0..dim {
                        let q = c * n + p;
                        du[q] = g[p] * (vv[q] * inv - ku * uv[q]);
                        dv[q] = g[p] * (uv[q] * inv - kv * vv[q]);
                    }
                }
                if let Some(d) = self.adj_slot(adj, *u) {
                    d.iter_mut().zip(&du).for_each(|(d, &x)| *d += x);
                }
                if let Some(d) = self.adj_slot(adj, *v) {
                    d.iter_mut().zip(&dv).for_each(|(d, &x)| *d += x);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let n = targets.len();
                let c = probs.len() / n;
                let s = g[0] / T::from_usize(*count).expect("count");
                if let Some(d) = self.adj_slot(adj, *logits) {
                    for (p, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for k in 0..c {
                            let q = k * n + p;
                            let hit = if k == t as usize { T::one() } else { T::zero() };
                            d[q] += s * (probs[q] - hit);
                        }
                    }
                }
            }
            Op::Bilinear(x) => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let os = node.value.shape();
                let (oh, ow) = (os[1], os[2]);
                let ty = linear_taps(h, oh);
                let tx = linear_taps(w, ow);
                if let Some(d) = self.adj_slot(adj, *x) {
                    for ch in 0..c {
                        let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
                            let wy = T::from_f64_lossy(wy);
                            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                                let wx = T::from_f64_lossy(wx);
                                let go = g[(ch * oh + i) * ow + j];
                                let top = go * (T::one() - wy);
                                let bot = go * wy;
                                plane[y0 * w + x0] += top * (T::one() - wx);
                                plane[y0 * w + x1] += top * wx;
                                plane[y1 * w + x0] += bot * (T::one() - wx);
                                plane[y1 * w + x1] += bot * wx;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize) {
    for (row, &b) in out.chunks_mut(n).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn add_channel_sums<T: Scalar>(db: &mut [T], g: &[T], n: usize) {
    for (d, row) in db.iter_mut().zip(g.chunks(n)) {
        *d += row.iter().copied().sum::<T>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn rand_t(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn pointwise_identity_weight() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_t(vec![3, 2, 2], 1), false);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(t(vec![3, 3], eye), false);
        let b = tape.leaf(Tensor::zeros(vec![3]), false);
        let y = tape.pointwise_linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn pointwise_sums_channels() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![2, 1, 1], 1.0), false);
        let w = tape.leaf(t(vec![1, 2], vec![1.0, 1.0]), false);
        let b = tape.leaf(t(vec![1], vec![0.0]), false);
        let y = tape.pointwise_linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn pointwise_shape_error_names_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![3, 2, 2]), false);
        let w = tape.leaf(Tensor::zeros(vec![4, 2]), false);
        match tape.pointwise_linear(x, w, None) {
            Err(Error::Dimension { axis, expected, found, .. }) => {
                assert_eq!((axis, expected, found), (0, 2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![1, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]), false);
        assert!(matches!(
            tape.conv2d(x, w, None, ConvSpec::UNIT),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_k1_equals_pointwise() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_t(vec![3, 4, 5], 2), false);
        let wv = rand_t(vec![2, 3], 3);
        let w1 = tape.leaf(wv.clone(), false);
        let w4 = tape.leaf(wv.reshape(vec![2, 3, 1, 1]).unwrap(), false);
        let b = tape.leaf(rand_t(vec![2], 4), false);
        let a = tape.pointwise_linear(x, w1, Some(b)).unwrap();
        let c = tape.conv2d(x, w4, Some(b), ConvSpec::UNIT).unwrap();
        assert_eq!(tape.value(a), tape.value(c));
    }

    #[test]
    fn conv_delta_kernel_mixes_channels_by_centre_weight() {
        let mut tape = Tape::new();
        let xv = rand_t(vec![2, 5, 5], 5);
        let x = tape.leaf(xv.clone(), false);
        // out channel 0 = 2*x0 - x1 via the centre taps of a 5x5 dilation-2 kernel
        let mut wv = vec![0.0; 2 * 25];
        wv[12] = 2.0;
        wv[25 + 12] = -1.0;
        let w = tape.leaf(t(vec![1, 2, 5, 5], wv), false);
        let y = tape.conv2d(x, w, None, ConvSpec::dilated(2)).unwrap();
        let xs = xv.data();
        for (p, &v) in tape.value(y).data().iter().enumerate() {
            assert!((v - (2.0 * xs[p] - xs[25 + p])).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_conv_output_size_is_ceil() {
        let mut tape = Tape::new();
        for (h, expect) in [(8usize, 4usize), (7, 4), (1, 1), (64, 32)] {
            let x = tape.leaf(Tensor::<f64>::zeros(vec![1, h, h]), false);
            let w = tape.leaf(Tensor::zeros(vec![1, 1, 3, 3]), false);
            let y = tape.conv2d(x, w, None, ConvSpec::strided(2)).unwrap();
            assert_eq!(tape.shape(y), &[1, expect, expect]);
        }
    }

    #[test]
    fn conv_matches_naive_loop() {
        let (c_in, c_out, h, w, k) = (2, 3, 6, 5, 3);
        let xv = rand_t(vec![c_in, h, w], 8);
        let wv = rand_t(vec![c_out, c_in, k, k], 9);
        for spec in [ConvSpec::UNIT, ConvSpec::dilated(2), ConvSpec::strided(2)] {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone(), false);
            let wt = tape.leaf(wv.clone(), false);
            let y = tape.conv2d(x, wt, None, spec).unwrap();
            let ys = tape.shape(y).to_vec();
            let pad = (k as isize - 1) * spec.dilation as isize / 2;
            for o in 0..c_out {
                for i in 0..ys[1] {
                    for j in 0..ys[2] {
                        let mut acc = 0.0;
                        for c in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (i * spec.stride) as isize
                                        + (ky * spec.dilation) as isize
                                        - pad;
                                    let ix = (j * spec.stride) as isize
                                        + (kx * spec.dilation) as isize
                                        - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wv.data()[((o * c_in + c) * k + ky) * k + kx]
                                        * xv.data()[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        let got = tape.value(y).data()[(o * ys[1] + i) * ys[2] + j];
                        assert!((got - acc).abs() < 1e-12, "{spec:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3], vec![0.0; 3]), false);
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.leaf(t(vec![2], vec![1000.0, 1000.0]), false);
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        assert!(matches!(tape.softmax(x, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cosine_special_cases() {
        let mut tape = Tape::new();
        let u = tape.leaf(t(vec![3], vec![1.0, 2.0, -0.5]), false);
        let v = tape.leaf(t(vec![3], vec![2.0, -1.0, 0.0]), false);
        let z = tape.leaf(Tensor::zeros(vec![3]), false);
        let s = tape.cosine_similarity(u, u, 1e-8).unwrap();
        assert!((tape.value(s).item() - 1.0).abs() < 1e-15);
        let s = tape.cosine_similarity(u, v, 1e-8).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
        let s = tape.cosine_similarity(u, z, 1e-8).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(vec![2, 2, 2]), false);
        let ce = tape.cross_entropy(l, &[0, 1, 1, 0], 255).unwrap();
        assert!((tape.value(ce).item() - 2f64.ln()).abs() < 1e-15);

        let mut big = vec![0.0; 8];
        for p in 0..4 {
            big[p] = 100.0;
        }
        let l = tape.leaf(t(vec![2, 2, 2], big), false);
        let ce = tape.cross_entropy(l, &[0, 0, 255, 0], 255).unwrap();
        assert!(tape.value(ce).item() < 1e-40);

        assert!(matches!(
            tape.cross_entropy(l, &[0, 2, 0, 0], 255),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut tape = Tape::new();
        let xv = rand_t(vec![2, 3, 4], 10);
        let x = tape.leaf(xv.clone(), false);
        let y = tape.bilinear_resize(x, 3, 4).unwrap();
        assert_eq!(tape.value(y), &xv);
        let c = tape.leaf(Tensor::full(vec![1, 3, 5], 0.7), false);
        for (oh, ow) in [(1, 1), (6, 10), (2, 3)] {
            let y = tape.bilinear_resize(c, oh, ow).unwrap();
            for &v in tape.value(y).data() {
                assert!((v - 0.7).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grouped_linear_groups_are_independent() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_t(vec![4, 2, 2], 11), true);
        let w = tape.leaf(rand_t(vec![6, 2], 12), true);
        let y = tape.grouped_linear(x, w, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[6, 2, 2]);
        // only the first group's outputs feed the loss
        let first = tape.value(y).data()[..12].to_vec();
        let mask = tape.constant(
            t(vec![6, 2, 2], (0..24).map(|i| if i < 12 { 1.0 } else { 0.0 }).collect()),
        );
        let m = tape.mul(y, mask).unwrap();
        let s = tape.sum(m);
        assert!((tape.value(s).item() - first.iter().sum::<f64>()).abs() < 1e-12);
        tape.backward(s).unwrap();
        let gx = tape.grad(x).unwrap();
        assert!(gx[8..].iter().all(|&v| v == 0.0));
        let gw = tape.grad(w).unwrap();
        assert!(gw[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taps_follow_half_pixel_convention() {
        let taps = linear_taps(2, 4);
        // src = (i + 0.5) * 0.5 - 0.5 = -0.25, 0.25, 0.75, 1.25 -> clamped
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[3], (1, 1, 0.0));
    }
}
