//! Forward implementations. Each method validates its contract, computes the
//! output value, and records the operation for the backward pass.

use super::kernels::*;
use super::{Op, Var};
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use std::rc::Rc;

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(CoreError::dim(op, format!("shapes {sa:?} vs {sb:?}")));
    }
    Ok(())
}

impl Var {
    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_graph(other);
        same_shape("add", self, other)?;
        let data = self.with_two(other, |a, b| {
            a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>()
        });
        Ok(self.push(Tensor::new(self.shape(), data), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_graph(other);
        same_shape("sub", self, other)?;
        let data = self.with_two(other, |a, b| {
            a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()
        });
        Ok(self.push(Tensor::new(self.shape(), data), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_graph(other);
        same_shape("mul", self, other)?;
        let data = self.with_two(other, |a, b| {
            a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>()
        });
        Ok(self.push(Tensor::new(self.shape(), data), Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.same_graph(other);
        same_shape("div", self, other)?;
        let data = self.with_two(other, |a, b| {
            a.iter().zip(b).map(|(x, y)| x / y).collect::<Vec<_>>()
        });
        Ok(self.push(Tensor::new(self.shape(), data), Op::Div(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var {
        let data = self.with_data(|x| x.iter().map(|v| v * c).collect::<Vec<_>>());
        self.push(Tensor::new(self.shape(), data), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let data = self.with_data(|x| x.iter().map(|v| v + c).collect::<Vec<_>>());
        self.push(Tensor::new(self.shape(), data), Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var {
        let data = self.with_data(|x| x.iter().map(|v| v.max(0.0)).collect::<Vec<_>>());
        self.push(Tensor::new(self.shape(), data), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var {
        let data = self.with_data(|x| x.iter().map(|v| v.exp()).collect::<Vec<_>>());
        self.push(Tensor::new(self.shape(), data), Op::Exp(self.id))
    }

    /// ln(max(x, eps)) — keeps log losses finite on probability fields.
    pub fn ln_clamped(&self, eps: f64) -> Var {
        let data = self.with_data(|x| x.iter().map(|v| v.max(eps).ln()).collect::<Vec<_>>());
        self.push(Tensor::new(self.shape(), data), Op::LnClamped(self.id, eps))
    }

    pub fn rsqrt(&self) -> Var {
        let data = self.with_data(|x| x.iter().map(|v| 1.0 / v.sqrt()).collect::<Vec<_>>());
        self.push(Tensor::new(self.shape(), data), Op::Rsqrt(self.id))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_graph(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::dim(
                "matmul",
                format!("incompatible shapes {sa:?} x {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = self.with_two(other, |a, b| matmul(a, b, m, k, n));
        Ok(self.push(
            Tensor::new(vec![m, n], data),
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    pub fn transpose2(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(CoreError::dim("transpose2", format!("rank-2 required, got {s:?}")));
        }
        let data = self.with_data(|x| transpose(x, s[0], s[1]));
        Ok(self.push(Tensor::new(vec![s[1], s[0]], data), Op::Transpose2(self.id)))
    }

    // ── Reductions and broadcasts ───────────────────────────────────

    pub fn sum_all(&self) -> Var {
        let s = self.with_data(|x| x.iter().sum::<f64>());
        self.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var {
        let n = self.numel() as f64;
        let s = self.with_data(|x| x.iter().sum::<f64>());
        self.push(Tensor::scalar(s / n), Op::MeanAll(self.id))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(CoreError::dim(
                "reduce_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        self.with_data(|x| {
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    let obase = o * inner;
                    for i in 0..inner {
                        out[obase + i] += x[base + i];
                    }
                }
            }
        });
        if mean {
            for v in &mut out {
                *v *= scale;
            }
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let op = if mean {
            Op::MeanAxis { x: self.id, axis }
        } else {
            Op::SumAxis { x: self.id, axis }
        };
        Ok(self.push(Tensor::new(oshape, out), op))
    }

    /// Insert a new axis of length `n` at position `axis`, repeating values.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape();
        if axis > shape.len() {
            return Err(CoreError::dim(
                "expand_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out = vec![0.0; outer * n * inner];
        self.with_data(|x| {
            for o in 0..outer {
                let src = &x[o * inner..(o + 1) * inner];
                for r in 0..n {
                    let dst = (o * n + r) * inner;
                    out[dst..dst + inner].copy_from_slice(src);
                }
            }
        });
        let mut oshape = shape.clone();
        oshape.insert(axis, n);
        Ok(self.push(
            Tensor::new(oshape, out),
            Op::ExpandAxis {
                x: self.id,
                axis,
                n,
            },
        ))
    }

    /// Multiply by a vector broadcast along `axis`: out[.., c, ..] = x[.., c, ..] * v[c].
    pub fn mul_along(&self, v: &Var, axis: usize) -> Result<Var> {
        self.broadcast_along("mul_along", v, axis, true)
    }

    /// Add a vector broadcast along `axis`.
    pub fn add_along(&self, v: &Var, axis: usize) -> Result<Var> {
        self.broadcast_along("add_along", v, axis, false)
    }

    fn broadcast_along(&self, opname: &'static str, v: &Var, axis: usize, mul: bool) -> Result<Var> {
        self.same_graph(v);
        let shape = self.shape();
        let vshape = v.shape();
        if axis >= shape.len() || vshape != vec![shape[axis]] {
            return Err(CoreError::dim(
                opname,
                format!("vector {vshape:?} does not match axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; self.numel()];
        self.with_two(v, |x, vv| {
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    let c = vv[l];
                    if mul {
                        for i in 0..inner {
                            out[base + i] = x[base + i] * c;
                        }
                    } else {
                        for i in 0..inner {
                            out[base + i] = x[base + i] + c;
                        }
                    }
                }
            }
        });
        let op = if mul {
            Op::MulAlong {
                x: self.id,
                v: v.id,
                axis,
            }
        } else {
            Op::AddAlong {
                x: self.id,
                v: v.id,
                axis,
            }
        };
        Ok(self.push(Tensor::new(shape, out), op))
    }

    // ── Normalizations ──────────────────────────────────────────────

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(CoreError::dim(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let non_finite = self.with_data(|x| x.iter().any(|v| !v.is_finite()));
        if non_finite {
            return Err(CoreError::numeric("softmax", "non-finite input"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; self.numel()];
        self.with_data(|x| {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for l in 0..len {
                        mx = mx.max(x[at(l)]);
                    }
                    let mut denom = 0.0;
                    for l in 0..len {
                        let e = (x[at(l)] - mx).exp();
                        out[at(l)] = e;
                        denom += e;
                    }
                    for l in 0..len {
                        out[at(l)] /= denom;
                    }
                }
            }
        });
        Ok(self.push(
            Tensor::new(shape, out),
            Op::Softmax { x: self.id, axis },
        ))
    }

    /// y = x / sum(x, axis), the sum broadcast back along `axis`.
    pub fn normalize_sum(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(CoreError::dim(
                "normalize_sum",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; self.numel()];
        self.with_data(|x| {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut s = 0.0;
                    for l in 0..len {
                        s += x[at(l)];
                    }
                    for l in 0..len {
                        out[at(l)] = x[at(l)] / s;
                    }
                }
            }
        });
        Ok(self.push(
            Tensor::new(shape, out),
            Op::NormalizeSum { x: self.id, axis },
        ))
    }

    /// Divide each vector along `axis` by (its L2 norm + eps).
    pub fn l2_normalize(&self, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(CoreError::dim(
                "l2_normalize",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; self.numel()];
        self.with_data(|x| {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut sq = 0.0;
                    for l in 0..len {
                        sq += x[at(l)] * x[at(l)];
                    }
                    let t = sq.sqrt() + eps;
                    for l in 0..len {
                        out[at(l)] = x[at(l)] / t;
                    }
                }
            }
        });
        Ok(self.push(
            Tensor::new(shape, out),
            Op::L2Normalize {
                x: self.id,
                axis,
                eps,
            },
        ))
    }

    // ── Shape manipulation ──────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(CoreError::dim(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(), new_shape),
            ));
        }
        let data = self.data();
        Ok(self.push(Tensor::new(new_shape.to_vec(), data), Op::Reshape(self.id)))
    }

    pub fn concat(vars: &[Var], axis: usize) -> Result<Var> {
        if vars.is_empty() {
            panic!("concat of zero tensors");
        }
        let first = &vars[0];
        let base_shape = first.shape();
        if axis >= base_shape.len() {
            return Err(CoreError::dim(
                "concat",
                format!("axis {axis} out of range for {base_shape:?}"),
            ));
        }
        let mut total_axis = 0;
        for v in vars {
            first.same_graph(v);
            let s = v.shape();
            if s.len() != base_shape.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base_shape[i])
            {
                return Err(CoreError::dim(
                    "concat",
                    format!("shape {s:?} incompatible with {base_shape:?} along axis {axis}"),
                ));
            }
            total_axis += s[axis];
        }
        let mut oshape = base_shape.clone();
        oshape[axis] = total_axis;
        let (outer, _, inner) = axis_split(&oshape, axis);
        let mut out = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for v in vars {
            let len = v.shape()[axis];
            v.with_data(|x| {
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * total_axis + offset) * inner;
                    out[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
                }
            });
            offset += len;
        }
        Ok(first.push(
            Tensor::new(oshape, out),
            Op::Concat {
                xs: vars.iter().map(|v| v.id).collect(),
                axis,
            },
        ))
    }

    /// out[i] = x[idx[i]]; adjoint scatter-adds. Bit-exact for permutations.
    pub fn gather(&self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(CoreError::dim(
                "gather",
                format!("{} indices vs output shape {out_shape:?}", idx.len()),
            ));
        }
        let n = self.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(CoreError::contract(
                "gather",
                format!("index {bad} out of bounds for {n} elements"),
            ));
        }
        let data = self.with_data(|x| idx.iter().map(|&i| x[i]).collect::<Vec<_>>());
        Ok(self.push(
            Tensor::new(out_shape.to_vec(), data),
            Op::Gather { x: self.id, idx },
        ))
    }

    /// Slice columns [c0, c1) of a rank-2 tensor.
    pub fn col_slice(&self, c0: usize, c1: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 || c1 > s[1] || c0 >= c1 {
            return Err(CoreError::dim(
                "col_slice",
                format!("cols {c0}..{c1} of {s:?}"),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        let idx: Vec<usize> = (0..rows)
            .flat_map(|r| (c0..c1).map(move |c| r * cols + c))
            .collect();
        self.gather(Rc::new(idx), &[rows, c1 - c0])
    }

    // ── Structured ops ──────────────────────────────────────────────

    /// Cross-correlation with stride and zero padding.
    /// input [C_in,H,W], kernel [C_out,C_in,k,k] -> [C_out,H',W'].
    pub fn conv2d(&self, kernel: &Var, stride: usize, pad: usize) -> Result<Var> {
        self.same_graph(kernel);
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(CoreError::dim(
                "conv2d",
                format!("input {xs:?} (want rank 3) kernel {ks:?} (want rank 4)"),
            ));
        }
        if ks[1] != xs[0] {
            return Err(CoreError::dim(
                "conv2d",
                format!("input channels {xs:?} vs kernel {ks:?}"),
            ));
        }
        if ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(CoreError::param(
                "conv2d",
                format!("kernel window must be square and odd, got {ks:?}"),
            ));
        }
        if stride == 0 {
            return Err(CoreError::param("conv2d", "stride must be >= 1"));
        }
        let (h, w, k) = (xs[1], xs[2], ks[2]);
        let hn = h + 2 * pad;
        let wn = w + 2 * pad;
        if hn < k || wn < k || (hn - k) % stride != 0 || (wn - k) % stride != 0 {
            return Err(CoreError::dim(
                "conv2d",
                format!(
                    "non-integral output size for input {xs:?}, kernel {ks:?}, stride {stride}, padding {pad}"
                ),
            ));
        }
        let d = ConvDims {
            c_in: xs[0],
            h,
            w,
            c_out: ks[0],
            k,
            h_out: (hn - k) / stride + 1,
            w_out: (wn - k) / stride + 1,
        };
        let data = self.with_two(kernel, |x, kk| conv2d_forward(x, kk, &d, stride, pad));
        Ok(self.push(
            Tensor::new(vec![d.c_out, d.h_out, d.w_out], data),
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                stride,
                pad,
            },
        ))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first maximum.
    pub fn max_pool2(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(CoreError::dim(
                "max_pool2",
                format!("need [C, even, even], got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        self.with_data(|x| {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut where_ = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                                if x[i] > best {
                                    best = x[i];
                                    where_ = i;
                                }
                            }
                        }
                        let o = ci * ho * wo + oy * wo + ox;
                        out[o] = best;
                        argmax[o] = where_;
                    }
                }
            }
        });
        Ok(self.push(
            Tensor::new(vec![c, ho, wo], out),
            Op::MaxPool2 {
                x: self.id,
                argmax: Rc::new(argmax),
            },
        ))
    }

    /// Bilinear resize (align-corners-false) of a [C,H,W] map.
    pub fn bilinear_resize(&self, target_h: usize, target_w: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(CoreError::dim(
                "bilinear_resize",
                format!("rank-3 required, got {s:?}"),
            ));
        }
        if target_h == 0 || target_w == 0 {
            return Err(CoreError::dim(
                "bilinear_resize",
                format!("target {target_h}x{target_w} has a zero dimension"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ys = bilinear_axis(h, target_h);
        let xs = bilinear_axis(w, target_w);
        let mut out = vec![0.0; c * target_h * target_w];
        self.with_data(|x| {
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let v = plane[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                            + plane[y0 * w + x1] * (1.0 - wy) * wx
                            + plane[y1 * w + x0] * wy * (1.0 - wx)
                            + plane[y1 * w + x1] * wy * wx;
                        out[ci * target_h * target_w + oy * target_w + ox] = v;
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![c, target_h, target_w], out), Op::Bilinear(self.id)))
    }

    /// Zero whole channels of a [C,H,W] map with probability `p`, scaling
    /// survivors by 1/(1-p). Identity when `training` is false.
    pub fn channel_dropout(&self, p: f64, training: bool, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::param(
                "channel_dropout",
                format!("p = {p} outside [0, 1)"),
            ));
        }
        let s = self.shape();
        if s.len() != 3 {
            return Err(CoreError::dim(
                "channel_dropout",
                format!("rank-3 required, got {s:?}"),
            ));
        }
        if !training || p == 0.0 {
            // Identity; still consume no randomness so eval never draws.
            return Ok(self.scale(1.0));
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..s[0])
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep_scale })
            .collect();
        let mask_var = self.graph().constant(Tensor::new(vec![s[0]], mask));
        self.mul_along(&mask_var, 0)
    }
}
