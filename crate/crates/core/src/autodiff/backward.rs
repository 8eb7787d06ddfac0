//! Adjoint implementations, dispatched in reverse execution order.

use super::kernels::*;
use super::{NodeId, Op, Record};

fn accumulate(rec: &mut Record, id: NodeId, contrib: Vec<f64>) {
    let node = &mut rec.nodes[id];
    if !node.value.requires_grad {
        return;
    }
    let numel = node.value.numel();
    let grad = node.value.grad.get_or_insert_with(|| vec![0.0; numel]);
    for (g, c) in grad.iter_mut().zip(contrib) {
        *g += c;
    }
}

pub(super) fn apply_adjoint(rec: &mut Record, id: NodeId) {
    let grad = rec.nodes[id]
        .value
        .grad
        .clone()
        .expect("adjoint requested for node without gradient");
    let op = rec.nodes[id].op.clone();
    fn data(rec: &Record, i: NodeId) -> &[f64] {
        &rec.nodes[i].value.data
    }

    match op {
        Op::Leaf => {}

        Op::Add(a, b) => {
            accumulate(rec, a, grad.clone());
            accumulate(rec, b, grad);
        }
        Op::Sub(a, b) => {
            accumulate(rec, a, grad.clone());
            accumulate(rec, b, grad.iter().map(|g| -g).collect());
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = grad.iter().zip(data(rec, b)).map(|(g, y)| g * y).collect();
            let db: Vec<f64> = grad.iter().zip(data(rec, a)).map(|(g, x)| g * x).collect();
            accumulate(rec, a, da);
            accumulate(rec, b, db);
        }
        Op::Div(a, b) => {
            let da: Vec<f64> = grad.iter().zip(data(rec, b)).map(|(g, y)| g / y).collect();
            let db: Vec<f64> = grad
                .iter()
                .zip(data(rec, a).iter().zip(data(rec, b)))
                .map(|(g, (x, y))| -g * x / (y * y))
                .collect();
            accumulate(rec, a, da);
            accumulate(rec, b, db);
        }
        Op::Scale(x, c) => {
            accumulate(rec, x, grad.iter().map(|g| g * c).collect());
        }
        Op::AddScalar(x) => {
            accumulate(rec, x, grad);
        }
        Op::Relu(x) => {
            let dx: Vec<f64> = grad
                .iter()
                .zip(data(rec, x))
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(rec, x, dx);
        }
        Op::Exp(x) => {
            let dx: Vec<f64> = grad
                .iter()
                .zip(data(rec, id))
                .map(|(g, y)| g * y)
                .collect();
            accumulate(rec, x, dx);
        }
        Op::LnClamped(x, eps) => {
            let dx: Vec<f64> = grad
                .iter()
                .zip(data(rec, x))
                .map(|(g, &v)| if v > eps { g / v } else { 0.0 })
                .collect();
            accumulate(rec, x, dx);
        }
        Op::Rsqrt(x) => {
            let dx: Vec<f64> = grad
                .iter()
                .zip(data(rec, id))
                .map(|(g, y)| -0.5 * g * y * y * y)
                .collect();
            accumulate(rec, x, dx);
        }
        Op::MatMul { a, b, m, k, n } => {
            let bt = transpose(data(rec, b), k, n);
            let da = matmul(&grad, &bt, m, n, k);
            let at = transpose(data(rec, a), m, k);
            let db = matmul(&at, &grad, k, m, n);
            accumulate(rec, a, da);
            accumulate(rec, b, db);
        }
        Op::Transpose2(x) => {
            let s = rec.nodes[id].value.shape.clone();
            accumulate(rec, x, transpose(&grad, s[0], s[1]));
        }
        Op::SumAll(x) => {
            let n = rec.nodes[x].value.numel();
            accumulate(rec, x, vec![grad[0]; n]);
        }
        Op::MeanAll(x) => {
            let n = rec.nodes[x].value.numel();
            accumulate(rec, x, vec![grad[0] / n as f64; n]);
        }
        Op::SumAxis { x, axis } => {
            let shape = rec.nodes[x].value.shape.clone();
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        dx[base + i] = grad[o * inner + i];
                    }
                }
            }
            accumulate(rec, x, dx);
        }
        Op::MeanAxis { x, axis } => {
            let shape = rec.nodes[x].value.shape.clone();
            let (outer, len, inner) = axis_split(&shape, axis);
            let scale = 1.0 / len as f64;
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        dx[base + i] = grad[o * inner + i] * scale;
                    }
                }
            }
            accumulate(rec, x, dx);
        }
        Op::ExpandAxis { x, axis, n } => {
            let in_shape = rec.nodes[x].value.shape.clone();
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis..].iter().product();
            let mut dx = vec![0.0; outer * inner];
            for o in 0..outer {
                for r in 0..n {
                    let src = (o * n + r) * inner;
                    for i in 0..inner {
                        dx[o * inner + i] += grad[src + i];
                    }
                }
            }
            accumulate(rec, x, dx);
        }
        Op::MulAlong { x, v, axis } => {
            let shape = rec.nodes[x].value.shape.clone();
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut dx = vec![0.0; outer * len * inner];
            let mut dv = vec![0.0; len];
            {
                let xv = data(rec, x);
                let vv = data(rec, v);
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dx[base + i] = grad[base + i] * vv[l];
                            dv[l] += grad[base + i] * xv[base + i];
                        }
                    }
                }
            }
            accumulate(rec, x, dx);
            accumulate(rec, v, dv);
        }
        Op::AddAlong { x, v, axis } => {
            let shape = rec.nodes[x].value.shape.clone();
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut dv = vec![0.0; len];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        dv[l] += grad[base + i];
                    }
                }
            }
            accumulate(rec, x, grad);
            accumulate(rec, v, dv);
        }
        Op::Softmax { x, axis } => {
            let shape = rec.nodes[id].value.shape.clone();
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut dx = vec![0.0; grad.len()];
            {
                let y = data(rec, id);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += grad[at(l)] * y[at(l)];
                        }
                        for l in 0..len {
                            dx[at(l)] = y[at(l)] * (grad[at(l)] - dot);
                        }
                    }
                }
            }
            accumulate(rec, x, dx);
        }
        Op::NormalizeSum { x, axis } => {
            let shape = rec.nodes[x].value.shape.clone();
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut dx = vec![0.0; grad.len()];
            {
                let xv = data(rec, x);
                let y = data(rec, id);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut s = 0.0;
                        let mut gy = 0.0;
                        for l in 0..len {
                            s += xv[at(l)];
                            gy += grad[at(l)] * y[at(l)];
                        }
                        for l in 0..len {
                            dx[at(l)] = (grad[at(l)] - gy) / s;
                        }
                    }
                }
            }
            accumulate(rec, x, dx);
        }
        Op::L2Normalize { x, axis, eps } => {
            let shape = rec.nodes[x].value.shape.clone();
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut dx = vec![0.0; grad.len()];
            {
                let xv = data(rec, x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut sq = 0.0;
                        let mut gv = 0.0;
                        for l in 0..len {
                            sq += xv[at(l)] * xv[at(l)];
                            gv += grad[at(l)] * xv[at(l)];
                        }
                        let n = sq.sqrt();
                        let t = n + eps;
                        for l in 0..len {
                            let mut d = grad[at(l)] / t;
                            if n > 0.0 {
                                d -= xv[at(l)] * gv / (n * t * t);
                            }
                            dx[at(l)] = d;
                        }
                    }
                }
            }
            accumulate(rec, x, dx);
        }
        Op::Concat { xs, axis } => {
            let oshape = rec.nodes[id].value.shape.clone();
            let (outer, total, inner) = axis_split(&oshape, axis);
            let mut offset = 0;
            for xid in xs {
                let len = rec.nodes[xid].value.shape[axis];
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    let dst = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
                }
                accumulate(rec, xid, dx);
                offset += len;
            }
        }
        Op::Gather { x, idx } => {
            let n = rec.nodes[x].value.numel();
            let mut dx = vec![0.0; n];
            for (g, &i) in grad.iter().zip(idx.iter()) {
                dx[i] += g;
            }
            accumulate(rec, x, dx);
        }
        Op::Reshape(x) => {
            accumulate(rec, x, grad);
        }
        Op::Conv2d { x, k, stride, pad } => {
            let xs = rec.nodes[x].value.shape.clone();
            let ks = rec.nodes[k].value.shape.clone();
            let os = rec.nodes[id].value.shape.clone();
            let d = ConvDims {
                c_in: xs[0],
                h: xs[1],
                w: xs[2],
                c_out: ks[0],
                k: ks[2],
                h_out: os[1],
                w_out: os[2],
            };
            let dx = conv2d_backward_input(&grad, data(rec, k), &d, stride, pad);
            let dk = conv2d_backward_kernel(&grad, data(rec, x), &d, stride, pad);
            accumulate(rec, x, dx);
            accumulate(rec, k, dk);
        }
        Op::MaxPool2 { x, argmax } => {
            let n = rec.nodes[x].value.numel();
            let mut dx = vec![0.0; n];
            for (g, &i) in grad.iter().zip(argmax.iter()) {
                dx[i] += g;
            }
            accumulate(rec, x, dx);
        }
        Op::Bilinear(x) => {
            let xs = rec.nodes[x].value.shape.clone();
            let os = rec.nodes[id].value.shape.clone();
            let (c, h, w) = (xs[0], xs[1], xs[2]);
            let (ho, wo) = (os[1], os[2]);
            let ys = bilinear_axis(h, ho);
            let xcoef = bilinear_axis(w, wo);
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..c {
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in xcoef.iter().enumerate() {
                        let g = grad[ci * ho * wo + oy * wo + ox];
                        let base = ci * h * w;
                        dx[base + y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                        dx[base + y0 * w + x1] += g * (1.0 - wy) * wx;
                        dx[base + y1 * w + x0] += g * wy * (1.0 - wx);
                        dx[base + y1 * w + x1] += g * wy * wx;
                    }
                }
            }
            accumulate(rec, x, dx);
        }
    }
}
