//! Raw f64 loops shared by forward ops and their adjoints.

/// C[m,n] = A[m,k] * B[k,n]
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Decompose `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Cross-correlation of a [C_in,H,W] input with a [C_out,C_in,k,k] kernel.
pub(crate) fn conv2d_forward(
    x: &[f64],
    kern: &[f64],
    d: &ConvDims,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; d.c_out * d.h_out * d.w_out];
    for co in 0..d.c_out {
        let oplane = &mut out[co * d.h_out * d.w_out..(co + 1) * d.h_out * d.w_out];
        for ci in 0..d.c_in {
            let xplane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            let kbase = (co * d.c_in + ci) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wgt = kern[kbase + ky * d.k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    for oy in 0..d.h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let orow = &mut oplane[oy * d.w_out..(oy + 1) * d.w_out];
                        for ox in 0..d.w_out {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            orow[ox] += wgt * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input(
    grad: &[f64],
    kern: &[f64],
    d: &ConvDims,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; d.c_in * d.h * d.w];
    for ci in 0..d.c_in {
        let dplane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for co in 0..d.c_out {
            let gplane = &grad[co * d.h_out * d.w_out..(co + 1) * d.h_out * d.w_out];
            let kbase = (co * d.c_in + ci) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wgt = kern[kbase + ky * d.k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    for oy in 0..d.h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let grow = &gplane[oy * d.w_out..(oy + 1) * d.w_out];
                        let drow = &mut dplane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        for ox in 0..d.w_out {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            drow[ix as usize] += wgt * grow[ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv2d_backward_kernel(
    grad: &[f64],
    x: &[f64],
    d: &ConvDims,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let mut dk = vec![0.0; d.c_out * d.c_in * d.k * d.k];
    for co in 0..d.c_out {
        let gplane = &grad[co * d.h_out * d.w_out..(co + 1) * d.h_out * d.w_out];
        for ci in 0..d.c_in {
            let xplane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            let kbase = (co * d.c_in + ci) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let mut acc = 0.0;
                    for oy in 0..d.h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let grow = &gplane[oy * d.w_out..(oy + 1) * d.w_out];
                        for ox in 0..d.w_out {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += grow[ox] * xrow[ix as usize];
                        }
                    }
                    dk[kbase + ky * d.k + kx] += acc;
                }
            }
        }
    }
    dk
}

/// Sample positions and weights for one axis of an align-corners-false
/// bilinear resize: returns (i0, i1, w1) so value = v[i0]*(1-w1) + v[i1]*w1.
pub(crate) fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = (d as f64 + 0.5) * scale - 0.5;
            let floor = s.floor();
            let w1 = s - floor;
            let i0 = (floor.max(0.0) as usize).min(src - 1);
            let i1 = ((floor as isize + 1).max(0) as usize).min(src - 1);
            (i0, i1, w1)
        })
        .collect()
}
