//! Raw numeric kernels over flat row-major buffers. The graph layer owns
//! shape validation; these functions assume conforming inputs.

/// `c[m,n] (+)= a[m,k] · b[k,n]`. `ta`/`tb` mean the operand is stored
/// transposed (`a` as `[k,m]`, `b` as `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches given the
    // strides chosen for the stated storage layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw_out = g.spatial_out();
    let mut cols = vec![0.0; g.patch() * hw_out];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw_out = g.spatial_out();
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw_out = g.spatial_out();
    let mut out = vec![0.0; g.c_out * hw_out];
    if g.is_pointwise() {
        gemm(g.c_out, g.c_in, hw_out, w, false, x, false, &mut out, false);
    } else {
        let cols = im2col(x, g);
        gemm(g.c_out, g.patch(), hw_out, w, false, &cols, false, &mut out, false);
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub(crate) fn conv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw_out = g.spatial_out();
    if g.is_pointwise() {
        let dw = want_dw.then(|| {
            let mut dw = vec![0.0; g.c_out * g.c_in];
            gemm(g.c_out, hw_out, g.c_in, dy, false, x, true, &mut dw, false);
            dw
        });
        let dx = want_dx.then(|| {
            let mut dx = vec![0.0; g.c_in * hw_out];
            gemm(g.c_in, g.c_out, hw_out, w, true, dy, false, &mut dx, false);
            dx
        });
        return (dx, dw);
    }
    let dw = want_dw.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![0.0; g.c_out * g.patch()];
        gemm(g.c_out, hw_out, g.patch(), dy, false, &cols, true, &mut dw, false);
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![0.0; g.patch() * hw_out];
        gemm(g.patch(), g.c_out, hw_out, w, true, dy, false, &mut dcols, false);
        col2im(&dcols, g)
    });
    (dx, dw)
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Row-major strides of `shape` as seen from `out_shape`, with 0 on the
/// broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == out_shape[d] && shape[d] != 1 {
            acc
        } else {
            0
        };
        acc *= shape[d];
    }
    strides
}

/// Visits every element of `out_shape` in row-major order, passing the flat
/// output index and the mapped offsets into each operand.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let last = rank - 1;
    let inner = out_shape[last];
    let mut flat = 0;
    loop {
        for i in 0..inner {
            f(flat + i, oa + i * sa[last], ob + i * sb[last]);
        }
        flat += inner;
        // carry into the outer axes
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (laid out as `out_shape`) down to `shape` by adding over the
/// broadcast axes.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return grad.to_vec();
    }
    let strides = broadcast_strides(shape, out_shape);
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(out_shape, &strides, &strides, |i, o, _| out[o] += grad[i]);
    out
}

pub(crate) fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(x[at(l)]);
            }
            let mut sum = 0.0;
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                y[at(l)] = e;
                sum += e;
            }
            for l in 0..len {
                y[at(l)] /= sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut dot = 0.0;
            for l in 0..len {
                dot += dy[at(l)] * y[at(l)];
            }
            for l in 0..len {
                dx[at(l)] = y[at(l)] * (dy[at(l)] - dot);
            }
        }
    }
    dx
}

/// Nearest-neighbour source index for output coordinate `o` when resizing
/// `n_in` to `n_out`.
pub(crate) fn nearest_src(o: usize, n_in: usize, n_out: usize) -> usize {
    ((o * n_in) / n_out).min(n_in - 1)
}
