//! Raw slice kernels behind the graph operations.

use std::borrow::Cow;

/// `out[m x n] += op(a) . op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// With `ta`, `a` is stored `k x m`; with `tb`, `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    let a_rows: Cow<[f64]> = if ta { transpose(a, k, m).into() } else { a[..m * k].into() };
    if n >= 4 {
        // rows of out accumulate scaled rows of b
        let b_rows: Cow<[f64]> = if tb { transpose(b, n, k).into() } else { b[..k * n].into() };
        for (orow, arow) in out.chunks_exact_mut(n).zip(a_rows.chunks_exact(k)) {
            for (&av, brow) in arow.iter().zip(b_rows.chunks_exact(n)) {
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    } else {
        // narrow output: dot products against columns of b
        let b_cols: Cow<[f64]> = if tb { b[..n * k].into() } else { transpose(b, k, n).into() };
        for (orow, arow) in out.chunks_exact_mut(n).zip(a_rows.chunks_exact(k)) {
            for (o, bcol) in orow.iter_mut().zip(b_cols.chunks_exact(k)) {
                *o += arow.iter().zip(bcol).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
}

/// Transpose of a row-major `rows x cols` matrix.
fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// In-place softmax over the middle axis of an `(outer, len, inner)` view.
pub fn softmax_strided(x: &mut [f64], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        for row in x[..outer * len].chunks_exact_mut(len) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        return;
    }
    for o in 0..outer {
        for j in 0..inner {
            let at = |l: usize| (o * len + l) * inner + j;
            let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                x[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                x[at(l)] /= total;
            }
        }
    }
}

/// Returns `x` with axes reordered so that output axis `i` is input axis `perm[i]`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        // odometer increment over the output index
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Geometry of a stride-1, zero-"same"-padded convolution over up to three
/// spatial axes, channels last. Kernel layout is `[kd, kh, kw, cin, cout]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub extent: [usize; 3],
    pub ksize: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn positions(&self) -> usize {
        self.extent.iter().product()
    }

    /// Calls `f(out_pos, in_pos, tap)` for every in-bounds (output, input, kernel tap) triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.extent;
        let [kd, kh, kw] = self.ksize;
        let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let out_pos = (z * h + y) * w + x;
                    for a in 0..kd {
                        let zi = z as isize + a as isize - pd;
                        if zi < 0 || zi >= d as isize {
                            continue;
                        }
                        for b in 0..kh {
                            let yi = y as isize + b as isize - ph;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for c in 0..kw {
                                let xi = x as isize + c as isize - pw;
                                if xi < 0 || xi >= w as isize {
                                    continue;
                                }
                                let in_pos = (zi as usize * h + yi as usize) * w + xi as usize;
                                let tap = (a * kh + b) * kw + c;
                                f(out_pos, in_pos, tap);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward(g: &ConvGeom, x: &[f64], k: &[f64], out: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|o, i, t| {
        let xs = &x[i * cin..(i + 1) * cin];
        let ks = &k[t * cin * cout..(t + 1) * cin * cout];
        let os = &mut out[o * cout..(o + 1) * cout];
        for (ci, xv) in xs.iter().enumerate() {
            let krow = &ks[ci * cout..(ci + 1) * cout];
            for (ov, kv) in os.iter_mut().zip(krow) {
                *ov += xv * kv;
            }
        }
    });
}

pub fn conv_backward_input(g: &ConvGeom, dy: &[f64], k: &[f64], dx: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|o, i, t| {
        let dys = &dy[o * cout..(o + 1) * cout];
        let ks = &k[t * cin * cout..(t + 1) * cin * cout];
        let dxs = &mut dx[i * cin..(i + 1) * cin];
        for (ci, d) in dxs.iter_mut().enumerate() {
            let krow = &ks[ci * cout..(ci + 1) * cout];
            *d += krow.iter().zip(dys).map(|(a, b)| a * b).sum::<f64>();
        }
    });
}

pub fn conv_backward_kernel(g: &ConvGeom, x: &[f64], dy: &[f64], dk: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|o, i, t| {
        let dys = &dy[o * cout..(o + 1) * cout];
        let xs = &x[i * cin..(i + 1) * cin];
        let dks = &mut dk[t * cin * cout..(t + 1) * cin * cout];
        for (ci, xv) in xs.iter().enumerate() {
            let drow = &mut dks[ci * cout..(ci + 1) * cout];
            for (d, gv) in drow.iter_mut().zip(dys) {
                *d += xv * gv;
            }
        }
    });
}
