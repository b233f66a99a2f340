//! Raw NCHW kernels shared by the forward and backward passes.

use super::Scalar;

/// Border handling for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Zero,
    /// Mirror without repeating the edge sample (`[c b | a b c | b a]`).
    Reflect,
}

/// Reflects an arbitrary integer coordinate into `0..n`.
#[inline]
pub(crate) fn reflect_index(q: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = q.rem_euclid(period);
    if r >= n as isize {
        (period - r) as usize
    } else {
        r as usize
    }
}

#[inline]
fn map_index(q: isize, n: usize, mode: Padding) -> Option<usize> {
    if (0..n as isize).contains(&q) {
        return Some(q as usize);
    }
    match mode {
        Padding::Zero => None,
        Padding::Reflect => Some(reflect_index(q, n)),
    }
}

/// Row-major `C = A' * B' + beta * C` where `A'` is `m x k` and `B'` is `k x n`;
/// `trans_*` means the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every element addressed by the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: Padding,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn hw_out(&self) -> usize {
        self.hout * self.wout
    }
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn index_maps(&self) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        let map = |kdim: usize, outdim: usize, indim: usize| {
            let mut v = Vec::with_capacity(kdim * outdim);
            for kk in 0..kdim {
                for o in 0..outdim {
                    let q = (o * self.stride + kk) as isize - self.pad as isize;
                    v.push(map_index(q, indim, self.mode));
                }
            }
            v
        };
        (map(self.kh, self.hout, self.h), map(self.kw, self.wout, self.w))
    }
}

/// Unfolds one sample `(cin, h, w)` into `(cin*kh*kw, hout*wout)`.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (ymap, xmap) = g.index_maps();
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let xm = &xmap[kx * g.wout..(kx + 1) * g.wout];
                for oy in 0..g.hout {
                    let seg = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    match ymap[ky * g.hout + oy] {
                        None => seg.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (d, m) in seg.iter_mut().zip(xm) {
                                *d = match m {
                                    Some(ix) => src[*ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into one sample.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (ymap, xmap) = g.index_maps();
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let xm = &xmap[kx * g.wout..(kx + 1) * g.wout];
                for oy in 0..g.hout {
                    let Some(iy) = ymap[ky * g.hout + oy] else {
                        continue;
                    };
                    let seg = &src[oy * g.wout..(oy + 1) * g.wout];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (s, m) in seg.iter().zip(xm) {
                        if let Some(ix) = m {
                            dst[*ix] += *s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (k, hw) = (g.k(), g.hw_out());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * hw;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * hw] };
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let os = &mut out[s * out_len..(s + 1) * out_len];
        if let Some(b) = b {
            for (co, row) in os.chunks_exact_mut(hw).enumerate() {
                row.fill(b[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            matmul(g.cout, k, hw, w, false, xs, false, beta, os);
        } else {
            im2col(g, xs, &mut cols);
            matmul(g.cout, k, hw, w, false, &cols, false, beta, os);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Gradients of a convolution. Sample contributions to `dw`/`db` are summed in
/// sample order.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let (k, hw) = (g.k(), g.hw_out());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * hw;
    let mut dx = need_x.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = need_w.then(|| vec![T::zero(); g.cout * k]);
    let mut db = need_b.then(|| vec![T::zero(); g.cout]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * hw] };
    let mut dcols = if pointwise || !need_x { Vec::new() } else { vec![T::zero(); k * hw] };

    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let ds = &dout[s * out_len..(s + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, row) in ds.chunks_exact(hw).enumerate() {
                let mut acc = T::zero();
                for &v in row {
                    acc += v;
                }
                db[co] += acc;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            matmul(g.cout, hw, k, ds, false, src, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if pointwise {
                matmul(k, g.cout, hw, w, true, ds, false, T::one(), dxs);
            } else {
                matmul(k, g.cout, hw, w, true, ds, false, T::zero(), &mut dcols);
                col2im(g, &dcols, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Non-overlapping `k x k` max pooling. Returns values and the flat input
/// index of each window's first maximum.
pub(crate) fn maxpool_forward<T: Scalar>(dims: [usize; 4], k: usize, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let (ho, wo) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + oy * k * w + ox * k;
                let mut best = x[best_idx];
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample_forward<T: Scalar>(dims: [usize; 4], f: usize, x: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let srow = &src[(oy / f) * w..(oy / f + 1) * w];
            let drow = &mut dst[oy * wo..(oy + 1) * wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(dims: [usize; 4], f: usize, dout: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (ho, wo) = (h * f, w * f);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &dout[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            let drow = &mut dst[(oy / f) * w..(oy / f + 1) * w];
            for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                drow[ox / f] += v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_reflect() {
        // numpy.pad([0,1,2,3], 5, mode="reflect")
        let got: Vec<usize> = (-5..9).map(|q| reflect_index(q, 4)).collect();
        assert_eq!(got, vec![1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn matmul_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            n: 1,
            cin: 2,
            h: 5,
            w: 4,
            cout: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            mode: Padding::Reflect,
            hout: 3,
            wout: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.k() * g.hw_out()).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
