//! Dense kernels: GEMM and the stride-1 convolution family in NCHW layout.
//!
//! The three convolution kernels form a closed set under differentiation:
//! each one's adjoints are expressed with the other two, which is what lets
//! the graph take gradients of gradients.

use crate::tensor::Tensor;

/// `C = A·B + beta·C` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the extents above are within the slices; matrixmultiply reads A
    // and B and writes only C.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel {} larger than padded input {}x{}", k, h, w);
        Self { c, h, w, k, pad, oh: h + 2 * pad - k + 1, ow: w + 2 * pad - k + 1 }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one image `c×h×w` into `(c·k·k) × (oh·ow)`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, pad, oh, ow) = (self.k, self.pad, self.oh, self.ow);
        let area = oh * ow;
        for ch in 0..self.c {
            let img = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let dst = &mut cols[row * area..(row + 1) * area];
                    for oy in 0..oh {
                        let iy = oy as isize + ki as isize - pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + kj as isize - pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Folds columns back, accumulating into `x` (the adjoint of `im2col`).
    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let (k, pad, oh, ow) = (self.k, self.pad, self.oh, self.ow);
        let area = oh * ow;
        for ch in 0..self.c {
            let img = &mut x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let src = &cols[row * area..(row + 1) * area];
                    for oy in 0..oh {
                        let iy = oy as isize + ki as isize - pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..ow {
                            let ix = ox as isize + kj as isize - pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims4(t: &Tensor, what: &str) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "{} must be 4-D (NCHW), got {:?}", what, s);
    (s[0], s[1], s[2], s[3])
}

/// Stride-1 cross-correlation: `x: N×C×H×W`, `w: O×C×k×k` → `N×O×H'×W'`.
pub fn conv2d(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let (n, c, h, wd) = dims4(x, "conv2d input");
    let (o, wc, k, k2) = dims4(w, "conv2d weight");
    assert_eq!(c, wc, "conv2d channel mismatch: input {:?}, weight {:?}", x.shape(), w.shape());
    assert_eq!(k, k2, "square kernels only");
    let g = ConvGeom::new(c, h, wd, k, pad);
    let (rows, area) = (g.cols_rows(), g.out_area());
    let mut out = vec![0.0; n * o * area];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * area] };
    let xd = x.data();
    for b in 0..n {
        let img = &xd[b * c * h * wd..(b + 1) * c * h * wd];
        let src: &[f64] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        let dst = &mut out[b * o * area..(b + 1) * o * area];
        gemm(o, rows, area, w.data(), rows, 1, src, area, 1, dst, area, 1, 0.0);
    }
    Tensor::new(&[n, o, g.oh, g.ow], out)
}

/// Gradient of [`conv2d`] with respect to its input (a transposed
/// convolution): `g: N×O×H'×W'`, `w: O×C×k×k` → `N×C×H×W`.
pub fn conv2d_input_grad(g: &Tensor, w: &Tensor, pad: usize, in_h: usize, in_w: usize) -> Tensor {
    let (n, o, gh, gw) = dims4(g, "conv2d_input_grad upstream");
    let (wo, c, k, _) = dims4(w, "conv2d_input_grad weight");
    assert_eq!(o, wo, "conv2d_input_grad channel mismatch");
    let geom = ConvGeom::new(c, in_h, in_w, k, pad);
    assert_eq!((geom.oh, geom.ow), (gh, gw), "conv2d_input_grad spatial mismatch");
    let (rows, area) = (geom.cols_rows(), geom.out_area());
    let img_len = c * in_h * in_w;
    let mut out = vec![0.0; n * img_len];
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * area] };
    let gd = g.data();
    for b in 0..n {
        let gb = &gd[b * o * area..(b + 1) * o * area];
        let dst = &mut out[b * img_len..(b + 1) * img_len];
        if geom.is_pointwise() {
            gemm(rows, o, area, w.data(), 1, rows, gb, area, 1, dst, area, 1, 0.0);
        } else {
            gemm(rows, o, area, w.data(), 1, rows, gb, area, 1, &mut cols, area, 1, 0.0);
            geom.col2im(&cols, dst);
        }
    }
    Tensor::new(&[n, c, in_h, in_w], out)
}

/// Gradient of [`conv2d`] with respect to its weight, summed over the batch:
/// `x: N×C×H×W`, `g: N×O×H'×W'` → `O×C×k×k`.
pub fn conv2d_weight_grad(x: &Tensor, g: &Tensor, k: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = dims4(x, "conv2d_weight_grad input");
    let (gn, o, gh, gw) = dims4(g, "conv2d_weight_grad upstream");
    assert_eq!(n, gn, "conv2d_weight_grad batch mismatch");
    let geom = ConvGeom::new(c, h, wd, k, pad);
    assert_eq!((geom.oh, geom.ow), (gh, gw), "conv2d_weight_grad spatial mismatch");
    let (rows, area) = (geom.cols_rows(), geom.out_area());
    let mut out = vec![0.0; o * rows];
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * area] };
    let (xd, gd) = (x.data(), g.data());
    for b in 0..n {
        let img = &xd[b * c * h * wd..(b + 1) * c * h * wd];
        let src: &[f64] = if geom.is_pointwise() {
            img
        } else {
            geom.im2col(img, &mut cols);
            &cols
        };
        let gb = &gd[b * o * area..(b + 1) * o * area];
        // out (o×rows) += gb (o×area) · srcᵀ (area×rows)
        gemm(o, area, rows, gb, area, 1, src, 1, area, &mut out, rows, 1, 1.0);
    }
    Tensor::new(&[o, c, k, k], out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = dims4(x, "upsample input");
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; n * c * oh * ow];
    let xd = x.data();
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / f) * w..(oy / f + 1) * w];
            let line = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, v) in line.iter_mut().enumerate() {
                *v = row[ox / f];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Sums non-overlapping `f×f` blocks (the adjoint of [`upsample_nearest`]).
pub fn sum_pool(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = dims4(x, "pool input");
    assert!(h % f == 0 && w % f == 0, "pool factor {} does not divide {}x{}", f, h, w);
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; n * c * oh * ow];
    let xd = x.data();
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let line = &src[y * w..(y + 1) * w];
            let acc = &mut dst[(y / f) * ow..(y / f + 1) * ow];
            for (x, v) in line.iter().enumerate() {
                acc[x / f] += v;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop correlation used as an oracle.
    fn conv_naive(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
        let (n, c, h, wd) = dims4(x, "x");
        let (o, _, k, _) = dims4(w, "w");
        let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = y as isize + ki as isize - pad as isize;
                                    let ix = xx as isize + kj as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        Tensor::new(&[n, o, oh, ow], out)
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, pad) in &[(3, 1), (1, 0), (3, 0), (4, 2)] {
            let x = Tensor::randn(&[2, 3, 6, 5], &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], &mut rng);
            let a = conv2d(&x, &w, pad);
            let b = conv_naive(&x, &w, pad);
            assert_eq!(a.shape(), b.shape());
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, pad) in &[(3, 1), (1, 0), (3, 0)] {
            let x = Tensor::randn(&[2, 3, 5, 6], &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], &mut rng);
            let y = conv2d(&x, &w, pad);
            let g = Tensor::randn(y.shape(), &mut rng);
            let lhs = dot(&y, &g);
            let gx = conv2d_input_grad(&g, &w, pad, 5, 6);
            let gw = conv2d_weight_grad(&x, &g, k, pad);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - dot(&w, &gw)).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn pool_is_adjoint_of_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 2, 3, 4], &mut rng);
        let y = upsample_nearest(&x, 2);
        let g = Tensor::randn(y.shape(), &mut rng);
        assert!((dot(&y, &g) - dot(&x, &sum_pool(&g, 2))).abs() < 1e-10);
    }
}
