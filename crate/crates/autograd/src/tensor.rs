//! Dense row-major `f64` tensors with copy-on-write storage.
//!
//! Everything here is plain numerics with no graph bookkeeping; the
//! differentiable wrappers live in [`crate::var`].

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes; `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the (larger) broadcast shape `target`,
/// zero along broadcast dimensions.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let off = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Visits every element of `shape` in row-major order, handing the callback
/// the flat offsets into two strided operands. The innermost dimension is
/// run as a tight loop.
fn for_each_strided2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel_of(shape);
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let nd = shape.len();
    let inner = shape[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut flat = 0usize;
    loop {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(flat, pa, pb);
            flat += 1;
            pa += ia;
            pb += ib;
        }
        // odometer over the outer dimensions
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel_of(shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(shape, vec![value; numel_of(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[], vec![value])
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(shape, data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; clones the storage first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
            return Tensor::new(&self.shape, data);
        }
        if other.numel() == 1 && other.ndim() <= self.ndim() {
            let b = other.data[0];
            return self.map(|a| f(a, b));
        }
        let shape = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", self.shape, other.shape)
        });
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut out = vec![0.0; numel_of(&shape)];
        let (a, b) = (&self.data[..], &other.data[..]);
        for_each_strided2(&shape, &sa, &sb, |o, i, j| out[o] = f(a[i], b[j]));
        Tensor::new(&shape, out)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel().max(1) as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Expands to `shape` following broadcasting rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let bs = broadcast_shape(&self.shape, shape);
        assert!(
            bs.as_deref() == Some(shape),
            "cannot broadcast {:?} to {:?}",
            self.shape,
            shape
        );
        let sa = broadcast_strides(&self.shape, shape);
        let zero = vec![0; shape.len()];
        let mut out = vec![0.0; numel_of(shape)];
        let a = &self.data[..];
        for_each_strided2(shape, &sa, &zero, |o, i, _| out[o] = a[i]);
        Tensor::new(shape, out)
    }

    /// Sums over broadcast dimensions so the result has `shape`; the adjoint
    /// of [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        if numel_of(shape) == 1 {
            return Tensor::new(shape, vec![self.sum()]);
        }
        let bs = broadcast_shape(shape, &self.shape);
        assert!(
            bs.as_deref() == Some(&self.shape[..]),
            "cannot sum {:?} down to {:?}",
            self.shape,
            shape
        );
        let st = broadcast_strides(shape, &self.shape);
        let own = strides_of(&self.shape);
        let mut out = vec![0.0; numel_of(shape)];
        let a = &self.data[..];
        for_each_strided2(&self.shape, &own, &st, |_, i, j| out[j] += a[i]);
        Tensor::new(shape, out)
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.ndim(), "permute axes {:?} for shape {:?}", axes, self.shape);
        let own = strides_of(&self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let zero = vec![0; shape.len()];
        let mut out = vec![0.0; self.numel()];
        let a = &self.data[..];
        for_each_strided2(&shape, &src, &zero, |o, i, _| out[o] = a[i]);
        Tensor::new(&shape, out)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let dim = self.shape[axis];
        assert!(start + len <= dim, "narrow {}..{} out of range {}", start, start + len, dim);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Tensor::new(&shape, out)
    }

    /// Places `self` at offset `start` of a zero tensor whose `axis` has
    /// length `total`; the adjoint of [`Tensor::narrow`].
    pub fn embed(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let len = self.shape[axis];
        assert!(start + len <= total);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Tensor::new(&shape, out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for p in parts {
            assert_eq!(p.ndim(), first.len());
            for (d, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
            total += p.shape()[axis];
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * n..(o + 1) * n]);
            }
        }
        Tensor::new(&shape, out)
    }

    /// `op(a) · op(b)` for 2-D tensors, where `op` optionally transposes.
    pub fn matmul_t(&self, ta: bool, other: &Tensor, tb: bool) -> Tensor {
        assert_eq!(self.ndim(), 2, "matmul lhs must be 2-D, got {:?}", self.shape);
        assert_eq!(other.ndim(), 2, "matmul rhs must be 2-D, got {:?}", other.shape);
        let (ar, ac) = (self.shape[0], self.shape[1]);
        let (br, bc) = (other.shape[0], other.shape[1]);
        let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
        let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
        assert_eq!(k, k2, "matmul inner dims differ: {:?} vs {:?}", self.shape, other.shape);
        let mut out = vec![0.0; m * n];
        crate::kernels::gemm(m, k, n, &self.data, rsa, csa, &other.data, rsb, csb, &mut out, n, 1, 0.0);
        Tensor::new(&[m, n], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(false, other, false)
    }
}

impl From<f64> for Tensor {
    fn from(v: f64) -> Self {
        Tensor::scalar(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_and_sum_to_are_adjoint_shapes() {
        let a = Tensor::new(&[2, 1, 3], (0..6).map(|x| x as f64).collect());
        let b = a.broadcast_to(&[2, 4, 3]);
        assert_eq!(b.shape(), &[2, 4, 3]);
        assert_eq!(b.data()[3..6], [0.0, 1.0, 2.0]);
        let s = b.sum_to(&[2, 1, 3]);
        assert_eq!(s.data(), a.scale(4.0).data());
        let t = b.sum_to(&[3]);
        assert_eq!(t.data(), &[4.0 * 3.0, 4.0 * 5.0, 4.0 * 7.0]);
    }

    #[test]
    fn zip_broadcasts_channel_vectors() {
        let x = Tensor::ones(&[2, 3, 2, 2]);
        let s = Tensor::new(&[2, 3, 1, 1], (1..=6).map(|x| x as f64).collect());
        let y = x.mul(&s);
        assert_eq!(y.data()[4..8], [2.0; 4]);
        assert_eq!(y.data()[20..24], [6.0; 4]);
    }

    #[test]
    fn permute_transposes() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(a.permute(&[1, 0]).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn narrow_embed_concat() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let n = a.narrow(1, 1, 2);
        assert_eq!(n.data(), &[2., 3., 5., 6.]);
        let e = n.embed(1, 1, 3);
        assert_eq!(e.data(), &[0., 2., 3., 0., 5., 6.]);
        let c = Tensor::concat(&[&a.narrow(1, 0, 1), &n], 1);
        assert_eq!(c, a);
    }

    #[test]
    fn matmul_with_transposes() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(&[3, 2], vec![1., 0., 0., 1., 1., 1.]);
        assert_eq!(a.matmul(&b).data(), &[4., 5., 10., 11.]);
        let at = a.permute(&[1, 0]);
        assert_eq!(at.matmul_t(true, &b, false).data(), &[4., 5., 10., 11.]);
        let bt = b.permute(&[1, 0]);
        assert_eq!(a.matmul_t(false, &bt, true).data(), &[4., 5., 10., 11.]);
    }
}
