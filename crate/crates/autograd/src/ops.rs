//! Differentiable operations on [`Var`].

use crate::kernels;
use crate::tensor::Tensor;
use crate::var::Var;

fn sum_to_shape(g: &Var, shape: &[usize]) -> Var {
    if g.shape() == shape {
        g.clone()
    } else {
        g.sum_to(shape)
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().add(other.value());
        Var::from_op("add", value, vec![self.clone(), other.clone()], |inp, _, g, _| {
            vec![Some(sum_to_shape(g, inp[0].shape())), Some(sum_to_shape(g, inp[1].shape()))]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value().sub(other.value());
        Var::from_op("sub", value, vec![self.clone(), other.clone()], |inp, _, g, needs| {
            vec![
                Some(sum_to_shape(g, inp[0].shape())),
                needs[1].then(|| sum_to_shape(&g.neg(), inp[1].shape())),
            ]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value().mul(other.value());
        Var::from_op("mul", value, vec![self.clone(), other.clone()], |inp, _, g, needs| {
            vec![
                needs[0].then(|| sum_to_shape(&g.mul(&inp[1]), inp[0].shape())),
                needs[1].then(|| sum_to_shape(&g.mul(&inp[0]), inp[1].shape())),
            ]
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = self.value().zip(other.value(), |a, b| a / b);
        Var::from_op("div", value, vec![self.clone(), other.clone()], |inp, out, g, needs| {
            vec![
                needs[0].then(|| sum_to_shape(&g.div(&inp[1]), inp[0].shape())),
                needs[1].then(|| sum_to_shape(&g.mul(out).div(&inp[1]).neg(), inp[1].shape())),
            ]
        })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Var {
        let value = self.value().scale(s);
        Var::from_op("scale", value, vec![self.clone()], move |_, _, g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        let value = self.value().map(|x| x + s);
        Var::from_op("add_scalar", value, vec![self.clone()], |_, _, g, _| vec![Some(g.clone())])
    }

    pub fn exp(&self) -> Var {
        let value = self.value().map(f64::exp);
        Var::from_op("exp", value, vec![self.clone()], |_, out, g, _| vec![Some(g.mul(out))])
    }

    pub fn ln(&self) -> Var {
        let value = self.value().map(f64::ln);
        Var::from_op("ln", value, vec![self.clone()], |inp, _, g, _| vec![Some(g.div(&inp[0]))])
    }

    pub fn powf(&self, p: f64) -> Var {
        let value = self.value().map(|x| x.powf(p));
        Var::from_op("powf", value, vec![self.clone()], move |inp, _, g, _| {
            vec![Some(g.mul(&inp[0].powf(p - 1.0)).scale(p))]
        })
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Var {
        self.powf(0.5)
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(sigmoid_scalar);
        Var::from_op("sigmoid", value, vec![self.clone()], |_, out, g, _| {
            vec![Some(g.mul(&out.mul(&out.neg().add_scalar(1.0))))]
        })
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Var {
        let value = self.value().map(softplus_scalar);
        Var::from_op("softplus", value, vec![self.clone()], |inp, _, g, _| vec![Some(g.mul(&inp[0].sigmoid()))])
    }

    pub fn tanh(&self) -> Var {
        let value = self.value().map(f64::tanh);
        Var::from_op("tanh", value, vec![self.clone()], |_, out, g, _| {
            vec![Some(g.mul(&out.square().neg().add_scalar(1.0)))]
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        Var::from_op("leaky_relu", value, vec![self.clone()], move |inp, _, g, _| {
            let mask = inp[0].value().map(|x| if x > 0.0 { 1.0 } else { slope });
            vec![Some(g.mul(&Var::constant(mask)))]
        })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.value().map(|x| x.clamp(lo, hi));
        Var::from_op("clamp", value, vec![self.clone()], move |inp, _, g, _| {
            let mask = inp[0].value().map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
            vec![Some(g.mul(&Var::constant(mask)))]
        })
    }

    /// Elementwise Huber function with transition `beta`:
    /// `0.5·x²/β` for `|x| < β`, else `|x| − 0.5·β`.
    pub fn huber(&self, beta: f64) -> Var {
        assert!(beta > 0.0, "huber transition must be positive");
        let value = self.value().map(|x| {
            let a = x.abs();
            if a < beta {
                0.5 * x * x / beta
            } else {
                a - 0.5 * beta
            }
        });
        Var::from_op("huber", value, vec![self.clone()], move |inp, _, g, _| {
            vec![Some(g.mul(&inp[0].scale(1.0 / beta).clamp(-1.0, 1.0)))]
        })
    }

    pub fn sum(&self) -> Var {
        let value = Tensor::scalar(self.value().sum());
        Var::from_op("sum", value, vec![self.clone()], |inp, _, g, _| {
            vec![Some(g.reshape(&vec![1; inp[0].shape().len()]).broadcast_to(inp[0].shape()))]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over broadcast dimensions down to `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        let value = self.value().sum_to(shape);
        Var::from_op("sum_to", value, vec![self.clone()], |inp, _, g, _| {
            vec![Some(g.broadcast_to(inp[0].shape()))]
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let value = self.value().broadcast_to(shape);
        Var::from_op("broadcast_to", value, vec![self.clone()], |inp, _, g, _| {
            vec![Some(sum_to_shape(g, inp[0].shape()))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = self.value().reshape(shape);
        Var::from_op("reshape", value, vec![self.clone()], |inp, _, g, _| vec![Some(g.reshape(inp[0].shape()))])
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let value = self.value().permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op("permute", value, vec![self.clone()], move |_, _, g, _| vec![Some(g.permute(&inverse))])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let value = self.value().narrow(axis, start, len);
        Var::from_op("narrow", value, vec![self.clone()], move |inp, _, g, _| {
            vec![Some(g.embed(axis, start, inp[0].shape()[axis]))]
        })
    }

    /// Zero-padded placement along `axis`; the adjoint of [`Var::narrow`].
    pub fn embed(&self, axis: usize, start: usize, total: usize) -> Var {
        let value = self.value().embed(axis, start, total);
        Var::from_op("embed", value, vec![self.clone()], move |inp, _, g, _| {
            vec![Some(g.narrow(axis, start, inp[0].shape()[axis]))]
        })
    }

    pub fn concat(parts: &[&Var], axis: usize) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat(&tensors, axis);
        let inputs: Vec<Var> = parts.iter().map(|&p| p.clone()).collect();
        Var::from_op("concat", value, inputs, move |inp, _, g, needs| {
            let mut start = 0;
            inp.iter()
                .zip(needs)
                .map(|(v, &need)| {
                    let len = v.shape()[axis];
                    let out = need.then(|| g.narrow(axis, start, len));
                    start += len;
                    out
                })
                .collect()
        })
    }

    /// `op(self) · op(other)` on 2-D values.
    pub fn matmul_t(&self, ta: bool, other: &Var, tb: bool) -> Var {
        let value = self.value().matmul_t(ta, other.value(), tb);
        Var::from_op("matmul", value, vec![self.clone(), other.clone()], move |inp, _, g, needs| {
            let (a, b) = (&inp[0], &inp[1]);
            let (ga, gb) = match (ta, tb) {
                (false, false) => (g.matmul_t(false, b, true), a.matmul_t(true, g, false)),
                (true, false) => (b.matmul_t(false, g, true), a.matmul_t(false, g, false)),
                (false, true) => (g.matmul_t(false, b, false), g.matmul_t(true, a, false)),
                (true, true) => (b.matmul_t(true, g, true), g.matmul_t(true, a, true)),
            };
            vec![needs[0].then_some(ga), needs[1].then_some(gb)]
        })
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.matmul_t(false, other, false)
    }

    /// Stride-1 convolution, NCHW input and OIkk weight.
    pub fn conv2d(&self, weight: &Var, pad: usize) -> Var {
        let value = kernels::conv2d(self.value(), weight.value(), pad);
        Var::from_op("conv2d", value, vec![self.clone(), weight.clone()], move |inp, _, g, needs| {
            let (x, w) = (&inp[0], &inp[1]);
            let (h, wd) = (x.shape()[2], x.shape()[3]);
            vec![
                needs[0].then(|| g.conv2d_input_grad(w, pad, h, wd)),
                needs[1].then(|| x.conv2d_weight_grad(g, w.shape()[2], pad)),
            ]
        })
    }

    /// Transposed convolution of an upstream gradient `self` by `weight`.
    pub fn conv2d_input_grad(&self, weight: &Var, pad: usize, in_h: usize, in_w: usize) -> Var {
        let value = kernels::conv2d_input_grad(self.value(), weight.value(), pad, in_h, in_w);
        Var::from_op("conv2d_input_grad", value, vec![self.clone(), weight.clone()], move |inp, _, gy, needs| {
            let (g, w) = (&inp[0], &inp[1]);
            vec![
                needs[0].then(|| gy.conv2d(w, pad)),
                needs[1].then(|| gy.conv2d_weight_grad(g, w.shape()[2], pad)),
            ]
        })
    }

    /// Weight gradient of a convolution with input `self` and upstream `g`.
    pub fn conv2d_weight_grad(&self, g: &Var, k: usize, pad: usize) -> Var {
        let value = kernels::conv2d_weight_grad(self.value(), g.value(), k, pad);
        Var::from_op("conv2d_weight_grad", value, vec![self.clone(), g.clone()], move |inp, _, gw, needs| {
            let (x, g) = (&inp[0], &inp[1]);
            let (h, wd) = (x.shape()[2], x.shape()[3]);
            vec![
                needs[0].then(|| g.conv2d_input_grad(gw, pad, h, wd)),
                needs[1].then(|| x.conv2d(gw, pad)),
            ]
        })
    }

    pub fn upsample_nearest(&self, f: usize) -> Var {
        let value = kernels::upsample_nearest(self.value(), f);
        Var::from_op("upsample_nearest", value, vec![self.clone()], move |_, _, g, _| vec![Some(g.sum_pool(f))])
    }

    pub fn sum_pool(&self, f: usize) -> Var {
        let value = kernels::sum_pool(self.value(), f);
        Var::from_op("sum_pool", value, vec![self.clone()], move |_, _, g, _| vec![Some(g.upsample_nearest(f))])
    }

    pub fn avg_pool(&self, f: usize) -> Var {
        self.sum_pool(f).scale(1.0 / (f * f) as f64)
    }

    /// Applies a linear map along the last axis: `x[..., n] · Mᵀ` with
    /// `m: out×n`.
    pub fn linear_last(&self, m: &Var) -> Var {
        let shape = self.shape().to_vec();
        let n = *shape.last().expect("linear_last on scalar");
        let rows = self.value().numel() / n;
        let out_dim = m.shape()[0];
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = out_dim;
        self.reshape(&[rows, n]).matmul_t(false, m, true).reshape(&out_shape)
    }

    /// Separable bilinear resize of an NCHW image (half-pixel centers,
    /// edge clamped), expressed as two interpolation matrices.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 4, "resize_bilinear expects NCHW");
        let (h, w) = (s[2], s[3]);
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let mw = Var::constant(interp_matrix(w, out_w));
        let mh = Var::constant(interp_matrix(h, out_h));
        let x = self.linear_last(&mw); // N C H W'
        x.permute(&[0, 1, 3, 2]).linear_last(&mh).permute(&[0, 1, 3, 2])
    }
}

/// `out×inp` matrix of 1-D linear interpolation weights with half-pixel
/// centers and clamped borders.
pub fn interp_matrix(inp: usize, out: usize) -> Tensor {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let t = src - i0 as f64;
        m[o * inp + i0] += 1.0 - t;
        m[o * inp + i1] += t;
    }
    Tensor::new(&[out, inp], m)
}
