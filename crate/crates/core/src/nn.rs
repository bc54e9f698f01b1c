//! Layers shared by the generators and the discriminator: equalized-lr
//! linear and convolution layers, style-modulated convolution, mapping and
//! synthesis networks, and the super-resolution head.

use std::f64::consts::SQRT_2;

use convrender_autograd::{Bind, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Leaky ReLU (slope 0.2) with unit-variance gain.
pub fn lrelu(x: &Var) -> Var {
    x.leaky_relu(0.2).scale(SQRT_2)
}

/// `x / sqrt(mean(x², axis=1) + 1e-8)` for a `[B, D]` input.
pub fn normalize_2nd_moment(x: &Var) -> Var {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let inv = x.square().sum_to(&[b, 1]).scale(1.0 / d as f64).add_scalar(1e-8).powf(-0.5);
    x.mul(&inv)
}

/// Fully connected layer with runtime weight scaling `1/sqrt(in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activate: bool,
    pub bias_init: f64,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, activate: bool) -> Self {
        Self { name: name.into(), in_dim, out_dim, activate, bias_init: 0.0 }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(format!("{}.weight", self.name), Tensor::randn(&[self.out_dim, self.in_dim], rng));
        store.insert(format!("{}.bias", self.name), Tensor::full(&[self.out_dim], self.bias_init));
    }

    pub fn forward(&self, p: &Bind, x: &Var) -> Var {
        let w = p.p(&format!("{}.weight", self.name)).scale(1.0 / (self.in_dim as f64).sqrt());
        let y = x.matmul_t(false, &w, true).add(&p.p(&format!("{}.bias", self.name)));
        if self.activate {
            lrelu(&y)
        } else {
            y
        }
    }

    pub fn macs(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }
}

/// Plain (unmodulated) convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub activate: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, k: usize, activate: bool) -> Self {
        Self { name: name.into(), in_c, out_c, k, activate }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R, gain: f64) {
        let w = Tensor::randn(&[self.out_c, self.in_c, self.k, self.k], rng).scale(gain);
        store.insert(format!("{}.weight", self.name), w);
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_c]));
    }

    pub fn forward(&self, p: &Bind, x: &Var) -> Var {
        let scale = 1.0 / ((self.in_c * self.k * self.k) as f64).sqrt();
        let w = p.p(&format!("{}.weight", self.name)).scale(scale);
        let b = p.p(&format!("{}.bias", self.name)).reshape(&[1, self.out_c, 1, 1]);
        let y = x.conv2d(&w, self.k / 2).add(&b);
        if self.activate {
            lrelu(&y)
        } else {
            y
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.in_c * self.out_c * self.k * self.k) as u64
    }
}

/// Style-modulated convolution: input channels are scaled by an affine
/// function of the style code, convolved with a shared kernel, then
/// (optionally) demodulated so each output channel has unit expected
/// variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModConv {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub demodulate: bool,
    pub activate: bool,
    pub affine: Linear,
}

impl ModConv {
    pub fn new(name: &str, w_dim: usize, in_c: usize, out_c: usize, k: usize, demodulate: bool, activate: bool) -> Self {
        let mut affine = Linear::new(format!("{name}.affine"), w_dim, in_c, false);
        affine.bias_init = 1.0;
        Self { name: name.to_string(), in_c, out_c, k, demodulate, activate, affine }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.affine.init(store, rng);
        store.insert(format!("{}.weight", self.name), Tensor::randn(&[self.out_c, self.in_c, self.k, self.k], rng));
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_c]));
    }

    /// `x: [B, in_c, H, W]`, `w: [B, w_dim]`.
    pub fn forward(&self, p: &Bind, x: &Var, w: &Var) -> Var {
        let b = x.shape()[0];
        let styles = self.affine.forward(p, w);
        let scale = 1.0 / ((self.in_c * self.k * self.k) as f64).sqrt();
        let weight = p.p(&format!("{}.weight", self.name)).scale(scale);
        let xs = x.mul(&styles.reshape(&[b, self.in_c, 1, 1]));
        let mut y = xs.conv2d(&weight, self.k / 2);
        if self.demodulate {
            let wsq = weight.square().sum_to(&[self.out_c, self.in_c, 1, 1]).reshape(&[self.out_c, self.in_c]);
            let d = styles.square().matmul_t(false, &wsq, true).add_scalar(1e-8).powf(-0.5);
            y = y.mul(&d.reshape(&[b, self.out_c, 1, 1]));
        }
        let y = y.add(&p.p(&format!("{}.bias", self.name)).reshape(&[1, self.out_c, 1, 1]));
        if self.activate {
            lrelu(&y)
        } else {
            y
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.affine.macs() + (h * w * self.in_c * self.out_c * self.k * self.k) as u64
    }
}

/// `w = MLP(normalize(z) ++ normalize(embed(c)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingNet {
    pub name: String,
    pub z_dim: usize,
    pub c_dim: usize,
    pub w_dim: usize,
    pub embed: Option<Linear>,
    pub layers: Vec<Linear>,
}

impl MappingNet {
    pub fn new(name: &str, z_dim: usize, c_dim: usize, w_dim: usize, depth: usize) -> Self {
        let embed = (c_dim > 0).then(|| Linear::new(format!("{name}.embed"), c_dim, w_dim, false));
        let mut layers = Vec::with_capacity(depth);
        let mut in_dim = z_dim + if c_dim > 0 { w_dim } else { 0 };
        for i in 0..depth.max(1) {
            layers.push(Linear::new(format!("{name}.fc{i}"), in_dim, w_dim, true));
            in_dim = w_dim;
        }
        Self { name: name.to_string(), z_dim, c_dim, w_dim, embed, layers }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        if let Some(e) = &self.embed {
            e.init(store, rng);
        }
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    /// `z: [B, z_dim]`, `c: [B, c_dim]` → `[B, w_dim]`.
    pub fn forward(&self, p: &Bind, z: &Var, c: &Var) -> Var {
        let mut x = normalize_2nd_moment(z);
        if let Some(e) = &self.embed {
            let y = normalize_2nd_moment(&e.forward(p, c));
            x = Var::concat(&[&x, &y], 1);
        }
        for l in &self.layers {
            x = l.forward(p, &x);
        }
        x
    }

    pub fn macs(&self) -> u64 {
        self.embed.as_ref().map_or(0, Linear::macs) + self.layers.iter().map(Linear::macs).sum::<u64>()
    }
}

/// Upsampling used between synthesis resolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Nearest-neighbour upsampling.
    Plain,
    /// Bilinear (low-pass) upsampling, a lightweight stand-in for
    /// alias-suppressing filtered layers.
    Filtered,
}

impl Backbone {
    fn up(self, x: &Var) -> Var {
        match self {
            Backbone::Plain => x.upsample_nearest(2),
            Backbone::Filtered => {
                let s = x.shape();
                x.resize_bilinear(2 * s[2], 2 * s[3])
            }
        }
    }
}

/// Skip-architecture synthesis network: a learned 4×4 constant is upsampled
/// to `out_res` through pairs of modulated convolutions; each resolution
/// adds a 1×1 modulated projection to the running output.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisNet {
    pub name: String,
    pub w_dim: usize,
    pub out_channels: usize,
    pub out_res: usize,
    pub backbone: Backbone,
    /// Channel count per resolution level, starting at 4×4.
    pub channels: Vec<usize>,
    convs: Vec<Vec<ModConv>>,
    to_out: Vec<ModConv>,
}

impl SynthesisNet {
    pub fn new(name: &str, w_dim: usize, out_channels: usize, out_res: usize, width: usize, backbone: Backbone) -> Result<Self> {
        if out_res < 4 || !out_res.is_power_of_two() {
            return Err(validation(format!("synthesis resolution must be a power of two ≥ 4, got {out_res}")));
        }
        let levels = out_res.trailing_zeros() as usize - 1;
        let channels = vec![width; levels];
        let mut convs = Vec::with_capacity(levels);
        let mut to_out = Vec::with_capacity(levels);
        for (l, &c) in channels.iter().enumerate() {
            let mut block = Vec::new();
            if l == 0 {
                block.push(ModConv::new(&format!("{name}.b{l}.conv1"), w_dim, c, c, 3, true, true));
            } else {
                block.push(ModConv::new(&format!("{name}.b{l}.conv0"), w_dim, channels[l - 1], c, 3, true, true));
                block.push(ModConv::new(&format!("{name}.b{l}.conv1"), w_dim, c, c, 3, true, true));
            }
            convs.push(block);
            to_out.push(ModConv::new(&format!("{name}.b{l}.to_out"), w_dim, c, out_channels, 1, false, false));
        }
        Ok(Self { name: name.to_string(), w_dim, out_channels, out_res, backbone, channels, convs, to_out })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(format!("{}.const", self.name), Tensor::randn(&[1, self.channels[0], 4, 4], rng));
        for (block, out) in self.convs.iter().zip(&self.to_out) {
            for c in block {
                c.init(store, rng);
            }
            out.init(store, rng);
        }
    }

    /// `w: [B, w_dim]` → `[B, out_channels, out_res, out_res]`.
    pub fn forward(&self, p: &Bind, w: &Var) -> Var {
        let b = w.shape()[0];
        let mut x = p.p(&format!("{}.const", self.name)).broadcast_to(&[b, self.channels[0], 4, 4]);
        let mut img: Option<Var> = None;
        for (l, (block, out)) in self.convs.iter().zip(&self.to_out).enumerate() {
            if l > 0 {
                x = self.backbone.up(&x);
            }
            for c in block {
                x = c.forward(p, &x, w);
            }
            let y = out.forward(p, &x, w);
            img = Some(match img {
                None => y,
                Some(prev) => self.backbone.up(&prev).add(&y),
            });
        }
        img.expect("at least one synthesis level")
    }

    pub fn macs(&self) -> u64 {
        let mut total = 0;
        for (l, (block, out)) in self.convs.iter().zip(&self.to_out).enumerate() {
            let r = 4 << l;
            total += block.iter().map(|c| c.macs(r, r)).sum::<u64>() + out.macs(r, r);
        }
        total
    }
}

/// How the residual head of the super-resolution network starts out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualInit {
    Zero,
    Random { gain: f64 },
}

/// Super-resolution head: bilinearly upsampled RGB (channels 0..3 of the
/// feature image) plus a convolutional residual computed from all 32
/// channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperRes {
    pub name: String,
    pub in_c: usize,
    pub hidden: usize,
    pub factor: usize,
    conv0: Conv,
    conv1: Conv,
    out: Conv,
}

impl SuperRes {
    pub fn new(name: &str, in_c: usize, hidden: usize, factor: usize) -> Result<Self> {
        if factor == 0 || in_c < 3 {
            return Err(validation("super-resolution needs factor ≥ 1 and ≥ 3 input channels"));
        }
        Ok(Self {
            name: name.to_string(),
            in_c,
            hidden,
            factor,
            conv0: Conv::new(format!("{name}.conv0"), in_c, hidden, 3, true),
            conv1: Conv::new(format!("{name}.conv1"), hidden, hidden, 3, true),
            out: Conv::new(format!("{name}.out"), hidden, 3, 1, false),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R, residual: ResidualInit) {
        self.conv0.init(store, rng, 1.0);
        self.conv1.init(store, rng, 1.0);
        let gain = match residual {
            ResidualInit::Zero => 0.0,
            ResidualInit::Random { gain } => gain,
        };
        self.out.init(store, rng, gain);
    }

    /// `feat: [B, in_c, h, w]` → `[B, 3, factor·h, factor·w]`.
    pub fn forward(&self, p: &Bind, feat: &Var) -> Result<Var> {
        let s = feat.shape();
        if s.len() != 4 || s[1] != self.in_c {
            return Err(validation(format!("super-resolution expects [B, {}, h, w], got {:?}", self.in_c, s)));
        }
        let (h, w) = (s[2] * self.factor, s[3] * self.factor);
        let base = feat.narrow(1, 0, 3).resize_bilinear(h, w);
        let mut x = self.conv0.forward(p, feat);
        if self.factor > 1 {
            x = x.upsample_nearest(self.factor);
        }
        let x = self.conv1.forward(p, &x);
        Ok(base.add(&self.out.forward(p, &x)))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (hh, ww) = (h * self.factor, w * self.factor);
        self.conv0.macs(h, w) + self.conv1.macs(hh, ww) + self.out.macs(hh, ww)
    }
}

/// Pose-conditioned convolutional discriminator with projection
/// conditioning: `logit = fc(h) + ⟨h, embed(c)⟩ / sqrt(dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub name: String,
    pub in_c: usize,
    pub res: usize,
    pub c_dim: usize,
    from_img: Conv,
    blocks: Vec<Conv>,
    fc: Linear,
    out: Linear,
    cmap: Linear,
}

impl Discriminator {
    pub fn new(name: &str, in_c: usize, res: usize, width: usize, c_dim: usize) -> Result<Self> {
        if res < 4 || !res.is_power_of_two() {
            return Err(validation(format!("discriminator resolution must be a power of two ≥ 4, got {res}")));
        }
        let n_down = res.trailing_zeros() as usize - 2;
        let blocks = (0..n_down).map(|i| Conv::new(format!("{name}.b{i}"), width, width, 3, true)).collect();
        let hidden = width;
        Ok(Self {
            name: name.to_string(),
            in_c,
            res,
            c_dim,
            from_img: Conv::new(format!("{name}.from_img"), in_c, width, 1, true),
            blocks,
            fc: Linear::new(format!("{name}.fc"), width * 16, hidden, true),
            out: Linear::new(format!("{name}.out"), hidden, 1, false),
            cmap: Linear::new(format!("{name}.cmap"), c_dim, hidden, false),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.from_img.init(store, rng, 1.0);
        for b in &self.blocks {
            b.init(store, rng, 1.0);
        }
        self.fc.init(store, rng);
        self.out.init(store, rng);
        self.cmap.init(store, rng);
    }

    /// `img: [B, in_c, res, res]`, `c: [B, c_dim]` (normalized pose) → `[B]`.
    pub fn forward(&self, p: &Bind, img: &Var, c: &Var) -> Var {
        let b = img.shape()[0];
        let mut x = self.from_img.forward(p, img);
        for blk in &self.blocks {
            x = blk.forward(p, &x).avg_pool(2);
        }
        let h = self.fc.forward(p, &x.reshape(&[b, x.value().numel() / b]));
        let cm = self.cmap.forward(p, c);
        let proj = h.mul(&cm).sum_to(&[b, 1]).scale(1.0 / (self.fc.out_dim as f64).sqrt());
        self.out.forward(p, &h).add(&proj).reshape(&[b])
    }
}
