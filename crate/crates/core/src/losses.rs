//! Reconstruction and adversarial objectives.

use convrender_autograd::{grad, Bind, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::nn::{Conv, Discriminator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lr_smooth_l1: f64,
    pub lr_perceptual: f64,
    /// Pixel smooth-L1 on the high-resolution image; off by default.
    pub hr_smooth_l1: f64,
    pub hr_perceptual: f64,
    pub adv: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lr_smooth_l1: 1.0, lr_perceptual: 1.0, hr_smooth_l1: 0.0, hr_perceptual: 1.0, adv: 0.1, smooth_l1_beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lr_smooth_l1, self.lr_perceptual, self.hr_smooth_l1, self.hr_perceptual, self.adv];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {all:?}")));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("smooth-L1 beta must be positive".into()));
        }
        Ok(())
    }
}

/// Training stage: reconstruction only, then reconstruction plus the
/// adversarial term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Stage {
    Distill,
    Adversarial,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::Distill => 1,
            Stage::Adversarial => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::Distill),
            2 => Ok(Stage::Adversarial),
            _ => Err(format!("unknown stage {v}")),
        }
    }
}

fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(validation(format!("{what}: shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean elementwise Huber loss of `a − b` with transition `beta`.
pub fn smooth_l1(a: &Var, b: &Var, beta: f64) -> Result<Var> {
    same_shape(a, b, "smooth_l1")?;
    if !(beta > 0.0) {
        return Err(validation("smooth_l1 beta must be positive"));
    }
    Ok(a.sub(b).huber(beta).mean())
}

/// Fixed random convolutional feature extractor for perceptual distances.
/// Weights derive from a constant seed and never train.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    params: ParamStore,
    layers: Vec<Conv>,
}

const PERCEPTUAL_SEED: u64 = 0x5EED_F00D;

impl Default for PerceptualNet {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptualNet {
    pub fn new() -> Self {
        let layers = vec![
            Conv::new("p0", 3, 16, 3, true),
            Conv::new("p1", 16, 32, 3, true),
            Conv::new("p2", 32, 32, 3, true),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let mut params = ParamStore::new();
        for l in &layers {
            l.init(&mut params, &mut rng, 1.0);
        }
        Self { params, layers }
    }

    /// Activations after each layer for `[B, 3, H, W]` images in `[0, 1]`.
    pub fn features(&self, img: &Var) -> Vec<Var> {
        let p = Bind::frozen(&self.params);
        let mut x = img.scale(2.0).add_scalar(-1.0);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 && x.shape()[2] % 2 == 0 && x.shape()[2] >= 8 {
                x = x.avg_pool(2);
            }
            x = l.forward(&p, &x);
            out.push(x.clone());
        }
        out
    }

    /// Sum over layers of the mean squared activation difference.
    pub fn loss(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape(a, b, "perceptual_loss")?;
        if a.shape().len() != 4 || a.shape()[1] != 3 {
            return Err(validation(format!("perceptual_loss expects [B, 3, H, W], got {:?}", a.shape())));
        }
        let fa = self.features(a);
        let fb = self.features(b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = x.sub(y).square().mean();
            total = Some(match total {
                None => d,
                Some(t) => t.add(&d),
            });
        }
        Ok(total.expect("at least one layer"))
    }
}

pub fn perceptual_loss(net: &PerceptualNet, a: &Var, b: &Var) -> Result<Var> {
    net.loss(a, b)
}

/// `[B, 3, H, W] ++ bilinear_up([B, 3, h, w])` → `[B, 6, H, W]`.
pub fn dual_discriminator_input(hr: &Var, lr: &Var) -> Result<Var> {
    let (a, b) = (hr.shape(), lr.shape());
    if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[1] != 3 || b[1] != 3 {
        return Err(validation(format!("dual input needs two [B, 3, ., .] images, got {a:?} and {b:?}")));
    }
    if a[2] * b[3] != a[3] * b[2] {
        return Err(validation(format!("aspect ratios differ: {}×{} vs {}×{}", a[2], a[3], b[2], b[3])));
    }
    let up = lr.resize_bilinear(a[2], a[3]);
    Ok(Var::concat(&[hr, &up], 1))
}

/// Non-saturating generator loss `mean softplus(−D(fake, c))`.
pub fn adversarial_g(d: &Discriminator, p: &Bind, fake: &Var, c: &Var) -> Var {
    d.forward(p, fake, c).neg().softplus().mean()
}

/// Discriminator loss terms.
#[derive(Clone, Debug)]
pub struct DLoss {
    pub total: Var,
    pub fake: f64,
    pub real: f64,
    pub r1: f64,
}

/// `mean softplus(D(fake)) + mean softplus(−D(real)) [+ γ/2·mean ‖∇_real D‖²]`.
/// The penalty is built with a differentiable gradient so it trains `D`.
pub fn adversarial_d(
    d: &Discriminator,
    p: &Bind,
    real: &Tensor,
    fake: &Tensor,
    c_real: &Var,
    c_fake: &Var,
    r1_gamma: Option<f64>,
) -> DLoss {
    let fake_term = d.forward(p, &Var::constant(fake.clone()), c_fake).softplus().mean();
    let real_in = Var::leaf(real.clone());
    let logits = d.forward(p, &real_in, c_real);
    let real_term = logits.neg().softplus().mean();
    let mut total = fake_term.add(&real_term);
    let mut r1 = 0.0;
    if let Some(gamma) = r1_gamma {
        let b = real.shape()[0] as f64;
        if let Some(g) = grad(&logits.sum(), &[&real_in], true).remove(0) {
            let pen = g.square().sum().scale(gamma / (2.0 * b));
            r1 = pen.item();
            total = total.add(&pen);
        }
    }
    DLoss { fake: fake_term.item(), real: real_term.item(), r1, total }
}

/// Per-term values of one generator objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: u8,
    pub lr_smooth_l1: f64,
    pub lr_perceptual: f64,
    pub hr_smooth_l1: f64,
    pub hr_perceptual: f64,
    /// Absent in the reconstruction stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv: Option<f64>,
    pub total: f64,
}

/// Reconstruction and adversarial terms before weighting.
pub struct LossTerms {
    pub lr_smooth_l1: Var,
    pub lr_perceptual: Var,
    pub hr_smooth_l1: Var,
    pub hr_perceptual: Var,
    pub adv: Option<Var>,
}

/// `L_total = L_rec^LR + L_rec^HR + λ_adv·L_adv`; the adversarial term is
/// dropped entirely in the reconstruction stage.
pub fn total_loss(terms: &LossTerms, w: &LossWeights, stage: Stage) -> Result<(Var, LossReport)> {
    let mut total = terms
        .lr_smooth_l1
        .scale(w.lr_smooth_l1)
        .add(&terms.lr_perceptual.scale(w.lr_perceptual))
        .add(&terms.hr_smooth_l1.scale(w.hr_smooth_l1))
        .add(&terms.hr_perceptual.scale(w.hr_perceptual));
    let mut adv = None;
    if stage == Stage::Adversarial {
        let a = terms.adv.as_ref().ok_or_else(|| validation("adversarial stage needs an adversarial term"))?;
        total = total.add(&a.scale(w.adv));
        adv = Some(a.item());
    }
    let report = LossReport {
        stage: stage.into(),
        lr_smooth_l1: terms.lr_smooth_l1.item(),
        lr_perceptual: terms.lr_perceptual.item(),
        hr_smooth_l1: terms.hr_smooth_l1.item(),
        hr_perceptual: terms.hr_perceptual.item(),
        adv,
        total: total.item(),
    };
    Ok((total, report))
}
