//! Evaluation metrics: PSNR correspondence, FID and KID over a fixed
//! embedder, and pose accuracy through a learned (yaw, pitch) regressor.

use convrender_autograd::{no_grad, Adam, AdamConfig, Bind, ParamStore, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{sample_pose, CameraPose, LatentCode, OrbitPrior, PosePrior};
use crate::error::{validation, Error, Result};
use crate::nn::{Conv, Linear};
use crate::student::Student;
use crate::teacher::Teacher;

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(validation(format!("psnr needs equal shapes, got {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(validation("psnr of empty images"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    pub config_hash: String,
    pub direction: Direction,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, samples: usize, config: &serde_json::Value, direction: Direction) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("{metric} is not finite")));
        }
        Ok(Self { metric: metric.to_string(), value, samples, config_hash: config_hash(config)?, direction })
    }
}

/// SHA-256 of the canonical JSON form of a configuration.
pub fn config_hash(config: &serde_json::Value) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn to_matrix(x: &Tensor) -> Result<DMatrix<f64>> {
    if x.ndim() != 2 || x.shape()[0] < 2 {
        return Err(validation(format!("features must be [n ≥ 2, d], got {:?}", x.shape())));
    }
    Ok(DMatrix::from_row_slice(x.shape()[0], x.shape()[1], x.data()))
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `‖μa−μb‖² + tr(Σa + Σb − 2(ΣaΣb)^½)`.
pub fn fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (xa, xb) = (to_matrix(a)?, to_matrix(b)?);
    if xa.ncols() != xb.ncols() {
        return Err(validation("feature dimensions differ"));
    }
    let (ma, ca) = mean_cov(&xa);
    let (mb, cb) = mean_cov(&xb);
    // tr((ΣaΣb)^½) = tr((Σa^½ Σb Σa^½)^½), which keeps everything symmetric.
    let sa = sym_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner).eigenvalues;
    let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let worst = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if worst < -1e-6 * scale {
        return Err(Error::Numerical(format!("covariance product is not PSD (eigenvalue {worst:e})")));
    }
    let tr_sqrt: f64 = eig.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KidConfig {
    pub subsets: usize,
    pub subset_size: usize,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        Self { subsets: 100, subset_size: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KidEstimate {
    pub mean: f64,
    pub std: f64,
    pub per_subset: Vec<f64>,
}

/// Rows sorted lexicographically, so subset selection ignores input order.
fn canonical_rows(x: &Tensor) -> Vec<&[f64]> {
    let d = x.shape()[1];
    let mut rows: Vec<&[f64]> = x.data().chunks(d).collect();
    rows.sort_by(|a, b| a.iter().zip(b.iter()).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    rows
}

/// Unbiased squared MMD with the kernel `(x·y/d + 1)³`, averaged over
/// random subsets.
pub fn kid(a: &Tensor, b: &Tensor, cfg: &KidConfig) -> Result<KidEstimate> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(validation("kid needs two [n, d] feature sets of equal d"));
    }
    let m = cfg.subset_size;
    if m < 2 || m > a.shape()[0] || m > b.shape()[0] || cfg.subsets == 0 {
        return Err(validation(format!(
            "subset size {m} must be ≥ 2 and ≤ both sample counts ({}, {})",
            a.shape()[0],
            b.shape()[0]
        )));
    }
    let d = a.shape()[1] as f64;
    let k = |x: &[f64], y: &[f64]| (x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / d + 1.0).powi(3);
    let (ra, rb) = (canonical_rows(a), canonical_rows(b));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ia: Vec<usize> = (0..ra.len()).collect();
    let mut ib: Vec<usize> = (0..rb.len()).collect();
    let mut per_subset = Vec::with_capacity(cfg.subsets);
    for _ in 0..cfg.subsets {
        ia.shuffle(&mut rng);
        ib.shuffle(&mut rng);
        let xs: Vec<&[f64]> = ia[..m].iter().map(|&i| ra[i]).collect();
        let ys: Vec<&[f64]> = ib[..m].iter().map(|&i| rb[i]).collect();
        let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    kxx += k(xs[i], xs[j]);
                    kyy += k(ys[i], ys[j]);
                }
                kxy += k(xs[i], ys[j]);
            }
        }
        let mf = m as f64;
        per_subset.push((kxx + kyy) / (mf * (mf - 1.0)) - 2.0 * kxy / (mf * mf));
    }
    let n = per_subset.len() as f64;
    let mean = per_subset.iter().sum::<f64>() / n;
    let std = if per_subset.len() > 1 {
        (per_subset.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(KidEstimate { mean, std, per_subset })
}

/// Frozen, seeded convolutional feature extractor standing in for a large
/// pretrained classifier. Values are only comparable within this crate.
pub struct Embedder {
    params: ParamStore,
    convs: [Conv; 3],
}

pub const EMBED_DIM: usize = 64;
const EMBED_RES: usize = 32;

impl Default for Embedder {
    fn default() -> Self {
        Self::new(0xE3B_ED)
    }
}

impl Embedder {
    pub fn new(seed: u64) -> Self {
        let convs = [
            Conv::new("embed.c0", 3, 16, 3, true),
            Conv::new("embed.c1", 16, 32, 3, true),
            Conv::new("embed.c2", 32, EMBED_DIM / 2, 3, true),
        ];
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &convs {
            c.init(&mut params, &mut rng, 1.0);
        }
        Self { params, convs }
    }

    /// `[B, 3, H, W]` → `[B, 64]`: per-channel spatial mean and standard
    /// deviation of the last feature map.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        if images.ndim() != 4 || images.shape()[1] != 3 {
            return Err(validation(format!("embedder needs [B, 3, H, W], got {:?}", images.shape())));
        }
        let b = images.shape()[0];
        let feat = no_grad(|| {
            let p = Bind::frozen(&self.params);
            let mut x = Var::constant(images.clone()).scale(2.0).add_scalar(-1.0).resize_bilinear(EMBED_RES, EMBED_RES);
            x = self.convs[0].forward(&p, &x).avg_pool(2);
            x = self.convs[1].forward(&p, &x).avg_pool(2);
            self.convs[2].forward(&p, &x).value().clone()
        });
        let (c, hw) = (feat.shape()[1], feat.shape()[2] * feat.shape()[3]);
        let mut out = Vec::with_capacity(b * 2 * c);
        for img in feat.data().chunks(c * hw) {
            let mut stds = Vec::with_capacity(c);
            for ch in img.chunks(hw) {
                let m = ch.iter().sum::<f64>() / hw as f64;
                out.push(m);
                stds.push((ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / hw as f64).sqrt());
            }
            out.extend(stds);
        }
        Ok(Tensor::new(&[b, 2 * c], out))
    }
}

/// Anything that turns `(z, c)` batches into `[B, 3, H, W]` images.
pub trait ImageGenerator {
    fn generate(&self, zs: &[LatentCode], poses: &[CameraPose]) -> Result<Tensor>;
}

impl ImageGenerator for Teacher {
    fn generate(&self, zs: &[LatentCode], poses: &[CameraPose]) -> Result<Tensor> {
        let bundles = self.forward_batch(zs, poses, None)?;
        let hr: Vec<Tensor> = bundles.iter().map(|b| b.hr.reshape(&prepend1(b.hr.shape()))).collect();
        Ok(Tensor::concat(&hr.iter().collect::<Vec<_>>(), 0))
    }
}

/// A student driven by its teacher's mapping network.
pub struct StudentGenerator<'a> {
    pub teacher: &'a Teacher,
    pub student: &'a Student,
}

impl ImageGenerator for StudentGenerator<'_> {
    fn generate(&self, zs: &[LatentCode], poses: &[CameraPose]) -> Result<Tensor> {
        let ws = self.teacher.map_batch(zs, poses)?;
        Ok(self.student.infer(&ws, poses)?.1)
    }
}

fn prepend1(s: &[usize]) -> Vec<usize> {
    let mut v = vec![1];
    v.extend_from_slice(s);
    v
}

/// Generates images in chunks of 8 and concatenates them.
pub fn generate_all(g: &dyn ImageGenerator, zs: &[LatentCode], poses: &[CameraPose]) -> Result<Tensor> {
    let mut parts = Vec::new();
    for (z, c) in zs.chunks(8).zip(poses.chunks(8)) {
        parts.push(g.generate(z, c)?);
    }
    if parts.is_empty() {
        return Err(validation("nothing to generate"));
    }
    Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub samples: usize,
    pub held_out: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Permutation control: pairs images with the wrong poses.
    pub shuffle_labels: bool,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self { samples: 512, held_out: 128, epochs: 200, batch_size: 32, lr: 2e-3, seed: 0, shuffle_labels: false }
    }
}

/// Small CNN regressing `(yaw, pitch)` from 16×16 pooled renders.
pub struct PoseRegressor {
    params: ParamStore,
    convs: [Conv; 2],
    fc: Linear,
    out: Linear,
    /// `(center, half-width)` of the yaw and pitch ranges.
    norm: [(f64, f64); 2],
    held_out_mse: Option<f64>,
}

const POSE_RES: usize = 16;

impl PoseRegressor {
    pub fn new(prior: &OrbitPrior, seed: u64) -> Self {
        let convs = [Conv::new("pose.c0", 3, 16, 3, true), Conv::new("pose.c1", 16, 32, 3, true)];
        let fc = Linear::new("pose.fc", 32 * 16, 64, true);
        let out = Linear::new("pose.out", 64, 2, false);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &convs {
            c.init(&mut params, &mut rng, 1.0);
        }
        fc.init(&mut params, &mut rng);
        out.init(&mut params, &mut rng);
        let n = |(a, b): (f64, f64)| ((a + b) / 2.0, ((b - a) / 2.0).max(1e-6));
        Self { params, convs, fc, out, norm: [n(prior.yaw_range), n(prior.pitch_range)], held_out_mse: None }
    }

    pub fn is_trained(&self) -> bool {
        self.held_out_mse.is_some()
    }

    /// Mean squared `(yaw, pitch)` error on the held-out split, in rad².
    pub fn held_out_mse(&self) -> Option<f64> {
        self.held_out_mse
    }

    fn pool(images: &Tensor) -> Result<Var> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(validation(format!("pose regressor needs [B, 3, H, W], got {s:?}")));
        }
        let x = Var::constant(images.clone());
        Ok(if s[2] == s[3] && s[2] % POSE_RES == 0 {
            x.avg_pool(s[2] / POSE_RES)
        } else {
            x.resize_bilinear(POSE_RES, POSE_RES)
        })
    }

    /// Normalized predictions `[B, 2]` (angles mapped from the prior ranges
    /// onto [-1, 1]).
    fn forward(&self, p: &Bind, x: &Var) -> Var {
        let b = x.shape()[0];
        let x = x.scale(2.0).add_scalar(-1.0);
        let x = self.convs[0].forward(p, &x).avg_pool(2);
        let x = self.convs[1].forward(p, &x).avg_pool(2);
        let x = self.fc.forward(p, &x.reshape(&[b, 32 * 16]));
        self.out.forward(p, &x)
    }

    fn predict_unchecked(&self, images: &Tensor) -> Result<Vec<(f64, f64)>> {
        let x = Self::pool(images)?;
        let y = no_grad(|| self.forward(&Bind::frozen(&self.params), &x).value().clone());
        let [yn, pn] = self.norm;
        Ok(y.data().chunks(2).map(|r| (yn.0 + r[0] * yn.1, pn.0 + r[1] * pn.1)).collect())
    }

    /// Regressed `(yaw, pitch)` per image.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<(f64, f64)>> {
        if !self.is_trained() {
            return Err(validation("pose regressor has not been trained"));
        }
        self.predict_unchecked(images)
    }
}

fn angle_mse(pred: &[(f64, f64)], truth: &[(f64, f64)]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(truth).map(|(p, t)| ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)) / 2.0).sum::<f64>() / n
}

/// Fits a pose regressor on teacher renders at prior-sampled poses and
/// records its held-out error.
pub fn train_pose_regressor(teacher: &Teacher, cfg: &RegressorConfig) -> Result<PoseRegressor> {
    if cfg.samples == 0 || cfg.held_out == 0 || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(validation("regressor sample counts, batch size and epochs must be positive"));
    }
    let prior = &teacher.config().prior;
    let lookat = prior.lookat;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.samples + cfg.held_out;
    let pp = PosePrior::Orbit(prior.clone());
    let zs: Vec<LatentCode> = (0..n).map(|_| LatentCode::sample(teacher.config().z_dim, &mut rng)).collect();
    let poses: Vec<CameraPose> = (0..n).map(|_| sample_pose(&pp, &mut rng)).collect::<Result<_>>()?;
    let images = generate_all(teacher, &zs, &poses)?;
    let pooled = no_grad(|| PoseRegressor::pool(&images).map(|v| v.value().clone()))?;
    let mut angles: Vec<(f64, f64)> = poses.iter().map(|p| p.orbit_angles(lookat)).collect();
    if cfg.shuffle_labels {
        angles[..cfg.samples].shuffle(&mut rng);
    }
    let mut reg = PoseRegressor::new(prior, cfg.seed ^ 0x9E37);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let per = 3 * POSE_RES * POSE_RES;
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut xd = Vec::with_capacity(chunk.len() * per);
            let mut yd = Vec::with_capacity(chunk.len() * 2);
            for &i in chunk {
                xd.extend_from_slice(&pooled.data()[i * per..(i + 1) * per]);
                let [yn, pn] = reg.norm;
                yd.push((angles[i].0 - yn.0) / yn.1);
                yd.push((angles[i].1 - pn.0) / pn.1);
            }
            let x = Var::constant(Tensor::new(&[chunk.len(), 3, POSE_RES, POSE_RES], xd));
            let y = Var::constant(Tensor::new(&[chunk.len(), 2], yd));
            let grads = {
                let p = Bind::trainable(&reg.params);
                let loss = reg.forward(&p, &x).sub(&y).square().mean();
                p.grads(&loss)
            };
            opt.step(&mut reg.params, &grads);
        }
    }
    let held = images.narrow(0, cfg.samples, cfg.held_out);
    let pred = reg.predict_unchecked(&held)?;
    let mse = angle_mse(&pred, &angles[cfg.samples..]);
    if !mse.is_finite() {
        return Err(Error::Numerical("pose regressor diverged".into()));
    }
    reg.held_out_mse = Some(mse);
    Ok(reg)
}

/// Probe grid over the prior's yaw/pitch ranges with fresh latents.
pub fn pose_probes(prior: &OrbitPrior, z_dim: usize, count: usize, seed: u64) -> Result<(Vec<LatentCode>, Vec<CameraPose>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zs = Vec::with_capacity(count);
    let mut poses = Vec::with_capacity(count);
    for _ in 0..count {
        zs.push(LatentCode::sample(z_dim, &mut rng));
        let yaw = rng.random_range(prior.yaw_range.0..=prior.yaw_range.1);
        let pitch = rng.random_range(prior.pitch_range.0..=prior.pitch_range.1);
        poses.push(prior.pose_at(yaw, pitch)?);
    }
    Ok((zs, poses))
}

/// Mean squared `(yaw, pitch)` error between the queried poses and the
/// regressed poses of the generated images.
pub fn pose_accuracy(
    generator: &dyn ImageGenerator,
    zs: &[LatentCode],
    poses: &[CameraPose],
    lookat: [f64; 3],
    regressor: &PoseRegressor,
) -> Result<f64> {
    if !regressor.is_trained() {
        return Err(validation("pose regressor has not been trained"));
    }
    if zs.len() != poses.len() || zs.is_empty() {
        return Err(validation("pose accuracy needs one pose per latent"));
    }
    let images = generate_all(generator, zs, poses)?;
    let pred = regressor.predict(&images)?;
    let truth: Vec<(f64, f64)> = poses.iter().map(|p| p.orbit_angles(lookat)).collect();
    Ok(angle_mse(&pred, &truth))
}
