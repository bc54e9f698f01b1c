//! Tri-plane feature fields, point decoders and the procedural blob scenes
//! used as an analytically checkable teacher.

use convrender_autograd::{softplus_scalar, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::camera::{LatentCode, Vec3};
use crate::error::{validation, Result};

/// Number of radiance channels produced per sample (first three are RGB).
pub const RADIANCE_CHANNELS: usize = 32;

/// Plane axes: XY, XZ, YZ. Each entry gives the world axes that index the
/// plane's (column, row).
const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Three axis-aligned `N×N×C` feature planes over the cube
/// `[-bound, bound]³`. Grid knots sit at `-bound + 2·bound·k/(N-1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlanes {
    res: usize,
    channels: usize,
    bound: f64,
    /// `[plane][row][col][channel]`
    data: Vec<f64>,
}

/// Bilinear footprint of one plane lookup: four corner offsets and weights,
/// plus the weight derivatives along the plane's two axes.
struct Footprint {
    idx: [usize; 4],
    w: [f64; 4],
    dw_da: [f64; 4],
    dw_db: [f64; 4],
}

impl TriPlanes {
    pub fn new(res: usize, channels: usize, bound: f64, data: Vec<f64>) -> Result<Self> {
        if res < 2 || channels == 0 {
            return Err(validation(format!("tri-plane resolution must be ≥ 2 and channels ≥ 1 (got {res}, {channels})")));
        }
        if !(bound > 0.0) {
            return Err(validation(format!("scene bound must be positive, got {bound}")));
        }
        if data.len() != 3 * res * res * channels {
            return Err(validation(format!(
                "tri-plane data has {} values, expected 3·{res}·{res}·{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(validation("tri-plane features must be finite"));
        }
        Ok(Self { res, channels, bound, data })
    }

    pub fn zeros(res: usize, channels: usize, bound: f64) -> Self {
        Self::new(res, channels, bound, vec![0.0; 3 * res * res * channels]).expect("valid zero planes")
    }

    /// Builds planes from an `N`-batch-free `[3·C, N, N]` tensor whose channel
    /// `p·C + c` holds channel `c` of plane `p`.
    pub fn from_chw(t: &Tensor, channels: usize, bound: f64) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 * channels || s[1] != s[2] {
            return Err(validation(format!("expected [3·{channels}, N, N] plane tensor, got {:?}", s)));
        }
        let n = s[1];
        let src = t.data();
        let mut data = vec![0.0; 3 * n * n * channels];
        for p in 0..3 {
            for c in 0..channels {
                let plane = &src[(p * channels + c) * n * n..(p * channels + c + 1) * n * n];
                for (rc, v) in plane.iter().enumerate() {
                    data[(p * n * n + rc) * channels + c] = *v;
                }
            }
        }
        Self::new(n, channels, bound, data)
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Offset of the feature vector at `(plane, row, col)`.
    pub fn offset(&self, plane: usize, row: usize, col: usize) -> usize {
        ((plane * self.res + row) * self.res + col) * self.channels
    }

    /// World coordinate of grid knot `k`.
    pub fn knot(&self, k: usize) -> f64 {
        -self.bound + 2.0 * self.bound * k as f64 / (self.res - 1) as f64
    }

    /// Continuous grid coordinate with border clamping; the second value is
    /// d(grid)/d(world), zero when clamped.
    fn grid_coord(&self, x: f64) -> (f64, f64) {
        let scale = (self.res - 1) as f64 / (2.0 * self.bound);
        let g = (x + self.bound) * scale;
        let hi = (self.res - 1) as f64;
        if g <= 0.0 {
            (0.0, 0.0)
        } else if g >= hi {
            (hi, 0.0)
        } else {
            (g, scale)
        }
    }

    fn footprint(&self, plane: usize, x: Vec3) -> Footprint {
        let (ax, bx) = PLANE_AXES[plane];
        let (ga, sa) = self.grid_coord(x[ax]);
        let (gb, sb) = self.grid_coord(x[bx]);
        let last = self.res - 1;
        let c0 = (ga.floor() as usize).min(last - 1);
        let r0 = (gb.floor() as usize).min(last - 1);
        let (ta, tb) = (ga - c0 as f64, gb - r0 as f64);
        Footprint {
            idx: [
                self.offset(plane, r0, c0),
                self.offset(plane, r0, c0 + 1),
                self.offset(plane, r0 + 1, c0),
                self.offset(plane, r0 + 1, c0 + 1),
            ],
            w: [(1.0 - ta) * (1.0 - tb), ta * (1.0 - tb), (1.0 - ta) * tb, ta * tb],
            dw_da: [-(1.0 - tb) * sa, (1.0 - tb) * sa, -tb * sa, tb * sa],
            dw_db: [-(1.0 - ta) * sb, -ta * sb, (1.0 - ta) * sb, ta * sb],
        }
    }

    /// Sum of the bilinear lookups of `x` in the three planes, written into
    /// `out` (length C).
    pub fn query_into(&self, x: Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        let c = self.channels;
        for p in 0..3 {
            let fp = self.footprint(p, x);
            for k in 0..4 {
                let w = fp.w[k];
                if w == 0.0 {
                    continue;
                }
                let src = &self.data[fp.idx[k]..fp.idx[k] + c];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }

    pub fn query(&self, x: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.query_into(x, &mut out);
        out
    }

    /// Backpropagates `grad_out` (d loss / d query(x)) into `grad_planes`
    /// (accumulated, same layout as `data`) and returns d loss / d x.
    pub fn query_backward(&self, x: Vec3, grad_out: &[f64], grad_planes: &mut [f64]) -> Vec3 {
        assert_eq!(grad_out.len(), self.channels);
        assert_eq!(grad_planes.len(), self.data.len());
        let c = self.channels;
        let mut gx = [0.0; 3];
        for p in 0..3 {
            let (ax, bx) = PLANE_AXES[p];
            let fp = self.footprint(p, x);
            for k in 0..4 {
                let base = fp.idx[k];
                let mut dot = 0.0;
                for ch in 0..c {
                    grad_planes[base + ch] += fp.w[k] * grad_out[ch];
                    dot += self.data[base + ch] * grad_out[ch];
                }
                gx[ax] += fp.dw_da[k] * dot;
                gx[bx] += fp.dw_db[k] * dot;
            }
        }
        gx
    }
}

/// Free-function form of [`TriPlanes::query`].
pub fn query_triplane(planes: &TriPlanes, x: Vec3) -> Vec<f64> {
    planes.query(x)
}

/// Decoded field value at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub density: f64,
    pub radiance: [f64; RADIANCE_CHANNELS],
}

/// Maps aggregated tri-plane features to density and radiance.
pub trait FieldDecoder: Send + Sync {
    fn in_channels(&self) -> usize;

    /// Decodes `P` feature rows (`feats`: P×C) into densities (P) and
    /// radiance (P×32).
    fn decode_batch(&self, feats: &[f64], density: &mut [f64], radiance: &mut [f64]);

    fn decode(&self, feats: &[f64]) -> FieldSample {
        let mut d = [0.0];
        let mut r = [0.0; RADIANCE_CHANNELS];
        self.decode_batch(feats, &mut d, &mut r);
        FieldSample { density: d[0], radiance: r }
    }

    /// Multiply-accumulates per decoded point.
    fn macs_per_point(&self) -> u64;
}

pub fn decode_field(features: &[f64], decoder: &dyn FieldDecoder) -> FieldSample {
    decoder.decode(features)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One-hidden-layer MLP: softplus hidden units, softplus density and
/// sigmoid radiance.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDecoder {
    in_channels: usize,
    hidden: usize,
    /// `hidden × C`
    w1: Tensor,
    b1: Tensor,
    /// `(1 + 32) × hidden`; row 0 is density.
    w2: Tensor,
    b2: Tensor,
}

impl MlpDecoder {
    pub const OUT: usize = 1 + RADIANCE_CHANNELS;

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .get(&format!("{prefix}.{n}"))
                .cloned()
                .ok_or_else(|| validation(format!("decoder parameter {prefix}.{n} missing")))
        };
        let (w1, b1, w2, b2) = (get("fc1.weight")?, get("fc1.bias")?, get("fc2.weight")?, get("fc2.bias")?);
        let (hidden, in_channels) = (w1.shape()[0], w1.shape()[1]);
        if b1.shape() != [hidden] || w2.shape() != [Self::OUT, hidden] || b2.shape() != [Self::OUT] {
            return Err(validation("decoder parameter shapes are inconsistent"));
        }
        Ok(Self { in_channels, hidden, w1, b1, w2, b2 })
    }

    /// Registers decoder parameters; the output layer starts at zero when
    /// `zero_output` is set.
    pub fn init<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        zero_output: bool,
        rng: &mut R,
    ) {
        let s1 = 1.0 / (in_channels as f64).sqrt();
        store.insert(format!("{prefix}.fc1.weight"), Tensor::randn(&[hidden, in_channels], rng).scale(s1));
        store.insert(format!("{prefix}.fc1.bias"), Tensor::zeros(&[hidden]));
        let w2 = if zero_output {
            Tensor::zeros(&[Self::OUT, hidden])
        } else {
            Tensor::randn(&[Self::OUT, hidden], rng).scale(1.0 / (hidden as f64).sqrt())
        };
        store.insert(format!("{prefix}.fc2.weight"), w2);
        store.insert(format!("{prefix}.fc2.bias"), Tensor::zeros(&[Self::OUT]));
    }
}

impl FieldDecoder for MlpDecoder {
    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn decode_batch(&self, feats: &[f64], density: &mut [f64], radiance: &mut [f64]) {
        let p = density.len();
        assert_eq!(feats.len(), p * self.in_channels);
        assert_eq!(radiance.len(), p * RADIANCE_CHANNELS);
        if p == 0 {
            return;
        }
        let f = Tensor::new(&[p, self.in_channels], feats.to_vec());
        let mut h = f.matmul_t(false, &self.w1, true);
        let b1 = self.b1.data();
        for row in h.data_mut().chunks_mut(self.hidden) {
            for (v, b) in row.iter_mut().zip(b1) {
                *v = softplus_scalar(*v + b);
            }
        }
        let o = h.matmul_t(false, &self.w2, true);
        let b2 = self.b2.data();
        for (i, row) in o.data().chunks(Self::OUT).enumerate() {
            density[i] = softplus_scalar(row[0] + b2[0]);
            let dst = &mut radiance[i * RADIANCE_CHANNELS..(i + 1) * RADIANCE_CHANNELS];
            for (k, d) in dst.iter_mut().enumerate() {
                *d = sigmoid(row[k + 1] + b2[k + 1]);
            }
        }
    }

    fn macs_per_point(&self) -> u64 {
        (self.in_channels * self.hidden + self.hidden * Self::OUT) as u64
    }
}

/// Isotropic Gaussian density blob with a constant color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Vec3,
    pub radius: f64,
    pub color: Vec3,
    /// Peak density.
    pub amplitude: f64,
}

/// Analytic description of a procedural scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobScene {
    pub blobs: Vec<Blob>,
}

/// How latents are mapped to blob parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralConfig {
    pub blobs: usize,
    pub center_extent: f64,
    pub radius_range: (f64, f64),
    pub amplitude: f64,
    /// Seed of the fixed latent-to-parameter mixing matrix.
    pub mixing_seed: u64,
    /// Latent-independent blobs appended to every scene. They play the role
    /// of facial landmarks: without them a blob scene's pose is ambiguous.
    #[serde(default)]
    pub landmarks: Vec<Blob>,
}

impl Default for ProceduralConfig {
    fn default() -> Self {
        Self {
            blobs: 2,
            center_extent: 0.3,
            radius_range: (0.1, 0.18),
            amplitude: 20.0,
            mixing_seed: 7,
            landmarks: vec![Blob { center: [0.0, 0.0, 0.5], radius: 0.07, color: [0.95, 0.9, 0.15], amplitude: 30.0 }],
        }
    }
}

impl ProceduralConfig {
    /// Channels a tri-plane needs to encode the scene: one log-density and
    /// three color channels per blob.
    pub fn channels(&self) -> usize {
        4 * self.total_blobs()
    }

    pub fn total_blobs(&self) -> usize {
        self.blobs + self.landmarks.len()
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    // Abramowitz–Stegun 7.1.26 on erf; max error 1.5e-7
    let t = 1.0 / (1.0 + 0.3275911 * x.abs() / std::f64::consts::SQRT_2);
    let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-(x * x) / 2.0).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

impl BlobScene {
    /// Deterministic latent → scene map: each of the 7 parameters per blob is
    /// `Φ(a·z)` for a fixed unit-norm mixing row `a`, rescaled into range.
    pub fn from_latent(latent: &LatentCode, cfg: &ProceduralConfig) -> Result<Self> {
        use rand::SeedableRng;
        if latent.dim() < 6 {
            return Err(validation(format!("procedural scenes need d_z ≥ 6, got {}", latent.dim())));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.mixing_seed);
        let mix = Tensor::randn(&[7 * cfg.blobs, latent.dim()], &mut rng);
        let z = latent.as_slice();
        let u: Vec<f64> = mix
            .data()
            .chunks(latent.dim())
            .map(|row| {
                let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                std_normal_cdf(row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n)
            })
            .collect();
        let lerp = |lo: f64, hi: f64, t: f64| lo + (hi - lo) * t;
        let e = cfg.center_extent;
        let mut blobs: Vec<Blob> = u
            .chunks(7)
            .map(|p| Blob {
                center: [lerp(-e, e, p[0]), lerp(-e, e, p[1]), lerp(-e, e, p[2])],
                radius: lerp(cfg.radius_range.0, cfg.radius_range.1, p[3]),
                color: [lerp(0.1, 0.95, p[4]), lerp(0.1, 0.95, p[5]), lerp(0.1, 0.95, p[6])],
                amplitude: cfg.amplitude,
            })
            .collect();
        blobs.extend(cfg.landmarks.iter().cloned());
        Ok(Self { blobs })
    }

    pub fn density(&self, x: Vec3) -> f64 {
        self.blobs
            .iter()
            .map(|b| {
                let d2: f64 = (0..3).map(|i| (x[i] - b.center[i]).powi(2)).sum();
                b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp()
            })
            .sum()
    }

    /// Encodes the scene into planes. Channel `k` of every plane holds a third
    /// of blob `k`'s log-density, split so the three-plane sum is exact for
    /// the quadratic exponent; channels `K + 3k..K + 3k + 3` hold a third of
    /// the blob color.
    pub fn to_triplanes(&self, res: usize, channels: usize, bound: f64) -> Result<TriPlanes> {
        let k = self.blobs.len();
        if channels < 4 * k {
            return Err(validation(format!("{} blobs need ≥ {} plane channels, got {channels}", k, 4 * k)));
        }
        let mut planes = TriPlanes::zeros(res, channels, bound);
        for (p, &(ax, bx)) in PLANE_AXES.iter().enumerate() {
            for row in 0..res {
                let b = planes.knot(row);
                for col in 0..res {
                    let a = planes.knot(col);
                    let off = planes.offset(p, row, col);
                    for (i, blob) in self.blobs.iter().enumerate() {
                        let inv = 1.0 / (4.0 * blob.radius * blob.radius);
                        let q = (a - blob.center[ax]).powi(2) + (b - blob.center[bx]).powi(2);
                        planes.data[off + i] = blob.amplitude.ln() / 3.0 - q * inv;
                        for c in 0..3 {
                            planes.data[off + k + 3 * i + c] = blob.color[c] / 3.0;
                        }
                    }
                }
            }
        }
        Ok(planes)
    }
}

/// Tri-planes plus the analytic scene they encode.
pub fn procedural_triplanes(
    latent: &LatentCode,
    cfg: &ProceduralConfig,
    res: usize,
    channels: usize,
    bound: f64,
) -> Result<(TriPlanes, BlobScene)> {
    let scene = BlobScene::from_latent(latent, cfg)?;
    let planes = scene.to_triplanes(res, channels, bound)?;
    Ok((planes, scene))
}

/// Analytic decoder for blob planes: density is `Σ_k exp(f_k)`, RGB is the
/// density-weighted blob color, and the remaining radiance channels are
/// fixed smooth functions of the per-blob mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobDecoder {
    blobs: usize,
    in_channels: usize,
}

impl BlobDecoder {
    pub fn new(blobs: usize, in_channels: usize) -> Result<Self> {
        if in_channels < 4 * blobs || blobs == 0 {
            return Err(validation("blob decoder needs ≥ 1 blob and 4 channels per blob"));
        }
        Ok(Self { blobs, in_channels })
    }
}

impl FieldDecoder for BlobDecoder {
    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn decode_batch(&self, feats: &[f64], density: &mut [f64], radiance: &mut [f64]) {
        let k = self.blobs;
        let mut parts = vec![0.0; k];
        for (i, row) in feats.chunks(self.in_channels).enumerate() {
            let mut total = 0.0;
            for b in 0..k {
                parts[b] = row[b].min(30.0).exp();
                total += parts[b];
            }
            density[i] = total;
            let dst = &mut radiance[i * RADIANCE_CHANNELS..(i + 1) * RADIANCE_CHANNELS];
            dst.fill(0.0);
            if total <= 0.0 {
                continue;
            }
            for b in 0..k {
                let frac = parts[b] / total;
                let col = &row[k + 3 * b..k + 3 * b + 3];
                for c in 0..3 {
                    dst[c] += frac * col[c];
                }
                for (j, d) in dst.iter_mut().enumerate().skip(3) {
                    let phase = 1.3 * j as f64 + 2.1 * col[0] - 1.7 * col[1] + 2.9 * col[2] + 0.8 * b as f64;
                    *d += frac * (0.5 + 0.5 * phase.sin());
                }
            }
        }
    }

    fn macs_per_point(&self) -> u64 {
        (self.blobs * (RADIANCE_CHANNELS + 4)) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_planes(seed: u64, res: usize, c: usize) -> TriPlanes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Tensor::randn(&[3 * res * res * c], &mut rng).into_vec();
        TriPlanes::new(res, c, 1.0, data).unwrap()
    }

    /// Independent 4-corner bilinear lookup per plane.
    fn brute_force(planes: &TriPlanes, x: Vec3) -> Vec<f64> {
        let n = planes.res();
        let c = planes.channels();
        let mut out = vec![0.0; c];
        for (p, (ax, bx)) in [(0usize, 1usize), (0, 2), (1, 2)].into_iter().enumerate() {
            let to_grid = |v: f64| ((v + 1.0) / 2.0 * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let (ga, gb) = (to_grid(x[ax]), to_grid(x[bx]));
            let (c0, r0) = ((ga.floor() as usize).min(n - 2), (gb.floor() as usize).min(n - 2));
            let (ta, tb) = (ga - c0 as f64, gb - r0 as f64);
            for (dr, dc, w) in [(0, 0, (1.0 - ta) * (1.0 - tb)), (0, 1, ta * (1.0 - tb)), (1, 0, (1.0 - ta) * tb), (1, 1, ta * tb)] {
                let base = ((p * n + r0 + dr) * n + c0 + dc) * c;
                for ch in 0..c {
                    out[ch] += w * planes.data()[base + ch];
                }
            }
        }
        out
    }

    #[test]
    fn knot_lookup_sums_stored_vectors() {
        let planes = random_planes(1, 5, 3);
        let x = [planes.knot(1), planes.knot(3), planes.knot(4)];
        let got = planes.query(x);
        for ch in 0..3 {
            let want = planes.data()[planes.offset(0, 3, 1) + ch]
                + planes.data()[planes.offset(1, 4, 1) + ch]
                + planes.data()[planes.offset(2, 4, 3) + ch];
            assert!((got[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_planes_give_zero() {
        let planes = TriPlanes::zeros(8, 4, 1.0);
        assert_eq!(planes.query([0.3, -0.7, 2.0]), vec![0.0; 4]);
    }

    #[test]
    fn cell_midpoints_match_brute_force() {
        let planes = random_planes(2, 9, 4);
        let h = planes.knot(1) - planes.knot(0);
        let x = [planes.knot(2) + h / 2.0, planes.knot(5) + h / 2.0, planes.knot(7) + h / 2.0];
        let (a, b) = (planes.query(x), brute_force(&planes, x));
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_bounds_clamps_to_border() {
        let planes = random_planes(3, 6, 2);
        assert_eq!(planes.query([5.0, -9.0, 1.0]), planes.query([1.0, -1.0, 1.0]));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let planes = random_planes(4, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gout: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = [0.13, -0.41, 0.72];
        let loss = |pl: &TriPlanes, x: Vec3| pl.query(x).iter().zip(&gout).map(|(a, b)| a * b).sum::<f64>();
        let mut gp = vec![0.0; planes.data().len()];
        let gx = planes.query_backward(x, &gout, &mut gp);
        let num_x = convrender_autograd::gradcheck::numeric_gradient(&x, 1e-6, |p| loss(&planes, [p[0], p[1], p[2]]));
        assert!(convrender_autograd::gradcheck::relative_error(&gx, &num_x) < 1e-6);
        let num_p = convrender_autograd::gradcheck::numeric_gradient(planes.data(), 1e-6, |d| {
            loss(&TriPlanes::new(6, 3, 1.0, d.to_vec()).unwrap(), x)
        });
        assert!(convrender_autograd::gradcheck::relative_error(&gp, &num_p) < 1e-6);
    }

    #[test]
    fn zero_output_mlp_gives_closed_form_activations() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        MlpDecoder::init(&mut store, "dec", 8, 64, true, &mut rng);
        let dec = MlpDecoder::from_store(&store, "dec").unwrap();
        let s = decode_field(&[0.0; 8], &dec);
        assert!((s.density - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(s.radiance[..3].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mlp_density_is_nonnegative_and_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        MlpDecoder::init(&mut store, "dec", 8, 64, false, &mut rng);
        let dec = MlpDecoder::from_store(&store, "dec").unwrap();
        let n = 10_000;
        let feats = Tensor::randn(&[n, 8], &mut rng).scale(5.0).into_vec();
        let mut d = vec![0.0; n];
        let mut r = vec![0.0; n * RADIANCE_CHANNELS];
        dec.decode_batch(&feats, &mut d, &mut r);
        assert!(d.iter().all(|&v| v >= 0.0));
        assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = dec.decode(&feats[..8]);
        assert_eq!(again.density, d[0]);
        assert_eq!(&again.radiance[..], &r[..RADIANCE_CHANNELS]);
    }

    #[test]
    fn procedural_planes_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = LatentCode::sample(8, &mut rng);
        let cfg = ProceduralConfig::default();
        let (a, sa) = procedural_triplanes(&z, &cfg, 32, 12, 1.0).unwrap();
        let (b, sb) = procedural_triplanes(&z, &cfg, 32, 12, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(procedural_triplanes(&LatentCode(vec![0.0; 5]), &cfg, 32, 12, 1.0).is_err());
    }

    #[test]
    fn centered_blob_density_falls_off() {
        let scene = BlobScene {
            blobs: vec![Blob { center: [0.0; 3], radius: 0.2, color: [1.0, 0.5, 0.2], amplitude: 20.0 }],
        };
        let planes = scene.to_triplanes(64, 4, 1.0).unwrap();
        let dec = BlobDecoder::new(1, 4).unwrap();
        let at = |x: Vec3| dec.decode(&planes.query(x)).density;
        assert!(at([0.0; 3]) > at([0.4, 0.0, 0.0]));
        let s = dec.decode(&planes.query([0.0; 3]));
        assert!((s.radiance[0] - 1.0).abs() < 1e-12 && (s.radiance[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn field_density_tracks_analytic_blob_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = ProceduralConfig::default();
        let z = LatentCode::sample(8, &mut rng);
        let (planes, scene) = procedural_triplanes(&z, &cfg, 64, 12, 1.0).unwrap();
        let dec = BlobDecoder::new(cfg.total_blobs(), 12).unwrap();
        for _ in 0..100 {
            let x = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
            let got = dec.decode(&planes.query(x)).density;
            let want = scene.density(x);
            assert!((got - want).abs() <= 0.1 * want, "{got} vs {want} at {x:?}");
        }
    }

    proptest! {
        #[test]
        fn query_is_linear_in_plane_contents(alpha in -3.0f64..3.0, beta in -3.0f64..3.0,
                                              x in -1.5f64..1.5, y in -1.5f64..1.5, z in -1.5f64..1.5) {
            let a = random_planes(10, 5, 3);
            let b = random_planes(11, 5, 3);
            let mix: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| alpha * p + beta * q).collect();
            let m = TriPlanes::new(5, 3, 1.0, mix).unwrap();
            let lhs = m.query([x, y, z]);
            let (qa, qb) = (a.query([x, y, z]), b.query([x, y, z]));
            for i in 0..3 {
                prop_assert!((lhs[i] - (alpha * qa[i] + beta * qb[i])).abs() < 1e-10);
            }
        }
    }
}
