//! The frozen volumetric teacher: mapping `(z, c) → w`, tri-plane synthesis,
//! volumetric rendering and super-resolution.

use std::path::Path;

use convrender_autograd::{no_grad, Bind, ParamStore, Tensor, Var};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, LatentCode, OrbitPrior, POSE_DIM};
use crate::checkpoint::Checkpoint;
use crate::error::{validation, Error, Result};
use crate::nn::{Backbone, MappingNet, ResidualInit, SuperRes, SynthesisNet};
use crate::render::{render_batch, RenderConfig};
use crate::triplane::{
    procedural_triplanes, BlobDecoder, FieldDecoder, MlpDecoder, ProceduralConfig, TriPlanes, RADIANCE_CHANNELS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Randomly initialized networks end to end.
    Random,
    /// Blob scenes derived from the latent, with an analytic decoder.
    Procedural,
}

/// Which pose the mapping network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseConditioning {
    /// The rendering pose.
    True,
    /// A fixed canonical pose, making `w` (and the field) pose-independent.
    CanonicalSwap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_depth: usize,
    pub plane_res: usize,
    pub plane_channels: usize,
    pub synthesis_width: usize,
    pub decoder_hidden: usize,
    pub bound: f64,
    pub lr_res: usize,
    pub sr_factor: usize,
    pub sr_hidden: usize,
    pub sr_residual: ResidualInit,
    pub render: RenderConfig,
    pub prior: OrbitPrior,
    pub procedural: ProceduralConfig,
    pub pose_conditioning: PoseConditioning,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Procedural,
            z_dim: 8,
            w_dim: 128,
            mapping_depth: 2,
            plane_res: 64,
            plane_channels: 32,
            synthesis_width: 32,
            decoder_hidden: 64,
            bound: 1.5,
            lr_res: 32,
            sr_factor: 2,
            sr_hidden: 16,
            sr_residual: ResidualInit::Random { gain: 0.1 },
            render: RenderConfig::default(),
            prior: OrbitPrior::default(),
            procedural: ProceduralConfig::default(),
            pose_conditioning: PoseConditioning::True,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.z_dim == 0 || self.w_dim == 0 || self.mapping_depth == 0 {
            return cfg("z_dim, w_dim and mapping_depth must be positive".into());
        }
        if self.kind == TeacherKind::Procedural {
            if self.z_dim < 6 {
                return cfg(format!("procedural teachers need z_dim ≥ 6, got {}", self.z_dim));
            }
            if self.plane_channels < self.procedural.channels() {
                return cfg(format!(
                    "{} blobs need plane_channels ≥ {}",
                    self.procedural.total_blobs(),
                    self.procedural.channels()
                ));
            }
        } else if self.plane_res < 4 || !self.plane_res.is_power_of_two() {
            return cfg(format!("plane_res must be a power of two ≥ 4, got {}", self.plane_res));
        }
        if self.plane_res < 2 || self.plane_channels == 0 || !(self.bound > 0.0) {
            return cfg("tri-plane resolution, channels and bound must be positive".into());
        }
        if self.lr_res == 0 || self.sr_factor == 0 || self.sr_hidden == 0 {
            return cfg("lr_res, sr_factor and sr_hidden must be positive".into());
        }
        self.render.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.prior.validate()
    }

    pub fn hr_res(&self) -> usize {
        self.lr_res * self.sr_factor
    }
}

/// Teacher outputs for one `(z, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderBundle {
    pub z: LatentCode,
    pub pose: CameraPose,
    pub w: Vec<f64>,
    /// `[32, h, w]`
    pub features: Tensor,
    /// `[3, h, w]`, channels 0..3 of `features`.
    pub lr: Tensor,
    /// `[3, H, W]`
    pub hr: Tensor,
}

pub struct Teacher {
    config: TeacherConfig,
    seed: u64,
    params: ParamStore,
    mapping: MappingNet,
    synthesis: Option<SynthesisNet>,
    decoder: Box<dyn FieldDecoder>,
    sr: SuperRes,
}

impl std::fmt::Debug for Teacher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Teacher").field("config", &self.config).field("seed", &self.seed).finish_non_exhaustive()
    }
}

fn build_nets(cfg: &TeacherConfig) -> Result<(MappingNet, Option<SynthesisNet>, SuperRes)> {
    let mapping = MappingNet::new("mapping", cfg.z_dim, POSE_DIM, cfg.w_dim, cfg.mapping_depth);
    let synthesis = match cfg.kind {
        TeacherKind::Random => Some(SynthesisNet::new(
            "synthesis",
            cfg.w_dim,
            3 * cfg.plane_channels,
            cfg.plane_res,
            cfg.synthesis_width,
            Backbone::Plain,
        )?),
        TeacherKind::Procedural => None,
    };
    let sr = SuperRes::new("sr", RADIANCE_CHANNELS, cfg.sr_hidden, cfg.sr_factor)?;
    Ok((mapping, synthesis, sr))
}

fn build_decoder(cfg: &TeacherConfig, params: &ParamStore) -> Result<Box<dyn FieldDecoder>> {
    Ok(match cfg.kind {
        TeacherKind::Random => Box::new(MlpDecoder::from_store(params, "decoder")?),
        TeacherKind::Procedural => Box::new(BlobDecoder::new(cfg.procedural.total_blobs(), cfg.plane_channels)?),
    })
}

impl Teacher {
    /// A freshly initialized teacher; all weights come from `seed`.
    pub fn new(config: TeacherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mapping, synthesis, sr) = build_nets(&config)?;
        let mut params = ParamStore::new();
        mapping.init(&mut params, &mut rng);
        if let Some(s) = &synthesis {
            s.init(&mut params, &mut rng);
            MlpDecoder::init(&mut params, "decoder", config.plane_channels, config.decoder_hidden, false, &mut rng);
        }
        sr.init(&mut params, &mut rng, config.sr_residual);
        let decoder = build_decoder(&config, &params)?;
        Ok(Self { config, seed, params, mapping, synthesis, decoder, sr })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn decoder(&self) -> &dyn FieldDecoder {
        self.decoder.as_ref()
    }

    pub fn super_res_net(&self) -> &SuperRes {
        &self.sr
    }

    pub fn mapping_net(&self) -> &MappingNet {
        &self.mapping
    }

    /// Replaces a parameter (used to build ablated teachers in tests and
    /// tools); fails on unknown names or shape changes.
    pub fn with_param(mut self, name: &str, value: Tensor) -> Result<Self> {
        let slot = self.params.get_mut(name).ok_or_else(|| validation(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(validation(format!("shape mismatch for {name}")));
        }
        *slot = value;
        self.decoder = build_decoder(&self.config, &self.params)?;
        Ok(self)
    }

    fn mapping_pose(&self, pose: &CameraPose) -> Result<[f64; POSE_DIM]> {
        Ok(match self.config.pose_conditioning {
            PoseConditioning::True => pose.flatten(),
            PoseConditioning::CanonicalSwap => self.config.prior.canonical()?.flatten(),
        })
    }

    /// Style codes for a batch: `[B, w_dim]`.
    pub fn map_batch(&self, zs: &[LatentCode], poses: &[CameraPose]) -> Result<Tensor> {
        if zs.len() != poses.len() || zs.is_empty() {
            return Err(validation("map_batch needs one pose per latent and a non-empty batch"));
        }
        let b = zs.len();
        let mut zd = Vec::with_capacity(b * self.config.z_dim);
        let mut cd = Vec::with_capacity(b * POSE_DIM);
        for (z, c) in zs.iter().zip(poses) {
            if z.dim() != self.config.z_dim {
                return Err(validation(format!("latent has {} dims, teacher expects {}", z.dim(), self.config.z_dim)));
            }
            zd.extend_from_slice(z.as_slice());
            cd.extend_from_slice(&self.mapping_pose(c)?);
        }
        let z = Var::constant(Tensor::new(&[b, self.config.z_dim], zd));
        let c = Var::constant(Tensor::new(&[b, POSE_DIM], cd));
        Ok(no_grad(|| self.mapping.forward(&Bind::frozen(&self.params), &z, &c).value().clone()))
    }

    pub fn map_latent(&self, z: &LatentCode, pose: &CameraPose) -> Result<Vec<f64>> {
        Ok(self.map_batch(std::slice::from_ref(z), std::slice::from_ref(pose))?.into_vec())
    }

    /// Differentiable plane synthesis for the network teacher:
    /// `[B, w_dim]` → `[B, 3·C, N, N]`.
    pub fn synthesis_forward(&self, p: &Bind, w: &Var) -> Result<Var> {
        let s = self
            .synthesis
            .as_ref()
            .ok_or_else(|| validation("procedural teachers have no synthesis network"))?;
        Ok(s.forward(p, w))
    }

    /// Tri-planes for one sample. Network teachers synthesize them from `w`;
    /// procedural teachers derive them from the latent's blob scene.
    pub fn synthesize_triplanes(&self, z: &LatentCode, w: &[f64]) -> Result<TriPlanes> {
        let cfg = &self.config;
        match cfg.kind {
            TeacherKind::Random => {
                if w.len() != cfg.w_dim {
                    return Err(validation(format!("style code has {} dims, expected {}", w.len(), cfg.w_dim)));
                }
                let wv = Var::constant(Tensor::new(&[1, cfg.w_dim], w.to_vec()));
                let t = no_grad(|| self.synthesis_forward(&Bind::frozen(&self.params), &wv))?;
                let n = cfg.plane_res;
                TriPlanes::from_chw(&t.value().reshape(&[3 * cfg.plane_channels, n, n]), cfg.plane_channels, cfg.bound)
            }
            TeacherKind::Procedural => {
                Ok(procedural_triplanes(z, &cfg.procedural, cfg.plane_res, cfg.plane_channels, cfg.bound)?.0)
            }
        }
    }

    /// `[B, 32, h, w]` → `[B, 3, H, W]`.
    pub fn super_resolve(&self, features: &Tensor) -> Result<Tensor> {
        let f = Var::constant(features.clone());
        no_grad(|| Ok(self.sr.forward(&Bind::frozen(&self.params), &f)?.value().clone()))
    }

    /// Full teacher pass for a batch. Rendering uses stratified jitter and
    /// random importance quantiles when `rng` is given, midpoints otherwise.
    pub fn forward_batch(
        &self,
        zs: &[LatentCode],
        poses: &[CameraPose],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<RenderBundle>> {
        let ws = self.map_batch(zs, poses)?;
        let wd = self.config.w_dim;
        let planes: Vec<TriPlanes> = zs
            .iter()
            .enumerate()
            .map(|(i, z)| self.synthesize_triplanes(z, &ws.data()[i * wd..(i + 1) * wd]))
            .collect::<Result<_>>()?;
        let refs: Vec<&TriPlanes> = planes.iter().collect();
        let renders = render_batch(&refs, self.decoder(), poses, self.config.lr_res, &self.config.render, rng)?;
        let (b, h) = (zs.len(), self.config.lr_res);
        let mut feats = Vec::with_capacity(b * RADIANCE_CHANNELS * h * h);
        for r in &renders {
            feats.extend_from_slice(&r.features);
        }
        let feats = Tensor::new(&[b, RADIANCE_CHANNELS, h, h], feats);
        let hr = self.super_resolve(&feats)?;
        let hh = self.config.hr_res();
        Ok((0..b)
            .map(|i| {
                let f = feats.narrow(0, i, 1).reshape(&[RADIANCE_CHANNELS, h, h]);
                RenderBundle {
                    z: zs[i].clone(),
                    pose: poses[i],
                    w: ws.data()[i * wd..(i + 1) * wd].to_vec(),
                    lr: f.narrow(0, 0, 3),
                    features: f,
                    hr: hr.narrow(0, i, 1).reshape(&[3, hh, hh]),
                }
            })
            .collect())
    }

    pub fn forward(&self, z: &LatentCode, pose: &CameraPose, rng: Option<&mut dyn RngCore>) -> Result<RenderBundle> {
        Ok(self.forward_batch(std::slice::from_ref(z), std::slice::from_ref(pose), rng)?.remove(0))
    }

    /// Multiply-accumulates per rendered image, dominated by per-sample
    /// field decoding.
    pub fn macs_per_image(&self) -> u64 {
        let cfg = &self.config;
        let pixels = (cfg.lr_res * cfg.lr_res) as u64;
        let samples = (cfg.render.n_coarse + 2 * cfg.render.n_fine) as u64;
        let lookup = 3 * 4 * cfg.plane_channels as u64;
        let synth = self.synthesis.as_ref().map_or(0, SynthesisNet::macs);
        self.mapping.macs() + synth + pixels * samples * (lookup + self.decoder.macs_per_point())
            + self.sr.macs(cfg.lr_res, cfg.lr_res)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new("teacher", self.seed, serde_json::to_value(&self.config)?);
        c.push_store("param.", &self.params);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("teacher")?;
        let config: TeacherConfig = serde_json::from_value(c.config.clone())?;
        config.validate()?;
        let (mapping, synthesis, sr) = build_nets(&config)?;
        let params = c.store("param.");
        let mut expected = Teacher::new(config.clone(), c.seed)?.params;
        for (name, t) in params.iter() {
            match expected.get(name) {
                Some(e) if e.shape() == t.shape() => {}
                _ => return Err(Error::Corrupt(format!("unexpected parameter {name}"))),
            }
        }
        for name in expected.names().cloned().collect::<Vec<_>>() {
            if params.get(&name).is_none() {
                return Err(Error::Corrupt(format!("missing parameter {name}")));
            }
        }
        expected = params;
        let decoder = build_decoder(&config, &expected)?;
        Ok(Self { config, seed: c.seed, params: expected, mapping, synthesis, decoder, sr })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{sample_pose, PosePrior};

    pub(crate) fn tiny(kind: TeacherKind) -> TeacherConfig {
        TeacherConfig {
            kind,
            w_dim: 16,
            plane_res: 16,
            plane_channels: 12,
            synthesis_width: 8,
            decoder_hidden: 16,
            lr_res: 8,
            sr_hidden: 4,
            render: RenderConfig { n_coarse: 8, n_fine: 8, ..RenderConfig::default() },
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn mapping_is_deterministic_and_pose_sensitive() {
        let t = Teacher::new(tiny(TeacherKind::Random), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = LatentCode::sample(8, &mut rng);
        let prior = PosePrior::Orbit(t.config().prior.clone());
        let (c1, c2) = (sample_pose(&prior, &mut rng).unwrap(), sample_pose(&prior, &mut rng).unwrap());
        let w1 = t.map_latent(&z, &c1).unwrap();
        assert_eq!(w1, t.map_latent(&z, &c1).unwrap());
        let w2 = t.map_latent(&z, &c2).unwrap();
        assert!(w1.iter().zip(&w2).map(|(a, b)| (a - b).powi(2)).sum::<f64>() > 0.0);
    }

    #[test]
    fn bundle_contract_holds() {
        for kind in [TeacherKind::Random, TeacherKind::Procedural] {
            let t = Teacher::new(tiny(kind), 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let z = LatentCode::sample(8, &mut rng);
            let pose = t.config().prior.canonical().unwrap();
            let b = t.forward(&z, &pose, None).unwrap();
            assert_eq!(b.features.shape(), &[32, 8, 8]);
            assert_eq!(b.hr.shape(), &[3, 16, 16]);
            assert_eq!(b.lr.data(), &b.features.data()[..3 * 64]);
            assert_eq!(b, t.forward(&z, &pose, None).unwrap());
        }
    }

    #[test]
    fn super_resolve_rejects_wrong_channels() {
        let t = Teacher::new(tiny(TeacherKind::Random), 0).unwrap();
        assert!(t.super_resolve(&Tensor::zeros(&[1, 31, 8, 8])).is_err());
        assert_eq!(t.super_resolve(&Tensor::zeros(&[2, 32, 8, 8])).unwrap().shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = Teacher::new(tiny(TeacherKind::Random), 5).unwrap();
        let back = Teacher::from_checkpoint(&t.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.params(), t.params());
        assert_eq!(back.config(), t.config());
        assert_eq!(back.seed(), 5);
    }
}
