//! The convolutional student: `(w, c) → w'` mapping, style-modulated
//! feature synthesis at the low resolution, and a super-resolution head
//! initialized from the teacher's.

use std::path::Path;

use convrender_autograd::{no_grad, Bind, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, PoseNormalizer, POSE_DIM};
use crate::checkpoint::Checkpoint;
use crate::error::{validation, Error, Result};
use crate::nn::{Backbone, MappingNet, ResidualInit, SuperRes, SynthesisNet};
use crate::teacher::{Teacher, TeacherConfig};
use crate::triplane::RADIANCE_CHANNELS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub mapping_depth: usize,
    pub synthesis_width: usize,
    pub backbone: Backbone,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { mapping_depth: 2, synthesis_width: 32, backbone: Backbone::Filtered }
    }
}

/// Student predictions as graph nodes.
#[derive(Clone, Debug)]
pub struct StudentOutput {
    /// `[B, 32, h, w]`
    pub features: Var,
    /// `[B, 3, h, w]`
    pub lr: Var,
    /// `[B, 3, H, W]`
    pub hr: Var,
}

/// Shapes and sizes the student inherits from its teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub student: StudentConfig,
    pub teacher: TeacherConfig,
}

pub struct Student {
    spec: StudentSpec,
    params: ParamStore,
    mapping: MappingNet,
    synthesis: SynthesisNet,
    sr: SuperRes,
    pose_norm: PoseNormalizer,
}

impl std::fmt::Debug for Student {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Student").field("spec", &self.spec).finish_non_exhaustive()
    }
}

type Nets = (MappingNet, SynthesisNet, SuperRes, PoseNormalizer);

fn build(spec: &StudentSpec) -> Result<Nets> {
    let (s, t) = (&spec.student, &spec.teacher);
    if s.mapping_depth == 0 || s.synthesis_width == 0 {
        return Err(Error::Config("student mapping_depth and synthesis_width must be positive".into()));
    }
    let mapping = MappingNet::new("mapping", t.w_dim, POSE_DIM, t.w_dim, s.mapping_depth);
    let synthesis = SynthesisNet::new("synthesis", t.w_dim, RADIANCE_CHANNELS, t.lr_res, s.synthesis_width, s.backbone)
        .map_err(|e| Error::Config(e.to_string()))?;
    let sr = SuperRes::new("sr", RADIANCE_CHANNELS, t.sr_hidden, t.sr_factor)?;
    let pose_norm = PoseNormalizer::from_prior(&t.prior)?;
    Ok((mapping, synthesis, sr, pose_norm))
}

impl Student {
    /// Randomly initialized student shaped after `teacher` (its SR head is
    /// random too until [`Student::init_from_teacher`]).
    pub fn new(config: StudentConfig, teacher: &TeacherConfig, seed: u64) -> Result<Self> {
        let spec = StudentSpec { student: config, teacher: teacher.clone() };
        let (mapping, synthesis, sr, pose_norm) = build(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        mapping.init(&mut params, &mut rng);
        synthesis.init(&mut params, &mut rng);
        sr.init(&mut params, &mut rng, ResidualInit::Zero);
        Ok(Self { spec, params, mapping, synthesis, sr, pose_norm })
    }

    /// New student whose super-resolution head is a copy of the teacher's.
    pub fn from_teacher(config: StudentConfig, teacher: &Teacher, seed: u64) -> Result<Self> {
        let mut s = Self::new(config, teacher.config(), seed)?;
        s.init_from_teacher(teacher)?;
        Ok(s)
    }

    /// Copies every super-resolution parameter from the teacher.
    pub fn init_from_teacher(&mut self, teacher: &Teacher) -> Result<()> {
        let names: Vec<String> = self.params.with_prefix("sr.").map(|(n, _)| n.clone()).collect();
        for name in &names {
            let src = teacher
                .params()
                .get(name)
                .ok_or_else(|| validation(format!("teacher has no super-resolution parameter {name}")))?;
            if src.shape() != self.params.expect(name).shape() {
                return Err(validation(format!("super-resolution shape mismatch for {name}")));
            }
        }
        if teacher.params().with_prefix("sr.").count() != names.len() {
            return Err(validation("teacher and student super-resolution heads differ"));
        }
        for name in names {
            *self.params.get_mut(&name).expect("checked above") = teacher.params().expect(&name).clone();
        }
        Ok(())
    }

    pub fn spec(&self) -> &StudentSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn pose_normalizer(&self) -> &PoseNormalizer {
        &self.pose_norm
    }

    /// Normalized flat poses as a `[B, 25]` tensor.
    pub fn pose_tensor(&self, poses: &[CameraPose]) -> Tensor {
        let mut d = Vec::with_capacity(poses.len() * POSE_DIM);
        for p in poses {
            d.extend_from_slice(&self.pose_norm.normalize(p));
        }
        Tensor::new(&[poses.len(), POSE_DIM], d)
    }

    /// `w: [B, w_dim]`, `c: [B, 25]` (normalized) → `w': [B, w_dim]`.
    pub fn map_style(&self, p: &Bind, w: &Var, c: &Var) -> Var {
        self.mapping.forward(p, w, c)
    }

    /// `w'` → `[B, 32, h, w]`.
    pub fn predict_features(&self, p: &Bind, w_prime: &Var) -> Var {
        self.synthesis.forward(p, w_prime)
    }

    pub fn super_resolve(&self, p: &Bind, features: &Var) -> Result<Var> {
        self.sr.forward(p, features)
    }

    pub fn forward(&self, p: &Bind, w: &Var, c: &Var) -> Result<StudentOutput> {
        let wd = self.spec.teacher.w_dim;
        if w.shape().len() != 2 || w.shape()[1] != wd || c.shape() != [w.shape()[0], POSE_DIM] {
            return Err(validation(format!(
                "student expects w [B, {wd}] and c [B, {POSE_DIM}], got {:?} and {:?}",
                w.shape(),
                c.shape()
            )));
        }
        let wp = self.map_style(p, w, c);
        let features = self.predict_features(p, &wp);
        let hr = self.super_resolve(p, &features)?;
        let lr = features.narrow(1, 0, 3);
        Ok(StudentOutput { features, lr, hr })
    }

    /// Inference with frozen weights on raw style codes and poses.
    pub fn infer(&self, ws: &Tensor, poses: &[CameraPose]) -> Result<(Tensor, Tensor)> {
        let c = Var::constant(self.pose_tensor(poses));
        let w = Var::constant(ws.clone());
        no_grad(|| {
            let out = self.forward(&Bind::frozen(&self.params), &w, &c)?;
            Ok((out.features.value().clone(), out.hr.value().clone()))
        })
    }

    /// Multiply-accumulates per generated image; depends only on the
    /// architecture.
    pub fn macs_per_image(&self) -> u64 {
        let r = self.spec.teacher.lr_res;
        self.mapping.macs() + self.synthesis.macs() + self.sr.macs(r, r)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let mut c = Checkpoint::new("student", seed, serde_json::to_value(&self.spec)?);
        c.push_store("param.", &self.params);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("student")?;
        let spec: StudentSpec = serde_json::from_value(c.config.clone())?;
        Self::from_parts(spec, c.store("param."))
    }

    pub fn from_parts(spec: StudentSpec, params: ParamStore) -> Result<Self> {
        let reference = Self::new(spec.student.clone(), &spec.teacher, 0)?;
        if reference.params.len() != params.len()
            || reference.params.iter().any(|(n, t)| params.get(n).map(Tensor::shape) != Some(t.shape()))
        {
            return Err(Error::Corrupt("student parameters do not match the architecture".into()));
        }
        let (mapping, synthesis, sr, pose_norm) = build(&spec)?;
        Ok(Self { spec, params, mapping, synthesis, sr, pose_norm })
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.to_checkpoint(seed)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::LatentCode;
    use crate::render::RenderConfig;
    use crate::teacher::TeacherKind;
    use convrender_autograd::gradcheck::{numeric_gradient, relative_error};
    use convrender_autograd::{grad, Adam, AdamConfig};

    fn tiny_teacher() -> Teacher {
        let cfg = TeacherConfig {
            kind: TeacherKind::Procedural,
            w_dim: 16,
            plane_res: 16,
            plane_channels: 12,
            lr_res: 8,
            sr_hidden: 4,
            render: RenderConfig { n_coarse: 8, n_fine: 8, ..RenderConfig::default() },
            ..TeacherConfig::default()
        };
        Teacher::new(cfg, 1).unwrap()
    }

    fn small() -> StudentConfig {
        StudentConfig { synthesis_width: 8, ..StudentConfig::default() }
    }

    #[test]
    fn shapes_match_the_teacher_bundle() {
        let t = tiny_teacher();
        let s = Student::from_teacher(small(), &t, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = LatentCode::sample(8, &mut rng);
        let pose = t.config().prior.canonical().unwrap();
        let b = t.forward(&z, &pose, None).unwrap();
        let (f, hr) = s.infer(&Tensor::new(&[1, 16], b.w.clone()), &[pose]).unwrap();
        assert_eq!(&f.shape()[1..], b.features.shape());
        assert_eq!(&hr.shape()[1..], b.hr.shape());
        let (f2, _) = s.infer(&Tensor::new(&[1, 16], b.w.clone()), &[pose]).unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn inherited_super_res_reproduces_teacher_hr() {
        let t = tiny_teacher();
        let s = Student::from_teacher(small(), &t, 0).unwrap();
        for (name, v) in t.params().with_prefix("sr.") {
            assert_eq!(s.params().expect(name), v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = t.forward(&LatentCode::sample(8, &mut rng), &t.config().prior.canonical().unwrap(), None).unwrap();
        let feat = Var::constant(b.features.reshape(&[1, 32, 8, 8]));
        let hr = s.super_resolve(&Bind::frozen(s.params()), &feat).unwrap();
        assert_eq!(hr.value().data(), b.hr.data());
    }

    #[test]
    fn super_res_is_trained_jointly() {
        let t = tiny_teacher();
        let mut s = Student::from_teacher(small(), &t, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Var::constant(Tensor::randn(&[1, 16], &mut rng));
        let c = Var::constant(s.pose_tensor(&[t.config().prior.canonical().unwrap()]));
        let before = s.params().clone();
        let grads = {
            let p = Bind::trainable(s.params());
            let out = s.forward(&p, &w, &c).unwrap();
            p.grads(&out.hr.square().mean())
        };
        Adam::new(AdamConfig::default()).step(s.params_mut(), &grads);
        let changed = before.with_prefix("sr.").any(|(n, v)| s.params().expect(n) != v);
        assert!(changed);
    }

    #[test]
    fn mapping_gradient_wrt_pose_matches_finite_differences() {
        let t = tiny_teacher();
        let s = Student::from_teacher(small(), &t, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Var::constant(Tensor::randn(&[1, 16], &mut rng));
        let c0 = Tensor::randn(&[1, POSE_DIM], &mut rng);
        let p = Bind::frozen(s.params());
        let c = Var::leaf(c0.clone());
        let y = s.map_style(&p, &w, &c).square().sum();
        let g = grad(&y, &[&c], false)[0].clone().unwrap();
        let num = numeric_gradient(c0.data(), 1e-6, |v| {
            s.map_style(&p, &w, &Var::constant(Tensor::new(&[1, POSE_DIM], v.to_vec()))).square().sum().item()
        });
        assert!(relative_error(g.value().data(), &num) < 1e-4);
        let c2 = Var::constant(Tensor::randn(&[1, POSE_DIM], &mut rng));
        assert_ne!(s.map_style(&p, &w, &c2).value(), s.map_style(&p, &w, &Var::constant(c0)).value());
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = tiny_teacher();
        let s = Student::from_teacher(small(), &t, 4).unwrap();
        let back = Student::from_checkpoint(&s.to_checkpoint(4).unwrap()).unwrap();
        assert_eq!(back.params(), s.params());
        assert_eq!(back.spec(), s.spec());
    }
}
