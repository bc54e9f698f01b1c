//! Distillation loop: teacher sampling, the two-stage curriculum, α-mixed
//! discriminator data, optimization, resumable state and the metrics log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use convrender_autograd::{no_grad, Adam, AdamConfig, Bind, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::camera::{sample_pose, CameraPose, LatentCode, PosePrior};
use crate::checkpoint::Checkpoint;
use crate::error::{io_err, validation, Error, Result};
use crate::losses::{
    adversarial_d, adversarial_g, dual_discriminator_input, smooth_l1, total_loss, LossReport, LossTerms,
    LossWeights, PerceptualNet, Stage,
};
use crate::metrics::psnr;
use crate::nn::Discriminator;
use crate::student::{Student, StudentConfig};
use crate::teacher::{RenderBundle, Teacher};

const CACHE_STREAM: u64 = 0xCAC4E;
const PROBE_STREAM: u64 = 0x960BE;
const REAL_STREAM: u64 = 0x4EA1;
const INIT_STREAM: u64 = 0x1417;

/// When stage 1 hands over to stage 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    /// After exactly `stage1_steps` steps.
    FixedSteps,
    /// As soon as a probe reaches `db`, or after `stage1_steps` at the latest.
    PsnrThreshold { db: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleMode {
    /// The teacher renders a fresh batch every step.
    Online,
    /// `size` samples are rendered up front and drawn with replacement.
    Cached { size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    pub stage: Stage,
    pub stage1_steps: u64,
    pub transition: Transition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub alpha: f64,
    pub weights: LossWeights,
    pub g_lr: f64,
    pub d_lr: f64,
    pub g_betas: (f64, f64),
    pub d_betas: (f64, f64),
    pub total_steps: u64,
    pub stage1_steps: u64,
    pub transition: Transition,
    pub r1_gamma: f64,
    /// Lazy R1: the penalty runs every this many D steps, scaled up to match.
    pub r1_interval: u64,
    pub d_width: usize,
    pub samples: SampleMode,
    /// Size of the frozen "real" pool rendered by the teacher when no
    /// external dataset is given.
    pub real_pool: usize,
    pub real_dataset: Option<PathBuf>,
    pub probe_count: usize,
    pub probe_every: u64,
    pub checkpoint_every: u64,
    pub student: StudentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            alpha: 0.5,
            weights: LossWeights::default(),
            g_lr: 2.5e-3,
            d_lr: 2e-3,
            g_betas: (0.9, 0.99),
            d_betas: (0.0, 0.99),
            total_steps: 2000,
            stage1_steps: 1500,
            transition: Transition::FixedSteps,
            r1_gamma: 1.0,
            r1_interval: 16,
            d_width: 16,
            samples: SampleMode::Online,
            real_pool: 64,
            real_dataset: None,
            probe_count: 8,
            probe_every: 100,
            checkpoint_every: 500,
            student: StudentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return cfg("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return cfg("alpha must lie in [0, 1]");
        }
        if !(self.g_lr > 0.0 && self.d_lr > 0.0) {
            return cfg("learning rates must be positive");
        }
        for (b1, b2) in [self.g_betas, self.d_betas] {
            if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
                return cfg("Adam betas must lie in [0, 1)");
            }
        }
        if self.stage1_steps > self.total_steps {
            return cfg("stage1_steps cannot exceed total_steps");
        }
        if let Transition::PsnrThreshold { db } = self.transition {
            if !db.is_finite() {
                return cfg("PSNR threshold must be finite");
            }
        }
        if self.r1_gamma < 0.0 || self.r1_interval == 0 {
            return cfg("r1_gamma must be ≥ 0 and r1_interval positive");
        }
        if self.d_width == 0 || self.probe_count == 0 || self.probe_every == 0 || self.checkpoint_every == 0 {
            return cfg("d_width, probe_count, probe_every and checkpoint_every must be positive");
        }
        if matches!(self.samples, SampleMode::Cached { size: 0 }) {
            return cfg("sample cache size must be positive");
        }
        if self.alpha < 1.0 && self.real_pool == 0 && self.real_dataset.is_none() {
            return cfg("alpha < 1 needs a non-empty real pool");
        }
        self.weights.validate()
    }

    /// Whether the run ever reaches the adversarial stage.
    pub fn has_stage2(&self) -> bool {
        self.total_steps > self.stage1_steps || matches!(self.transition, Transition::PsnrThreshold { .. })
    }
}

/// One training tuple with the teacher's outputs detached.
pub fn make_sample<R: Rng + ?Sized>(teacher: &Teacher, prior: &PosePrior, rng: &mut R) -> Result<RenderBundle> {
    let z = LatentCode::sample(teacher.config().z_dim, rng);
    let c = sample_pose(prior, rng)?;
    teacher.forward(&z, &c, None)
}

fn make_samples<R: Rng + ?Sized>(teacher: &Teacher, prior: &PosePrior, n: usize, rng: &mut R) -> Result<Vec<RenderBundle>> {
    let mut zs = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    for _ in 0..n {
        zs.push(LatentCode::sample(teacher.config().z_dim, rng));
        cs.push(sample_pose(prior, rng)?);
    }
    // Bounded chunks keep the renderer's sample buffers small.
    let mut out = Vec::with_capacity(n);
    for (z, c) in zs.chunks(8).zip(cs.chunks(8)) {
        out.extend(teacher.forward_batch(z, c, None)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Real(usize),
    Rendered(usize),
}

/// Draws a discriminator "real" batch: each slot independently comes from
/// the rendered pool with probability `alpha`, else from the real pool.
pub fn mix_real_batch<R: Rng + ?Sized>(
    n_real: usize,
    n_rendered: usize,
    alpha: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Source>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(validation(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if alpha > 0.0 && n_rendered == 0 {
        return Err(validation("rendered pool is empty"));
    }
    if alpha < 1.0 && n_real == 0 {
        return Err(validation("real pool is empty"));
    }
    Ok((0..batch)
        .map(|_| {
            if rng.random::<f64>() < alpha {
                Source::Rendered(rng.random_range(0..n_rendered))
            } else {
                Source::Real(rng.random_range(0..n_real))
            }
        })
        .collect())
}

/// A discriminator "real" example: `[6, H, W]` dual image plus its pose.
#[derive(Clone, Debug)]
pub struct PoolItem {
    pub image: Tensor,
    pub pose: CameraPose,
}

impl PoolItem {
    pub fn from_bundle(b: &RenderBundle) -> Result<Self> {
        let dual = dual_tensor(&b.hr, &b.lr)?;
        Ok(Self { image: dual, pose: b.pose })
    }

    /// A real photograph: the low-resolution branch is its own downsample.
    pub fn from_image(hr: &Tensor, lr_res: usize, pose: CameraPose) -> Result<Self> {
        let lr = no_grad(|| Var::constant(hr.clone().reshape(&prepend1(hr.shape()))).resize_bilinear(lr_res, lr_res).value().clone());
        let lr = lr.reshape(&[3, lr_res, lr_res]);
        Ok(Self { image: dual_tensor(hr, &lr)?, pose })
    }
}

fn prepend1(s: &[usize]) -> Vec<usize> {
    let mut v = vec![1];
    v.extend_from_slice(s);
    v
}

fn dual_tensor(hr: &Tensor, lr: &Tensor) -> Result<Tensor> {
    no_grad(|| {
        let d = dual_discriminator_input(
            &Var::constant(hr.reshape(&prepend1(hr.shape()))),
            &Var::constant(lr.reshape(&prepend1(lr.shape()))),
        )?;
        let s = d.shape()[1..].to_vec();
        Ok(d.value().reshape(&s))
    })
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let reshaped: Vec<Tensor> = parts.iter().map(|t| t.reshape(&prepend1(t.shape()))).collect();
    Tensor::concat(&reshaped.iter().collect::<Vec<_>>(), 0)
}

/// Serializable optimization state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub curriculum: CurriculumStage,
    pub transition_step: Option<u64>,
    pub rng: ChaCha8Rng,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub disc: ParamStore,
    pub last_probe_psnr: Option<f64>,
}

/// One metrics-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_fake: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_real: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_r1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rendered_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_psnr: Option<f64>,
}

/// What one call to [`Distiller::step`] produced.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: StepRecord,
    /// Set on the step that moved the curriculum into stage 2.
    pub transitioned: bool,
}

/// Student gradients plus the detached predictions they came from.
pub struct GeneratorPass {
    pub grads: BTreeMap<String, Tensor>,
    pub report: LossReport,
    pub hr: Tensor,
    pub lr: Tensor,
}

pub struct Distiller<'t> {
    teacher: &'t Teacher,
    config: TrainConfig,
    seed: u64,
    student: Student,
    disc: Discriminator,
    perceptual: PerceptualNet,
    prior: PosePrior,
    cache: Vec<RenderBundle>,
    real_pool: Vec<PoolItem>,
    probes: Vec<RenderBundle>,
    state: TrainState,
}

fn adam(lr: f64, (beta1, beta2): (f64, f64)) -> AdamConfig {
    AdamConfig { lr, beta1, beta2, eps: 1e-8 }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl<'t> Distiller<'t> {
    pub fn new(teacher: &'t Teacher, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tc = teacher.config();
        let hr = tc.hr_res();
        if !hr.is_power_of_two() || hr < 4 {
            return Err(Error::Config(format!("the discriminator needs a power-of-two output resolution, got {hr}")));
        }
        let student = Student::from_teacher(config.student.clone(), teacher, seed)?;
        let disc = Discriminator::new("disc", 6, hr, config.d_width, crate::camera::POSE_DIM)?;
        let mut disc_params = ParamStore::new();
        disc.init(&mut disc_params, &mut rng_for(seed, INIT_STREAM));
        let prior = PosePrior::Orbit(tc.prior.clone());
        let cache = match config.samples {
            SampleMode::Online => Vec::new(),
            SampleMode::Cached { size } => make_samples(teacher, &prior, size, &mut rng_for(seed, CACHE_STREAM))?,
        };
        let probes = make_samples(teacher, &prior, config.probe_count, &mut rng_for(seed, PROBE_STREAM))?;
        let real_pool = if config.alpha < 1.0 && config.has_stage2() {
            match &config.real_dataset {
                Some(root) => {
                    let manifest = crate::dataset::ingest_dataset(root)?;
                    crate::dataset::load_pool(&manifest, hr, tc.lr_res)?
                }
                None => make_samples(teacher, &prior, config.real_pool, &mut rng_for(seed, REAL_STREAM))?
                    .iter()
                    .map(PoolItem::from_bundle)
                    .collect::<Result<_>>()?,
            }
        } else {
            Vec::new()
        };
        let state = TrainState {
            step: 0,
            curriculum: CurriculumStage {
                stage: Stage::Distill,
                stage1_steps: config.stage1_steps,
                transition: config.transition.clone(),
            },
            transition_step: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            g_opt: Adam::new(adam(config.g_lr, config.g_betas)),
            d_opt: Adam::new(adam(config.d_lr, config.d_betas)),
            disc: disc_params,
            last_probe_psnr: None,
        };
        Ok(Self { teacher, config, seed, student, disc, perceptual: PerceptualNet::new(), prior, cache, real_pool, probes, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn student(&self) -> &Student {
        &self.student
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn stage(&self) -> Stage {
        self.state.curriculum.stage
    }

    pub fn discriminator(&self) -> (&Discriminator, &ParamStore) {
        (&self.disc, &self.state.disc)
    }

    /// Precomputed training samples (empty in online mode).
    pub fn cache(&self) -> &[RenderBundle] {
        &self.cache
    }

    pub fn probes(&self) -> &[RenderBundle] {
        &self.probes
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_steps
    }

    /// Draws the next training batch from the cache or the live teacher.
    pub fn next_batch(&mut self) -> Result<Vec<RenderBundle>> {
        let b = self.config.batch_size;
        if self.cache.is_empty() {
            make_samples(self.teacher, &self.prior, b, &mut self.state.rng)
        } else {
            let n = self.cache.len();
            Ok((0..b).map(|_| self.cache[self.state.rng.random_range(0..n)].clone()).collect())
        }
    }

    /// Student gradients for `batch`. The discriminator is only consulted in
    /// the adversarial stage; in stage 1 it is never part of the graph.
    pub fn generator_pass(
        &self,
        batch: &[RenderBundle],
        stage: Stage,
        disc: Option<(&Discriminator, &ParamStore)>,
    ) -> Result<GeneratorPass> {
        if batch.is_empty() {
            return Err(validation("empty training batch"));
        }
        let wd = self.teacher.config().w_dim;
        let mut wdata = Vec::with_capacity(batch.len() * wd);
        for s in batch {
            wdata.extend_from_slice(&s.w);
        }
        let poses: Vec<CameraPose> = batch.iter().map(|s| s.pose).collect();
        let w = Var::constant(Tensor::new(&[batch.len(), wd], wdata));
        let c = Var::constant(self.student.pose_tensor(&poses));
        let p = Bind::trainable(self.student.params());
        let out = self.student.forward(&p, &w, &c)?;
        let tf = Var::constant(stack(&batch.iter().map(|s| &s.features).collect::<Vec<_>>()));
        let tlr = Var::constant(stack(&batch.iter().map(|s| &s.lr).collect::<Vec<_>>()));
        let thr = Var::constant(stack(&batch.iter().map(|s| &s.hr).collect::<Vec<_>>()));
        let beta = self.config.weights.smooth_l1_beta;
        let adv = match stage {
            Stage::Distill => None,
            Stage::Adversarial => {
                let (d, dp) = disc.ok_or_else(|| validation("the adversarial stage needs a discriminator"))?;
                let fake = dual_discriminator_input(&out.hr, &out.lr)?;
                Some(adversarial_g(d, &Bind::frozen(dp), &fake, &c))
            }
        };
        let terms = LossTerms {
            lr_smooth_l1: smooth_l1(&out.features, &tf, beta)?,
            lr_perceptual: self.perceptual.loss(&out.lr, &tlr)?,
            hr_smooth_l1: smooth_l1(&out.hr, &thr, beta)?,
            hr_perceptual: self.perceptual.loss(&out.hr, &thr)?,
            adv,
        };
        let (total, report) = total_loss(&terms, &self.config.weights, stage)?;
        let grads = p.grads(&total);
        Ok(GeneratorPass { grads, report, hr: out.hr.value().clone(), lr: out.lr.value().clone() })
    }

    fn non_finite(&self, detail: String) -> Error {
        Error::NonFinite { step: self.state.step, seed: self.seed, detail }
    }

    /// One optimization step: a student update, then (stage 2 only) a
    /// discriminator update on α-mixed reals against the detached fakes.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let batch = self.next_batch()?;
        let stage = self.stage();
        let disc = (stage == Stage::Adversarial).then_some((&self.disc, &self.state.disc));
        let pass = self.generator_pass(&batch, stage, disc)?;
        if !pass.report.total.is_finite() || !pass.grads.values().all(Tensor::all_finite) {
            return Err(self.non_finite(format!("generator loss {:?}", pass.report)));
        }
        self.state.g_opt.step(self.student.params_mut(), &pass.grads);

        let mut record = StepRecord {
            step: self.state.step + 1,
            losses: pass.report,
            d_total: None,
            d_fake: None,
            d_real: None,
            d_r1: None,
            rendered_fraction: None,
            probe_psnr: None,
        };
        if stage == Stage::Adversarial {
            self.discriminator_step(&batch, &pass.hr, &pass.lr, &mut record)?;
        }
        self.state.step += 1;

        let step = self.state.step;
        let last = step >= self.config.total_steps;
        let cur = &self.state.curriculum;
        let mut transitioned = false;
        let probe_now = step % self.config.probe_every == 0 || last || (stage == Stage::Distill && step == cur.stage1_steps);
        if probe_now {
            let v = self.probe_psnr()?;
            record.probe_psnr = Some(v);
            self.state.last_probe_psnr = Some(v);
        }
        if stage == Stage::Distill && !last {
            let go = match cur.transition {
                Transition::FixedSteps => step >= cur.stage1_steps,
                Transition::PsnrThreshold { db } => {
                    step >= cur.stage1_steps || record.probe_psnr.is_some_and(|v| v >= db)
                }
            };
            if go {
                self.state.curriculum.stage = Stage::Adversarial;
                self.state.transition_step = Some(step);
                transitioned = true;
            }
        }
        Ok(StepOutcome { record, transitioned })
    }

    fn discriminator_step(
        &mut self,
        batch: &[RenderBundle],
        fake_hr: &Tensor,
        fake_lr: &Tensor,
        record: &mut StepRecord,
    ) -> Result<()> {
        let b = batch.len();
        let sources = mix_real_batch(self.real_pool.len(), b, self.config.alpha, b, &mut self.state.rng)?;
        let mut reals = Vec::with_capacity(b);
        let mut real_poses = Vec::with_capacity(b);
        for s in &sources {
            match *s {
                Source::Real(i) => {
                    reals.push(self.real_pool[i].image.clone());
                    real_poses.push(self.real_pool[i].pose);
                }
                Source::Rendered(i) => {
                    reals.push(dual_tensor(&batch[i].hr, &batch[i].lr)?);
                    real_poses.push(batch[i].pose);
                }
            }
        }
        let real = stack(&reals.iter().collect::<Vec<_>>());
        let fake = no_grad(|| {
            dual_discriminator_input(&Var::constant(fake_hr.clone()), &Var::constant(fake_lr.clone()))
                .map(|v| v.value().clone())
        })?;
        let poses: Vec<CameraPose> = batch.iter().map(|s| s.pose).collect();
        let c_fake = Var::constant(self.student.pose_tensor(&poses));
        let c_real = Var::constant(self.student.pose_tensor(&real_poses));
        let interval = self.config.r1_interval;
        let r1 = (self.state.d_opt.steps() % interval == 0 && self.config.r1_gamma > 0.0)
            .then_some(self.config.r1_gamma * interval as f64);
        let (grads, dl) = {
            let p = Bind::trainable(&self.state.disc);
            let dl = adversarial_d(&self.disc, &p, &real, &fake, &c_real, &c_fake, r1);
            (p.grads(&dl.total), dl)
        };
        let total = dl.total.item();
        if !total.is_finite() || !grads.values().all(Tensor::all_finite) {
            return Err(self.non_finite(format!("discriminator loss {total} (fake {}, real {})", dl.fake, dl.real)));
        }
        self.state.d_opt.step(&mut self.state.disc, &grads);
        let rendered = sources.iter().filter(|s| matches!(s, Source::Rendered(_))).count();
        record.d_total = Some(total);
        record.d_fake = Some(dl.fake);
        record.d_real = Some(dl.real);
        record.d_r1 = Some(dl.r1);
        record.rendered_fraction = Some(rendered as f64 / b as f64);
        Ok(())
    }

    /// Mean high-resolution PSNR of the student against the teacher on the
    /// fixed probe set.
    pub fn probe_psnr(&self) -> Result<f64> {
        mean_psnr_vs_teacher(&self.student, &self.probes)
    }

    /// Full training state as a checkpoint container.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let s = &self.state;
        let mut c = Checkpoint::new("train_state", self.seed, serde_json::to_value(&self.config)?);
        c.metadata = json!({
            "step": s.step,
            "curriculum": s.curriculum,
            "transition_step": s.transition_step,
            "rng": {
                "seed": hex(&s.rng.get_seed()),
                "stream": s.rng.get_stream().to_string(),
                "word_pos": s.rng.get_word_pos().to_string(),
            },
            "g_opt_steps": s.g_opt.steps(),
            "d_opt_steps": s.d_opt.steps(),
            "last_probe_psnr": s.last_probe_psnr,
            "student": self.student.spec(),
        });
        c.push_store("student.", self.student.params());
        c.push_store("disc.", &s.disc);
        for (name, t) in s.g_opt.export() {
            c.tensors.push((format!("g_opt.{name}"), t));
        }
        for (name, t) in s.d_opt.export() {
            c.tensors.push((format!("d_opt.{name}"), t));
        }
        Ok(c)
    }

    /// Rebuilds a run from a state checkpoint; pools and caches are
    /// regenerated from the seed, so the continuation is bit-exact.
    pub fn from_checkpoint(teacher: &'t Teacher, c: &Checkpoint) -> Result<Self> {
        c.expect_kind("train_state")?;
        let config: TrainConfig = serde_json::from_value(c.config.clone())?;
        let mut d = Self::new(teacher, config, c.seed)?;
        let m = &c.metadata;
        let bad = |what: &str| Error::Corrupt(format!("train state is missing {what}"));
        let student = c.store("student.");
        if student.len() != d.student.params().len() {
            return Err(Error::Corrupt("student parameter set does not match the configuration".into()));
        }
        d.student = Student::from_parts(d.student.spec().clone(), student)?;
        let disc = c.store("disc.");
        if disc.len() != d.state.disc.len() {
            return Err(Error::Corrupt("discriminator parameter set does not match the configuration".into()));
        }
        d.state.disc = disc;
        d.state.step = m["step"].as_u64().ok_or_else(|| bad("step"))?;
        d.state.curriculum = serde_json::from_value(m["curriculum"].clone())?;
        d.state.transition_step = serde_json::from_value(m["transition_step"].clone())?;
        d.state.last_probe_psnr = serde_json::from_value(m["last_probe_psnr"].clone())?;
        let rng = &m["rng"];
        let seed_bytes = unhex(rng["seed"].as_str().ok_or_else(|| bad("rng seed"))?)?;
        let mut r = ChaCha8Rng::from_seed(seed_bytes);
        r.set_stream(parse_num(&rng["stream"]).ok_or_else(|| bad("rng stream"))? as u64);
        r.set_word_pos(parse_num(&rng["word_pos"]).ok_or_else(|| bad("rng position"))?);
        d.state.rng = r;
        let opt = |prefix: &str| -> Vec<(String, Tensor)> {
            c.tensors.iter().filter_map(|(n, t)| Some((n.strip_prefix(prefix)?.to_string(), t.clone()))).collect()
        };
        let g_steps = m["g_opt_steps"].as_u64().ok_or_else(|| bad("optimizer steps"))?;
        let d_steps = m["d_opt_steps"].as_u64().ok_or_else(|| bad("optimizer steps"))?;
        d.state.g_opt = Adam::import(d.state.g_opt.config, g_steps, opt("g_opt."));
        d.state.d_opt = Adam::import(d.state.d_opt.config, d_steps, opt("d_opt."));
        Ok(d)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let mut out = [0u8; 32];
    if s.len() != 64 {
        return Err(Error::Corrupt("rng seed must be 64 hex digits".into()));
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| Error::Corrupt("rng seed is not hex".into()))?;
    }
    Ok(out)
}

fn parse_num(v: &Value) -> Option<u128> {
    v.as_str()?.parse().ok()
}

/// Mean PSNR between student and teacher high-resolution renders.
pub fn mean_psnr_vs_teacher(student: &Student, samples: &[RenderBundle]) -> Result<f64> {
    if samples.is_empty() {
        return Err(validation("no samples to compare"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(8) {
        let wd = chunk[0].w.len();
        let ws = Tensor::new(&[chunk.len(), wd], chunk.iter().flat_map(|s| s.w.iter().copied()).collect());
        let poses: Vec<CameraPose> = chunk.iter().map(|s| s.pose).collect();
        let (_, hr) = student.infer(&ws, &poses)?;
        for (i, s) in chunk.iter().enumerate() {
            let h = s.hr.shape()[1];
            total += psnr(&hr.narrow(0, i, 1).reshape(&[3, h, h]), &s.hr)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Outcome of [`run_distillation`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub student_path: PathBuf,
    pub log_path: PathBuf,
    pub steps: u64,
    pub transition_step: Option<u64>,
    pub final_probe_psnr: Option<f64>,
}

pub const LOG_FILE: &str = "metrics.jsonl";
pub const STATE_FILE: &str = "train_state.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";

/// Keeps the log lines written up to `step` so a resumed run appends to a
/// log identical to the uninterrupted one.
fn truncate_log(path: &Path, step: u64) -> Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(String::new()),
        Err(e) => return Err(Error::Io { path: path.to_path_buf(), source: e }),
    };
    let mut kept = String::new();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line)?;
        if v["step"].as_u64().is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

/// Trains a student against `teacher`, writing `metrics.jsonl`, periodic
/// `train_state.ckpt` snapshots and the final `student.ckpt` into `out_dir`.
/// With `resume`, continues from a state checkpoint; with `stop_after`,
/// halts once that many steps are done, as if interrupted.
pub fn run_distillation(
    teacher: &Teacher,
    config: TrainConfig,
    seed: u64,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut d = match resume {
        Some(p) => {
            let d = Distiller::from_checkpoint(teacher, &Checkpoint::load(p)?)?;
            if d.config != config {
                return Err(Error::Config("resume checkpoint was written with a different training config".into()));
            }
            d
        }
        None => Distiller::new(teacher, config, seed)?,
    };
    let kept = truncate_log(&log_path, d.state.step)?;
    let mut log = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
    log.write_all(kept.as_bytes()).map_err(io_err(&log_path))?;

    while !d.is_done() && stop_after.is_none_or(|s| d.state.step < s) {
        let out = match d.step() {
            Ok(o) => o,
            Err(e @ Error::NonFinite { .. }) => {
                let dump = out_dir.join("nonfinite_dump.ckpt");
                d.to_checkpoint()?.save(&dump)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let mut line = serde_json::to_string(&out.record)?;
        line.push('\n');
        if out.transitioned {
            line.push_str(&serde_json::to_string(&json!({
                "step": out.record.step,
                "event": "stage_transition",
                "from": 1,
                "to": 2,
                "probe_psnr": out.record.probe_psnr,
            }))?);
            line.push('\n');
        }
        log.write_all(line.as_bytes()).map_err(io_err(&log_path))?;
        if d.state.step % d.config.checkpoint_every == 0 && !d.is_done() {
            log.flush().map_err(io_err(&log_path))?;
            d.to_checkpoint()?.save(&out_dir.join(STATE_FILE))?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    d.to_checkpoint()?.save(&out_dir.join(STATE_FILE))?;
    let student_path = out_dir.join(STUDENT_FILE);
    d.student.save(&student_path, seed)?;
    Ok(RunSummary {
        student_path,
        log_path,
        steps: d.state.step,
        transition_step: d.state.transition_step,
        final_probe_psnr: d.state.last_probe_psnr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::RenderConfig;
    use crate::teacher::{TeacherConfig, TeacherKind};
    use rand::SeedableRng;

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

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            total_steps: 4,
            stage1_steps: 2,
            d_width: 4,
            real_pool: 4,
            probe_count: 2,
            probe_every: 2,
            checkpoint_every: 2,
            samples: SampleMode::Cached { size: 3 },
            student: StudentConfig { mapping_depth: 1, synthesis_width: 8, ..StudentConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mix_boundaries_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all_real = mix_real_batch(5, 0, 0.0, 16, &mut rng).unwrap();
        assert!(all_real.iter().all(|s| matches!(s, Source::Real(i) if *i < 5)));
        let all_rendered = mix_real_batch(0, 3, 1.0, 16, &mut rng).unwrap();
        assert!(all_rendered.iter().all(|s| matches!(s, Source::Rendered(i) if *i < 3)));
        assert!(mix_real_batch(0, 3, 0.5, 16, &mut rng).is_err());
        assert!(mix_real_batch(3, 0, 0.5, 16, &mut rng).is_err());
        assert!(mix_real_batch(3, 3, 1.5, 16, &mut rng).is_err());
    }

    #[test]
    fn samples_are_reproducible_and_teacher_stays_frozen() {
        let t = tiny_teacher();
        let before = t.params().clone();
        let prior = PosePrior::Orbit(t.config().prior.clone());
        let a = make_samples(&t, &prior, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_samples(&t, &prior, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(s.lr.data(), &s.features.data()[..s.lr.numel()]);
        }
        assert_eq!(t.params(), &before);
    }

    #[test]
    fn stage1_leaves_discriminator_untouched_and_transitions_once() {
        let t = tiny_teacher();
        let mut d = Distiller::new(&t, tiny_config(), 3).unwrap();
        let d0 = d.state().disc.clone();
        let s0 = d.student().params().clone();
        let o1 = d.step().unwrap();
        assert_eq!(d.state().disc, d0);
        assert_ne!(d.student().params(), &s0);
        assert!(o1.record.d_total.is_none() && !o1.transitioned);
        let o2 = d.step().unwrap();
        assert!(o2.transitioned);
        assert_eq!(d.stage(), Stage::Adversarial);
        let o3 = d.step().unwrap();
        assert!(!o3.transitioned && o3.record.d_total.is_some());
        assert_ne!(d.state().disc, d0);
        assert_eq!(d.state().transition_step, Some(2));
    }

    #[test]
    fn state_checkpoint_round_trip_continues_identically() {
        let t = tiny_teacher();
        let mut a = Distiller::new(&t, tiny_config(), 5).unwrap();
        for _ in 0..3 {
            a.step().unwrap();
        }
        let c = Checkpoint::from_bytes(&a.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
        let mut b = Distiller::from_checkpoint(&t, &c).unwrap();
        let ra = a.step().unwrap().record;
        let rb = b.step().unwrap().record;
        assert_eq!(ra, rb);
        assert_eq!(a.student().params(), b.student().params());
        assert_eq!(a.state().disc, b.state().disc);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { alpha: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { stage1_steps: 10, total_steps: 5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let json = r#"{"batch_size": 4, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }
}
