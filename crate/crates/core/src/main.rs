use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use convrender::alloc::TrackingAllocator;
use convrender::bench::{benchmark_efficiency, write_outputs, BenchLock};
use convrender::camera::{CameraPose, LatentCode};
use convrender::checkpoint::Checkpoint;
use convrender::config::RunConfig;
use convrender::dataset::ingest_dataset;
use convrender::error::{Error, Result};
use convrender::imageio::save_png;
use convrender::metrics::{
    fid, generate_all, kid, pose_accuracy, pose_probes, psnr, train_pose_regressor, Direction, Embedder,
    ImageGenerator, MetricReport, StudentGenerator,
};
use convrender::student::Student;
use convrender::teacher::{Teacher, TeacherKind};
use convrender::trainer::run_distillation;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "convrender", version, about = "Distill a tri-plane volumetric generator into a convolutional renderer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run configuration (JSON); defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, visible_alias = "out", default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Random,
    Procedural,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Fid,
    Kid,
    Psnr,
    Pose,
}

#[derive(Subcommand)]
enum Command {
    /// Build a frozen teacher and write `teacher.ckpt`.
    MakeTeacher {
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a student against a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Continue from a `train_state.ckpt`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many steps are done; `--resume` picks up from there.
        #[arg(long)]
        stop_after: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Render PNGs from a teacher or student checkpoint.
    Render {
        #[arg(long)]
        model: PathBuf,
        /// Teacher supplying style codes when `--model` is a student.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        z_seed: u64,
        /// `orbit:K` sweeps K yaw angles across the prior at zero pitch.
        #[arg(long, default_value = "orbit:8")]
        poses: String,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a model against its teacher.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Metric,
        #[command(flatten)]
        common: Common,
    },
    /// Peak memory and throughput versus batch size.
    Bench {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Comma-separated batch sizes; overrides the config.
        #[arg(long, value_delimiter = ',')]
        batches: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
    },
    /// Validate a dataset directory holding `dataset.json`.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

enum Model {
    Teacher(Teacher),
    Student(Student),
}

fn load_model(path: &Path) -> Result<Model> {
    let c = Checkpoint::load(path)?;
    match c.kind.as_str() {
        "teacher" => Ok(Model::Teacher(Teacher::from_checkpoint(&c)?)),
        "student" => Ok(Model::Student(Student::from_checkpoint(&c)?)),
        other => Err(Error::Corrupt(format!("{} holds a {other} checkpoint, not a model", path.display()))),
    }
}

/// The model as an image generator plus the teacher it is compared against.
fn resolve(model: &Path, teacher: Option<&Path>) -> Result<(Model, Option<Teacher>)> {
    let m = load_model(model)?;
    let t = teacher.map(Teacher::load).transpose()?;
    if matches!(m, Model::Student(_)) && t.is_none() {
        return Err(Error::Config("student models need --teacher for their style codes".into()));
    }
    Ok((m, t))
}

fn generator<'a>(m: &'a Model, t: Option<&'a Teacher>, holder: &'a mut Option<StudentGenerator<'a>>) -> &'a dyn ImageGenerator {
    match m {
        Model::Teacher(teacher) => teacher,
        Model::Student(student) => holder.insert(StudentGenerator { teacher: t.expect("checked by resolve"), student }),
    }
}

fn parse_poses(spec: &str, teacher: &Teacher) -> Result<Vec<CameraPose>> {
    let k: usize = spec
        .strip_prefix("orbit:")
        .and_then(|k| k.parse().ok())
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::Config(format!("--poses must look like orbit:K with K ≥ 1, got {spec}")))?;
    let prior = &teacher.config().prior;
    let (lo, hi) = prior.yaw_range;
    (0..k)
        .map(|i| {
            let t = if k == 1 { 0.5 } else { i as f64 / (k - 1) as f64 };
            prior.pose_at(lo + (hi - lo) * t, 0.5 * (prior.pitch_range.0 + prior.pitch_range.1))
        })
        .collect()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeTeacher { kind, common } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(k) = kind {
                cfg.teacher.kind = match k {
                    Kind::Random => TeacherKind::Random,
                    Kind::Procedural => TeacherKind::Procedural,
                };
                cfg.validate()?;
            }
            mkdir(&common.out_dir)?;
            let t = Teacher::new(cfg.teacher, common.seed)?;
            let path = common.out_dir.join("teacher.ckpt");
            t.save(&path)?;
            println!("wrote {} ({} parameters)", path.display(), t.params().num_scalars());
        }
        Command::Distill { teacher, resume, stop_after, common } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let t = Teacher::load(&teacher)?;
            let s = run_distillation(&t, cfg.train, common.seed, &common.out_dir, resume.as_deref(), stop_after)?;
            println!(
                "trained {} steps (stage transition at {:?}); probe PSNR {:?}; wrote {} and {}",
                s.steps,
                s.transition_step,
                s.final_probe_psnr,
                s.student_path.display(),
                s.log_path.display()
            );
        }
        Command::Render { model, teacher, z_seed, poses, common } => {
            RunConfig::load(common.config.as_deref())?;
            let (m, t) = resolve(&model, teacher.as_deref())?;
            let reference = match (&m, &t) {
                (Model::Teacher(x), _) => x,
                (_, Some(x)) => x,
                _ => unreachable!("checked by resolve"),
            };
            let poses = parse_poses(&poses, reference)?;
            let mut rng = ChaCha8Rng::seed_from_u64(z_seed);
            let z = LatentCode::sample(reference.config().z_dim, &mut rng);
            let zs = vec![z; poses.len()];
            let mut holder = None;
            let g = generator(&m, t.as_ref(), &mut holder);
            let images = generate_all(g, &zs, &poses)?;
            mkdir(&common.out_dir)?;
            let h = images.shape()[2];
            for i in 0..poses.len() {
                let p = common.out_dir.join(format!("frame_{i:03}.png"));
                save_png(&images.narrow(0, i, 1).reshape(&[3, h, h]), &p)?;
            }
            println!("wrote {} frames to {}", poses.len(), common.out_dir.display());
        }
        Command::Eval { model, teacher, metric, common } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let (m, t) = resolve(&model, teacher.as_deref())?;
            let reference = match (&t, &m) {
                (Some(x), _) => x,
                (None, Model::Teacher(x)) => x,
                _ => unreachable!("checked by resolve"),
            };
            let mut holder = None;
            let g = generator(&m, t.as_ref(), &mut holder);
            let ev = &cfg.eval;
            let cfg_json = serde_json::to_value(&cfg)?;
            mkdir(&common.out_dir)?;
            let (zs, poses) = pose_probes(&reference.config().prior, reference.config().z_dim, ev.samples, common.seed)?;
            let report = match metric {
                Metric::Psnr => {
                    let a = generate_all(g, &zs, &poses)?;
                    let b = generate_all(reference, &zs, &poses)?;
                    let h = a.shape()[2];
                    let mut rows = Vec::with_capacity(zs.len());
                    let mut csv = String::from("sample,psnr\n");
                    for i in 0..zs.len() {
                        let v = psnr(&a.narrow(0, i, 1).reshape(&[3, h, h]), &b.narrow(0, i, 1).reshape(&[3, h, h]))?;
                        csv.push_str(&format!("{i},{v}\n"));
                        rows.push(v);
                    }
                    let p = common.out_dir.join("psnr.csv");
                    std::fs::write(&p, csv).map_err(|e| Error::Io { path: p, source: e })?;
                    let mean = rows.iter().sum::<f64>() / rows.len() as f64;
                    MetricReport::new("psnr", mean, rows.len(), &cfg_json, Direction::HigherIsBetter)?
                }
                Metric::Fid | Metric::Kid => {
                    let emb = Embedder::default();
                    let fake = emb.embed(&generate_all(g, &zs, &poses)?)?;
                    // The reference side uses independent latents and poses.
                    let (rz, rp) = pose_probes(&reference.config().prior, reference.config().z_dim, ev.samples, common.seed ^ 0x5EED)?;
                    let real = emb.embed(&generate_all(reference, &rz, &rp)?)?;
                    if matches!(metric, Metric::Fid) {
                        MetricReport::new("fid", fid(&real, &fake)?, ev.samples, &cfg_json, Direction::LowerIsBetter)?
                    } else {
                        let k = kid(&real, &fake, &ev.kid)?;
                        MetricReport::new("kid", k.mean, ev.samples, &cfg_json, Direction::LowerIsBetter)?
                    }
                }
                Metric::Pose => {
                    let reg = train_pose_regressor(reference, &ev.regressor)?;
                    let (pz, pp) = pose_probes(&reference.config().prior, reference.config().z_dim, ev.pose_probes, common.seed)?;
                    let v = pose_accuracy(g, &pz, &pp, reference.config().prior.lookat, &reg)?;
                    MetricReport::new("pose_mse", v, pz.len(), &cfg_json, Direction::LowerIsBetter)?
                }
            };
            let path = common.out_dir.join("eval.jsonl");
            write_jsonl(&path, std::slice::from_ref(&report))?;
            println!("{} = {} over {} samples (wrote {})", report.metric, report.value, report.samples, path.display());
        }
        Command::Bench { teacher, student, batches, common } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(b) = batches {
                cfg.bench.batches = b;
            }
            cfg.bench.seed = common.seed;
            cfg.validate()?;
            let t = Teacher::load(&teacher)?;
            let s = Student::load(&student)?;
            mkdir(&common.out_dir)?;
            let _lock = BenchLock::acquire(&common.out_dir.join(".bench.lock"))?;
            let summary = benchmark_efficiency(&t, &s, &cfg.bench)?;
            let (j, c, p) = write_outputs(&summary, &common.out_dir)?;
            println!(
                "max feasible batch: teacher {:?}, student {:?}; wrote {}, {}, {}",
                summary.max_feasible_teacher,
                summary.max_feasible_student,
                j.display(),
                c.display(),
                p.display()
            );
        }
        Command::Ingest { root, common } => {
            RunConfig::load(common.config.as_deref())?;
            let m = ingest_dataset(&root)?;
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            let summary = m.summary()?;
            mkdir(&common.out_dir)?;
            let path = common.out_dir.join("ingest.json");
            let report = serde_json::json!({ "root": root, "entries": m.entries.len(), "poses": summary, "warnings": m.warnings });
            std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{} entries", m.entries.len());
            if let Some(s) = summary {
                let _ = writeln!(
                    out,
                    "yaw [{:.3}, {:.3}] rad, pitch [{:.3}, {:.3}] rad, radius [{:.3}, {:.3}]",
                    s.yaw.0, s.yaw.1, s.pitch.0, s.pitch.1, s.radius.0, s.radius.1
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
