//! Inference efficiency: peak heap and throughput versus batch size for
//! the volumetric teacher and the convolutional student.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::camera::{sample_pose, CameraPose, LatentCode, PosePrior};
use crate::error::{io_err, validation, Error, Result};
use crate::metrics::{config_hash, ImageGenerator, StudentGenerator};
use crate::student::Student;
use crate::teacher::Teacher;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Volumetric,
    Convolutional,
}

impl GeneratorKind {
    pub fn label(self) -> &'static str {
        match self {
            GeneratorKind::Volumetric => "volumetric",
            GeneratorKind::Convolutional => "convolutional",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batches: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    /// Heap budget standing in for device memory; batches whose peak would
    /// exceed it are recorded as infeasible.
    pub memory_budget_bytes: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batches: vec![1, 2, 4, 8, 16, 32], reps: 5, warmup: 1, memory_budget_bytes: 512 << 20, seed: 0 }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches.is_empty() || self.batches.contains(&0) {
            return Err(Error::Config("batches must be a non-empty list of positive sizes".into()));
        }
        if self.reps < 5 {
            return Err(Error::Config("at least 5 timed repetitions are required".into()));
        }
        if self.memory_budget_bytes == 0 {
            return Err(Error::Config("memory budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub generator: GeneratorKind,
    pub batch: usize,
    pub feasible: bool,
    /// Measured, or extrapolated when the batch was skipped as infeasible.
    pub peak_bytes: u64,
    /// Images per second; 0 when infeasible.
    pub throughput: f64,
    pub median_seconds: f64,
    pub resolution: usize,
    pub samples_per_ray: usize,
    pub hardware: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub records: Vec<BenchRecord>,
    pub max_feasible_teacher: Option<usize>,
    pub max_feasible_student: Option<usize>,
}

impl BenchSummary {
    pub fn max_feasible(&self, kind: GeneratorKind) -> Option<usize> {
        match kind {
            GeneratorKind::Volumetric => self.max_feasible_teacher,
            GeneratorKind::Convolutional => self.max_feasible_student,
        }
    }

    pub fn record(&self, kind: GeneratorKind, batch: usize) -> Option<&BenchRecord> {
        self.records.iter().find(|r| r.generator == kind && r.batch == batch)
    }
}

/// Exclusive benchmark lock; removed on drop.
pub struct BenchLock {
    path: PathBuf,
}

impl BenchLock {
    pub fn acquire(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(_) => Ok(Self { path: path.to_path_buf() }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path.to_path_buf())),
            Err(e) => Err(Error::Io { path: path.to_path_buf(), source: e }),
        }
    }
}

impl Drop for BenchLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {threads} thread(s); {}-{}", std::env::consts::ARCH, std::env::consts::OS)
}

fn inputs(teacher: &Teacher, batch: usize, seed: u64) -> Result<(Vec<LatentCode>, Vec<CameraPose>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = PosePrior::Orbit(teacher.config().prior.clone());
    let zs = (0..batch).map(|_| LatentCode::sample(teacher.config().z_dim, &mut rng)).collect();
    let poses = (0..batch).map(|_| sample_pose(&prior, &mut rng)).collect::<Result<_>>()?;
    Ok((zs, poses))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_one(g: &dyn ImageGenerator, zs: &[LatentCode], poses: &[CameraPose]) -> Result<usize> {
    let (out, peak) = alloc::measure_peak(|| g.generate(zs, poses));
    out?;
    Ok(peak)
}

/// Measures both generators at every configured batch size. Requires
/// [`alloc::TrackingAllocator`] to be the global allocator.
pub fn benchmark_efficiency(teacher: &Teacher, student: &Student, cfg: &BenchConfig) -> Result<BenchSummary> {
    cfg.validate()?;
    if !alloc::is_installed() {
        return Err(validation("peak memory needs the tracking allocator installed as the global allocator"));
    }
    if student.spec().teacher.hr_res() != teacher.config().hr_res() {
        return Err(validation("teacher and student must render at the same output resolution"));
    }
    let hash = config_hash(&serde_json::json!({
        "bench": cfg,
        "teacher": teacher.config(),
        "student": student.spec(),
    }))?;
    let hardware = hardware_descriptor();
    let student_gen = StudentGenerator { teacher, student };
    let gens: [(GeneratorKind, &dyn ImageGenerator); 2] =
        [(GeneratorKind::Volumetric, teacher), (GeneratorKind::Convolutional, &student_gen)];
    let mut batches = cfg.batches.clone();
    batches.sort_unstable();
    batches.dedup();
    let mut records = Vec::new();
    for (kind, g) in gens {
        // Peaks at batch 1 and 2 give a linear model used to skip batches
        // that would blow the budget without allocating them.
        let (z1, c1) = inputs(teacher, 2, cfg.seed)?;
        let p1 = run_one(g, &z1[..1], &c1[..1])? as f64;
        let p2 = run_one(g, &z1, &c1)? as f64;
        let slope = (p2 - p1).max(0.0);
        let mut over = false;
        for &b in &batches {
            let predicted = p1 + slope * (b as f64 - 1.0);
            let mut rec = BenchRecord {
                generator: kind,
                batch: b,
                feasible: false,
                peak_bytes: predicted as u64,
                throughput: 0.0,
                median_seconds: 0.0,
                resolution: teacher.config().hr_res(),
                samples_per_ray: teacher.config().render.samples_per_ray(),
                hardware: hardware.clone(),
                config_hash: hash.clone(),
            };
            if over || predicted > 1.25 * cfg.memory_budget_bytes as f64 {
                over = true;
                records.push(rec);
                continue;
            }
            let (zs, poses) = inputs(teacher, b, cfg.seed)?;
            let peak = run_one(g, &zs, &poses)?;
            rec.peak_bytes = peak as u64;
            if peak as u64 > cfg.memory_budget_bytes {
                over = true;
                records.push(rec);
                continue;
            }
            for _ in 1..cfg.warmup {
                g.generate(&zs, &poses)?;
            }
            let mut times = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps {
                let t = Instant::now();
                std::hint::black_box(g.generate(&zs, &poses)?);
                times.push(t.elapsed().as_secs_f64());
            }
            let m = median(times);
            rec.feasible = true;
            rec.median_seconds = m;
            rec.throughput = b as f64 / m.max(1e-12);
            records.push(rec);
        }
    }
    let max_of = |k: GeneratorKind| records.iter().filter(|r| r.generator == k && r.feasible).map(|r| r.batch).max();
    Ok(BenchSummary {
        max_feasible_teacher: max_of(GeneratorKind::Volumetric),
        max_feasible_student: max_of(GeneratorKind::Convolutional),
        records,
    })
}

/// Writes `bench.jsonl`, `bench.csv` and `bench.svg` into `dir`.
pub fn write_outputs(summary: &BenchSummary, dir: &Path) -> Result<(PathBuf, PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let jsonl = dir.join("bench.jsonl");
    let mut text = String::new();
    for r in &summary.records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&jsonl, text).map_err(io_err(&jsonl))?;

    let csv_path = dir.join("bench.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    for r in &summary.records {
        w.serialize(r).map_err(|e| csv_err(&csv_path, e))?;
    }
    w.flush().map_err(io_err(&csv_path))?;

    let svg = dir.join("bench.svg");
    plot(summary, &svg)?;
    Ok((jsonl, csv_path, svg))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

fn plot(summary: &BenchSummary, path: &Path) -> Result<()> {
    use plotters::prelude::*;
    let perr = |e: &dyn std::fmt::Display| Error::Image(format!("{}: {e}", path.display()));
    let root = SVGBackend::new(path, (960, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| perr(&e))?;
    let (left, right) = root.split_horizontally(480);
    let feasible: Vec<&BenchRecord> = summary.records.iter().filter(|r| r.feasible).collect();
    let max_b = feasible.iter().map(|r| r.batch).max().unwrap_or(1) as f64;
    let max_mem = feasible.iter().map(|r| r.peak_bytes as f64 / (1 << 20) as f64).fold(1e-3, f64::max);
    let max_tp = feasible.iter().map(|r| r.throughput).fold(1e-3, f64::max);
    let panels: [(&DrawingArea<SVGBackend, _>, &str, &str, f64, fn(&BenchRecord) -> f64); 2] = [
        (&left, "Peak memory", "MiB", max_mem, |r| r.peak_bytes as f64 / (1 << 20) as f64),
        (&right, "Throughput", "images / s", max_tp, |r| r.throughput),
    ];
    for (area, title, unit, ymax, get) in panels {
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(55)
            .build_cartesian_2d(0.0..max_b * 1.05, 0.0..ymax * 1.1)
            .map_err(|e| perr(&e))?;
        chart.configure_mesh().x_desc("batch size").y_desc(unit).draw().map_err(|e| perr(&e))?;
        for (kind, color) in [(GeneratorKind::Volumetric, RED), (GeneratorKind::Convolutional, BLUE)] {
            let pts: Vec<(f64, f64)> =
                feasible.iter().filter(|r| r.generator == kind).map(|r| (r.batch as f64, get(r))).collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(|e| perr(&e))?
                .label(kind.label())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(|e| perr(&e))?;
        }
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(|e| perr(&e))?;
    }
    root.present().map_err(|e| perr(&e))?;
    Ok(())
}
