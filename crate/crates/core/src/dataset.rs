//! `dataset.json` ingestion: a list of `["relative/path.png", [25 floats]]`
//! entries (an object with a `labels` key holding the same list is also
//! accepted). Every problem is collected into one itemized report.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::camera::{CameraPose, POSE_DIM};
use crate::error::{io_err, Error, Result};
use crate::imageio::load_png;
use crate::trainer::PoolItem;
use convrender_autograd::{no_grad, Tensor, Var};

pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub pose: [f64; POSE_DIM],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

/// Yaw/pitch ranges (radians, about the origin) and camera distances.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct PoseSummary {
    pub count: usize,
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
    pub radius: (f64, f64),
}

impl DatasetManifest {
    pub fn poses(&self) -> Result<Vec<CameraPose>> {
        self.entries.iter().map(|e| CameraPose::from_flat(&e.pose)).collect()
    }

    pub fn summary(&self) -> Result<Option<PoseSummary>> {
        let poses = self.poses()?;
        if poses.is_empty() {
            return Ok(None);
        }
        let mut s = PoseSummary {
            count: poses.len(),
            yaw: (f64::INFINITY, f64::NEG_INFINITY),
            pitch: (f64::INFINITY, f64::NEG_INFINITY),
            radius: (f64::INFINITY, f64::NEG_INFINITY),
        };
        let widen = |r: &mut (f64, f64), v: f64| *r = (r.0.min(v), r.1.max(v));
        for p in &poses {
            let (yaw, pitch) = p.orbit_angles([0.0; 3]);
            let c = p.center();
            widen(&mut s.yaw, yaw);
            widen(&mut s.pitch, pitch);
            widen(&mut s.radius, (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt());
        }
        Ok(Some(s))
    }

    /// Serializes the manifest as a plain entry list.
    pub fn to_json(&self) -> Value {
        Value::Array(self.entries.iter().map(|e| serde_json::json!([e.path, e.pose.to_vec()])).collect())
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(&path, text).map_err(io_err(&path))
    }
}

fn parse_entry(i: usize, v: &Value, root: &Path, problems: &mut Vec<String>) -> Option<ManifestEntry> {
    let arr = match v.as_array() {
        Some(a) if a.len() == 2 => a,
        _ => {
            problems.push(format!("entry {i}: expected [path, [25 floats]]"));
            return None;
        }
    };
    let Some(path) = arr[0].as_str() else {
        problems.push(format!("entry {i}: image path is not a string"));
        return None;
    };
    let who = format!("entry {i} ({path})");
    let mut ok = true;
    let nums: Option<Vec<f64>> = arr[1].as_array().and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>());
    let pose = match nums {
        Some(n) if n.len() == POSE_DIM => {
            if let Err(e) = CameraPose::from_flat(&n) {
                problems.push(format!("{who}: invalid pose: {e}"));
                ok = false;
            }
            let mut p = [0.0; POSE_DIM];
            p.copy_from_slice(&n);
            p
        }
        Some(n) => {
            problems.push(format!("{who}: pose has {} values, expected {POSE_DIM}", n.len()));
            return None;
        }
        None => {
            problems.push(format!("{who}: pose is not a list of numbers"));
            return None;
        }
    };
    let full = root.join(path);
    if !full.is_file() {
        problems.push(format!("{who}: image file is missing"));
        ok = false;
    } else if let Err(e) = image::image_dimensions(&full) {
        problems.push(format!("{who}: image cannot be decoded: {e}"));
        ok = false;
    }
    ok.then(|| ManifestEntry { path: path.to_string(), pose })
}

/// Reads and validates `root/dataset.json`.
pub fn ingest_dataset(root: &Path) -> Result<DatasetManifest> {
    let mpath = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let json: Value = serde_json::from_str(&text).map_err(|e| Error::Dataset(vec![format!("{MANIFEST_FILE}: {e}")]))?;
    let list = match &json {
        Value::Array(a) => a,
        Value::Object(o) => match o.get("labels").and_then(Value::as_array) {
            Some(a) => a,
            None => return Err(Error::Dataset(vec![format!("{MANIFEST_FILE}: object form needs a `labels` list")])),
        },
        _ => return Err(Error::Dataset(vec![format!("{MANIFEST_FILE}: expected a list of entries")])),
    };
    let mut problems = Vec::new();
    let entries: Vec<ManifestEntry> =
        list.iter().enumerate().filter_map(|(i, v)| parse_entry(i, v, root, &mut problems)).collect();
    if !problems.is_empty() {
        return Err(Error::Dataset(problems));
    }
    let mut warnings = Vec::new();
    if entries.is_empty() {
        warnings.push(format!("{} lists no images", mpath.display()));
    }
    Ok(DatasetManifest { root: root.to_path_buf(), entries, warnings })
}

/// Loads every manifest image as a discriminator "real" example, resized to
/// `hr_res` with its low-resolution branch downsampled to `lr_res`.
pub fn load_pool(manifest: &DatasetManifest, hr_res: usize, lr_res: usize) -> Result<Vec<PoolItem>> {
    let poses = manifest.poses()?;
    let mut out = Vec::with_capacity(poses.len());
    for (e, pose) in manifest.entries.iter().zip(poses) {
        let img = load_png(&manifest.root.join(&e.path))?;
        let img = if img.shape()[1] == hr_res && img.shape()[2] == hr_res {
            img
        } else {
            let (h, w) = (img.shape()[1], img.shape()[2]);
            no_grad(|| Var::constant(img.reshape(&[1, 3, h, w])).resize_bilinear(hr_res, hr_res).value().reshape(&[3, hr_res, hr_res]))
        };
        out.push(PoolItem::from_image(&img, lr_res, pose)?);
    }
    Ok(out)
}

/// Stacks `[3, H, W]` images into `[B, 3, H, W]`.
pub fn stack_images(images: &[Tensor]) -> Tensor {
    let parts: Vec<Tensor> = images.iter().map(|t| t.reshape(&[1, t.shape()[0], t.shape()[1], t.shape()[2]])).collect();
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}
