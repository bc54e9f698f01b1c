//! Camera poses, pose priors, latent sampling and pinhole ray generation.
//!
//! Conventions: camera-to-world extrinsics in an OpenCV frame (+x right,
//! +y down, +z forward), world up is +y, and intrinsics are normalized by
//! the image width so that pixel centers live in `[0, 1]²`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

pub const POSE_DIM: usize = 25;
const ORTHO_TOL: f64 = 1e-5;

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Flattens `(extrinsic, intrinsic)` into the 25-vector used for
/// conditioning: 16 row-major extrinsic entries followed by 9 intrinsic.
pub fn flatten_pose(extrinsic: &Mat4, intrinsic: &Mat3) -> Result<[f64; POSE_DIM]> {
    Ok(CameraPose::new(*extrinsic, *intrinsic)?.flatten())
}

/// A validated camera: camera-to-world extrinsic plus normalized intrinsic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    extrinsic: Mat4,
    intrinsic: Mat3,
}

impl CameraPose {
    pub fn new(extrinsic: Mat4, intrinsic: Mat3) -> Result<Self> {
        if extrinsic[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(validation(format!("extrinsic bottom row must be (0,0,0,1), got {:?}", extrinsic[3])));
        }
        if extrinsic.iter().flatten().chain(intrinsic.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(validation("camera parameters must be finite"));
        }
        let r = |i: usize, j: usize| extrinsic[i][j];
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r(k, i) * r(k, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > ORTHO_TOL {
                    return Err(validation(format!(
                        "extrinsic rotation is not orthonormal (RᵀR[{i}][{j}] = {d})"
                    )));
                }
            }
        }
        let cols = |j: usize| [r(0, j), r(1, j), r(2, j)];
        let det = dot(cols(0), cross(cols(1), cols(2)));
        if det <= 0.0 {
            return Err(validation(format!("extrinsic rotation has determinant {det}, expected +1")));
        }
        Ok(Self { extrinsic, intrinsic })
    }

    /// Camera at `eye` looking at `target` with world up `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intrinsic: Mat3) -> Result<Self> {
        let fwd = sub(target, eye);
        if norm(fwd) < 1e-12 {
            return Err(validation("look-at target coincides with the eye"));
        }
        let fwd = normalize(fwd);
        let right = cross(fwd, up);
        if norm(right) < 1e-9 {
            return Err(validation("look-at direction is parallel to the up vector"));
        }
        let right = normalize(right);
        let down = cross(fwd, right);
        let mut e = [[0.0; 4]; 4];
        for i in 0..3 {
            e[i] = [right[i], down[i], fwd[i], eye[i]];
        }
        e[3] = [0.0, 0.0, 0.0, 1.0];
        Self::new(e, intrinsic)
    }

    /// Camera on a sphere of `radius` around `lookat`. Yaw rotates about
    /// +y starting from +z; positive pitch raises the camera.
    pub fn orbit(yaw: f64, pitch: f64, radius: f64, lookat: Vec3, intrinsic: Mat3) -> Result<Self> {
        let eye = [
            lookat[0] + radius * yaw.sin() * pitch.cos(),
            lookat[1] + radius * pitch.sin(),
            lookat[2] + radius * yaw.cos() * pitch.cos(),
        ];
        Self::look_at(eye, lookat, [0.0, 1.0, 0.0], intrinsic)
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != POSE_DIM {
            return Err(validation(format!("pose vector must have {POSE_DIM} entries, got {}", flat.len())));
        }
        let mut e = [[0.0; 4]; 4];
        let mut k = [[0.0; 3]; 3];
        for i in 0..16 {
            e[i / 4][i % 4] = flat[i];
        }
        for i in 0..9 {
            k[i / 3][i % 3] = flat[16 + i];
        }
        Self::new(e, k)
    }

    pub fn flatten(&self) -> [f64; POSE_DIM] {
        let mut out = [0.0; POSE_DIM];
        for i in 0..16 {
            out[i] = self.extrinsic[i / 4][i % 4];
        }
        for i in 0..9 {
            out[16 + i] = self.intrinsic[i / 3][i % 3];
        }
        out
    }

    pub fn extrinsic(&self) -> &Mat4 {
        &self.extrinsic
    }

    pub fn intrinsic(&self) -> &Mat3 {
        &self.intrinsic
    }

    pub fn center(&self) -> Vec3 {
        [self.extrinsic[0][3], self.extrinsic[1][3], self.extrinsic[2][3]]
    }

    pub fn forward(&self) -> Vec3 {
        [self.extrinsic[0][2], self.extrinsic[1][2], self.extrinsic[2][2]]
    }

    /// Rotates a camera-frame direction into the world frame.
    pub fn rotate(&self, d: Vec3) -> Vec3 {
        let e = &self.extrinsic;
        [
            e[0][0] * d[0] + e[0][1] * d[1] + e[0][2] * d[2],
            e[1][0] * d[0] + e[1][1] * d[1] + e[1][2] * d[2],
            e[2][0] * d[0] + e[2][1] * d[1] + e[2][2] * d[2],
        ]
    }

    /// World-to-camera transform (the rigid inverse of the extrinsic).
    pub fn world_to_camera(&self) -> Mat4 {
        let e = &self.extrinsic;
        let t = self.center();
        let mut inv = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = e[j][i];
            }
            inv[i][3] = -(e[0][i] * t[0] + e[1][i] * t[1] + e[2][i] * t[2]);
        }
        inv[3] = [0.0, 0.0, 0.0, 1.0];
        inv
    }

    /// Projects a world point to normalized image coordinates `(u, v)`
    /// in `[0, 1]²` (multiply by the resolution for pixels). `None` when the
    /// point is behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let m = self.world_to_camera();
        let pc: Vec<f64> = (0..3).map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3]).collect();
        if pc[2] <= 0.0 {
            return None;
        }
        let (x, y) = (pc[0] / pc[2], pc[1] / pc[2]);
        let k = &self.intrinsic;
        Some((k[0][0] * x + k[0][1] * y + k[0][2], k[1][1] * y + k[1][2]))
    }

    /// `(yaw, pitch)` of the camera center relative to `lookat`, inverting
    /// [`CameraPose::orbit`].
    pub fn orbit_angles(&self, lookat: Vec3) -> (f64, f64) {
        let d = sub(self.center(), lookat);
        let r = norm(d);
        (d[0].atan2(d[2]), (d[1] / r).clamp(-1.0, 1.0).asin())
    }

    /// The same camera rolled by `angle` radians about its optical axis.
    pub fn rolled(&self, angle: f64) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        let mut e = self.extrinsic;
        for row in e.iter_mut().take(3) {
            let (x, y) = (row[0], row[1]);
            row[0] = c * x + s * y;
            row[1] = -s * x + c * y;
        }
        Self::new(e, self.intrinsic)
    }
}

/// Normalized pinhole intrinsic with square pixels.
pub fn intrinsic_matrix(focal: f64, cx: f64, cy: f64) -> Mat3 {
    [[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]]
}

/// A latent code `z`, drawn from a standard normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        LatentCode((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Uniform yaw/pitch prior on a sphere around a look-at point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitPrior {
    pub radius: f64,
    pub yaw_range: (f64, f64),
    pub pitch_range: (f64, f64),
    pub lookat: Vec3,
    pub focal: f64,
}

impl Default for OrbitPrior {
    fn default() -> Self {
        Self {
            radius: 2.7,
            yaw_range: (-0.35, 0.35),
            pitch_range: (-0.25, 0.25),
            lookat: [0.0, 0.0, 0.0],
            focal: 1.6,
        }
    }
}

impl OrbitPrior {
    pub fn intrinsic(&self) -> Mat3 {
        intrinsic_matrix(self.focal, 0.5, 0.5)
    }

    /// The frontal pose (yaw = pitch = 0).
    pub fn canonical(&self) -> Result<CameraPose> {
        CameraPose::orbit(0.0, 0.0, self.radius, self.lookat, self.intrinsic())
    }

    pub fn pose_at(&self, yaw: f64, pitch: f64) -> Result<CameraPose> {
        CameraPose::orbit(yaw, pitch, self.radius, self.lookat, self.intrinsic())
    }

    pub fn validate(&self) -> Result<()> {
        let (ylo, yhi) = self.yaw_range;
        let (plo, phi) = self.pitch_range;
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("orbit radius must be positive, got {}", self.radius)));
        }
        if !(ylo <= yhi) || !(plo <= phi) {
            return Err(Error::Config(format!(
                "empty yaw/pitch range: yaw {:?}, pitch {:?}",
                self.yaw_range, self.pitch_range
            )));
        }
        if plo <= -std::f64::consts::FRAC_PI_2 || phi >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config("pitch range must stay inside (-π/2, π/2)".into()));
        }
        if !(self.focal > 0.0) {
            return Err(Error::Config(format!("focal length must be positive, got {}", self.focal)));
        }
        Ok(())
    }

    /// Variance of a uniform distribution over each angle range, averaged
    /// over (yaw, pitch).
    pub fn angle_variance(&self) -> f64 {
        let v = |(a, b): (f64, f64)| (b - a) * (b - a) / 12.0;
        0.5 * (v(self.yaw_range) + v(self.pitch_range))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosePrior {
    Orbit(OrbitPrior),
    /// Uniform over a fixed list of poses (e.g. from a dataset manifest).
    Empirical(Vec<CameraPose>),
}

pub fn sample_pose<R: Rng + ?Sized>(prior: &PosePrior, rng: &mut R) -> Result<CameraPose> {
    match prior {
        PosePrior::Orbit(o) => {
            o.validate()?;
            let pick = |(lo, hi): (f64, f64), rng: &mut R| if lo == hi { lo } else { rng.random_range(lo..hi) };
            let yaw = pick(o.yaw_range, rng);
            let pitch = pick(o.pitch_range, rng);
            o.pose_at(yaw, pitch)
        }
        PosePrior::Empirical(poses) => {
            if poses.is_empty() {
                return Err(Error::Config("empirical pose prior is empty".into()));
            }
            Ok(poses[rng.random_range(0..poses.len())])
        }
    }
}

/// Per-pixel rays in row-major pixel order (row `i` = image y).
#[derive(Clone, Debug, PartialEq)]
pub struct Rays {
    pub resolution: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
}

impl Rays {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Unit-direction rays through the center of every pixel of a
/// `resolution × resolution` image.
pub fn generate_rays(pose: &CameraPose, resolution: usize) -> Result<Rays> {
    if resolution == 0 {
        return Err(validation("ray resolution must be at least 1"));
    }
    let k = pose.intrinsic();
    let (fx, fy, skew, cx, cy) = (k[0][0], k[1][1], k[0][1], k[0][2], k[1][2]);
    if fx.abs() < 1e-12 || fy.abs() < 1e-12 || k[2] != [0.0, 0.0, 1.0] {
        return Err(validation("intrinsic matrix is singular or not a pinhole matrix"));
    }
    let origin = pose.center();
    let n = resolution * resolution;
    let mut directions = Vec::with_capacity(n);
    for i in 0..resolution {
        let v = (i as f64 + 0.5) / resolution as f64;
        let y = (v - cy) / fy;
        for j in 0..resolution {
            let u = (j as f64 + 0.5) / resolution as f64;
            let x = (u - cx - skew * y) / fx;
            directions.push(normalize(pose.rotate(normalize([x, y, 1.0]))));
        }
    }
    Ok(Rays { resolution, origins: vec![origin; n], directions })
}

/// Centers flat poses on the canonical pose and scales them to unit RMS
/// over a regular yaw/pitch grid of the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseNormalizer {
    center: [f64; POSE_DIM],
    inv_scale: f64,
}

impl PoseNormalizer {
    pub fn from_prior(prior: &OrbitPrior) -> Result<Self> {
        prior.validate()?;
        let center = prior.canonical()?.flatten();
        let n = 16;
        let lerp = |(a, b): (f64, f64), i: usize| a + (b - a) * (i as f64 + 0.5) / n as f64;
        let mut sq = 0.0;
        for i in 0..n {
            for j in 0..n {
                let flat = prior.pose_at(lerp(prior.yaw_range, i), lerp(prior.pitch_range, j))?.flatten();
                sq += flat.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        let rms = (sq / (n * n * POSE_DIM) as f64).sqrt();
        Ok(Self { center, inv_scale: if rms > 1e-12 { 1.0 / rms } else { 1.0 } })
    }

    pub fn normalize(&self, pose: &CameraPose) -> [f64; POSE_DIM] {
        self.normalize_flat(&pose.flatten())
    }

    pub fn normalize_flat(&self, flat: &[f64; POSE_DIM]) -> [f64; POSE_DIM] {
        let mut out = [0.0; POSE_DIM];
        for i in 0..POSE_DIM {
            out[i] = (flat[i] - self.center[i]) * self.inv_scale;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const I4: Mat4 = [[1., 0., 0., 0.], [0., 1., 0., 0.], [0., 0., 1., 0.], [0., 0., 0., 1.]];
    const I3: Mat3 = [[1., 0., 0.], [0., 1., 0.], [0., 0., 1.]];

    #[test]
    fn identity_flattens_to_unit_pattern() {
        let flat = flatten_pose(&I4, &I3).unwrap();
        for (i, v) in flat.iter().enumerate() {
            let want = if [0, 5, 10, 15, 16, 20, 24].contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(*v, want, "index {i}");
        }
    }

    #[test]
    fn look_at_extrinsic_times_analytic_inverse_is_identity() {
        let pose = CameraPose::orbit(0.3, -0.2, 2.7, [0.0; 3], intrinsic_matrix(2.0, 0.5, 0.5)).unwrap();
        let back = CameraPose::from_flat(&pose.flatten()).unwrap();
        assert_eq!(back, pose);
        let e = pose.extrinsic();
        let inv = pose.world_to_camera();
        for i in 0..4 {
            for j in 0..4 {
                let p: f64 = (0..4).map(|k| e[i][k] * inv[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((p - want).abs() < 1e-12);
            }
        }
        assert!((norm(pose.center()) - 2.7).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_rotations() {
        let mut e = I4;
        e[0][0] = 1.1;
        assert!(matches!(CameraPose::new(e, I3), Err(Error::Validation(_))));
        let mut e = I4;
        e[2][2] = -1.0; // reflection
        assert!(CameraPose::new(e, I3).is_err());
        let mut e = I4;
        e[3][2] = 0.5;
        assert!(CameraPose::new(e, I3).is_err());
        assert!(CameraPose::from_flat(&[0.0; 24]).is_err());
    }

    #[test]
    fn degenerate_range_gives_frontal_pose() {
        let prior = OrbitPrior { yaw_range: (0.0, 0.0), pitch_range: (0.0, 0.0), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_pose(&PosePrior::Orbit(prior.clone()), &mut rng).unwrap();
        assert_eq!(p, prior.canonical().unwrap());
        let c = p.center();
        assert!(c[0].abs() < 1e-15 && c[1].abs() < 1e-15 && (c[2] - 2.7).abs() < 1e-15);
    }

    #[test]
    fn empty_range_is_config_error() {
        let prior = OrbitPrior { yaw_range: (0.2, 0.1), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_pose(&PosePrior::Orbit(prior), &mut rng), Err(Error::Config(_))));
        assert!(sample_pose(&PosePrior::Empirical(vec![]), &mut rng).is_err());
    }

    #[test]
    fn yaw_mean_is_centered_within_three_standard_errors() {
        let q = std::f64::consts::FRAC_PI_4;
        let prior = OrbitPrior { yaw_range: (-q, q), ..Default::default() };
        let pp = PosePrior::Orbit(prior.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let yaws: Vec<f64> = (0..n)
            .map(|_| sample_pose(&pp, &mut rng).unwrap().orbit_angles(prior.lookat).0)
            .collect();
        let mean = yaws.iter().sum::<f64>() / n as f64;
        // uniform on [-q, q]: sd = 2q/√12
        let se = 2.0 * q / 12f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(yaws.iter().all(|y| y.abs() <= q + 1e-12));
    }

    #[test]
    fn principal_ray_hits_lookat() {
        let prior = OrbitPrior { lookat: [0.1, -0.2, 0.05], ..Default::default() };
        let pp = PosePrior::Orbit(prior.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let pose = sample_pose(&pp, &mut rng).unwrap();
            let o = pose.center();
            let d = pose.rotate([0.0, 0.0, 1.0]);
            let to = sub(prior.lookat, o);
            let t = dot(to, d);
            let closest = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            assert!(norm(sub(closest, prior.lookat)) < 1e-6);
        }
    }

    #[test]
    fn canonical_single_pixel_ray_points_forward() {
        let pose = CameraPose::new(I4, intrinsic_matrix(1.0, 0.5, 0.5)).unwrap();
        let rays = generate_rays(&pose, 1).unwrap();
        assert_eq!(rays.directions, vec![[0.0, 0.0, 1.0]]);
        assert_eq!(rays.origins, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn rays_are_unit_and_corner_angle_matches_trigonometry() {
        let focal = 1.7;
        let pose = CameraPose::orbit(0.2, 0.1, 2.7, [0.0; 3], intrinsic_matrix(focal, 0.5, 0.5)).unwrap();
        let res = 16;
        let rays = generate_rays(&pose, res).unwrap();
        assert!(rays.directions.iter().all(|d| (norm(*d) - 1.0).abs() < 1e-7));
        assert!(rays.origins.iter().all(|o| *o == pose.center()));
        let corner = rays.directions[0];
        let angle = dot(corner, pose.forward()).clamp(-1.0, 1.0).acos();
        let half = 0.5 - 0.5 / res as f64; // corner pixel center offset, normalized
        let expected = ((2.0 * half * half).sqrt() / focal).atan();
        assert!((angle - expected).abs() < 1e-6);
    }

    #[test]
    fn singular_intrinsic_is_rejected() {
        let pose = CameraPose::new(I4, [[0.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.0, 0.0, 1.0]]).unwrap();
        assert!(generate_rays(&pose, 4).is_err());
        assert!(generate_rays(&CameraPose::new(I4, I3).unwrap(), 0).is_err());
    }

    #[test]
    fn projection_of_center_ray_is_principal_point() {
        let pose = CameraPose::orbit(-0.3, 0.2, 2.7, [0.0; 3], intrinsic_matrix(2.0, 0.5, 0.5)).unwrap();
        let (u, v) = pose.project([0.0, 0.0, 0.0]).unwrap();
        assert!((u - 0.5).abs() < 1e-12 && (v - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn flatten_round_trip_is_exact(yaw in -3.0f64..3.0, pitch in -1.4f64..1.4, r in 0.5f64..5.0, f in 0.3f64..5.0) {
            let pose = CameraPose::orbit(yaw, pitch, r, [0.0; 3], intrinsic_matrix(f, 0.5, 0.5)).unwrap();
            let flat = pose.flatten();
            let back = CameraPose::from_flat(&flat).unwrap();
            prop_assert_eq!(back, pose);
            prop_assert_eq!(back.flatten(), flat);
        }

        #[test]
        fn ray_generation_is_deterministic(yaw in -1.0f64..1.0, res in 1usize..8) {
            let pose = CameraPose::orbit(yaw, 0.1, 2.7, [0.0; 3], intrinsic_matrix(2.0, 0.5, 0.5)).unwrap();
            prop_assert_eq!(generate_rays(&pose, res).unwrap(), generate_rays(&pose, res).unwrap());
        }
    }
}
