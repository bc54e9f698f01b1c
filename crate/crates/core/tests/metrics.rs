use std::sync::OnceLock;

use convrender::camera::{CameraPose, LatentCode};
use convrender::metrics::{
    pose_accuracy, pose_probes, train_pose_regressor, ImageGenerator, PoseRegressor, RegressorConfig,
};
use convrender::teacher::{Teacher, TeacherConfig};
use convrender_autograd::Tensor;

fn teacher() -> &'static Teacher {
    static T: OnceLock<Teacher> = OnceLock::new();
    T.get_or_init(|| Teacher::new(TeacherConfig { lr_res: 16, ..TeacherConfig::default() }, 3).unwrap())
}

fn regressor() -> &'static PoseRegressor {
    static R: OnceLock<PoseRegressor> = OnceLock::new();
    R.get_or_init(|| train_pose_regressor(teacher(), &RegressorConfig { held_out: 512, ..RegressorConfig::default() }).unwrap())
}

#[test]
fn regressor_fits_within_a_tenth_of_the_pose_variance() {
    let var = teacher().config().prior.angle_variance();
    let mse = regressor().held_out_mse().unwrap();
    assert!(mse < 0.1 * var, "held-out MSE {mse} vs variance {var}");
}

#[test]
fn regressor_training_is_deterministic() {
    let cfg = RegressorConfig { samples: 32, held_out: 8, epochs: 3, ..RegressorConfig::default() };
    let a = train_pose_regressor(teacher(), &cfg).unwrap();
    let b = train_pose_regressor(teacher(), &cfg).unwrap();
    assert_eq!(a.held_out_mse().unwrap().to_bits(), b.held_out_mse().unwrap().to_bits());
}

#[test]
fn shuffled_labels_leave_only_the_pose_variance() {
    let var = teacher().config().prior.angle_variance();
    let cfg = RegressorConfig { shuffle_labels: true, held_out: 512, ..RegressorConfig::default() };
    let mse = train_pose_regressor(teacher(), &cfg).unwrap().held_out_mse().unwrap();
    assert!(mse > 0.8 * var && mse < 2.0 * var, "shuffled-label MSE {mse} vs variance {var}");
}

#[test]
fn teacher_is_consistent_with_its_own_regressor() {
    let t = teacher();
    let reg = regressor();
    let (zs, poses) = pose_probes(&t.config().prior, t.config().z_dim, 512, 11).unwrap();
    let mse = pose_accuracy(t, &zs, &poses, t.config().prior.lookat, reg).unwrap();
    let fit = reg.held_out_mse().unwrap();
    assert!(mse < 1.1 * fit, "teacher pose MSE {mse} vs regressor fit {fit}");
}

/// Ignores the pose entirely.
struct Constant(Tensor);

impl ImageGenerator for Constant {
    fn generate(&self, zs: &[LatentCode], _: &[CameraPose]) -> convrender::Result<Tensor> {
        let parts: Vec<&Tensor> = zs.iter().map(|_| &self.0).collect();
        Ok(Tensor::concat(&parts, 0))
    }
}

#[test]
fn pose_blind_generator_scores_the_probe_variance() {
    let t = teacher();
    let reg = regressor();
    let prior = &t.config().prior;
    let (zs, poses) = pose_probes(prior, t.config().z_dim, 256, 12).unwrap();
    let image = t.generate(&zs[..1], &[prior.canonical().unwrap()]).unwrap();
    let mse = pose_accuracy(&Constant(image.clone()), &zs, &poses, prior.lookat, reg).unwrap();
    // One fixed prediction p against angles t_i: MSE = Var(t) + |p − mean(t)|²
    // per angle, averaged over (yaw, pitch).
    let p = reg.predict(&image).unwrap()[0];
    let truth: Vec<(f64, f64)> = poses.iter().map(|c| c.orbit_angles(prior.lookat)).collect();
    let n = truth.len() as f64;
    let (my, mp) = (truth.iter().map(|t| t.0).sum::<f64>() / n, truth.iter().map(|t| t.1).sum::<f64>() / n);
    let vy = truth.iter().map(|t| (t.0 - my).powi(2)).sum::<f64>() / n;
    let vp = truth.iter().map(|t| (t.1 - mp).powi(2)).sum::<f64>() / n;
    let expected = 0.5 * (vy + vp + (p.0 - my).powi(2) + (p.1 - mp).powi(2));
    assert!((mse - expected).abs() < 1e-12, "{mse} vs {expected}");
    // The empirical spread matches the uniform prior's variance.
    let var = prior.angle_variance();
    assert!((0.5 * (vy + vp) - var).abs() < 0.15 * var, "probe variance {} vs {var}", 0.5 * (vy + vp));
    assert!(mse >= 0.5 * (vy + vp));
}
