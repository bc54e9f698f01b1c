use convrender::camera::{LatentCode, OrbitPrior, PosePrior, sample_pose};
use convrender::render::{
    composite, hierarchical_resample, render_view, sample_pdf, stratified_samples, RenderConfig,
};
use convrender::triplane::{procedural_triplanes, BlobDecoder, ProceduralConfig, TriPlanes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single_blob() -> ProceduralConfig {
    ProceduralConfig { blobs: 1, landmarks: Vec::new(), ..ProceduralConfig::default() }
}

#[test]
fn constant_density_transmittance_matches_fine_grid() {
    let sigma = 2.3;
    let coarse = stratified_samples(1, 0.0, 1.0, 64, None).unwrap();
    let fine = stratified_samples(1, 0.0, 1.0, 10_000, None).unwrap();
    let a = composite(&vec![sigma; 64], &vec![1.0; 64], &coarse, 1).unwrap().accumulated[0];
    let b = composite(&vec![sigma; 10_000], &vec![1.0; 10_000], &fine, 1).unwrap().accumulated[0];
    let exact = 1.0 - (-sigma).exp();
    // the first sample sits half a bin in, so both quadratures miss e^{-σ}
    // over [0, δ/2); the oracle bound is the coarse grid's version of that.
    let bound = (-sigma * 0.0).exp() - (-sigma * 0.5 / 64.0).exp();
    assert!((b - exact).abs() <= (-sigma * 0.0).exp() - (-sigma * 0.5 / 10_000.0).exp() + 1e-12);
    assert!((a - exact).abs() <= bound + 1e-12);
    assert!((a - b).abs() <= bound + 1e-12);
}

#[test]
fn splitting_a_constant_interval_is_invisible() {
    let whole = stratified_samples(1, 0.0, 1.0, 1, Some(&mut ChaCha8Rng::seed_from_u64(0))).unwrap();
    let mut whole = whole;
    whole.depths = vec![0.0];
    whole.deltas = vec![1.0];
    let mut halves = whole.clone();
    halves.offsets = vec![0, 2];
    halves.depths = vec![0.0, 0.5];
    halves.deltas = vec![0.5, 0.5];
    let one = composite(&[1.7], &[0.3, 0.9], &whole, 2).unwrap();
    let two = composite(&[1.7, 1.7], &[0.3, 0.9, 0.3, 0.9], &halves, 2).unwrap();
    for (a, b) in one.output.iter().zip(&two.output) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn uniform_weights_give_uniform_fine_samples() {
    let coarse = stratified_samples(1, 0.0, 1.0, 16, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let fine = hierarchical_resample(&coarse, &[1.0; 16], 0.0, 1.0, n, Some(&mut rng)).unwrap();
    let mut d = fine.depths.clone();
    d.sort_by(f64::total_cmp);
    let ks = d
        .iter()
        .enumerate()
        .map(|(i, x)| (x - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - x).abs()))
        .fold(0.0, f64::max);
    // asymptotic Kolmogorov critical value at α = 0.01
    assert!(ks < 1.628 / (n as f64).sqrt(), "KS statistic {ks}");
}

#[test]
fn inverse_cdf_median_matches_bisection() {
    let edges = [0.0, 0.1, 0.35, 0.5, 0.8, 1.0];
    let w = [0.2, 0.05, 0.4, 0.1, 0.25];
    let total: f64 = w.iter().sum();
    let cdf = |t: f64| {
        let mut acc = 0.0;
        for k in 0..w.len() {
            let (a, b) = (edges[k], edges[k + 1]);
            if t >= b {
                acc += w[k];
            } else if t > a {
                acc += w[k] * (t - a) / (b - a);
            }
        }
        acc / total
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!((sample_pdf(&edges, &w, 0.5) - 0.5 * (lo + hi)).abs() < 1e-6);
}

#[test]
fn empty_field_renders_black() {
    let planes = TriPlanes::new(8, 4, 1.0, vec![-100.0; 3 * 8 * 8 * 4]).unwrap();
    let dec = BlobDecoder::new(1, 4).unwrap();
    let pose = OrbitPrior::default().canonical().unwrap();
    let out = render_view(&planes, &dec, &pose, 8, &RenderConfig::default(), None).unwrap();
    assert!(out.features.iter().all(|v| v.abs() < 1e-100));
    assert!(out.accumulated.iter().all(|a| *a < 1e-100));
}

#[test]
fn evaluation_mode_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = LatentCode::sample(8, &mut rng);
    let cfg = ProceduralConfig::default();
    let (planes, _) = procedural_triplanes(&z, &cfg, 32, cfg.channels(), 1.0).unwrap();
    let dec = BlobDecoder::new(cfg.blobs, cfg.channels()).unwrap();
    let pose = sample_pose(&PosePrior::Orbit(OrbitPrior::default()), &mut rng).unwrap();
    let rc = RenderConfig { n_coarse: 16, n_fine: 16, ..RenderConfig::default() };
    let a = render_view(&planes, &dec, &pose, 16, &rc, None).unwrap();
    let b = render_view(&planes, &dec, &pose, 16, &rc, None).unwrap();
    assert_eq!(a, b);
    let total: f64 = a.weights.iter().sum::<f64>();
    assert!((total - a.accumulated.iter().sum::<f64>()).abs() < 1e-9);
}

/// Alpha-weighted image centroid in pixel units.
fn centroid(alpha: &[f64], res: usize) -> (f64, f64) {
    let (mut su, mut sv, mut s) = (0.0, 0.0, 0.0);
    for i in 0..res {
        for j in 0..res {
            let a = alpha[i * res + j];
            su += a * (j as f64 + 0.5);
            sv += a * (i as f64 + 0.5);
            s += a;
        }
    }
    (su / s, sv / s)
}

#[test]
fn blob_centroid_lands_on_its_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = single_blob();
    let dec = BlobDecoder::new(1, cfg.channels()).unwrap();
    let prior = PosePrior::Orbit(OrbitPrior::default());
    let res = 64;
    for _ in 0..20 {
        let z = LatentCode::sample(8, &mut rng);
        let (planes, scene) = procedural_triplanes(&z, &cfg, 64, cfg.channels(), 1.5).unwrap();
        let pose = sample_pose(&prior, &mut rng).unwrap();
        let out = render_view(&planes, &dec, &pose, res, &RenderConfig::default(), None).unwrap();
        let (cu, cv) = centroid(&out.accumulated, res);
        let (u, v) = pose.project(scene.blobs[0].center).unwrap();
        let err = ((cu - u * res as f64).powi(2) + (cv - v * res as f64).powi(2)).sqrt();
        assert!(err < 2.0, "centroid off by {err} px");
    }
}

#[test]
fn rolled_camera_rotates_the_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ProceduralConfig::default();
    let z = LatentCode::sample(8, &mut rng);
    let (planes, _) = procedural_triplanes(&z, &cfg, 64, cfg.channels(), 1.5).unwrap();
    let dec = BlobDecoder::new(cfg.blobs, cfg.channels()).unwrap();
    let pose = OrbitPrior::default().pose_at(rng.random_range(-0.3..0.3), 0.1).unwrap();
    let rolled = pose.rolled(std::f64::consts::FRAC_PI_2).unwrap();
    let res = 32;
    let rc = RenderConfig::default();
    let a = render_view(&planes, &dec, &pose, res, &rc, None).unwrap();
    let b = render_view(&planes, &dec, &rolled, res, &rc, None).unwrap();
    let mut diff = 0.0;
    for c in 0..3 {
        for i in 0..res {
            for j in 0..res {
                let rot = b.features[(c * res + i) * res + j];
                let orig = a.features[(c * res + j) * res + (res - 1 - i)];
                diff += (rot - orig).abs();
            }
        }
    }
    let mean = diff / (3 * res * res) as f64;
    assert!(mean < 0.02, "mean abs diff {mean}");
}
