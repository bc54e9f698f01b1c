//! Two-pass (stratified + importance) volumetric ray marching over tri-plane
//! fields.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, CameraPose, Rays, Vec3};
use crate::error::{validation, Result};
use crate::triplane::{FieldDecoder, TriPlanes, RADIANCE_CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { near: 1.7, far: 3.7, n_coarse: 48, n_fine: 48 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near.is_finite() && self.far.is_finite() && self.near < self.far) {
            return Err(validation(format!("render bounds need near < far (got {}, {})", self.near, self.far)));
        }
        if self.n_coarse == 0 {
            return Err(validation("at least one coarse sample per ray is required"));
        }
        Ok(())
    }

    pub fn samples_per_ray(&self) -> usize {
        self.n_coarse + self.n_fine
    }
}

/// Depth samples for a set of rays. Ray `r` owns
/// `depths[offsets[r]..offsets[r + 1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub offsets: Vec<usize>,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn n_rays(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn ray(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }

    fn from_depths(offsets: Vec<usize>, depths: Vec<f64>, far: f64) -> Self {
        let mut deltas = vec![0.0; depths.len()];
        for r in 0..offsets.len() - 1 {
            let (a, b) = (offsets[r], offsets[r + 1]);
            for k in a..b {
                let next = if k + 1 < b { depths[k + 1] } else { far };
                deltas[k] = (next - depths[k]).max(0.0);
            }
        }
        Self { offsets, depths, deltas }
    }

    /// Sample positions `origin + depth·direction`.
    pub fn positions(&self, rays: &Rays) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.depths.len());
        for r in 0..self.n_rays() {
            let (o, d) = (rays.origins[r], rays.directions[r]);
            for &t in &self.depths[self.ray(r)] {
                out.push([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
            }
        }
        out
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// One sample per uniform bin of `[near, far]`; jittered within the bin when
/// an rng is given, bin midpoints otherwise.
pub fn stratified_samples(
    n_rays: usize,
    near: f64,
    far: f64,
    n: usize,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<RaySamples> {
    if !(near < far) {
        return Err(validation(format!("near ({near}) must be < far ({far})")));
    }
    if n == 0 {
        return Err(validation("need at least one sample per ray"));
    }
    let step = (far - near) / n as f64;
    let mut depths = Vec::with_capacity(n_rays * n);
    for _ in 0..n_rays {
        for k in 0..n {
            let u = match reborrow(&mut rng) {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            depths.push(near + (k as f64 + u) * step);
        }
    }
    let offsets = (0..=n_rays).map(|r| r * n).collect();
    Ok(RaySamples::from_depths(offsets, depths, far))
}

/// Per-ray compositing result.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    /// `n_rays × channels`
    pub output: Vec<f64>,
    /// Same layout as the samples.
    pub weights: Vec<f64>,
    pub accumulated: Vec<f64>,
}

fn check_composite_inputs(density: &[f64], features: &[f64], samples: &RaySamples, channels: usize) -> Result<()> {
    let n = samples.depths.len();
    if density.len() != n || features.len() != n * channels {
        return Err(validation("composite inputs are not aligned with the samples"));
    }
    if let Some(d) = density.iter().find(|d| !(**d >= 0.0)) {
        return Err(validation(format!("negative or NaN density {d} passed to compositing")));
    }
    Ok(())
}

/// Alpha compositing onto a zero background:
/// `w_k = T_k (1 − e^{−σ_k δ_k})`, output `Σ_k w_k f_k`.
pub fn composite(density: &[f64], features: &[f64], samples: &RaySamples, channels: usize) -> Result<Composite> {
    check_composite_inputs(density, features, samples, channels)?;
    let n_rays = samples.n_rays();
    let mut output = vec![0.0; n_rays * channels];
    let mut weights = vec![0.0; density.len()];
    let mut accumulated = vec![0.0; n_rays];
    for r in 0..n_rays {
        let out = &mut output[r * channels..(r + 1) * channels];
        let mut trans = 1.0;
        for k in samples.ray(r) {
            let decay = (-density[k] * samples.deltas[k]).exp();
            let w = trans * (1.0 - decay);
            weights[k] = w;
            if w != 0.0 {
                for (o, f) in out.iter_mut().zip(&features[k * channels..(k + 1) * channels]) {
                    *o += w * f;
                }
            }
            trans *= decay;
        }
        accumulated[r] = 1.0 - trans;
    }
    Ok(Composite { output, weights, accumulated })
}

/// Gradients of `Σ grad_out · composite(..).output` with respect to the
/// densities and features.
pub fn composite_backward(
    density: &[f64],
    features: &[f64],
    samples: &RaySamples,
    channels: usize,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_composite_inputs(density, features, samples, channels)?;
    if grad_out.len() != samples.n_rays() * channels {
        return Err(validation("composite output gradient has the wrong length"));
    }
    let mut g_sigma = vec![0.0; density.len()];
    let mut g_feat = vec![0.0; features.len()];
    for r in 0..samples.n_rays() {
        let go = &grad_out[r * channels..(r + 1) * channels];
        let range = samples.ray(r);
        // forward pass: transmittance after each sample and weighted scores
        let mut t_after = Vec::with_capacity(range.len());
        let mut ws = Vec::with_capacity(range.len());
        let mut trans = 1.0;
        for k in range.clone() {
            let decay = (-density[k] * samples.deltas[k]).exp();
            let w = trans * (1.0 - decay);
            let s: f64 = features[k * channels..(k + 1) * channels].iter().zip(go).map(|(f, g)| f * g).sum();
            for (gf, g) in g_feat[k * channels..(k + 1) * channels].iter_mut().zip(go) {
                *gf = w * g;
            }
            trans *= decay;
            t_after.push(trans);
            ws.push((w * s, s));
        }
        // dL/dσ_k = δ_k (T_{k+1} s_k − Σ_{j>k} w_j s_j)
        let mut tail = 0.0;
        for (i, k) in range.enumerate().rev() {
            g_sigma[k] = samples.deltas[k] * (t_after[i] * ws[i].1 - tail);
            tail += ws[i].0;
        }
    }
    Ok((g_sigma, g_feat))
}

/// Inverse CDF of the piecewise-constant density with bin `edges`
/// (length `weights.len() + 1`) evaluated at `u ∈ [0, 1]`. All-zero weights
/// fall back to a uniform density over the bins.
pub fn sample_pdf(edges: &[f64], weights: &[f64], u: f64) -> f64 {
    assert_eq!(edges.len(), weights.len() + 1);
    let total: f64 = weights.iter().sum();
    let uniform = !(total > 0.0);
    let mass = |k: usize| if uniform { (edges[k + 1] - edges[k]) / (edges[weights.len()] - edges[0]) } else { weights[k] / total };
    let mut cdf = 0.0;
    let mut last_nonzero = 0;
    for k in 0..weights.len() {
        let m = mass(k);
        if m <= 0.0 {
            continue;
        }
        last_nonzero = k;
        if u < cdf + m {
            let t = ((u - cdf) / m).clamp(0.0, 1.0);
            return edges[k] + t * (edges[k + 1] - edges[k]);
        }
        cdf += m;
    }
    edges[last_nonzero + 1]
}

/// Importance samples drawn from the coarse weights. Bin `k` spans the
/// midpoints around coarse depth `k` (first and last bins extend to
/// near/far). Quantiles are `(i + 0.5)/n` without an rng.
pub fn hierarchical_resample(
    coarse: &RaySamples,
    weights: &[f64],
    near: f64,
    far: f64,
    n_fine: usize,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<RaySamples> {
    if weights.len() != coarse.depths.len() {
        return Err(validation("coarse weights are not aligned with the coarse samples"));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(validation(format!("negative compositing weight {w}")));
    }
    let mut depths = Vec::with_capacity(coarse.n_rays() * n_fine);
    let mut edges = Vec::new();
    let mut us = vec![0.0; n_fine];
    for r in 0..coarse.n_rays() {
        let d = &coarse.depths[coarse.ray(r)];
        edges.clear();
        edges.push(near);
        edges.extend(d.windows(2).map(|p| 0.5 * (p[0] + p[1])));
        edges.push(far);
        for (i, u) in us.iter_mut().enumerate() {
            *u = match reborrow(&mut rng) {
                Some(g) => g.random::<f64>(),
                None => (i as f64 + 0.5) / n_fine as f64,
            };
        }
        us.sort_by(f64::total_cmp);
        let w = &weights[coarse.ray(r)];
        depths.extend(us.iter().map(|&u| sample_pdf(&edges, w, u)));
    }
    let offsets = (0..=coarse.n_rays()).map(|r| r * n_fine).collect();
    Ok(RaySamples::from_depths(offsets, depths, far))
}

/// Sorted union of two sample sets; exact duplicate depths are dropped so
/// depths stay strictly increasing.
pub fn merge_samples(a: &RaySamples, b: &RaySamples, far: f64) -> RaySamples {
    assert_eq!(a.n_rays(), b.n_rays());
    let mut offsets = vec![0];
    let mut depths = Vec::with_capacity(a.depths.len() + b.depths.len());
    let mut buf = Vec::new();
    for r in 0..a.n_rays() {
        buf.clear();
        buf.extend_from_slice(&a.depths[a.ray(r)]);
        buf.extend_from_slice(&b.depths[b.ray(r)]);
        buf.sort_by(f64::total_cmp);
        buf.dedup();
        depths.extend_from_slice(&buf);
        offsets.push(depths.len());
    }
    RaySamples::from_depths(offsets, depths, far)
}

/// Rendered feature image for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub resolution: usize,
    /// `[32, h, w]`, channel-major; channels 0..3 are the low-res RGB.
    pub features: Vec<f64>,
    /// Final-pass compositing weights, indexed by `samples`.
    pub weights: Vec<f64>,
    pub samples: RaySamples,
    /// `[h, w]`
    pub accumulated: Vec<f64>,
}

impl RenderOutput {
    pub fn rgb(&self) -> &[f64] {
        &self.features[..3 * self.resolution * self.resolution]
    }
}

/// Queries and decodes every sample of every view: returns densities and
/// radiance rows aligned with the concatenated samples.
fn evaluate_field(
    fields: &[&TriPlanes],
    decoder: &dyn FieldDecoder,
    rays: &[Rays],
    samples: &[RaySamples],
) -> (Vec<f64>, Vec<f64>) {
    let total: usize = samples.iter().map(|s| s.depths.len()).sum();
    let c = decoder.in_channels();
    let mut feats = vec![0.0; total * c];
    let mut at = 0;
    for ((planes, rays), s) in fields.iter().zip(rays).zip(samples) {
        for x in s.positions(rays) {
            planes.query_into(x, &mut feats[at * c..(at + 1) * c]);
            at += 1;
        }
    }
    let mut density = vec![0.0; total];
    let mut radiance = vec![0.0; total * RADIANCE_CHANNELS];
    decoder.decode_batch(&feats, &mut density, &mut radiance);
    (density, radiance)
}

/// Renders several views at once; all sample buffers of the batch are live
/// simultaneously, so memory grows with `views × pixels × samples`.
pub fn render_batch(
    fields: &[&TriPlanes],
    decoder: &dyn FieldDecoder,
    poses: &[CameraPose],
    resolution: usize,
    cfg: &RenderConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Vec<RenderOutput>> {
    cfg.validate()?;
    if fields.len() != poses.len() {
        return Err(validation("one field per pose is required"));
    }
    for f in fields {
        if f.channels() != decoder.in_channels() {
            return Err(validation(format!(
                "decoder expects {} channels, planes have {}",
                decoder.in_channels(),
                f.channels()
            )));
        }
    }
    let rays: Vec<Rays> = poses.iter().map(|p| generate_rays(p, resolution)).collect::<Result<_>>()?;
    let n_rays = resolution * resolution;
    let mut coarse = Vec::with_capacity(rays.len());
    for _ in &rays {
        coarse.push(stratified_samples(n_rays, cfg.near, cfg.far, cfg.n_coarse, reborrow(&mut rng))?);
    }

    let finals: Vec<RaySamples> = if cfg.n_fine == 0 {
        coarse
    } else {
        let (density, radiance) = evaluate_field(fields, decoder, &rays, &coarse);
        let mut at = 0;
        let mut out = Vec::with_capacity(coarse.len());
        for s in &coarse {
            let n = s.depths.len();
            let comp = composite(
                &density[at..at + n],
                &radiance[at * RADIANCE_CHANNELS..(at + n) * RADIANCE_CHANNELS],
                s,
                RADIANCE_CHANNELS,
            )?;
            let fine = hierarchical_resample(s, &comp.weights, cfg.near, cfg.far, cfg.n_fine, reborrow(&mut rng))?;
            out.push(merge_samples(s, &fine, cfg.far));
            at += n;
        }
        out
    };

    let (density, radiance) = evaluate_field(fields, decoder, &rays, &finals);
    let mut at = 0;
    let mut outputs = Vec::with_capacity(finals.len());
    for s in finals {
        let n = s.depths.len();
        let comp = composite(
            &density[at..at + n],
            &radiance[at * RADIANCE_CHANNELS..(at + n) * RADIANCE_CHANNELS],
            &s,
            RADIANCE_CHANNELS,
        )?;
        at += n;
        let mut features = vec![0.0; RADIANCE_CHANNELS * n_rays];
        for (r, row) in comp.output.chunks(RADIANCE_CHANNELS).enumerate() {
            for (ch, v) in row.iter().enumerate() {
                features[ch * n_rays + r] = *v;
            }
        }
        outputs.push(RenderOutput {
            resolution,
            features,
            weights: comp.weights,
            samples: s,
            accumulated: comp.accumulated,
        });
    }
    Ok(outputs)
}

/// Renders a single view; deterministic when `rng` is `None`.
pub fn render_view(
    planes: &TriPlanes,
    decoder: &dyn FieldDecoder,
    pose: &CameraPose,
    resolution: usize,
    cfg: &RenderConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<RenderOutput> {
    Ok(render_batch(&[planes], decoder, std::slice::from_ref(pose), resolution, cfg, rng)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use convrender_autograd::gradcheck::{numeric_gradient, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_ray(depths: Vec<f64>, far: f64) -> RaySamples {
        let n = depths.len();
        RaySamples::from_depths(vec![0, n], depths, far)
    }

    #[test]
    fn midpoint_mode_gives_bin_centers() {
        let s = stratified_samples(1, 0.0, 1.0, 4, None).unwrap();
        assert_eq!(s.depths, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(stratified_samples(1, 1.0, 1.0, 4, None).is_err());
    }

    #[test]
    fn jittered_samples_stay_in_their_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = stratified_samples(50, 2.0, 4.0, 8, Some(&mut rng)).unwrap();
        for r in 0..50 {
            for (k, d) in s.depths[s.ray(r)].iter().enumerate() {
                let lo = 2.0 + 0.25 * k as f64;
                assert!(*d >= lo && *d < lo + 0.25);
            }
            assert!(s.deltas[s.ray(r)].iter().all(|d| *d >= 0.0));
        }
    }

    #[test]
    fn empty_space_composites_to_zero() {
        let s = single_ray(vec![0.1, 0.5, 0.9], 1.0);
        let c = composite(&[0.0; 3], &[1.0; 3], &s, 1).unwrap();
        assert_eq!(c.output, vec![0.0]);
        assert_eq!(c.weights, vec![0.0; 3]);
        assert!(composite(&[-1.0, 0.0, 0.0], &[1.0; 3], &s, 1).is_err());
    }

    #[test]
    fn opaque_sample_takes_all_weight() {
        let s = single_ray(vec![0.0], 1.0);
        let c = composite(&[50.0], &[0.3, 0.7], &s, 2).unwrap();
        assert!((c.weights[0] - 1.0).abs() < 1e-6);
        assert!((c.output[0] - 0.3).abs() < 1e-6 && (c.output[1] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let s = stratified_samples(2, 0.0, 2.0, n, Some(&mut rng)).unwrap();
        let sigma: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.0..3.0)).collect();
        let feats: Vec<f64> = (0..2 * n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let go: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |sg: &[f64], f: &[f64]| {
            composite(sg, f, &s, 3).unwrap().output.iter().zip(&go).map(|(a, b)| a * b).sum::<f64>()
        };
        let (gs, gf) = composite_backward(&sigma, &feats, &s, 3, &go).unwrap();
        let ns = numeric_gradient(&sigma, 1e-6, |p| loss(p, &feats));
        let nf = numeric_gradient(&feats, 1e-6, |p| loss(&sigma, p));
        assert!(relative_error(&gs, &ns) < 1e-6);
        assert!(relative_error(&gf, &nf) < 1e-6);
    }

    #[test]
    fn delta_pdf_keeps_fine_samples_in_bin() {
        let coarse = stratified_samples(1, 0.0, 1.0, 8, None).unwrap();
        let mut w = vec![0.0; 8];
        w[5] = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fine = hierarchical_resample(&coarse, &w, 0.0, 1.0, 64, Some(&mut rng)).unwrap();
        assert!(fine.depths.iter().all(|d| (0.625..=0.75).contains(d)));
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let coarse = stratified_samples(1, 0.0, 1.0, 4, None).unwrap();
        let fine = hierarchical_resample(&coarse, &[0.0; 4], 0.0, 1.0, 4, None).unwrap();
        assert_eq!(fine.depths, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn merged_depths_are_strictly_increasing() {
        let a = single_ray(vec![0.1, 0.3, 0.5], 1.0);
        let b = single_ray(vec![0.3, 0.4], 1.0);
        let m = merge_samples(&a, &b, 1.0);
        assert_eq!(m.depths, vec![0.1, 0.3, 0.4, 0.5]);
        assert!((m.deltas.iter().sum::<f64>() - 0.9).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn weights_are_a_subprobability(seed in 0u64..500, n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = stratified_samples(1, 0.5, 3.0, n, Some(&mut rng)).unwrap();
            let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
            let c = composite(&sigma, &vec![1.0; n], &s, 1).unwrap();
            prop_assert!(c.weights.iter().all(|w| *w >= 0.0));
            let total: f64 = c.weights.iter().sum();
            prop_assert!(total <= 1.0 + 1e-6);
            prop_assert!((total - c.accumulated[0]).abs() < 1e-12);
        }
    }
}
