//! Emission-absorption volume rendering of tri-plane fields.

use metaux_tensor::nn::ParamSet;
use metaux_tensor::{Result, Tensor};
use rand::Rng;

use crate::generator::Generator;
use crate::scene::{rng_for, Pose, BACKGROUND};
use crate::triplane::{query_deformed, OffsetTriPlane, TriPlane};

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub samples: usize,
    /// Rays span `[ρ − margin, ρ + margin]` around the camera distance.
    pub depth_margin: f64,
    pub background: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples: 32,
            depth_margin: 1.8,
            background: BACKGROUND,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Bin midpoints.
    Deterministic,
    /// One uniformly jittered sample per bin, seeded.
    Stochastic(u64),
}

#[derive(Clone, Debug)]
pub struct RayBundle {
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    pub near: f64,
    pub far: f64,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// One ray per pixel centre, in row-major pixel order.
pub fn make_rays(pose: &Pose, cfg: &RenderConfig) -> RayBundle {
    let basis = pose.basis();
    let mut directions = Vec::with_capacity(pose.height * pose.width);
    for row in 0..pose.height {
        for col in 0..pose.width {
            directions.push(pose.pixel_direction(&basis, row, col));
        }
    }
    RayBundle {
        origins: vec![basis.position; directions.len()],
        directions,
        near: pose.radius - cfg.depth_margin,
        far: pose.radius + cfg.depth_margin,
    }
}

/// Per-ray sample depths and deltas, both `n_rays × samples` row-major.
pub fn sample_depths(n_rays: usize, samples: usize, near: f64, far: f64, mode: SampleMode) -> (Vec<f64>, Vec<f64>) {
    let bin = (far - near) / samples as f64;
    let mut ts = Vec::with_capacity(n_rays * samples);
    match mode {
        SampleMode::Deterministic => {
            for _ in 0..n_rays {
                ts.extend((0..samples).map(|i| near + (i as f64 + 0.5) * bin));
            }
        }
        SampleMode::Stochastic(seed) => {
            let mut rng = rng_for(seed, 0xD1CE);
            for _ in 0..n_rays {
                ts.extend((0..samples).map(|i| near + (i as f64 + rng.random_range(0.0..1.0)) * bin));
            }
        }
    }
    let mut deltas = Vec::with_capacity(ts.len());
    for ray in ts.chunks_exact(samples) {
        deltas.extend(ray.windows(2).map(|w| w[1] - w[0]));
        deltas.push(far - ray[samples - 1]);
    }
    (ts, deltas)
}

/// Alpha compositing. `sigma` and `delta` are `[N, S]`, `color` is
/// `[N, S, 3]`. Returns pixel colours `[N, 3]` and weights `[N, S]`.
pub fn composite(sigma: &Tensor, color: &Tensor, delta: &Tensor, background: f64) -> Result<(Tensor, Tensor)> {
    let (n, s) = (sigma.shape()[0], sigma.shape()[1]);
    let optical = sigma.mul(delta)?;
    let transmittance = optical.cumsum_exclusive(1, false)?.neg()?.exp()?;
    let alpha = optical.neg()?.exp()?.neg()?.add_scalar(1.0)?;
    let weights = transmittance.mul(&alpha)?;
    let rgb = weights.reshape(&[n, s, 1])?.mul(color)?.sum_axis(1, false)?;
    let mass = weights.sum_axis(1, true)?;
    let pixels = rgb.add(&mass.neg()?.add_scalar(1.0)?.scale(background)?)?;
    Ok((pixels, weights))
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// `[H, W, 3]`.
    pub image: Tensor,
    /// Accumulated weight per pixel, `[H, W]`.
    pub opacity: Tensor,
}

impl RenderOutput {
    /// Pixels whose accumulated opacity exceeds one half.
    pub fn silhouette(&self) -> Vec<bool> {
        self.opacity.data().iter().map(|&a| a > 0.5).collect()
    }
}

/// Renders the field given by feature planes (and optional offsets) through
/// the generator's decoder.
pub fn render_planes(
    gen: &Generator,
    params: &ParamSet,
    planes: &TriPlane,
    offsets: Option<&OffsetTriPlane>,
    pose: &Pose,
    cfg: &RenderConfig,
    mode: SampleMode,
) -> Result<RenderOutput> {
    let rays = make_rays(pose, cfg);
    let (n, s) = (rays.len(), cfg.samples);
    let (ts, deltas) = sample_depths(n, s, rays.near, rays.far, mode);
    let mut pts = Vec::with_capacity(n * s * 3);
    for (r, ray_ts) in ts.chunks_exact(s).enumerate() {
        let (o, d) = (rays.origins[r], rays.directions[r]);
        for &t in ray_ts {
            pts.extend([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
        }
    }
    let points = Tensor::new(pts, &[n * s, 3])?;
    let features = query_deformed(planes, offsets, &points)?;
    let (sigma, color) = gen.decode(params, &features)?;
    let delta = Tensor::new(deltas, &[n, s])?;
    let (pixels, weights) = composite(&sigma.reshape(&[n, s])?, &color.reshape(&[n, s, 3])?, &delta, cfg.background)?;
    Ok(RenderOutput {
        image: pixels.reshape(&[pose.height, pose.width, 3])?,
        opacity: weights.sum_axis(1, false)?.reshape(&[pose.height, pose.width])?,
    })
}

/// `G(ω; θ)` seen from `pose`, optionally with deformation offsets.
pub fn render(
    gen: &Generator,
    params: &ParamSet,
    offsets: Option<&OffsetTriPlane>,
    latent: &Tensor,
    pose: &Pose,
    cfg: &RenderConfig,
    mode: SampleMode,
) -> Result<RenderOutput> {
    let planes = gen.synthesize(params, latent)?;
    render_planes(gen, params, &planes, offsets, pose, cfg, mode)
}
