//! Procedural multi-view dataset: spheres with an optional asymmetric bump,
//! rendered by an analytic ray tracer.
//!
//! Images are `[H, W, 3]` tensors with values in `[0, 1]`, row 0 at the top.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use metaux_tensor::io::{load_tnsr, save_tnsr};
use metaux_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BACKGROUND: f64 = 0.1;
/// Direction towards the light; lies in the x = 0 plane.
pub const LIGHT: [f64; 3] = [0.0, std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];
pub const AMBIENT: f64 = 0.25;
pub const DIFFUSE: f64 = 0.75;
/// Focal length in pixels per pixel of image width.
pub const FOCAL_PER_PIXEL: f64 = 1.125;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_add(0x5EED)))
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Camera on a sphere around the origin, looking at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub radius: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub focal: f64,
    pub height: usize,
    pub width: usize,
}

pub struct CameraBasis {
    pub position: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    pub forward: [f64; 3],
}

impl Pose {
    /// Square image of side `size` with the default focal length.
    pub fn new(radius: f64, azimuth: f64, elevation: f64, size: usize) -> Self {
        Pose {
            radius,
            azimuth,
            elevation,
            focal: FOCAL_PER_PIXEL * size as f64,
            height: size,
            width: size,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        let (sp, cp) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        [self.radius * ce * sp, self.radius * se, self.radius * ce * cp]
    }

    pub fn basis(&self) -> CameraBasis {
        let position = self.position();
        let forward = normalize3([-position[0], -position[1], -position[2]]);
        let right = normalize3(cross3(forward, [0.0, 1.0, 0.0]));
        let up = cross3(right, forward);
        CameraBasis {
            position,
            right,
            up,
            forward,
        }
    }

    /// Unit direction through the centre of pixel (row, col).
    pub fn pixel_direction(&self, basis: &CameraBasis, row: usize, col: usize) -> [f64; 3] {
        let x = (col as f64 + 0.5 - self.width as f64 / 2.0) / self.focal;
        let y = (self.height as f64 / 2.0 - row as f64 - 0.5) / self.focal;
        normalize3([
            basis.forward[0] + x * basis.right[0] + y * basis.up[0],
            basis.forward[1] + x * basis.right[1] + y * basis.up[1],
            basis.forward[2] + x * basis.right[2] + y * basis.up[2],
        ])
    }

    /// Conditioning features (sin φ, cos φ, sin ψ, cos ψ, ρ).
    pub fn embedding(&self) -> [f64; 5] {
        let (sp, cp) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        [sp, cp, se, ce, self.radius]
    }

    fn to_field(self) -> String {
        format!("{},{},{},{},{},{}", self.radius, self.azimuth, self.elevation, self.focal, self.height, self.width)
    }

    fn from_field(s: &str) -> std::result::Result<Pose, String> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 6 {
            return Err(format!("pose needs 6 fields, got `{s}`"));
        }
        let f = |i: usize| parts[i].parse::<f64>().map_err(|e| format!("`{}`: {e}", parts[i]));
        let u = |i: usize| parts[i].parse::<usize>().map_err(|e| format!("`{}`: {e}", parts[i]));
        Ok(Pose {
            radius: f(0)?,
            azimuth: f(1)?,
            elevation: f(2)?,
            focal: f(3)?,
            height: u(4)?,
            width: u(5)?,
        })
    }
}

/// The camera reflected through the x = 0 plane.
pub fn mirror_pose(pose: &Pose) -> Pose {
    Pose {
        azimuth: -pose.azimuth,
        ..*pose
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub radius: f64,
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    pub dy: f64,
    pub bump: Option<Bump>,
}

impl SceneSpec {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, symmetric_fraction: f64) -> Self {
        let radius = rng.random_range(0.3..0.7);
        let hue = rng.random_range(0.0..1.0);
        let saturation = rng.random_range(0.5..0.9);
        let value = rng.random_range(0.6..0.95);
        let dy = rng.random_range(-0.2..0.2);
        let asymmetric = rng.random_range(0.0..1.0) >= symmetric_fraction;
        let bump = if asymmetric {
            let dir = normalize3([0.8, rng.random_range(-0.3..0.3), rng.random_range(0.3..0.6)]);
            let br = radius * rng.random_range(0.25..0.35);
            Some(Bump {
                center: [radius * dir[0], dy + radius * dir[1], radius * dir[2]],
                radius: br,
            })
        } else {
            None
        };
        SceneSpec {
            radius,
            hue,
            saturation,
            value,
            dy,
            bump,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.bump.is_none()
    }

    pub fn rgb(&self) -> [f64; 3] {
        hsv_to_rgb(self.hue, self.saturation, self.value)
    }

    /// (r, h, dy, bump flag).
    pub fn attributes(&self) -> [f64; 4] {
        [self.radius, self.hue, self.dy, if self.bump.is_some() { 1.0 } else { 0.0 }]
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue in [0, 1), or `None` for grey pixels.
pub fn rgb_hue(rgb: [f64; 3]) -> Option<f64> {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    let min = rgb[0].min(rgb[1]).min(rgb[2]);
    let d = max - min;
    if d <= 1e-12 {
        return None;
    }
    let h = if max == rgb[0] {
        ((rgb[1] - rgb[2]) / d).rem_euclid(6.0)
    } else if max == rgb[1] {
        (rgb[2] - rgb[0]) / d + 2.0
    } else {
        (rgb[0] - rgb[1]) / d + 4.0
    };
    Some((h / 6.0).rem_euclid(1.0))
}

/// Circular distance between two hues.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn intersect_sphere(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<f64> {
    let oc = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
    let b = dot3(d, oc);
    let cc = dot3(oc, oc) - r * r;
    let disc = b * b - cc;
    if disc < 0.0 || r <= 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 0.0).then_some(t)
}

/// Traced image `[H, W, 3]` and foreground mask `[H, W]`.
pub fn trace_with_mask(spec: &SceneSpec, pose: &Pose) -> (Tensor, Vec<bool>) {
    let basis = pose.basis();
    let o = basis.position;
    let rgb = spec.rgb();
    let main = [0.0, spec.dy, 0.0];
    let mut data = Vec::with_capacity(pose.height * pose.width * 3);
    let mut mask = Vec::with_capacity(pose.height * pose.width);
    for row in 0..pose.height {
        for col in 0..pose.width {
            let d = pose.pixel_direction(&basis, row, col);
            let mut hit = intersect_sphere(o, d, main, spec.radius).map(|t| (t, main));
            if let Some(b) = spec.bump {
                if let Some(tb) = intersect_sphere(o, d, b.center, b.radius) {
                    if hit.is_none_or(|(t, _)| tb < t) {
                        hit = Some((tb, b.center));
                    }
                }
            }
            match hit {
                Some((t, c)) => {
                    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                    let n = normalize3([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
                    let shade = AMBIENT + DIFFUSE * dot3(n, LIGHT).max(0.0);
                    data.extend(rgb.iter().map(|v| v * shade));
                    mask.push(true);
                }
                None => {
                    data.extend([BACKGROUND; 3]);
                    mask.push(false);
                }
            }
        }
    }
    (Tensor::new(data, &[pose.height, pose.width, 3]).expect("traced image shape"), mask)
}

pub fn trace_scene(spec: &SceneSpec, pose: &Pose) -> Tensor {
    trace_with_mask(spec, pose).0
}

/// Mirrors an `[H, W, 3]` image left to right; differentiable.
pub fn hflip(image: &Tensor) -> metaux_tensor::Result<Tensor> {
    image.flip(1)
}

/// Pixels that differ from the background by more than `tol` in any channel.
pub fn foreground_mask(image: &Tensor, tol: f64) -> Vec<bool> {
    image
        .data()
        .chunks_exact(3)
        .map(|px| px.iter().any(|v| (v - BACKGROUND).abs() > tol))
        .collect()
}

/// Circular mean hue over masked pixels.
pub fn mean_hue(image: &Tensor, mask: &[bool]) -> Option<f64> {
    let (mut s, mut c, mut n) = (0.0, 0.0, 0usize);
    for (px, &m) in image.data().chunks_exact(3).zip(mask) {
        if !m {
            continue;
        }
        if let Some(h) = rgb_hue([px[0], px[1], px[2]]) {
            let a = std::f64::consts::TAU * h;
            s += a.sin();
            c += a.cos();
            n += 1;
        }
    }
    (n > 0).then(|| (s.atan2(c) / std::f64::consts::TAU).rem_euclid(1.0))
}

#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub id: usize,
    pub spec: SceneSpec,
    pub views: Vec<(Pose, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub views: usize,
    pub seed: u64,
    pub image_size: usize,
    pub camera_radius: f64,
    pub elevation: f64,
    pub max_azimuth: f64,
    pub symmetric_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_scenes: 512,
            views: 4,
            seed: 0,
            image_size: 32,
            camera_radius: 2.5,
            elevation: 0.1,
            max_azimuth: 0.5,
            symmetric_fraction: 0.8,
        }
    }
}

impl DatasetConfig {
    /// Evenly spaced azimuths in [−max, max].
    pub fn azimuths(&self) -> Vec<f64> {
        if self.views == 1 {
            return vec![0.0];
        }
        (0..self.views)
            .map(|i| -self.max_azimuth + 2.0 * self.max_azimuth * i as f64 / (self.views - 1) as f64)
            .collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.azimuths()
            .into_iter()
            .map(|a| Pose::new(self.camera_radius, a, self.elevation, self.image_size))
            .collect()
    }
}

pub fn generate_scenes(cfg: &DatasetConfig) -> Vec<SceneRecord> {
    let poses = cfg.poses();
    (0..cfg.n_scenes)
        .map(|id| {
            let mut rng = rng_for(cfg.seed, id as u64);
            let spec = SceneSpec::sample(&mut rng, cfg.symmetric_fraction);
            let views = poses.iter().map(|p| (*p, trace_scene(&spec, p))).collect();
            SceneRecord { id, spec, views }
        })
        .collect()
}

const META_HEADER: &str = "id\tradius\thue\tsaturation\tvalue\tdy\tbump\tbump_x\tbump_y\tbump_z\tbump_radius\tposes";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn ppm_bytes(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    save_tnsr(path, image)?;
    write_file(&path.with_extension("ppm"), &ppm_bytes(image))
}

pub fn view_path(root: &Path, scene: usize, view: usize) -> PathBuf {
    root.join(format!("scene_{scene:04}")).join(format!("view_{view:02}.tnsr"))
}

pub fn write_dataset(records: &[SceneRecord], root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut meta = String::from(META_HEADER);
    meta.push('\n');
    for rec in records {
        let s = &rec.spec;
        let b = s.bump.unwrap_or(Bump {
            center: [0.0; 3],
            radius: 0.0,
        });
        let poses: Vec<String> = rec.views.iter().map(|(p, _)| p.to_field()).collect();
        writeln!(
            meta,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            rec.id,
            s.radius,
            s.hue,
            s.saturation,
            s.value,
            s.dy,
            u8::from(s.bump.is_some()),
            b.center[0],
            b.center[1],
            b.center[2],
            b.radius,
            poses.join(";")
        )
        .expect("write to string");
        let dir = root.join(format!("scene_{:04}", rec.id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (v, (_, img)) in rec.views.iter().enumerate() {
            save_image(&view_path(root, rec.id, v), img)?;
        }
    }
    let path = root.join("meta.txt");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(meta.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn generate_dataset(cfg: &DatasetConfig, root: &Path) -> Result<Vec<SceneRecord>> {
    let records = generate_scenes(cfg);
    write_dataset(&records, root)?;
    Ok(records)
}

fn parse_meta_line(line: &str) -> std::result::Result<(usize, SceneSpec, Vec<Pose>), String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 12 {
        return Err(format!("expected 12 columns, got {}", cols.len()));
    }
    let f = |i: usize| cols[i].parse::<f64>().map_err(|e| format!("column {i} `{}`: {e}", cols[i]));
    let id = cols[0].parse::<usize>().map_err(|e| format!("id: {e}"))?;
    let bump = match cols[6] {
        "0" => None,
        "1" => Some(Bump {
            center: [f(7)?, f(8)?, f(9)?],
            radius: f(10)?,
        }),
        other => return Err(format!("bump flag `{other}`")),
    };
    let spec = SceneSpec {
        radius: f(1)?,
        hue: f(2)?,
        saturation: f(3)?,
        value: f(4)?,
        dy: f(5)?,
        bump,
    };
    let poses = if cols[11].is_empty() {
        Vec::new()
    } else {
        cols[11].split(';').map(Pose::from_field).collect::<std::result::Result<_, _>>()?
    };
    Ok((id, spec, poses))
}

pub fn load_dataset(root: &Path) -> Result<Vec<SceneRecord>> {
    let path = root.join("meta.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(META_HEADER) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "missing or unexpected header".into(),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let (id, spec, poses) = parse_meta_line(line).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            msg,
        })?;
        let views = poses
            .into_iter()
            .enumerate()
            .map(|(v, p)| Ok((p, load_tnsr(view_path(root, id, v))?)))
            .collect::<Result<Vec<_>>>()?;
        records.push(SceneRecord { id, spec, views });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(radius: f64, bump: bool) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = SceneSpec::sample(&mut rng, if bump { 0.0 } else { 1.0 });
        s.radius = radius;
        s
    }

    #[test]
    fn mirror_pose_examples() {
        let p = Pose::new(2.5, 0.0, 0.1, 32);
        assert_eq!(mirror_pose(&p), p);
        let q = Pose::new(2.5, 0.4, 0.1, 32);
        assert_eq!(mirror_pose(&q).azimuth, -0.4);
        assert_eq!(mirror_pose(&mirror_pose(&q)), q);
    }

    #[test]
    fn empty_scene_is_background() {
        let img = trace_scene(&spec(0.0, false), &Pose::new(2.5, 0.3, 0.1, 16));
        assert!(img.data().iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn symmetric_scenes_are_mirror_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = SceneSpec::sample(&mut rng, 1.0);
            let phi = rng.random_range(-0.6..0.6);
            let pose = Pose::new(2.5, phi, rng.random_range(-0.3..0.3), 24);
            let a = hflip(&trace_scene(&s, &mirror_pose(&pose))).unwrap();
            let b = trace_scene(&s, &pose);
            assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn bump_breaks_symmetry() {
        let s = spec(0.5, true);
        let pose = Pose::new(2.5, 0.3, 0.1, 32);
        let a = hflip(&trace_scene(&s, &mirror_pose(&pose))).unwrap();
        assert!(a.max_abs_diff(&trace_scene(&s, &pose)) > 0.05);
    }

    #[test]
    fn silhouette_grows_with_radius() {
        let pose = Pose::new(2.5, 0.2, 0.1, 32);
        let area = |r: f64| trace_with_mask(&spec(r, false), &pose).1.iter().filter(|m| **m).count();
        let mut prev = area(0.2);
        for r in [0.3, 0.4, 0.5, 0.6, 0.7] {
            let a = area(r);
            assert!(a > prev, "r={r}: {a} <= {prev}");
            prev = a;
        }
        assert!(area(0.6) > area(0.3));
    }

    #[test]
    fn mean_hue_tracks_spec_hue() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let s = SceneSpec::sample(&mut rng, 1.0);
            let (img, mask) = trace_with_mask(&s, &Pose::new(2.5, 0.0, 0.1, 32));
            let h = mean_hue(&img, &mask).unwrap();
            assert!(hue_distance(h, s.hue) < 0.05, "{h} vs {}", s.hue);
        }
    }

    #[test]
    fn geometry_fits_the_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let s = SceneSpec::sample(&mut rng, 0.5);
            assert!(s.dy.abs() + s.radius <= 1.0);
            if let Some(b) = s.bump {
                assert!(b.center.iter().all(|c| c.abs() + b.radius <= 1.0));
            }
        }
    }

    #[test]
    fn images_are_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let img = trace_scene(&SceneSpec::sample(&mut rng, 0.5), &Pose::new(2.5, -0.5, 0.1, 16));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hsv_roundtrip_hue() {
        for i in 0..60 {
            let h = i as f64 / 60.0;
            let back = rgb_hue(hsv_to_rgb(h, 0.7, 0.8)).unwrap();
            assert!(hue_distance(h, back) < 1e-12);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_roundtrips() {
        let cfg = DatasetConfig {
            n_scenes: 2,
            views: 3,
            seed: 7,
            image_size: 8,
            ..DatasetConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let recs = generate_dataset(&cfg, a.path()).unwrap();
        generate_dataset(&cfg, b.path()).unwrap();
        for rel in ["meta.txt", "scene_0001/view_02.tnsr", "scene_0000/view_00.ppm"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        for (x, y) in recs.iter().zip(&loaded) {
            assert_eq!(x.spec, y.spec);
            for ((p, i), (q, j)) in x.views.iter().zip(&y.views) {
                assert_eq!(p, q);
                assert!(i.bit_eq(j));
            }
        }
        let other = generate_scenes(&DatasetConfig { seed: 8, ..cfg.clone() });
        assert!(other.iter().zip(&recs).any(|(x, y)| x.spec.attributes() != y.spec.attributes()));
    }

    #[test]
    fn empty_dataset_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_scenes: 0,
            ..DatasetConfig::default()
        };
        generate_dataset(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("meta.txt")).unwrap();
        assert_eq!(text, format!("{META_HEADER}\n"));
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn ppm_header() {
        let img = Tensor::full(&[2, 3, 3], 1.0);
        let bytes = ppm_bytes(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
    }
}
