//! The 3D-aware generator: mapping MLP, ω-conditioned convolutional trunk
//! producing tri-planes, and the point decoder.

use metaux_tensor::nn::{sgd_step, weight_key, Adam, AdamConfig, Conv2d, FiLMBlock, Init, Linear, ParamSet};
use metaux_tensor::{Result, Tape, Tensor, TensorError};
use rand::Rng;

use crate::error::{ensure_finite, Error, Result as CoreResult};
use crate::losses::{adversarial_g, discriminator_tape_loss, Discriminator, LossStack};
use crate::renderer::{render, RenderConfig, SampleMode};
use crate::scene::{rng_for, Pose, SceneRecord};
use crate::triplane::TriPlane;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_width: usize,
    pub mapping_layers: usize,
    pub const_channels: usize,
    pub const_res: usize,
    /// Output width of each upsampling block; each block doubles resolution.
    pub block_widths: Vec<usize>,
    pub plane_channels: usize,
    pub decoder_hidden: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            z_dim: 32,
            w_dim: 32,
            mapping_width: 32,
            mapping_layers: 2,
            const_channels: 64,
            const_res: 4,
            block_widths: vec![64, 32, 32],
            plane_channels: 16,
            decoder_hidden: 32,
        }
    }
}

impl GeneratorConfig {
    pub fn plane_res(&self) -> usize {
        self.const_res << self.block_widths.len()
    }
}

const CONST_KEY: &str = "synth.const";
const LEAK: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    mapping: Vec<Linear>,
    blocks: Vec<FiLMBlock>,
    out_conv: Conv2d,
    decoder: [Linear; 3],
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Self {
        let mut mapping = Vec::new();
        let mut width = cfg.z_dim;
        for i in 0..cfg.mapping_layers {
            let out = if i + 1 == cfg.mapping_layers { cfg.w_dim } else { cfg.mapping_width };
            mapping.push(Linear::new(format!("map.{i}"), width, out));
            width = out;
        }
        let mut blocks = Vec::new();
        let mut ch = cfg.const_channels;
        for (i, &w) in cfg.block_widths.iter().enumerate() {
            blocks.push(FiLMBlock::new(&format!("synth.block{i}"), ch, w, 3, 1, cfg.w_dim));
            ch = w;
        }
        let out_conv = Conv2d::new("synth.out", ch, 3 * cfg.plane_channels, 3, 1);
        let h = cfg.decoder_hidden;
        let decoder = [
            Linear::new("dec.0", cfg.plane_channels, h),
            Linear::new("dec.1", h, h),
            Linear::new("dec.2", h, 4),
        ];
        Generator {
            cfg,
            mapping,
            blocks,
            out_conv,
            decoder,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for l in &self.mapping {
            l.init(&mut p, Init::Scaled(1.0), rng)?;
        }
        let c = &self.cfg;
        p.insert(CONST_KEY, Tensor::randn(&[1, c.const_channels, c.const_res, c.const_res], 1.0, rng))?;
        for b in &self.blocks {
            b.init(&mut p, Init::Scaled(2f64.sqrt()), rng)?;
        }
        self.out_conv.init(&mut p, Init::Scaled(1.0), rng)?;
        for l in &self.decoder {
            l.init(&mut p, Init::Scaled(1.0), rng)?;
        }
        Ok(p)
    }

    /// Names of the convolution weights that receive predicted residuals,
    /// in a fixed order.
    pub fn conv_layers(&self) -> Vec<String> {
        self.blocks.iter().map(|b| weight_key(&b.conv.name)).collect()
    }

    /// `(name, shape)` of each targeted convolution weight.
    pub fn conv_layer_shapes(&self) -> Vec<(String, [usize; 4])> {
        self.blocks.iter().map(|b| (weight_key(&b.conv.name), b.conv.weight_shape())).collect()
    }

    /// z `[d_z]` or `[N, d_z]` to ω of matching leading shape.
    pub fn map(&self, params: &ParamSet, z: &Tensor) -> Result<Tensor> {
        let squeeze = z.rank() == 1;
        let mut h = if squeeze { z.reshape(&[1, z.numel()])? } else { z.clone() };
        for (i, l) in self.mapping.iter().enumerate() {
            h = l.forward(params, &h)?;
            if i + 1 < self.mapping.len() {
                h = h.leaky_relu(LEAK)?;
            }
        }
        if squeeze {
            h.reshape(&[self.cfg.w_dim])
        } else {
            Ok(h)
        }
    }

    /// Tri-plane for a single latent ω `[d_w]`.
    pub fn synthesize(&self, params: &ParamSet, latent: &Tensor) -> Result<TriPlane> {
        if latent.numel() != self.cfg.w_dim {
            return Err(TensorError::ShapeMismatch {
                op: "synthesize",
                lhs: latent.shape().to_vec(),
                rhs: vec![self.cfg.w_dim],
            });
        }
        let cond = latent.reshape(&[1, self.cfg.w_dim])?;
        let mut x = params.get(CONST_KEY)?.clone();
        for b in &self.blocks {
            x = b.forward(params, &x.upsample2x()?, &cond)?.leaky_relu(LEAK)?;
        }
        TriPlane::from_stacked(&self.out_conv.forward(params, &x)?)
    }

    /// Features `[M, C]` to densities `[M]` and colours `[M, 3]`.
    pub fn decode(&self, params: &ParamSet, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.decoder[0].forward(params, features)?.softplus()?;
        let h = self.decoder[1].forward(params, &h)?.softplus()?;
        let out = self.decoder[2].forward(params, &h)?;
        let m = out.shape()[0];
        let sigma = out.slice(1, 0, 1)?.softplus()?.reshape(&[m])?;
        let color = out.slice(1, 1, 3)?.sigmoid()?;
        Ok((sigma, color))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Views per step.
    pub batch: usize,
    pub lr: f64,
    pub latent_lr: f64,
    pub latent_reg: f64,
    pub adversarial: bool,
    pub adv_weight: f64,
    pub adv_warmup: usize,
    pub disc_lr: f64,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 4000,
            batch: 4,
            lr: 1e-3,
            latent_lr: 1e-2,
            latent_reg: 1e-3,
            adversarial: true,
            adv_weight: 0.005,
            adv_warmup: 1000,
            disc_lr: 2e-4,
            seed: 0,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ParamSet,
    /// One ω per training scene, in record order.
    pub latents: Vec<Tensor>,
    pub disc: Option<ParamSet>,
    /// Mean objective per step.
    pub trace: Vec<f64>,
}

fn latent_key(k: usize) -> String {
    format!("latent.{k}")
}

/// Stacks latents into a `[n, d_w]` table.
pub fn latent_table(latents: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<Tensor> = latents.iter().map(|l| l.reshape(&[1, l.numel()])).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = refs.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Splits a `[n, d_w]` table into rows.
pub fn latent_rows(table: &Tensor) -> Result<Vec<Tensor>> {
    if table.rank() != 2 {
        return Err(TensorError::Invalid {
            op: "latent_rows",
            msg: format!("expected a [n, d] table, got {:?}", table.shape()),
        });
    }
    let (n, d) = (table.shape()[0], table.shape()[1]);
    (0..n).map(|k| table.slice(0, k, 1)?.reshape(&[d])).collect()
}

/// Jointly fits generator weights and one latent per scene by reconstruction
/// of every training view, with an optional adversarial term after warmup.
pub fn pretrain_autodecoder(gen: &Generator, records: &[SceneRecord], losses: &LossStack, cfg: &PretrainConfig) -> CoreResult<Pretrained> {
    if records.is_empty() || records.iter().any(|r| r.views.is_empty()) {
        return Err(Error::Invalid("pretraining needs at least one scene with views".into()));
    }
    let mut params = gen.init(&mut rng_for(cfg.seed, 1))?;
    let mut latent_rng = rng_for(cfg.seed, 2);
    let mut latents = ParamSet::new();
    for k in 0..records.len() {
        latents.insert(latent_key(k), Tensor::randn(&[gen.cfg.w_dim], 1.0, &mut latent_rng))?;
    }
    let size = records[0].views[0].1.shape()[0];
    let disc = Discriminator::new(size);
    let mut disc_params = if cfg.adversarial { Some(disc.init(&mut rng_for(cfg.seed, 4))?) } else { None };
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut latent_opt = Adam::new(AdamConfig::with_lr(cfg.latent_lr));
    let mut disc_opt = Adam::new(AdamConfig::with_lr(cfg.disc_lr));
    let mut pick = rng_for(cfg.seed, 3);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<(usize, usize)> = (0..cfg.batch.max(1))
            .map(|_| {
                let k = pick.random_range(0..records.len());
                (k, pick.random_range(0..records[k].views.len()))
            })
            .collect();
        let mut scenes: Vec<usize> = batch.iter().map(|b| b.0).collect();
        scenes.sort_unstable();
        scenes.dedup();
        let sampled = latents.filter(|n| scenes.iter().any(|&k| n == latent_key(k)));
        let adv_on = cfg.adversarial && step >= cfg.adv_warmup;

        let tape = Tape::new();
        let tp = params.track(&tape);
        let tl = sampled.track(&tape);
        let mut total = Tensor::scalar(0.0);
        let mut fakes = Vec::new();
        for &(k, v) in &batch {
            let (pose, x) = &records[k].views[v];
            let w = tl.get(&latent_key(k))?;
            let y = render(gen, &tp, None, w, pose, &cfg.render, SampleMode::Deterministic)?.image;
            let mut l = losses.total(x, &y)?.add(&w.square()?.sum()?.scale(cfg.latent_reg)?)?;
            if let (true, Some(dp)) = (adv_on, &disc_params) {
                l = l.add(&adversarial_g(&disc, dp, &y)?.scale(cfg.adv_weight)?)?;
            }
            total = total.add(&l)?;
            fakes.push((x.clone(), y.detach()));
        }
        let loss = total.scale(1.0 / batch.len() as f64)?;
        ensure_finite(loss.item(), "pretrain", step)?;
        trace.push(loss.item());
        let g = tp.grads_of(&loss, false)?;
        let gl = tl.grads_of(&loss, false)?;
        params = opt.step(&params, &g)?;
        let updated = latent_opt.step(&sampled, &gl)?;
        for (n, t) in updated.iter() {
            latents.set(n, t.clone())?;
        }

        if let (true, Some(dp)) = (adv_on, disc_params.as_mut()) {
            let (real, fake) = &fakes[0];
            let (_tape, tracked, dl) = discriminator_tape_loss(&disc, dp, real, fake)?;
            ensure_finite(dl.item(), "discriminator", step)?;
            let dg = tracked.grads_of(&dl, false)?;
            *dp = disc_opt.step(dp, &dg)?;
        }
    }
    let latents = (0..records.len()).map(|k| latents.get(&latent_key(k)).cloned()).collect::<Result<_>>()?;
    Ok(Pretrained {
        params,
        latents,
        disc: disc_params,
        trace,
    })
}

/// Gradient descent on every generator weight at a fixed latent. A step
/// whose loss exceeds the current one is retried at half the rate, so the
/// returned trace (loss before each step, then the final loss) never rises.
#[allow(clippy::too_many_arguments)]
pub fn finetune_generator(
    gen: &Generator,
    params: &ParamSet,
    losses: &LossStack,
    x: &Tensor,
    pose: &Pose,
    latent: &Tensor,
    steps: usize,
    lr: f64,
    rcfg: &RenderConfig,
) -> CoreResult<(ParamSet, Vec<f64>)> {
    let eval = |p: &ParamSet| -> Result<(Tape, ParamSet, Tensor)> {
        let tape = Tape::new();
        let tp = p.track(&tape);
        let y = render(gen, &tp, None, latent, pose, rcfg, SampleMode::Deterministic)?.image;
        let l = losses.total(x, &y)?;
        Ok((tape, tp, l))
    };
    let mut cur = params.clone();
    let (_t, mut tracked, mut loss) = eval(&cur)?;
    ensure_finite(loss.item(), "finetune", 0)?;
    let mut trace = vec![loss.item()];
    let mut rate = lr;
    for step in 0..steps {
        let g = tracked.grads_of(&loss, false)?.detach();
        let mut accepted = false;
        for _ in 0..30 {
            let cand = sgd_step(&cur, &g, rate)?;
            let (_t2, tc, lc) = eval(&cand)?;
            if lc.item().is_finite() && lc.item() <= loss.item() {
                cur = cand;
                tracked = tc;
                loss = lc;
                accepted = true;
                break;
            }
            rate *= 0.5;
        }
        if !accepted {
            trace.push(loss.item());
            continue;
        }
        ensure_finite(loss.item(), "finetune", step + 1)?;
        trace.push(loss.item());
    }
    Ok((cur, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossWeights, Proxies};
    use crate::renderer::render_planes;
    use crate::scene::{hflip, mirror_pose, DatasetConfig};
    use metaux_tensor::check::{numerical_grad, rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> Generator {
        Generator::new(GeneratorConfig {
            const_channels: 8,
            block_widths: vec![8, 8],
            plane_channels: 4,
            decoder_hidden: 8,
            ..GeneratorConfig::default()
        })
    }

    fn stack() -> LossStack {
        LossStack::new(Proxies::new().unwrap(), LossWeights::default())
    }

    #[test]
    fn identical_latents_give_identical_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = tiny();
        let p = gen.init(&mut rng).unwrap();
        let w = Tensor::randn(&[32], 1.0, &mut rng);
        let a = gen.synthesize(&p, &w).unwrap();
        let b = gen.synthesize(&p, &w.clone()).unwrap();
        for (x, y) in a.planes.iter().zip(&b.planes) {
            assert!(x.bit_eq(y));
        }
        assert_eq!(a.resolution(), 16);
        assert!(gen.synthesize(&p, &Tensor::zeros(&[31])).is_err());
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = tiny();
        let p = gen.init(&mut rng).unwrap();
        let w = Tensor::randn(&[32], 1.0, &mut rng);
        let probe = Tensor::randn(&[16, 4], 1.0, &mut rng);
        let pts = Tensor::uniform(&[16, 3], -1.0, 1.0, &mut rng);
        let f = |w: &Tensor| -> Result<Tensor> { gen.synthesize(&p, w)?.query(&pts)?.mul(&probe)?.sum() };
        let tape = Tape::new();
        let wl = tape.leaf(&w);
        let g = metaux_tensor::grad(&f(&wl).unwrap(), &[&wl], false).unwrap().remove(0);
        let n = numerical_grad(&w, 1e-5, |v| Ok(f(v)?.item())).unwrap();
        assert!(rel_error(&g, &n) < 1e-4, "{}", rel_error(&g, &n));
    }

    #[test]
    fn latent_lipschitz_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gen = Generator::new(GeneratorConfig::default());
        let p = gen.init(&mut rng).unwrap();
        let w = Tensor::randn(&[32], 1.0, &mut rng);
        let e = Tensor::randn(&[32], 1.0, &mut rng);
        let e = e.scale(1e-6 / e.norm()).unwrap();
        let a = gen.synthesize(&p, &w).unwrap();
        let b = gen.synthesize(&p, &w.add(&e).unwrap()).unwrap();
        let diff: f64 = a.planes.iter().zip(&b.planes).map(|(x, y)| x.sub(y).unwrap().norm().powi(2)).sum::<f64>().sqrt();
        let lipschitz = diff / 1e-6;
        eprintln!("latent->plane Lipschitz estimate: {lipschitz:.4}");
        assert!(lipschitz.is_finite());
    }

    #[test]
    fn full_render_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = tiny();
        let p = gen.init(&mut rng).unwrap();
        let w = Tensor::randn(&[32], 1.0, &mut rng);
        let pose = Pose::new(2.5, 0.2, 0.1, 8);
        let cfg = RenderConfig { samples: 8, ..RenderConfig::default() };
        let probe = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let f = |p: &ParamSet, w: &Tensor| -> Result<Tensor> {
            render(&gen, p, None, w, &pose, &cfg, SampleMode::Deterministic)?.image.mul(&probe)?.sum()
        };
        let tape = Tape::new();
        let tp = p.track(&tape);
        let wl = tape.leaf(&w);
        let loss = f(&tp, &wl).unwrap();
        let gw = metaux_tensor::grad(&loss, &[&wl], false).unwrap().remove(0);
        let nw = numerical_grad(&w, 1e-5, |v| Ok(f(&p, v)?.item())).unwrap();
        assert!(rel_error(&gw, &nw) < 1e-3);
        let gp = tp.grads_of(&loss, false).unwrap();
        for name in ["synth.block1.conv.weight", "dec.0.weight", "synth.out.bias"] {
            let n = numerical_grad(p.get(name).unwrap(), 1e-5, |v| {
                let mut q = p.clone();
                q.set(name, v.clone())?;
                Ok(f(&q, &w)?.item())
            })
            .unwrap();
            let e = rel_error(gp.get(name).unwrap(), &n);
            assert!(e < 1e-3, "{name}: {e:e}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_renders_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = tiny();
        let p = gen.init(&mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("generator.ckpt");
        p.save(&path).unwrap();
        let q = ParamSet::load(&path).unwrap();
        let w = Tensor::randn(&[32], 1.0, &mut rng);
        let pose = Pose::new(2.5, -0.3, 0.1, 8);
        let cfg = RenderConfig { samples: 8, ..RenderConfig::default() };
        let a = render(&gen, &p, None, &w, &pose, &cfg, SampleMode::Deterministic).unwrap();
        let b = render(&gen, &q, None, &w, &pose, &cfg, SampleMode::Deterministic).unwrap();
        assert!(a.image.bit_eq(&b.image));
    }

    #[test]
    fn conv_enumeration_is_stable() {
        let a = Generator::new(GeneratorConfig::default());
        let b = Generator::new(GeneratorConfig::default());
        assert_eq!(a.conv_layers(), b.conv_layers());
        assert_eq!(a.conv_layers(), ["synth.block0.conv.weight", "synth.block1.conv.weight", "synth.block2.conv.weight"]);
        let p = a.init(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (name, shape) in a.conv_layer_shapes() {
            assert_eq!(p.get(&name).unwrap().shape(), &shape);
        }
    }

    #[test]
    fn symmetrized_field_renders_mirror_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gen = tiny();
        let p = gen.init(&mut rng).unwrap();
        let planes = gen.synthesize(&p, &Tensor::randn(&[32], 1.0, &mut rng)).unwrap();
        // x ↦ −x is a flip of the plane columns for xy and xz; yz has no x axis
        let sym = |t: &Tensor| t.add(&t.flip(2).unwrap()).unwrap().scale(0.5).unwrap();
        let planes = crate::triplane::TriPlane::new(sym(&planes.planes[0]), planes.planes[1].clone(), sym(&planes.planes[2])).unwrap();
        let cfg = RenderConfig { samples: 16, ..RenderConfig::default() };
        for phi in [0.2, 0.5] {
            let pose = Pose::new(2.5, phi, 0.1, 10);
            let a = render_planes(&gen, &p, &planes, None, &pose, &cfg, SampleMode::Deterministic).unwrap();
            let b = render_planes(&gen, &p, &planes, None, &mirror_pose(&pose), &cfg, SampleMode::Deterministic).unwrap();
            assert!(hflip(&b.image).unwrap().max_abs_diff(&a.image) < 1e-6);
        }
    }

    fn tiny_records(n: usize, size: usize) -> Vec<SceneRecord> {
        crate::scene::generate_scenes(&DatasetConfig {
            n_scenes: n,
            image_size: size,
            seed: 9,
            ..DatasetConfig::default()
        })
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let gen = tiny();
        let recs = tiny_records(2, 8);
        let cfg = PretrainConfig { steps: 0, ..PretrainConfig::default() };
        let out = pretrain_autodecoder(&gen, &recs, &stack(), &cfg).unwrap();
        assert!(out.params.bit_eq(&gen.init(&mut rng_for(0, 1)).unwrap()));
        assert!(out.trace.is_empty());
        assert!(pretrain_autodecoder(&gen, &[], &stack(), &cfg).is_err());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let gen = tiny();
        let recs = tiny_records(3, 8);
        let cfg = PretrainConfig {
            steps: 6,
            batch: 2,
            adv_warmup: 3,
            render: RenderConfig { samples: 8, ..RenderConfig::default() },
            ..PretrainConfig::default()
        };
        let a = pretrain_autodecoder(&gen, &recs, &stack(), &cfg).unwrap();
        let b = pretrain_autodecoder(&gen, &recs, &stack(), &cfg).unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert!(a.disc.unwrap().bit_eq(&b.disc.unwrap()));
        assert_eq!(a.trace, b.trace);
        assert!(!a.params.bit_eq(&gen.init(&mut rng_for(0, 1)).unwrap()));
    }

    #[test]
    fn latent_table_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[5], 1.0, &mut rng)).collect();
        let table = latent_table(&rows).unwrap();
        assert_eq!(table.shape(), &[3, 5]);
        for (a, b) in latent_rows(&table).unwrap().iter().zip(&rows) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn finetune_zero_steps_and_descent() {
        let gen = tiny();
        let recs = tiny_records(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = gen.init(&mut rng).unwrap();
        let w = Tensor::randn(&[32], 1.0, &mut rng);
        let (pose, x) = &recs[0].views[0];
        let cfg = RenderConfig { samples: 8, ..RenderConfig::default() };
        let (same, trace) = finetune_generator(&gen, &p, &stack(), x, pose, &w, 0, 0.1, &cfg).unwrap();
        assert!(same.bit_eq(&p));
        assert_eq!(trace.len(), 1);
        let (_, trace) = finetune_generator(&gen, &p, &stack(), x, pose, &w, 100, 1.0, &cfg).unwrap();
        assert_eq!(trace.len(), 101);
        assert!(trace.windows(2).all(|t| t[1] <= t[0]));
        assert!(trace[100] < trace[0]);
    }
}
