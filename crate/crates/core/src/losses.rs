//! Reconstruction losses: pixel L2, perceptual and identity proxies,
//! non-saturating adversarial terms with R1, their weighted total, and the
//! mirrored-view flip loss.

use std::path::Path;

use metaux_tensor::nn::{bias_key, Conv2d, Init, Linear, ParamSet};
use metaux_tensor::{grad, Result, Tape, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::generator::Generator;
use crate::renderer::{render, RenderConfig, RenderOutput, SampleMode};
use crate::scene::{hflip, mirror_pose, Pose};
use crate::triplane::OffsetTriPlane;

pub const PERCEPTUAL_SEED: u64 = 1001;
pub const IDENTITY_SEED: u64 = 1002;
pub const PERCEPTUAL_FILE: &str = "proxy_p.ckpt";
pub const IDENTITY_FILE: &str = "proxy_r.ckpt";

/// `[H, W, 3]` to `[1, 3, H, W]`.
pub fn to_nchw(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(TensorError::Invalid {
            op: "to_nchw",
            msg: format!("expected [H, W, 3] image, got {s:?}"),
        });
    }
    image.permute(&[2, 0, 1])?.reshape(&[1, 3, s[0], s[1]])
}

fn check_same(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn l2(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_same("l2", x, y)?;
    x.sub(y)?.square()?.mean()
}

/// Frozen random CNN: three stride-2 tanh blocks.
#[derive(Clone, Debug)]
pub struct ProxyNet {
    convs: Vec<Conv2d>,
    pub params: ParamSet,
}

const PROXY_WIDTHS: [usize; 3] = [8, 16, 32];

impl ProxyNet {
    fn layers() -> Vec<Conv2d> {
        let mut ch = 3;
        PROXY_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(format!("proxy.{i}"), ch, w, 3, 2);
                ch = w;
                c
            })
            .collect()
    }

    pub fn from_seed(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = Self::layers();
        let mut params = ParamSet::new();
        for c in &convs {
            c.init(&mut params, Init::Scaled(1.5), &mut rng)?;
            params.set(&bias_key(&c.name), Tensor::randn(&[c.out_ch], 0.3, &mut rng))?;
        }
        Ok(ProxyNet { convs, params })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let convs = Self::layers();
        let reference = Self::from_seed(0)?.params;
        for (name, t) in reference.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "proxy checkpoint",
                    lhs: params.get(name)?.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(ProxyNet { convs, params })
    }

    /// Activations after each block for an `[H, W, 3]` image.
    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = to_nchw(image)?.scale(2.0)?.add_scalar(-1.0)?;
        let mut taps = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            x = c.forward(&self.params, &x)?.tanh()?;
            taps.push(x.clone());
        }
        Ok(taps)
    }

    /// Spatially averaged final activations.
    pub fn embedding(&self, image: &Tensor) -> Result<Tensor> {
        let last = self.features(image)?.pop().expect("three blocks");
        let c = last.shape()[1];
        last.reshape(&[c, last.numel() / c])?.mean_axis(1, false)
    }
}

/// Unit-normalizes features across channels at every location.
fn channel_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = f.square()?.sum_axis(1, true)?.add_scalar(1e-10)?.sqrt()?;
    f.div(&norm)
}

/// Sum over taps of the mean squared difference of channel-normalized
/// features.
pub fn perceptual(net: &ProxyNet, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_same("perceptual", x, y)?;
    let fx = net.features(x)?;
    let fy = net.features(y)?;
    let mut acc = Tensor::scalar(0.0);
    for (a, b) in fx.iter().zip(&fy) {
        acc = acc.add(&channel_normalize(a)?.sub(&channel_normalize(b)?)?.square()?.mean()?)?;
    }
    Ok(acc)
}

/// `1 − ⟨a, b⟩ / (‖a‖ ‖b‖)`.
pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ab = a.dot(b)?;
    let denom = a.dot(a)?.mul(&b.dot(b)?)?.sqrt()?;
    ab.div(&denom)?.neg()?.add_scalar(1.0)
}

pub fn identity(net: &ProxyNet, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_same("identity", x, y)?;
    cosine_distance(&net.embedding(x)?, &net.embedding(y)?)
}

#[derive(Clone, Debug)]
pub struct Proxies {
    pub perceptual: ProxyNet,
    pub identity: ProxyNet,
}

impl Proxies {
    pub fn new() -> Result<Self> {
        Ok(Proxies {
            perceptual: ProxyNet::from_seed(PERCEPTUAL_SEED)?,
            identity: ProxyNet::from_seed(IDENTITY_SEED)?,
        })
    }

    /// Loads the proxies from `dir`, creating and saving them on first use.
    pub fn load_or_create(dir: &Path) -> Result<Self> {
        let p_path = dir.join(PERCEPTUAL_FILE);
        let r_path = dir.join(IDENTITY_FILE);
        if p_path.exists() && r_path.exists() {
            return Ok(Proxies {
                perceptual: ProxyNet::from_params(ParamSet::load(&p_path)?)?,
                identity: ProxyNet::from_params(ParamSet::load(&r_path)?)?,
            });
        }
        let proxies = Proxies::new()?;
        proxies.perceptual.params.save(&p_path)?;
        proxies.identity.params.save(&r_path)?;
        Ok(proxies)
    }
}

/// Three stride-2 convolution blocks and a linear head to one logit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    head: Linear,
}

const DISC_WIDTHS: [usize; 3] = [16, 32, 64];

impl Discriminator {
    pub fn new(image_size: usize) -> Self {
        let mut ch = 3;
        let convs = DISC_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(format!("disc.{i}"), ch, w, 3, 2);
                ch = w;
                c
            })
            .collect();
        let side = image_size.div_ceil(8);
        Discriminator {
            convs,
            head: Linear::new("disc.head", ch * side * side, 1),
        }
    }

    pub fn init<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for c in &self.convs {
            c.init(&mut p, Init::Scaled(2f64.sqrt()), rng)?;
        }
        self.head.init(&mut p, Init::Scaled(1.0), rng)?;
        Ok(p)
    }

    /// Real-vs-fake logit (scalar) for an `[H, W, 3]` image.
    pub fn logit(&self, params: &ParamSet, image: &Tensor) -> Result<Tensor> {
        let mut x = to_nchw(image)?.scale(2.0)?.add_scalar(-1.0)?;
        for c in &self.convs {
            x = c.forward(params, &x)?.leaky_relu(0.2)?;
        }
        let flat = x.reshape(&[1, x.numel()])?;
        self.head.forward(params, &flat)?.reshape(&[])
    }
}

/// Generator-side non-saturating loss `softplus(−D(ŷ))`.
pub fn adversarial_g(disc: &Discriminator, params: &ParamSet, fake: &Tensor) -> Result<Tensor> {
    disc.logit(params, fake)?.neg()?.softplus()
}

/// `softplus(D(ŷ)) + softplus(−D(x)) + γ/2 ‖∇ₓ D(x)‖²`. The fake image is
/// treated as a constant. Records on the tape of `params` when tracked.
pub fn adversarial_d(disc: &Discriminator, params: &ParamSet, real: &Tensor, fake: &Tensor, gamma: f64) -> Result<Tensor> {
    let tape = params
        .iter()
        .find_map(|(_, t)| t.tape().cloned())
        .unwrap_or_default();
    let real_leaf = tape.leaf(&real.detach());
    let d_real = disc.logit(params, &real_leaf)?;
    let d_fake = disc.logit(params, &fake.detach())?;
    let g = grad(&d_real, &[&real_leaf], true)?.remove(0);
    let r1 = g.square()?.sum()?.scale(gamma / 2.0)?;
    d_fake.softplus()?.add(&d_real.neg()?.softplus()?)?.add(&r1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lpips: f64,
    pub id: f64,
    pub adv: f64,
    pub flip_lpips: f64,
    pub flip_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lpips: 0.8,
            id: 0.1,
            adv: 0.005,
            flip_lpips: 0.8,
            flip_adv: 0.005,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub l2: Tensor,
    pub perceptual: Tensor,
    pub identity: Tensor,
    pub adversarial: Option<Tensor>,
    pub total: Tensor,
}

/// Proxies, weights and an optional frozen discriminator.
#[derive(Clone, Debug)]
pub struct LossStack {
    pub proxies: Proxies,
    pub weights: LossWeights,
    pub disc: Option<(Discriminator, ParamSet)>,
}

impl LossStack {
    pub fn new(proxies: Proxies, weights: LossWeights) -> Self {
        LossStack {
            proxies,
            weights,
            disc: None,
        }
    }

    pub fn with_discriminator(mut self, disc: Discriminator, params: ParamSet) -> Self {
        self.disc = Some((disc, params));
        self
    }

    /// `L₂ + λ_lpips·L_lpips + λ_id·L_id + λ_adv·L_adv` for target `x` and
    /// reconstruction `ŷ`. The adversarial term needs a discriminator.
    pub fn parts(&self, x: &Tensor, y: &Tensor) -> Result<LossParts> {
        let w = &self.weights;
        let l2v = l2(x, y)?;
        let perc = perceptual(&self.proxies.perceptual, x, y)?;
        let id = identity(&self.proxies.identity, x, y)?;
        let mut total = l2v.add(&perc.scale(w.lpips)?)?.add(&id.scale(w.id)?)?;
        let adversarial = match &self.disc {
            Some((d, p)) if w.adv != 0.0 => {
                let a = adversarial_g(d, p, y)?;
                total = total.add(&a.scale(w.adv)?)?;
                Some(a)
            }
            _ => None,
        };
        Ok(LossParts {
            l2: l2v,
            perceptual: perc,
            identity: id,
            adversarial,
            total,
        })
    }

    pub fn total(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        Ok(self.parts(x, y)?.total)
    }

    /// `λ₁·L_lpips(flip(x), R(mirror(pose))) + λ₂·L_adv(R(mirror(pose)))`,
    /// where `R` renders the reconstruction from a pose.
    pub fn flip_loss(&self, x: &Tensor, pose: &Pose, render: impl Fn(&Pose) -> Result<Tensor>) -> Result<Tensor> {
        let w = &self.weights;
        if w.flip_lpips == 0.0 && w.flip_adv == 0.0 {
            return Ok(Tensor::scalar(0.0));
        }
        let target = hflip(x)?;
        let rendered = render(&mirror_pose(pose))?;
        let mut loss = perceptual(&self.proxies.perceptual, &target, &rendered)?.scale(w.flip_lpips)?;
        if let Some((d, p)) = &self.disc {
            if w.flip_adv != 0.0 {
                loss = loss.add(&adversarial_g(d, p, &rendered)?.scale(w.flip_adv)?)?;
            }
        }
        Ok(loss)
    }
}

/// Discriminator update loss on a real and a generated image.
pub fn discriminator_tape_loss(disc: &Discriminator, params: &ParamSet, real: &Tensor, fake: &Tensor) -> Result<(Tape, ParamSet, Tensor)> {
    let tape = Tape::new();
    let tracked = params.track(&tape);
    let loss = adversarial_d(disc, &tracked, real, fake, 1.0)?;
    Ok((tape, tracked, loss))
}

/// A generator, its (possibly adapted) weights and optional offset planes,
/// viewed as a renderer for one latent.
#[derive(Clone, Copy)]
pub struct RenderTarget<'a> {
    pub gen: &'a Generator,
    pub params: &'a ParamSet,
    pub offsets: Option<&'a OffsetTriPlane>,
    pub latent: &'a Tensor,
    pub cfg: &'a RenderConfig,
}

impl RenderTarget<'_> {
    pub fn render(&self, pose: &Pose) -> Result<RenderOutput> {
        render(self.gen, self.params, self.offsets, self.latent, pose, self.cfg, SampleMode::Deterministic)
    }
}

/// Total loss for reconstructing `x` seen from `pose`, plus the flip term
/// when `flip` is set. Also returns the same-view render.
pub fn render_objective(stack: &LossStack, target: &RenderTarget, x: &Tensor, pose: &Pose, flip: bool) -> Result<(Tensor, RenderOutput)> {
    let out = target.render(pose)?;
    let mut loss = stack.total(x, &out.image)?;
    if flip {
        loss = loss.add(&stack.flip_loss(x, pose, |p| Ok(target.render(p)?.image))?)?;
    }
    Ok((loss, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use metaux_tensor::check::{numerical_grad, rel_error};
    use rand::Rng;

    fn image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
        Tensor::uniform(&[size, size, 3], 0.0, 1.0, rng)
    }

    #[test]
    fn l2_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = image(&mut rng, 4);
        assert_eq!(l2(&x, &x).unwrap().item(), 0.0);
        let half = Tensor::full(&[4, 4, 3], 0.5);
        assert_eq!(l2(&Tensor::zeros(&[4, 4, 3]), &half).unwrap().item(), 0.25);
        assert!(l2(&x, &Tensor::zeros(&[4, 4, 2])).is_err());
    }

    #[test]
    fn l2_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = (image(&mut rng, 4), image(&mut rng, 4));
        let mut acc = 0.0;
        for i in 0..48 {
            let d = x.data()[i] - y.data()[i];
            acc += d * d;
        }
        assert_eq!(l2(&x, &y).unwrap().item(), acc / 48.0);
    }

    #[test]
    fn perceptual_properties() {
        let net = ProxyNet::from_seed(PERCEPTUAL_SEED).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (a, b) = (image(&mut rng, 8), image(&mut rng, 8));
            assert_eq!(perceptual(&net, &a, &a).unwrap().item(), 0.0);
            let ab = perceptual(&net, &a, &b).unwrap().item();
            assert_eq!(ab, perceptual(&net, &b, &a).unwrap().item());
            assert!(ab > 0.0);
        }
    }

    #[test]
    fn identity_properties() {
        let net = ProxyNet::from_seed(IDENTITY_SEED).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, b) = (image(&mut rng, 8), image(&mut rng, 8));
            assert_eq!(identity(&net, &a, &a).unwrap().item(), 0.0);
            let d = identity(&net, &a, &b).unwrap().item();
            assert!((0.0..=2.0).contains(&d));
        }
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = Tensor::randn(&[16], 1.0, &mut rng);
            let b = Tensor::randn(&[16], 1.0, &mut rng);
            let s = rng.random_range(0.01..100.0);
            let d0 = cosine_distance(&a, &b).unwrap().item();
            let d1 = cosine_distance(&a, &b.scale(s).unwrap()).unwrap().item();
            assert!((d0 - d1).abs() < 1e-14);
        }
    }

    fn zero_disc(size: usize) -> (Discriminator, ParamSet) {
        let d = Discriminator::new(size);
        let p = d.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = p.map(|_, t| Ok(Tensor::zeros(t.shape()))).unwrap();
        (d, p)
    }

    #[test]
    fn zero_discriminator_values() {
        let (d, p) = zero_disc(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = (image(&mut rng, 8), image(&mut rng, 8));
        assert_eq!(adversarial_g(&d, &p, &y).unwrap().item(), std::f64::consts::LN_2);
        let dl = adversarial_d(&d, &p, &x, &y, 1.0).unwrap().item();
        assert!((dl - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn discriminator_loss_gradient_matches_finite_differences() {
        let d = Discriminator::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = d.init(&mut rng).unwrap();
        let (x, y) = (image(&mut rng, 8), image(&mut rng, 8));
        let (_tape, tracked, loss) = discriminator_tape_loss(&d, &p, &x, &y).unwrap();
        let grads = tracked.grads_of(&loss, false).unwrap();
        for name in ["disc.0.weight", "disc.2.bias", "disc.head.weight"] {
            let numeric = numerical_grad(p.get(name).unwrap(), 1e-5, |v| {
                let mut q = p.clone();
                q.set(name, v.clone())?;
                Ok(adversarial_d(&d, &q, &x, &y, 1.0)?.item())
            })
            .unwrap();
            let err = rel_error(grads.get(name).unwrap(), &numeric);
            assert!(err < 1e-4, "{name}: {err:e}");
        }
    }

    fn stack() -> LossStack {
        LossStack::new(Proxies::new().unwrap(), LossWeights::default())
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Discriminator::new(8);
        let dp = d.init(&mut rng).unwrap();
        let s = stack().with_discriminator(d.clone(), dp.clone());
        let (x, y) = (image(&mut rng, 8), image(&mut rng, 8));
        let parts = s.parts(&x, &y).unwrap();
        let w = &s.weights;
        let by_hand = l2(&x, &y).unwrap().item()
            + w.lpips * perceptual(&s.proxies.perceptual, &x, &y).unwrap().item()
            + w.id * identity(&s.proxies.identity, &x, &y).unwrap().item()
            + w.adv * adversarial_g(&d, &dp, &y).unwrap().item();
        assert_eq!(parts.total.item(), by_hand);
        // identical images leave only the adversarial term
        let same = s.total(&x, &x).unwrap().item();
        assert_eq!(same, w.adv * adversarial_g(&d, &dp, &x).unwrap().item());
        let mut zero = stack();
        zero.weights = LossWeights {
            lpips: 0.0,
            id: 0.0,
            adv: 0.0,
            flip_lpips: 0.0,
            flip_adv: 0.0,
        };
        assert_eq!(zero.total(&x, &y).unwrap().item(), l2(&x, &y).unwrap().item());
    }

    #[test]
    fn flip_loss_examples() {
        use crate::scene::{trace_scene, SceneSpec};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = SceneSpec::sample(&mut rng, 1.0);
        let pose = Pose::new(2.5, 0.5, 0.1, 16);
        let x = trace_scene(&spec, &pose);
        let s = stack();
        let loss = s.flip_loss(&x, &pose, |p| Ok(trace_scene(&spec, p))).unwrap();
        assert!(loss.item().abs() < 1e-12);
        let mut off = stack();
        off.weights.flip_lpips = 0.0;
        off.weights.flip_adv = 0.0;
        assert_eq!(off.flip_loss(&x, &pose, |_| Ok(Tensor::zeros(&[16, 16, 3]))).unwrap().item(), 0.0);
    }

    #[test]
    fn proxies_persist_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let a = Proxies::load_or_create(dir.path()).unwrap();
        let bytes = std::fs::read(dir.path().join(PERCEPTUAL_FILE)).unwrap();
        let b = Proxies::load_or_create(dir.path()).unwrap();
        assert!(a.perceptual.params.bit_eq(&b.perceptual.params));
        assert!(a.identity.params.bit_eq(&b.identity.params));
        assert_eq!(bytes, std::fs::read(dir.path().join(PERCEPTUAL_FILE)).unwrap());
        assert!(!a.perceptual.params.bit_eq(&a.identity.params));
    }

    #[test]
    fn losses_are_differentiable_in_the_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = stack();
        let (x, y) = (image(&mut rng, 8), image(&mut rng, 8));
        let tape = Tape::new();
        let leaf = tape.leaf(&y);
        let g = s.total(&x, &leaf).unwrap().backward().unwrap().get_or_zeros(&leaf);
        let numeric = numerical_grad(&y, 1e-5, |v| Ok(s.total(&x, v)?.item())).unwrap();
        assert!(rel_error(&g, &numeric) < 1e-4);
    }
}
