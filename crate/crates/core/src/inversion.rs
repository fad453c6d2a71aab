//! Initial latents: a pose-aware image encoder trained against the
//! auto-decoder latent table, and direct latent optimization.

use metaux_tensor::nn::{Adam, AdamConfig, Conv2d, Init, Linear, ParamSet};
use metaux_tensor::{Result, Tape, Tensor, TensorError};
use rand::Rng;

use crate::error::{ensure_finite, Error, Result as CoreResult};
use crate::generator::Generator;
use crate::losses::{to_nchw, LossStack};
use crate::renderer::{render, RenderConfig, SampleMode};
use crate::scene::{rng_for, Pose, SceneRecord};

#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<Conv2d>,
    head: Linear,
    pub image_size: usize,
    pub w_dim: usize,
}

const LEAK: f64 = 0.2;

impl Encoder {
    pub fn new(image_size: usize, widths: &[usize], w_dim: usize) -> Self {
        let mut convs = Vec::new();
        let mut ch = 3;
        let mut res = image_size;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(format!("enc.{i}"), ch, w, 3, 2));
            ch = w;
            res = res.div_ceil(2);
        }
        Encoder {
            convs,
            head: Linear::new("enc.head", ch * res * res + 5, w_dim),
            image_size,
            w_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for c in &self.convs {
            c.init(&mut p, Init::Scaled(2f64.sqrt()), rng)?;
        }
        self.head.init(&mut p, Init::Scaled(1.0), rng)?;
        Ok(p)
    }

    /// ω for image `[H, W, 3]` seen from `pose`.
    pub fn encode(&self, params: &ParamSet, image: &Tensor, pose: &Pose) -> Result<Tensor> {
        if image.shape() != [self.image_size, self.image_size, 3] {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: image.shape().to_vec(),
                rhs: vec![self.image_size, self.image_size, 3],
            });
        }
        let mut x = to_nchw(image)?.scale(2.0)?.add_scalar(-1.0)?;
        for c in &self.convs {
            x = c.forward(params, &x)?.leaky_relu(LEAK)?;
        }
        let flat = x.reshape(&[1, x.numel()])?;
        let emb = Tensor::vector(&pose.embedding()).reshape(&[1, 5])?;
        let h = Tensor::concat(&[&flat, &emb], 1)?;
        self.head.forward(params, &h)?.reshape(&[self.w_dim])
    }
}

/// Single forward pass of the frozen encoder.
pub fn invert_encode(enc: &Encoder, params: &ParamSet, image: &Tensor, pose: &Pose) -> Result<Tensor> {
    enc.encode(params, image, pose)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub latent_weight: f64,
    /// Weight of the image reconstruction through the frozen generator.
    pub image_weight: f64,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: vec![16, 32, 64, 64],
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            latent_weight: 1.0,
            image_weight: 1.0,
            seed: 0,
            render: RenderConfig::default(),
        }
    }
}

/// Fits encoder weights to map each training view to its scene's latent,
/// plus reconstruction through the frozen generator.
#[allow(clippy::too_many_arguments)]
pub fn train_encoder(
    enc: &Encoder,
    gen: &Generator,
    gen_params: &ParamSet,
    records: &[SceneRecord],
    latents: &[Tensor],
    losses: &LossStack,
    cfg: &EncoderConfig,
) -> CoreResult<(ParamSet, Vec<f64>)> {
    if latents.len() != records.len() {
        return Err(Error::Invalid(format!("latent table has {} rows for {} scenes", latents.len(), records.len())));
    }
    let mut params = enc.init(&mut rng_for(cfg.seed, 11))?;
    if records.is_empty() || cfg.steps == 0 {
        return Ok((params, Vec::new()));
    }
    let frozen = gen_params.detach();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut pick = rng_for(cfg.seed, 12);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let tp = params.track(&tape);
        let mut total = Tensor::scalar(0.0);
        let batch = cfg.batch.max(1);
        for _ in 0..batch {
            let k = pick.random_range(0..records.len());
            let (pose, x) = &records[k].views[pick.random_range(0..records[k].views.len())];
            let w = enc.encode(&tp, x, pose)?;
            let mut l = w.sub(&latents[k])?.square()?.mean()?.scale(cfg.latent_weight)?;
            if cfg.image_weight != 0.0 {
                let y = render(gen, &frozen, None, &w, pose, &cfg.render, SampleMode::Deterministic)?.image;
                l = l.add(&losses.total(x, &y)?.scale(cfg.image_weight)?)?;
            }
            total = total.add(&l)?;
        }
        let loss = total.scale(1.0 / batch as f64)?;
        ensure_finite(loss.item(), "encoder", step)?;
        trace.push(loss.item());
        let g = tp.grads_of(&loss, false)?;
        params = opt.step(&params, &g)?;
    }
    Ok((params, trace))
}

/// Adam on ω alone with the generator frozen. Returns the lowest-loss
/// iterate and the loss trace (initial loss first, one entry per step).
#[allow(clippy::too_many_arguments)]
pub fn invert_optimize(
    gen: &Generator,
    gen_params: &ParamSet,
    losses: &LossStack,
    image: &Tensor,
    pose: &Pose,
    init: &Tensor,
    steps: usize,
    lr: f64,
    rcfg: &RenderConfig,
) -> CoreResult<(Tensor, Vec<f64>)> {
    let frozen = gen_params.detach();
    let mut w = ParamSet::new();
    w.insert("omega", init.detach())?;
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    let mut best = (f64::INFINITY, init.detach());
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let tape = Tape::new();
        let tw = w.track(&tape);
        let y = render(gen, &frozen, None, tw.get("omega")?, pose, rcfg, SampleMode::Deterministic)?.image;
        let loss = losses.total(image, &y)?;
        ensure_finite(loss.item(), "latent optimization", step)?;
        trace.push(loss.item());
        if loss.item() < best.0 {
            best = (loss.item(), w.get("omega")?.clone());
        }
        if step < steps {
            let g = tw.grads_of(&loss, false)?;
            w = opt.step(&w, &g)?;
        }
    }
    Ok((best.1, trace))
}

/// Mean of a non-empty set of latents.
pub fn mean_latent(latents: &[Tensor]) -> Result<Tensor> {
    let first = latents.first().ok_or_else(|| TensorError::Invalid {
        op: "mean_latent",
        msg: "no latents".into(),
    })?;
    let mut acc = first.detach();
    for l in &latents[1..] {
        acc = acc.add(l)?;
    }
    acc.scale(1.0 / latents.len() as f64)
}
