//! Stage orchestration: dataset, generator pretraining, encoder, auxiliary
//! training in two phases, reconstruction methods and evaluation reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use metaux_tensor::io::{load_tnsr, save_tnsr};
use metaux_tensor::nn::{Adam, AdamConfig, ParamSet};
use metaux_tensor::Tensor;
use rand::Rng;

use crate::auxiliary::AuxNet;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generator::{finetune_generator, latent_rows, latent_table, pretrain_autodecoder, Generator};
use crate::inversion::{invert_encode, invert_optimize, mean_latent, train_encoder, Encoder};
use crate::losses::{identity, perceptual, Discriminator, LossStack, Proxies};
use crate::meta::{meta_step, test_time_adapt, AdaptationTask, MetaConfig, MetaLog, MetaStats, TaskLoss};
use crate::renderer::{render, RenderOutput, SampleMode};
use crate::scene::{generate_dataset, load_dataset, rng_for, Pose, SceneRecord};
use crate::triplane::OffsetTriPlane;

pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const LATENTS_FILE: &str = "latents.tnsr";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const AUX_PHASE1_FILE: &str = "aux_phase1.ckpt";
pub const AUX_FILE: &str = "aux.ckpt";

pub fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data").join("train")
}

pub fn test_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data").join("test")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_trace(path: &Path, header: &str, trace: &[f64]) -> Result<()> {
    let mut s = format!("step,{header}\n");
    for (i, v) in trace.iter().enumerate() {
        writeln!(s, "{i},{v:.8e}").expect("write to string");
    }
    write_text(path, &s)
}

/// Generates both splits under the run directory.
pub fn stage_dataset(cfg: &RunConfig) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>)> {
    cfg.write_resolved(&cfg.out_dir)?;
    let train = generate_dataset(&cfg.train_dataset(), &train_dir(cfg))?;
    let test = generate_dataset(&cfg.test_dataset(), &test_dir(cfg))?;
    Ok((train, test))
}

pub fn load_split(dir: &Path) -> Result<Vec<SceneRecord>> {
    if !dir.join("meta.txt").exists() {
        return Err(Error::Invalid(format!("dataset missing at {} (run dataset-gen first)", dir.display())));
    }
    load_dataset(dir)
}

/// Everything trained by the pipeline. Later stages may be absent.
#[derive(Clone, Debug)]
pub struct Models {
    pub gen: Generator,
    pub gen_params: ParamSet,
    pub latents: Vec<Tensor>,
    pub losses: LossStack,
    pub enc: Encoder,
    pub enc_params: Option<ParamSet>,
    pub aux: AuxNet,
    pub aux_phase1: Option<ParamSet>,
    pub aux_params: Option<ParamSet>,
}

fn loss_stack(cfg: &RunConfig, proxies: Proxies, disc: Option<ParamSet>) -> LossStack {
    let stack = LossStack::new(proxies, cfg.weights.clone());
    match disc {
        Some(p) => stack.with_discriminator(Discriminator::new(cfg.dataset.image_size), p),
        None => stack,
    }
}

fn proxies(cfg: &RunConfig) -> Result<Proxies> {
    create_dir(&cfg.out_dir)?;
    Ok(Proxies::load_or_create(&cfg.out_dir)?)
}

fn need<'a>(p: &'a Option<ParamSet>, what: &str) -> Result<&'a ParamSet> {
    p.as_ref().ok_or_else(|| Error::Invalid(format!("{what} checkpoint not trained")))
}

impl Models {
    pub fn encoder_params(&self) -> Result<&ParamSet> {
        need(&self.enc_params, ENCODER_FILE)
    }

    pub fn aux_params(&self) -> Result<&ParamSet> {
        need(&self.aux_params, AUX_FILE)
    }

    pub fn aux_phase1(&self) -> Result<&ParamSet> {
        need(&self.aux_phase1, AUX_PHASE1_FILE)
    }

    /// Loads the checkpoints in `names` from the run directory, listing any
    /// that are missing.
    pub fn load(cfg: &RunConfig, names: &[&str]) -> Result<Models> {
        let dir = &cfg.out_dir;
        let mut required = vec![GENERATOR_FILE, LATENTS_FILE];
        for n in names {
            if !required.contains(n) {
                required.push(n);
            }
        }
        let missing: Vec<&str> = required.iter().copied().filter(|n| !dir.join(n).exists()).collect();
        if !missing.is_empty() {
            return Err(Error::Invalid(format!("missing checkpoints in {}: {}", dir.display(), missing.join(", "))));
        }
        let gen = Generator::new(cfg.gen.clone());
        let disc_path = dir.join(DISCRIMINATOR_FILE);
        let disc = if disc_path.exists() { Some(ParamSet::load(&disc_path)?) } else { None };
        let opt = |name: &str| -> Result<Option<ParamSet>> {
            if names.contains(&name) {
                Ok(Some(ParamSet::load(dir.join(name))?))
            } else {
                Ok(None)
            }
        };
        Ok(Models {
            gen_params: ParamSet::load(dir.join(GENERATOR_FILE))?,
            latents: latent_rows(&load_tnsr(dir.join(LATENTS_FILE))?)?,
            losses: loss_stack(cfg, proxies(cfg)?, disc),
            enc: Encoder::new(cfg.dataset.image_size, &cfg.enc.widths, cfg.gen.w_dim),
            enc_params: opt(ENCODER_FILE)?,
            aux: AuxNet::new(cfg.aux.clone(), &gen)?,
            aux_phase1: opt(AUX_PHASE1_FILE)?,
            aux_params: opt(AUX_FILE)?,
            gen,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        self.gen_params.save(dir.join(GENERATOR_FILE))?;
        save_tnsr(dir.join(LATENTS_FILE), &latent_table(&self.latents)?)?;
        if let Some((_, d)) = &self.losses.disc {
            d.save(dir.join(DISCRIMINATOR_FILE))?;
        }
        for (name, p) in [(ENCODER_FILE, &self.enc_params), (AUX_PHASE1_FILE, &self.aux_phase1), (AUX_FILE, &self.aux_params)] {
            if let Some(p) = p {
                p.save(dir.join(name))?;
            }
        }
        Ok(())
    }
}

/// Auto-decoder pretraining; saves the generator, latent table and
/// discriminator.
pub fn stage_pretrain(cfg: &RunConfig, train: &[SceneRecord]) -> Result<Models> {
    cfg.write_resolved(&cfg.out_dir)?;
    let gen = Generator::new(cfg.gen.clone());
    let prox = proxies(cfg)?;
    let recon = loss_stack(cfg, prox.clone(), None);
    let out = pretrain_autodecoder(&gen, train, &recon, &cfg.pretrain)?;
    write_trace(&cfg.out_dir.join("pretrain_log.csv"), "loss", &out.trace)?;
    let models = Models {
        aux: AuxNet::new(cfg.aux.clone(), &gen)?,
        enc: Encoder::new(cfg.dataset.image_size, &cfg.enc.widths, cfg.gen.w_dim),
        gen,
        gen_params: out.params,
        latents: out.latents,
        losses: loss_stack(cfg, prox, out.disc),
        enc_params: None,
        aux_phase1: None,
        aux_params: None,
    };
    models.save(&cfg.out_dir)?;
    Ok(models)
}

pub fn stage_encoder(cfg: &RunConfig, models: &mut Models, train: &[SceneRecord]) -> Result<()> {
    cfg.write_resolved(&cfg.out_dir)?;
    let (p, trace) = train_encoder(&models.enc, &models.gen, &models.gen_params, train, &models.latents, &models.losses, &cfg.enc)?;
    write_trace(&cfg.out_dir.join("encoder_log.csv"), "loss", &trace)?;
    p.save(cfg.out_dir.join(ENCODER_FILE))?;
    models.enc_params = Some(p);
    Ok(())
}

/// Encoder latents for every view of every scene.
pub fn encode_views(models: &Models, records: &[SceneRecord]) -> Result<Vec<Vec<Tensor>>> {
    let ep = models.encoder_params()?;
    records
        .iter()
        .map(|r| r.views.iter().map(|(pose, x)| Ok(invert_encode(&models.enc, ep, x, pose)?)).collect())
        .collect()
}

/// Aux training over random train views, `iterations` outer updates with
/// `meta.inner_steps` inner steps each (zero for the joint first phase).
fn train_aux(cfg: &RunConfig, models: &Models, train: &[SceneRecord], init: ParamSet, meta: &MetaConfig, stream: u64, log: &Path) -> Result<ParamSet> {
    let enc_latents = encode_views(models, train)?;
    let mut pick = rng_for(cfg.seed, stream);
    let mut opt = Adam::new(AdamConfig::with_lr(meta.outer_lr));
    let mut log = MetaLog::create(log, meta.inner_steps)?;
    let mut params = init;
    for it in 0..meta.iterations {
        let picks: Vec<(usize, usize)> = (0..meta.batch.max(1))
            .map(|_| {
                let k = pick.random_range(0..train.len());
                (k, pick.random_range(0..train[k].views.len()))
            })
            .collect();
        let tasks: Vec<AdaptationTask> = picks
            .iter()
            .map(|&(k, v)| AdaptationTask {
                gen: &models.gen,
                gen_params: &models.gen_params,
                aux: &models.aux,
                losses: &models.losses,
                image: &train[k].views[v].1,
                pose: &train[k].views[v].0,
                latent: &enc_latents[k][v],
                render: &cfg.render,
                flip: cfg.flip_train,
            })
            .collect();
        let closures: Vec<_> = tasks.iter().map(|t| move |p: &ParamSet| t.loss(p)).collect();
        let refs: Vec<&TaskLoss> = closures.iter().map(|c| c as &TaskLoss).collect();
        let (next, stats): (ParamSet, MetaStats) = meta_step(&params, &refs, meta, &mut opt)?;
        log.record(it, &stats)?;
        params = next;
    }
    Ok(params)
}

/// Joint aux training without inner steps.
pub fn stage_aux_phase1(cfg: &RunConfig, models: &mut Models, train: &[SceneRecord]) -> Result<()> {
    cfg.write_resolved(&cfg.out_dir)?;
    let init = models.aux.init(&mut rng_for(cfg.seed, 30))?;
    let phase1 = MetaConfig {
        inner_steps: 0,
        outer_lr: cfg.aux_train.lr,
        batch: cfg.aux_train.batch,
        iterations: cfg.aux_train.phase1_steps,
        ..cfg.meta.clone()
    };
    let p = train_aux(cfg, models, train, init, &phase1, 31, &cfg.out_dir.join("aux_phase1_log.csv"))?;
    p.save(cfg.out_dir.join(AUX_PHASE1_FILE))?;
    models.aux_phase1 = Some(p);
    Ok(())
}

/// Meta-training initialised from the first phase.
pub fn stage_meta(cfg: &RunConfig, models: &mut Models, train: &[SceneRecord]) -> Result<()> {
    cfg.write_resolved(&cfg.out_dir)?;
    let init = models.aux_phase1()?.clone();
    let p = train_aux(cfg, models, train, init, &cfg.meta, 32, &cfg.out_dir.join("meta_log.csv"))?;
    p.save(cfg.out_dir.join(AUX_FILE))?;
    models.aux_params = Some(p);
    Ok(())
}

/// Runs every training stage in order.
pub fn train_all(cfg: &RunConfig) -> Result<(Models, Vec<SceneRecord>, Vec<SceneRecord>)> {
    cfg.validate()?;
    let (train, test) = stage_dataset(cfg)?;
    let mut models = stage_pretrain(cfg, &train)?;
    stage_encoder(cfg, &mut models, &train)?;
    stage_aux_phase1(cfg, &mut models, &train)?;
    stage_meta(cfg, &mut models, &train)?;
    Ok((models, train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Encoder latent through the pretrained generator.
    Encoder,
    /// Latent optimization from the encoder latent.
    Optimize,
    /// Meta-trained aux with test-time adaptation.
    Full,
    /// First-phase aux with test-time adaptation.
    NoMeta,
    /// Direct generator fine-tuning at the encoder latent.
    NoAux,
    /// Full method with the weight-residual heads switched off.
    No2d,
    /// Full method with the offset-plane head switched off.
    No3d,
}

impl Method {
    pub const ALL: [Method; 7] = [Method::Encoder, Method::Optimize, Method::Full, Method::NoMeta, Method::NoAux, Method::No2d, Method::No3d];

    pub fn name(self) -> &'static str {
        match self {
            Method::Encoder => "encoder",
            Method::Optimize => "optimize",
            Method::Full => "full",
            Method::NoMeta => "no-meta",
            Method::NoAux => "no-aux",
            Method::No2d => "no-2d",
            Method::No3d => "no-3d",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// A reconstruction: weights, offsets and latent to render novel views with.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub params: ParamSet,
    pub offsets: Option<OffsetTriPlane>,
    pub latent: Tensor,
    pub output: RenderOutput,
    pub trace: Vec<f64>,
    /// Wall-clock seconds spent after the encoder pass.
    pub seconds: f64,
}

impl Reconstruction {
    pub fn render(&self, models: &Models, cfg: &RunConfig, pose: &Pose) -> Result<RenderOutput> {
        Ok(render(&models.gen, &self.params, self.offsets.as_ref(), &self.latent, pose, &cfg.render, SampleMode::Deterministic)?)
    }
}

/// Inverts `x` seen from `pose` with `method` and `steps` adaptation steps.
/// With zero steps the aux-based methods fall back to the encoder-only result.
pub fn reconstruct(cfg: &RunConfig, models: &Models, method: Method, x: &Tensor, pose: &Pose, steps: usize, flip: bool) -> Result<Reconstruction> {
    let latent = invert_encode(&models.enc, models.encoder_params()?, x, pose)?;
    let start = Instant::now();
    let plain = |params: ParamSet, latent: Tensor, trace: Vec<f64>| -> Result<Reconstruction> {
        let output = render(&models.gen, &params, None, &latent, pose, &cfg.render, SampleMode::Deterministic)?;
        Ok(Reconstruction {
            params,
            offsets: None,
            latent,
            output,
            trace,
            seconds: 0.0,
        })
    };
    let aux_based = matches!(method, Method::Full | Method::NoMeta | Method::No2d | Method::No3d);
    let mut rec = if method == Method::Encoder || (aux_based && steps == 0) {
        plain(models.gen_params.clone(), latent, Vec::new())?
    } else if method == Method::Optimize {
        let (w, trace) = invert_optimize(&models.gen, &models.gen_params, &models.losses, x, pose, &latent, cfg.eval.optimize_steps, cfg.eval.optimize_lr, &cfg.render)?;
        plain(models.gen_params.clone(), w, trace)?
    } else if method == Method::NoAux {
        let (p, trace) = finetune_generator(&models.gen, &models.gen_params, &models.losses, x, pose, &latent, steps, cfg.eval.finetune_lr, &cfg.render)?;
        plain(p, latent, trace)?
    } else {
        let mut aux = models.aux.clone();
        aux.cfg.use_weight_residuals &= method != Method::No2d;
        aux.cfg.use_offset_planes &= method != Method::No3d;
        let params = if method == Method::NoMeta { models.aux_phase1()? } else { models.aux_params()? };
        let task = AdaptationTask {
            gen: &models.gen,
            gen_params: &models.gen_params,
            aux: &aux,
            losses: &models.losses,
            image: x,
            pose,
            latent: &latent,
            render: &cfg.render,
            flip,
        };
        let out = test_time_adapt(&task, params, steps, cfg.meta.inner_lr)?;
        Reconstruction {
            params: out.adapted.params,
            offsets: out.adapted.offsets,
            latent,
            output: out.output,
            trace: out.trace,
            seconds: 0.0,
        }
    };
    rec.seconds = start.elapsed().as_secs_f64();
    Ok(rec)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(crate::losses::l2(a, b)?.item())
}

pub fn psnr(mse: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        cap
    } else {
        (-10.0 * mse.log10()).min(cap)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub scene: usize,
    pub mse: f64,
    pub psnr: f64,
    pub lpips: f64,
    pub id: f64,
    pub novel_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub rows: Vec<EvalRow>,
    /// Adaptation wall-clock per scene, kept out of the deterministic report.
    pub seconds: Vec<f64>,
}

pub const METRICS: [&str; 5] = ["mse", "psnr", "lpips", "id", "novel_mse"];

impl EvalReport {
    pub fn column(&self, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| match metric {
                "mse" => r.mse,
                "psnr" => r.psnr,
                "lpips" => r.lpips,
                "id" => r.id,
                "novel_mse" => r.novel_mse,
                _ => f64::NAN,
            })
            .collect()
    }

    pub fn median(&self, metric: &str) -> f64 {
        median(&self.column(metric))
    }

    pub fn mean(&self, metric: &str) -> f64 {
        mean(&self.column(metric))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("scene\tmse\tpsnr\tlpips\tid\tnovel_mse\n");
        for r in &self.rows {
            writeln!(s, "{}\t{:.10e}\t{:.6}\t{:.10e}\t{:.10e}\t{:.10e}", r.scene, r.mse, r.psnr, r.lpips, r.id, r.novel_mse).expect("write to string");
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("method\t{}\nscenes\t{}\n", self.method, self.rows.len());
        for m in METRICS {
            writeln!(s, "mean_{m}\t{:.10e}\nmedian_{m}\t{:.10e}", self.mean(m), self.median(m)).expect("write to string");
        }
        s
    }

    pub fn timing_tsv(&self) -> String {
        let mut s = String::from("scene\tseconds\n");
        for (r, t) in self.rows.iter().zip(&self.seconds) {
            writeln!(s, "{}\t{t:.4}", r.scene).expect("write to string");
        }
        s
    }

    /// `report.tsv`, `summary.txt` and `timing.tsv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_text(&dir.join("report.tsv"), &self.to_tsv())?;
        write_text(&dir.join("summary.txt"), &self.summary())?;
        write_text(&dir.join("timing.tsv"), &self.timing_tsv())
    }
}

/// Per-scene metrics for a reconstruction of view `input_view`; the novel
/// error averages the remaining views.
pub fn score(cfg: &RunConfig, models: &Models, rec: &Reconstruction, scene: &SceneRecord, input_view: usize) -> Result<EvalRow> {
    let x = &scene.views[input_view].1;
    let y = &rec.output.image;
    let m = mse(x, y)?;
    let mut novel = Vec::new();
    for (v, (pose, target)) in scene.views.iter().enumerate() {
        if v != input_view {
            novel.push(mse(target, &rec.render(models, cfg, pose)?.image)?);
        }
    }
    Ok(EvalRow {
        scene: scene.id,
        mse: m,
        psnr: psnr(m, cfg.eval.psnr_cap),
        lpips: perceptual(&models.losses.proxies.perceptual, x, y)?.item(),
        id: identity(&models.losses.proxies.identity, x, y)?.item(),
        novel_mse: if novel.is_empty() { f64::NAN } else { mean(&novel) },
    })
}

/// Inverts view `eval.input_view` of each test scene with `method` and
/// scores same-view and held-out-view reconstructions.
pub fn evaluate(cfg: &RunConfig, models: &Models, test: &[SceneRecord], method: Method) -> Result<EvalReport> {
    let n = if cfg.eval.max_scenes == 0 { test.len() } else { cfg.eval.max_scenes.min(test.len()) };
    let steps = if method == Method::NoAux { cfg.eval.finetune_steps } else { cfg.eval.adapt_steps };
    let v = cfg.eval.input_view;
    let mut rows = Vec::with_capacity(n);
    let mut seconds = Vec::with_capacity(n);
    for scene in &test[..n] {
        let (pose, x) = scene.views.get(v).ok_or_else(|| Error::Invalid(format!("scene {} has no view {v}", scene.id)))?;
        let rec = reconstruct(cfg, models, method, x, pose, steps, cfg.flip)?;
        rows.push(score(cfg, models, &rec, scene, v)?);
        seconds.push(rec.seconds);
    }
    Ok(EvalReport {
        method: method.name().to_string(),
        rows,
        seconds,
    })
}

/// Starting point for latent optimization without an encoder.
pub fn mean_table_latent(models: &Models) -> Result<Tensor> {
    Ok(mean_latent(&models.latents)?)
}
