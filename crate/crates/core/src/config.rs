//! Flat `key = value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::auxiliary::AuxConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, PretrainConfig};
use crate::inversion::EncoderConfig;
use crate::losses::LossWeights;
use crate::meta::{MetaConfig, MetaMode};
use crate::renderer::RenderConfig;
use crate::scene::{derive_seed, DatasetConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AuxTrainConfig {
    /// Joint training steps before meta-training.
    pub phase1_steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        AuxTrainConfig {
            phase1_steps: 3000,
            lr: 1e-3,
            batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// View of each test scene used as the input image.
    pub input_view: usize,
    /// Test-time inner steps.
    pub adapt_steps: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub optimize_steps: usize,
    pub optimize_lr: f64,
    pub psnr_cap: f64,
    /// Upper bound on evaluated test scenes; 0 means all.
    pub max_scenes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            input_view: 1,
            adapt_steps: 5,
            finetune_steps: 5,
            finetune_lr: 1e-2,
            optimize_steps: 200,
            optimize_lr: 0.05,
            psnr_cap: 99.0,
            max_scenes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub test_scenes: usize,
    pub gen: GeneratorConfig,
    pub pretrain: PretrainConfig,
    pub enc: EncoderConfig,
    pub aux: AuxConfig,
    pub aux_train: AuxTrainConfig,
    pub meta: MetaConfig,
    pub weights: LossWeights,
    /// Flip loss during test-time adaptation.
    pub flip: bool,
    /// Flip loss inside aux training tasks.
    pub flip_train: bool,
    pub render: RenderConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            dataset: DatasetConfig::default(),
            test_scenes: 64,
            gen: GeneratorConfig::default(),
            pretrain: PretrainConfig::default(),
            enc: EncoderConfig::default(),
            aux: AuxConfig::default(),
            aux_train: AuxTrainConfig::default(),
            meta: MetaConfig::default(),
            weights: LossWeights::default(),
            flip: false,
            flip_train: false,
            render: RenderConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.resolve();
        cfg
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim().parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got `{other}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Copies shared settings into the per-stage configs and derives stage seeds.
    pub fn resolve(&mut self) {
        self.pretrain.render = self.render.clone();
        self.enc.render = self.render.clone();
        self.pretrain.seed = derive_seed(self.seed, 1);
        self.enc.seed = derive_seed(self.seed, 2);
    }

    pub fn train_dataset(&self) -> DatasetConfig {
        DatasetConfig {
            seed: derive_seed(self.seed, 100),
            ..self.dataset.clone()
        }
    }

    pub fn test_dataset(&self) -> DatasetConfig {
        DatasetConfig {
            seed: derive_seed(self.seed, 101),
            n_scenes: self.test_scenes,
            ..self.dataset.clone()
        }
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dataset;
        let g = &self.gen;
        let p = &self.pretrain;
        let e = &self.enc;
        let a = &self.aux;
        let m = &self.meta;
        let w = &self.weights;
        let r = &self.render;
        let v = &self.eval;
        vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("dataset.n_scenes", d.n_scenes.to_string()),
            ("dataset.test_scenes", self.test_scenes.to_string()),
            ("dataset.views", d.views.to_string()),
            ("dataset.image_size", d.image_size.to_string()),
            ("dataset.camera_radius", float(d.camera_radius)),
            ("dataset.elevation", float(d.elevation)),
            ("dataset.max_azimuth", float(d.max_azimuth)),
            ("dataset.symmetric_fraction", float(d.symmetric_fraction)),
            ("gen.z_dim", g.z_dim.to_string()),
            ("gen.w_dim", g.w_dim.to_string()),
            ("gen.mapping_width", g.mapping_width.to_string()),
            ("gen.mapping_layers", g.mapping_layers.to_string()),
            ("gen.const_channels", g.const_channels.to_string()),
            ("gen.const_res", g.const_res.to_string()),
            ("gen.block_widths", list(&g.block_widths)),
            ("gen.plane_channels", g.plane_channels.to_string()),
            ("gen.decoder_hidden", g.decoder_hidden.to_string()),
            ("gen.steps", p.steps.to_string()),
            ("gen.batch", p.batch.to_string()),
            ("gen.lr", float(p.lr)),
            ("gen.latent_lr", float(p.latent_lr)),
            ("gen.latent_reg", float(p.latent_reg)),
            ("gen.adversarial", p.adversarial.to_string()),
            ("gen.adv_warmup", p.adv_warmup.to_string()),
            ("gen.disc_lr", float(p.disc_lr)),
            ("enc.widths", list(&e.widths)),
            ("enc.steps", e.steps.to_string()),
            ("enc.batch", e.batch.to_string()),
            ("enc.lr", float(e.lr)),
            ("enc.latent_weight", float(e.latent_weight)),
            ("enc.image_weight", float(e.image_weight)),
            ("aux.encoder_widths", list(&a.encoder_widths)),
            ("aux.film_blocks", a.film_blocks.to_string()),
            ("aux.film_width", a.film_width.to_string()),
            ("aux.pose_hidden", a.pose_hidden.to_string()),
            ("aux.s_max", float(a.s_max)),
            ("aux.layers", a.layers.as_ref().map_or("all".to_string(), |l| list(l))),
            ("aux.use_2d", a.use_weight_residuals.to_string()),
            ("aux.use_3d", a.use_offset_planes.to_string()),
            ("aux.phase1_steps", self.aux_train.phase1_steps.to_string()),
            ("aux.lr", float(self.aux_train.lr)),
            ("aux.batch", self.aux_train.batch.to_string()),
            ("meta.train_inner_steps", m.inner_steps.to_string()),
            ("meta.inner_lr", float(m.inner_lr)),
            ("meta.outer_lr", float(m.outer_lr)),
            ("meta.mode", match m.mode {
                MetaMode::Exact => "exact".to_string(),
                MetaMode::FirstOrder => "first-order".to_string(),
            }),
            ("meta.batch", m.batch.to_string()),
            ("meta.iterations", m.iterations.to_string()),
            ("loss.lpips", float(w.lpips)),
            ("loss.id", float(w.id)),
            ("loss.adv", float(w.adv)),
            ("loss.flip_lpips", float(w.flip_lpips)),
            ("loss.flip_adv", float(w.flip_adv)),
            ("loss.flip", self.flip.to_string()),
            ("loss.flip_train", self.flip_train.to_string()),
            ("render.samples", r.samples.to_string()),
            ("render.depth_margin", float(r.depth_margin)),
            ("render.background", float(r.background)),
            ("eval.input_view", v.input_view.to_string()),
            ("eval.adapt_steps", v.adapt_steps.to_string()),
            ("eval.finetune_steps", v.finetune_steps.to_string()),
            ("eval.finetune_lr", float(v.finetune_lr)),
            ("eval.optimize_steps", v.optimize_steps.to_string()),
            ("eval.optimize_lr", float(v.optimize_lr)),
            ("eval.psnr_cap", float(v.psnr_cap)),
            ("eval.max_scenes", v.max_scenes.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "seed" => self.seed = parse(k, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v.trim()),
            "dataset.n_scenes" => self.dataset.n_scenes = parse(k, v)?,
            "dataset.test_scenes" => self.test_scenes = parse(k, v)?,
            "dataset.views" => self.dataset.views = parse(k, v)?,
            "dataset.image_size" => self.dataset.image_size = parse(k, v)?,
            "dataset.camera_radius" => self.dataset.camera_radius = parse(k, v)?,
            "dataset.elevation" => self.dataset.elevation = parse(k, v)?,
            "dataset.max_azimuth" => self.dataset.max_azimuth = parse(k, v)?,
            "dataset.symmetric_fraction" => self.dataset.symmetric_fraction = parse(k, v)?,
            "gen.z_dim" => self.gen.z_dim = parse(k, v)?,
            "gen.w_dim" => self.gen.w_dim = parse(k, v)?,
            "gen.mapping_width" => self.gen.mapping_width = parse(k, v)?,
            "gen.mapping_layers" => self.gen.mapping_layers = parse(k, v)?,
            "gen.const_channels" => self.gen.const_channels = parse(k, v)?,
            "gen.const_res" => self.gen.const_res = parse(k, v)?,
            "gen.block_widths" => self.gen.block_widths = parse_list(k, v)?,
            "gen.plane_channels" => self.gen.plane_channels = parse(k, v)?,
            "gen.decoder_hidden" => self.gen.decoder_hidden = parse(k, v)?,
            "gen.steps" => self.pretrain.steps = parse(k, v)?,
            "gen.batch" => self.pretrain.batch = parse(k, v)?,
            "gen.lr" => self.pretrain.lr = parse(k, v)?,
            "gen.latent_lr" => self.pretrain.latent_lr = parse(k, v)?,
            "gen.latent_reg" => self.pretrain.latent_reg = parse(k, v)?,
            "gen.adversarial" => self.pretrain.adversarial = parse_bool(k, v)?,
            "gen.adv_warmup" => self.pretrain.adv_warmup = parse(k, v)?,
            "gen.disc_lr" => self.pretrain.disc_lr = parse(k, v)?,
            "enc.widths" => self.enc.widths = parse_list(k, v)?,
            "enc.steps" => self.enc.steps = parse(k, v)?,
            "enc.batch" => self.enc.batch = parse(k, v)?,
            "enc.lr" => self.enc.lr = parse(k, v)?,
            "enc.latent_weight" => self.enc.latent_weight = parse(k, v)?,
            "enc.image_weight" => self.enc.image_weight = parse(k, v)?,
            "aux.encoder_widths" => self.aux.encoder_widths = parse_list(k, v)?,
            "aux.film_blocks" => self.aux.film_blocks = parse(k, v)?,
            "aux.film_width" => self.aux.film_width = parse(k, v)?,
            "aux.pose_hidden" => self.aux.pose_hidden = parse(k, v)?,
            "aux.s_max" => self.aux.s_max = parse(k, v)?,
            "aux.layers" => {
                self.aux.layers = if v.trim() == "all" { None } else { Some(parse_list(k, v)?) };
            }
            "aux.use_2d" => self.aux.use_weight_residuals = parse_bool(k, v)?,
            "aux.use_3d" => self.aux.use_offset_planes = parse_bool(k, v)?,
            "aux.phase1_steps" => self.aux_train.phase1_steps = parse(k, v)?,
            "aux.lr" => self.aux_train.lr = parse(k, v)?,
            "aux.batch" => self.aux_train.batch = parse(k, v)?,
            "meta.train_inner_steps" => self.meta.inner_steps = parse(k, v)?,
            "meta.inner_lr" => self.meta.inner_lr = parse(k, v)?,
            "meta.outer_lr" => self.meta.outer_lr = parse(k, v)?,
            "meta.mode" => {
                self.meta.mode = match v.trim() {
                    "exact" => MetaMode::Exact,
                    "first-order" | "first_order" => MetaMode::FirstOrder,
                    other => return Err(Error::Config(format!("meta.mode: expected exact or first-order, got `{other}`"))),
                }
            }
            "meta.batch" => self.meta.batch = parse(k, v)?,
            "meta.iterations" => self.meta.iterations = parse(k, v)?,
            "loss.lpips" => self.weights.lpips = parse(k, v)?,
            "loss.id" => self.weights.id = parse(k, v)?,
            "loss.adv" => self.weights.adv = parse(k, v)?,
            "loss.flip_lpips" => self.weights.flip_lpips = parse(k, v)?,
            "loss.flip_adv" => self.weights.flip_adv = parse(k, v)?,
            "loss.flip" => self.flip = parse_bool(k, v)?,
            "loss.flip_train" => self.flip_train = parse_bool(k, v)?,
            "render.samples" => self.render.samples = parse(k, v)?,
            "render.depth_margin" => self.render.depth_margin = parse(k, v)?,
            "render.background" => self.render.background = parse(k, v)?,
            "eval.input_view" => self.eval.input_view = parse(k, v)?,
            "eval.adapt_steps" => self.eval.adapt_steps = parse(k, v)?,
            "eval.finetune_steps" => self.eval.finetune_steps = parse(k, v)?,
            "eval.finetune_lr" => self.eval.finetune_lr = parse(k, v)?,
            "eval.optimize_steps" => self.eval.optimize_steps = parse(k, v)?,
            "eval.optimize_lr" => self.eval.optimize_lr = parse(k, v)?,
            "eval.psnr_cap" => self.eval.psnr_cap = parse(k, v)?,
            "eval.max_scenes" => self.eval.max_scenes = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.resolve();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.meta.inner_lr < 0.0 || self.meta.outer_lr <= 0.0 {
            return bad("meta learning rates must be positive");
        }
        if self.dataset.views == 0 || self.eval.input_view >= self.dataset.views {
            return bad("eval.input_view must index one of the dataset views");
        }
        if self.dataset.image_size == 0 || self.render.samples == 0 {
            return bad("image size and sample count must be positive");
        }
        if self.gen.plane_res() < 2 {
            return bad("tri-plane resolution must be at least 2");
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Writes the resolved config as `config.txt` under `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}
