use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use metaux_core::config::RunConfig;
use metaux_core::editing::{fit_direction, measure_edit, save_direction, Attribute};
use metaux_core::pipeline::{
    self, load_split, reconstruct, score, stage_aux_phase1, stage_dataset, stage_encoder, stage_meta, stage_pretrain, test_dir, train_dir, Method,
    Models, AUX_FILE, AUX_PHASE1_FILE, ENCODER_FILE,
};
use metaux_core::scene::save_image;

/// Few-shot 3D-aware inversion with a meta-learned auxiliary network.
///
/// Any config key can be overridden with `--key value`, e.g.
/// `--gen.steps 200 --dataset.image_size 16`.
#[derive(Parser, Debug)]
#[command(name = "metaux", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the train and test splits.
    DatasetGen,
    /// Fit the generator and per-scene latents.
    Pretrain,
    /// Fit the image encoder against the latent table.
    TrainEncoder,
    /// Joint aux training without inner steps.
    TrainAux,
    /// Meta-train the aux network from the joint checkpoint.
    MetaTrain,
    /// Reconstruct one test image and write the result.
    Invert {
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        view: Option<usize>,
        #[arg(long)]
        adapt_steps: Option<usize>,
        #[arg(long, value_enum, default_value_t = MethodArg::Full)]
        method: MethodArg,
    },
    /// Fit an attribute direction on the latent table and sweep it over test latents.
    Edit {
        #[arg(long, value_enum, default_value_t = AttrArg::Radius)]
        attribute: AttrArg,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-3,-2,-1,0,1,2,3")]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// Keep the adapted weights and offsets of the full method while editing.
        #[arg(long)]
        adapted: bool,
    },
    /// Render every dataset pose of a reconstructed test scene.
    RenderViews {
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::Full)]
        method: MethodArg,
    },
    /// Score a method on the test split.
    Eval {
        #[arg(long, value_enum, default_value_t = MethodArg::Full)]
        method: MethodArg,
    },
    /// Score an ablation next to the full method.
    Ablate {
        #[arg(value_enum)]
        variant: AblationArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Encoder,
    Optimize,
    Full,
    NoMeta,
    NoAux,
    #[value(name = "no-2d")]
    No2d,
    #[value(name = "no-3d")]
    No3d,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Encoder => Method::Encoder,
            MethodArg::Optimize => Method::Optimize,
            MethodArg::Full => Method::Full,
            MethodArg::NoMeta => Method::NoMeta,
            MethodArg::NoAux => Method::NoAux,
            MethodArg::No2d => Method::No2d,
            MethodArg::No3d => Method::No3d,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    NoAux,
    NoMeta,
    #[value(name = "no-2d")]
    No2d,
    #[value(name = "no-3d")]
    No3d,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttrArg {
    Radius,
    Hue,
}

/// Splits `--section.key value` pairs (and `--seed`, `--out_dir`) from the
/// arguments clap handles.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| {
            let name = k.split('=').next().unwrap_or("");
            name.contains('.') || matches!(name, "seed" | "out_dir" | "out-dir")
        });
        match key {
            Some(k) => {
                let (k, v) = match k.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => (k.to_string(), it.next().with_context(|| format!("--{k} needs a value"))?),
                };
                overrides.push((k.replace("out-dir", "out_dir"), v));
            }
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn eval_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join("eval").join(name)
}

fn run_eval(cfg: &RunConfig, models: &Models, method: Method, dir: &Path) -> Result<pipeline::EvalReport> {
    let test = load_split(&test_dir(cfg))?;
    let report = pipeline::evaluate(cfg, models, &test, method)?;
    report.write(dir)?;
    cfg.write_resolved(dir)?;
    Ok(report)
}

fn needs(method: Method) -> Vec<&'static str> {
    match method {
        Method::Encoder | Method::Optimize | Method::NoAux => vec![ENCODER_FILE],
        Method::NoMeta => vec![ENCODER_FILE, AUX_PHASE1_FILE],
        Method::Full | Method::No2d | Method::No3d => vec![ENCODER_FILE, AUX_FILE],
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::DatasetGen => {
            let (train, test) = stage_dataset(&cfg)?;
            println!("wrote {} train and {} test scenes under {}", train.len(), test.len(), cfg.out_dir.join("data").display());
        }
        Command::Pretrain => {
            let train = load_split(&train_dir(&cfg))?;
            let m = stage_pretrain(&cfg, &train)?;
            println!("generator and {} latents saved to {}", m.latents.len(), cfg.out_dir.display());
        }
        Command::TrainEncoder => {
            let train = load_split(&train_dir(&cfg))?;
            let mut m = Models::load(&cfg, &[])?;
            stage_encoder(&cfg, &mut m, &train)?;
            println!("encoder saved");
        }
        Command::TrainAux => {
            let train = load_split(&train_dir(&cfg))?;
            let mut m = Models::load(&cfg, &[ENCODER_FILE])?;
            stage_aux_phase1(&cfg, &mut m, &train)?;
            println!("joint aux checkpoint saved");
        }
        Command::MetaTrain => {
            let train = load_split(&train_dir(&cfg))?;
            let mut m = Models::load(&cfg, &[ENCODER_FILE, AUX_PHASE1_FILE])?;
            stage_meta(&cfg, &mut m, &train)?;
            println!("meta-trained aux checkpoint saved");
        }
        Command::Invert { scene, view, adapt_steps, method } => {
            let method = Method::from(method);
            let m = Models::load(&cfg, &needs(method))?;
            let test = load_split(&test_dir(&cfg))?;
            let rec = test.get(scene).with_context(|| format!("test split has {} scenes", test.len()))?;
            let v = view.unwrap_or(cfg.eval.input_view);
            let (pose, x) = rec.views.get(v).with_context(|| format!("scene has {} views", rec.views.len()))?;
            let steps = adapt_steps.unwrap_or(if method == Method::NoAux { cfg.eval.finetune_steps } else { cfg.eval.adapt_steps });
            let r = reconstruct(&cfg, &m, method, x, pose, steps, cfg.flip)?;
            let dir = cfg.out_dir.join("invert").join(format!("scene_{scene:04}_view_{v:02}"));
            std::fs::create_dir_all(&dir)?;
            save_image(&dir.join("input.tnsr"), x)?;
            save_image(&dir.join(format!("{}.tnsr", method.name())), &r.output.image)?;
            let row = score(&cfg, &m, &r, rec, v)?;
            let mut trace = String::from("step\tloss\n");
            for (i, l) in r.trace.iter().enumerate() {
                writeln!(trace, "{i}\t{l:.8e}")?;
            }
            write(&dir.join("trace.tsv"), &trace)?;
            cfg.write_resolved(&dir)?;
            println!("{}: mse {:.6} psnr {:.2} novel_mse {:.6} ({:.2}s)", method.name(), row.mse, row.psnr, row.novel_mse, r.seconds);
        }
        Command::Edit { attribute, alphas, scenes, adapted } => {
            let m = Models::load(&cfg, &if adapted { vec![ENCODER_FILE, AUX_FILE] } else { vec![ENCODER_FILE] })?;
            let train = load_split(&train_dir(&cfg))?;
            let test = load_split(&test_dir(&cfg))?;
            let (name, attr, values): (&str, Attribute, Vec<f64>) = match attribute {
                AttrArg::Radius => ("radius", Attribute::Area, train.iter().map(|r| r.spec.radius).collect()),
                AttrArg::Hue => ("hue", Attribute::Hue, train.iter().map(|r| r.spec.hue).collect()),
            };
            let mid = pipeline::median(&values);
            let labels: Vec<bool> = values.iter().map(|&v| v > mid).collect();
            let dir = fit_direction(&m.latents, &labels, name)?;
            let out = cfg.out_dir.join("edit");
            std::fs::create_dir_all(&out)?;
            save_direction(&dir, &out.join(format!("{name}.tnsr")))?;
            let mut tsv = String::from("scene\talpha\tmeasure\n");
            let v = cfg.eval.input_view;
            for rec in test.iter().take(scenes) {
                let (pose, x) = &rec.views[v];
                let method = if adapted { Method::Full } else { Method::Encoder };
                let r = reconstruct(&cfg, &m, method, x, pose, cfg.eval.adapt_steps, cfg.flip)?;
                for (a, val) in measure_edit(&m.gen, &r.params, r.offsets.as_ref(), &r.latent, &dir, &alphas, pose, attr, &cfg.render)? {
                    writeln!(tsv, "{}\t{a}\t{val:.8e}", rec.id)?;
                }
            }
            write(&out.join(format!("{name}_sweep.tsv")), &tsv)?;
            cfg.write_resolved(&out)?;
            println!("direction and sweep written to {}", out.display());
        }
        Command::RenderViews { scene, method } => {
            let method = Method::from(method);
            let m = Models::load(&cfg, &needs(method))?;
            let test = load_split(&test_dir(&cfg))?;
            let rec = test.get(scene).with_context(|| format!("test split has {} scenes", test.len()))?;
            let (pose, x) = &rec.views[cfg.eval.input_view];
            let steps = if method == Method::NoAux { cfg.eval.finetune_steps } else { cfg.eval.adapt_steps };
            let r = reconstruct(&cfg, &m, method, x, pose, steps, cfg.flip)?;
            let dir = cfg.out_dir.join("views").join(format!("scene_{scene:04}"));
            std::fs::create_dir_all(&dir)?;
            for (i, (p, target)) in rec.views.iter().enumerate() {
                save_image(&dir.join(format!("view_{i:02}_{}.tnsr", method.name())), &r.render(&m, &cfg, p)?.image)?;
                save_image(&dir.join(format!("view_{i:02}_target.tnsr")), target)?;
            }
            cfg.write_resolved(&dir)?;
            println!("{} views written to {}", rec.views.len(), dir.display());
        }
        Command::Eval { method } => {
            let method = Method::from(method);
            let m = Models::load(&cfg, &needs(method))?;
            let report = run_eval(&cfg, &m, method, &eval_dir(&cfg, method.name()))?;
            print!("{}", report.summary());
        }
        Command::Ablate { variant } => {
            let variant = match variant {
                AblationArg::NoAux => Method::NoAux,
                AblationArg::NoMeta => Method::NoMeta,
                AblationArg::No2d => Method::No2d,
                AblationArg::No3d => Method::No3d,
            };
            let mut names = needs(Method::Full);
            names.extend(needs(variant));
            names.sort_unstable();
            names.dedup();
            let m = Models::load(&cfg, &names)?;
            let full = run_eval(&cfg, &m, Method::Full, &eval_dir(&cfg, "full"))?;
            let abl = run_eval(&cfg, &m, variant, &eval_dir(&cfg, variant.name()))?;
            for metric in ["mse", "novel_mse"] {
                println!("median {metric}: full {:.6e}  {} {:.6e}", full.median(metric), variant.name(), abl.median(metric));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(rest);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
