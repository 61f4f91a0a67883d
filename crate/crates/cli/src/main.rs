use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use meshfuse::body_model::{toy_asset, BodyAsset};
use meshfuse::config::{Config, ConfigError};
use meshfuse::evaluate::{evaluate, export, infer, InferMode};
use meshfuse::model::Model;
use meshfuse::synthdata::{generate, read_dataset, write_dataset, SynthSample};
use meshfuse::train::{load_checkpoint, Trainer};

#[derive(Parser)]
#[command(name = "meshfuse", version, about = "Occluded human mesh recovery on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(Common),
    /// Train and write checkpoints plus train.log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Steps to run; overrides train.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Start from this checkpoint instead of fresh parameters.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Metrics report with a per-layer breakdown.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Mesh text file per sample.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Net)]
        mode: Mode,
    },
    /// Attention archives and the joint embedding report.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; keys left out take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in defaults: desk, smoke or full.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Body asset archive; the procedural toy body when absent.
    #[arg(long)]
    asset: Option<PathBuf>,
    /// Dataset directory from `gen`; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Net,
    Gt,
}

/// Errors in what the user asked for, as opposed to failures doing it.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load_config(c: &Common) -> Result<Config> {
    let preset = Config::preset(&c.preset).ok_or_else(|| Usage(format!("unknown preset `{}`", c.preset)))?;
    let mut cfg = match &c.config {
        None => preset,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Usage(format!("reading {}: {e}", path.display())))?;
            let over: toml::Value = toml::from_str(&text).map_err(|e| Usage(format!("parsing {}: {e}", path.display())))?;
            let mut base = toml::Value::try_from(&preset)?;
            merge_toml(&mut base, over);
            Config::from_toml_str(&toml::to_string(&base)?).map_err(|e| Usage(e.to_string()))?
        }
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e: ConfigError| Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_asset(c: &Common) -> Result<BodyAsset> {
    match &c.asset {
        None => Ok(toy_asset()),
        Some(p) => BodyAsset::load(p).with_context(|| format!("loading asset {}", p.display())),
    }
}

fn load_data(c: &Common, cfg: &Config, asset: &BodyAsset) -> Result<Vec<SynthSample>> {
    match &c.data {
        Some(dir) => read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display())),
        None => Ok(generate(asset, &cfg.data, cfg.model.image_size, cfg.seed)),
    }
}

fn prepare_out(dir: &Path, cfg: &Config) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.echo_into(dir)?;
    Ok(())
}

fn model_from(cfg: &Config, asset: BodyAsset, ckpt: Option<&Path>) -> Result<Model> {
    let mut model = Model::new(cfg, asset)?;
    if let Some(p) = ckpt {
        load_checkpoint(&mut model, p).with_context(|| format!("loading checkpoint {}", p.display()))?;
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = load_config(&c)?;
            let asset = load_asset(&c)?;
            prepare_out(&c.out, &cfg)?;
            let samples = generate(&asset, &cfg.data, cfg.model.image_size, cfg.seed);
            write_dataset(&c.out, &samples, cfg.data.shard_size)?;
            println!("wrote {} samples to {}", samples.len(), c.out.display());
        }
        Command::Train { common: c, steps, ckpt } => {
            let cfg = load_config(&c)?;
            let asset = load_asset(&c)?;
            let data = load_data(&c, &cfg, &asset)?;
            prepare_out(&c.out, &cfg)?;
            let model = model_from(&cfg, asset, ckpt.as_deref())?;
            let mut trainer = Trainer::new(model, &data)?;
            let steps = steps.unwrap_or(cfg.train.steps);
            let records = trainer.run(steps, Some(&c.out), |r| {
                if r.step % 50 == 0 {
                    log::info!("step {} total {:.6}", r.step, r.total);
                }
            })?;
            if let Some(last) = records.last() {
                println!("step {} total {:.6}", last.step, last.total);
            }
        }
        Command::Eval { common: c, ckpt } => {
            let cfg = load_config(&c)?;
            let asset = load_asset(&c)?;
            let model = model_from(&cfg, asset, Some(&ckpt))?;
            let data = load_data(&c, &cfg, &model.asset)?;
            prepare_out(&c.out, &cfg)?;
            let report = evaluate(&model, &data);
            report.write(&c.out)?;
            print!("{}", report.to_text());
        }
        Command::Infer { common: c, ckpt, mode } => {
            let cfg = load_config(&c)?;
            let asset = load_asset(&c)?;
            let mode = match mode {
                Mode::Net => InferMode::Net,
                Mode::Gt => InferMode::Gt,
            };
            if mode == InferMode::Net && ckpt.is_none() {
                bail!(Usage("infer --mode net needs --ckpt".into()));
            }
            let model = model_from(&cfg, asset, ckpt.as_deref())?;
            let data = load_data(&c, &cfg, &model.asset)?;
            prepare_out(&c.out, &cfg)?;
            infer(&model, &data, mode, &c.out)?;
            println!("wrote {} meshes to {}", data.len(), c.out.display());
        }
        Command::Export { common: c, ckpt } => {
            let cfg = load_config(&c)?;
            let asset = load_asset(&c)?;
            let model = model_from(&cfg, asset, Some(&ckpt))?;
            let data = load_data(&c, &cfg, &model.asset)?;
            prepare_out(&c.out, &cfg)?;
            if let Some(r) = export(&model, &data, &c.out)? {
                print!("{}", r.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
