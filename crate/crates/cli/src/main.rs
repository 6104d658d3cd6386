use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iabf::channels::{ChannelKind, ChannelSpec};
use iabf::data::{load_dataset, Dataset, SplitKind};
use iabf::eval::{
    distortion_report, emit_image_grid, markov_chain, DistortionReport, EvalContext, EvalMode,
    ImageShape,
};
use iabf::oracles::random_mlp_grad_checks;
use iabf::training::{self, ModelCheckpoint, TrainConfig, CONFIG_FILE};

#[derive(Parser)]
#[command(
    name = "iabf",
    version,
    about = "Learned joint source-channel codes over noisy binary channels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder/decoder pair.
    Train(TrainArgs),
    /// Measure reconstruction distortion of a checkpoint.
    Eval(EvalArgs),
    /// Run the encode-channel-decode Markov chain and write image grids.
    Sample(SampleArgs),
    /// Finite-difference check of the autodiff engine on random networks.
    Gradcheck(GradcheckArgs),
    /// Print checkpoint metadata.
    Inspect(InspectArgs),
}

/// Settings shared with the config file; flags override file values.
#[derive(Args, Default)]
struct Overrides {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::parse_text(
                &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )?,
            None => base,
        };
        if let Some(v) = &self.dataset {
            c.set("dataset", v)?;
        }
        if let Some(v) = &self.data_dir {
            c.data_dir = v.clone();
        }
        if let Some(v) = self.bits {
            c.bits = v;
        }
        if let Some(v) = &self.method {
            c.set("method", v)?;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.threads {
            c.threads = v;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
            c.set(k.trim(), v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Training noise level; several values train one model each.
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (one subdirectory per epsilon when several are given).
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Channel noise levels to evaluate at; defaults to the training value.
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    #[arg(long)]
    channel: Option<ChannelKind>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    mode: Option<EvalMode>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Override where the data lives.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Evaluate only the first this many images.
    #[arg(long)]
    limit: Option<usize>,
    /// Directory for `eval.csv` and the effective config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Number of chains, one grid row each.
    #[arg(long, default_value_t = 8)]
    chains: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(2),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let ckpt = a
        .checkpoint
        .as_deref()
        .map(ModelCheckpoint::load)
        .transpose()?;
    let base = ckpt.as_ref().map(|c| c.config.clone()).unwrap_or_default();
    let config = a.overrides.apply(base)?;
    let eps = if a.epsilon.is_empty() {
        vec![config.epsilon]
    } else {
        a.epsilon.clone()
    };
    if ckpt.is_some() && eps.len() > 1 {
        bail!("resuming takes a single --epsilon");
    }
    let data = load_dataset(&config.dataset, &config.data_dir, config.seed)?;
    for &e in &eps {
        let mut c = config.clone();
        c.epsilon = e;
        c.validate()?;
        let out = if eps.len() > 1 {
            a.out.join(format!("eps{e}"))
        } else {
            a.out.clone()
        };
        println!(
            "training {} on {} with M={} eps={} -> {}",
            c.method,
            c.dataset,
            c.bits,
            e,
            out.display()
        );
        let outcome = match &ckpt {
            Some(k) => training::resume(k, &c, &data, Some(&out))?,
            None => training::train_on(&c, &data, Some(&out))?,
        };
        for row in outcome.history.iter().filter(|r| r.split == "val") {
            println!(
                "  epoch {:>3} val distortion {:.4}",
                row.epoch, row.distortion
            );
        }
        println!(
            "  best epoch {} distortion {:.4}",
            outcome.best.epoch, outcome.best.best_val
        );
    }
    Ok(())
}

fn split_of(data: &Dataset, name: &str) -> Result<SplitKind> {
    let kind = match name {
        "train" => SplitKind::Train,
        "val" => SplitKind::Val,
        "test" => SplitKind::Test,
        other => bail!("unknown split '{other}'"),
    };
    if data.split(kind).rows() == 0 {
        bail!("split '{name}' of {} is empty", data.name);
    }
    Ok(kind)
}

fn load_for(ckpt: &ModelCheckpoint, data_dir: Option<&Path>) -> Result<(TrainConfig, Dataset)> {
    let mut c = ckpt.config.clone();
    if let Some(d) = data_dir {
        c.data_dir = d.to_path_buf();
    }
    let data = load_dataset(&c.dataset, &c.data_dir, c.seed)?;
    if data.dim() != ckpt.data_dim {
        bail!(
            "dataset has {} columns, checkpoint expects {}",
            data.dim(),
            ckpt.data_dim
        );
    }
    Ok((c, data))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = ModelCheckpoint::load(&a.checkpoint)?;
    let (mut config, data) = load_for(&ckpt, a.data_dir.as_deref())?;
    if let Some(v) = a.channel {
        config.channel = v;
    }
    if let Some(v) = a.draws {
        config.eval_draws = v;
    }
    if let Some(v) = a.mode {
        config.eval_mode = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.threads {
        config.threads = v;
    }
    config.validate()?;
    let model = ckpt.model()?;
    let kind = split_of(&data, &a.split)?;
    let mut x = data.split(kind).clone();
    if let Some(n) = a.limit.filter(|&n| n > 0 && n < x.rows()) {
        x = x.slice_rows(0, n);
    }
    let eps = if a.epsilon.is_empty() {
        vec![config.epsilon]
    } else {
        a.epsilon.clone()
    };
    let dataset = config.dataset.to_string();
    let method = config.method.to_string();
    let mut rows = Vec::new();
    for &e in &eps {
        let channel = ChannelSpec::new(config.channel, e)?;
        let ctx = EvalContext {
            dataset: &dataset,
            split: &a.split,
            method: &method,
            seed: config.seed,
            threads: config.threads,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let r = distortion_report(
            &model,
            &x,
            &channel,
            config.eval_mode,
            config.eval_draws,
            &ctx,
            &mut rng,
        )?;
        println!("{r}");
        rows.push(r);
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join(CONFIG_FILE), config.to_text())?;
        let mut csv = format!("{}\n", DistortionReport::CSV_HEADER);
        for r in &rows {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        fs::write(out.join("eval.csv"), csv)?;
    }
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let ckpt = ModelCheckpoint::load(&a.checkpoint)?;
    let (config, data) = load_for(&ckpt, a.data_dir.as_deref())?;
    let model = ckpt.model()?;
    let channel = config.eval_channel(a.epsilon.unwrap_or(config.epsilon))?;
    let x = &data.test;
    let x = if x.rows() == 0 { &data.train } else { x };
    let chains = a.chains.min(x.rows());
    if chains == 0 {
        bail!("no images to start chains from");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut images = Vec::with_capacity(chains * (a.steps + 1));
    for i in 0..chains {
        let x0: Vec<f64> = x.row(i).iter().map(|&v| f64::from(v)).collect();
        images.extend(markov_chain(&model, &channel, &x0, a.steps, &mut rng)?);
    }
    let shape = ImageShape::guess(data.dim());
    fs::create_dir_all(&a.out)?;
    let ext = if shape.channels == 3 { "ppm" } else { "pgm" };
    let path = a.out.join(format!("chain.{ext}"));
    emit_image_grid(&images, shape, chains, a.steps + 1, &path)?;
    fs::write(a.out.join(CONFIG_FILE), config.to_text())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let reports = random_mlp_grad_checks(a.count, a.tol, &mut rng)?;
    let worst = reports
        .iter()
        .map(|r| r.max_rel_error())
        .fold(0.0, f64::max);
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!(
        "{} networks, {} failed, worst relative error {:.3e} (tolerance {:.0e})",
        reports.len(),
        failed,
        worst,
        a.tol
    );
    if failed > 0 {
        bail!("gradient check failed on {failed} networks");
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = ModelCheckpoint::load(&a.checkpoint)?;
    print!("{}", ckpt.describe());
    Ok(())
}
