use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tidd::config::RunConfig;
use tidd::{pipeline, Error};

#[derive(Parser)]
#[command(name = "tidd", version, about = "TID detection from GNSS sTEC-rate streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-station scenario
    Synth(Common),
    /// Build the window dataset and train the classifier
    Train(Common),
    /// Classify every minute of every stream
    Detect(Common),
    /// Cross-station false positive mitigation
    Fpm(Common),
    /// Sequence-level precision, recall and F1
    Eval(Common),
    /// synth, train, synth, detect, fpm and eval in one go
    RunE2e(Common),
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    quorum: Option<usize>,
    /// Stream file or directory
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Any other configuration key, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("out_dir", path(&self.out_dir)),
            ("window", self.window.map(|v| v.to_string())),
            ("stride", self.stride.map(|v| v.to_string())),
            ("image_size", self.image_size.map(|v| v.to_string())),
            ("threshold", self.threshold.map(|v| v.to_string())),
            ("quorum", self.quorum.map(|v| v.to_string())),
            ("data", path(&self.data)),
            ("labels", path(&self.labels)),
            ("checkpoint", path(&self.checkpoint)),
            ("grid", path(&self.grid)),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<(), Error> {
    let (common, stage): (&Common, fn(&RunConfig) -> Result<(), Error>) = match &command {
        Command::Synth(c) => (c, |cfg| pipeline::cmd_synth(cfg).map(drop)),
        Command::Train(c) => (c, |cfg| pipeline::cmd_train(cfg).map(drop)),
        Command::Detect(c) => (c, |cfg| pipeline::cmd_detect(cfg).map(drop)),
        Command::Fpm(c) => (c, |cfg| pipeline::cmd_fpm(cfg).map(drop)),
        Command::Eval(c) => (c, |cfg| pipeline::cmd_eval(cfg).map(drop)),
        Command::RunE2e(c) => (c, |cfg| pipeline::run_e2e(cfg).map(drop)),
    };
    let cfg = common.resolve()?;
    eprintln!("# configuration");
    for line in cfg.render().lines() {
        eprintln!("#   {line}");
    }
    stage(&cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
