//! Command-line front end: `mgaug <command> [--config FILE] [flags]`.
//!
//! Settings resolve as defaults < config file < flags. Exit codes: 0 on
//! success, 1 on usage or configuration errors and missing inputs, 2 on
//! runtime and numerical failures.

mod commands;
pub mod record;
pub mod settings;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_kv, KvMap};
use crate::error::{Error, Result};
pub use settings::{RunConfig, TaskKind};

#[derive(Parser, Debug)]
#[command(name = "mgaug", version, about = "Multimodal geometric augmentation pipeline")]
struct Cli {
    /// Worker threads (falls back to MGAUG_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-mode benchmark.
    Synth(Common),
    /// Register every image to its class template.
    Register(Common),
    /// Train the mixture augmentation model on registered velocities.
    TrainAug(Common),
    /// Sample augmented images from a trained model.
    Sample(Common),
    /// Train a classifier or segmenter.
    TrainTask(Common),
    /// Alternate augmenter and task training.
    Joint(Common),
    /// Evaluate a trained task model.
    Eval(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    velocities: Option<PathBuf>,
    /// Mixture-model checkpoint directory.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    task_model: Option<PathBuf>,
    /// Ground-truth mode CSV, for reporting ARI.
    #[arg(long)]
    modes: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Augmented-to-original ratio.
    #[arg(long)]
    mult: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of mixture components.
    #[arg(short = 'C', long = "components")]
    components: Option<usize>,
    #[arg(long)]
    task: Option<String>,
    /// Any config key, repeatable: `--set sigma=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<KvMap> {
        let mut kv = KvMap::default();
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let paths = [
            ("out", &self.out),
            ("data", &self.data),
            ("templates", &self.templates),
            ("velocities", &self.velocities),
            ("model", &self.model),
            ("task_model", &self.task_model),
            ("modes", &self.modes),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                kv.insert(k, p.to_string_lossy());
            }
        }
        if let Some(s) = self.seed {
            kv.insert("seed", s.to_string());
        }
        if let Some(m) = self.mult {
            kv.insert("multiplier", m.to_string());
        }
        if let Some(e) = self.epochs {
            kv.insert("epochs", e.to_string());
        }
        if let Some(c) = self.components {
            kv.insert("C", c.to_string());
        }
        if let Some(t) = &self.task {
            kv.insert("task", t.clone());
        }
        Ok(kv)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_kv(&text)?
            }
            None => KvMap::default(),
        };
        RunConfig::resolve(&file, &self.overrides()?)
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("MGAUG_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("MGAUG_THREADS must be an integer, got {v:?}")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("thread count must be >= 1".into()));
        }
        // A global pool can only be installed once per process; later calls keep the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads(cli.threads).and_then(|_| {
        let (common, f): (&Common, fn(&RunConfig) -> Result<()>) = match &cli.command {
            Command::Synth(c) => (c, commands::synth),
            Command::Register(c) => (c, commands::register),
            Command::TrainAug(c) => (c, commands::train_aug),
            Command::Sample(c) => (c, commands::sample),
            Command::TrainTask(c) => (c, commands::train_task_cmd),
            Command::Joint(c) => (c, commands::joint),
            Command::Eval(c) => (c, commands::eval),
        };
        f(&common.resolve()?)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mgaug: {e}");
            exit_code(&e)
        }
    }
}
