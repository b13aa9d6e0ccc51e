use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use synloc_cli::{
    cmd_generate, cmd_inspect_bias, cmd_preprocess, cmd_train_toy, exit_code, DumpFormat, InspectRequest, RunConfig,
};
use synloc_core::Result;

#[derive(Parser)]
#[command(name = "synloc", version, about = "Answer-localness and syntactic-mask attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus per-key overrides. Flag names match the keys
/// accepted in the file.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Relation filter: all_relations, core_arguments or core_nominal
    #[arg(long)]
    strategy: Option<String>,
    /// Encoder layers (1-based, comma-separated) with the Gaussian bias; `none` for no layers
    #[arg(long)]
    localness_layers: Option<String>,
    /// Encoder layers with the syntactic-mask branch; `none` for no layers
    #[arg(long)]
    synmask_layers: Option<String>,
    /// Gaussian center: answer or predicted
    #[arg(long)]
    center: Option<String>,
    /// Number of future-token heads
    #[arg(long)]
    ngram: Option<String>,
    /// Comma-separated head weights
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    model_dim: Option<String>,
    #[arg(long)]
    ffn_dim: Option<String>,
    #[arg(long)]
    decoder_layers: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Number of synthetic training examples
    #[arg(long)]
    examples: Option<String>,
    /// Synthetic task: neighborhood or copy
    #[arg(long)]
    task: Option<String>,
    /// Draw fresh training examples every epoch (true or false)
    #[arg(long)]
    resample: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("strategy", &self.strategy),
            ("localness-layers", &self.localness_layers),
            ("synmask-layers", &self.synmask_layers),
            ("center", &self.center),
            ("ngram", &self.ngram),
            ("alphas", &self.alphas),
            ("seed", &self.seed),
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("model-dim", &self.model_dim),
            ("ffn-dim", &self.ffn_dim),
            ("decoder-layers", &self.decoder_layers),
            ("epochs", &self.epochs),
            ("batch-size", &self.batch_size),
            ("lr", &self.lr),
            ("examples", &self.examples),
            ("task", &self.task),
            ("resample", &self.resample),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                c.set(key, v)?;
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Select key sentences, filter triples and write mask artifacts
    Preprocess {
        /// Dataset JSONL
        #[arg(long)]
        data: PathBuf,
        /// Dependency parses in CoNLL-U with `# id =` anchors
        #[arg(long)]
        parses: PathBuf,
        /// Output directory for artifacts and report.json
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Dump Gaussian biases, the mask and attention weights for one example
    InspectBias {
        #[arg(long)]
        id: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        /// Trained checkpoint; an untrained model is used without one
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Query token row for the weight dump (default: first answer token)
        #[arg(long)]
        row: Option<usize>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Write here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on the synthetic neighborhood (or copy) task
    TrainToy {
        /// Output directory for metrics, checkpoint and fixtures
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Greedy predictions for every record with an artifact
    Generate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Predictions JSONL
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess {
            data,
            parses,
            out,
            config,
        } => {
            let report = cmd_preprocess(&data, &parses, &out, &config.resolve()?)?;
            println!(
                "wrote {} of {} artifacts ({} containment, {} rouge fallback, {} skipped)",
                report.written,
                report.records,
                report.containment,
                report.rouge_fallback,
                report.skipped.len()
            );
        }
        Command::InspectBias {
            id,
            data,
            artifacts,
            checkpoint,
            row,
            format,
            out,
            config,
        } => {
            let req = InspectRequest {
                id: &id,
                data: &data,
                artifacts: &artifacts,
                checkpoint: checkpoint.as_deref(),
                row,
                format: match format {
                    Format::Json => DumpFormat::Json,
                    Format::Csv => DumpFormat::Csv,
                },
            };
            let dump = cmd_inspect_bias(&req, &config.resolve()?)?;
            match out {
                Some(path) => fs::write(path, dump)?,
                None => print!("{dump}"),
            }
        }
        Command::TrainToy { out, config } => {
            let summary = cmd_train_toy(&out, &config.resolve()?)?;
            println!(
                "trained {} epochs: loss {:.4}, token accuracy {:.3}; checkpoint {}",
                summary.epochs,
                summary.final_loss,
                summary.final_token_acc,
                summary.checkpoint.display()
            );
        }
        Command::Generate {
            data,
            artifacts,
            checkpoint,
            out,
            max_len,
        } => {
            let s = cmd_generate(&data, &artifacts, &checkpoint, &out, max_len)?;
            println!("wrote {} predictions ({} skipped)", s.written, s.skipped);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
