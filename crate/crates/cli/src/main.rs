use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use procap::decoder::DecodeMode;
use procap::pipeline;
use procap::{Context, Image, RunConfig, Split};

/// Projection-aware dual captioning: synthesize composites, train, caption
/// and evaluate.
#[derive(Parser)]
#[command(name = "procap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic composite dataset and its manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Knowledge base operations.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Warm-start the decoder as a caption language model.
    PretrainDecoder {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for model.ckpt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the full model and write model.ckpt, loss_log.csv and run.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Knowledge base; may be omitted when train.null_retrieval is set.
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh, pretrained model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print one caption for an image.
    Caption {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Beam width; greedy when omitted.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score both caption tasks and write report.json plus a text table.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        /// Path of report.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// Embed the manifest's clean sources with a checkpoint.
    Build {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required_unless_present = "null_retrieval")]
    kb: Option<PathBuf>,
    /// Replace retrieved names with the null token.
    #[arg(long)]
    null_retrieval: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Scene,
    Proj,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut run = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        run.seed = s;
        run.train.seed = s;
    }
    Ok(run)
}

fn config_dir(path: Option<&Path>) -> PathBuf {
    path.and_then(Path::parent).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let run = load_config(config.as_deref(), seed)?;
            let manifest = pipeline::synth(&run, &out, &config_dir(config.as_deref()))?;
            println!("{}", manifest.display());
        }
        Command::Kb { command: KbCommand::Build { checkpoint, manifest, out } } => {
            let (model, run, _) = pipeline::read_checkpoint(&checkpoint)?;
            let data = pipeline::read_dataset(&manifest)?;
            let kb = pipeline::build_kb(&model, &data)?;
            pipeline::write_kb(&kb, &out, &run)?;
            eprintln!("{} entries, dim {}", kb.len(), kb.dim());
        }
        Command::PretrainDecoder { config, data, out, seed } => {
            let run = load_config(config.as_deref(), seed)?;
            let data = pipeline::read_dataset(&data)?;
            let mut model = pipeline::init_model(&run, &data)?;
            let report = pipeline::pretrain(&run, &mut model, &data)?;
            let path = pipeline::write_checkpoint(&mut model, &run, 0, &out)?;
            eprintln!("lm loss {:.4} -> {:.4} over {} steps", report.initial_loss, report.final_loss, report.steps);
            println!("{}", path.display());
        }
        Command::Train { config, data, kb, out, init, seed } => {
            let run = load_config(config.as_deref(), seed)?;
            let data = pipeline::read_dataset(&data)?;
            let kb = match kb {
                Some(p) => Some(pipeline::read_kb(&p)?),
                None if run.train.null_retrieval => None,
                None => bail!("--kb is required unless train.null_retrieval is set"),
            };
            let mut model = match init {
                Some(p) => {
                    let (model, saved, _) = pipeline::read_checkpoint(&p)?;
                    if saved.model != run.model {
                        bail!("model dimensions in {} differ from the config", p.display());
                    }
                    model
                }
                None => {
                    let mut model = pipeline::init_model(&run, &data)?;
                    pipeline::pretrain(&run, &mut model, &data)?;
                    model
                }
            };
            let logs = pipeline::train_run(&run, &mut model, &data, kb.as_ref(), &out, |l| {
                if l.step % 100 == 0 {
                    eprintln!("step {:>5} lr {:.3e} total {:.4}", l.step, l.lr, l.losses.total);
                }
            })?;
            if let Some(last) = logs.last() {
                eprintln!("final total {:.4} after {} steps", last.losses.total, logs.len());
            }
            println!("{}", out.join(pipeline::CHECKPOINT_FILE).display());
        }
        Command::Caption { model, image, task, beam } => {
            let (m, _, _) = pipeline::read_checkpoint(&model.checkpoint)?;
            let kb = load_kb_arg(&model)?;
            let img = Image::load_png(&image)?;
            let ctx = kb.as_ref().map_or(Context::Null, Context::Knowledge);
            let mode = beam.map_or(DecodeMode::Greedy, DecodeMode::Beam);
            let out = m.caption(&img, ctx, mode)?;
            match task {
                TaskArg::Scene => println!("{}", out.scene),
                TaskArg::Proj => println!("{}", out.projection),
            }
        }
        Command::Eval { model, data, out, split } => {
            let (m, run, _) = pipeline::read_checkpoint(&model.checkpoint)?;
            let kb = load_kb_arg(&model)?;
            let dataset = pipeline::read_dataset(&data)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let kb_label = model.kb.clone().unwrap_or_else(|| PathBuf::from("null"));
            let meta = pipeline::report_meta(&model.checkpoint, &kb_label, &data);
            let result = pipeline::evaluate(&m, &run, &dataset, split, kb.as_ref(), meta)?;
            let table = pipeline::write_report(&result.report, &out)?;
            print!("{}", result.report.table());
            eprintln!("wrote {} and {}", out.display(), table.display());
        }
    }
    Ok(())
}

fn load_kb_arg(args: &ModelArgs) -> Result<Option<procap::KnowledgeBase>> {
    match (&args.kb, args.null_retrieval) {
        (_, true) => Ok(None),
        (Some(p), false) => Ok(Some(pipeline::read_kb(p)?)),
        (None, false) => unreachable!("clap requires --kb without --null-retrieval"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
