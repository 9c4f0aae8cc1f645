use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use measx::checkpoint::{to_json, Stage};
use measx::config::{self, Preset};
use measx::error::{Error, Result};
use measx::{pipeline, tsv};
use measx_core::corpus::AnnotationKind;
use measx_core::netcore::checkpoint as params;
use measx_core::synthgen::{generate, GrammarSpec};

/// Measurement extraction: quantities, units and modifiers, entities, properties, qualifiers.
#[derive(Parser)]
#[command(name = "measx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; values not set fall back to the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset (overrides a `preset` key in the file).
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

impl ConfigArgs {
    fn load(&self) -> Result<config::Loaded> {
        config::load(self.config.as_deref(), self.preset)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic annotated corpus.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        docs: usize,
        /// Overrides the grammar seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Grammar settings as TOML.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train one stage on gold annotations and write its best-dev checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Choose the QA null threshold on the development corpus and write an updated config copy.
    TuneThreshold {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Where to write the config copy (default: `<config>.tuned.toml`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full cascade over a corpus.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in")]
        input: PathBuf,
        /// Output TSV file or directory.
        #[arg(long)]
        out: PathBuf,
        /// Per-document debug JSON directory (default: `debug/` beside the TSV).
        #[arg(long)]
        debug: Option<PathBuf>,
        /// Worker threads (default: `jobs` from the config).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Score predictions against gold and print the report.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Write the JSON report here instead of after the table on stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Summarise a corpus, a checkpoint directory or a parameter file.
    Inspect { path: PathBuf },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_generate(out: &Path, docs: usize, seed: Option<u64>, spec: Option<&Path>) -> Result<()> {
    let mut g = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<GrammarSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => GrammarSpec::default(),
    };
    if let Some(s) = seed {
        g.seed = s;
    }
    let (corpus, report) = generate(&g, docs).map_err(|e| Error::Config(e.to_string()))?;
    tsv::write_corpus(&corpus, out)?;
    write(&out.join("generation_report.json"), &to_json(&report))?;
    log::info!(
        "{} documents, {} quantities, {} long, mean {:.1} words -> {}",
        report.documents,
        report.quantities,
        report.long_documents,
        report.mean_words,
        out.display()
    );
    Ok(())
}

fn cmd_train(stage: Stage, cfg: &ConfigArgs) -> Result<()> {
    let loaded = cfg.load()?;
    let c = &loaded.config;
    let epochs = match stage {
        Stage::Quantity => c.quantity.training.epochs,
        Stage::Unitmods => c.unitmods.training.epochs,
        Stage::Qa => c.qa.training.epochs,
    };
    if epochs == 0 {
        log::warn!("epochs = 0: saving the initialised {} model", stage.name());
    }
    let summary = pipeline::train_stage(c, stage, &mut |_| {})?;
    log::info!(
        "{}: {} train / {} dev documents, dev metric {:.4}, checkpoint in {}",
        stage.name(),
        summary.train_docs,
        summary.dev_docs,
        summary.dev_metric,
        c.paths.checkpoints.display()
    );
    Ok(())
}

fn cmd_tune(cfg: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let loaded = cfg.load()?;
    let r = pipeline::tune(&loaded.config)?;
    let dest = match (out, &loaded.path) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(p)) => p.with_extension("tuned.toml"),
        (None, None) => PathBuf::from("measx.tuned.toml"),
    };
    config::write_with_tau(&loaded, r.tau, &dest)?;
    log::info!("tau = {} (F1 {:.4} over {} questions) -> {}", r.tau, r.f1, r.questions, dest.display());
    println!("{}", r.tau);
    Ok(())
}

fn cmd_predict(cfg: &ConfigArgs, input: &Path, out: &Path, debug: Option<&Path>, jobs: Option<usize>) -> Result<()> {
    let loaded = cfg.load()?;
    let c = &loaded.config;
    let jobs = jobs.unwrap_or(c.jobs);
    if jobs == 0 {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    let pred = pipeline::predict_files(c, input, out, debug, jobs)?;
    log::info!("{} documents, {} quantities predicted", pred.len(), pred.count(AnnotationKind::Quantity));
    Ok(())
}

fn cmd_evaluate(pred: &Path, gold: &Path, json: Option<&Path>) -> Result<()> {
    let report = pipeline::evaluate_files(pred, gold)?;
    print!("{}", report.table());
    match json {
        Some(p) => write(p, &to_json(&report))?,
        None => print!("\n{}", to_json(&report)),
    }
    Ok(())
}

fn describe_params(path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let recs = params::decode(&bytes).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
    let total: usize = recs.iter().map(|r| r.2.len()).sum();
    println!("{}: {} tensors, {} values", path.display(), recs.len(), total);
    for (name, shape, v) in recs {
        println!("  {name:<28} {shape:?} ({})", v.len());
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "mprm") {
        return describe_params(path);
    }
    if path.is_dir() && Stage::ALL.iter().any(|s| s.params_path(path).exists()) {
        for s in Stage::ALL {
            let p = s.params_path(path);
            if p.exists() {
                describe_params(&p)?;
            } else {
                println!("{}: missing", p.display());
            }
        }
        return Ok(());
    }
    let c = tsv::read_corpus(path)?;
    let tokens: Vec<usize> = c.docs.iter().map(|d| measx_core::corpus::tokenize(&d.doc).len()).collect();
    println!("{:<18}{}", "documents", c.len());
    for k in AnnotationKind::ALL {
        println!("{:<18}{}", k.as_str(), c.count(k));
    }
    println!("{:<18}{}", "relations", c.docs.iter().map(|d| d.relations.len()).sum::<usize>());
    if !tokens.is_empty() {
        println!("{:<18}{:.1}", "mean tokens", tokens.iter().sum::<usize>() as f64 / tokens.len() as f64);
        println!("{:<18}{}", "over 512 tokens", tokens.iter().filter(|&&n| n > 512).count());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { out, docs, seed, spec } => cmd_generate(&out, docs, seed, spec.as_deref()),
        Command::Train { stage, cfg } => cmd_train(stage, &cfg),
        Command::TuneThreshold { cfg, out } => cmd_tune(&cfg, out.as_deref()),
        Command::Predict { cfg, input, out, debug, jobs } => cmd_predict(&cfg, &input, &out, debug.as_deref(), jobs),
        Command::Evaluate { pred, gold, json } => cmd_evaluate(&pred, &gold, json.as_deref()),
        Command::Inspect { path } => cmd_inspect(&path),
        Command::Config { cfg } => {
            print!("{}", cfg.load()?.config.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(config::LOG_ENV, "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
