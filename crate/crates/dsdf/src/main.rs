use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dsdf::config::{PrecisionName, TrainConfig};
use dsdf::corpus::{self, Sample};
use dsdf::error::{io_err, Error, Result};
use dsdf::train::{self, TrainOptions};
use dsdf::{analysis, checkpoint, infer, io, synth};
use dsdf_core::gradcheck::{self, MAGNITUDE_FLOOR, STEP};
use dsdf_core::model::{ModelConfig, Prepared};
use dsdf_core::fusion::Label;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "dsdf", version, about = "Dual-stream deepfake detector: train, evaluate and inspect")]
struct Cli {
    /// JSON training configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded execution for reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Parameter checkpoint to read.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured input side length.
    #[arg(long, global = true)]
    size: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic real/fake corpus.
    Synth {
        /// Total image count (even).
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Train on a corpus directory with real/ and fake/ subdirectories.
    Train { data: PathBuf },
    /// Score a corpus split with a checkpoint.
    Evaluate {
        data: PathBuf,
        /// Score every image instead of the validation split.
        #[arg(long)]
        all: bool,
    },
    /// Classify individual images; prints one JSON object per image.
    Infer {
        images: Vec<PathBuf>,
        /// Write the histogram-branch attention maps as CSV and PGM.
        #[arg(long)]
        dump_attn: Option<PathBuf>,
    },
    /// Per-image band energy, entropy and PSD as CSV.
    AnalyzeFreq { data: PathBuf },
    /// Finite-difference check of every parameter group.
    Gradcheck,
}

impl Cli {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, &self.checkpoint) {
            (Some(path), _) => TrainConfig::load(path)?,
            (None, Some(ckpt)) => {
                let beside = ckpt.parent().unwrap_or(Path::new(".")).join(train::CONFIG_FILE);
                if beside.is_file() { TrainConfig::load(&beside)? } else { TrainConfig::default() }
            }
            (None, None) => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(size) = self.size {
            cfg.image_size = size;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("--out DIR is required".into()))
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint.as_deref().ok_or_else(|| Error::Config("--checkpoint PATH is required".into()))
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth { n } => {
            let cfg = cli.train_config()?;
            let out = cli.out_dir()?;
            let written = synth::write_corpus(out, *n, cfg.image_size, cfg.seed)?;
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Train { data } => {
            let cfg = cli.train_config()?;
            let out = cli.out_dir()?;
            let corpus = corpus::ingest(data, cfg.seed)?;
            let opts = TrainOptions {
                deterministic: cli.deterministic,
                verbose: true,
            };
            let outcome = train::train(&cfg, &corpus, out, &opts)?;
            println!(
                "best val AUC {:.4} at epoch {} -> {}",
                outcome.best_auc,
                outcome.best_epoch,
                outcome.best_checkpoint.display()
            );
        }
        Command::Evaluate { data, all } => {
            let cfg = cli.train_config()?;
            let model = cfg.model();
            let params = checkpoint::load_for(cli.checkpoint()?, &model)?;
            let corpus = corpus::ingest(data, cfg.seed)?;
            let picked: Vec<usize> = if *all { (0..corpus.samples.len()).collect() } else { corpus.val.clone() };
            let samples: Vec<&Sample> = corpus.subset(&picked);
            let workers = if cli.deterministic { 1 } else { train::default_workers() };
            let inputs = train::prepare_all(&samples, &model, workers)?;
            let report = train::evaluate(&params, &model, &samples, &inputs)?;
            let lines: Vec<String> = report.predictions.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
            match &cli.out {
                Some(dir) => {
                    fs::create_dir_all(dir).map_err(io_err(dir))?;
                    write_lines(&dir.join("predictions.jsonl"), &lines)?;
                }
                None => lines.iter().for_each(|l| println!("{l}")),
            }
            let summary = serde_json::json!({
                "auc": report.auc,
                "accuracy": report.accuracy,
                "loss": report.loss,
                "auc_image": report.auc_image,
                "auc_blood": report.auc_blood,
                "n": samples.len(),
            });
            eprintln!("{summary}");
        }
        Command::Infer { images, dump_attn } => {
            if images.is_empty() {
                return Err(Error::Config("no images given".into()));
            }
            let model = cli.train_config()?.model();
            let params = checkpoint::load_for(cli.checkpoint()?, &model)?;
            for path in images {
                let (record, verdict) = infer::run(&params, &model, path)?;
                if let Some(dir) = dump_attn {
                    infer::dump_attention(&verdict, &record.id, dir)?;
                }
                println!("{}", serde_json::to_string(&record)?);
            }
        }
        Command::AnalyzeFreq { data } => {
            let cfg = cli.train_config()?;
            let corpus = corpus::ingest(data, cfg.seed)?;
            let mut lines = vec![analysis::csv_header()];
            for s in &corpus.samples {
                let stats = analysis::band_stats(&io::decode(&s.path)?, cfg.image_size)?;
                lines.push(analysis::csv_row(&s.id, &s.label.to_string(), &stats));
            }
            match &cli.out {
                Some(dir) => {
                    fs::create_dir_all(dir).map_err(io_err(dir))?;
                    write_lines(&dir.join("frequency.csv"), &lines)?;
                }
                None => lines.iter().for_each(|l| println!("{l}")),
            }
        }
        Command::Gradcheck => return gradcheck_table(cli),
    }
    Ok(true)
}

/// Runs the full-model check in 64-bit mode and prints one row per group.
fn gradcheck_table(cli: &Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(_) => cli.train_config()?.model(),
        None => ModelConfig::reduced(),
    };
    cfg.precision = PrecisionName::F64.into();
    let seed = cli.seed.unwrap_or(0);
    let params = cfg.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, fake) = dsdf_core::synth::pair(&mut rng, cfg.image_size)?;
    let input = Prepared::from_image(&fake, &cfg)?;
    let reports = gradcheck::check_model(&params, &cfg, &input, Label::Fake, STEP)?;
    println!("step {STEP:e}, relative-error floor {MAGNITUDE_FLOOR:e}, threshold 1e-3");
    println!("{:<10} {:>9} {:>13} {:>13} {:>8} {:>10}  status", "group", "elements", "max_rel_err", "max_abs_err", "kinks", "unresolved");
    let mut ok = true;
    for g in gradcheck::by_group(&reports) {
        let pass = g.max_rel_err < 1e-3;
        ok &= pass;
        println!(
            "{:<10} {:>9} {:>13.3e} {:>13.3e} {:>8} {:>10}  {}",
            g.name,
            g.checked,
            g.max_rel_err,
            g.max_abs_err,
            g.kink_adjusted,
            g.unresolved,
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
