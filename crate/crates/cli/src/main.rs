//! `wmil` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use wmil::config::Config;
use wmil::eval::{self, kfold_split, EvalOptions};
use wmil::infer::{classify, DEFAULT_THRESHOLD};
use wmil::model::{load_params, save_params};
use wmil::synthdata::{generate_corpus, Corpus, CorpusSpec};
use wmil::trainer::{train, train_resumable, Mode, TrainConfig, TrainState};
use wmil::{imaging, Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "wmil", version, about = "Weighted multiple-instance region classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus and its manifest.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Model checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the mode in the config file.
        #[arg(long)]
        mode: Option<String>,
        /// Per-epoch CSV log (default: the checkpoint path with `.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a training state written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a labelled manifest and write a JSON report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Convert images to grayscale before scoring.
        #[arg(long)]
        gray: bool,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05")]
        fpr_targets: Vec<f64>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Classify one image and print the verdict as JSON.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Score all eleven regions instead of stopping at the first trigger.
        #[arg(long)]
        no_early_exit: bool,
    },
    /// Stratified k-fold cross-validation; prints per-fold rates as JSON.
    Crossval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Write the ROC curve of a labelled manifest as CSV.
    RocDump {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gray: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_train_config(path: &Path, mode: Option<&str>) -> Result<TrainConfig> {
    let mut config = TrainConfig::from_config(Config::load(path)?)?;
    if let Some(m) = mode {
        config.mode = m.parse::<Mode>()?;
    }
    Ok(config)
}

fn state_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => {
            let mut config = Config::load(&spec)?;
            let spec = CorpusSpec::from_config(&mut config)?;
            config.finish()?;
            let entries = generate_corpus(&spec, &out)?;
            println!("wrote {} images to {}", entries.len(), out.display());
        }
        Command::Train {
            manifest,
            config,
            out,
            mode,
            log,
            resume,
        } => {
            let config = load_train_config(&config, mode.as_deref())?;
            let corpus = Corpus::load(&manifest)?;
            let resume = match resume {
                Some(p) => Some(TrainState::decode(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?),
                None => None,
            };
            let checkpoint = state_path(&out);
            let state = train_resumable(&corpus, &config, resume, |s| write(&checkpoint, s.encode()))?;
            save_params(&state.params, &out)?;
            let log = log.unwrap_or_else(|| out.with_extension("log.csv"));
            write(&log, state.log.to_csv())?;
            if let Some(last) = state.log.records.last() {
                println!(
                    "trained {} epochs ({}), final loss {:.6}",
                    last.epoch, config.mode, last.mean_loss
                );
            }
        }
        Command::Eval {
            manifest,
            model,
            threshold,
            gray,
            fpr_targets,
            report,
        } => {
            let params = load_params(&model)?;
            let corpus = Corpus::load(&manifest)?;
            let options = EvalOptions {
                threshold,
                gray,
                fpr_targets,
            };
            let r = eval::evaluate(&params, &corpus, &options)?;
            write(&report, r.to_json())?;
            let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            println!(
                "detection rate pos {} neg {} all {}; auc {}",
                show(r.detection_rate_pos),
                show(r.detection_rate_neg),
                show(r.detection_rate_all),
                show(r.auc)
            );
        }
        Command::Predict {
            image,
            model,
            threshold,
            no_early_exit,
        } => {
            let params = load_params(&model)?;
            let img = imaging::load_image(&image)?;
            let verdict = classify(&params, &img, threshold, !no_early_exit)?;
            println!("{}", serde_json::to_string(&verdict).expect("verdict serializes"));
        }
        Command::Crossval { manifest, config, k } => {
            let config = load_train_config(&config, None)?;
            let corpus = Corpus::load(&manifest)?;
            let folds = kfold_split(&corpus.labels(), k, config.seed)?;
            let mut results = Vec::with_capacity(k);
            for (i, fold) in folds.iter().enumerate() {
                let (params, _) = train(&corpus.select(&fold.train), &config)?;
                let r = eval::evaluate(&params, &corpus.select(&fold.validation), &EvalOptions::default())?;
                results.push(json!({
                    "fold": i,
                    "detection_rate_pos": r.detection_rate_pos,
                    "detection_rate_neg": r.detection_rate_neg,
                    "detection_rate_all": r.detection_rate_all,
                    "auc": r.auc,
                }));
            }
            let mean = |key: &str| {
                let v: Vec<f64> = results.iter().filter_map(|r| r[key].as_f64()).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let summary = json!({
                "k": k,
                "folds": results,
                "mean_detection_rate_all": mean("detection_rate_all"),
                "mean_auc": mean("auc"),
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
        }
        Command::RocDump {
            manifest,
            model,
            gray,
            out,
        } => {
            let params = load_params(&model)?;
            let corpus = Corpus::load(&manifest)?;
            let options = EvalOptions {
                gray,
                ..EvalOptions::default()
            };
            let scored = eval::score_corpus(&params, &corpus, &options)?;
            let labelled: Vec<_> = scored.iter().map(|s| (s.label, s.score)).collect();
            let curve = eval::roc(&labelled, &[])?;
            write(&out, eval::roc_csv(&curve))?;
            println!("auc {:.6}, {} points", curve.auc, curve.points.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}
