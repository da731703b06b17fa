//! `osod` command-line front end: synthetic data generation, training,
//! evaluation, metric computation on detection files, module ablation and
//! gradient checking.

pub mod formats;
pub mod overrides;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use osod_core::embeddings::{load_embeddings, ClassEmbeddingTable};
use osod_core::harness::{
    ablate_on, generate_dataset, generate_dataset_with_embeddings, predict_all, train_on, Dataset,
};
use osod_core::losses::gradient_suite;
use osod_core::metrics::records::{read_records, write_detections, write_ground_truth, Records};
use osod_core::metrics::{
    evaluate, EvalOptions, DEFAULT_ENTROPY_THRESHOLD, DEFAULT_IOU_THRESHOLD, DEFAULT_RECALL_LEVEL,
};

use formats::Checkpoint;
use overrides::{parse_assignment, Section, Settings};

#[derive(Debug, Parser)]
#[command(name = "osod", about = "Open-set detection losses, metrics and synthetic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Class embedding file to place class latents on, instead of synthesizing them.
        #[arg(long, value_parser = existing_file)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy detector and write a model checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained model on the test split and evaluate its detections.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
        #[arg(long, value_parser = existing_file)]
        model: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        /// Also write the raw detections (before any entropy threshold).
        #[arg(long)]
        dets_out: Option<PathBuf>,
        /// Also write the test ground truth.
        #[arg(long)]
        gts_out: Option<PathBuf>,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate detection and ground-truth record files.
    Metrics {
        #[arg(long, value_parser = existing_file)]
        dets: PathBuf,
        #[arg(long, value_parser = existing_file)]
        gts: PathBuf,
        /// Fixes the known-class vocabulary and its order; otherwise the
        /// sorted class names found in the records are used.
        #[arg(long, value_parser = existing_file)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every on/off combination of the three modules.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every loss gradient against finite differences on random inputs.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for both data generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a setting, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    overrides: Vec<(String, String)>,
}

#[derive(Debug, Args)]
struct DataSource {
    /// Dataset written by `generate`; generated from the settings when omitted.
    #[arg(long, value_parser = existing_file)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Entropy threshold in nats, or `none`.
    #[arg(long, value_parser = parse_threshold)]
    entropy_threshold: Option<Threshold>,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    #[arg(long, default_value_t = DEFAULT_RECALL_LEVEL)]
    recall_level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Threshold(Option<f64>);

fn parse_threshold(s: &str) -> Result<Threshold, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Threshold(None));
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(Threshold(Some(v))),
        _ => Err(format!("expected a non-negative number or `none`, got {s:?}")),
    }
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

impl EvalArgs {
    fn options(&self, default_threshold: Option<f64>) -> EvalOptions {
        EvalOptions {
            iou_thresh: self.iou,
            recall_level: self.recall_level,
            entropy_threshold: self.entropy_threshold.map_or(default_threshold, |t| t.0),
        }
    }
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            EXIT_DOMAIN
        }
    }
}

fn settings(common: &Common, allowed: &[Section]) -> Result<Settings, Failure> {
    Settings::build(common.seed, &common.overrides, allowed).map_err(|e| Failure::Usage(e.to_string()))
}

/// Writes through a temporary file in the destination directory, renamed
/// into place once complete.
fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    // Temporary files default to owner-only; outputs are ordinary files.
    #[cfg(unix)]
    builder.permissions(std::os::unix::fs::PermissionsExt::from_mode(0o644));
    let tmp = builder
        .tempfile_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    let mut w = BufWriter::new(tmp);
    body(&mut w).with_context(|| format!("writing {}", path.display()))?;
    let tmp = w.into_inner().map_err(|e| e.into_error())?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_or_stdout(path: Option<&Path>, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, body),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn read_embeddings(path: &Path) -> Result<ClassEmbeddingTable> {
    load_embeddings(open(path)?).with_context(|| format!("reading {}", path.display()))
}

/// Loads `--data`, or generates from the settings. Dataset overrides make no
/// sense next to a dataset file.
fn dataset(source: &DataSource, common: &Common, s: &Settings) -> Result<Dataset, Failure> {
    match &source.data {
        Some(path) => {
            if common.overrides.iter().any(|(k, _)| k.starts_with("data.")) {
                return Err(Failure::Usage("data.* overrides cannot be combined with --data".into()));
            }
            Ok(formats::read_dataset(open(path)?).with_context(|| format!("reading {}", path.display()))?)
        }
        None => Ok(generate_dataset(&s.spec).context("generating the dataset")?),
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { common, embeddings, out } => {
            let s = settings(&common, &[Section::Data])?;
            let data = match embeddings {
                Some(path) => generate_dataset_with_embeddings(&s.spec, &read_embeddings(&path)?),
                None => generate_dataset(&s.spec),
            }
            .context("generating the dataset")?;
            write_atomic(&out, |w| formats::write_dataset(w, &data))?;
        }
        Command::Train { common, data, out } => {
            let s = settings(&common, &[Section::Data, Section::Train, Section::Loss])?;
            let data = dataset(&data, &common, &s)?;
            let outcome = train_on(&data, &s.train).context("training")?;
            let h = &outcome.loss_history;
            let checkpoint = Checkpoint {
                model: outcome.model.clone(),
                classes: data.known_classes.clone(),
                switches: s.train.switches,
                loss_initial: h.first().copied().unwrap_or(f64::NAN),
                loss_final: h.last().copied().unwrap_or(f64::NAN),
            };
            write_atomic(&out, |w| formats::write_checkpoint(w, &checkpoint))?;
        }
        Command::Evaluate {
            common,
            data,
            model,
            eval,
            dets_out,
            gts_out,
            out,
        } => {
            let s = settings(&common, &[Section::Data])?;
            let data = dataset(&data, &common, &s)?;
            let checkpoint = formats::read_checkpoint(open(&model)?).with_context(|| format!("reading {}", model.display()))?;
            if checkpoint.classes != data.known_classes {
                return Err(anyhow!(
                    "model classes [{}] do not match dataset classes [{}]",
                    checkpoint.classes.join(" "),
                    data.known_classes.join(" ")
                )
                .into());
            }
            let dets = predict_all(&checkpoint.model, &data.test, None).context("predicting")?;
            let gts = data.test_ground_truth();
            let report = evaluate(&dets, &gts, &data.known_classes, &eval.options(None)).context("evaluating")?;
            if let Some(p) = dets_out {
                write_atomic(&p, |w| write_detections(w, &dets, &data.known_classes))?;
            }
            if let Some(p) = gts_out {
                write_atomic(&p, |w| write_ground_truth(w, &gts, &data.known_classes))?;
            }
            write_or_stdout(out.as_deref(), |w| formats::emit_report(&report, w).map(drop))?;
        }
        Command::Metrics {
            dets,
            gts,
            embeddings,
            eval,
            out,
        } => {
            let d = read_records(open(&dets)?).with_context(|| format!("reading {}", dets.display()))?;
            let g = read_records(open(&gts)?).with_context(|| format!("reading {}", gts.display()))?;
            if !d.ground_truth.is_empty() {
                return Err(anyhow!("{} contains ground-truth records", dets.display()).into());
            }
            if !g.detections.is_empty() {
                return Err(anyhow!("{} contains detection records", gts.display()).into());
            }
            let records = Records {
                detections: d.detections,
                ground_truth: g.ground_truth,
            };
            let classes = match embeddings {
                Some(path) => read_embeddings(&path)?.names().to_vec(),
                None => records.class_names(),
            };
            let (dets, gts) = records.resolve(&classes).map_err(anyhow::Error::from)?;
            let report = evaluate(&dets, &gts, &classes, &eval.options(None)).map_err(anyhow::Error::from)?;
            write_or_stdout(out.as_deref(), |w| formats::emit_report(&report, w).map(drop))?;
        }
        Command::Ablate { common, data, eval, out } => {
            let s = settings(&common, &[Section::Data, Section::Train, Section::Loss])?;
            let data = dataset(&data, &common, &s)?;
            let rows = ablate_on(&data, &s.train, &eval.options(Some(DEFAULT_ENTROPY_THRESHOLD))).context("ablation")?;
            write_atomic(&out, |w| formats::write_table(w, &rows))?;
        }
        Command::Gradcheck { common, out } => {
            let s = settings(&common, &[Section::Gradcheck])?;
            let results = gradient_suite(common.seed.unwrap_or(0), s.gradcheck_trials)
                .map_err(anyhow::Error::from)?;
            write_or_stdout(out.as_deref(), |w| formats::write_gradcheck(w, &results))?;
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.loss.as_str()).collect();
            if !failed.is_empty() {
                return Err(anyhow!("gradient check failed for {}", failed.join(", ")).into());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_syntax() {
        assert_eq!(parse_threshold("none"), Ok(Threshold(None)));
        assert_eq!(parse_threshold("NONE"), Ok(Threshold(None)));
        assert_eq!(parse_threshold("0.85"), Ok(Threshold(Some(0.85))));
        assert!(parse_threshold("-1").is_err());
        assert!(parse_threshold("nan").is_err());
        assert!(parse_threshold("high").is_err());
    }

    #[test]
    fn threshold_defaults_per_command() {
        let args = EvalArgs {
            entropy_threshold: None,
            iou: 0.5,
            recall_level: 0.8,
        };
        assert_eq!(args.options(None).entropy_threshold, None);
        assert_eq!(args.options(Some(0.85)).entropy_threshold, Some(0.85));
        let off = EvalArgs {
            entropy_threshold: Some(Threshold(None)),
            ..args
        };
        assert_eq!(off.options(Some(0.85)).entropy_threshold, None);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["osod"]), EXIT_USAGE);
        assert_eq!(run(["osod", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["osod", "metrics", "--dets", "/nonexistent/d.txt", "--gts", "/nonexistent/g.txt"]), EXIT_USAGE);
        assert_eq!(run(["osod", "gradcheck", "--set", "data.seed=1"]), EXIT_USAGE);
        assert_eq!(run(["osod", "gradcheck", "--set", "nonsense"]), EXIT_USAGE);
        assert_eq!(run(["osod", "--help"]), EXIT_OK);
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        std::fs::write(&path, "old contents that are longer").unwrap();
        write_atomic(&path, |w| w.write_all(b"new")).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "new");
        let failed = write_atomic(&path, |w| {
            w.write_all(b"partial")?;
            Err(io::Error::other("boom"))
        });
        assert!(failed.is_err());
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "new");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
