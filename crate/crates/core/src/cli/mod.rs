//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error; `verify` exits 3
//! on Reject.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use pipeline::{dataset, evaluate, train_model, write_evaluation, EvalReport, Evaluation};

use crate::chaos01::{FeatureImage, DEFAULT_C, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::net::data::SplitMode;
use crate::net::SiameseModel;
use crate::signal::io::{read_ppg, write_ppg};
use crate::signal::{default_registry, preprocess, synth_ppg, PreprocessMode};
use crate::store::{self, Decision, Featurizer, TemplateStore};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_REJECT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pqid", version, about = "PPG biometrics from (p,q)-plane images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic PPG records for the default registry.
    Synth {
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        /// Seconds per record.
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write `PPG1` binary instead of CSV.
        #[arg(long)]
        bin: bool,
    },
    /// Filter and/or normalize a PPG record.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "band05-8-norm")]
        mode: PreprocessMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn the first 12 s of a record into a feature image.
    Featurize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "band05-8-norm")]
        mode: PreprocessMode,
        /// One value for every channel, or one per channel.
        #[arg(long, value_delimiter = ',', default_values_t = [DEFAULT_C])]
        c: Vec<f64>,
        /// Output `PQI1` file; defaults to the input with a `.pqi` extension.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write an RGB PNG next to the output.
        #[arg(long)]
        png: bool,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score held-out pairs and write a metrics report with curve CSVs.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "data-disjoint")]
        split: SplitMode,
        #[arg(long)]
        report: PathBuf,
        /// Overrides the configuration stored in the model.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Register a subject from a 12 s record.
    Enroll {
        #[command(flatten)]
        common: StoreArgs,
        #[arg(long)]
        id: String,
        #[arg(long)]
        overwrite: bool,
    },
    /// Check an identity claim.
    Verify {
        #[command(flatten)]
        common: StoreArgs,
        #[arg(long)]
        id: String,
        /// Defaults to the threshold stored in the model.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Rank every enrolled subject against a record.
    Identify {
        #[command(flatten)]
        common: StoreArgs,
    },
}

#[derive(Args, Debug)]
struct StoreArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    ppg: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DOMAIN
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Synth {
            subjects,
            duration,
            seed,
            out,
            bin,
        } => {
            let registry = default_registry();
            if subjects == 0 || subjects > registry.len() {
                return Err(Error::param("cli", format!("--subjects must be 1 to {}", registry.len())));
            }
            std::fs::create_dir_all(&out)?;
            let ext = if bin { "bin" } else { "csv" };
            for p in &registry[..subjects] {
                let rec = synth_ppg(p, duration, seed)?;
                let path = out.join(format!("{}.{ext}", p.subject_id));
                write_ppg(&path, &rec)?;
                println!("{}", path.display());
            }
        }
        Command::Preprocess { input, mode, out } => {
            write_ppg(&out, &preprocess(&read_ppg(&input)?, mode)?)?;
        }
        Command::Featurize {
            input,
            mode,
            c,
            out,
            png,
        } => {
            let c: [f64; FEATURE_CHANNELS] = match c[..] {
                [v] => [v; FEATURE_CHANNELS],
                [a, b, d] => [a, b, d],
                _ => return Err(Error::param("cli", "--c takes 1 or 3 values")),
            };
            let image = Featurizer { mode, c }.capture_image(&read_ppg(&input)?)?;
            let out = out.unwrap_or_else(|| input.with_extension("pqi"));
            store::write_atomic(&out, &image.to_pqi())?;
            if png {
                write_png(&out.with_extension("png"), &image)?;
            }
            println!("{}", out.display());
        }
        Command::Train { config, out } => {
            let run = RunConfig::load(&config)?;
            let (model, history) = train_model(&run)?;
            model.save(&out)?;
            let mut json = serde_json::to_vec_pretty(&history)?;
            json.push(b'\n');
            store::write_atomic(&out.with_extension("history.json"), &json)?;
            println!(
                "{} epochs, eer threshold {:?}, version {}",
                history.len(),
                model.meta.eer_threshold,
                model.version_hex()
            );
        }
        Command::Eval {
            model,
            split,
            report,
            config,
        } => {
            let model = SiameseModel::load(&model)?;
            let run = match config {
                Some(p) => RunConfig::load(&p)?,
                None => stored_run_config(&model)?
                    .ok_or_else(|| Error::param("cli", "model carries no run configuration; pass --config"))?,
            };
            let ev = evaluate(&model, &run, split)?;
            write_evaluation(&ev, &report)?;
            println!("{}", serde_json::to_string(&ev.report.metrics)?);
        }
        Command::Enroll { common, id, overwrite } => {
            let (store, model, rec) = open(&common)?;
            let featurizer = featurizer_for(&model)?;
            let t = store::enroll(&store, &id, &rec, &model, featurizer, overwrite, created_at())?;
            println!("{}", store.path_for(&t.subject_id).display());
        }
        Command::Verify { common, id, threshold } => {
            let (store, model, rec) = open(&common)?;
            let r = store::verify(&store, &id, &rec, &model, threshold)?;
            println!("{}", serde_json::to_string(&r)?);
            return Ok(match r.decision {
                Decision::Accept => EXIT_OK,
                Decision::Reject => EXIT_REJECT,
            });
        }
        Command::Identify { common } => {
            let (store, model, rec) = open(&common)?;
            for (id, score) in store::identify(&store, &rec, &model)? {
                println!("{id}\t{score:.6}");
            }
        }
    }
    Ok(EXIT_OK)
}

fn open(a: &StoreArgs) -> Result<(TemplateStore, SiameseModel, crate::signal::PpgRecord)> {
    Ok((TemplateStore::open(&a.store)?, SiameseModel::load(&a.model)?, read_ppg(&a.ppg)?))
}

fn stored_run_config(model: &SiameseModel) -> Result<Option<RunConfig>> {
    model
        .meta
        .run_config
        .as_ref()
        .map(|v| RunConfig::from_json(&v.to_string()))
        .transpose()
}

/// The featurization the model was trained with, or the defaults.
pub fn featurizer_for(model: &SiameseModel) -> Result<Featurizer> {
    let (mode, schedule) = match stored_run_config(model)? {
        Some(run) => (run.preprocess.mode, run.featurizer.c),
        None => (config::PreprocessConfig::default().mode, Default::default()),
    };
    Ok(Featurizer {
        mode,
        c: schedule.channel_params().map(|p| p.c),
    })
}

/// `SOURCE_DATE_EPOCH` when set, so enrollment can be made reproducible.
fn created_at() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

fn write_png(path: &Path, image: &FeatureImage) -> Result<()> {
    let (w, h, _) = image.shape();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let rgb: Vec<u8> = image.as_bytes().iter().map(|&v| v * 255).collect();
    enc.write_header()
        .and_then(|mut wr| wr.write_image_data(&rgb))
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}
