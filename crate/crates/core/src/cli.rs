//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or schema
//! error, 3 failed differential check.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::check::{run_check, CheckConfig};
use crate::error::{at_path, Error, Result};
use crate::scorers::{ModelParams, ScoringPass};
use crate::synthdata::{read_instances, write_instances, Generator, GeneratorConfig, Split};
use crate::trainer::{
    accuracy_of_labels, decode_instance, evaluate, predicted_boxes, Decoder, Parallelism, Supervision,
    TrainConfig, Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "slcrf", version, about = "Soft-label chain CRF toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test instance files from a generator config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the selected checkpoint and a report.
    Train {
        /// Directory holding train.jsonl and val.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Report path; defaults to `<out>.report.jsonl`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Worker threads per batch; 1 is serial.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print grounding accuracy on an instance file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Score the best-overlapping candidates instead of a model.
        #[arg(long, conflicts_with = "ckpt")]
        oracle_labels: bool,
    },
    /// Compare dynamic programs with enumeration and finite differences.
    Check {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        max_t: usize,
        #[arg(long, default_value_t = 5)]
        max_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit one predicted box per phrase as JSON lines.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Output path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "viterbi", value_parser = parse_decoder)]
    decoder: Decoder,
    /// Use the chosen candidate boxes without regression refinement.
    #[arg(long)]
    no_regress: bool,
}

fn parse_decoder(s: &str) -> std::result::Result<Decoder, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_ckpt(args: &ModelArgs) -> Result<ModelParams> {
    let path = args
        .ckpt
        .as_ref()
        .ok_or_else(|| Error::Config("--ckpt is required".into()))?;
    ModelParams::load(path)
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg: GeneratorConfig = read_config(config)?;
    let generator = Generator::new(cfg.clone())?;
    fs::create_dir_all(out).map_err(at_path(out))?;
    for (split, n) in [
        (Split::Train, cfg.train_size),
        (Split::Val, cfg.val_size),
        (Split::Test, cfg.test_size),
    ] {
        let path = out.join(format!("{}.jsonl", split.name()));
        write_instances(&path, &generator.split(split, n))?;
        eprintln!("wrote {n} instances to {}", path.display());
    }
    Ok(())
}

fn train_cmd(data: &Path, config: &Path, out: &Path, report: Option<&Path>, jobs: usize) -> Result<()> {
    let cfg: TrainConfig = read_config(config)?;
    let train_set = read_instances(&data.join("train.jsonl"))?;
    let val_set = read_instances(&data.join("val.jsonl"))?;
    let parallelism = if jobs > 1 {
        Parallelism::Threads(jobs)
    } else {
        Parallelism::Serial
    };
    let trainer = Trainer::new(cfg, &train_set, &val_set)?.with_parallelism(parallelism);
    let mut params = trainer.initial_params()?;
    let rep = trainer.train(&mut params)?;
    params.save(out)?;
    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".report.jsonl");
        PathBuf::from(p)
    });
    fs::write(&report_path, rep.to_jsonl()).map_err(at_path(&report_path))?;
    if let Some(best) = rep.snapshots.iter().find(|s| Some(s.iteration) == rep.best_iteration) {
        eprintln!(
            "selected snapshot at iteration {} (validation accuracy {:.4})",
            best.iteration, best.val_accuracy
        );
    }
    Ok(())
}

fn eval_cmd(data: &Path, model: &ModelArgs, oracle_labels: bool) -> Result<f64> {
    let instances = read_instances(data)?;
    if oracle_labels {
        let rule = Default::default();
        let labels = instances
            .iter()
            .map(|inst| Supervision::new(inst, &rule).map(|s| s.hard))
            .collect::<Result<Vec<_>>>()?;
        return Ok(accuracy_of_labels(&instances, &labels));
    }
    let params = load_ckpt(model)?;
    evaluate(&instances, &params, model.decoder, !model.no_regress)
}

#[derive(Serialize)]
struct DecodedPhrase<'a> {
    id: &'a str,
    phrase: usize,
    candidate: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

fn decode_cmd(data: &Path, model: &ModelArgs, out: Option<&Path>) -> Result<()> {
    let instances = read_instances(data)?;
    let params = load_ckpt(model)?;
    let mut text = String::new();
    for inst in &instances {
        let pass = ScoringPass::run(inst, &params)?;
        let d = decode_instance(&pass);
        let labels = match model.decoder {
            Decoder::Viterbi => d.viterbi,
            Decoder::Smoothing => d.smoothing,
        };
        let boxes = predicted_boxes(inst, &params, &pass, &labels, !model.no_regress)?;
        for (t, (k, b)) in labels.iter().zip(&boxes).enumerate() {
            let rec = DecodedPhrase {
                id: &inst.id,
                phrase: t,
                candidate: *k,
                bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
            };
            text.push_str(&serde_json::to_string(&rec).expect("plain data serializes"));
            text.push('\n');
        }
    }
    match out {
        Some(p) => fs::write(p, text).map_err(at_path(p))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn check_cmd(cfg: CheckConfig) -> Result<bool> {
    let rep = run_check(&cfg)?;
    println!("trials: {}", rep.trials);
    for (name, value, tol, ok) in rep.lines() {
        println!("{:<34} worst {:.3e}  tol {:.0e}  {}", name, value, tol, if ok { "ok" } else { "FAIL" });
    }
    println!("max relative error DP vs oracle: {:.3e}", rep.oracle_max());
    Ok(rep.passed())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out).map(|_| EXIT_OK),
        Command::Train {
            data,
            config,
            out,
            report,
            jobs,
        } => train_cmd(&data, &config, &out, report.as_deref(), jobs).map(|_| EXIT_OK),
        Command::Eval {
            data,
            model,
            oracle_labels,
        } => eval_cmd(&data, &model, oracle_labels).map(|acc| {
            println!("{acc:.4}");
            EXIT_OK
        }),
        Command::Check {
            trials,
            max_t,
            max_k,
            seed,
        } => check_cmd(CheckConfig {
            trials,
            max_t,
            max_k,
            seed,
            ..CheckConfig::default()
        })
        .map(|ok| if ok { EXIT_OK } else { EXIT_CHECK }),
        Command::Decode { data, model, out } => decode_cmd(&data, &model, out.as_deref()).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
