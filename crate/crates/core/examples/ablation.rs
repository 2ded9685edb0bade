//! Directional ablation on the synthetic benchmark: HL, SL, SL-CCRF(--)
//! and SL-CCRF(M) over several seeds.
//!
//! Usage: cargo run --release --example ablation -- [seeds] [key=value ...]
//!
//! Keys are GeneratorConfig or TrainConfig fields, e.g. `noise=0.3`,
//! `learning_rate=1e-3`, `iterations=2000`. The learning rate defaults to
//! 3e-3 here rather than the training default.

use rayon::prelude::*;
use slcrf::synthdata::{Generator, GeneratorConfig, Split};
use slcrf::trainer::{evaluate, Trainer};
use slcrf::{Decoder, ModelKind, Regime, TrainConfig, TransitionMode};

fn main() -> slcrf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(5, |s| s.parse().expect("seeds"));
    let mut gen_toml = String::new();
    let mut train_toml = String::new();
    let gen_keys = toml::to_string(&GeneratorConfig::default()).expect("serializable");
    let mut only: Option<Vec<String>> = None;
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').expect("key=value");
        if k == "variants" {
            only = Some(v.split(',').map(str::to_string).collect());
            continue;
        }
        let line = format!("{k} = {v}\n");
        if gen_keys.lines().any(|l| l.starts_with(&format!("{k} "))) {
            gen_toml.push_str(&line);
        } else {
            train_toml.push_str(&line);
        }
    }
    let base_gen: GeneratorConfig = toml::from_str(&gen_toml).map_err(|e| slcrf::Error::Config(e.to_string()))?;
    if !train_toml.contains("learning_rate ") {
        train_toml.push_str("learning_rate = 3e-3\n");
    }
    let base_train: TrainConfig = toml::from_str(&train_toml).map_err(|e| slcrf::Error::Config(e.to_string()))?;
    let iterations = base_train.iterations;

    let variants = [
        ("HL", Regime::Hard, ModelKind::NonCrf, TransitionMode::Shared),
        ("SL", Regime::Soft, ModelKind::NonCrf, TransitionMode::Shared),
        ("SL-CCRF(--)", Regime::Soft, ModelKind::Crf, TransitionMode::Shared),
        ("SL-CCRF(M)", Regime::Soft, ModelKind::Crf, TransitionMode::Context),
    ];
    let keep: Vec<usize> = (0..variants.len())
        .filter(|&v| only.as_ref().is_none_or(|o| o.iter().any(|n| n == variants[v].0)))
        .collect();
    let jobs: Vec<(u64, usize)> = (0..seeds).flat_map(|s| keep.iter().map(move |&v| (s, v))).collect();
    let results: Vec<slcrf::Result<(u64, usize, f64, f64)>> = jobs
        .par_iter()
        .map(|&(seed, v)| {
            let gen = Generator::new(GeneratorConfig {
                seed,
                ..base_gen.clone()
            })?;
            let cfg = gen.config().clone();
            let train = gen.split(Split::Train, cfg.train_size);
            let val = gen.split(Split::Val, cfg.val_size);
            let test = gen.split(Split::Test, cfg.test_size);
            let (_, regime, model, mode) = variants[v];
            let tc = TrainConfig {
                snapshot_every: (iterations / 4).max(1),
                regime,
                model,
                transition_mode: mode,
                seed,
                ..base_train.clone()
            };
            let trainer = Trainer::new(tc, &train, &val)?;
            let mut params = trainer.initial_params()?;
            trainer.train(&mut params)?;
            Ok((
                seed,
                v,
                evaluate(&test, &params, Decoder::Viterbi, true)?,
                evaluate(&test, &params, Decoder::Viterbi, false)?,
            ))
        })
        .collect();

    let mut table = vec![vec![0.0; seeds as usize]; variants.len()];
    let mut plain = vec![0.0; variants.len()];
    for r in results {
        let (seed, v, acc, no_reg) = r?;
        table[v][seed as usize] = acc;
        plain[v] += no_reg / seeds as f64;
    }
    for (v, row) in table.iter().enumerate().filter(|(v, _)| keep.contains(v)) {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let cells: Vec<String> = row.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
        println!(
            "{:<12} mean {:6.2}  [{}]  without regression {:6.2}",
            variants[v].0,
            100.0 * mean,
            cells.join(" "),
            100.0 * plain[v]
        );
    }
    Ok(())
}
