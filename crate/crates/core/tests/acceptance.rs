//! Acceptance suite: one PASS/FAIL line per criterion, then a nonzero exit
//! if any criterion failed.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use slcrf::check::{self, random_scores, random_targets, CheckConfig, CheckReport};
use slcrf::crf::{self, ScoreSet, Transitions};
use slcrf::geometry::{
    decode_box_deltas, encode_box_deltas, iou, regression_loss, smooth_l1, soft_targets, targets_from_overlaps,
    TargetRule,
};
use slcrf::numkernel::log_sum_exp;
use slcrf::scorers::ScoringPass;
use slcrf::synthdata::{Generator, GeneratorConfig, Split};
use slcrf::trainer::{decode_instance, evaluate_both, instance_loss, Supervision, Trainer};
use slcrf::{BBox, Instance, ModelKind, ModelParams, Regime, TrainConfig, TransitionMode};

/// Learning rate for the desk-scale ablation; the default 5e-5 barely moves
/// a freshly initialized model in 2000 iterations.
const ABLATION_LR: f64 = 3e-3;
const ABLATION_SEEDS: u64 = 5;
const ABLATION_ITERATIONS: usize = 2000;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail }
}

// ---------------------------------------------------------------------------
// 1-3, 5: dynamic programs against enumeration and finite differences

fn check_report() -> (CheckReport, f64) {
    let start = Instant::now();
    let rep = check::run_check(&CheckConfig {
        trials: 200,
        max_t: 5,
        max_k: 5,
        seed: 2024,
        score_std: 2.0,
    })
    .expect("check runs");
    (rep, start.elapsed().as_secs_f64())
}

fn criterion_oracle(rep: &CheckReport, secs: f64) -> Outcome {
    let worst = rep.oracle_max();
    let pass = rep.trials >= 200 && worst <= 1e-9 && rep.viterbi_path_mismatches == 0 && secs < 10.0;
    outcome(
        1,
        "oracle equivalence",
        pass,
        format!(
            "{} instances, worst rel err {worst:.2e} (logZ {:.1e}, KL {:.1e}, unary {:.1e}, pairwise {:.1e}, MAP {:.1e}), {} path mismatches, {secs:.2}s",
            rep.trials,
            rep.log_partition,
            rep.soft_loss,
            rep.unary,
            rep.pairwise,
            rep.viterbi_score,
            rep.viterbi_path_mismatches
        ),
    )
}

fn criterion_moment_matching(rep: &CheckReport) -> Outcome {
    outcome(
        2,
        "moment-matching gradients",
        rep.trials >= 50 && rep.gradient_fd <= 1e-5,
        format!("{} instances, step 1e-4, worst rel err {:.2e}", rep.trials, rep.gradient_fd),
    )
}

fn criterion_lemma(rep: &CheckReport) -> Outcome {
    outcome(
        3,
        "dZ/dalpha = beta",
        rep.trials >= 20 && rep.lemma_fd <= 1e-5,
        format!("{} instances, worst rel err {:.2e}", rep.trials, rep.lemma_fd),
    )
}

// ---------------------------------------------------------------------------
// 4: reduction to independent soft-label classifiers

fn independent_kl(emission: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (e, qt) in emission.outer_iter().zip(q.outer_iter()) {
        let log_z = log_sum_exp(&e.to_vec()).unwrap();
        for (ek, qk) in e.iter().zip(qt.iter()) {
            if *qk > 0.0 {
                total += qk * (qk.ln() - (ek - log_z));
            }
        }
    }
    total
}

fn criterion_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst_kl: f64 = 0.0;
    let trials = 200;
    for i in 0..trials {
        let t = 1 + i % 5;
        let k = 1 + (i / 5) % 5;
        let scores = random_scores(&mut rng, t, k, 2.0, false);
        let zeroed = ScoreSet::without_transitions(scores.emission().clone()).unwrap();
        let q = random_targets(&mut rng, t, k, 0.3);
        let crf_loss = crf::soft_label_loss(&zeroed, &q).unwrap();
        let direct = independent_kl(zeroed.emission(), q.matrix());
        worst_kl = worst_kl.max(check::rel_err(crf_loss, direct));
    }

    // Training-mode losses: a CRF whose transition head outputs exactly zero
    // against the non-CRF model sharing every other parameter.
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let instances = gen.split(Split::Train, 100);
    let base = TrainConfig::default().model_config_for(&instances[0]);
    let mut worst_mode: f64 = 0.0;
    let mut decode_mismatches = 0;
    for mode in [TransitionMode::Shared, TransitionMode::Context] {
        let mut crf_params = ModelParams::init(
            slcrf::ModelConfig {
                kind: ModelKind::Crf,
                transition_mode: mode,
                ..base
            },
            9,
        );
        crf_params.values.heads.transition_out_w.fill(0.0);
        crf_params.values.heads.transition_out_b.fill(0.0);
        let mut plain = crf_params.clone();
        plain.config.kind = ModelKind::NonCrf;
        for inst in &instances {
            let sup = Supervision::new(inst, &TargetRule::default()).unwrap();
            let a = ScoringPass::run(inst, &crf_params).unwrap();
            let b = ScoringPass::run(inst, &plain).unwrap();
            if decode_instance(&a).smoothing != decode_instance(&b).smoothing {
                decode_mismatches += 1;
            }
            for regime in [Regime::Soft, Regime::Hard] {
                let la = instance_loss(&a, &crf_params, &sup, regime, 10.0).unwrap();
                let lb = instance_loss(&b, &plain, &sup, regime, 10.0).unwrap();
                worst_mode = worst_mode
                    .max(check::rel_err(la.label, lb.label))
                    .max(check::rel_err(la.regression, lb.regression));
            }
        }
    }
    outcome(
        4,
        "zero-transition reduction",
        worst_kl <= 1e-10 && worst_mode <= 1e-10 && decode_mismatches == 0,
        format!(
            "{trials} score sets: worst |CRF - sum KL| {worst_kl:.2e}; CRF(frozen zero) vs non-CRF on 100 instances x 2 modes x 2 regimes: losses {worst_mode:.2e}, unary decode mismatches {decode_mismatches}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5: KL properties

fn criterion_kl(rep: &CheckReport) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst_exact: f64 = 0.0;
    let mut min_loss = rep.min_soft_loss;
    for i in 0..200 {
        let t = 1 + i % 5;
        let k = 1 + (i / 5) % 5;
        let q = random_targets(&mut rng, t, k, 0.0);
        let scores = ScoreSet::new(q.matrix().mapv(f64::ln), Transitions::Shared(Array2::zeros((k, k)))).unwrap();
        let loss = crf::soft_label_loss(&scores, &q).unwrap();
        worst_exact = worst_exact.max(loss.abs());
        min_loss = min_loss.min(loss);
        let other = random_scores(&mut rng, t, k, 2.0, i % 2 == 1 && t > 1);
        min_loss = min_loss.min(crf::soft_label_loss(&other, &q).unwrap());
    }
    outcome(
        5,
        "KL properties",
        min_loss >= -1e-9 && worst_exact <= 1e-10 && rep.hard_vs_one_hot <= 1e-9,
        format!(
            "min loss {min_loss:.2e}; |loss| at eps = ln q: {worst_exact:.2e}; hard vs one-hot soft: {:.2e}",
            rep.hard_vs_one_hot
        ),
    )
}

// ---------------------------------------------------------------------------
// 6: end-to-end parameter gradients

fn criterion_pipeline_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut checked = 0;
    for seed in 0..3 {
        let inst = common::tiny_instance(seed);
        let sup = Supervision::new(&inst, &TargetRule::default()).unwrap();
        for (kind, mode, regime) in common::all_variants() {
            let params = common::params_clear_of_kinks(&inst, common::tiny_config(kind, mode), 1e-3);
            for (name, err) in common::pipeline_fd_errors(&inst, &params, &sup, regime, 10.0, 1e-4, 1e-6) {
                checked += 1;
                if err > worst {
                    worst = err;
                    worst_at = format!("{name} ({kind:?}/{mode:?}/{regime:?})");
                }
            }
        }
    }
    outcome(
        6,
        "end-to-end parameter gradients",
        worst <= 1e-4,
        format!("T=2 K=3, {checked} tensor checks, worst rel err {worst:.2e} at {worst_at}"),
    )
}

// ---------------------------------------------------------------------------
// 7, 8: directional ablations and decoder parity

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Hl,
    Sl,
    SlCcrf,
}

struct RunResult {
    seed: u64,
    variant: Variant,
    viterbi: f64,
    smoothing: f64,
    t1_disagreements: usize,
    t1_instances: usize,
}

fn ablation_run(seed: u64, variant: Variant) -> RunResult {
    let gen = Generator::new(GeneratorConfig {
        seed,
        relation_strength: 0.9,
        train_size: 2000,
        val_size: 200,
        test_size: 200,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let train = gen.split(Split::Train, 2000);
    let val = gen.split(Split::Val, 200);
    let test = gen.split(Split::Test, 200);
    let (regime, model, mode) = match variant {
        Variant::Hl => (Regime::Hard, ModelKind::NonCrf, TransitionMode::Shared),
        Variant::Sl => (Regime::Soft, ModelKind::NonCrf, TransitionMode::Shared),
        Variant::SlCcrf => (Regime::Soft, ModelKind::Crf, TransitionMode::Context),
    };
    let cfg = TrainConfig {
        learning_rate: ABLATION_LR,
        iterations: ABLATION_ITERATIONS,
        snapshot_every: ABLATION_ITERATIONS / 4,
        regime,
        model,
        transition_mode: mode,
        seed,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(cfg, &train, &val).unwrap();
    let mut params = trainer.initial_params().unwrap();
    trainer.train(&mut params).unwrap();
    let acc = evaluate_both(&test, &params, true).unwrap();
    let singles: Vec<&Instance> = test.iter().filter(|i| i.num_phrases() == 1).collect();
    let t1_disagreements = singles
        .iter()
        .filter(|inst| {
            let d = decode_instance(&ScoringPass::run(inst, &params).unwrap());
            d.viterbi != d.smoothing
        })
        .count();
    RunResult {
        seed,
        variant,
        viterbi: acc.viterbi,
        smoothing: acc.smoothing,
        t1_disagreements,
        t1_instances: singles.len(),
    }
}

fn mean_of(runs: &[RunResult], v: Variant) -> (f64, Vec<String>) {
    let mut xs: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v).collect();
    xs.sort_by_key(|r| r.seed);
    let mean = 100.0 * xs.iter().map(|r| r.viterbi).sum::<f64>() / xs.len() as f64;
    (mean, xs.iter().map(|r| format!("{:.2}", 100.0 * r.viterbi)).collect())
}

fn criteria_ablation() -> [Outcome; 2] {
    let jobs: Vec<(u64, Variant)> = (0..ABLATION_SEEDS)
        .flat_map(|s| [Variant::Hl, Variant::Sl, Variant::SlCcrf].map(|v| (s, v)))
        .collect();
    let runs: Vec<RunResult> = jobs.par_iter().map(|&(s, v)| ablation_run(s, v)).collect();
    let (hl, hl_cells) = mean_of(&runs, Variant::Hl);
    let (sl, sl_cells) = mean_of(&runs, Variant::Sl);
    let (ccrf, ccrf_cells) = mean_of(&runs, Variant::SlCcrf);
    let c7 = outcome(
        7,
        "directional ablations",
        sl >= hl + 1.0 && ccrf >= sl + 0.5,
        format!(
            "{ABLATION_SEEDS} seeds, mean test acc HL {hl:.2} [{}], SL {sl:.2} [{}], SL-CCRF(M) {ccrf:.2} [{}]; SL-HL {:+.2}, SL-CCRF-SL {:+.2}",
            hl_cells.join(" "),
            sl_cells.join(" "),
            ccrf_cells.join(" "),
            sl - hl,
            ccrf - sl
        ),
    );

    // Judged on the test sets of all seeds together, as in criterion 7; the
    // worst single seed is reported alongside.
    let crf_runs: Vec<&RunResult> = runs.iter().filter(|r| r.variant == Variant::SlCcrf).collect();
    let n = crf_runs.len() as f64;
    let mean_viterbi = 100.0 * crf_runs.iter().map(|r| r.viterbi).sum::<f64>() / n;
    let mean_smoothing = 100.0 * crf_runs.iter().map(|r| r.smoothing).sum::<f64>() / n;
    let gap = mean_viterbi - mean_smoothing;
    let worst_seed_gap = crf_runs
        .iter()
        .map(|r| 100.0 * (r.viterbi - r.smoothing))
        .fold(f64::NEG_INFINITY, f64::max);
    let disagreements: usize = crf_runs.iter().map(|r| r.t1_disagreements).sum();
    let singles: usize = crf_runs.iter().map(|r| r.t1_instances).sum();
    let cells: Vec<String> = crf_runs
        .iter()
        .map(|r| format!("{:.2}/{:.2}", 100.0 * r.viterbi, 100.0 * r.smoothing))
        .collect();
    let c8 = outcome(
        8,
        "decoder parity",
        gap <= 0.5 && disagreements == 0,
        format!(
            "SL-CCRF(M) mean viterbi {mean_viterbi:.2} smoothing {mean_smoothing:.2} (viterbi-smoothing {gap:+.2} pt); per seed [{}], worst seed {worst_seed_gap:+.2} pt; T=1 disagreements {disagreements}/{singles}",
            cells.join(" ")
        ),
    );
    [c7, c8]
}

// ---------------------------------------------------------------------------
// 9: geometry

fn criterion_geometry() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |what: &str, ok: bool| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    expect("smooth_l1(0) = 0", smooth_l1(0.0) == 0.0);
    expect("smooth_l1(0.5) = 0.125", smooth_l1(0.5) == 0.125);
    expect("smooth_l1(2) = 1.5", smooth_l1(2.0) == 1.5);
    expect("L_reg([0.5,0,0,0]) = 0.125", regression_loss(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]) == 0.125);
    expect("L_reg([2,2,2,2]) = 6", regression_loss(&[2.0; 4], &[0.0; 4]) == 6.0);
    expect("L_reg(b, b) = 0", regression_loss(&[0.3, -0.2, 0.1, 0.7], &[0.3, -0.2, 0.1, 0.7]) == 0.0);

    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
    expect("iou 1/7", (iou(&a, &b) - 1.0 / 7.0).abs() <= 1e-15);
    expect("iou identical = 1", iou(&a, &a) == 1.0);
    expect("iou disjoint = 0", iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0).unwrap()) == 0.0);

    let anchor = BBox::from_center(1.0, 1.0, 2.0, 2.0).unwrap();
    let gold = BBox::from_center(2.0, 2.0, 4.0, 4.0).unwrap();
    let beta = encode_box_deltas(&gold, &anchor);
    let ln2 = 2f64.ln();
    expect(
        "encode example",
        beta.iter().zip([0.5, 0.5, ln2, ln2]).all(|(x, y)| (x - y).abs() <= 1e-15),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_trip: f64 = 0.0;
    for _ in 0..10_000 {
        use rand::Rng;
        let mut bx = || {
            let w = rng.gen_range(0.01..5.0);
            let h = rng.gen_range(0.01..5.0);
            BBox::from_center(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), w, h).unwrap()
        };
        let (g, an) = (bx(), bx());
        let back = decode_box_deltas(&an, &encode_box_deltas(&g, &an));
        for (x, y) in [
            (back.x_min, g.x_min),
            (back.y_min, g.y_min),
            (back.x_max, g.x_max),
            (back.y_max, g.y_max),
        ] {
            worst_trip = worst_trip.max((x - y).abs());
        }
    }
    expect("round trip 1e-12", worst_trip <= 1e-12);

    let rule = TargetRule::default();
    let q = targets_from_overlaps(&[0.6, 0.55, 0.3], &rule).unwrap();
    expect(
        "soft targets [0.6, 0.55, 0.3]",
        (q[0] - 0.6 / 1.15).abs() <= 1e-15 && (q[1] - 0.55 / 1.15).abs() <= 1e-15 && q[2] == 0.0,
    );
    expect("fallback [0.2, 0.4]", targets_from_overlaps(&[0.2, 0.4], &rule).unwrap() == vec![0.0, 1.0]);
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let mut worst_sum: f64 = 0.0;
    for inst in gen.split(Split::Val, 200) {
        for g in &inst.gold_boxes {
            let row = soft_targets(&inst.candidate_boxes, g, 0.5);
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            expect("targets nonnegative", row.iter().all(|v| *v >= 0.0));
        }
    }
    expect("targets normalized", worst_sum <= 1e-12);

    failures.dedup();
    outcome(
        9,
        "geometry unit suite",
        failures.is_empty(),
        if failures.is_empty() {
            format!("all cases exact; round-trip worst {worst_trip:.1e}; normalization worst {worst_sum:.1e}")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------
// 10: reproducibility through the binary

fn pipeline_once(dir: &Path) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), String> {
    let gen_cfg = dir.join("gen.toml");
    let train_cfg = dir.join("train.toml");
    fs::write(&gen_cfg, "seed = 11\ntrain_size = 300\nval_size = 60\ntest_size = 60\n").unwrap();
    fs::write(
        &train_cfg,
        "seed = 11\niterations = 150\nsnapshot_every = 50\nlearning_rate = 3e-3\ntransition_mode = \"M\"\n",
    )
    .unwrap();
    let data = dir.join("data");
    let ckpt = dir.join("model.json");
    let bin = env!("CARGO_BIN_EXE_slcrf");
    let run = |args: &[&str]| -> Result<Vec<u8>, String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
        Ok(out.stdout)
    };
    let s = |p: &Path| p.to_str().unwrap().to_string();
    run(&["gen-data", "--config", &s(&gen_cfg), "--out", &s(&data)])?;
    run(&["train", "--data", &s(&data), "--config", &s(&train_cfg), "--out", &s(&ckpt)])?;
    let acc = run(&["eval", "--data", &s(&data.join("test.jsonl")), "--ckpt", &s(&ckpt)])?;
    let report = fs::read(dir.join("model.json.report.jsonl")).map_err(|e| e.to_string())?;
    Ok((fs::read(&ckpt).map_err(|e| e.to_string())?, report, acc))
}

fn criterion_reproducibility() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    match (pipeline_once(a.path()), pipeline_once(b.path())) {
        (Ok(x), Ok(y)) => {
            let same = x == y;
            outcome(
                10,
                "reproducibility",
                same,
                format!(
                    "checkpoint {} bytes {}, report {} bytes {}, eval {} vs {}",
                    x.0.len(),
                    if x.0 == y.0 { "identical" } else { "DIFFER" },
                    x.1.len(),
                    if x.1 == y.1 { "identical" } else { "DIFFER" },
                    String::from_utf8_lossy(&x.2).trim(),
                    String::from_utf8_lossy(&y.2).trim()
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(10, "reproducibility", false, e),
    }
}

fn main() {
    let (rep, secs) = check_report();
    let mut outcomes = vec![
        criterion_oracle(&rep, secs),
        criterion_moment_matching(&rep),
        criterion_lemma(&rep),
        criterion_reduction(),
        criterion_kl(&rep),
        criterion_pipeline_gradients(),
    ];
    outcomes.extend(criteria_ablation());
    outcomes.push(criterion_geometry());
    outcomes.push(criterion_reproducibility());
    outcomes.sort_by_key(|o| o.id);

    println!();
    for o in &outcomes {
        println!(
            "criterion {:>2} [{}] {}: {}",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
