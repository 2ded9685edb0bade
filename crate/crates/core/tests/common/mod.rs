#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slcrf::scorers::{ModelDims, ParamTensors, ScoringPass, TENSOR_NAMES};
use slcrf::trainer::{instance_loss, Supervision};
use slcrf::{BBox, Instance, ModelConfig, ModelKind, ModelParams, Regime, TransitionMode};

pub const D_TEXT: usize = 4;
pub const D_VIS: usize = 5;
pub const D_CTX: usize = 3;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// A hand-sized instance with `T = 2`, `K = 3`: candidate 0 matches gold 0
/// closely, candidates 1 and 2 both overlap gold 1, so the soft targets of
/// the second phrase are genuinely soft.
pub fn tiny_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = |x0, y0, x1, y1| BBox::new(x0, y0, x1, y1).unwrap();
    Instance {
        id: format!("tiny-{seed}"),
        candidate_boxes: vec![
            b(0.10, 0.10, 0.42, 0.40),
            b(0.50, 0.52, 0.82, 0.90),
            b(0.55, 0.50, 0.85, 0.85),
        ],
        region_feats: gaussian(&mut rng, 3, D_VIS),
        phrase_feats: gaussian(&mut rng, 2, D_TEXT),
        context_feats: Some(gaussian(&mut rng, 1, D_CTX)),
        gold_boxes: vec![b(0.12, 0.08, 0.40, 0.42), b(0.52, 0.50, 0.84, 0.88)],
    }
}

pub fn tiny_config(kind: ModelKind, mode: TransitionMode) -> ModelConfig {
    ModelConfig {
        dims: ModelDims {
            d_text: D_TEXT,
            d_vis: D_VIS,
            rank: 3,
            d_joint: 4,
            hidden: 5,
            d_ctx: D_CTX,
        },
        kind,
        transition_mode: mode,
    }
}

/// `L_label + γ L_reg` at the current parameter values.
pub fn total_loss(inst: &Instance, params: &ModelParams, sup: &Supervision, regime: Regime, gamma: f64) -> f64 {
    let pass = ScoringPass::run(inst, params).unwrap();
    instance_loss(&pass, params, sup, regime, gamma).unwrap().total(gamma)
}

/// Analytic parameter gradients of [`total_loss`].
pub fn analytic_gradients(
    inst: &Instance,
    params: &ModelParams,
    sup: &Supervision,
    regime: Regime,
    gamma: f64,
) -> ParamTensors {
    let pass = ScoringPass::run(inst, params).unwrap();
    let loss = instance_loss(&pass, params, sup, regime, gamma).unwrap();
    let mut acc = ParamTensors::zeros(&params.config);
    pass.backward(inst, &params.values, &mut acc, &loss.d_scores, &loss.d_reg)
        .unwrap();
    acc
}

/// Worst relative error `|a - fd| / max(|a|, |fd|, floor)` per parameter
/// tensor, with a five-point stencil of step `h`.
pub fn pipeline_fd_errors(
    inst: &Instance,
    params: &ModelParams,
    sup: &Supervision,
    regime: Regime,
    gamma: f64,
    h: f64,
    floor: f64,
) -> Vec<(&'static str, f64)> {
    let analytic = analytic_gradients(inst, params, sup, regime, gamma);
    let mut out = Vec::new();
    for (i, name) in TENSOR_NAMES.iter().enumerate() {
        let n = params.values.slices()[i].len();
        let mut worst: f64 = 0.0;
        for e in 0..n {
            let at = |offset: f64| {
                let mut p = params.clone();
                p.values.slices_mut()[i][e] += offset;
                total_loss(inst, &p, sup, regime, gamma)
            };
            // Five-point stencil: O(h⁴) truncation lets h stay large enough
            // that rounding in the loss does not dominate.
            let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            let a = analytic.slices()[i][e];
            let d = (a - fd).abs();
            if d > 0.0 {
                worst = worst.max(d / a.abs().max(fd.abs()).max(floor));
            }
        }
        out.push((*name, worst));
    }
    out
}

/// Parameters for `config` whose ReLU pre-activations on `inst` all stay at
/// least `margin` away from the kink, so finite differences never straddle it.
pub fn params_clear_of_kinks(inst: &Instance, config: ModelConfig, margin: f64) -> ModelParams {
    for seed in 0..1000 {
        let mut params = ModelParams::init(config, seed);
        // Nonzero regression head so the regression branch carries gradient
        // into the fusion layer too.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in params.values.heads.regression_w.iter_mut() {
            *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        for v in params.values.lrbp.b.iter_mut() {
            *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let pass = ScoringPass::run(inst, &params).unwrap();
        if pass.min_abs_preactivation() > margin {
            return params;
        }
    }
    panic!("no kink-free initialization found");
}

pub fn all_variants() -> Vec<(ModelKind, TransitionMode, Regime)> {
    let mut v = Vec::new();
    for (kind, mode) in [
        (ModelKind::Crf, TransitionMode::Shared),
        (ModelKind::Crf, TransitionMode::Context),
        (ModelKind::NonCrf, TransitionMode::Shared),
    ] {
        for regime in [Regime::Soft, Regime::Hard] {
            v.push((kind, mode, regime));
        }
    }
    v
}
