//! Mini-batch training with Adam and global infinity-norm gradient clipping,
//! best-snapshot selection on validation accuracy, and evaluation.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{self, ScoreGradients, ScoreSet, SoftTargets};
use crate::error::{Error, Result};
use crate::geometry::{
    best_overlap, encode_box_deltas, iou, regression_loss, regression_loss_grad, BBox, TargetRule,
};
use crate::numkernel::argmax;
use crate::scorers::{
    regress_with, ModelConfig, ModelDims, ModelKind, ModelParams, ParamTensors, RegressionGrad,
    ScoringPass, TransitionMode,
};
use crate::synthdata::{build_targets, Instance};

/// IoU needed for a prediction to count as correct.
pub const ACCURACY_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One-hot targets on the best-overlapping candidate.
    Hard,
    /// Overlap-weighted target distributions.
    #[default]
    Soft,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Regime::Hard),
            "soft" => Ok(Regime::Soft),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    #[default]
    Viterbi,
    Smoothing,
}

impl std::str::FromStr for Decoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "viterbi" => Ok(Decoder::Viterbi),
            "smoothing" => Ok(Decoder::Smoothing),
            other => Err(Error::Config(format!("unknown decoder {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Threshold on the largest absolute gradient entry.
    pub clip_norm: f64,
    /// Weight of the box-regression loss.
    pub gamma: f64,
    pub iterations: usize,
    pub snapshot_every: usize,
    pub regime: Regime,
    pub model: ModelKind,
    pub transition_mode: TransitionMode,
    pub seed: u64,
    pub rank: usize,
    pub d_joint: usize,
    pub hidden: usize,
    pub targets: TargetRule,
    /// Decoder used for snapshot selection.
    pub decoder: Decoder,
    /// Apply box regression when scoring snapshots.
    pub regress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        TrainConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            batch_size: 16,
            clip_norm: 10.0,
            gamma: 10.0,
            iterations: 2000,
            snapshot_every: 5000,
            regime: Regime::Soft,
            model: ModelKind::Crf,
            transition_mode: TransitionMode::Shared,
            seed: 0,
            rank: dims.rank,
            d_joint: dims.d_joint,
            hidden: dims.hidden,
            targets: TargetRule::default(),
            decoder: Decoder::Viterbi,
            regress: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning_rate, epsilon and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.snapshot_every == 0 {
            return bad("batch_size and snapshot_every must be at least 1");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be nonnegative");
        }
        if self.rank == 0 || self.d_joint == 0 || self.hidden == 0 {
            return bad("model dimensions must be positive");
        }
        Ok(())
    }

    /// Model shape for data with the given feature widths.
    pub fn model_config(&self, d_text: usize, d_vis: usize, d_ctx: usize) -> ModelConfig {
        ModelConfig {
            dims: ModelDims {
                d_text,
                d_vis,
                rank: self.rank,
                d_joint: self.d_joint,
                hidden: self.hidden,
                d_ctx,
            },
            kind: self.model,
            transition_mode: self.transition_mode,
        }
    }

    /// Model shape inferred from the first instance.
    pub fn model_config_for(&self, inst: &Instance) -> ModelConfig {
        let d_ctx = inst
            .context_feats
            .as_ref()
            .map_or(ModelDims::default().d_ctx, |c| c.ncols());
        self.model_config(inst.phrase_feats.ncols(), inst.region_feats.ncols(), d_ctx)
    }
}

/// Adam first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamTensors,
    pub v: ParamTensors,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> Self {
        AdamState {
            m: ParamTensors::zeros(config),
            v: ParamTensors::zeros(config),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// zeroed afterwards.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let values = params.values.slices_mut();
    let grads = params.grads.slices();
    let ms = state.m.slices_mut();
    let vs = state.v.slices_mut();
    for (((value, grad), m), v) in values.into_iter().zip(grads).zip(ms).zip(vs) {
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    params.zero_grads();
}

/// Rescales every gradient so the largest absolute entry is at most
/// `clip_norm`. Returns the pre-clip infinity norm.
pub fn clip_gradients(grads: &mut ParamTensors, clip_norm: f64) -> Result<f64> {
    if grads.slices().iter().any(|s| s.iter().any(|v| v.is_nan())) {
        return Err(Error::Diverged {
            iteration: 0,
            detail: "NaN gradient".into(),
        });
    }
    let norm = grads.max_abs();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    Ok(norm)
}

/// Per-phrase supervision derived once per instance.
#[derive(Debug, Clone)]
pub struct Supervision {
    pub soft: SoftTargets,
    pub hard: Vec<usize>,
    /// Regression target on the best-overlapping candidate, when it clears
    /// the accuracy threshold.
    pub regression: Vec<Option<(usize, [f64; 4])>>,
}

impl Supervision {
    pub fn new(inst: &Instance, rule: &TargetRule) -> Result<Self> {
        let (soft, hard) = build_targets(inst, rule)?;
        let regression = inst
            .gold_boxes
            .iter()
            .map(|gold| {
                let (k, v) = best_overlap(&inst.candidate_boxes, gold)?;
                (v >= ACCURACY_IOU).then(|| (k, encode_box_deltas(gold, &inst.candidate_boxes[k])))
            })
            .collect();
        Ok(Supervision {
            soft,
            hard,
            regression,
        })
    }

    pub fn targets(&self, regime: Regime) -> SoftTargets {
        match regime {
            Regime::Soft => self.soft.clone(),
            Regime::Hard => SoftTargets::one_hot(&self.hard, self.soft.num_labels())
                .expect("hard labels index candidates"),
        }
    }
}

/// Loss of one instance with all its gradients.
#[derive(Debug, Clone)]
pub struct InstanceLoss {
    pub label: f64,
    pub regression: f64,
    pub d_scores: ScoreGradients,
    pub d_reg: Vec<RegressionGrad>,
}

impl InstanceLoss {
    pub fn total(&self, gamma: f64) -> f64 {
        self.label + gamma * self.regression
    }
}

/// `Σ_t KL(q^t ‖ softmax(ε^t))` and its emission gradient, for models with
/// no transitions.
pub fn independent_loss(emission: &Array2<f64>, targets: &SoftTargets) -> Result<(f64, Array2<f64>)> {
    let q = targets.matrix();
    if q.dim() != emission.dim() {
        return Err(crate::error::contract("targets and emissions disagree in shape"));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(emission.dim());
    for (t, row) in emission.axis_iter(Axis(0)).enumerate() {
        let log_z = crate::numkernel::log_sum_exp(row.as_slice().expect("contiguous row"))?;
        for (k, &e) in row.iter().enumerate() {
            let qk = q[[t, k]];
            if qk > 0.0 {
                loss += qk * (qk.ln() - (e - log_z));
            }
            grad[[t, k]] = (e - log_z).exp() - qk;
        }
    }
    Ok((loss, grad))
}

/// Label loss and score gradients for the configured model and regime.
pub fn label_loss(
    scores: &ScoreSet,
    sup: &Supervision,
    kind: ModelKind,
    regime: Regime,
) -> Result<(f64, ScoreGradients)> {
    let targets = sup.targets(regime);
    match kind {
        ModelKind::NonCrf => {
            let (loss, d_emission) = independent_loss(scores.emission(), &targets)?;
            let mut grads = ScoreGradients::zeros_like(scores);
            grads.d_emission = d_emission;
            Ok((loss, grads))
        }
        ModelKind::Crf => {
            let grads = crf::soft_label_gradients(scores, &targets)?;
            let loss = match regime {
                Regime::Soft => crf::soft_label_loss(scores, &targets)?,
                Regime::Hard => crf::hard_label_loss(scores, &sup.hard)?,
            };
            Ok((loss, grads))
        }
    }
}

/// Full per-instance loss `L_label + γ L_reg` with gradients (unscaled by
/// batch size).
pub fn instance_loss(
    pass: &ScoringPass,
    params: &ModelParams,
    sup: &Supervision,
    regime: Regime,
    gamma: f64,
) -> Result<InstanceLoss> {
    let (label, d_scores) = label_loss(&pass.scores, sup, params.config.kind, regime)?;
    let mut regression = 0.0;
    let mut d_reg = Vec::new();
    for (t, target) in sup.regression.iter().enumerate() {
        if let Some((k, beta)) = target {
            let pred = pass.regression(params, t, *k);
            regression += regression_loss(&pred, beta);
            let mut g = regression_loss_grad(&pred, beta);
            g.iter_mut().for_each(|x| *x *= gamma);
            d_reg.push(RegressionGrad {
                phrase: t,
                candidate: *k,
                grad: g,
            });
        }
    }
    Ok(InstanceLoss {
        label,
        regression,
        d_scores,
        d_reg,
    })
}

/// Forward, loss and backward for one instance into a fresh accumulator.
fn instance_gradients(
    inst: &Instance,
    sup: &Supervision,
    params: &ModelParams,
    cfg: &TrainConfig,
    scale: f64,
) -> Result<(f64, f64, ParamTensors)> {
    let pass = ScoringPass::run(inst, params)?;
    let mut loss = instance_loss(&pass, params, sup, cfg.regime, cfg.gamma)?;
    loss.d_scores.scale(scale);
    for r in loss.d_reg.iter_mut() {
        r.grad.iter_mut().for_each(|x| *x *= scale);
    }
    let mut acc = ParamTensors::zeros(&params.config);
    pass.backward(inst, &params.values, &mut acc, &loss.d_scores, &loss.d_reg)?;
    Ok((loss.label, loss.regression, acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub label_loss: f64,
    pub regression_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub iteration: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub iterations: Vec<IterationRecord>,
    pub snapshots: Vec<SnapshotRecord>,
    /// Iteration of the selected snapshot, if any snapshot was taken.
    pub best_iteration: Option<usize>,
}

impl TrainingReport {
    /// One JSON object per line, tagged by `kind`.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        enum Line<'a> {
            Iteration(&'a IterationRecord),
            Snapshot(&'a SnapshotRecord),
            Best { iteration: Option<usize> },
        }
        let mut out = String::new();
        let lines = self
            .iterations
            .iter()
            .map(Line::Iteration)
            .chain(self.snapshots.iter().map(Line::Snapshot))
            .chain(std::iter::once(Line::Best {
                iteration: self.best_iteration,
            }));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
            out.push('\n');
        }
        out
    }
}

/// Controls how instance passes inside a batch are scheduled. Both modes
/// sum per-instance gradients in batch order and give identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Serial,
    Threads(usize),
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a [Instance],
    val: &'a [Instance],
    supervision: Vec<Supervision>,
    parallelism: Parallelism,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, train: &'a [Instance], val: &'a [Instance]) -> Result<Self> {
        cfg.validate()?;
        let supervision = train
            .iter()
            .map(|inst| Supervision::new(inst, &cfg.targets))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            cfg,
            train,
            val,
            supervision,
            parallelism: Parallelism::Serial,
        })
    }

    pub fn with_parallelism(mut self, p: Parallelism) -> Self {
        self.parallelism = p;
        self
    }

    /// Xavier-initialized parameters shaped for the training data.
    pub fn initial_params(&self) -> Result<ModelParams> {
        let first = self
            .train
            .first()
            .ok_or_else(|| Error::Config("empty training set".into()))?;
        Ok(ModelParams::init(self.cfg.model_config_for(first), self.cfg.seed))
    }

    fn batch_gradients(
        &self,
        params: &ModelParams,
        batch: &[usize],
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Vec<(f64, f64, ParamTensors)>> {
        let scale = 1.0 / batch.len() as f64;
        let one = |&i: &usize| instance_gradients(&self.train[i], &self.supervision[i], params, &self.cfg, scale);
        match pool {
            Some(pool) => pool.install(|| batch.par_iter().map(one).collect()),
            None => batch.iter().map(one).collect(),
        }
    }

    /// Trains `params` in place and leaves it at the best validation
    /// snapshot (or the final state when no snapshot was taken).
    pub fn train(&self, params: &mut ModelParams) -> Result<TrainingReport> {
        let cfg = &self.cfg;
        let mut report = TrainingReport::default();
        if cfg.iterations == 0 {
            return Ok(report);
        }
        if self.train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let pool = match self.parallelism {
            Parallelism::Threads(n) if n > 1 => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?,
            ),
            _ => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut cursor = order.len();
        let mut adam = AdamState::new(&params.config);
        let mut best: Option<(f64, usize, ParamTensors)> = None;
        params.zero_grads();

        for iteration in 1..=cfg.iterations {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(order.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }

            let parts = self.batch_gradients(params, &batch, pool.as_ref()).map_err(|e| match e {
                Error::Contract(detail) if detail.contains("finite") => Error::Diverged { iteration, detail },
                other => other,
            })?;
            let n = batch.len() as f64;
            let mut label_loss = 0.0;
            let mut reg_loss = 0.0;
            for (l, r, g) in &parts {
                label_loss += l / n;
                reg_loss += r / n;
                params.grads.add_assign(g);
            }
            let loss = label_loss + cfg.gamma * reg_loss;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    detail: format!("loss {loss} (label {label_loss}, regression {reg_loss})"),
                });
            }
            let grad_norm = clip_gradients(&mut params.grads, cfg.clip_norm).map_err(|e| match e {
                Error::Diverged { detail, .. } => Error::Diverged { iteration, detail },
                other => other,
            })?;
            adam_step(params, &mut adam, cfg);
            report.iterations.push(IterationRecord {
                iteration,
                loss,
                label_loss,
                regression_loss: reg_loss,
                grad_norm,
            });

            if iteration % cfg.snapshot_every == 0 || iteration == cfg.iterations {
                let acc = evaluate(self.val, params, cfg.decoder, cfg.regress)?;
                report.snapshots.push(SnapshotRecord {
                    iteration,
                    val_accuracy: acc,
                });
                if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                    best = Some((acc, iteration, params.values.clone()));
                }
            }
        }
        if let Some((_, iteration, values)) = best {
            params.values = values;
            report.best_iteration = Some(iteration);
        }
        Ok(report)
    }
}

/// Convenience wrapper around [`Trainer`] in serial mode.
pub fn train(
    train_set: &[Instance],
    val_set: &[Instance],
    cfg: &TrainConfig,
    params: &mut ModelParams,
) -> Result<TrainingReport> {
    Trainer::new(cfg.clone(), train_set, val_set)?.train(params)
}

/// Predicted candidates for one instance under both decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub viterbi: Vec<usize>,
    pub smoothing: Vec<usize>,
}

/// One scoring pass, one forward-backward and one Viterbi run.
pub fn decode_instance(pass: &ScoringPass) -> Decoded {
    let scores = &pass.scores;
    let (viterbi, _) = crf::viterbi_decode(scores);
    let unary = crf::marginals(scores).unary;
    let smoothing = unary.outer_iter().map(|r| argmax(r.iter().copied())).collect();
    Decoded { viterbi, smoothing }
}

/// Boxes predicted for each phrase: the chosen candidates, optionally refined
/// by the regression head.
pub fn predicted_boxes(
    inst: &Instance,
    params: &ModelParams,
    pass: &ScoringPass,
    labels: &[usize],
    regress: bool,
) -> Result<Vec<BBox>> {
    if regress {
        regress_with(pass, inst, params, labels)
    } else {
        Ok(labels.iter().map(|&k| inst.candidate_boxes[k]).collect())
    }
}

/// Fraction of phrases whose predicted box overlaps the gold box with
/// `IoU >= 0.5`, for both decoders from one pass per instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub viterbi: f64,
    pub smoothing: f64,
    pub phrases: usize,
}

pub fn evaluate_both(instances: &[Instance], params: &ModelParams, regress: bool) -> Result<Accuracy> {
    let mut hits = [0usize; 2];
    let mut phrases = 0;
    for inst in instances {
        let pass = ScoringPass::run(inst, params)?;
        let d = decode_instance(&pass);
        for (slot, labels) in [&d.viterbi, &d.smoothing].into_iter().enumerate() {
            let boxes = predicted_boxes(inst, params, &pass, labels, regress)?;
            hits[slot] += boxes
                .iter()
                .zip(&inst.gold_boxes)
                .filter(|(p, g)| iou(p, g) >= ACCURACY_IOU)
                .count();
        }
        phrases += inst.num_phrases();
    }
    if phrases == 0 {
        return Ok(Accuracy {
            viterbi: 0.0,
            smoothing: 0.0,
            phrases,
        });
    }
    Ok(Accuracy {
        viterbi: hits[0] as f64 / phrases as f64,
        smoothing: hits[1] as f64 / phrases as f64,
        phrases,
    })
}

pub fn evaluate(instances: &[Instance], params: &ModelParams, decoder: Decoder, regress: bool) -> Result<f64> {
    let acc = evaluate_both(instances, params, regress)?;
    Ok(match decoder {
        Decoder::Viterbi => acc.viterbi,
        Decoder::Smoothing => acc.smoothing,
    })
}

/// Accuracy of fixed label choices (no model involved).
pub fn accuracy_of_labels(instances: &[Instance], labels: &[Vec<usize>]) -> f64 {
    let mut hits = 0;
    let mut total = 0;
    for (inst, ys) in instances.iter().zip(labels) {
        for (t, &k) in ys.iter().enumerate() {
            total += 1;
            if iou(&inst.candidate_boxes[k], &inst.gold_boxes[t]) >= ACCURACY_IOU {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
