//! Neural scoring heads with hand-written forward and backward passes.
//!
//! * Fusion: `f[t][k] = Pᵀ(Uᵀ p[t] ∘ Vᵀ r[k]) + b` (low-rank bilinear pooling).
//! * Emission: a linear map of the fused vector to a scalar.
//! * Transition: a two-layer ReLU network on `[r[j] ‖ r[k]]`, optionally
//!   extended with the context features between the two phrases.
//! * Regression: a linear map of the fused vector to box deltas.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{ScoreGradients, ScoreSet, Transitions};
use crate::error::{at_path, contract, Error, Result};
use crate::geometry::{decode_box_deltas, BBox};
use crate::synthdata::Instance;

/// What the transition head sees besides the two region feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TransitionMode {
    /// `[r_j ‖ r_k]` only; one `K x K` matrix shared by every step.
    #[default]
    #[serde(rename = "--", alias = "shared")]
    Shared,
    /// `[r_j ‖ r_k ‖ context_t]`; one matrix per step.
    #[serde(rename = "M", alias = "context")]
    Context,
}

impl std::str::FromStr for TransitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "--" | "shared" => Ok(TransitionMode::Shared),
            "M" | "m" | "context" => Ok(TransitionMode::Context),
            other => Err(Error::Config(format!("unknown transition mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d_text: usize,
    pub d_vis: usize,
    pub rank: usize,
    pub d_joint: usize,
    pub hidden: usize,
    pub d_ctx: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_text: 16,
            d_vis: 13,
            rank: 16,
            d_joint: 16,
            hidden: 16,
            d_ctx: 8,
        }
    }
}

/// Whether labels are coupled through transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Crf,
    /// Each phrase is labeled independently; the transition head is unused.
    NonCrf,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crf" => Ok(ModelKind::Crf),
            "non-crf" | "non_crf" => Ok(ModelKind::NonCrf),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub kind: ModelKind,
    pub transition_mode: TransitionMode,
}

impl ModelConfig {
    pub fn transition_input(&self) -> usize {
        let base = 2 * self.dims.d_vis;
        match self.transition_mode {
            TransitionMode::Shared => base,
            TransitionMode::Context => base + self.dims.d_ctx,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrbpParams {
    /// `d_text x rank`
    pub u: Array2<f64>,
    /// `d_vis x rank`
    pub v: Array2<f64>,
    /// `rank x d_joint`
    pub p: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub emission_w: Array1<f64>,
    pub emission_b: Array1<f64>,
    /// `transition_input x hidden`
    pub transition_hidden_w: Array2<f64>,
    pub transition_hidden_b: Array1<f64>,
    pub transition_out_w: Array1<f64>,
    pub transition_out_b: Array1<f64>,
    /// `d_joint x 4`
    pub regression_w: Array2<f64>,
    pub regression_b: Array1<f64>,
}

/// Every learnable tensor. Also used, with identical shapes, for gradient
/// accumulators and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors {
    pub lrbp: LrbpParams,
    pub heads: HeadParams,
}

pub const TENSOR_NAMES: [&str; 12] = [
    "lrbp.u",
    "lrbp.v",
    "lrbp.p",
    "lrbp.b",
    "emission.w",
    "emission.b",
    "transition.hidden.w",
    "transition.hidden.b",
    "transition.out.w",
    "transition.out.b",
    "regression.w",
    "regression.b",
];

impl ParamTensors {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.dims;
        let tin = cfg.transition_input();
        ParamTensors {
            lrbp: LrbpParams {
                u: Array2::zeros((d.d_text, d.rank)),
                v: Array2::zeros((d.d_vis, d.rank)),
                p: Array2::zeros((d.rank, d.d_joint)),
                b: Array1::zeros(d.d_joint),
            },
            heads: HeadParams {
                emission_w: Array1::zeros(d.d_joint),
                emission_b: Array1::zeros(1),
                transition_hidden_w: Array2::zeros((tin, d.hidden)),
                transition_hidden_b: Array1::zeros(d.hidden),
                transition_out_w: Array1::zeros(d.hidden),
                transition_out_b: Array1::zeros(1),
                regression_w: Array2::zeros((d.d_joint, 4)),
                regression_b: Array1::zeros(4),
            },
        }
    }

    /// Shapes in [`TENSOR_NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; 12] {
        let l = &self.lrbp;
        let h = &self.heads;
        [
            l.u.shape().to_vec(),
            l.v.shape().to_vec(),
            l.p.shape().to_vec(),
            l.b.shape().to_vec(),
            h.emission_w.shape().to_vec(),
            h.emission_b.shape().to_vec(),
            h.transition_hidden_w.shape().to_vec(),
            h.transition_hidden_b.shape().to_vec(),
            h.transition_out_w.shape().to_vec(),
            h.transition_out_b.shape().to_vec(),
            h.regression_w.shape().to_vec(),
            h.regression_b.shape().to_vec(),
        ]
    }

    /// Flat views in [`TENSOR_NAMES`] order.
    pub fn slices(&self) -> [&[f64]; 12] {
        fn f(a: Option<&[f64]>) -> &[f64] {
            a.expect("standard layout")
        }
        let l = &self.lrbp;
        let h = &self.heads;
        [
            f(l.u.as_slice()),
            f(l.v.as_slice()),
            f(l.p.as_slice()),
            f(l.b.as_slice()),
            f(h.emission_w.as_slice()),
            f(h.emission_b.as_slice()),
            f(h.transition_hidden_w.as_slice()),
            f(h.transition_hidden_b.as_slice()),
            f(h.transition_out_w.as_slice()),
            f(h.transition_out_b.as_slice()),
            f(h.regression_w.as_slice()),
            f(h.regression_b.as_slice()),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 12] {
        let l = &mut self.lrbp;
        let h = &mut self.heads;
        fn f(a: Option<&mut [f64]>) -> &mut [f64] {
            a.expect("standard layout")
        }
        [
            f(l.u.as_slice_mut()),
            f(l.v.as_slice_mut()),
            f(l.p.as_slice_mut()),
            f(l.b.as_slice_mut()),
            f(h.emission_w.as_slice_mut()),
            f(h.emission_b.as_slice_mut()),
            f(h.transition_hidden_w.as_slice_mut()),
            f(h.transition_hidden_b.as_slice_mut()),
            f(h.transition_out_w.as_slice_mut()),
            f(h.transition_out_b.as_slice_mut()),
            f(h.regression_w.as_slice_mut()),
            f(h.regression_b.as_slice_mut()),
        ]
    }

    pub fn fill(&mut self, value: f64) {
        for s in self.slices_mut() {
            s.fill(value);
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ParamTensors) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Largest absolute entry over every tensor.
    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| if v.abs() > m || v.is_nan() { v.abs() } else { m })
    }
}

/// Parameter values paired with same-shape gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub values: ParamTensors,
    pub grads: ParamTensors,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        ModelParams {
            values: ParamTensors::zeros(&config),
            grads: ParamTensors::zeros(&config),
            config,
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |a: &mut [f64], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in a.iter_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        };
        let d = config.dims;
        let tin = config.transition_input();
        let v = &mut params.values;
        xavier(v.lrbp.u.as_slice_mut().unwrap(), d.d_text, d.rank);
        xavier(v.lrbp.v.as_slice_mut().unwrap(), d.d_vis, d.rank);
        xavier(v.lrbp.p.as_slice_mut().unwrap(), d.rank, d.d_joint);
        xavier(v.heads.emission_w.as_slice_mut().unwrap(), d.d_joint, 1);
        xavier(v.heads.transition_hidden_w.as_slice_mut().unwrap(), tin, d.hidden);
        xavier(v.heads.transition_out_w.as_slice_mut().unwrap(), d.hidden, 1);
        xavier(v.heads.regression_w.as_slice_mut().unwrap(), d.d_joint, 4);
        params
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    fn check_instance(&self, inst: &Instance) -> Result<()> {
        let d = self.config.dims;
        if inst.phrase_feats.ncols() != d.d_text {
            return Err(contract(format!(
                "instance {}: phrase features have width {}, model expects {}",
                inst.id,
                inst.phrase_feats.ncols(),
                d.d_text
            )));
        }
        if inst.region_feats.ncols() != d.d_vis {
            return Err(contract(format!(
                "instance {}: region features have width {}, model expects {}",
                inst.id,
                inst.region_feats.ncols(),
                d.d_vis
            )));
        }
        if self.config.kind == ModelKind::Crf && self.config.transition_mode == TransitionMode::Context {
            match &inst.context_feats {
                None => {
                    return Err(Error::Config(format!(
                        "instance {}: context transitions need context features",
                        inst.id
                    )))
                }
                Some(c) if c.nrows() > 0 && c.ncols() != d.d_ctx => {
                    return Err(contract(format!(
                        "instance {}: context features have width {}, model expects {}",
                        inst.id,
                        c.ncols(),
                        d.d_ctx
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// `Pᵀ(Uᵀ p ∘ Vᵀ r) + b` for a single pair.
pub fn lrbp_fuse(phrase: ArrayView1<f64>, region: ArrayView1<f64>, params: &LrbpParams) -> Result<Array1<f64>> {
    if phrase.len() != params.u.nrows() || region.len() != params.v.nrows() {
        return Err(contract(format!(
            "fusion inputs of width {} and {} do not match ({}, {})",
            phrase.len(),
            region.len(),
            params.u.nrows(),
            params.v.nrows()
        )));
    }
    let a = phrase.dot(&params.u);
    let c = region.dot(&params.v);
    Ok((&a * &c).dot(&params.p) + &params.b)
}

/// Activations of one scoring forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ScoringPass {
    t: usize,
    k: usize,
    with_transitions: bool,
    /// `T x rank`
    text_proj: Array2<f64>,
    /// `K x rank`
    region_proj: Array2<f64>,
    /// `(T*K) x rank`, row `t*K + k`.
    interaction: Array2<f64>,
    /// `(T*K) x d_joint`
    fused: Array2<f64>,
    /// Transition pre-activations, `[slice][from][to][hidden]`. One slice
    /// when shared, `T-1` when context-conditioned.
    trans_pre: Vec<f64>,
    pub scores: ScoreSet,
}

impl ScoringPass {
    /// Runs the heads on `inst`. Non-CRF models skip the transition head and
    /// get all-zero transition scores.
    pub fn run(inst: &Instance, params: &ModelParams) -> Result<Self> {
        Self::run_with(inst, params, params.config.kind == ModelKind::Crf)
    }

    pub(crate) fn run_with(inst: &Instance, params: &ModelParams, with_transitions: bool) -> Result<Self> {
        params.check_instance(inst)?;
        let v = &params.values;
        let cfg = params.config;
        let t = inst.num_phrases();
        let k = inst.num_candidates();
        let rank = cfg.dims.rank;

        let text_proj = inst.phrase_feats.dot(&v.lrbp.u);
        let region_proj = inst.region_feats.dot(&v.lrbp.v);
        let mut interaction = Array2::zeros((t * k, rank));
        for ti in 0..t {
            let a = text_proj.row(ti);
            for ki in 0..k {
                let c = region_proj.row(ki);
                let mut row = interaction.row_mut(ti * k + ki);
                for r in 0..rank {
                    row[r] = a[r] * c[r];
                }
            }
        }
        let fused = interaction.dot(&v.lrbp.p) + &v.lrbp.b;
        let em_flat = fused.dot(&v.heads.emission_w) + v.heads.emission_b[0];
        let emission = em_flat.into_shape_with_order((t, k)).expect("t*k entries");

        let (transitions, trans_pre) = if with_transitions {
            transition_forward(inst, params)
        } else {
            (Transitions::Shared(Array2::zeros((k, k))), Vec::new())
        };
        let scores = ScoreSet::new(emission, transitions)
            .map_err(|e| contract(format!("instance {}: {e}", inst.id)))?;
        Ok(ScoringPass {
            t,
            k,
            with_transitions,
            text_proj,
            region_proj,
            interaction,
            fused,
            trans_pre,
            scores,
        })
    }

    /// Smallest `|z|` over the transition hidden pre-activations; infinite
    /// when the transition head was skipped. Finite-difference checks use it
    /// to stay clear of ReLU kinks.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.trans_pre.iter().fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    pub fn fused(&self, t: usize, k: usize) -> ArrayView1<'_, f64> {
        self.fused.row(t * self.k + k)
    }

    /// Regression head output (box deltas) for phrase `t` on candidate `k`.
    pub fn regression(&self, params: &ModelParams, t: usize, k: usize) -> [f64; 4] {
        let h = &params.values.heads;
        let out = self.fused(t, k).dot(&h.regression_w) + &h.regression_b;
        [out[0], out[1], out[2], out[3]]
    }

    /// Chain rule from score and regression gradients into `grads`.
    pub fn backward(
        &self,
        inst: &Instance,
        values: &ParamTensors,
        grads: &mut ParamTensors,
        d_scores: &ScoreGradients,
        d_reg: &[RegressionGrad],
    ) -> Result<()> {
        let (t, k) = (self.t, self.k);
        if d_scores.d_emission.dim() != (t, k) {
            return Err(contract(format!(
                "emission gradient is {:?}, expected ({t}, {k})",
                d_scores.d_emission.dim()
            )));
        }
        let h = &values.heads;
        let d_joint = self.fused.ncols();
        let mut d_fused = Array2::<f64>::zeros((t * k, d_joint));

        for ti in 0..t {
            for ki in 0..k {
                let g = d_scores.d_emission[[ti, ki]];
                if g == 0.0 {
                    continue;
                }
                let row = ti * k + ki;
                grads.heads.emission_b[0] += g;
                grads
                    .heads
                    .emission_w
                    .scaled_add(g, &self.fused.row(row));
                d_fused.row_mut(row).scaled_add(g, &h.emission_w);
            }
        }

        for rg in d_reg {
            if rg.phrase >= t || rg.candidate >= k {
                return Err(contract(format!(
                    "regression gradient for ({}, {}) outside ({t}, {k})",
                    rg.phrase, rg.candidate
                )));
            }
            let row = rg.phrase * k + rg.candidate;
            let dbeta = Array1::from(rg.grad.to_vec());
            let f = self.fused.row(row);
            for j in 0..d_joint {
                for c in 0..4 {
                    grads.heads.regression_w[[j, c]] += f[j] * dbeta[c];
                }
            }
            grads.heads.regression_b += &dbeta;
            let back = h.regression_w.dot(&dbeta);
            d_fused.row_mut(row).scaled_add(1.0, &back);
        }

        // Fusion layer.
        grads.lrbp.p += &self.interaction.t().dot(&d_fused);
        grads.lrbp.b += &d_fused.sum_axis(Axis(0));
        let d_inter = d_fused.dot(&values.lrbp.p.t());
        let rank = self.interaction.ncols();
        let mut d_text = Array2::<f64>::zeros((t, rank));
        let mut d_region = Array2::<f64>::zeros((k, rank));
        for ti in 0..t {
            for ki in 0..k {
                let g = d_inter.row(ti * k + ki);
                let a = self.text_proj.row(ti);
                let c = self.region_proj.row(ki);
                for r in 0..rank {
                    d_text[[ti, r]] += g[r] * c[r];
                    d_region[[ki, r]] += g[r] * a[r];
                }
            }
        }
        grads.lrbp.u += &inst.phrase_feats.t().dot(&d_text);
        grads.lrbp.v += &inst.region_feats.t().dot(&d_region);

        if self.with_transitions {
            self.transition_backward(inst, values, grads, &d_scores.d_transition)?;
        }
        Ok(())
    }

    fn transition_backward(
        &self,
        inst: &Instance,
        values: &ParamTensors,
        grads: &mut ParamTensors,
        d_trans: &Transitions,
    ) -> Result<()> {
        let (t, k) = (self.t, self.k);
        let hidden = values.heads.transition_out_w.len();
        let d_vis = inst.region_feats.ncols();
        let slices: Vec<Array2<f64>> = match (d_trans, &self.scores.transitions()) {
            (Transitions::Shared(g), Transitions::Shared(_)) if g.dim() == (k, k) => vec![g.clone()],
            (Transitions::PerStep(g), Transitions::PerStep(_)) if g.dim() == (t - 1, k, k) => {
                g.outer_iter().map(|s| s.to_owned()).collect()
            }
            _ => return Err(contract("transition gradient does not match the transition scores")),
        };
        let w_out = &values.heads.transition_out_w;
        let mut d_from = Array2::<f64>::zeros((k, hidden));
        let mut d_to = Array2::<f64>::zeros((k, hidden));
        let mut d_ctx = Array2::<f64>::zeros((slices.len(), hidden));
        let mut d_hidden_b = Array1::<f64>::zeros(hidden);
        for (si, g) in slices.iter().enumerate() {
            for j in 0..k {
                for kk in 0..k {
                    let gv = g[[j, kk]];
                    if gv == 0.0 {
                        continue;
                    }
                    grads.heads.transition_out_b[0] += gv;
                    let base = ((si * k + j) * k + kk) * hidden;
                    let pre = &self.trans_pre[base..base + hidden];
                    for hh in 0..hidden {
                        if pre[hh] > 0.0 {
                            grads.heads.transition_out_w[hh] += gv * pre[hh];
                            let dz = gv * w_out[hh];
                            d_from[[j, hh]] += dz;
                            d_to[[kk, hh]] += dz;
                            d_ctx[[si, hh]] += dz;
                            d_hidden_b[hh] += dz;
                        }
                    }
                }
            }
        }
        grads.heads.transition_hidden_b += &d_hidden_b;
        let regions_t = inst.region_feats.t();
        let mut w = grads.heads.transition_hidden_w.view_mut();
        let mut top = w.slice_mut(s![0..d_vis, ..]);
        top += &regions_t.dot(&d_from);
        let mut mid = w.slice_mut(s![d_vis..2 * d_vis, ..]);
        mid += &regions_t.dot(&d_to);
        if let (Transitions::PerStep(_), Some(ctx)) = (d_trans, &inst.context_feats) {
            if t > 1 {
                let mut bottom = w.slice_mut(s![2 * d_vis.., ..]);
                bottom += &ctx.t().dot(&d_ctx);
            }
        }
        Ok(())
    }
}

fn transition_forward(inst: &Instance, params: &ModelParams) -> (Transitions, Vec<f64>) {
    let v = &params.values.heads;
    let t = inst.num_phrases();
    let k = inst.num_candidates();
    let d_vis = inst.region_feats.ncols();
    let hidden = v.transition_out_w.len();
    let w = &v.transition_hidden_w;
    let from_proj = inst.region_feats.dot(&w.slice(s![0..d_vis, ..]));
    let to_proj = inst.region_feats.dot(&w.slice(s![d_vis..2 * d_vis, ..]));

    let ctx_proj: Vec<Array1<f64>> = match params.config.transition_mode {
        TransitionMode::Shared => vec![v.transition_hidden_b.clone()],
        TransitionMode::Context => {
            let ctx = inst.context_feats.as_ref().expect("checked by check_instance");
            let bottom = w.slice(s![2 * d_vis.., ..]);
            (0..t.saturating_sub(1))
                .map(|s| ctx.row(s).dot(&bottom) + &v.transition_hidden_b)
                .collect()
        }
    };

    let mut pre = vec![0.0; ctx_proj.len() * k * k * hidden];
    let mut out = Array3::<f64>::zeros((ctx_proj.len(), k, k));
    for (si, bias) in ctx_proj.iter().enumerate() {
        for j in 0..k {
            for kk in 0..k {
                let base = ((si * k + j) * k + kk) * hidden;
                let mut acc = v.transition_out_b[0];
                for hh in 0..hidden {
                    let z = from_proj[[j, hh]] + to_proj[[kk, hh]] + bias[hh];
                    pre[base + hh] = z;
                    if z > 0.0 {
                        acc += z * v.transition_out_w[hh];
                    }
                }
                out[[si, j, kk]] = acc;
            }
        }
    }
    let transitions = match params.config.transition_mode {
        TransitionMode::Shared => Transitions::Shared(out.index_axis_move(Axis(0), 0)),
        TransitionMode::Context => Transitions::PerStep(out),
    };
    (transitions, pre)
}

/// Gradient of a loss with respect to the regression output for one
/// phrase/candidate pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionGrad {
    pub phrase: usize,
    pub candidate: usize,
    pub grad: [f64; 4],
}

/// Emission and transition scores for an instance.
pub fn score_instance(inst: &Instance, params: &ModelParams) -> Result<ScoreSet> {
    Ok(ScoringPass::run(inst, params)?.scores)
}

/// Accumulates parameter gradients into `params.grads`.
pub fn score_backward(
    inst: &Instance,
    params: &mut ModelParams,
    d_scores: &ScoreGradients,
    d_reg: &[RegressionGrad],
) -> Result<()> {
    let pass = ScoringPass::run(inst, params)?;
    pass.backward(inst, &params.values, &mut params.grads, d_scores, d_reg)
}

/// Refined boxes for the given candidate choice, one per phrase.
pub fn regress_boxes(inst: &Instance, params: &ModelParams, labels: &[usize]) -> Result<Vec<BBox>> {
    let pass = ScoringPass::run_with(inst, params, false)?;
    regress_with(&pass, inst, params, labels)
}

pub(crate) fn regress_with(
    pass: &ScoringPass,
    inst: &Instance,
    params: &ModelParams,
    labels: &[usize],
) -> Result<Vec<BBox>> {
    if labels.len() != inst.num_phrases() || labels.iter().any(|&k| k >= inst.num_candidates()) {
        return Err(contract("labels do not fit the instance"));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(t, &k)| decode_box_deltas(&inst.candidate_boxes[k], &pass.regression(params, t, k)))
        .collect())
}

pub const CHECKPOINT_FORMAT: &str = "slcrf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

impl ModelParams {
    pub fn to_checkpoint_string(&self) -> String {
        let tensors = TENSOR_NAMES
            .iter()
            .zip(self.values.shapes())
            .zip(self.values.slices())
            .map(|((name, shape), data)| NamedTensor {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            tensors,
        };
        let mut s = serde_json::to_string_pretty(&ck).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint: unsupported format {} v{}",
                ck.format, ck.version
            )));
        }
        let mut params = ModelParams::zeros(ck.config);
        if ck.tensors.len() != TENSOR_NAMES.len() {
            return Err(Error::Schema(format!(
                "checkpoint: {} tensors, expected {}",
                ck.tensors.len(),
                TENSOR_NAMES.len()
            )));
        }
        let shapes = params.values.shapes();
        for (((tensor, name), shape), dst) in ck
            .tensors
            .iter()
            .zip(TENSOR_NAMES)
            .zip(shapes)
            .zip(params.values.slices_mut())
        {
            if tensor.name != name || tensor.shape != shape || tensor.data.len() != dst.len() {
                return Err(Error::Schema(format!(
                    "checkpoint: tensor {:?} {:?} does not match expected {name:?} {shape:?}",
                    tensor.name, tensor.shape
                )));
            }
            if tensor.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("checkpoint: tensor {name} has non-finite data")));
            }
            dst.copy_from_slice(&tensor.data);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(at_path(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&fs::read_to_string(path).map_err(at_path(path))?)
    }
}
