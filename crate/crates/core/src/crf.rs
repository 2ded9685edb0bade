//! Linear-chain CRF dynamic programs.
//!
//! Positions are `0..T` and labels `0..K`. A transition score belongs to the
//! position it enters: `transition(t, from, to)` is defined for `t >= 1` and
//! scores the pair `(y[t-1] = from, y[t] = to)`. The first position has no
//! incoming transition (a virtual start with unit mass), so the forward
//! recursion begins at `log_alpha[0] = emission[0]`.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numkernel::{argmax, lse_by};

const ROW_SUM_TOL: f64 = 1e-9;

/// Transition scores, either shared by every step or one `K x K` slice per
/// step. Indexed `[from][to]`; per-step slice `s` enters position `s + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Transitions {
    Shared(Array2<f64>),
    PerStep(Array3<f64>),
}

impl Transitions {
    /// The `K x K` matrix scoring the step into position `t` (`t >= 1`).
    #[inline]
    pub fn at(&self, t: usize) -> ArrayView2<'_, f64> {
        debug_assert!(t >= 1);
        match self {
            Transitions::Shared(m) => m.view(),
            Transitions::PerStep(a) => a.index_axis(Axis(0), t - 1),
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, Transitions::Shared(_))
    }

    fn all_finite(&self) -> bool {
        match self {
            Transitions::Shared(m) => m.iter().all(|v| v.is_finite()),
            Transitions::PerStep(a) => a.iter().all(|v| v.is_finite()),
        }
    }
}

/// Emission and transition scores for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    emission: Array2<f64>,
    transitions: Transitions,
}

impl ScoreSet {
    pub fn new(emission: Array2<f64>, transitions: Transitions) -> Result<Self> {
        let (t, k) = emission.dim();
        if t == 0 || k == 0 {
            return Err(contract(format!("empty emission matrix {t}x{k}")));
        }
        match &transitions {
            Transitions::Shared(m) => {
                if m.dim() != (k, k) {
                    return Err(contract(format!(
                        "shared transition is {:?}, expected ({k}, {k})",
                        m.dim()
                    )));
                }
            }
            Transitions::PerStep(a) => {
                if a.dim() != (t - 1, k, k) {
                    return Err(contract(format!(
                        "per-step transition is {:?}, expected ({}, {k}, {k})",
                        a.dim(),
                        t - 1
                    )));
                }
            }
        }
        if !emission.iter().all(|v| v.is_finite()) || !transitions.all_finite() {
            return Err(contract("scores must be finite"));
        }
        Ok(ScoreSet {
            emission,
            transitions,
        })
    }

    /// Scores with the given emissions and all transitions zero.
    pub fn without_transitions(emission: Array2<f64>) -> Result<Self> {
        let k = emission.ncols();
        Self::new(emission, Transitions::Shared(Array2::zeros((k, k))))
    }

    pub fn len(&self) -> usize {
        self.emission.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.emission.nrows() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.emission.ncols()
    }

    pub fn emission(&self) -> &Array2<f64> {
        &self.emission
    }

    pub fn transitions(&self) -> &Transitions {
        &self.transitions
    }

    #[inline]
    pub fn transition(&self, t: usize, from: usize, to: usize) -> f64 {
        self.transitions.at(t)[[from, to]]
    }

    pub fn emission_mut(&mut self) -> &mut Array2<f64> {
        &mut self.emission
    }

    pub fn transitions_mut(&mut self) -> &mut Transitions {
        &mut self.transitions
    }

    /// Total score of a label sequence.
    pub fn sequence_score(&self, labels: &[usize]) -> Result<f64> {
        self.check_labels(labels)?;
        let mut s = self.emission[[0, labels[0]]];
        for t in 1..labels.len() {
            s += self.transition(t, labels[t - 1], labels[t]) + self.emission[[t, labels[t]]];
        }
        Ok(s)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.len() {
            return Err(contract(format!(
                "label sequence has length {}, expected {}",
                labels.len(),
                self.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= self.num_labels()) {
            return Err(contract(format!(
                "label {bad} out of range for {} labels",
                self.num_labels()
            )));
        }
        Ok(())
    }
}

/// Per-position target distributions `q^t` over labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    q: Array2<f64>,
}

impl SoftTargets {
    pub fn new(q: Array2<f64>) -> Result<Self> {
        if q.nrows() == 0 || q.ncols() == 0 {
            return Err(contract("empty target matrix"));
        }
        for (t, row) in q.outer_iter().enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(contract(format!("target row {t} has a negative or non-finite entry")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(contract(format!("target row {t} sums to {sum}")));
            }
            if !row.iter().any(|v| *v > 0.0) {
                return Err(contract(format!("target row {t} has no positive entry")));
            }
        }
        Ok(SoftTargets { q })
    }

    pub fn one_hot(labels: &[usize], num_labels: usize) -> Result<Self> {
        let mut q = Array2::zeros((labels.len(), num_labels));
        for (t, &y) in labels.iter().enumerate() {
            if y >= num_labels {
                return Err(contract(format!("label {y} out of range for {num_labels} labels")));
            }
            q[[t, y]] = 1.0;
        }
        Self::new(q)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.q.row(t)
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.nrows() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.q.ncols()
    }

    fn check_against(&self, scores: &ScoreSet) -> Result<()> {
        if self.q.dim() != scores.emission.dim() {
            return Err(contract(format!(
                "targets are {:?} but scores are {:?}",
                self.q.dim(),
                scores.emission.dim()
            )));
        }
        Ok(())
    }
}

/// Smoothing distributions of a chain CRF.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub log_z: f64,
    /// `unary[[t, k]] = p(y[t] = k | x)`.
    pub unary: Array2<f64>,
    /// `pairwise[[t - 1, j, k]] = p(y[t-1] = j, y[t] = k | x)`.
    pub pairwise: Array3<f64>,
}

/// Gradients of a loss with respect to every score, shaped like the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradients {
    pub d_emission: Array2<f64>,
    pub d_transition: Transitions,
}

impl ScoreGradients {
    pub fn zeros_like(scores: &ScoreSet) -> Self {
        let (t, k) = scores.emission.dim();
        let d_transition = match scores.transitions {
            Transitions::Shared(_) => Transitions::Shared(Array2::zeros((k, k))),
            Transitions::PerStep(_) => Transitions::PerStep(Array3::zeros((t - 1, k, k))),
        };
        ScoreGradients {
            d_emission: Array2::zeros((t, k)),
            d_transition,
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.d_emission *= c;
        match &mut self.d_transition {
            Transitions::Shared(m) => *m *= c,
            Transitions::PerStep(a) => *a *= c,
        }
    }
}

/// Forward and backward tables in log space.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub log_alpha: Array2<f64>,
    pub log_beta: Array2<f64>,
    pub log_z: f64,
}

fn forward_table(scores: &ScoreSet) -> Array2<f64> {
    let (t_len, k) = scores.emission.dim();
    let mut log_alpha = Array2::zeros((t_len, k));
    log_alpha.row_mut(0).assign(&scores.emission.row(0));
    for t in 1..t_len {
        let trans = scores.transitions.at(t);
        for to in 0..k {
            let prev = log_alpha.row(t - 1);
            let acc = lse_by(k, |from| prev[from] + trans[[from, to]]);
            log_alpha[[t, to]] = acc + scores.emission[[t, to]];
        }
    }
    log_alpha
}

fn backward_table(scores: &ScoreSet) -> Array2<f64> {
    let (t_len, k) = scores.emission.dim();
    let mut log_beta = Array2::zeros((t_len, k));
    for t in (1..t_len).rev() {
        let trans = scores.transitions.at(t);
        for from in 0..k {
            let next = log_beta.row(t);
            let em = scores.emission.row(t);
            let acc = lse_by(k, |to| trans[[from, to]] + em[to] + next[to]);
            log_beta[[t - 1, from]] = acc;
        }
    }
    log_beta
}

/// `log Z(x)` by the forward recursion, `O(T K^2)`.
pub fn forward_log_partition(scores: &ScoreSet) -> f64 {
    let alpha = forward_table(scores);
    let last = alpha.row(alpha.nrows() - 1);
    lse_by(last.len(), |k| last[k])
}

/// Resumes the forward recursion from a given `log_alpha` row at position
/// `t` and returns the resulting `log Z`.
pub fn log_partition_from(scores: &ScoreSet, t: usize, log_alpha_t: &[f64]) -> Result<f64> {
    let (t_len, k) = scores.emission.dim();
    if t >= t_len || log_alpha_t.len() != k {
        return Err(contract("forward state does not match the scores"));
    }
    let mut cur = log_alpha_t.to_vec();
    let mut next = vec![0.0; k];
    for s in t + 1..t_len {
        let trans = scores.transitions.at(s);
        for to in 0..k {
            next[to] = lse_by(k, |from| cur[from] + trans[[from, to]]) + scores.emission[[s, to]];
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(lse_by(k, |i| cur[i]))
}

pub fn forward_backward(scores: &ScoreSet) -> ForwardBackward {
    let log_alpha = forward_table(scores);
    let log_beta = backward_table(scores);
    let last = log_alpha.row(log_alpha.nrows() - 1);
    let log_z = lse_by(last.len(), |k| last[k]);
    ForwardBackward {
        log_alpha,
        log_beta,
        log_z,
    }
}

/// `KL(q || p)` between the factorized target and the CRF distribution,
/// computed in one forward pass.
///
/// Alongside the usual `log_alpha`, the pass carries
/// `g[t][k] = E_q[s(y[..=t]) - log q(y[..=t]) | y[t] = k]`, built as
/// `g[t][k] = Σ_j q[t-1][j] (g[t-1][j] + τ_t[j][k]) + ε[t][k] - log q[t][k]`.
/// The loss is `log Z - Σ_k q[T-1][k] g[T-1][k]`. Labels with zero target
/// mass are skipped in every q-weighted sum.
pub fn soft_label_loss(scores: &ScoreSet, targets: &SoftTargets) -> Result<f64> {
    targets.check_against(scores)?;
    let (t_len, k) = scores.emission.dim();
    let q = &targets.q;

    let mut g = vec![0.0; k];
    for y in 0..k {
        let qy = q[[0, y]];
        if qy > 0.0 {
            g[y] = scores.emission[[0, y]] - qy.ln();
        }
    }
    let mut next = vec![0.0; k];
    for t in 1..t_len {
        let trans = scores.transitions.at(t);
        for to in 0..k {
            let q_to = q[[t, to]];
            if q_to == 0.0 {
                next[to] = 0.0;
                continue;
            }
            let mut acc = 0.0;
            for from in 0..k {
                let q_from = q[[t - 1, from]];
                if q_from > 0.0 {
                    acc += q_from * (g[from] + trans[[from, to]]);
                }
            }
            next[to] = acc + scores.emission[[t, to]] - q_to.ln();
        }
        std::mem::swap(&mut g, &mut next);
    }
    let mut expected = 0.0;
    for y in 0..k {
        let qy = q[[t_len - 1, y]];
        if qy > 0.0 {
            expected += qy * g[y];
        }
    }
    Ok(forward_log_partition(scores) - expected)
}

/// Negative log-likelihood of a single gold sequence.
pub fn hard_label_loss(scores: &ScoreSet, gold: &[usize]) -> Result<f64> {
    let s = scores.sequence_score(gold)?;
    Ok(forward_log_partition(scores) - s)
}

fn marginals_from(scores: &ScoreSet, fb: &ForwardBackward) -> Marginals {
    let (t_len, k) = scores.emission.dim();
    let log_z = fb.log_z;
    let unary = (&fb.log_alpha + &fb.log_beta - log_z).mapv(f64::exp);
    let mut pairwise = Array3::zeros((t_len.saturating_sub(1), k, k));
    for t in 1..t_len {
        let trans = scores.transitions.at(t);
        let mut slice = pairwise.index_axis_mut(Axis(0), t - 1);
        for from in 0..k {
            let a = fb.log_alpha[[t - 1, from]];
            for to in 0..k {
                let lp = a + trans[[from, to]] + scores.emission[[t, to]] + fb.log_beta[[t, to]] - log_z;
                slice[[from, to]] = lp.exp();
            }
        }
    }
    Marginals {
        log_z,
        unary,
        pairwise,
    }
}

/// Unary and pairwise smoothing marginals by forward-backward.
pub fn marginals(scores: &ScoreSet) -> Marginals {
    marginals_from(scores, &forward_backward(scores))
}

/// Moment-matching gradients of [`soft_label_loss`]: model marginal minus
/// target marginal, for every emission and transition score.
pub fn soft_label_gradients(scores: &ScoreSet, targets: &SoftTargets) -> Result<ScoreGradients> {
    targets.check_against(scores)?;
    let m = marginals(scores);
    Ok(gradients_from_marginals(scores, &m, targets))
}

pub(crate) fn gradients_from_marginals(
    scores: &ScoreSet,
    m: &Marginals,
    targets: &SoftTargets,
) -> ScoreGradients {
    let (t_len, k) = scores.emission.dim();
    let q = &targets.q;
    let d_emission = &m.unary - q;
    let mut per_step = m.pairwise.clone();
    for t in 1..t_len {
        let mut slice = per_step.index_axis_mut(Axis(0), t - 1);
        for from in 0..k {
            let q_from = q[[t - 1, from]];
            for to in 0..k {
                slice[[from, to]] -= q_from * q[[t, to]];
            }
        }
    }
    let d_transition = match scores.transitions {
        Transitions::PerStep(_) => Transitions::PerStep(per_step),
        Transitions::Shared(_) => Transitions::Shared(per_step.sum_axis(Axis(0))),
    };
    ScoreGradients {
        d_emission,
        d_transition,
    }
}

/// Loss value, marginals and gradients in one forward-backward sweep.
pub fn soft_label_loss_and_gradients(
    scores: &ScoreSet,
    targets: &SoftTargets,
) -> Result<(f64, Marginals, ScoreGradients)> {
    let loss = soft_label_loss(scores, targets)?;
    let m = marginals(scores);
    let grads = gradients_from_marginals(scores, &m, targets);
    Ok((loss, m, grads))
}

/// MAP label sequence and its score. Ties resolve to the smallest label at
/// the final position and at every backtrack step.
pub fn viterbi_decode(scores: &ScoreSet) -> (Vec<usize>, f64) {
    let (t_len, k) = scores.emission.dim();
    let mut delta = scores.emission.row(0).to_vec();
    let mut next = vec![0.0; k];
    let mut back = Array2::<usize>::zeros((t_len, k));
    for t in 1..t_len {
        let trans = scores.transitions.at(t);
        for to in 0..k {
            let best = argmax((0..k).map(|from| delta[from] + trans[[from, to]]));
            back[[t, to]] = best;
            next[to] = delta[best] + trans[[best, to]] + scores.emission[[t, to]];
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let last = argmax(delta.iter().copied());
    let best_score = delta[last];
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[[t, path[t]]];
    }
    (path, best_score)
}

/// Position-wise argmax of the unary marginals, ties to the smallest label.
pub fn smoothing_decode(scores: &ScoreSet) -> Vec<usize> {
    decode_unary(&marginals(scores).unary)
}

pub(crate) fn decode_unary(unary: &Array2<f64>) -> Vec<usize> {
    unary.outer_iter().map(|row| argmax(row.iter().copied())).collect()
}
