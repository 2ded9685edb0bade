//! Differential testing of the dynamic programs against enumeration and
//! finite differences on seeded random score sets.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::crf::{self, ScoreSet, SoftTargets, Transitions};
use crate::error::Result;
use crate::oracle;

/// Tolerance for dynamic program versus enumeration.
pub const ORACLE_TOL: f64 = 1e-9;
/// Tolerance for analytic versus central finite-difference derivatives.
pub const FD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-4;
/// Initial relative step for the `dZ/dα` check; see [`lemma_fd_error`].
pub const LEMMA_STEP: f64 = 0.5;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(b.abs()).max(floor)
}

/// Relative error with a unit floor, so quantities near zero are compared
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1.0)
}

/// Scores drawn i.i.d. from `N(0, std²)`; per-step transitions when
/// `per_step`, otherwise one shared matrix.
pub fn random_scores<R: Rng>(rng: &mut R, t: usize, k: usize, std: f64, per_step: bool) -> ScoreSet {
    let normal = Normal::new(0.0, std).expect("positive std");
    let emission = Array2::from_shape_simple_fn((t, k), || normal.sample(rng));
    let transitions = if per_step {
        Transitions::PerStep(Array3::from_shape_simple_fn((t - 1, k, k), || normal.sample(rng)))
    } else {
        Transitions::Shared(Array2::from_shape_simple_fn((k, k), || normal.sample(rng)))
    };
    ScoreSet::new(emission, transitions).expect("finite random scores")
}

/// Random target rows; each entry is zero with probability `zero_prob`,
/// and every row keeps at least one positive entry.
pub fn random_targets<R: Rng>(rng: &mut R, t: usize, k: usize, zero_prob: f64) -> SoftTargets {
    let mut q = Array2::zeros((t, k));
    for mut row in q.rows_mut() {
        for v in row.iter_mut() {
            if !rng.gen_bool(zero_prob) {
                *v = rng.gen_range(0.05..1.0);
            }
        }
        if row.iter().all(|v| *v == 0.0) {
            let j = rng.gen_range(0..k);
            row[j] = 1.0;
        }
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    SoftTargets::new(q).expect("normalized rows")
}

/// Worst discrepancies seen over a batch of trials.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CheckReport {
    pub trials: usize,
    pub log_partition: f64,
    pub soft_loss: f64,
    pub unary: f64,
    pub pairwise: f64,
    pub viterbi_score: f64,
    pub viterbi_path_mismatches: usize,
    pub hard_vs_one_hot: f64,
    pub min_soft_loss: f64,
    pub gradient_fd: f64,
    pub lemma_fd: f64,
}

impl CheckReport {
    pub fn oracle_max(&self) -> f64 {
        self.log_partition
            .max(self.soft_loss)
            .max(self.unary)
            .max(self.pairwise)
            .max(self.viterbi_score)
    }

    /// `(name, worst value, tolerance, pass)` per check.
    pub fn lines(&self) -> Vec<(&'static str, f64, f64, bool)> {
        let row = |name, v: f64, tol: f64| (name, v, tol, v <= tol);
        vec![
            row("log_partition vs oracle", self.log_partition, ORACLE_TOL),
            row("soft_label_loss vs oracle", self.soft_loss, ORACLE_TOL),
            row("unary marginals vs oracle", self.unary, ORACLE_TOL),
            row("pairwise marginals vs oracle", self.pairwise, ORACLE_TOL),
            row("viterbi score vs oracle", self.viterbi_score, ORACLE_TOL),
            row("viterbi path mismatches", self.viterbi_path_mismatches as f64, 0.0),
            row("hard loss vs one-hot soft loss", self.hard_vs_one_hot, ORACLE_TOL),
            row("negative KL (max of -loss)", -self.min_soft_loss.min(0.0), ORACLE_TOL),
            row("gradients vs finite differences", self.gradient_fd, FD_TOL),
            row("dZ/dalpha vs beta", self.lemma_fd, FD_TOL),
        ]
    }

    pub fn passed(&self) -> bool {
        self.lines().iter().all(|l| l.3)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub trials: usize,
    pub max_t: usize,
    pub max_k: usize,
    pub seed: u64,
    pub score_std: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            trials: 200,
            max_t: 5,
            max_k: 5,
            seed: 0,
            score_std: 2.0,
        }
    }
}

/// Largest relative error between analytic score gradients and central
/// differences of [`crf::soft_label_loss`].
pub fn gradient_fd_error(scores: &ScoreSet, targets: &SoftTargets, step: f64) -> Result<f64> {
    let analytic = crf::soft_label_gradients(scores, targets)?;
    let loss_at = |s: &ScoreSet| crf::soft_label_loss(s, targets);
    let mut worst: f64 = 0.0;
    let (t_len, k) = scores.emission().dim();
    for t in 0..t_len {
        for y in 0..k {
            let mut plus = scores.clone();
            plus.emission_mut()[[t, y]] += step;
            let mut minus = scores.clone();
            minus.emission_mut()[[t, y]] -= step;
            let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * step);
            worst = worst.max(rel_err(analytic.d_emission[[t, y]], fd));
        }
    }
    let bump = |s: &mut ScoreSet, slice: usize, j: usize, y: usize, d: f64| match s.transitions_mut() {
        Transitions::Shared(m) => m[[j, y]] += d,
        Transitions::PerStep(a) => a[[slice, j, y]] += d,
    };
    let slices = match scores.transitions() {
        Transitions::Shared(_) => 1,
        Transitions::PerStep(a) => a.dim().0,
    };
    for slice in 0..slices {
        for j in 0..k {
            for y in 0..k {
                let mut plus = scores.clone();
                bump(&mut plus, slice, j, y, step);
                let mut minus = scores.clone();
                bump(&mut minus, slice, j, y, -step);
                let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * step);
                let an = match &analytic.d_transition {
                    Transitions::Shared(m) => m[[j, y]],
                    Transitions::PerStep(a) => a[[slice, j, y]],
                };
                worst = worst.max(rel_err(an, fd));
            }
        }
    }
    Ok(worst)
}

/// Largest relative error between `β[t][k]` and a finite difference of `Z`
/// with respect to the forward variable `α[t][k]`, both in linear space.
///
/// `Z` is linear in each forward variable, so a forward difference carries
/// no truncation error and the step only has to beat rounding: a first
/// difference at relative step `rel_step` estimates the marginal `m`, and the
/// reported one uses step `max(rel_step, 1/m)` so that `Z` moves by O(1).
/// Both sides are divided by `Z / α[t][k]` so nothing overflows.
pub fn lemma_fd_error(scores: &ScoreSet, rel_step: f64) -> Result<f64> {
    let fb = crf::forward_backward(scores);
    let (t_len, k) = scores.emission().dim();
    let mut worst: f64 = 0.0;
    for t in 0..t_len {
        let row: Vec<f64> = fb.log_alpha.row(t).to_vec();
        // (Z(α(1+h)) - Z) / h · α / Z
        let scaled_diff = |y: usize, h: f64| -> Result<f64> {
            let mut up = row.clone();
            up[y] += h.ln_1p();
            Ok((crf::log_partition_from(scores, t, &up)? - fb.log_z).exp_m1() / h)
        };
        for y in 0..k {
            let rough = scaled_diff(y, rel_step)?;
            let h = if rough > 0.0 { rel_step.max(1.0 / rough) } else { rel_step };
            let fd_scaled = scaled_diff(y, h)?;
            // β · α / Z
            let exact_scaled = (fb.log_beta[[t, y]] + row[y] - fb.log_z).exp();
            worst = worst.max(rel_err_floor(fd_scaled, exact_scaled, 1e-12));
        }
    }
    Ok(worst)
}

/// Runs every check on `cfg.trials` random instances.
pub fn run_check(cfg: &CheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rep = CheckReport {
        min_soft_loss: f64::INFINITY,
        ..CheckReport::default()
    };
    for trial in 0..cfg.trials {
        let t = rng.gen_range(1..=cfg.max_t.max(1));
        let k = rng.gen_range(1..=cfg.max_k.max(1));
        let per_step = t > 1 && trial % 2 == 1;
        let scores = random_scores(&mut rng, t, k, cfg.score_std, per_step);
        let targets = random_targets(&mut rng, t, k, 0.3);

        let log_z = crf::forward_log_partition(&scores);
        rep.log_partition = rep.log_partition.max(rel_err(log_z, oracle::brute_log_partition(&scores)?));

        let loss = crf::soft_label_loss(&scores, &targets)?;
        rep.soft_loss = rep.soft_loss.max(rel_err(loss, oracle::brute_kl_loss(&scores, &targets)?));
        rep.min_soft_loss = rep.min_soft_loss.min(loss);

        let m = crf::marginals(&scores);
        let bm = oracle::brute_marginals(&scores)?;
        for (a, b) in m.unary.iter().zip(bm.unary.iter()) {
            rep.unary = rep.unary.max(rel_err(*a, *b));
        }
        for (a, b) in m.pairwise.iter().zip(bm.pairwise.iter()) {
            rep.pairwise = rep.pairwise.max(rel_err(*a, *b));
        }

        let (path, score) = crf::viterbi_decode(&scores);
        let (bpath, bscore) = oracle::brute_map(&scores)?;
        rep.viterbi_score = rep.viterbi_score.max(rel_err(score, bscore));
        if path != bpath {
            rep.viterbi_path_mismatches += 1;
        }

        let gold: Vec<usize> = (0..t).map(|_| rng.gen_range(0..k)).collect();
        let hard = crf::hard_label_loss(&scores, &gold)?;
        let one_hot = crf::soft_label_loss(&scores, &SoftTargets::one_hot(&gold, k)?)?;
        rep.hard_vs_one_hot = rep.hard_vs_one_hot.max(rel_err(hard, one_hot));

        rep.gradient_fd = rep.gradient_fd.max(gradient_fd_error(&scores, &targets, FD_STEP)?);
        rep.lemma_fd = rep.lemma_fd.max(lemma_fd_error(&scores, LEMMA_STEP)?);
        rep.trials += 1;
    }
    if rep.trials == 0 {
        rep.min_soft_loss = 0.0;
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floors() {
        assert_eq!(rel_err(1e-12, 0.0), 1e-12);
        assert_eq!(rel_err(200.0, 100.0), 0.5);
        assert_eq!(rel_err_floor(2e-6, 1e-6, 1e-12), 0.5);
    }

    #[test]
    fn random_targets_keep_zeros_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut saw_zero = false;
        for _ in 0..50 {
            let q = random_targets(&mut rng, 3, 4, 0.5);
            saw_zero |= q.matrix().iter().any(|v| *v == 0.0);
        }
        assert!(saw_zero);
    }

    #[test]
    fn small_check_passes() {
        let rep = run_check(&CheckConfig {
            trials: 20,
            ..CheckConfig::default()
        })
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.trials, 20);
    }
}
