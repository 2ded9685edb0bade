//! Brute-force enumeration over all `K^T` label sequences.
//!
//! Deliberately naive: every quantity is computed from its definition so the
//! dynamic programs in [`crate::crf`] have something independent to agree with.

use ndarray::{Array2, Array3};

use crate::crf::{Marginals, ScoreSet, SoftTargets};
use crate::error::{Error, Result};
use crate::numkernel::log_sum_exp;

/// Largest number of sequences the oracle will enumerate.
pub const MAX_SEQUENCES: u64 = 1_000_000;

fn guard(scores: &ScoreSet) -> Result<()> {
    let k = scores.num_labels();
    let t = scores.len();
    let total = (k as u64).checked_pow(t as u32);
    match total {
        Some(n) if n <= MAX_SEQUENCES => Ok(()),
        _ => Err(Error::TooLarge {
            k,
            t,
            limit: MAX_SEQUENCES,
        }),
    }
}

/// Every label sequence, ordered with the last position most significant so
/// that "first maximum wins" matches Viterbi's backtracking tie-break.
fn sequences(t: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = k.pow(t as u32);
    (0..total).map(move |mut n| {
        let mut y = vec![0; t];
        for slot in y.iter_mut() {
            *slot = n % k;
            n /= k;
        }
        y
    })
}

fn all_scores(scores: &ScoreSet) -> Vec<(Vec<usize>, f64)> {
    sequences(scores.len(), scores.num_labels())
        .map(|y| {
            let s = scores.sequence_score(&y).expect("enumerated labels are in range");
            (y, s)
        })
        .collect()
}

/// `log Σ_y exp s(y, x)` over every sequence.
pub fn brute_log_partition(scores: &ScoreSet) -> Result<f64> {
    guard(scores)?;
    let s: Vec<f64> = all_scores(scores).into_iter().map(|(_, s)| s).collect();
    log_sum_exp(&s)
}

/// `Σ_y q(y) log(q(y) / p(y))` over the support of the factorized target.
pub fn brute_kl_loss(scores: &ScoreSet, targets: &SoftTargets) -> Result<f64> {
    guard(scores)?;
    if targets.matrix().dim() != scores.emission().dim() {
        return Err(crate::error::contract("targets and scores disagree in shape"));
    }
    let log_z = brute_log_partition(scores)?;
    let q = targets.matrix();
    let mut kl = 0.0;
    for (y, s) in all_scores(scores) {
        let qy: f64 = y.iter().enumerate().map(|(t, &k)| q[[t, k]]).product();
        if qy == 0.0 {
            continue;
        }
        let log_p = s - log_z;
        kl += qy * (qy.ln() - log_p);
    }
    Ok(kl)
}

/// Unary and pairwise marginals by summing path probabilities.
pub fn brute_marginals(scores: &ScoreSet) -> Result<Marginals> {
    guard(scores)?;
    let (t_len, k) = scores.emission().dim();
    let log_z = brute_log_partition(scores)?;
    let mut unary = Array2::zeros((t_len, k));
    let mut pairwise = Array3::zeros((t_len.saturating_sub(1), k, k));
    for (y, s) in all_scores(scores) {
        let p = (s - log_z).exp();
        for t in 0..t_len {
            unary[[t, y[t]]] += p;
            if t > 0 {
                pairwise[[t - 1, y[t - 1], y[t]]] += p;
            }
        }
    }
    Ok(Marginals {
        log_z,
        unary,
        pairwise,
    })
}

/// Highest-scoring sequence and its score.
pub fn brute_map(scores: &ScoreSet) -> Result<(Vec<usize>, f64)> {
    guard(scores)?;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (y, s) in all_scores(scores) {
        match &best {
            Some((_, b)) if s <= *b => {}
            _ => best = Some((y, s)),
        }
    }
    Ok(best.expect("at least one sequence"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::Transitions;
    use ndarray::array;

    const LN2: f64 = std::f64::consts::LN_2;

    fn reference() -> ScoreSet {
        ScoreSet::new(
            array![[0.0, LN2], [0.0, 0.0]],
            Transitions::Shared(array![[LN2, 0.0], [0.0, LN2]]),
        )
        .unwrap()
    }

    #[test]
    fn partition() {
        assert!((brute_log_partition(&reference()).unwrap() - 9f64.ln()).abs() < 1e-14);
        let one = ScoreSet::without_transitions(array![[0.0, 0.0]]).unwrap();
        assert!((brute_log_partition(&one).unwrap() - LN2).abs() < 1e-15);
    }

    #[test]
    fn kl() {
        let q = SoftTargets::new(array![[0.5, 0.5], [1.0, 0.0]]).unwrap();
        let l = brute_kl_loss(&reference(), &q).unwrap();
        assert!((l - (9.0f64 / 4.0).ln()).abs() < 1e-14);

        let qm = array![[0.1, 0.9], [0.5, 0.5]];
        let s = ScoreSet::without_transitions(qm.mapv(f64::ln)).unwrap();
        assert!(brute_kl_loss(&s, &SoftTargets::new(qm).unwrap()).unwrap().abs() < 1e-14);
    }

    #[test]
    fn marginals() {
        let m = brute_marginals(&reference()).unwrap();
        assert!((m.unary[[0, 0]] - 1.0 / 3.0).abs() < 1e-14);
        assert!((m.unary[[0, 1]] - 2.0 / 3.0).abs() < 1e-14);
        for row in m.unary.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-14);
        }
        let zeros = ScoreSet::without_transitions(Array2::zeros((3, 2))).unwrap();
        let m = brute_marginals(&zeros).unwrap();
        assert!(m.unary.iter().all(|p| (p - 0.5).abs() < 1e-14));
    }

    #[test]
    fn map() {
        let (y, s) = brute_map(&reference()).unwrap();
        assert_eq!(y, vec![1, 1]);
        assert!((s - 4f64.ln()).abs() < 1e-15);
        let zeros = ScoreSet::without_transitions(Array2::zeros((2, 3))).unwrap();
        assert_eq!(brute_map(&zeros).unwrap().0, vec![0, 0]);
    }

    #[test]
    fn size_guard() {
        let big = ScoreSet::without_transitions(Array2::zeros((7, 8))).unwrap();
        assert!(matches!(brute_log_partition(&big), Err(Error::TooLarge { .. })));
        assert!(brute_map(&big).is_err());
        let ok = ScoreSet::without_transitions(Array2::zeros((6, 10))).unwrap();
        assert!(brute_log_partition(&ok).is_ok());
    }
}
