//! Bradley–Terry maximum-likelihood fit over pairwise win counts.
//!
//! The model says `P(i beats j) = exp(s_i) / (exp(s_i) + exp(s_j))`. Scores are fitted
//! with the minorization–maximization update
//!
//! ```text
//! g_i <- W_i / sum_{j != i} N_ij / (g_i + g_j)
//! ```
//!
//! where `g = exp(s)`, `W_i` is the (pseudo-count augmented) number of wins of `i`
//! and `N_ij` the number of comparisons between `i` and `j`. Every update increases
//! the log-likelihood. After each sweep `g` is rescaled to sum to one, which makes
//! `p_hat == exp(s)` and fixes the additive gauge of `s`. Each sweep is followed by a
//! safeguarded Newton step, which keeps iteration counts small on lopsided data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ActionLabel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BtError {
    #[error("empty action set")]
    EmptyActionSet,
    #[error("invalid count matrix: {0}")]
    InvalidCounts(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("comparison graph is degenerate; the unregularized MLE is unbounded or not unique")]
    DegenerateGraph,
    #[error("no convergence after {max_iters} iterations")]
    NotConverged {
        max_iters: usize,
        best: Box<BtScores>,
    },
}

/// Square win-count matrix over an ordered action list; `wins(i, j)` is the number of
/// times `i` was preferred over `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceCounts {
    actions: Vec<ActionLabel>,
    wins: Vec<u64>,
}

impl PreferenceCounts {
    pub fn new(actions: Vec<ActionLabel>, wins: Vec<Vec<u64>>) -> Result<Self, BtError> {
        let n = actions.len();
        if wins.len() != n || wins.iter().any(|row| row.len() != n) {
            return Err(BtError::InvalidCounts(format!("expected a {n}x{n} matrix")));
        }
        if (0..n).any(|i| wins[i][i] != 0) {
            return Err(BtError::InvalidCounts("non-zero diagonal".into()));
        }
        Ok(Self {
            actions,
            wins: wins.into_iter().flatten().collect(),
        })
    }

    /// Counts over placeholder labels `item 0`, `item 1`, ...
    pub fn unlabeled(wins: Vec<Vec<u64>>) -> Result<Self, BtError> {
        let actions = (0..wins.len())
            .map(|i| crate::model::canonicalize_label(&format!("item {i}")).expect("non-empty"))
            .collect();
        Self::new(actions, wins)
    }

    /// All-zero counts over `actions`.
    pub fn zeros(actions: Vec<ActionLabel>) -> Self {
        let n = actions.len();
        Self {
            actions,
            wins: vec![0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[ActionLabel] {
        &self.actions
    }

    pub fn wins(&self, i: usize, j: usize) -> u64 {
        self.wins[i * self.len() + j]
    }

    pub fn add_wins(&mut self, winner: usize, loser: usize, count: u64) {
        assert_ne!(winner, loser, "self-comparison");
        let n = self.len();
        self.wins[winner * n + loser] += count;
    }

    /// Same counts with indices relabelled: new index `k` holds old index `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        assert_eq!(perm.len(), n);
        let actions = perm.iter().map(|&p| self.actions[p].clone()).collect();
        let mut wins = vec![0; n * n];
        for a in 0..n {
            for b in 0..n {
                wins[a * n + b] = self.wins(perm[a], perm[b]);
            }
        }
        Self { actions, wins }
    }

    /// True when every action can reach every other along "beat" edges.
    fn strongly_connected(&self) -> bool {
        let n = self.len();
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![0];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for (j, s) in seen.iter_mut().enumerate() {
                    let w = if forward {
                        self.wins(i, j)
                    } else {
                        self.wins(j, i)
                    };
                    if w > 0 && !*s {
                        *s = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BtConfig {
    /// Pseudo-count added to every off-diagonal cell.
    pub epsilon: f64,
    /// Convergence threshold on the max absolute change of `s` in one sweep.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            tol: 1e-8,
            max_iters: 1000,
        }
    }
}

impl BtConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), BtError> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(BtError::InvalidConfig(
                "epsilon must be finite and >= 0".into(),
            ));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(BtError::InvalidConfig("tol must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(BtError::InvalidConfig("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtScores {
    pub actions: Vec<ActionLabel>,
    /// Latent utilities, normalized so that `sum(exp(s)) == 1`.
    pub s: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub iterations: usize,
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn scores_from_strengths(c: &PreferenceCounts, g: &[f64], iterations: usize) -> BtScores {
    let s: Vec<f64> = g.iter().map(|x| x.ln()).collect();
    let p_hat = softmax(&s);
    BtScores {
        actions: c.actions.clone(),
        s,
        p_hat,
        iterations,
    }
}

pub fn fit_bradley_terry(c: &PreferenceCounts, cfg: &BtConfig) -> Result<BtScores, BtError> {
    cfg.validate()?;
    let n = c.len();
    if n == 0 {
        return Err(BtError::EmptyActionSet);
    }
    if n == 1 {
        return Ok(BtScores {
            actions: c.actions.clone(),
            s: vec![0.0],
            p_hat: vec![1.0],
            iterations: 0,
        });
    }
    let eps = cfg.epsilon;
    if eps == 0.0 && !c.strongly_connected() {
        return Err(BtError::DegenerateGraph);
    }

    let total_wins: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| c.wins(i, j) as f64 + eps)
                .sum()
        })
        .collect();
    let comparisons = |i: usize, j: usize| (c.wins(i, j) + c.wins(j, i)) as f64 + 2.0 * eps;

    let mut g = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for iter in 1..=cfg.max_iters {
        for i in 0..n {
            let denom: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let nij = comparisons(i, j);
                    if nij == 0.0 {
                        0.0
                    } else {
                        nij / (g[i] + g[j])
                    }
                })
                .sum();
            next[i] = total_wins[i] / denom;
        }
        let total: f64 = next.iter().sum();
        for x in next.iter_mut() {
            *x /= total;
        }
        newton_polish(c, eps, &mut next);
        let mut max_delta = 0.0f64;
        for i in 0..n {
            max_delta = max_delta.max((next[i].ln() - g[i].ln()).abs());
            g[i] = next[i];
        }
        if max_delta < cfg.tol {
            return Ok(scores_from_strengths(c, &g, iter));
        }
    }
    Err(BtError::NotConverged {
        max_iters: cfg.max_iters,
        best: Box::new(scores_from_strengths(c, &g, cfg.max_iters)),
    })
}

/// One damped Newton step on the log-likelihood starting from the MM iterate `g`
/// (normalized strengths). MM alone slows to a linear crawl when one action wins
/// nearly every comparison; the Newton step restores fast local convergence. The step
/// is kept only if it does not lower the likelihood beyond rounding noise.
fn newton_polish(c: &PreferenceCounts, eps: f64, g: &mut [f64]) {
    let n = g.len();
    let s: Vec<f64> = g.iter().map(|x| x.ln()).collect();
    let grad = bt_gradient(c, &s, eps);
    // Negative Hessian is a weighted graph Laplacian; pinning s_0 makes it positive
    // definite whenever the comparison graph is connected.
    let m = n - 1;
    let mut a = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let nij = (c.wins(i, j) + c.wins(j, i)) as f64 + 2.0 * eps;
            let p = sigmoid(s[i] - s[j]);
            let h = nij * p * (1.0 - p);
            if i > 0 {
                a[(i - 1) * m + (i - 1)] += h;
                if j > 0 {
                    a[(i - 1) * m + (j - 1)] -= h;
                }
            }
        }
    }
    let mut b: Vec<f64> = grad[1..].to_vec();
    let Some(()) = cholesky_solve(&mut a, &mut b, m) else {
        return;
    };
    let base = bt_log_likelihood(c, &s, eps);
    let mut t = 1.0;
    for _ in 0..30 {
        let mut trial = s.clone();
        for i in 1..n {
            trial[i] += t * b[i - 1];
        }
        let ll = bt_log_likelihood(c, &trial, eps);
        // Near the optimum both values agree to rounding; allow that much slack.
        if ll.is_finite() && ll >= base - 1e-12 * base.abs().max(1.0) {
            let p = softmax(&trial);
            if p.iter().all(|&x| x > 0.0) {
                g.copy_from_slice(&p);
            }
            return;
        }
        t *= 0.5;
    }
}

/// Solves `A x = b` in place for symmetric positive definite `A` (row-major, `m x m`).
fn cholesky_solve(a: &mut [f64], b: &mut [f64], m: usize) -> Option<()> {
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        let d = d.sqrt();
        a[j * m + j] = d;
        for i in (j + 1)..m {
            let mut v = a[i * m + j];
            for k in 0..j {
                v -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = v / d;
        }
    }
    for i in 0..m {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * m + k] * b[k];
        }
        b[i] = v / a[i * m + i];
    }
    for i in (0..m).rev() {
        let mut v = b[i];
        for k in (i + 1)..m {
            v -= a[k * m + i] * b[k];
        }
        b[i] = v / a[i * m + i];
    }
    Some(())
}

/// `ln(sigmoid(x))`, stable for large `|x|`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sum_{i != j} (w_ij + eps) * ln(sigmoid(s_i - s_j))`.
pub fn bt_log_likelihood(c: &PreferenceCounts, s: &[f64], epsilon: f64) -> f64 {
    let n = c.len();
    assert_eq!(s.len(), n);
    let mut ll = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = c.wins(i, j) as f64 + epsilon;
            if w != 0.0 {
                ll += w * log_sigmoid(s[i] - s[j]);
            }
        }
    }
    ll
}

/// Analytic gradient of [`bt_log_likelihood`] with respect to `s`.
pub fn bt_gradient(c: &PreferenceCounts, s: &[f64], epsilon: f64) -> Vec<f64> {
    let n = c.len();
    assert_eq!(s.len(), n);
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let wij = c.wins(i, j) as f64 + epsilon;
                    let wji = c.wins(j, i) as f64 + epsilon;
                    wij * sigmoid(s[j] - s[i]) - wji * sigmoid(s[i] - s[j])
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_items_closed_form() {
        let c = PreferenceCounts::unlabeled(vec![vec![0, 3], vec![1, 0]]).unwrap();
        let fit = fit_bradley_terry(&c, &BtConfig::with_epsilon(0.0)).unwrap();
        assert_abs_diff_eq!(fit.p_hat[0], 0.75, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.p_hat[1], 0.25, epsilon = 1e-6);

        // 1-D grid search on s1 - s2 as an independent check of the optimum.
        let ll = |d: f64| 3.0 * log_sigmoid(d) + log_sigmoid(-d);
        let best = (-10_000..=10_000)
            .map(|i| i as f64 * 1e-3)
            .max_by(|a, b| ll(*a).total_cmp(&ll(*b)))
            .unwrap();
        assert_abs_diff_eq!(fit.s[0] - fit.s[1], best, epsilon = 1e-3);
        assert_abs_diff_eq!(best, 3f64.ln(), epsilon = 1e-3);
    }

    #[test]
    fn singleton() {
        let c = PreferenceCounts::unlabeled(vec![vec![0]]).unwrap();
        let fit = fit_bradley_terry(&c, &BtConfig::default()).unwrap();
        assert_eq!(fit.p_hat, vec![1.0]);
        let fit = fit_bradley_terry(&c, &BtConfig::with_epsilon(0.0)).unwrap();
        assert_eq!(fit.p_hat, vec![1.0]);
    }

    #[test]
    fn degenerate_without_pseudo_counts() {
        let c =
            PreferenceCounts::unlabeled(vec![vec![0, 2, 2], vec![0, 0, 2], vec![0, 0, 0]]).unwrap();
        assert_eq!(
            fit_bradley_terry(&c, &BtConfig::with_epsilon(0.0)),
            Err(BtError::DegenerateGraph)
        );
        // Every node has a win and a loss but {2,3} cannot reach {0,1}.
        let c = PreferenceCounts::unlabeled(vec![
            vec![0, 1, 1, 0],
            vec![1, 0, 0, 0],
            vec![0, 0, 0, 1],
            vec![0, 0, 1, 0],
        ])
        .unwrap();
        assert_eq!(
            fit_bradley_terry(&c, &BtConfig::with_epsilon(0.0)),
            Err(BtError::DegenerateGraph)
        );
        assert!(fit_bradley_terry(&c, &BtConfig::default()).is_ok());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            PreferenceCounts::unlabeled(vec![vec![1, 0], vec![0, 0]]),
            Err(BtError::InvalidCounts(_))
        ));
        assert!(matches!(
            PreferenceCounts::unlabeled(vec![vec![0, 0], vec![0]]),
            Err(BtError::InvalidCounts(_))
        ));
        let c = PreferenceCounts::unlabeled(vec![vec![0, 1], vec![1, 0]]).unwrap();
        let cfg = BtConfig {
            tol: 0.0,
            ..BtConfig::default()
        };
        assert!(matches!(
            fit_bradley_terry(&c, &cfg),
            Err(BtError::InvalidConfig(_))
        ));
        let empty = PreferenceCounts::zeros(vec![]);
        assert_eq!(
            fit_bradley_terry(&empty, &BtConfig::default()),
            Err(BtError::EmptyActionSet)
        );
    }

    #[test]
    fn not_converged_carries_best_iterate() {
        let c =
            PreferenceCounts::unlabeled(vec![vec![0, 3, 1], vec![1, 0, 2], vec![2, 1, 0]]).unwrap();
        let cfg = BtConfig {
            max_iters: 1,
            ..BtConfig::default()
        };
        match fit_bradley_terry(&c, &cfg) {
            Err(BtError::NotConverged { max_iters, best }) => {
                assert_eq!(max_iters, 1);
                assert_abs_diff_eq!(best.p_hat.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn log_likelihood_values() {
        let c = PreferenceCounts::unlabeled(vec![vec![0, 1], vec![1, 0]]).unwrap();
        assert_abs_diff_eq!(
            bt_log_likelihood(&c, &[0.0, 0.0], 0.0),
            2.0 * 0.5f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            bt_log_likelihood(&c, &[0.0, 0.0], 0.0),
            -1.3863,
            epsilon = 1e-4
        );
        let z = PreferenceCounts::unlabeled(vec![vec![0, 0], vec![0, 0]]).unwrap();
        assert_eq!(bt_log_likelihood(&z, &[0.3, -2.0], 0.0), 0.0);

        let c =
            PreferenceCounts::unlabeled(vec![vec![0, 2, 0], vec![1, 0, 4], vec![3, 0, 0]]).unwrap();
        let s = [0.2, -0.7, 1.1];
        let shifted: Vec<f64> = s.iter().map(|x| x + 5.0).collect();
        assert_abs_diff_eq!(
            bt_log_likelihood(&c, &s, 0.01),
            bt_log_likelihood(&c, &shifted, 0.01),
            epsilon = 1e-12
        );
    }

    #[test]
    fn fitted_point_is_stationary_and_normalized() {
        let c = PreferenceCounts::unlabeled(vec![
            vec![0, 3, 0, 1],
            vec![1, 0, 2, 0],
            vec![0, 1, 0, 5],
            vec![2, 0, 0, 0],
        ])
        .unwrap();
        let fit = fit_bradley_terry(&c, &BtConfig::default()).unwrap();
        assert_abs_diff_eq!(fit.p_hat.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        for (p, s) in fit.p_hat.iter().zip(&fit.s) {
            assert_abs_diff_eq!(*p, s.exp(), epsilon = 1e-9);
        }
        let grad = bt_gradient(&c, &fit.s, 0.01);
        assert!(grad.iter().all(|g| g.abs() < 1e-5), "{grad:?}");
        let base = bt_log_likelihood(&c, &fit.s, 0.01);
        for i in 0..c.len() {
            for delta in [-1e-3, 1e-3] {
                let mut s = fit.s.clone();
                s[i] += delta;
                assert!(bt_log_likelihood(&c, &s, 0.01) <= base);
            }
        }
    }

    #[test]
    fn permutation_relabels_scores() {
        let c =
            PreferenceCounts::unlabeled(vec![vec![0, 3, 1], vec![0, 0, 2], vec![1, 1, 0]]).unwrap();
        let perm = [2, 0, 1];
        let a = fit_bradley_terry(&c, &BtConfig::default()).unwrap();
        let b = fit_bradley_terry(&c.permuted(&perm), &BtConfig::default()).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_abs_diff_eq!(b.p_hat[k], a.p_hat[p], epsilon = 1e-7);
            assert_eq!(b.actions[k], a.actions[p]);
        }
    }
}
