//! Anchor sampling and anchor pseudo-inverse completion.
//!
//! Given estimates on `Omega = (S# x A) u (S x A#)`, the completion is
//! `Qbar(s, a) = Qhat(s, A#) [Qhat(S#, A#)]^+ Qhat(S#, a)` with a rank-`d`
//! truncated pseudo-inverse.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{numerical_rank, pseudo_inverse, PinvMode, SortedSvd, SpectralReport, RANK_TOL};

pub const DEFAULT_MAX_ANCHOR_RETRIES: usize = 16;

/// Anchor states `S#`, anchor actions `A#` and the inclusion probabilities
/// they were drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPlan {
    n_states: usize,
    n_actions: usize,
    s_anchor: Vec<usize>,
    a_anchor: Vec<usize>,
    p1: f64,
    p2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorPlanRecord {
    s_anchor: Vec<usize>,
    a_anchor: Vec<usize>,
    p1: f64,
    p2: f64,
}

impl AnchorPlan {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        mut s_anchor: Vec<usize>,
        mut a_anchor: Vec<usize>,
        p1: f64,
        p2: f64,
    ) -> Result<Self> {
        check_probability("p1", p1)?;
        check_probability("p2", p2)?;
        for (name, set, n) in [("state", &mut s_anchor, n_states), ("action", &mut a_anchor, n_actions)] {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::InvalidArgument(format!("empty anchor {name} set")));
            }
            if let Some(&bad) = set.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange(format!("anchor {name} {bad} >= {n}")));
            }
        }
        Ok(AnchorPlan {
            n_states,
            n_actions,
            s_anchor,
            a_anchor,
            p1,
            p2,
        })
    }

    /// Every state and action is an anchor; `Omega = S x A`.
    pub fn full(n_states: usize, n_actions: usize) -> Self {
        AnchorPlan {
            n_states,
            n_actions,
            s_anchor: (0..n_states).collect(),
            a_anchor: (0..n_actions).collect(),
            p1: 1.0,
            p2: 1.0,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn s_anchor(&self) -> &[usize] {
        &self.s_anchor
    }

    pub fn a_anchor(&self) -> &[usize] {
        &self.a_anchor
    }

    pub fn p1(&self) -> f64 {
        self.p1
    }

    pub fn p2(&self) -> f64 {
        self.p2
    }

    /// `|S#||A| + |S||A#| - |S#||A#|`.
    pub fn omega_size(&self) -> usize {
        let (ns, na) = (self.s_anchor.len(), self.a_anchor.len());
        ns * self.n_actions + self.n_states * na - ns * na
    }

    pub fn is_anchor_state(&self, s: usize) -> bool {
        self.s_anchor.binary_search(&s).is_ok()
    }

    pub fn is_anchor_action(&self, a: usize) -> bool {
        self.a_anchor.binary_search(&a).is_ok()
    }

    pub fn contains(&self, s: usize, a: usize) -> bool {
        self.is_anchor_state(s) || self.is_anchor_action(a)
    }

    /// Cells of `Omega` in row-major order.
    pub fn omega_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::with_capacity(self.omega_size());
        for s in 0..self.n_states {
            if self.is_anchor_state(s) {
                cells.extend((0..self.n_actions).map(|a| (s, a)));
            } else {
                cells.extend(self.a_anchor.iter().map(|&a| (s, a)));
            }
        }
        cells
    }

    /// Splits a matrix defined on `Omega` (entries elsewhere ignored) into
    /// the `S# x A` and `S x A#` blocks.
    pub fn blocks(&self, q: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (q.select_rows(&self.s_anchor), q.select_columns(&self.a_anchor))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&AnchorPlanRecord {
            s_anchor: self.s_anchor.clone(),
            a_anchor: self.a_anchor.clone(),
            p1: self.p1,
            p2: self.p2,
        })?)
    }

    pub fn from_json(text: &str, n_states: usize, n_actions: usize) -> Result<Self> {
        let rec: AnchorPlanRecord = serde_json::from_str(text)?;
        AnchorPlan::new(n_states, n_actions, rec.s_anchor, rec.a_anchor, rec.p1, rec.p2)
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name}={p} must lie in (0, 1]")))
    }
}

/// Independent Bernoulli(`p1`) states and Bernoulli(`p2`) actions,
/// redrawing both sets while either is empty.
pub fn sample_anchors<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    p1: f64,
    p2: f64,
    max_retries: usize,
    rng: &mut R,
) -> Result<AnchorPlan> {
    check_probability("p1", p1)?;
    check_probability("p2", p2)?;
    for _ in 0..=max_retries {
        let s_anchor: Vec<usize> = (0..n_states).filter(|_| rng.random::<f64>() < p1).collect();
        let a_anchor: Vec<usize> = (0..n_actions).filter(|_| rng.random::<f64>() < p2).collect();
        if !s_anchor.is_empty() && !a_anchor.is_empty() {
            return Ok(AnchorPlan {
                n_states,
                n_actions,
                s_anchor,
                a_anchor,
                p1,
                p2,
            });
        }
    }
    Err(Error::EmptyAnchorSet { retries: max_retries })
}

/// `mu d ln(n) / (320 n)`, clipped to at most 1.
pub fn default_anchor_probability(mu: f64, d: usize, n: usize) -> Result<f64> {
    let p = mu * d as f64 * (n as f64).ln() / (320.0 * n as f64);
    if p.is_nan() || p <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "anchor probability for mu={mu}, d={d}, n={n} is not positive"
        )));
    }
    Ok(p.min(1.0))
}

/// Result of [`anchor_complete`].
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub matrix: DMatrix<f64>,
    /// Numerical rank of `Qhat(S#, A#)` at the default relative tolerance.
    pub sub_rank: usize,
    pub rank_deficient: bool,
    pub sigma_d_sub: f64,
}

/// `Qhat(., A#) [Qhat(S#, A#)]^+_d Qhat(S#, .)`.
///
/// `rows` is `Qhat(S#, A)` and `cols` is `Qhat(S, A#)`; they must agree on
/// the anchor intersection.
pub fn anchor_complete(rows: &DMatrix<f64>, cols: &DMatrix<f64>, plan: &AnchorPlan, d: usize) -> Result<Completion> {
    let (ns, na) = (plan.s_anchor.len(), plan.a_anchor.len());
    if rows.shape() != (ns, plan.n_actions) || cols.shape() != (plan.n_states, na) {
        return Err(Error::DimensionMismatch(format!(
            "blocks {:?} and {:?} do not match plan ({ns}x{}, {}x{na})",
            rows.shape(),
            cols.shape(),
            plan.n_actions,
            plan.n_states
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("completion rank d must be positive".into()));
    }
    for (i, &s) in plan.s_anchor.iter().enumerate() {
        for (j, &a) in plan.a_anchor.iter().enumerate() {
            let (r, c) = (rows[(i, a)], cols[(s, j)]);
            if (r - c).abs() > 1e-12 * r.abs().max(c.abs()).max(1.0) {
                return Err(Error::InconsistentBlocks {
                    state: s,
                    action: a,
                    row_value: r,
                    col_value: c,
                });
            }
        }
    }
    let sub = rows.select_columns(&plan.a_anchor);
    let svd = SortedSvd::new(&sub);
    let sub_rank = svd.rank(RANK_TOL);
    let matrix = cols * pseudo_inverse(&sub, PinvMode::Rank(d)) * rows;
    Ok(Completion {
        matrix,
        sub_rank,
        rank_deficient: sub_rank < d,
        sigma_d_sub: svd.sigma(d),
    })
}

/// Completion from the `Omega` entries of a full matrix.
pub fn complete_from_full(q: &DMatrix<f64>, plan: &AnchorPlan, d: usize) -> Result<Completion> {
    if q.shape() != (plan.n_states, plan.n_actions) {
        return Err(Error::DimensionMismatch(format!(
            "matrix {:?} vs plan {}x{}",
            q.shape(),
            plan.n_states,
            plan.n_actions
        )));
    }
    let (rows, cols) = plan.blocks(q);
    anchor_complete(&rows, &cols, plan, d)
}

/// `6 sqrt(2) rho + 2 (1 + sqrt(5)) rho^2`.
pub fn c_prime_from_ratio(rho: f64) -> f64 {
    6.0 * 2f64.sqrt() * rho + 2.0 * (1.0 + 5f64.sqrt()) * rho * rho
}

/// Amplification constant with `rho = ||Q||_inf / sigma_d(Q(S#, A#))`;
/// infinite when `sigma_d = 0`.
pub fn empirical_c_prime(q_inf_norm: f64, sigma_d_sub: f64) -> f64 {
    if sigma_d_sub <= 0.0 {
        f64::INFINITY
    } else {
        c_prime_from_ratio(q_inf_norm / sigma_d_sub)
    }
}

/// Closed-form constant with `rho = 640 kappa / ln(min(|S|, |A|))`;
/// infinite when the logarithm is not positive.
pub fn theoretical_c_prime(kappa: f64, n_states: usize, n_actions: usize) -> f64 {
    let log = (n_states.min(n_actions) as f64).ln();
    if log <= 0.0 {
        f64::INFINITY
    } else {
        c_prime_from_ratio(640.0 * kappa / log)
    }
}

/// Gate and bound for one completion under entrywise noise `eta` on `Omega`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionReport {
    pub sigma_d_sub: f64,
    /// `sigma_d_sub / (2 sqrt(|S#||A#|))`.
    pub eta_cap: f64,
    pub eta: f64,
    pub c_prime: f64,
    /// `c_prime |S#||A#| eta`, or `+inf` when `sigma_d_sub = 0`.
    pub bound: f64,
    pub gate_passed: bool,
}

/// Report for the anchor block `q_hat_sub` (`|S#| x |A#|`) of a rank-`d`
/// target whose spectral summary is `target`.
pub fn completion_report(q_hat_sub: &DMatrix<f64>, target: &SpectralReport, eta: f64, d: usize) -> Result<CompletionReport> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta={eta} must be non-negative")));
    }
    let sigma_d_sub = SortedSvd::new(q_hat_sub).sigma(d);
    let size = (q_hat_sub.nrows() * q_hat_sub.ncols()) as f64;
    let eta_cap = sigma_d_sub / (2.0 * size.sqrt());
    if sigma_d_sub <= 0.0 {
        return Ok(CompletionReport {
            sigma_d_sub: 0.0,
            eta_cap,
            eta,
            c_prime: f64::INFINITY,
            bound: f64::INFINITY,
            gate_passed: false,
        });
    }
    let c_prime = empirical_c_prime(target.inf_norm, sigma_d_sub);
    Ok(CompletionReport {
        sigma_d_sub,
        eta_cap,
        eta,
        c_prime,
        bound: c_prime * size * eta,
        gate_passed: eta <= eta_cap,
    })
}

/// `q12 q21 / q11`: the rank-1 completion of a 2x2 matrix.
pub fn rank1_complete_2x2(q11: f64, q12: f64, q21: f64) -> Result<f64> {
    if q11 == 0.0 {
        return Err(Error::DivisionByZero("rank-1 completion with q11 = 0".into()));
    }
    Ok(q12 * q21 / q11)
}

/// Outcome of [`verify_anchor_submatrix`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorCheck {
    /// `sigma_d((p1 v p2)^-1 Qtilde)`.
    pub sigma_d_scaled: f64,
    pub sigma_d: f64,
    pub ratio: f64,
    /// `sigma_d_scaled >= sigma_d / 2`.
    pub passed: bool,
}

/// Compares `sigma_d` of the anchor-masked, rescaled matrix with that of `q`.
/// `Qtilde` keeps the entries of `q` on `S# x A#` and zeroes the rest.
pub fn verify_anchor_submatrix(q: &DMatrix<f64>, plan: &AnchorPlan, d: usize) -> Result<AnchorCheck> {
    if q.shape() != (plan.n_states, plan.n_actions) {
        return Err(Error::DimensionMismatch("matrix does not match anchor plan".into()));
    }
    let p = plan.p1.max(plan.p2);
    let tilde = DMatrix::from_fn(q.nrows(), q.ncols(), |s, a| {
        if plan.is_anchor_state(s) && plan.is_anchor_action(a) {
            q[(s, a)] / p
        } else {
            0.0
        }
    });
    let sigma_d = SortedSvd::new(q).sigma(d);
    let sigma_d_scaled = SortedSvd::new(&tilde).sigma(d);
    let ratio = if sigma_d > 0.0 { sigma_d_scaled / sigma_d } else { f64::NAN };
    Ok(AnchorCheck {
        sigma_d_scaled,
        sigma_d,
        ratio,
        passed: sigma_d_scaled >= 0.5 * sigma_d,
    })
}

/// Numerical rank of the anchor block of `q`.
pub fn anchor_block_rank(q: &DMatrix<f64>, plan: &AnchorPlan) -> usize {
    numerical_rank(&q.select_rows(&plan.s_anchor).select_columns(&plan.a_anchor), RANK_TOL)
}
