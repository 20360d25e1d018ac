//! Example MDPs and synthetic low-rank MDP families.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{exact_backward_induction, suboptimality_gap, Policy, Reward, TabularMdp};
use crate::rng::{self, tag};
use crate::spectral::{best_rank_d, svd_report, SpectralReport};

/// Which mode of the transition tensor carries the rank `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuckerMode {
    /// Tucker rank `(|S|, |S|, d)`: kernels mix over actions.
    #[serde(rename = "S_S_d")]
    SSd,
    /// Tucker rank `(|S|, d, |A|)`: kernels mix over states.
    #[serde(rename = "S_d_A")]
    SdA,
}

/// Factors of one step.
///
/// For [`TuckerMode::SSd`], `mixing` is `|A| x d`, `kernels[i]` is `|S| x |S|`
/// with rows `K_i(.|s)` and `reward_weights` is `|S| x d`:
/// `P(s'|s,a) = sum_i mixing[a,i] K_i(s'|s)`, `r(s,a) = sum_i W[s,i] mixing[a,i]`.
/// For [`TuckerMode::SdA`] states and actions swap roles.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerStep {
    pub mixing: DMatrix<f64>,
    pub kernels: Vec<DMatrix<f64>>,
    pub reward_weights: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors {
    pub mode: TuckerMode,
    pub d: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub steps: Vec<TuckerStep>,
}

impl TuckerFactors {
    pub fn new(mode: TuckerMode, n_states: usize, n_actions: usize, steps: Vec<TuckerStep>) -> Result<Self> {
        let d = steps.first().map(|s| s.mixing.ncols()).unwrap_or(0);
        if d == 0 || steps.is_empty() {
            return Err(Error::InvalidArgument("Tucker factors need at least one step and d >= 1".into()));
        }
        let (mixed, other) = match mode {
            TuckerMode::SSd => (n_actions, n_states),
            TuckerMode::SdA => (n_states, n_actions),
        };
        for (h, st) in steps.iter().enumerate() {
            let h = h + 1;
            if st.mixing.shape() != (mixed, d)
                || st.reward_weights.shape() != (other, d)
                || st.kernels.len() != d
                || st.kernels.iter().any(|k| k.shape() != (other, n_states))
            {
                return Err(Error::DimensionMismatch(format!("Tucker factors at step {h} have wrong shapes")));
            }
            if !rows_on_simplex(&st.mixing) || st.kernels.iter().any(|k| !rows_on_simplex(k)) {
                return Err(Error::InvalidArgument(format!("step {h}: mixing rows and kernel rows must be distributions")));
            }
            if st.reward_weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::InvalidArgument(format!("step {h}: reward weights must lie in [0, 1]")));
            }
        }
        Ok(TuckerFactors {
            mode,
            d,
            n_states,
            n_actions,
            steps,
        })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn reconstruct(&self) -> Result<TabularMdp> {
        let (n_s, d) = (self.n_states, self.d);
        TabularMdp::from_fn(n_s, self.n_actions, self.horizon(), |h, s, a| {
            let st = &self.steps[h - 1];
            let (mix_row, kernel_row, w_row) = match self.mode {
                TuckerMode::SSd => (a, s, s),
                TuckerMode::SdA => (s, a, a),
            };
            let p = (0..n_s)
                .map(|s2| (0..d).map(|i| st.mixing[(mix_row, i)] * st.kernels[i][(kernel_row, s2)]).sum())
                .collect();
            let r: f64 = (0..d).map(|i| st.reward_weights[(w_row, i)] * st.mixing[(mix_row, i)]).sum();
            (p, Reward::Deterministic(r.clamp(0.0, 1.0)))
        })
    }
}

fn rows_on_simplex(m: &DMatrix<f64>) -> bool {
    m.row_iter()
        .all(|r| r.iter().all(|&x| x >= 0.0) && (r.sum() - 1.0).abs() <= 1e-12)
}

/// Uniform draw from the probability simplex of dimension `n`.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let z: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= z);
    x
}

fn simplex_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for (j, v) in random_simplex(cols, rng).into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

fn check_dims(n_states: usize, n_actions: usize, horizon: usize, d: usize) -> Result<()> {
    if n_states == 0 || n_actions == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    if d == 0 || d > n_states.min(n_actions) {
        return Err(Error::InvalidArgument(format!(
            "rank d={d} must lie in 1..={}",
            n_states.min(n_actions)
        )));
    }
    Ok(())
}

/// Random Tucker-rank-`d` MDP built from simplex mixtures of `d` base kernels.
pub fn gen_tucker_mdp(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    d: usize,
    mode: TuckerMode,
    seed: u64,
) -> Result<(TabularMdp, TuckerFactors)> {
    check_dims(n_states, n_actions, horizon, d)?;
    let mut rng = rng::stream(seed, &[tag::GENERATOR]);
    let (mixed, other) = match mode {
        TuckerMode::SSd => (n_actions, n_states),
        TuckerMode::SdA => (n_states, n_actions),
    };
    let steps = (0..horizon)
        .map(|_| TuckerStep {
            mixing: simplex_rows(mixed, d, &mut rng),
            kernels: (0..d).map(|_| simplex_rows(other, n_states, &mut rng)).collect(),
            reward_weights: DMatrix::from_fn(other, d, |_, _| rng.random::<f64>()),
        })
        .collect();
    let factors = TuckerFactors::new(mode, n_states, n_actions, steps)?;
    let mdp = factors.reconstruct()?;
    Ok((mdp, factors))
}

/// Spectral summaries of `Q*_h` for every step.
pub fn q_star_reports(mdp: &TabularMdp, d: usize) -> Result<Vec<SpectralReport>> {
    let opt = exact_backward_induction(mdp);
    opt.q.steps().iter().map(|q| svd_report(q, d)).collect()
}

/// Largest incoherence and condition number over the steps (`None` if any
/// step is undefined).
pub fn worst_mu_kappa(reports: &[SpectralReport]) -> (Option<f64>, Option<f64>) {
    let fold = |vals: Vec<Option<f64>>| vals.into_iter().try_fold(0.0f64, |acc, v| v.map(|v| acc.max(v)));
    (
        fold(reports.iter().map(|r| r.mu).collect()),
        fold(reports.iter().map(|r| r.kappa).collect()),
    )
}

/// Rejection bounds on the measured incoherence and conditioning of `Q*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertBounds {
    pub mu_max: f64,
    pub kappa_max: f64,
    pub max_tries: usize,
}

impl Default for CertBounds {
    fn default() -> Self {
        CertBounds {
            mu_max: f64::INFINITY,
            kappa_max: f64::INFINITY,
            max_tries: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CertifiedTucker {
    pub mdp: TabularMdp,
    pub factors: TuckerFactors,
    pub reports: Vec<SpectralReport>,
    pub mu: f64,
    pub kappa: f64,
    pub attempts: usize,
}

/// [`gen_tucker_mdp`] with rejection sampling until every `Q*_h` has exact
/// rank `d`, incoherence at most `mu_max` and condition number at most `kappa_max`.
pub fn gen_tucker_mdp_certified(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    d: usize,
    mode: TuckerMode,
    seed: u64,
    bounds: &CertBounds,
) -> Result<CertifiedTucker> {
    for attempt in 0..bounds.max_tries.max(1) {
        let sub_seed = rng::derive_seed(seed, &[tag::GENERATOR, attempt as u64]);
        let (mdp, factors) = gen_tucker_mdp(n_states, n_actions, horizon, d, mode, sub_seed)?;
        let reports = q_star_reports(&mdp, d)?;
        if reports.iter().any(|r| r.rank_numerical != d) {
            continue;
        }
        if let (Some(mu), Some(kappa)) = worst_mu_kappa(&reports) {
            if mu <= bounds.mu_max && kappa <= bounds.kappa_max {
                return Ok(CertifiedTucker {
                    mdp,
                    factors,
                    reports,
                    mu,
                    kappa,
                    attempts: attempt + 1,
                });
            }
        }
    }
    Err(Error::InvalidArgument(format!(
        "no Tucker MDP met mu <= {} and kappa <= {} in {} attempts",
        bounds.mu_max, bounds.kappa_max, bounds.max_tries
    )))
}

fn two_state_kernel(s: usize, a: usize) -> Vec<f64> {
    if s == a {
        let mut p = vec![0.0; 2];
        p[s] = 1.0;
        p
    } else {
        vec![0.5, 0.5]
    }
}

/// Two states, two actions, zero rewards until a terminal reward of 1/2;
/// `P(.|s,a)` is a point mass at `s` when `s = a` and uniform otherwise.
pub fn gen_doubly_exp_mdp(horizon: usize) -> Result<TabularMdp> {
    if horizon < 2 {
        return Err(Error::InvalidArgument("horizon must be at least 2".into()));
    }
    TabularMdp::from_fn(2, 2, horizon, |h, s, a| {
        let r = if h == horizon { 0.5 } else { 0.0 };
        (two_state_kernel(s, a), Reward::Deterministic(r))
    })
}

/// Same dynamics as [`gen_doubly_exp_mdp`] with off-diagonal rewards
/// `alpha - (alpha^2 + 1) / 2` and terminal rewards `(alpha^2, 1)` by state.
/// Rewards are signed, so the MDP is evaluation-only.
pub fn gen_exponential_variant_mdp(horizon: usize, alpha: f64) -> Result<TabularMdp> {
    if horizon < 2 {
        return Err(Error::InvalidArgument("horizon must be at least 2".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha={alpha} must lie in (0, 1)")));
    }
    let off = alpha - 0.5 * (alpha * alpha + 1.0);
    TabularMdp::evaluation_only_from_fn(2, 2, horizon, |h, s, a| {
        let r = if h == horizon {
            [alpha * alpha, 1.0][s]
        } else if s == a {
            0.0
        } else {
            off
        };
        (two_state_kernel(s, a), Reward::Deterministic(r))
    })
}

/// `pi_h(s) = s` on the two-state examples.
pub fn identity_policy(horizon: usize) -> Policy {
    Policy::Deterministic {
        n_actions: 2,
        actions: vec![vec![0, 1]; horizon],
    }
}

/// Two-step MDP on `S = A = {0..m}` whose epsilon-optimal policies have
/// low-rank `Q^pi_1` while the kernel has full Tucker rank.
///
/// `R_1 = 0`, `R_2(s,a) = 1 - sqrt(s a) / (m + 1)`. From `(s, a)` with
/// `s != a` the chain moves to state 0; from `(s, s)` it stays at `s`.
pub fn gen_eps_rank_example(m: usize) -> Result<TabularMdp> {
    if m < 2 {
        return Err(Error::InvalidArgument("m must be at least 2".into()));
    }
    let n = m + 1;
    TabularMdp::from_fn(n, n, 2, |h, s, a| {
        let mut p = vec![0.0; n];
        if s == a {
            p[s] = 1.0;
        } else {
            p[0] = 1.0;
        }
        let r = if h == 1 {
            0.0
        } else {
            1.0 - ((s * a) as f64 / (n * n) as f64).sqrt()
        };
        (p, Reward::Deterministic(r))
    })
}

/// Uniformly random deterministic policy.
pub fn random_policy<R: Rng + ?Sized>(n_states: usize, n_actions: usize, horizon: usize, rng: &mut R) -> Policy {
    Policy::Deterministic {
        n_actions,
        actions: (0..horizon)
            .map(|_| (0..n_states).map(|_| rng.random_range(0..n_actions)).collect())
            .collect(),
    }
}

/// Random deterministic policy with `V^pi_h >= V*_h - eps` everywhere.
///
/// Built backwards: at step `h` each state picks uniformly among the actions
/// whose `Q^pi_h` (under the already chosen tail) is within `eps` of `V*_h`.
pub fn sample_eps_optimal_policy<R: Rng + ?Sized>(mdp: &TabularMdp, eps: f64, rng: &mut R) -> Policy {
    let opt = exact_backward_induction(mdp);
    let (n_s, n_a, horizon) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let mut actions = vec![vec![0usize; n_s]; horizon];
    let mut v_next = DVector::zeros(n_s);
    for h in (1..=horizon).rev() {
        let q = mdp.bellman_matrix(h, &v_next, 1.0);
        let v_star = opt.v.step(h);
        let mut v_h = DVector::zeros(n_s);
        for s in 0..n_s {
            let good: Vec<usize> = (0..n_a).filter(|&a| v_star[s] - q[(s, a)] <= eps).collect();
            let a = *good.choose(rng).expect("the greedy action is always eligible");
            actions[h - 1][s] = a;
            v_h[s] = q[(s, a)];
        }
        v_next = v_h;
    }
    Policy::Deterministic { n_actions: n_a, actions }
}

/// Parameters of [`gen_gap_mdp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapMdpParams {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub min_gap: f64,
    /// Weight of the second base kernel in the type-1 kernel.
    pub kernel_spread: f64,
    pub max_tries: usize,
}

impl Default for GapMdpParams {
    fn default() -> Self {
        GapMdpParams {
            n_states: 20,
            n_actions: 20,
            horizon: 4,
            min_gap: 0.2,
            kernel_spread: 0.02,
            max_tries: 64,
        }
    }
}

/// Rank-2 Tucker MDP with a suboptimality gap of at least `min_gap`.
///
/// Actions come in two types (`a mod 2`). Each `(h, s)` prefers one type:
/// its reward is drawn from `[0.7, 1]` and the other type's from `[0, 0.3]`.
/// The two type kernels differ by a small mixture weight, so the reward
/// separation dominates the continuation values.
pub fn gen_gap_mdp(params: &GapMdpParams, seed: u64) -> Result<(TabularMdp, TuckerFactors)> {
    let GapMdpParams {
        n_states,
        n_actions,
        horizon,
        min_gap,
        kernel_spread,
        max_tries,
    } = *params;
    check_dims(n_states, n_actions, horizon, 2)?;
    if !(0.0..=1.0).contains(&kernel_spread) {
        return Err(Error::InvalidArgument(format!("kernel_spread={kernel_spread} must lie in [0, 1]")));
    }
    for attempt in 0..max_tries.max(1) {
        let mut rng = rng::stream(seed, &[tag::GENERATOR, attempt as u64]);
        let steps = (0..horizon)
            .map(|_| {
                let base = simplex_rows(n_states, n_states, &mut rng);
                let alt = simplex_rows(n_states, n_states, &mut rng);
                let mixed = &base * (1.0 - kernel_spread) + &alt * kernel_spread;
                let mut weights = DMatrix::zeros(n_states, 2);
                for s in 0..n_states {
                    let pref = rng.random_range(0..2usize);
                    weights[(s, pref)] = 0.7 + 0.3 * rng.random::<f64>();
                    weights[(s, 1 - pref)] = 0.3 * rng.random::<f64>();
                }
                TuckerStep {
                    mixing: DMatrix::from_fn(n_actions, 2, |a, i| if a % 2 == i { 1.0 } else { 0.0 }),
                    kernels: vec![base, mixed],
                    reward_weights: weights,
                }
            })
            .collect();
        let factors = TuckerFactors::new(TuckerMode::SSd, n_states, n_actions, steps)?;
        let mdp = factors.reconstruct()?;
        if suboptimality_gap(&mdp) >= min_gap {
            return Ok((mdp, factors));
        }
    }
    Err(Error::InvalidArgument(format!(
        "no gap MDP with gap >= {min_gap} found in {max_tries} attempts"
    )))
}

/// Factors of a time-homogeneous discounted MDP with
/// `P(s'|s,a) = sum_ij U[s,i] V[a,j] W_ij(s')` and `r = U C V^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedTuckerFactors {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// `w[i * d + j]` is the distribution `W_ij(.)`.
    pub w: Vec<DVector<f64>>,
    pub c: DMatrix<f64>,
}

/// Discounted low-Tucker-rank MDP stored as a horizon-1 wrapper.
pub fn gen_discounted_tucker(n_states: usize, n_actions: usize, d: usize, seed: u64) -> Result<(TabularMdp, DiscountedTuckerFactors)> {
    check_dims(n_states, n_actions, 1, d)?;
    let mut rng = rng::stream(seed, &[tag::GENERATOR]);
    let u = simplex_rows(n_states, d, &mut rng);
    let v = simplex_rows(n_actions, d, &mut rng);
    let w: Vec<DVector<f64>> = (0..d * d)
        .map(|_| DVector::from_vec(random_simplex(n_states, &mut rng)))
        .collect();
    let c = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>());
    let r = &u * &c * v.transpose();
    let mdp = TabularMdp::from_fn(n_states, n_actions, 1, |_, s, a| {
        let mut p = DVector::zeros(n_states);
        for i in 0..d {
            for j in 0..d {
                p += &w[i * d + j] * (u[(s, i)] * v[(a, j)]);
            }
        }
        (p.iter().copied().collect(), Reward::Deterministic(r[(s, a)].clamp(0.0, 1.0)))
    })?;
    Ok((mdp, DiscountedTuckerFactors { u, v, w, c }))
}

/// Per-step residuals of the best rank-`d` approximations of `r_h` and of
/// each kernel slice `P_h(s'|., .)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxRankCertificate {
    /// `max_{s,a} |r_h - r_{h,d}|`.
    pub xi_r: Vec<f64>,
    /// `max_{s,a} || P_h(.|s,a) - P_{h,d}(.|s,a) ||_1`.
    pub xi_p: Vec<f64>,
}

/// Best rank-`d` reward matrix and kernel slices of step `h`.
pub fn rank_d_parts(mdp: &TabularMdp, h: usize, d: usize) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let r_d = best_rank_d(&mdp.reward_matrix(h), d);
    let p_d = (0..mdp.n_states()).map(|s2| best_rank_d(&mdp.kernel_slice(h, s2), d)).collect();
    (r_d, p_d)
}

pub fn approx_rank_certificate(mdp: &TabularMdp, d: usize) -> ApproxRankCertificate {
    let (mut xi_r, mut xi_p) = (Vec::new(), Vec::new());
    for h in 1..=mdp.horizon() {
        let (r_d, p_d) = rank_d_parts(mdp, h, d);
        xi_r.push((mdp.reward_matrix(h) - r_d).amax());
        let mut worst = 0.0f64;
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let p = mdp.transition(h, s, a);
                let l1: f64 = p_d.iter().enumerate().map(|(s2, slice)| (p[s2] - slice[(s, a)]).abs()).sum();
                worst = worst.max(l1);
            }
        }
        xi_p.push(worst);
    }
    ApproxRankCertificate { xi_r, xi_p }
}

/// Adds a full-rank perturbation of size `noise_level` to every kernel
/// (uniform `[0, noise]` mass, then renormalised) and every reward (uniform
/// `[-noise, noise]`, clipped to `[0, 1]`), and certifies the result.
pub fn perturb_to_approx_rank(
    mdp: &TabularMdp,
    d: usize,
    noise_level: f64,
    seed: u64,
) -> Result<(TabularMdp, ApproxRankCertificate)> {
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(Error::InvalidArgument(format!("noise_level={noise_level} must lie in [0, 1]")));
    }
    if mdp.is_evaluation_only() {
        return Err(Error::EvaluationOnly);
    }
    check_dims(mdp.n_states(), mdp.n_actions(), mdp.horizon(), d)?;
    let mut rng = rng::stream(seed, &[tag::NOISE]);
    let perturbed = TabularMdp::from_fn(mdp.n_states(), mdp.n_actions(), mdp.horizon(), |h, s, a| {
        let mut p: Vec<f64> = mdp
            .transition(h, s, a)
            .iter()
            .map(|&x| x + noise_level * rng.random::<f64>())
            .collect();
        if noise_level > 0.0 {
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= z);
        }
        let bump = noise_level * (2.0 * rng.random::<f64>() - 1.0);
        let r = match mdp.reward(h, s, a) {
            Reward::Deterministic(v) => Reward::Deterministic((v + bump).clamp(0.0, 1.0)),
            Reward::Bernoulli(v) => Reward::Bernoulli((v + bump).clamp(0.0, 1.0)),
        };
        (p, r)
    })?;
    let cert = approx_rank_certificate(&perturbed, d);
    Ok((perturbed, cert))
}

/// Sidecar written next to generated MDPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSidecar {
    pub mu: Option<f64>,
    pub kappa: Option<f64>,
    #[serde(rename = "xi_R")]
    pub xi_r: Vec<f64>,
    #[serde(rename = "xi_P")]
    pub xi_p: Vec<f64>,
}

/// Gaussian-factor `rows x cols` matrix of rank `d` (incoherent with high probability).
pub fn gen_low_rank_matrix(rows: usize, cols: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng: ChaCha8Rng = rng::stream(seed, &[tag::GENERATOR]);
    let a = DMatrix::from_fn(rows, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = DMatrix::from_fn(d, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    a * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{exact_policy_eval, is_eps_optimal, Candidate};
    use crate::spectral::{numerical_rank, singular_values};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn doubly_exp_mdp_structure() {
        let mdp = gen_doubly_exp_mdp(6).unwrap();
        assert_eq!(mdp.transition(3, 0, 0), &[1.0, 0.0]);
        assert_eq!(mdp.transition(3, 0, 1), &[0.5, 0.5]);
        let opt = exact_backward_induction(&mdp);
        for h in 1..=6 {
            assert!(opt.q.step(h).iter().all(|&x| x == 0.5));
            assert!(opt.v.step(h).iter().all(|&x| x == 0.5));
        }
        assert_eq!(suboptimality_gap(&mdp), f64::INFINITY);
        let (_, v) = exact_policy_eval(&mdp, &identity_policy(6)).unwrap();
        assert!(v.step(1).iter().all(|&x| x == 0.5));
        assert!(gen_doubly_exp_mdp(1).is_err());
    }

    #[test]
    fn exponential_variant_closed_form() {
        let horizon = 7;
        let mdp = gen_exponential_variant_mdp(horizon, 0.5).unwrap();
        assert!(mdp.is_evaluation_only());
        assert_eq!(mdp.mean_reward(2, 0, 1), -0.125);
        assert_eq!(mdp.mean_reward(horizon, 0, 1), 0.25);
        assert_eq!(mdp.mean_reward(horizon, 1, 0), 1.0);
        let (q, _) = exact_policy_eval(&mdp, &identity_policy(horizon)).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, 0.5, 0.5, 1.0]);
        for h in 1..horizon {
            assert!((q.step(h) - &expected).amax() < 1e-15);
        }
        let terminal = DMatrix::from_row_slice(2, 2, &[0.25, 0.25, 1.0, 1.0]);
        assert_eq!(q.step(horizon), &terminal);
    }

    #[test]
    fn eps_rank_example_kernel_and_ranks() {
        let m = 6;
        let mdp = gen_eps_rank_example(m).unwrap();
        for s in 0..=m {
            for a in 0..=m {
                let p0 = mdp.transition(1, s, a)[0];
                if s == a && s >= 1 {
                    assert_eq!(p0, 0.0);
                } else {
                    assert_eq!(p0, 1.0);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let pi = random_policy(m + 1, m + 1, 2, &mut rng);
            let (q, _) = exact_policy_eval(&mdp, &pi).unwrap();
            assert_eq!(numerical_rank(q.step(2), 1e-8), 2);
        }
    }

    #[test]
    fn eps_optimal_sampler_is_eps_optimal() {
        let mdp = gen_eps_rank_example(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let pi = sample_eps_optimal_policy(&mdp, 0.2, &mut rng);
            assert!(is_eps_optimal(Candidate::Policy(&pi), &mdp, 0.2 + 1e-12).unwrap().within);
        }
    }

    #[test]
    fn gap_example_from_closed_form_rewards() {
        // at the last step Q* = R_2; the smallest positive deviation is the
        // smallest positive 1 - R_2(s, a) over all entries
        let m = 3;
        let mdp = gen_eps_rank_example(m).unwrap();
        let n = (m + 1) as f64;
        let mut expected = f64::INFINITY;
        for s in 0..=m {
            for a in 0..=m {
                let dev = ((s * a) as f64).sqrt() / n;
                if dev > 1e-12 {
                    expected = expected.min(dev);
                }
            }
        }
        // step 1: V*_1 = 1 and Q*_1(s, s) = V*_2(s) = 1 for every s, so no new deviations
        assert_abs_diff_eq!(suboptimality_gap(&mdp), expected, epsilon = 1e-14);
    }

    #[test]
    fn rank_one_tucker_has_rank_one_q() {
        for mode in [TuckerMode::SSd, TuckerMode::SdA] {
            let (mdp, _) = gen_tucker_mdp(8, 6, 3, 1, mode, 11).unwrap();
            let opt = exact_backward_induction(&mdp);
            for h in 1..=3 {
                let s = singular_values(opt.q.step(h));
                assert!(s[1] <= 1e-9 * s[0]);
            }
        }
    }

    #[test]
    fn full_rank_mixing_reproduces_kernels() {
        let (n_s, n_a) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kernels: Vec<DMatrix<f64>> = (0..n_a).map(|_| simplex_rows(n_s, n_s, &mut rng)).collect();
        let weights = DMatrix::from_fn(n_s, n_a, |_, _| rng.random::<f64>());
        let step = TuckerStep {
            mixing: DMatrix::identity(n_a, n_a),
            kernels: kernels.clone(),
            reward_weights: weights.clone(),
        };
        let mdp = TuckerFactors::new(TuckerMode::SSd, n_s, n_a, vec![step]).unwrap().reconstruct().unwrap();
        for s in 0..n_s {
            for a in 0..n_a {
                let row: Vec<f64> = kernels[a].row(s).iter().copied().collect();
                assert_eq!(mdp.transition(1, s, a), row.as_slice());
                assert_eq!(mdp.mean_reward(1, s, a), weights[(s, a)]);
            }
        }
    }

    #[test]
    fn bellman_targets_have_rank_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (mode, d) in [(TuckerMode::SSd, 2), (TuckerMode::SdA, 3)] {
            let (mdp, _) = gen_tucker_mdp(12, 10, 3, d, mode, 21).unwrap();
            for h in 1..=3 {
                for _ in 0..20 {
                    let v = DVector::from_fn(12, |_, _| rng.random::<f64>() * (3 - h) as f64);
                    let s = singular_values(&mdp.bellman_matrix(h, &v, 1.0));
                    assert!(s[d] <= 1e-9 * s[0]);
                }
            }
        }
    }

    #[test]
    fn certified_generator_respects_bounds() {
        let bounds = CertBounds {
            mu_max: 4.0,
            kappa_max: 200.0,
            max_tries: 64,
        };
        let c = gen_tucker_mdp_certified(15, 15, 3, 2, TuckerMode::SSd, 4, &bounds).unwrap();
        assert!(c.mu <= 4.0 && c.kappa <= 200.0);
        assert!(c.reports.iter().all(|r| r.rank_numerical == 2));
    }

    #[test]
    fn gap_generator_meets_gap_and_rank() {
        let params = GapMdpParams {
            n_states: 12,
            n_actions: 10,
            horizon: 4,
            ..GapMdpParams::default()
        };
        let (mdp, _) = gen_gap_mdp(&params, 3).unwrap();
        assert!(suboptimality_gap(&mdp) >= 0.2);
        for r in q_star_reports(&mdp, 2).unwrap() {
            assert_eq!(r.rank_numerical, 2);
        }
    }

    #[test]
    fn discounted_targets_have_rank_d() {
        let (mdp, f) = gen_discounted_tucker(10, 9, 2, 7).unwrap();
        assert_eq!(f.w.len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let v = DVector::from_fn(10, |_, _| 10.0 * rng.random::<f64>());
            let s = singular_values(&mdp.bellman_matrix(1, &v, 0.9));
            assert!(s[2] <= 1e-9 * s[0]);
        }
    }

    #[test]
    fn unperturbed_certificate_is_zero() {
        let (mdp, _) = gen_tucker_mdp(8, 8, 3, 2, TuckerMode::SSd, 1).unwrap();
        let (same, cert) = perturb_to_approx_rank(&mdp, 2, 0.0, 4).unwrap();
        assert_eq!(same, mdp);
        assert!(cert.xi_r.iter().chain(&cert.xi_p).all(|&x| x <= 1e-10));
        assert!(perturb_to_approx_rank(&mdp, 2, -0.1, 4).is_err());
    }

    #[test]
    fn certificate_inequality_and_brute_force_xi_p() {
        let (mdp, _) = gen_tucker_mdp(9, 7, 3, 2, TuckerMode::SSd, 2).unwrap();
        let (pert, cert) = perturb_to_approx_rank(&mdp, 2, 0.05, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for h in 1..=3 {
            let (r_d, p_d) = rank_d_parts(&pert, h, 2);
            let mut brute = 0.0f64;
            for s in 0..9 {
                for a in 0..7 {
                    let mut l1 = 0.0;
                    for s2 in 0..9 {
                        l1 += (pert.transition(h, s, a)[s2] - p_d[s2][(s, a)]).abs();
                    }
                    brute = brute.max(l1);
                }
            }
            assert_abs_diff_eq!(cert.xi_p[h - 1], brute, epsilon = 1e-15);
            for _ in 0..20 {
                let v = DVector::from_fn(9, |_, _| rng.random::<f64>() * 3.0);
                let exact = pert.bellman_matrix(h, &v, 1.0);
                let approx = DMatrix::from_fn(9, 7, |s, a| {
                    r_d[(s, a)] + (0..9).map(|s2| p_d[s2][(s, a)] * v[s2]).sum::<f64>()
                });
                let lhs = (approx - exact).amax();
                assert!(lhs <= cert.xi_r[h - 1] + v.amax() * cert.xi_p[h - 1] + 1e-12);
            }
        }
    }

    #[test]
    fn sidecar_keys() {
        let side = CertificateSidecar {
            mu: Some(1.5),
            kappa: None,
            xi_r: vec![0.0],
            xi_p: vec![0.25],
        };
        let text = serde_json::to_string(&side).unwrap();
        assert_eq!(text, r#"{"mu":1.5,"kappa":null,"xi_R":[0.0],"xi_P":[0.25]}"#);
    }
}
