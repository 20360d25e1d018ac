//! LR-EVI, LR-MCPI, their full-table baselines, the discounted variant,
//! the rank-1 recursion driver and the sample-size schedules.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    anchor_complete, completion_report, empirical_c_prime, rank1_complete_2x2, sample_anchors, theoretical_c_prime,
    AnchorPlan, CompletionReport, DEFAULT_MAX_ANCHOR_RETRIES,
};
use crate::generators::{gen_doubly_exp_mdp, gen_exponential_variant_mdp, identity_policy, ApproxRankCertificate};
use crate::mdp::{dot, exact_policy_eval, greedy_actions, multinomial, GenerativeModel, Policy, QTable, TabularMdp, VTable};
use crate::rng::{self, tag};
use crate::spectral::{svd_report, SortedSvd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    Sampled,
    #[serde(alias = "exact")]
    ExactExpectation,
}

/// Where the anchor sets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum AnchorSource {
    /// Fresh Bernoulli draws per step from the run seed (see [`sample_anchor_plans`]).
    Sample { p1: f64, p2: f64 },
    /// One plan per step (or a single plan reused for every step).
    Fixed(Vec<AnchorPlan>),
}

/// Per-step sample counts.
#[derive(Debug, Clone, PartialEq)]
pub enum NSchedule {
    Constant(u64),
    /// `n[h - 1]` for step `h` (iteration `t` for the discounted variant).
    PerStep(Vec<u64>),
}

impl NSchedule {
    fn at(&self, index: usize) -> Result<u64> {
        let n = match self {
            NSchedule::Constant(n) => *n,
            NSchedule::PerStep(v) => *v.get(index - 1).ok_or_else(|| {
                Error::InvalidArgument(format!("sample schedule has no entry for step {index}"))
            })?,
        };
        if n == 0 {
            return Err(Error::InvalidArgument(format!("N must be at least 1 (step {index})")));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub anchors: AnchorSource,
    pub n_schedule: NSchedule,
    pub mode: EstimationMode,
    /// Clip completed values into the attainable range.
    pub clip_range: bool,
    /// Seeds anchor sampling; cell noise comes from the generative model's seed.
    pub seed: u64,
    /// Failure probability used for the logged Hoeffding noise level.
    pub delta: f64,
    pub max_anchor_retries: usize,
}

impl RunConfig {
    pub fn new(d: usize, anchors: AnchorSource, n_schedule: NSchedule, mode: EstimationMode, seed: u64) -> Self {
        RunConfig {
            d,
            anchors,
            n_schedule,
            mode,
            clip_range: false,
            seed,
            delta: 0.1,
            max_anchor_retries: DEFAULT_MAX_ANCHOR_RETRIES,
        }
    }
}

/// What happened at one step (or one discounted iteration).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub h: usize,
    pub plan: AnchorPlan,
    pub n: u64,
    pub omega_size: usize,
    pub samples: u64,
    /// Numerical rank of the observed anchor block.
    pub sub_rank: usize,
    pub rank_deficient: bool,
    /// Absent for the full-table baselines.
    pub report: Option<CompletionReport>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub q_bar: QTable,
    /// `V(s) = max_a Qbar(s, a)` for EVI, `Qbar(s, pi(s))` for MCPI.
    pub v_hat: VTable,
    pub policy: Policy,
    pub samples_used: u64,
    /// Ordered as executed: `h = H..1`, or `t = 1..T`.
    pub per_step: Vec<StepRecord>,
    pub wall_time: Duration,
}

impl RunResult {
    pub fn any_rank_deficient(&self) -> bool {
        self.per_step.iter().any(|r| r.rank_deficient)
    }

    pub fn all_gates_passed(&self) -> bool {
        self.per_step.iter().all(|r| r.report.is_some_and(|rep| rep.gate_passed))
    }

    /// `sum_h |Omega_h| N_h` for EVI or `sum_h |Omega_h| N_h (H - h + 1)` for MCPI.
    pub fn predicted_samples(&self, rollout: bool, horizon: usize) -> u64 {
        self.per_step
            .iter()
            .map(|r| {
                let len = if rollout { (horizon - r.h + 1) as u64 } else { 1 };
                r.omega_size as u64 * r.n * len
            })
            .sum()
    }
}

/// One anchor plan per index `1..=count`, index `k` drawn from stream `(seed, k)`.
pub fn sample_anchor_plans(
    n_states: usize,
    n_actions: usize,
    count: usize,
    p1: f64,
    p2: f64,
    max_retries: usize,
    seed: u64,
) -> Result<Vec<AnchorPlan>> {
    (1..=count)
        .map(|k| {
            let mut rng = rng::stream(seed, &[tag::ANCHORS, k as u64]);
            sample_anchors(n_states, n_actions, p1, p2, max_retries, &mut rng)
        })
        .collect()
}

fn resolve_plans(cfg: &RunConfig, n_states: usize, n_actions: usize, count: usize) -> Result<Vec<AnchorPlan>> {
    let plans = match &cfg.anchors {
        AnchorSource::Sample { p1, p2 } => {
            sample_anchor_plans(n_states, n_actions, count, *p1, *p2, cfg.max_anchor_retries, cfg.seed)?
        }
        AnchorSource::Fixed(plans) if plans.len() == 1 => vec![plans[0].clone(); count],
        AnchorSource::Fixed(plans) if plans.len() == count => plans.clone(),
        AnchorSource::Fixed(plans) => {
            return Err(Error::DimensionMismatch(format!(
                "{} fixed anchor plans for {count} steps",
                plans.len()
            )))
        }
    };
    if let Some(p) = plans.iter().find(|p| p.n_states() != n_states || p.n_actions() != n_actions) {
        return Err(Error::DimensionMismatch(format!(
            "anchor plan for {}x{} used on a {n_states}x{n_actions} MDP",
            p.n_states(),
            p.n_actions()
        )));
    }
    Ok(plans)
}

fn cell_key(step: usize, s: usize, a: usize) -> [u64; 3] {
    [step as u64, s as u64, a as u64]
}

fn bellman_cell(
    gm: &GenerativeModel<'_>,
    key: &[u64],
    (h, s, a): (usize, usize, usize),
    v_next: &DVector<f64>,
    n: u64,
    discount: f64,
    mode: EstimationMode,
) -> Result<f64> {
    let mdp = gm.mdp();
    mdp.check_index(h, s, a)?;
    if v_next.len() != mdp.n_states() {
        return Err(Error::DimensionMismatch(format!(
            "value vector of length {} for |S|={}",
            v_next.len(),
            mdp.n_states()
        )));
    }
    match mode {
        EstimationMode::ExactExpectation => Ok(mdp.mean_reward(h, s, a) + discount * dot(mdp.transition(h, s, a), v_next)),
        EstimationMode::Sampled => {
            if n == 0 {
                return Err(Error::InvalidArgument("N must be at least 1".into()));
            }
            let batch = gm.cell_stream(key).sample_batch(h, s, a, n, true)?;
            let next: f64 = batch
                .next_counts
                .iter()
                .zip(v_next.iter())
                .map(|(&c, &v)| c as f64 * v)
                .sum();
            Ok((batch.reward_sum + discount * next) / n as f64)
        }
    }
}

/// `rhat_h(s,a) + mean_i v_next(s'_i)` over `n` draws (one stream keyed by `(h, s, a)`).
pub fn empirical_bellman_cell(
    gm: &GenerativeModel<'_>,
    h: usize,
    s: usize,
    a: usize,
    v_next: &DVector<f64>,
    n: u64,
    mode: EstimationMode,
) -> Result<f64> {
    bellman_cell(gm, &cell_key(h, s, a), (h, s, a), v_next, n, 1.0, mode)
}

fn action_split(pi: &Policy, h: usize, s: usize, count: u64, stream: &mut crate::mdp::CellStream<'_, '_>) -> Vec<(usize, u64)> {
    match pi.action(h, s) {
        Some(a) => vec![(a, count)],
        None => {
            let probs: Vec<f64> = (0..pi.n_actions()).map(|a| pi.probability(h, s, a)).collect();
            multinomial(&probs, count, stream.rng())
                .into_iter()
                .enumerate()
                .filter(|&(_, c)| c > 0)
                .collect()
        }
    }
}

fn rollout_cell(
    gm: &GenerativeModel<'_>,
    key: &[u64],
    (h, s, a): (usize, usize, usize),
    tail: &Policy,
    n: u64,
) -> Result<f64> {
    let mdp = gm.mdp();
    let horizon = mdp.horizon();
    let mut stream = gm.cell_stream(key);
    let first = stream.sample_batch(h, s, a, n, h < horizon)?;
    let mut total = first.reward_sum;
    let mut counts = first.next_counts;
    for t in h + 1..=horizon {
        let mut next = vec![0u64; mdp.n_states()];
        for (s2, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            for (a2, k) in action_split(tail, t, s2, c, &mut stream) {
                let b = stream.sample_batch(t, s2, a2, k, t < horizon)?;
                total += b.reward_sum;
                for (acc, x) in next.iter_mut().zip(b.next_counts) {
                    *acc += x;
                }
            }
        }
        counts = next;
    }
    Ok(total / n as f64)
}

/// Mean return of `n` rollouts from `(s, a)` at step `h` that follow `tail`
/// afterwards. Charges `n (H - h + 1)` transitions in sampled mode.
pub fn monte_carlo_cell(
    gm: &GenerativeModel<'_>,
    h: usize,
    s: usize,
    a: usize,
    tail: &Policy,
    n: u64,
    mode: EstimationMode,
) -> Result<f64> {
    let mdp = gm.mdp();
    mdp.check_index(h, s, a)?;
    if tail.horizon() != mdp.horizon() || tail.n_states() != mdp.n_states() || tail.n_actions() != mdp.n_actions() {
        return Err(Error::DimensionMismatch("tail policy does not match the MDP".into()));
    }
    match mode {
        EstimationMode::ExactExpectation => {
            let (q, _) = exact_policy_eval(mdp, tail)?;
            Ok(q.step(h)[(s, a)])
        }
        EstimationMode::Sampled => {
            if n == 0 {
                return Err(Error::InvalidArgument("N must be at least 1".into()));
            }
            rollout_cell(gm, &cell_key(h, s, a), (h, s, a), tail, n)
        }
    }
}

fn hoeffding_eta(range: f64, omega: usize, n: u64, delta: f64) -> f64 {
    range * ((2.0 * omega as f64 / delta).ln() / (2.0 * n as f64)).sqrt()
}

fn row_max(q: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(q.nrows(), q.row_iter().map(|r| r.max()))
}

/// Estimates on `Omega`, in `plan.omega_cells()` order, computed in parallel.
fn estimate_omega<F>(plan: &AnchorPlan, cell: F) -> Result<DMatrix<f64>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let cells = plan.omega_cells();
    let values: Vec<f64> = cells.par_iter().map(|&(s, a)| cell(s, a)).collect::<Result<_>>()?;
    let mut q = DMatrix::from_element(plan.n_states(), plan.n_actions(), f64::NAN);
    for (&(s, a), v) in cells.iter().zip(values) {
        q[(s, a)] = v;
    }
    Ok(q)
}

struct Completed {
    q_bar: DMatrix<f64>,
    sub_rank: usize,
    rank_deficient: bool,
    report: Option<CompletionReport>,
}

fn complete_step(q_hat: &DMatrix<f64>, plan: &AnchorPlan, d: usize, eta: f64, low_rank: bool) -> Result<Completed> {
    if !low_rank {
        return Ok(Completed {
            q_bar: q_hat.clone(),
            sub_rank: SortedSvd::new(q_hat).rank(crate::spectral::RANK_TOL),
            rank_deficient: false,
            report: None,
        });
    }
    let (rows, cols) = plan.blocks(q_hat);
    let c = anchor_complete(&rows, &cols, plan, d)?;
    let target = svd_report(&c.matrix, d.min(plan.n_states()).min(plan.n_actions()))?;
    let sub = rows.select_columns(plan.a_anchor());
    let report = completion_report(&sub, &target, eta, d)?;
    Ok(Completed {
        q_bar: c.matrix,
        sub_rank: c.sub_rank,
        rank_deficient: c.rank_deficient,
        report: Some(report),
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Method {
    Evi,
    Mcpi,
}

fn run_finite(gm: &GenerativeModel<'_>, cfg: &RunConfig, method: Method, low_rank: bool) -> Result<RunResult> {
    let start = Instant::now();
    let mdp = gm.mdp();
    let (n_s, n_a, horizon) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    if low_rank && (cfg.d == 0 || cfg.d > n_s.min(n_a)) {
        return Err(Error::InvalidArgument(format!("rank d={} must lie in 1..={}", cfg.d, n_s.min(n_a))));
    }
    let plans = if low_rank {
        resolve_plans(cfg, n_s, n_a, horizon)?
    } else {
        vec![AnchorPlan::full(n_s, n_a); horizon]
    };
    let before = gm.samples_used();
    let mut q_bar = QTable::zeros(n_s, n_a, horizon);
    let mut v_hat = VTable::zeros(n_s, horizon);
    let mut actions = vec![vec![0usize; n_s]; horizon];
    // exact value of the tail policy, used by exact-mode MCPI
    let mut v_tail = DVector::zeros(n_s);
    let mut per_step = Vec::with_capacity(horizon);
    for h in (1..=horizon).rev() {
        let plan = &plans[h - 1];
        let n = cfg.n_schedule.at(h)?;
        let step_before = gm.samples_used();
        let q_hat = match method {
            Method::Evi => {
                let v_next = v_hat.step(h + 1).clone();
                estimate_omega(plan, |s, a| bellman_cell(gm, &cell_key(h, s, a), (h, s, a), &v_next, n, 1.0, cfg.mode))?
            }
            Method::Mcpi => match cfg.mode {
                EstimationMode::ExactExpectation => {
                    let exact = mdp.bellman_matrix(h, &v_tail, 1.0);
                    let mut q = DMatrix::from_element(n_s, n_a, f64::NAN);
                    for (s, a) in plan.omega_cells() {
                        q[(s, a)] = exact[(s, a)];
                    }
                    q
                }
                EstimationMode::Sampled => {
                    let tail = Policy::Deterministic {
                        n_actions: n_a,
                        actions: actions.clone(),
                    };
                    estimate_omega(plan, |s, a| rollout_cell(gm, &cell_key(h, s, a), (h, s, a), &tail, n))?
                }
            },
        };
        let range = (horizon - h + 1) as f64;
        let eta = match cfg.mode {
            EstimationMode::ExactExpectation => 0.0,
            EstimationMode::Sampled => hoeffding_eta(range, plan.omega_size(), n, cfg.delta),
        };
        let mut done = complete_step(&q_hat, plan, cfg.d, eta, low_rank)?;
        if cfg.clip_range {
            done.q_bar.apply(|x| *x = x.clamp(0.0, range));
        }
        let greedy = greedy_actions(&done.q_bar);
        let v_h = match method {
            Method::Evi => row_max(&done.q_bar),
            Method::Mcpi => DVector::from_fn(n_s, |s, _| done.q_bar[(s, greedy[s])]),
        };
        if method == Method::Mcpi && cfg.mode == EstimationMode::ExactExpectation {
            let exact = mdp.bellman_matrix(h, &v_tail, 1.0);
            v_tail = DVector::from_fn(n_s, |s, _| exact[(s, greedy[s])]);
        }
        actions[h - 1] = greedy;
        *v_hat.step_mut(h) = v_h;
        per_step.push(StepRecord {
            h,
            plan: plan.clone(),
            n,
            omega_size: plan.omega_size(),
            samples: gm.samples_used() - step_before,
            sub_rank: done.sub_rank,
            rank_deficient: done.rank_deficient,
            report: done.report,
        });
        *q_bar.step_mut(h) = done.q_bar;
    }
    Ok(RunResult {
        q_bar,
        v_hat,
        policy: Policy::Deterministic { n_actions: n_a, actions },
        samples_used: gm.samples_used() - before,
        per_step,
        wall_time: start.elapsed(),
    })
}

/// Low-rank empirical value iteration.
pub fn lr_evi(gm: &GenerativeModel<'_>, cfg: &RunConfig) -> Result<RunResult> {
    run_finite(gm, cfg, Method::Evi, true)
}

/// Low-rank Monte Carlo policy iteration.
pub fn lr_mcpi(gm: &GenerativeModel<'_>, cfg: &RunConfig) -> Result<RunResult> {
    run_finite(gm, cfg, Method::Mcpi, true)
}

fn vanilla_config(n_schedule: NSchedule, mode: EstimationMode) -> RunConfig {
    RunConfig::new(1, AnchorSource::Sample { p1: 1.0, p2: 1.0 }, n_schedule, mode, 0)
}

/// Empirical value iteration on every cell.
pub fn vanilla_evi(gm: &GenerativeModel<'_>, n_schedule: NSchedule, mode: EstimationMode) -> Result<RunResult> {
    run_finite(gm, &vanilla_config(n_schedule, mode), Method::Evi, false)
}

/// Monte Carlo policy iteration on every cell.
pub fn vanilla_mcpi(gm: &GenerativeModel<'_>, n_schedule: NSchedule, mode: EstimationMode) -> Result<RunResult> {
    run_finite(gm, &vanilla_config(n_schedule, mode), Method::Mcpi, false)
}

/// `ceil(ln(eps (1 - gamma)) / ln((1 + gamma) / 2))`, or 0 when `eps (1 - gamma) >= 1`.
pub fn infinite_horizon_iterations(gamma: f64, epsilon: f64) -> Result<usize> {
    check_discount(gamma)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon={epsilon} must be positive")));
    }
    let t = ((epsilon * (1.0 - gamma)).ln() / ((1.0 + gamma) / 2.0).ln()).ceil();
    Ok(if t > 0.0 { t as usize } else { 0 })
}

/// `B_t = (1 / (1 - gamma)) ((1 + gamma) / 2)^t`.
pub fn error_envelope(gamma: f64, t: usize) -> f64 {
    ((1.0 + gamma) / 2.0).powi(t as i32) / (1.0 - gamma)
}

fn check_discount(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("discount gamma={gamma} must lie in (0, 1)")))
    }
}

/// Discounted LR-EVI on a horizon-1 wrapper: `T` rounds of anchor
/// estimation of `r + gamma P Vbar_{t-1}` from `Vbar_0 = 0`.
pub fn lr_evi_infinite(gm: &GenerativeModel<'_>, gamma: f64, epsilon: f64, cfg: &RunConfig) -> Result<RunResult> {
    let start = Instant::now();
    let mdp = gm.mdp();
    if mdp.horizon() != 1 {
        return Err(Error::InvalidArgument("discounted runs need a horizon-1 MDP wrapper".into()));
    }
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    if cfg.d == 0 || cfg.d > n_s.min(n_a) {
        return Err(Error::InvalidArgument(format!("rank d={} must lie in 1..={}", cfg.d, n_s.min(n_a))));
    }
    let iterations = infinite_horizon_iterations(gamma, epsilon)?;
    let plans = resolve_plans(cfg, n_s, n_a, iterations)?;
    let range = 1.0 / (1.0 - gamma);
    let before = gm.samples_used();
    let mut v_bar = DVector::zeros(n_s);
    let mut q_bar = DMatrix::zeros(n_s, n_a);
    let mut per_step = Vec::with_capacity(iterations);
    for t in 1..=iterations {
        let plan = &plans[t - 1];
        let n = cfg.n_schedule.at(t)?;
        let step_before = gm.samples_used();
        let q_hat = estimate_omega(plan, |s, a| bellman_cell(gm, &cell_key(t, s, a), (1, s, a), &v_bar, n, gamma, cfg.mode))?;
        let eta = match cfg.mode {
            EstimationMode::ExactExpectation => 0.0,
            EstimationMode::Sampled => hoeffding_eta(range, plan.omega_size(), n, cfg.delta),
        };
        let mut done = complete_step(&q_hat, plan, cfg.d, eta, true)?;
        if cfg.clip_range {
            done.q_bar.apply(|x| *x = x.clamp(0.0, range));
        }
        v_bar = row_max(&done.q_bar);
        per_step.push(StepRecord {
            h: t,
            plan: plan.clone(),
            n,
            omega_size: plan.omega_size(),
            samples: gm.samples_used() - step_before,
            sub_rank: done.sub_rank,
            rank_deficient: done.rank_deficient,
            report: done.report,
        });
        q_bar = done.q_bar;
    }
    let q_table = QTable::new(vec![q_bar])?;
    let mut v_hat = VTable::zeros(n_s, 1);
    *v_hat.step_mut(1) = v_bar;
    Ok(RunResult {
        policy: Policy::greedy(&q_table),
        q_bar: q_table,
        v_hat,
        samples_used: gm.samples_used() - before,
        per_step,
        wall_time: start.elapsed(),
    })
}

/// Which counterexample the recursion driver runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RecursionKind {
    DoublyExp,
    Exponential { alpha: f64 },
}

pub const DEFAULT_OVERFLOW_CAP: f64 = 1e300;

/// Errors realised by rank-1 policy evaluation on a two-state example.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursionTrace {
    pub kind: RecursionKind,
    pub horizon: usize,
    /// `eps[k]` is `eps_{H - k}`; shorter than `H` after an overflow.
    pub eps: Vec<f64>,
    /// Literal `Vhat_h(1)` (second state) from `rank1_complete_2x2`, same indexing.
    pub literal_v: Vec<f64>,
    /// Step at which `eps` first exceeded the cap.
    pub overflow_step: Option<usize>,
}

impl RecursionTrace {
    /// `eps_h`, if it was reached.
    pub fn eps_at(&self, h: usize) -> Option<f64> {
        self.eps.get(self.horizon.checked_sub(h)?).copied()
    }

    /// `(h, eps_h)` pairs in execution order.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.eps.iter().enumerate().map(|(k, &e)| (self.horizon - k, e))
    }
}

/// Runs policy evaluation of `pi_h(s) = s` with exact Bellman backups on
/// `{(0,0), (0,1), (1,0)}` and rank-1 completion of `(1,1)`, starting from a
/// terminal estimate perturbed by `eps_terminal` on the second state.
///
/// The error is propagated next to the exact `Q^pi` in a cancellation-free
/// form; the literal estimate is kept alongside as a cross-check.
pub fn recursion_driver(kind: RecursionKind, horizon: usize, eps_terminal: f64) -> Result<RecursionTrace> {
    recursion_driver_capped(kind, horizon, eps_terminal, DEFAULT_OVERFLOW_CAP)
}

pub fn recursion_driver_capped(kind: RecursionKind, horizon: usize, eps_terminal: f64, cap: f64) -> Result<RecursionTrace> {
    if !(eps_terminal >= 0.0 && eps_terminal.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps_terminal={eps_terminal} must be finite and >= 0")));
    }
    let (mdp, scale) = match kind {
        RecursionKind::DoublyExp => (gen_doubly_exp_mdp(horizon)?, 2.0),
        RecursionKind::Exponential { alpha } => (gen_exponential_variant_mdp(horizon, alpha)?, 1.0),
    };
    let (q, v) = exact_policy_eval(&mdp, &identity_policy(horizon))?;
    // error of Vhat against V^pi, per state
    let mut err = DVector::from_vec(vec![0.0, scale * eps_terminal]);
    let mut literal = v.step(horizon) + &err;
    let mut trace = RecursionTrace {
        kind,
        horizon,
        eps: vec![eps_terminal],
        literal_v: vec![literal[1]],
        overflow_step: None,
    };
    for h in (1..horizon).rev() {
        let qh = q.step(h);
        let e = |s: usize, a: usize| dot(mdp.transition(h, s, a), &err);
        let (e11, e12, e21) = (e(0, 0), e(0, 1), e(1, 0));
        let (q11, q12, q21, q22) = (qh[(0, 0)], qh[(0, 1)], qh[(1, 0)], qh[(1, 1)]);
        let err22 = (q12 * e21 + e12 * q21 + e12 * e21 + (q12 * q21 - q22 * q11) - q22 * e11) / (q11 + e11);
        err = DVector::from_vec(vec![e11, err22]);

        let lit = |s: usize, a: usize| mdp.mean_reward(h, s, a) + dot(mdp.transition(h, s, a), &literal);
        let (l11, l12, l21) = (lit(0, 0), lit(0, 1), lit(1, 0));
        literal = DVector::from_vec(vec![l11, rank1_complete_2x2(l11, l12, l21)?]);

        let eps = err22 / scale;
        if !eps.is_finite() || eps > cap {
            trace.overflow_step = Some(h);
            break;
        }
        trace.eps.push(eps);
        trace.literal_v.push(literal[1]);
    }
    Ok(trace)
}

/// Which sample-size formula to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "schedule")]
pub enum ScheduleKind {
    /// Exact policy identification under a suboptimality gap; accuracy is `Delta_min`.
    Gap,
    /// epsilon-optimal policy (MCPI); accuracy is `epsilon`.
    Qnolr,
    /// epsilon-optimal Q (EVI); accuracy is `epsilon`.
    Tklr,
    /// Discounted EVI; steps are the `T` iterations.
    Infinite { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CPrimeMode {
    Empirical,
    Theoretical,
}

/// Amplification constant and anchor sizes of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConstants {
    pub c_prime: f64,
    pub s_anchor: usize,
    pub a_anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleParams {
    pub horizon: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub delta: f64,
    pub accuracy: f64,
    /// Indexed by step `h - 1` (iteration `t - 1` for the discounted schedule).
    pub steps: Vec<StepConstants>,
    /// Ceiling applied to infinite or astronomically large values.
    pub n_cap: f64,
}

pub const DEFAULT_N_CAP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub n: Vec<u64>,
    pub capped: Vec<bool>,
}

impl Schedule {
    pub fn into_n_schedule(self) -> NSchedule {
        NSchedule::PerStep(self.n)
    }
}

/// Per-step `N` from the closed-form schedules, rounded up (at least 1).
///
/// With `t = H - h`, `L = ln(2 H |S||A| / delta)` and `K = c'^2 |S#|^2 |A#|^2`:
/// gap `2 (t+1)^2 K L / Delta^2`; qnolr `2 (t+1)^2 K H^2 L / eps^2`;
/// tklr `(t+1)^2 K H^2 L / (2 eps^2)`. The discounted schedule is
/// `2 K ln(2 T |S||A| / delta) / ((1 - gamma)^4 B_{t-1}^2)` for `t = 1..T`.
pub fn schedule_n(kind: ScheduleKind, p: &ScheduleParams) -> Result<Schedule> {
    if !(p.delta > 0.0 && p.delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta={} must lie in (0, 1)", p.delta)));
    }
    if !(p.accuracy > 0.0) {
        return Err(Error::InvalidArgument(format!("accuracy={} must be positive", p.accuracy)));
    }
    let cells = (p.n_states * p.n_actions) as f64;
    let hh = p.horizon as f64;
    if !matches!(kind, ScheduleKind::Infinite { .. }) && p.steps.len() != p.horizon {
        return Err(Error::DimensionMismatch(format!(
            "{} step constants for horizon {}",
            p.steps.len(),
            p.horizon
        )));
    }
    let raw: Vec<f64> = p
        .steps
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let k = (c.c_prime * (c.s_anchor * c.a_anchor) as f64).powi(2);
            match kind {
                ScheduleKind::Infinite { gamma } => {
                    let big_t = p.steps.len() as f64;
                    let b = error_envelope(gamma, i);
                    2.0 * k * (2.0 * big_t * cells / p.delta).ln() / ((1.0 - gamma).powi(4) * b * b)
                }
                _ => {
                    let t1 = (p.horizon - (i + 1) + 1) as f64;
                    let log = (2.0 * hh * cells / p.delta).ln();
                    let acc2 = p.accuracy * p.accuracy;
                    match kind {
                        ScheduleKind::Gap => 2.0 * t1 * t1 * k * log / acc2,
                        ScheduleKind::Qnolr => 2.0 * t1 * t1 * k * hh * hh * log / acc2,
                        ScheduleKind::Tklr => t1 * t1 * k * hh * hh * log / (2.0 * acc2),
                        ScheduleKind::Infinite { .. } => unreachable!(),
                    }
                }
            }
        })
        .collect();
    if let ScheduleKind::Infinite { gamma } = kind {
        check_discount(gamma)?;
    }
    let (n, capped) = raw
        .iter()
        .map(|&x| {
            if x.is_nan() || x > p.n_cap {
                (p.n_cap.ceil() as u64, true)
            } else {
                ((x.ceil() as u64).max(1), false)
            }
        })
        .unzip();
    Ok(Schedule { n, capped })
}

/// Step constants from oracle targets `targets[k]` and the plans that will be used.
pub fn step_constants(targets: &[DMatrix<f64>], plans: &[AnchorPlan], d: usize, mode: CPrimeMode) -> Result<Vec<StepConstants>> {
    if targets.len() != plans.len() {
        return Err(Error::DimensionMismatch(format!("{} targets for {} plans", targets.len(), plans.len())));
    }
    targets
        .iter()
        .zip(plans)
        .map(|(q, plan)| {
            let c_prime = match mode {
                CPrimeMode::Empirical => {
                    let sub = q.select_rows(plan.s_anchor()).select_columns(plan.a_anchor());
                    empirical_c_prime(q.amax(), SortedSvd::new(&sub).sigma(d))
                }
                CPrimeMode::Theoretical => match svd_report(q, d)?.kappa {
                    Some(kappa) => theoretical_c_prime(kappa, plan.n_states(), plan.n_actions()),
                    None => f64::INFINITY,
                },
            };
            Ok(StepConstants {
                c_prime,
                s_anchor: plan.s_anchor().len(),
                a_anchor: plan.a_anchor().len(),
            })
        })
        .collect()
}

/// `sum_h (c'_h |S#_h||A#_h| + 1)(xi_{h,R} + (H - h) xi_{h,P})`, with `c'_h`
/// measured on the target `r_h + P_h Vhat_{h+1}` that an exact-mode EVI run
/// actually completed.
pub fn approx_rank_bound(mdp: &TabularMdp, run: &RunResult, cert: &ApproxRankCertificate, d: usize) -> Result<f64> {
    let horizon = mdp.horizon();
    if cert.xi_r.len() != horizon || cert.xi_p.len() != horizon {
        return Err(Error::DimensionMismatch("certificate length differs from the horizon".into()));
    }
    let mut total = 0.0;
    for rec in &run.per_step {
        let h = rec.h;
        let target = mdp.bellman_matrix(h, run.v_hat.step(h + 1), 1.0);
        let sub = target
            .select_rows(rec.plan.s_anchor())
            .select_columns(rec.plan.a_anchor());
        let c = empirical_c_prime(target.amax(), SortedSvd::new(&sub).sigma(d));
        let size = (rec.plan.s_anchor().len() * rec.plan.a_anchor().len()) as f64;
        total += (c * size + 1.0) * (cert.xi_r[h - 1] + (horizon - h) as f64 * cert.xi_p[h - 1]);
    }
    Ok(total)
}
