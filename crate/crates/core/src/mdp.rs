//! Finite-horizon tabular MDPs, policies, exact dynamic-programming oracles
//! and the generative-model sampling facade.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Tolerance on transition-vector and stochastic-policy row sums.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Deviations at or below this are treated as ties when computing the
/// suboptimality gap.
pub const GAP_TOL: f64 = 1e-12;

/// Reward distribution of a single `(h, s, a)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reward {
    Deterministic(f64),
    Bernoulli(f64),
}

impl Reward {
    pub fn mean(&self) -> f64 {
        match *self {
            Reward::Deterministic(v) | Reward::Bernoulli(v) => v,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Reward::Deterministic(v) => v,
            Reward::Bernoulli(p) => {
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Sum of `n` independent draws, sampled in one shot.
    pub fn sample_sum<R: Rng + ?Sized>(&self, n: u64, rng: &mut R) -> f64 {
        match *self {
            Reward::Deterministic(v) => n as f64 * v,
            Reward::Bernoulli(p) => binomial(n, p, rng) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardDoc {
    kind: RewardKind,
    p: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
enum RewardKind {
    #[serde(rename = "det")]
    Det,
    #[serde(rename = "bern")]
    Bern,
}

impl From<Reward> for RewardDoc {
    fn from(r: Reward) -> Self {
        match r {
            Reward::Deterministic(p) => RewardDoc {
                kind: RewardKind::Det,
                p,
            },
            Reward::Bernoulli(p) => RewardDoc {
                kind: RewardKind::Bern,
                p,
            },
        }
    }
}

impl From<RewardDoc> for Reward {
    fn from(d: RewardDoc) -> Self {
        match d.kind {
            RewardKind::Det => Reward::Deterministic(d.p),
            RewardKind::Bern => Reward::Bernoulli(d.p),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    rewards: Vec<Vec<Vec<RewardDoc>>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    evaluation_only: bool,
}

/// Finite-horizon MDP `(S, A, P, R, H)` with time-dependent kernels.
///
/// An *evaluation-only* MDP may carry deterministic rewards outside `[0, 1]`;
/// it is accepted by the exact oracles but refused by [`GenerativeModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    // index ((h0 * S + s) * A + a) * S + s'
    transitions: Vec<f64>,
    // index (h0 * S + s) * A + a
    rewards: Vec<Reward>,
    evaluation_only: bool,
}

impl TabularMdp {
    /// Builds an MDP from a cell function `(h, s, a) -> (P_h(.|s,a), R_h(s,a))`.
    pub fn from_fn<F>(n_states: usize, n_actions: usize, horizon: usize, cell: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> (Vec<f64>, Reward),
    {
        Self::build(n_states, n_actions, horizon, false, cell)
    }

    /// Like [`TabularMdp::from_fn`] but permits signed deterministic rewards.
    pub fn evaluation_only_from_fn<F>(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        cell: F,
    ) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> (Vec<f64>, Reward),
    {
        Self::build(n_states, n_actions, horizon, true, cell)
    }

    fn build<F>(n_states: usize, n_actions: usize, horizon: usize, evaluation_only: bool, mut cell: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> (Vec<f64>, Reward),
    {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err(Error::InvalidMdp(format!(
                "dimensions must be positive (|S|={n_states}, |A|={n_actions}, H={horizon})"
            )));
        }
        let cells = horizon * n_states * n_actions;
        let mut transitions = Vec::with_capacity(cells * n_states);
        let mut rewards = Vec::with_capacity(cells);
        for h in 1..=horizon {
            for s in 0..n_states {
                for a in 0..n_actions {
                    let (p, r) = cell(h, s, a);
                    if p.len() != n_states {
                        return Err(Error::InvalidMdp(format!(
                            "transition ({h},{s},{a}) has length {} (expected {n_states})",
                            p.len()
                        )));
                    }
                    transitions.extend_from_slice(&p);
                    rewards.push(r);
                }
            }
        }
        let mdp = TabularMdp {
            n_states,
            n_actions,
            horizon,
            transitions,
            rewards,
            evaluation_only,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        for h in 1..=self.horizon {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let p = self.transition(h, s, a);
                    if let Some(bad) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
                        return Err(Error::InvalidMdp(format!(
                            "transition ({h},{s},{a}) has invalid entry {bad}"
                        )));
                    }
                    let sum: f64 = p.iter().sum();
                    if (sum - 1.0).abs() > PROB_SUM_TOL {
                        return Err(Error::InvalidMdp(format!(
                            "transition ({h},{s},{a}) sums to {sum}"
                        )));
                    }
                    match self.reward(h, s, a) {
                        Reward::Bernoulli(p) if !(0.0..=1.0).contains(&p) => {
                            return Err(Error::InvalidMdp(format!(
                                "reward ({h},{s},{a}) Bernoulli parameter {p} outside [0, 1]"
                            )))
                        }
                        Reward::Deterministic(v) if !v.is_finite() => {
                            return Err(Error::InvalidMdp(format!("reward ({h},{s},{a}) is {v}")))
                        }
                        Reward::Deterministic(v) if !self.evaluation_only && !(0.0..=1.0).contains(&v) => {
                            return Err(Error::InvalidMdp(format!(
                                "reward ({h},{s},{a}) value {v} outside [0, 1]"
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_evaluation_only(&self) -> bool {
        self.evaluation_only
    }

    #[inline]
    fn cell_index(&self, h: usize, s: usize, a: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&h));
        ((h - 1) * self.n_states + s) * self.n_actions + a
    }

    pub fn check_index(&self, h: usize, s: usize, a: usize) -> Result<()> {
        if !(1..=self.horizon).contains(&h) || s >= self.n_states || a >= self.n_actions {
            return Err(Error::IndexOutOfRange(format!(
                "(h={h}, s={s}, a={a}) for H={}, |S|={}, |A|={}",
                self.horizon, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }

    /// `P_h(.|s, a)`.
    pub fn transition(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = self.cell_index(h, s, a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> Reward {
        self.rewards[self.cell_index(h, s, a)]
    }

    pub fn mean_reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.reward(h, s, a).mean()
    }

    /// `r_h` as an `|S| x |A|` matrix.
    pub fn reward_matrix(&self, h: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_actions, |s, a| self.mean_reward(h, s, a))
    }

    /// `[P_h v](s, a) = sum_{s'} P_h(s'|s,a) v(s')`.
    pub fn expected_next(&self, h: usize, v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_actions, |s, a| dot(self.transition(h, s, a), v))
    }

    /// `r_h + discount * P_h v`.
    pub fn bellman_matrix(&self, h: usize, v: &DVector<f64>, discount: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_actions, |s, a| {
            self.mean_reward(h, s, a) + discount * dot(self.transition(h, s, a), v)
        })
    }

    /// The slice `P_h(s_next | ., .)` as an `|S| x |A|` matrix.
    pub fn kernel_slice(&self, h: usize, s_next: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_actions, |s, a| self.transition(h, s, a)[s_next])
    }

    pub fn to_json(&self) -> Result<String> {
        let (s_n, a_n) = (self.n_states, self.n_actions);
        let doc = MdpDocument {
            n_states: s_n,
            n_actions: a_n,
            horizon: self.horizon,
            transitions: (1..=self.horizon)
                .map(|h| {
                    (0..s_n)
                        .map(|s| (0..a_n).map(|a| self.transition(h, s, a).to_vec()).collect())
                        .collect()
                })
                .collect(),
            rewards: (1..=self.horizon)
                .map(|h| {
                    (0..s_n)
                        .map(|s| (0..a_n).map(|a| self.reward(h, s, a).into()).collect())
                        .collect()
                })
                .collect(),
            evaluation_only: self.evaluation_only,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        let shape_err = |what: &str| {
            Error::InvalidMdp(format!(
                "{what} array shape does not match [H={}][|S|={}][|A|={}]",
                doc.horizon, doc.n_states, doc.n_actions
            ))
        };
        fn shaped<T>(arr: &[Vec<Vec<T>>], horizon: usize, n_s: usize, n_a: usize) -> bool {
            arr.len() == horizon && arr.iter().all(|hs| hs.len() == n_s && hs.iter().all(|sa| sa.len() == n_a))
        }
        if !shaped(&doc.transitions, doc.horizon, doc.n_states, doc.n_actions) {
            return Err(shape_err("transitions"));
        }
        if !shaped(&doc.rewards, doc.horizon, doc.n_states, doc.n_actions) {
            return Err(shape_err("rewards"));
        }
        Self::build(doc.n_states, doc.n_actions, doc.horizon, doc.evaluation_only, |h, s, a| {
            (doc.transitions[h - 1][s][a].clone(), doc.rewards[h - 1][s][a].into())
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn dot(p: &[f64], v: &DVector<f64>) -> f64 {
    p.iter().zip(v.iter()).map(|(p, v)| p * v).sum()
}

/// Per-step action-value matrices `Q_1, ..., Q_H`, each `|S| x |A|`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    steps: Vec<DMatrix<f64>>,
}

impl QTable {
    pub fn new(steps: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = steps.first() else {
            return Err(Error::DimensionMismatch("QTable needs at least one step".into()));
        };
        let shape = first.shape();
        if steps.iter().any(|m| m.shape() != shape) {
            return Err(Error::DimensionMismatch("QTable steps differ in shape".into()));
        }
        Ok(QTable { steps })
    }

    pub fn zeros(n_states: usize, n_actions: usize, horizon: usize) -> Self {
        QTable {
            steps: vec![DMatrix::zeros(n_states, n_actions); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.steps[0].shape()
    }

    /// `Q_h` for `h` in `1..=H`.
    pub fn step(&self, h: usize) -> &DMatrix<f64> {
        &self.steps[h - 1]
    }

    pub fn step_mut(&mut self, h: usize) -> &mut DMatrix<f64> {
        &mut self.steps[h - 1]
    }

    pub fn steps(&self) -> &[DMatrix<f64>] {
        &self.steps
    }

    /// `max_{h,s,a} |self - other|`.
    pub fn max_abs_diff(&self, other: &QTable) -> Result<f64> {
        if self.horizon() != other.horizon() || self.shape() != other.shape() {
            return Err(Error::DimensionMismatch("QTable shapes differ".into()));
        }
        Ok(self
            .steps
            .iter()
            .zip(&other.steps)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max))
    }

    /// Adds `delta` to every entry.
    pub fn shifted(&self, delta: f64) -> QTable {
        QTable {
            steps: self.steps.iter().map(|m| m.add_scalar(delta)).collect(),
        }
    }
}

/// Value vectors `V_1, ..., V_{H+1}` with `V_{H+1} = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct VTable {
    steps: Vec<DVector<f64>>,
}

impl VTable {
    pub fn zeros(n_states: usize, horizon: usize) -> Self {
        VTable {
            steps: vec![DVector::zeros(n_states); horizon + 1],
        }
    }

    /// Number of decision steps `H` (the table stores `H + 1` vectors).
    pub fn horizon(&self) -> usize {
        self.steps.len() - 1
    }

    /// `V_h` for `h` in `1..=H+1`.
    pub fn step(&self, h: usize) -> &DVector<f64> {
        &self.steps[h - 1]
    }

    pub fn step_mut(&mut self, h: usize) -> &mut DVector<f64> {
        &mut self.steps[h - 1]
    }

    /// `max_{h<=H,s} |self - other|`.
    pub fn max_abs_diff(&self, other: &VTable) -> Result<f64> {
        if self.steps.len() != other.steps.len() || self.steps[0].len() != other.steps[0].len() {
            return Err(Error::DimensionMismatch("VTable shapes differ".into()));
        }
        Ok(self
            .steps
            .iter()
            .zip(&other.steps)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max))
    }
}

/// Time-dependent policy `pi = {pi_h}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// `actions[h - 1][s]` is the action taken in state `s` at step `h`.
    Deterministic { n_actions: usize, actions: Vec<Vec<usize>> },
    /// `probs[h - 1]` is an `|S| x |A|` row-stochastic matrix.
    Stochastic { probs: Vec<DMatrix<f64>> },
}

impl Policy {
    pub fn deterministic(n_actions: usize, actions: Vec<Vec<usize>>) -> Result<Self> {
        let n_states = actions.first().map(Vec::len).unwrap_or(0);
        if actions.is_empty() || n_states == 0 || actions.iter().any(|row| row.len() != n_states) {
            return Err(Error::DimensionMismatch("ragged or empty deterministic policy".into()));
        }
        if let Some(&a) = actions.iter().flatten().find(|&&a| a >= n_actions) {
            return Err(Error::IndexOutOfRange(format!("policy action {a} >= |A|={n_actions}")));
        }
        Ok(Policy::Deterministic { n_actions, actions })
    }

    pub fn stochastic(probs: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = probs.first() else {
            return Err(Error::DimensionMismatch("empty stochastic policy".into()));
        };
        let shape = first.shape();
        for (i, m) in probs.iter().enumerate() {
            if m.shape() != shape {
                return Err(Error::DimensionMismatch("stochastic policy steps differ in shape".into()));
            }
            for (s, row) in m.row_iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "policy row (h={}, s={s}) is not a probability vector",
                        i + 1
                    )));
                }
            }
        }
        Ok(Policy::Stochastic { probs })
    }

    /// Greedy policy of a Q table, ties to the lowest action index.
    pub fn greedy(q: &QTable) -> Policy {
        let (_, n_actions) = q.shape();
        Policy::Deterministic {
            n_actions,
            actions: q.steps().iter().map(greedy_actions).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Policy::Deterministic { actions, .. } => actions.len(),
            Policy::Stochastic { probs } => probs.len(),
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            Policy::Deterministic { actions, .. } => actions[0].len(),
            Policy::Stochastic { probs } => probs[0].nrows(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Policy::Deterministic { n_actions, .. } => *n_actions,
            Policy::Stochastic { probs } => probs[0].ncols(),
        }
    }

    /// `pi_h(a | s)`.
    pub fn probability(&self, h: usize, s: usize, a: usize) -> f64 {
        match self {
            Policy::Deterministic { actions, .. } => {
                if actions[h - 1][s] == a {
                    1.0
                } else {
                    0.0
                }
            }
            Policy::Stochastic { probs } => probs[h - 1][(s, a)],
        }
    }

    /// The action at `(h, s)` for deterministic policies.
    pub fn action(&self, h: usize, s: usize) -> Option<usize> {
        match self {
            Policy::Deterministic { actions, .. } => Some(actions[h - 1][s]),
            Policy::Stochastic { .. } => None,
        }
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.horizon() != mdp.horizon() || self.n_states() != mdp.n_states() || self.n_actions() != mdp.n_actions() {
            return Err(Error::DimensionMismatch(format!(
                "policy (H={}, |S|={}, |A|={}) vs MDP (H={}, |S|={}, |A|={})",
                self.horizon(),
                self.n_states(),
                self.n_actions(),
                mdp.horizon(),
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// Row-wise argmax with ties to the lowest index.
pub fn greedy_actions(q: &DMatrix<f64>) -> Vec<usize> {
    q.row_iter()
        .map(|row| {
            let mut best = 0;
            for a in 1..row.len() {
                if row[a] > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

fn row_max(q: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(q.nrows(), q.row_iter().map(|r| r.max()))
}

/// `Q*`, `V*` and the lowest-index greedy optimal policy.
#[derive(Debug, Clone)]
pub struct OptimalSolution {
    pub q: QTable,
    pub v: VTable,
    pub policy: Policy,
}

/// Exact backward induction on the Bellman optimality equations.
pub fn exact_backward_induction(mdp: &TabularMdp) -> OptimalSolution {
    let (n_s, n_a, horizon) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let mut q = QTable::zeros(n_s, n_a, horizon);
    let mut v = VTable::zeros(n_s, horizon);
    for h in (1..=horizon).rev() {
        let q_h = mdp.bellman_matrix(h, v.step(h + 1), 1.0);
        *v.step_mut(h) = row_max(&q_h);
        *q.step_mut(h) = q_h;
    }
    let policy = Policy::greedy(&q);
    OptimalSolution { q, v, policy }
}

/// Exact `Q^pi`, `V^pi` by backward recursion.
pub fn exact_policy_eval(mdp: &TabularMdp, pi: &Policy) -> Result<(QTable, VTable)> {
    pi.check_against(mdp)?;
    let (n_s, n_a, horizon) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let mut q = QTable::zeros(n_s, n_a, horizon);
    let mut v = VTable::zeros(n_s, horizon);
    for h in (1..=horizon).rev() {
        let q_h = mdp.bellman_matrix(h, v.step(h + 1), 1.0);
        let v_h = DVector::from_fn(n_s, |s, _| (0..n_a).map(|a| pi.probability(h, s, a) * q_h[(s, a)]).sum());
        *v.step_mut(h) = v_h;
        *q.step_mut(h) = q_h;
    }
    Ok((q, v))
}

/// Smallest strictly positive `V*_h(s) - Q*_h(s, a)`, or `+inf` when every
/// action is optimal everywhere.
pub fn suboptimality_gap(mdp: &TabularMdp) -> f64 {
    let opt = exact_backward_induction(mdp);
    let mut gap = f64::INFINITY;
    for h in 1..=mdp.horizon() {
        let q = opt.q.step(h);
        let v = opt.v.step(h);
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let d = v[s] - q[(s, a)];
                if d > GAP_TOL && d < gap {
                    gap = d;
                }
            }
        }
    }
    gap
}

/// What [`is_eps_optimal`] compares against the oracle.
#[derive(Debug, Clone, Copy)]
pub enum Candidate<'a> {
    Q(&'a QTable),
    Policy(&'a Policy),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsCheck {
    pub deviation: f64,
    pub within: bool,
}

/// `max |Q* - Q|` for a table, `max |V* - V^pi|` for a policy, and whether it is `<= eps`.
pub fn is_eps_optimal(candidate: Candidate<'_>, mdp: &TabularMdp, eps: f64) -> Result<EpsCheck> {
    let opt = exact_backward_induction(mdp);
    let deviation = match candidate {
        Candidate::Q(q) => opt.q.max_abs_diff(q)?,
        Candidate::Policy(pi) => {
            let (_, v_pi) = exact_policy_eval(mdp, pi)?;
            opt.v.max_abs_diff(&v_pi)?
        }
    };
    Ok(EpsCheck {
        deviation,
        within: deviation <= eps,
    })
}

/// Optimal `Q*`, `V*` and greedy policy of a time-homogeneous discounted MDP
/// (horizon-1 wrapper), by exact policy iteration.
pub fn discounted_optimal(mdp: &TabularMdp, gamma: f64) -> Result<(DMatrix<f64>, DVector<f64>, Vec<usize>)> {
    if mdp.horizon() != 1 {
        return Err(Error::InvalidArgument(
            "discounted MDPs are stored as horizon-1 (time-homogeneous) wrappers".into(),
        ));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("discount {gamma} outside [0, 1)")));
    }
    let n = mdp.n_states();
    let mut policy = vec![0usize; n];
    let max_iter = 10_000;
    for _ in 0..max_iter {
        let mut system = DMatrix::<f64>::identity(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for s in 0..n {
            let a = policy[s];
            rhs[s] = mdp.mean_reward(1, s, a);
            for (s2, p) in mdp.transition(1, s, a).iter().enumerate() {
                system[(s, s2)] -= gamma * p;
            }
        }
        let v = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidArgument("singular policy-evaluation system".into()))?;
        let q = mdp.bellman_matrix(1, &v, gamma);
        let mut changed = false;
        for s in 0..n {
            let greedy = greedy_actions(&q.rows(s, 1).into_owned())[0];
            if q[(s, greedy)] > q[(s, policy[s])] + 1e-13 * (1.0 + q[(s, policy[s])].abs()) {
                policy[s] = greedy;
                changed = true;
            }
        }
        if !changed {
            return Ok((q, v, policy));
        }
    }
    Err(Error::InvalidArgument("policy iteration did not converge".into()))
}

/// Sampling facade over an MDP: the only channel learning algorithms use.
///
/// `samples_used` counts `(reward, next state)` draws. Serial draws come from
/// the model's own stream; [`GenerativeModel::cell_stream`] derives
/// independent child streams keyed by integers so that parallel work is
/// reproducible regardless of scheduling.
#[derive(Debug)]
pub struct GenerativeModel<'m> {
    mdp: &'m TabularMdp,
    seed: u64,
    rng: ChaCha8Rng,
    samples_used: AtomicU64,
}

impl<'m> GenerativeModel<'m> {
    pub fn new(mdp: &'m TabularMdp, seed: u64) -> Result<Self> {
        if mdp.is_evaluation_only() {
            return Err(Error::EvaluationOnly);
        }
        Ok(GenerativeModel {
            mdp,
            seed,
            rng: rng::stream(seed, &[]),
            samples_used: AtomicU64::new(0),
        })
    }

    pub fn mdp(&self) -> &'m TabularMdp {
        self.mdp
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples_used(&self) -> u64 {
        self.samples_used.load(Ordering::Relaxed)
    }

    fn charge(&self, n: u64) {
        self.samples_used.fetch_add(n, Ordering::Relaxed);
    }

    /// One `(reward, next state)` draw from the model's serial stream.
    pub fn sample_transition(&mut self, h: usize, s: usize, a: usize) -> Result<(f64, usize)> {
        self.mdp.check_index(h, s, a)?;
        let out = draw_transition(self.mdp, h, s, a, &mut self.rng);
        self.charge(1);
        Ok(out)
    }

    /// Child stream keyed by `key` (typically `[h, s, a, replicate]`).
    pub fn cell_stream(&self, key: &[u64]) -> CellStream<'_, 'm> {
        let mut full = Vec::with_capacity(key.len() + 1);
        full.push(rng::tag::CELL);
        full.extend_from_slice(key);
        CellStream {
            model: self,
            rng: rng::stream(self.seed, &full),
        }
    }
}

/// Aggregate of `n` independent draws from one `(h, s, a)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub n: u64,
    pub reward_sum: f64,
    /// Empty when next states were not requested.
    pub next_counts: Vec<u64>,
}

/// A derived sampling stream that charges the parent model's counter.
#[derive(Debug)]
pub struct CellStream<'g, 'm> {
    model: &'g GenerativeModel<'m>,
    rng: ChaCha8Rng,
}

impl<'g, 'm> CellStream<'g, 'm> {
    pub fn mdp(&self) -> &'m TabularMdp {
        self.model.mdp
    }

    pub fn sample_transition(&mut self, h: usize, s: usize, a: usize) -> Result<(f64, usize)> {
        self.model.mdp.check_index(h, s, a)?;
        let out = draw_transition(self.model.mdp, h, s, a, &mut self.rng);
        self.model.charge(1);
        Ok(out)
    }

    /// `n` draws summarised as a reward sum and next-state counts.
    ///
    /// The pair has exactly the joint law of `n` independent calls to
    /// [`CellStream::sample_transition`] (binomial reward totals, multinomial
    /// next-state counts), at a cost independent of `n`. The counter is
    /// charged `n` draws either way.
    pub fn sample_batch(&mut self, h: usize, s: usize, a: usize, n: u64, with_next: bool) -> Result<TransitionBatch> {
        let mdp = self.model.mdp;
        mdp.check_index(h, s, a)?;
        let reward_sum = mdp.reward(h, s, a).sample_sum(n, &mut self.rng);
        let next_counts = if with_next {
            multinomial(mdp.transition(h, s, a), n, &mut self.rng)
        } else {
            Vec::new()
        };
        self.model.charge(n);
        Ok(TransitionBatch {
            n,
            reward_sum,
            next_counts,
        })
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

fn draw_transition<R: Rng + ?Sized>(mdp: &TabularMdp, h: usize, s: usize, a: usize, rng: &mut R) -> (f64, usize) {
    let reward = mdp.reward(h, s, a).sample(rng);
    let next = draw_index(mdp.transition(h, s, a), rng.random::<f64>());
    (reward, next)
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
fn draw_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

pub(crate) fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p).expect("p in (0, 1)").sample(rng)
    }
}

/// Multinomial counts via sequential conditional binomials.
pub(crate) fn multinomial<R: Rng + ?Sized>(probs: &[f64], n: u64, rng: &mut R) -> Vec<u64> {
    let mut counts = vec![0u64; probs.len()];
    let mut remaining = n;
    let mut mass = 1.0f64;
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if p <= 0.0 {
            continue;
        }
        if i == last {
            counts[i] = remaining;
            break;
        }
        let k = binomial(remaining, (p / mass).min(1.0), rng);
        counts[i] = k;
        remaining -= k;
        mass -= p;
        if mass <= 0.0 {
            counts[last] += remaining;
            break;
        }
    }
    counts
}
