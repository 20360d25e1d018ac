//! Experiment configuration: strict JSON in, fully resolved spec out.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::{CPrimeMode, EstimationMode, RecursionKind, DEFAULT_N_CAP};
use crate::error::{Error, Result};
use crate::estimation::DEFAULT_MAX_ANCHOR_RETRIES;
use crate::generators::TuckerMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Recursion,
    AnchorRecovery,
    Amplification,
    LreviTucker,
    LrmcpiGap,
    LrmcpiEps,
    InfiniteHorizon,
    ApproxRank,
    EpsRankExample,
    BaselineCompare,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 10] = [
        ExperimentId::Recursion,
        ExperimentId::AnchorRecovery,
        ExperimentId::Amplification,
        ExperimentId::LreviTucker,
        ExperimentId::LrmcpiGap,
        ExperimentId::LrmcpiEps,
        ExperimentId::InfiniteHorizon,
        ExperimentId::ApproxRank,
        ExperimentId::EpsRankExample,
        ExperimentId::BaselineCompare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Recursion => "recursion",
            ExperimentId::AnchorRecovery => "anchor_recovery",
            ExperimentId::Amplification => "amplification",
            ExperimentId::LreviTucker => "lrevi_tucker",
            ExperimentId::LrmcpiGap => "lrmcpi_gap",
            ExperimentId::LrmcpiEps => "lrmcpi_eps",
            ExperimentId::InfiniteHorizon => "infinite_horizon",
            ExperimentId::ApproxRank => "approx_rank",
            ExperimentId::EpsRankExample => "eps_rank_example",
            ExperimentId::BaselineCompare => "baseline_compare",
        }
    }

    /// Experiments driven by a generated MDP and a learning algorithm.
    pub fn is_mdp_run(self) -> bool {
        matches!(
            self,
            ExperimentId::LreviTucker
                | ExperimentId::LrmcpiGap
                | ExperimentId::LrmcpiEps
                | ExperimentId::InfiniteHorizon
                | ExperimentId::ApproxRank
                | ExperimentId::BaselineCompare
        )
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecursionKindName {
    DoublyExp,
    Exponential,
}

/// Fully resolved experiment description. Every field is concrete, so the
/// serialised form re-parses to the same value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub replicates: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub d: usize,
    pub mode: EstimationMode,
    pub tucker_mode: TuckerMode,
    pub p1: f64,
    pub p2: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub eps_terminal: f64,
    pub kind: RecursionKindName,
    pub min_gap: f64,
    pub noise_level: f64,
    pub n_per_step: Option<u64>,
    pub c_prime_mode: CPrimeMode,
    pub n_cap: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub d_max: usize,
    pub sizes: Vec<usize>,
    pub anchor_count: usize,
    pub m: usize,
    pub clip_range: bool,
    pub record_timing: bool,
    pub max_anchor_retries: usize,
    /// Redraw a step's anchors while the oracle target's anchor block has rank below `d`.
    pub oracle_anchor_check: bool,
    pub mu_max: Option<f64>,
    pub kappa_max: Option<f64>,
}

impl ExperimentSpec {
    pub fn recursion_kind(&self) -> RecursionKind {
        match self.kind {
            RecursionKindName::DoublyExp => RecursionKind::DoublyExp,
            RecursionKindName::Exponential => RecursionKind::Exponential { alpha: self.alpha },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: ExperimentId,
    seed: Option<u64>,
    replicates: Option<usize>,
    n_states: Option<usize>,
    n_actions: Option<usize>,
    horizon: Option<usize>,
    d: Option<usize>,
    mode: Option<EstimationMode>,
    tucker_mode: Option<TuckerMode>,
    p1: Option<f64>,
    p2: Option<f64>,
    epsilon: Option<f64>,
    delta: Option<f64>,
    gamma: Option<f64>,
    alpha: Option<f64>,
    eps_terminal: Option<f64>,
    kind: Option<RecursionKindName>,
    min_gap: Option<f64>,
    noise_level: Option<f64>,
    n_per_step: Option<u64>,
    c_prime_mode: Option<CPrimeMode>,
    n_cap: Option<f64>,
    n_min: Option<usize>,
    n_max: Option<usize>,
    d_max: Option<usize>,
    sizes: Option<Vec<usize>>,
    anchor_count: Option<usize>,
    m: Option<usize>,
    clip_range: Option<bool>,
    record_timing: Option<bool>,
    max_anchor_retries: Option<usize>,
    oracle_anchor_check: Option<bool>,
    mu_max: Option<f64>,
    kappa_max: Option<f64>,
    /// Echoed by the resolved sidecar; ignored on input.
    #[allow(dead_code)]
    warnings: Option<Vec<String>>,
}

struct Defaults {
    replicates: usize,
    size: (usize, usize, usize, usize),
    mode: EstimationMode,
    p: f64,
    epsilon: f64,
}

fn defaults(id: ExperimentId) -> Defaults {
    use EstimationMode::*;
    let (replicates, size, mode, p, epsilon) = match id {
        ExperimentId::Recursion => (1, (2, 2, 25, 1), ExactExpectation, 1.0, 0.5),
        ExperimentId::AnchorRecovery => (100, (200, 200, 1, 4), ExactExpectation, 0.2, 0.5),
        ExperimentId::Amplification => (100, (80, 80, 1, 3), ExactExpectation, 0.2, 0.5),
        ExperimentId::LreviTucker => (20, (30, 30, 5, 2), ExactExpectation, 0.3, 0.5),
        ExperimentId::LrmcpiGap => (10, (20, 20, 4, 2), Sampled, 0.3, 0.5),
        ExperimentId::LrmcpiEps => (10, (20, 20, 4, 2), Sampled, 0.3, 0.5),
        ExperimentId::InfiniteHorizon => (5, (20, 20, 1, 2), ExactExpectation, 0.5, 0.1),
        ExperimentId::ApproxRank => (10, (20, 20, 4, 2), ExactExpectation, 0.3, 0.5),
        ExperimentId::EpsRankExample => (10, (21, 21, 2, 2), ExactExpectation, 1.0, 0.15),
        ExperimentId::BaselineCompare => (2, (80, 80, 3, 2), Sampled, 0.3, 0.5),
    };
    Defaults {
        replicates,
        size,
        mode,
        p,
        epsilon,
    }
}

/// Parsed spec plus the warnings produced while resolving it.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub spec: ExperimentSpec,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    #[serde(flatten)]
    spec: &'a ExperimentSpec,
    warnings: &'a [String],
}

impl Resolved {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Sidecar {
            spec: &self.spec,
            warnings: &self.warnings,
        })?)
    }
}

pub fn parse_config_str(text: &str) -> Result<Resolved> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { String::new() } else { path }, e.inner().to_string())
    })?;
    resolve(raw)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<Resolved> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
    parse_config_str(&text)
}

fn positive(key: &str, x: f64) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::config(key, format!("{x} must be positive and finite")))
    }
}

fn open_unit(key: &str, x: f64) -> Result<f64> {
    if x > 0.0 && x < 1.0 {
        Ok(x)
    } else {
        Err(Error::config(key, format!("{x} must lie in (0, 1)")))
    }
}

fn at_least(key: &str, x: usize, min: usize) -> Result<usize> {
    if x >= min {
        Ok(x)
    } else {
        Err(Error::config(key, format!("{x} must be at least {min}")))
    }
}

fn probability(key: &str, x: f64, warnings: &mut Vec<String>) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::config(key, format!("{x} must lie in (0, 1]")));
    }
    if x > 1.0 {
        warnings.push(format!("{key}={x} clipped to 1"));
        return Ok(1.0);
    }
    Ok(x)
}

fn resolve(raw: RawConfig) -> Result<Resolved> {
    let id = raw.experiment;
    let def = defaults(id);
    let mut warnings = Vec::new();
    let (ds, da, dh, dd) = def.size;
    let m = at_least("m", raw.m.unwrap_or(20), 2)?;
    let (n_states, n_actions, horizon) = if id == ExperimentId::EpsRankExample {
        (m + 1, m + 1, 2)
    } else {
        (
            at_least("n_states", raw.n_states.unwrap_or(ds), 1)?,
            at_least("n_actions", raw.n_actions.unwrap_or(da), 1)?,
            at_least("horizon", raw.horizon.unwrap_or(dh), 1)?,
        )
    };
    let d = at_least("d", raw.d.unwrap_or(dd), 1)?;
    if id.is_mdp_run() && id != ExperimentId::BaselineCompare && d > n_states.min(n_actions) {
        return Err(Error::config("d", format!("{d} exceeds min(n_states, n_actions)")));
    }
    if id == ExperimentId::Recursion && horizon < 2 {
        return Err(Error::config("horizon", "recursion needs horizon >= 2"));
    }
    if id == ExperimentId::InfiniteHorizon && horizon != 1 {
        return Err(Error::config("horizon", "discounted runs use a horizon-1 wrapper"));
    }
    if id == ExperimentId::LrmcpiGap && d != 2 {
        return Err(Error::config("d", "the gap construction has rank 2"));
    }
    let (n_min, n_max) = match id {
        ExperimentId::AnchorRecovery => (raw.n_min.unwrap_or(50), raw.n_max.unwrap_or(200)),
        _ => (raw.n_min.unwrap_or(30), raw.n_max.unwrap_or(80)),
    };
    let d_max = at_least("d_max", raw.d_max.unwrap_or(dd), 1)?;
    if n_min > n_max {
        return Err(Error::config("n_min", format!("{n_min} exceeds n_max={n_max}")));
    }
    if d_max > n_min {
        return Err(Error::config("d_max", format!("{d_max} exceeds n_min={n_min}")));
    }
    let sizes = raw.sizes.unwrap_or_else(|| vec![10, 20, 40, 80]);
    if sizes.is_empty() {
        return Err(Error::config("sizes", "must not be empty"));
    }
    if let Some(&bad) = sizes.iter().find(|&&n| n < d) {
        return Err(Error::config("sizes", format!("size {bad} is smaller than d={d}")));
    }
    let eps_terminal = raw.eps_terminal.unwrap_or(0.01);
    if !(eps_terminal >= 0.0 && eps_terminal.is_finite()) {
        return Err(Error::config("eps_terminal", format!("{eps_terminal} must be finite and >= 0")));
    }
    let noise_level = raw.noise_level.unwrap_or(0.01);
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(Error::config("noise_level", format!("{noise_level} must lie in [0, 1]")));
    }
    let n_cap = raw.n_cap.unwrap_or(DEFAULT_N_CAP);
    if !(1.0..=1e18).contains(&n_cap) {
        return Err(Error::config("n_cap", format!("{n_cap} must lie in [1, 1e18]")));
    }
    if raw.n_per_step == Some(0) {
        return Err(Error::config("n_per_step", "must be at least 1"));
    }
    for (key, v) in [("mu_max", raw.mu_max), ("kappa_max", raw.kappa_max)] {
        if let Some(x) = v {
            positive(key, x)?;
        }
    }
    let spec = ExperimentSpec {
        experiment: id,
        seed: raw.seed.unwrap_or(0),
        replicates: at_least("replicates", raw.replicates.unwrap_or(def.replicates), 1)?,
        n_states,
        n_actions,
        horizon,
        d,
        mode: raw.mode.unwrap_or(def.mode),
        tucker_mode: raw.tucker_mode.unwrap_or(TuckerMode::SSd),
        p1: probability("p1", raw.p1.unwrap_or(def.p), &mut warnings)?,
        p2: probability("p2", raw.p2.unwrap_or(def.p), &mut warnings)?,
        epsilon: positive("epsilon", raw.epsilon.unwrap_or(def.epsilon))?,
        delta: open_unit("delta", raw.delta.unwrap_or(0.1))?,
        gamma: open_unit("gamma", raw.gamma.unwrap_or(0.9))?,
        alpha: open_unit("alpha", raw.alpha.unwrap_or(0.5))?,
        eps_terminal,
        kind: raw.kind.unwrap_or(RecursionKindName::DoublyExp),
        min_gap: positive("min_gap", raw.min_gap.unwrap_or(0.2))?,
        noise_level,
        n_per_step: raw.n_per_step,
        c_prime_mode: raw.c_prime_mode.unwrap_or(CPrimeMode::Empirical),
        n_cap,
        n_min: at_least("n_min", n_min, 1)?,
        n_max,
        d_max,
        sizes,
        anchor_count: at_least("anchor_count", raw.anchor_count.unwrap_or(5), 1)?,
        m,
        clip_range: raw.clip_range.unwrap_or(false),
        record_timing: raw.record_timing.unwrap_or(false),
        max_anchor_retries: raw.max_anchor_retries.unwrap_or(DEFAULT_MAX_ANCHOR_RETRIES),
        oracle_anchor_check: raw.oracle_anchor_check.unwrap_or(true),
        mu_max: raw.mu_max,
        kappa_max: raw.kappa_max,
    };
    Ok(Resolved { spec, warnings })
}
