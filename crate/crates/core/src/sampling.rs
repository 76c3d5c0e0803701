//! Token-selection strategies and the masked generation loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::generator::{guided_predict, sample_categorical, Generator};
use crate::grid::{
    apply_keep, masked_set, weighted_sample_without_replacement, Condition, LocationSet, MaskSchedule, TokenGrid,
};
use crate::selector::{ScoreMap, Scorer};

pub const DEFAULT_PERSISTENT_WEIGHT: f64 = 15.0;
pub const DEFAULT_PHI: f64 = 0.45;
pub const DEFAULT_GUIDANCE: f64 = 5.0;

/// Persistent weight `w >= 1`, or the symbolic infinite weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PersistentWeight {
    Finite(f64),
    Infinite,
}

impl PersistentWeight {
    pub fn validate(self) -> Result<Self> {
        match self {
            PersistentWeight::Finite(w) if !(w.is_finite() && w >= 1.0) => {
                Err(Error::Config(format!("persistent weight must be >= 1, got {w}")))
            }
            other => Ok(other),
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            PersistentWeight::Finite(w) => w,
            PersistentWeight::Infinite => f64::INFINITY,
        }
    }
}

impl Default for PersistentWeight {
    fn default() -> Self {
        PersistentWeight::Finite(DEFAULT_PERSISTENT_WEIGHT)
    }
}

impl fmt::Display for PersistentWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PersistentWeight::Finite(w) => write!(f, "{w}"),
            PersistentWeight::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for PersistentWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinite" | "infinity" => Ok(PersistentWeight::Infinite),
            other => {
                other.parse::<f64>().map_err(|_| Error::Parse(format!("bad persistent weight {s:?}"))).and_then(|w| {
                    if w.is_infinite() {
                        Ok(PersistentWeight::Infinite)
                    } else {
                        PersistentWeight::Finite(w).validate()
                    }
                })
            }
        }
    }
}

impl Serialize for PersistentWeight {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PersistentWeight::Finite(w) => s.serialize_f64(*w),
            PersistentWeight::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for PersistentWeight {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(w) => PersistentWeight::Finite(w).validate(),
            Raw::Text(t) => t.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

fn default_w() -> PersistentWeight {
    PersistentWeight::default()
}

fn default_phi() -> f64 {
    DEFAULT_PHI
}

/// Which locations survive each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    UniformFixed,
    Purity,
    RandomRevoke,
    Persistent {
        #[serde(default = "default_w")]
        w: PersistentWeight,
    },
    /// Learned scores; `w` sets the masked-side multiplier `a`.
    Tcts {
        #[serde(default = "default_w")]
        w: PersistentWeight,
    },
    TctsFas {
        #[serde(default = "default_w")]
        w: PersistentWeight,
        #[serde(default = "default_phi")]
        phi: f64,
    },
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            Strategy::Persistent { w } | Strategy::Tcts { w } => {
                w.validate()?;
            }
            Strategy::TctsFas { w, phi } => {
                w.validate()?;
                if !(0.0..=1.0).contains(phi) {
                    return Err(Error::Config(format!("phi must lie in [0, 1], got {phi}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::UniformFixed => "uniform_fixed",
            Strategy::Purity => "purity",
            Strategy::RandomRevoke => "random_revoke",
            Strategy::Persistent { .. } => "persistent",
            Strategy::Tcts { .. } => "tcts",
            Strategy::TctsFas { .. } => "tcts_fas",
        }
    }

    pub fn weight(&self) -> Option<PersistentWeight> {
        match self {
            Strategy::Persistent { w } | Strategy::Tcts { w } | Strategy::TctsFas { w, .. } => Some(*w),
            _ => None,
        }
    }

    pub fn phi(&self) -> Option<f64> {
        match self {
            Strategy::TctsFas { phi, .. } => Some(*phi),
            _ => None,
        }
    }

    pub fn needs_scores(&self) -> bool {
        matches!(self, Strategy::Tcts { .. } | Strategy::TctsFas { .. })
    }

    pub fn needs_self_attention(&self) -> bool {
        matches!(self, Strategy::TctsFas { .. })
    }

    pub fn is_fixed(&self) -> bool {
        matches!(
            self,
            Strategy::UniformFixed | Strategy::Purity | Strategy::Persistent { w: PersistentWeight::Infinite }
        )
    }
}

/// Knobs of the generation loop other than the strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingOptions {
    pub guidance: f64,
    /// Take the most likely token instead of sampling it.
    pub argmax: bool,
    /// Score-based strategies keep the top-weighted locations instead of sampling.
    pub top_m: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { guidance: DEFAULT_GUIDANCE, argmax: false, top_m: false }
    }
}

/// `max_j dists[i][j]` per location.
pub fn confidence_map(dists: &[Vec<f64>]) -> ScoreMap {
    ScoreMap::new(dists.iter().map(|row| row.iter().copied().fold(0.0, f64::max).clamp(0.0, 1.0)).collect())
        .expect("row maxima lie in [0, 1]")
}

/// Weight 1 on masked locations, `w` on previously kept ones.
pub fn persistent_weights(a_t: &LocationSet, w: f64, n: usize) -> Vec<f64> {
    let masked = a_t.indicator(n);
    masked.iter().map(|&m| if m { 1.0 } else { w }).collect()
}

/// `a = 1 + (w - 1) * |A^C| / N`.
pub fn fas_multiplier(w: f64, kept: usize, n: usize) -> f64 {
    1.0 + (w - 1.0) * (kept as f64 / n as f64)
}

/// Frequency-adaptive keep weights: `w` on kept low-frequency locations,
/// `a` on masked locations, unchanged elsewhere.
pub fn fas_weights(map_tc: &[f64], map_sa: &[f64], a_t: &LocationSet, w: f64, phi: f64, n: usize) -> Vec<f64> {
    let masked = a_t.indicator(n);
    let a = fas_multiplier(w, n - a_t.len(), n);
    (0..n)
        .map(|i| {
            if masked[i] {
                map_tc[i] * a
            } else if map_sa[i] < phi {
                map_tc[i] * w
            } else {
                map_tc[i]
            }
        })
        .collect()
}

/// Inputs to [`select_keep`] for one step.
#[derive(Debug, Clone, Copy)]
pub struct StepState<'a> {
    pub x_t: &'a TokenGrid,
    /// Guided predictive distributions used to build `x̂_0`.
    pub dists: &'a [Vec<f64>],
    pub self_attention: Option<&'a [f64]>,
    pub scores: Option<&'a ScoreMap>,
    /// Kept-set size `m(t)` after this step.
    pub m: usize,
}

fn indicator_weights(set: &LocationSet, n: usize, values: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for &i in set.iter() {
        out[i] = values(i);
    }
    out
}

/// Top `m` indices by weight, lower index first among ties.
fn top_by_weight(weights: &[f64], m: usize) -> LocationSet {
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    LocationSet::from_indices(order.into_iter().take(m))
}

/// Fills `m` slots tier by tier. A tier that fits is taken whole without
/// touching `rng`; the tier that overflows is sampled by weight (or by top
/// weight). Locations with zero weight everywhere are drawn uniformly last.
pub(crate) fn draw_tiers<R: Rng + ?Sized>(
    tiers: &[Vec<f64>],
    n: usize,
    m: usize,
    top: bool,
    rng: &mut R,
) -> Result<LocationSet> {
    if m > n {
        return Err(Error::InfeasibleSample { requested: m, available: n });
    }
    let mut chosen = vec![false; n];
    let mut remaining = m;
    let pick = |weights: &[f64], remaining: &mut usize, chosen: &mut [bool], rng: &mut R| -> Result<()> {
        let live: Vec<f64> = weights.iter().enumerate().map(|(i, &w)| if chosen[i] { 0.0 } else { w }).collect();
        let positive = live.iter().filter(|&&w| w > 0.0).count();
        if positive <= *remaining {
            for (i, &w) in live.iter().enumerate() {
                if w > 0.0 {
                    chosen[i] = true;
                }
            }
            *remaining -= positive;
        } else {
            let set = if top {
                top_by_weight(&live, *remaining)
            } else {
                weighted_sample_without_replacement(&live, *remaining, rng)?
            };
            for &i in set.iter() {
                chosen[i] = true;
            }
            *remaining = 0;
        }
        Ok(())
    };
    for tier in tiers {
        if remaining == 0 {
            break;
        }
        pick(tier, &mut remaining, &mut chosen, rng)?;
    }
    if remaining > 0 {
        let rest: Vec<f64> = vec![1.0; n];
        pick(&rest, &mut remaining, &mut chosen, rng)?;
    }
    Ok(LocationSet::from_indices((0..n).filter(|&i| chosen[i])))
}

fn require_scores<'a>(state: &StepState<'a>, strategy: &Strategy) -> Result<&'a [f64]> {
    state
        .scores
        .map(ScoreMap::values)
        .ok_or_else(|| Error::Config(format!("strategy {} needs a score map", strategy.name())))
}

/// Chooses the kept set of size `m(t)` for one step.
pub fn select_keep<R: Rng + ?Sized>(
    strategy: &Strategy,
    state: &StepState<'_>,
    top_m: bool,
    rng: &mut R,
) -> Result<LocationSet> {
    let n = state.x_t.len();
    let m = state.m;
    let a_t = masked_set(state.x_t);
    let kept = a_t.complement(n);
    if m > n {
        return Err(Error::InfeasibleSample { requested: m, available: n });
    }
    let fixed_tiers = || vec![indicator_weights(&kept, n, |_| 1.0), indicator_weights(&a_t, n, |_| 1.0)];
    match strategy {
        Strategy::UniformFixed | Strategy::Persistent { w: PersistentWeight::Infinite } => {
            if kept.len() > m {
                return Err(Error::Precondition(format!("{} locations already kept, step keeps {m}", kept.len())));
            }
            draw_tiers(&fixed_tiers(), n, m, false, rng)
        }
        Strategy::Purity => {
            if kept.len() > m {
                return Err(Error::Precondition(format!("{} locations already kept, step keeps {m}", kept.len())));
            }
            let conf = confidence_map(state.dists);
            let candidates = indicator_weights(&a_t, n, |i| conf.values()[i] + 1.0);
            let extra = top_by_weight(&candidates, m - kept.len());
            Ok(LocationSet::from_indices(kept.iter().chain(extra.iter()).copied()))
        }
        Strategy::RandomRevoke => draw_tiers(&[vec![1.0; n]], n, m, false, rng),
        Strategy::Persistent { w: PersistentWeight::Finite(w) } => {
            draw_tiers(&[persistent_weights(&a_t, *w, n)], n, m, false, rng)
        }
        Strategy::Tcts { w } => {
            let s = require_scores(state, strategy)?;
            let tiers = match w {
                PersistentWeight::Finite(w) => {
                    let a = fas_multiplier(*w, kept.len(), n);
                    vec![(0..n).map(|i| if a_t.contains(i) { s[i] * a } else { s[i] }).collect()]
                }
                PersistentWeight::Infinite if kept.is_empty() => vec![s.to_vec()],
                PersistentWeight::Infinite => {
                    vec![indicator_weights(&a_t, n, |i| s[i]), indicator_weights(&kept, n, |i| s[i])]
                }
            };
            draw_tiers(&tiers, n, m, top_m, rng)
        }
        Strategy::TctsFas { w, phi } => {
            let s = require_scores(state, strategy)?;
            let sa =
                state.self_attention.ok_or_else(|| Error::Config("tcts_fas needs the self-attention map".into()))?;
            let tiers = match w {
                PersistentWeight::Finite(w) => vec![fas_weights(s, sa, &a_t, *w, *phi, n)],
                PersistentWeight::Infinite if kept.is_empty() => vec![s.to_vec()],
                PersistentWeight::Infinite => {
                    let low: Vec<bool> = (0..n).map(|i| !a_t.contains(i) && sa[i] < *phi).collect();
                    let ratio = n as f64 / kept.len() as f64;
                    let first = (0..n)
                        .map(|i| {
                            if a_t.contains(i) {
                                s[i]
                            } else if low[i] {
                                s[i] * ratio
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let second = (0..n).map(|i| if !a_t.contains(i) && !low[i] { s[i] } else { 0.0 }).collect();
                    vec![first, second]
                }
            };
            draw_tiers(&tiers, n, m, top_m, rng)
        }
    }
}

/// One step of a generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub input: TokenGrid,
    pub predicted: TokenGrid,
    pub kept: LocationSet,
    pub output: TokenGrid,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    /// Per location, the number of steps that dropped a previously kept token.
    pub fn drop_counts(&self) -> Vec<usize> {
        let Some(first) = self.steps.first() else {
            return Vec::new();
        };
        let mut counts = vec![0; first.input.len()];
        for step in &self.steps {
            for (i, count) in counts.iter_mut().enumerate() {
                if !step.input.is_masked(i) && !step.kept.contains(i) {
                    *count += 1;
                }
            }
        }
        counts
    }

    /// Text dump: a header line, then per step the kept indices and grids.
    pub fn write_dump<W: Write>(&self, mut out: W, config_hash: &str, seed: u64) -> Result<()> {
        writeln!(out, "# trajectory config={config_hash} seed={seed} steps={}", self.steps.len())?;
        for step in &self.steps {
            let kept: Vec<String> = step.kept.iter().map(usize::to_string).collect();
            writeln!(out, "step {} kept {}", step.t, step.kept.len())?;
            writeln!(out, "{}", kept.join(" "))?;
            writeln!(out, "predicted")?;
            write!(out, "{}", step.predicted.to_text())?;
            writeln!(out, "state")?;
            write!(out, "{}", step.output.to_text())?;
        }
        Ok(())
    }
}

fn predict_x0<R: Rng + ?Sized>(x_t: &TokenGrid, dists: &[Vec<f64>], argmax: bool, rng: &mut R) -> Result<TokenGrid> {
    let mut out = x_t.clone();
    for (i, row) in dists.iter().enumerate() {
        if x_t.is_masked(i) {
            let token = if argmax {
                row.iter().enumerate().fold(0, |best, (j, &p)| if p > row[best] { j } else { best })
            } else {
                sample_categorical(row, rng)
            };
            out.set(i, token as u32)?;
        }
    }
    Ok(out)
}

/// Everything a generation run needs besides the strategy plan.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub gen: &'a dyn Generator,
    pub scorer: Option<&'a dyn Scorer>,
    pub condition: &'a Condition,
    pub schedule: &'a MaskSchedule,
    pub options: SamplingOptions,
}

fn run<'s, R, F>(ctx: &RunContext<'_>, init: &TokenGrid, plan: F, rng: &mut R) -> Result<(TokenGrid, Trajectory)>
where
    R: Rng + ?Sized,
    F: Fn(usize) -> &'s Strategy,
{
    ctx.gen.check_dims(init)?;
    let n = init.len();
    let masked = masked_set(init).len();
    if ctx.schedule.total() != masked {
        return Err(Error::InvalidSchedule(format!(
            "schedule reveals {} tokens but the start grid has {masked} masked",
            ctx.schedule.total()
        )));
    }
    let base = n - masked;
    let steps = ctx.schedule.steps();
    for j in 0..steps {
        let strategy = plan(steps - j);
        strategy.validate()?;
        if strategy.needs_scores() && ctx.scorer.is_none() {
            return Err(Error::Config(format!("strategy {} needs a selector", strategy.name())));
        }
    }
    let mut x_t = init.clone();
    let mut traj = Trajectory { steps: Vec::with_capacity(steps) };
    for j in 0..steps {
        let t = steps - j;
        let strategy = plan(t);
        let dists = guided_predict(ctx.gen, &x_t, ctx.condition, ctx.options.guidance)?;
        let predicted = predict_x0(&x_t, &dists, ctx.options.argmax, rng)?;
        let self_attention =
            if strategy.needs_self_attention() { Some(ctx.gen.self_attention_map(&x_t, ctx.condition)?) } else { None };
        let scores = match (strategy.needs_scores(), ctx.scorer) {
            (true, Some(s)) => Some(s.score(&predicted, ctx.condition)?),
            _ => None,
        };
        let state = StepState {
            x_t: &x_t,
            dists: &dists,
            self_attention: self_attention.as_deref(),
            scores: scores.as_ref(),
            m: base + ctx.schedule.cumulative(j),
        };
        let kept = select_keep(strategy, &state, ctx.options.top_m, rng)?;
        let output = apply_keep(&predicted, &kept)?;
        traj.steps.push(TrajectoryStep { t, input: x_t, predicted, kept, output: output.clone() });
        x_t = output;
    }
    Ok((x_t, traj))
}

/// Full generation from the all-MASK grid.
pub fn generate<R: Rng + ?Sized>(
    ctx: &RunContext<'_>,
    strategy: &Strategy,
    rng: &mut R,
) -> Result<(TokenGrid, Trajectory)> {
    let init = TokenGrid::masked(ctx.gen.height(), ctx.gen.width(), ctx.gen.codebook());
    run(ctx, &init, |_| strategy, rng)
}

/// Generation that fills the MASK cells of `init`; the schedule must reveal
/// exactly that many tokens.
pub fn generate_from<R: Rng + ?Sized>(
    ctx: &RunContext<'_>,
    strategy: &Strategy,
    init: &TokenGrid,
    rng: &mut R,
) -> Result<(TokenGrid, Trajectory)> {
    run(ctx, init, |_| strategy, rng)
}

/// `early` for steps `t > switch_step`, `late` from `switch_step` down to 1.
pub fn switch_strategy_generate<R: Rng + ?Sized>(
    ctx: &RunContext<'_>,
    early: &Strategy,
    late: &Strategy,
    switch_step: usize,
    rng: &mut R,
) -> Result<(TokenGrid, Trajectory)> {
    let steps = ctx.schedule.steps();
    if !(1..=steps).contains(&switch_step) {
        return Err(Error::Config(format!("switch step {switch_step} outside 1..={steps}")));
    }
    let init = TokenGrid::masked(ctx.gen.height(), ctx.gen.width(), ctx.gen.codebook());
    run(ctx, &init, |t| if t > switch_step { early } else { late }, rng)
}
