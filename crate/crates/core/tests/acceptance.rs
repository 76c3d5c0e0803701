//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 4 7`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use remask::cli::{load_world, sample_rng};
use remask::generator::{guided_predict, Generator, OracleGenerator};
use remask::grid::{LocationSet, MaskSchedule, ScheduleKind, TokenGrid, MASK};
use remask::metrics::mean_drops;
use remask::neuralgen::{generator_example, generator_loss, NeuralGenerator, TrainConfig};
use remask::nn::AttentionMapKind;
use remask::sampling::{
    fas_multiplier, fas_weights, generate, persistent_weights, switch_strategy_generate, PersistentWeight, RunContext,
    SamplingOptions, Strategy, DEFAULT_GUIDANCE,
};
use remask::selector::{
    build_eval_set, selector_auc, selector_example, selector_loss, train_selector, OracleScorer, SelectorModel,
};
use remask::tasks::{refine_mask_lowest, refine_steps, TaskContext};
use remask::toyworld::{JointTable, Region, ToyWorld, WorldSpec};

/// Master seed for every sampled quantity in this suite.
const SEED: u64 = 20_240_611;
/// Level of every one-sided test.
const ALPHA: f64 = 0.05;
/// Level of the chi-square goodness-of-fit tests.
const CHI_ALPHA: f64 = 0.001;

type Q = Ratio<i64>;
type Check = remask::Result<(bool, String)>;

struct Criterion {
    id: usize,
    title: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, title: "interpolation endpoints", budget: Duration::from_secs(60), run: c1_endpoints },
        Criterion {
            id: 2,
            title: "trajectory-marginal oracle equivalence",
            budget: Duration::from_secs(300),
            run: c2_marginals,
        },
        Criterion { id: 3, title: "FAS algebra", budget: Duration::from_secs(1), run: c3_fas_algebra },
        Criterion { id: 4, title: "trade-off ordering", budget: Duration::from_secs(600), run: c4_tradeoff },
        Criterion { id: 5, title: "learned selector efficacy", budget: Duration::from_secs(1800), run: c5_selector },
        Criterion { id: 6, title: "over-simplification", budget: Duration::from_secs(900), run: c6_oversimplification },
        Criterion { id: 7, title: "early-stage dominance", budget: Duration::from_secs(600), run: c7_early_stage },
        Criterion { id: 8, title: "refinement lift", budget: Duration::from_secs(600), run: c8_refinement },
        Criterion { id: 9, title: "numerical soundness", budget: Duration::from_secs(60), run: c9_numerics },
        Criterion { id: 10, title: "determinism", budget: Duration::from_secs(120), run: c10_determinism },
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        ran += 1;
        let start = Instant::now();
        let (ok, detail) = match (c.run)() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let pass = ok && in_time;
        let timing = format!("{:.1}s of {}s", elapsed.as_secs_f64(), c.budget.as_secs());
        let timing = if in_time { timing } else { format!("{timing}, over budget") };
        println!("[{}] {:>2} {} ({timing}): {detail}", if pass { "PASS" } else { "FAIL" }, c.id, c.title);
        if !pass {
            failed.push(c.id);
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- statistics

#[derive(Debug, Clone, Copy)]
struct Summary {
    mean: f64,
    se: f64,
}

fn summarize(v: &[f64]) -> Summary {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Summary { mean, se: (var / n).sqrt() }
}

/// One-sided p-value for `mean(a) > mean(b)`, independent samples.
fn p_greater(a: Summary, b: Summary) -> f64 {
    let se = (a.se * a.se + b.se * b.se).sqrt();
    if se == 0.0 {
        return if a.mean > b.mean { 0.0 } else { 1.0 };
    }
    1.0 - Normal::standard().cdf((a.mean - b.mean) / se)
}

/// One-sided p-value for `mean(d) > 0`, paired differences.
fn p_positive(d: &[f64]) -> f64 {
    p_greater(summarize(d), Summary { mean: 0.0, se: 0.0 })
}

fn fmt(s: Summary) -> String {
    format!("{:.4}±{:.4}", s.mean, s.se)
}

// ---------------------------------------------------------------- helpers

fn world(name: &str) -> remask::Result<Arc<ToyWorld>> {
    Ok(Arc::new(load_world(name)?))
}

fn options(guidance: f64) -> SamplingOptions {
    SamplingOptions { guidance, ..SamplingOptions::default() }
}

fn exact(x: f64) -> Q {
    assert!(x.fract() == 0.0 && x.abs() < 1e9, "weight {x} is not a small integer");
    Q::from_integer(x as i64)
}

/// Kept-set law of sequential weighted draws without replacement. A draw
/// whose positive weights all fit is taken whole, as the sampler does.
fn sequential_law(weights: &[Q], m: usize) -> BTreeMap<Vec<usize>, Q> {
    fn rec(w: &[Q], m: usize, chosen: &mut Vec<usize>, p: Q, out: &mut BTreeMap<Vec<usize>, Q>) {
        let live: Vec<usize> = (0..w.len()).filter(|i| !chosen.contains(i) && w[*i] > Q::from_integer(0)).collect();
        if chosen.len() == m || chosen.len() + live.len() <= m {
            let mut set = chosen.clone();
            if chosen.len() < m {
                set.extend(&live);
            }
            set.sort_unstable();
            *out.entry(set).or_insert_with(|| Q::from_integer(0)) += p;
            return;
        }
        let total = live.iter().fold(Q::from_integer(0), |acc, &i| acc + w[i]);
        for &i in &live {
            chosen.push(i);
            rec(w, m, chosen, p * w[i] / total, out);
            chosen.pop();
        }
    }
    let mut out = BTreeMap::new();
    rec(weights, m, &mut Vec::new(), Q::from_integer(1), &mut out);
    out
}

fn subsets(universe: &[usize], size: usize) -> Vec<Vec<usize>> {
    if size == 0 {
        return vec![vec![]];
    }
    if universe.len() < size {
        return vec![];
    }
    let (head, rest) = (universe[0], &universe[1..]);
    let mut out: Vec<Vec<usize>> = subsets(rest, size - 1)
        .into_iter()
        .map(|mut s| {
            s.insert(0, head);
            s
        })
        .collect();
    out.extend(subsets(rest, size));
    out
}

fn random_world(rng: &mut ChaCha8Rng) -> ToyWorld {
    let h = rng.random_range(1..=2);
    let w = rng.random_range(2..=3);
    let k = rng.random_range(2..=3);
    let mut spec = WorldSpec::new(h, w, k).condition(0, &["scene", "cat"]).condition(1, &["scene", "dog"]);
    let table = |rng: &mut ChaCha8Rng| (0..k).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
    for i in 0..h * w {
        spec = spec.unary(i, table(rng), None).unary(i, table(rng), Some("cat")).unary(i, table(rng), Some("dog"));
    }
    for i in 0..h * w {
        if (i + 1) % w != 0 {
            let t: Vec<Vec<f64>> = (0..k).map(|_| table(rng)).collect();
            spec = spec.edge(i, i + 1, t, None);
        }
        if i + w < h * w {
            let t: Vec<Vec<f64>> = (0..k).map(|_| table(rng)).collect();
            spec = spec.edge(i, i + w, t, None);
        }
    }
    ToyWorld::from_spec(spec).expect("random world is valid")
}

// ---------------------------------------------------------------- 1

fn c1_endpoints() -> Check {
    // Exact kept-set laws on N = 4: Persistent(w = 1) against uniform
    // draws, for every kept set and every kept-set size.
    let n = 4;
    let ones = vec![Q::from_integer(1); n];
    let mut cases = 0;
    let mut mismatches = 0;
    for bits in 0u32..(1 << n) {
        let a_t = LocationSet::from_indices((0..n).filter(|i| bits >> i & 1 == 1));
        let pw: Vec<Q> = persistent_weights(&a_t, 1.0, n).into_iter().map(exact).collect();
        for m in (n - a_t.len())..=n {
            cases += 1;
            if sequential_law(&pw, m) != sequential_law(&ones, m) {
                mismatches += 1;
            }
        }
    }
    // Two-step trajectory law of kept sets for the T = 2 cosine schedule.
    let schedule = ScheduleKind::Cosine.build(n, 2)?;
    let law = |weights: &dyn Fn(&LocationSet) -> Vec<Q>| {
        let mut out: BTreeMap<(Vec<usize>, Vec<usize>), Q> = BTreeMap::new();
        let all = LocationSet::full(n);
        for (s1, p1) in sequential_law(&weights(&all), schedule.cumulative(0)) {
            let a_t = LocationSet::from_indices((0..n).filter(|i| !s1.contains(i)));
            for (s2, p2) in sequential_law(&weights(&a_t), schedule.cumulative(1)) {
                *out.entry((s1.clone(), s2)).or_insert_with(|| Q::from_integer(0)) += p1 * p2;
            }
        }
        out
    };
    let persistent = law(&|a: &LocationSet| persistent_weights(a, 1.0, n).into_iter().map(exact).collect());
    let revoke = law(&|_: &LocationSet| vec![Q::from_integer(1); n]);
    let trajectory_equal = persistent == revoke;

    // Paired seeded runs on random small worlds.
    let mut cfg_rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut infinite_diffs = 0;
    let mut unit_diffs = 0;
    let configs = 1000;
    for j in 0..configs {
        let world = Arc::new(random_world(&mut cfg_rng));
        let gen = OracleGenerator::new(world.clone());
        let n = world.len();
        let steps = cfg_rng.random_range(1..=n);
        let kind = if cfg_rng.random::<bool>() { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let schedule = kind.build(n, steps)?;
        let c = world.conditions()[cfg_rng.random_range(0..2)].clone();
        let opts = SamplingOptions {
            guidance: cfg_rng.random_range(0.0..6.0),
            argmax: cfg_rng.random_bool(0.2),
            top_m: false,
        };
        let ctx = RunContext { gen: &gen, scorer: None, condition: &c, schedule: &schedule, options: opts };
        let run = |s: &Strategy| generate(&ctx, s, &mut sample_rng(SEED, 1, j));
        if run(&Strategy::UniformFixed)? != run(&Strategy::Persistent { w: PersistentWeight::Infinite })? {
            infinite_diffs += 1;
        }
        if run(&Strategy::RandomRevoke)? != run(&Strategy::Persistent { w: PersistentWeight::Finite(1.0) })? {
            unit_diffs += 1;
        }
    }
    let pass = mismatches == 0 && trajectory_equal && infinite_diffs == 0 && unit_diffs == 0;
    Ok((
        pass,
        format!(
            "exact w=1 law mismatches {mismatches}/{cases}, T=2 trajectory law equal: {trajectory_equal}; \
             trace differences over {configs} configs: w=inf vs uniform {infinite_diffs}, w=1 vs random revoke {unit_diffs}"
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn chi_world() -> ToyWorld {
    let agree = vec![vec![0.7, 0.0], vec![0.0, 0.7]];
    let mut spec = WorldSpec::new(2, 2, 2).condition(0, &["scene", "cat"]).condition(1, &["scene", "dog"]);
    for i in 0..4 {
        spec = spec.unary(i, vec![0.3, 0.0], None);
    }
    spec = spec
        .unary(0, vec![0.0, 0.9], Some("cat"))
        .unary(1, vec![0.0, 0.9], Some("cat"))
        .unary(2, vec![0.0, 0.9], Some("dog"))
        .unary(3, vec![0.0, 0.9], Some("dog"));
    for (a, b) in [(0, 1), (2, 3), (0, 2), (1, 3)] {
        spec = spec.edge(a, b, agree.clone(), None);
    }
    ToyWorld::from_spec(spec).expect("valid world")
}

/// Guided predictive computed directly from the joint tables.
fn reference_guided(tables: &[JointTable], target: usize, x: &[u32], k: usize, s: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let consistent = |g: &TokenGrid| (0..n).all(|i| x[i] == MASK || g.get(i) == x[i]);
    let mut evidence = vec![0.0; tables.len()];
    let mut marg = vec![vec![vec![0.0; k]; n]; tables.len()];
    for (ci, t) in tables.iter().enumerate() {
        for (code, &p) in t.probs.iter().enumerate() {
            let g = t.decode(code);
            if !consistent(&g) {
                continue;
            }
            evidence[ci] += p;
            for (i, row) in marg[ci].iter_mut().enumerate() {
                row[g.get(i) as usize] += p;
            }
        }
        for row in marg[ci].iter_mut() {
            row.iter_mut().for_each(|v| *v /= evidence[ci]);
        }
    }
    let total: f64 = evidence.iter().sum();
    (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..k)
                .map(|a| {
                    let null: f64 = (0..tables.len()).map(|c| evidence[c] / total * marg[c][i][a]).sum();
                    null.ln() + s * (marg[target][i][a].ln() - null.ln())
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            logits.iter().map(|l| (l - max).exp() / z).collect()
        })
        .collect()
}

fn kept_law(strategy: &Strategy, x: &[u32], m: usize) -> Vec<(Vec<usize>, f64)> {
    let n = x.len();
    let masked: Vec<usize> = (0..n).filter(|&i| x[i] == MASK).collect();
    let kept: Vec<usize> = (0..n).filter(|&i| x[i] != MASK).collect();
    let to_f64 = |law: BTreeMap<Vec<usize>, Q>| {
        law.into_iter().map(|(s, p)| (s, *p.numer() as f64 / *p.denom() as f64)).collect()
    };
    match strategy {
        Strategy::UniformFixed => {
            let extra = subsets(&masked, m - kept.len());
            let p = 1.0 / extra.len() as f64;
            extra
                .into_iter()
                .map(|e| {
                    let mut s: Vec<usize> = kept.iter().chain(&e).copied().collect();
                    s.sort_unstable();
                    (s, p)
                })
                .collect()
        }
        Strategy::RandomRevoke => to_f64(sequential_law(&vec![Q::from_integer(1); n], m)),
        Strategy::Persistent { w: PersistentWeight::Finite(w) } => {
            let weights: Vec<Q> = (0..n).map(|i| if x[i] == MASK { Q::from_integer(1) } else { exact(*w) }).collect();
            to_f64(sequential_law(&weights, m))
        }
        other => panic!("no enumeration for {}", other.name()),
    }
}

fn enumerate_final(
    tables: &[JointTable],
    target: usize,
    k: usize,
    s: f64,
    schedule: &MaskSchedule,
    strategy: &Strategy,
) -> Vec<f64> {
    fn rec(
        ctx: (&[JointTable], usize, usize, f64, &MaskSchedule, &Strategy),
        x: Vec<u32>,
        p: f64,
        j: usize,
        out: &mut [f64],
    ) {
        let (tables, target, k, s, schedule, strategy) = ctx;
        if j == schedule.steps() {
            let code = x.iter().rev().fold(0, |acc, &v| acc * k + v as usize);
            out[code] += p;
            return;
        }
        let dists = reference_guided(tables, target, &x, k, s);
        let masked: Vec<usize> = (0..x.len()).filter(|&i| x[i] == MASK).collect();
        let laws = kept_law(strategy, &x, schedule.cumulative(j));
        for assign in 0..k.pow(masked.len() as u32) {
            let mut x0 = x.clone();
            let mut px = p;
            let mut rest = assign;
            for &i in &masked {
                let a = rest % k;
                rest /= k;
                x0[i] = a as u32;
                px *= dists[i][a];
            }
            for (set, ps) in &laws {
                let next: Vec<u32> = (0..x.len()).map(|i| if set.contains(&i) { x0[i] } else { MASK }).collect();
                rec(ctx, next, px * ps, j + 1, out);
            }
        }
    }
    let n = tables[0].height * tables[0].width;
    let mut out = vec![0.0; k.pow(n as u32)];
    rec((tables, target, k, s, schedule, strategy), vec![MASK; n], 1.0, 0, &mut out);
    out
}

fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0;
    for (&o, &p) in counts.iter().zip(probs) {
        if p <= 0.0 {
            if o > 0 {
                return 0.0;
            }
            continue;
        }
        let e = p * total as f64;
        stat += (o as f64 - e).powi(2) / e;
        cells += 1;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).expect("positive dof").cdf(stat)
}

fn c2_marginals() -> Check {
    let world = Arc::new(chi_world());
    let gen = OracleGenerator::new(world.clone());
    let k = 2;
    let tables: Vec<JointTable> =
        world.conditions().iter().map(|c| world.enumerate_joint(c)).collect::<remask::Result<_>>()?;
    let c = world.conditions()[0].clone();
    let s = DEFAULT_GUIDANCE;
    let runs = 100_000u64;
    let strategies =
        [Strategy::UniformFixed, Strategy::RandomRevoke, Strategy::Persistent { w: PersistentWeight::Finite(3.0) }];
    let schedules = [("T=2", ScheduleKind::Cosine.build(4, 2)?), ("T=3", MaskSchedule::from_counts(vec![1, 1, 2])?)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, schedule) in &schedules {
        for (si, strategy) in strategies.iter().enumerate() {
            let probs = enumerate_final(&tables, 0, k, s, schedule, strategy);
            let ctx = RunContext { gen: &gen, scorer: None, condition: &c, schedule, options: options(s) };
            let codes: Vec<usize> = (0..runs)
                .into_par_iter()
                .map(|j| {
                    generate(&ctx, strategy, &mut sample_rng(SEED, 2 + si as u64, j)).map(|r| JointTable::encode(&r.0))
                })
                .collect::<remask::Result<_>>()?;
            let mut counts = vec![0u64; probs.len()];
            codes.iter().for_each(|&c| counts[c] += 1);
            let p = chi_square_p(&counts, &probs);
            // The extra T=3 schedule is reported but only T=2 is the criterion.
            if *label == "T=2" {
                pass &= p >= CHI_ALPHA;
            }
            parts.push(format!("{label} {} p={p:.3}", strategy.name()));
        }
    }
    Ok((pass, format!("{} runs each, chi-square at {CHI_ALPHA}: {}", runs, parts.join(", "))))
}

// ---------------------------------------------------------------- 3

fn c3_fas_algebra() -> Check {
    let config = ProptestConfig { cases: 2000, failure_persistence: None, ..ProptestConfig::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let inputs = proptest::strategy::Strategy::prop_flat_map(1usize..16, |n| {
        (
            prop::collection::vec(0.0..=1.0f64, n),
            prop::collection::vec(0.0..=1.0f64, n),
            prop::collection::vec(any::<bool>(), n),
            1.0..100.0f64,
            0.0..=1.0f64,
        )
    });
    let outcome = runner.run(&inputs, |(tc, sa, masked, w, phi)| {
        let n = tc.len();
        let a_t = LocationSet::from_indices((0..n).filter(|&i| masked[i]));
        let kept = n - a_t.len();
        let a_ref = (n as f64 + (w - 1.0) * kept as f64) / n as f64;
        let a = fas_multiplier(w, kept, n);
        prop_assert!((a - a_ref).abs() <= 1e-12 * a_ref, "a = {a}, expected {a_ref}");
        let out = fas_weights(&tc, &sa, &a_t, w, phi, n);
        for i in 0..n {
            let expected = if masked[i] {
                tc[i] * a_ref
            } else if sa[i] < phi {
                tc[i] * w
            } else {
                tc[i]
            };
            prop_assert!(
                (out[i] - expected).abs() <= 1e-12 * expected.max(1.0),
                "location {i}: {} vs {expected}",
                out[i]
            );
            if !masked[i] && sa[i] >= phi {
                prop_assert!(out[i] == tc[i]);
            }
        }
        prop_assert_eq!(fas_weights(&tc, &sa, &a_t, 1.0, phi, n), tc.clone());
        prop_assert!(fas_multiplier(1.0, kept, n) == 1.0);
        Ok(())
    });
    Ok(match outcome {
        Ok(()) => (true, "2000 generated cases: multipliers on the right sets, a to 1e-12, w=1 identity".into()),
        Err(e) => (false, format!("{e}")),
    })
}

// ---------------------------------------------------------------- 4

/// Guidance used for the trade-off sweep; see the README for the choice.
const TRADEOFF_GUIDANCE: f64 = 1.5;
const TRADEOFF_SAMPLES: u64 = 10_000;

fn c4_tradeoff() -> Check {
    let world = world("overlap")?;
    let gen = OracleGenerator::new(world.clone());
    let c = world.conditions()[0].clone();
    let schedule = ScheduleKind::Cosine.build(world.len(), 8)?;
    let ctx =
        RunContext { gen: &gen, scorer: None, condition: &c, schedule: &schedule, options: options(TRADEOFF_GUIDANCE) };
    let weights = [
        PersistentWeight::Finite(1.0),
        PersistentWeight::Finite(2.0),
        PersistentWeight::Finite(4.0),
        PersistentWeight::Finite(15.0),
        PersistentWeight::Infinite,
    ];
    let mut align = Vec::new();
    let mut nll = Vec::new();
    for (wi, w) in weights.iter().enumerate() {
        let strategy = Strategy::Persistent { w: *w };
        let pairs: Vec<(f64, f64)> = (0..TRADEOFF_SAMPLES)
            .into_par_iter()
            .map(|j| {
                let (x, _) = generate(&ctx, &strategy, &mut sample_rng(SEED, 10 + wi as u64, j))?;
                Ok((world.alignment_score(&c, &x)?, -world.log_prob(&c, &x)?))
            })
            .collect::<remask::Result<_>>()?;
        align.push(summarize(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()));
        nll.push(summarize(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()));
    }
    // Weakly decreasing: no adjacent pair may show a significant increase.
    let reversals = |v: &[Summary]| (0..v.len() - 1).filter(|&i| p_greater(v[i + 1], v[i]) < ALPHA).count();
    let endpoint = |v: &[Summary]| p_greater(v[0], v[v.len() - 1]);
    let (ra, rn) = (reversals(&align), reversals(&nll));
    let (pa, pn) = (endpoint(&align), endpoint(&nll));
    let pass = ra == 0 && rn == 0 && pa < ALPHA && pn < ALPHA;
    let series = |v: &[Summary]| v.iter().map(|s| fmt(*s)).collect::<Vec<_>>().join(" ");
    Ok((
        pass,
        format!(
            "w=1,2,4,15,inf, s={TRADEOFF_GUIDANCE}, {TRADEOFF_SAMPLES} samples each; alignment {} (reversals {ra}, endpoint p={pa:.2e}); \
             nll {} (reversals {rn}, endpoint p={pn:.2e})",
            series(&align),
            series(&nll)
        ),
    ))
}

// ---------------------------------------------------------------- 5

/// Temperature of the weak oracle generator used for selector experiments.
const WEAK_TEMPERATURE: f64 = 3.0;
const AUC_FLOOR: f64 = 0.65;

fn c5_selector() -> Check {
    let world = world("attractive")?;
    let gen = OracleGenerator::with_temperature(world.clone(), WEAK_TEMPERATURE)?;
    let cfg = TrainConfig { seed: SEED, ..TrainConfig::default() };
    let (selector, report) = train_selector(&gen, &world, &cfg, 0.0)?;
    let eval = build_eval_set(&gen, &world, &cfg, 500, SEED + 1)?;
    let auc = selector_auc(&selector, &eval)?;
    let c = world.conditions()[0].clone();
    let schedule = ScheduleKind::Cosine.build(world.len(), 8)?;
    let ctx = RunContext {
        gen: &gen,
        scorer: Some(&selector),
        condition: &c,
        schedule: &schedule,
        options: options(DEFAULT_GUIDANCE),
    };
    let samples = 2000u64;
    let rate = |strategy: &Strategy, cell: u64| -> remask::Result<Summary> {
        let v: Vec<f64> = (0..samples)
            .into_par_iter()
            .map(|j| world.alignment_score(&c, &generate(&ctx, strategy, &mut sample_rng(SEED, cell, j))?.0))
            .collect::<remask::Result<_>>()?;
        Ok(summarize(&v))
    };
    let tcts = rate(&Strategy::Tcts { w: PersistentWeight::default() }, 20)?;
    let revoke = rate(&Strategy::RandomRevoke, 21)?;
    let p = p_greater(revoke, tcts);
    let pass = auc >= AUC_FLOOR && p >= ALPHA;
    Ok((
        pass,
        format!(
            "probe BCE {:.4} -> {:.4}, held-out AUC {auc:.4} (floor {AUC_FLOOR}); alignment tcts {} vs random_revoke {} \
             ({samples} samples each, p(revoke > tcts)={p:.3})",
            report.initial(),
            report.last(),
            fmt(tcts),
            fmt(revoke)
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn pooled_entropy(hists: &[Vec<u64>], idx: impl Iterator<Item = usize>) -> f64 {
    let mut total = vec![0u64; hists[0].len()];
    for i in idx {
        total.iter_mut().zip(&hists[i]).for_each(|(t, h)| *t += h);
    }
    let n: u64 = total.iter().sum();
    total.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n as f64).map(|p| -p * p.ln()).sum::<f64>().max(0.0)
}

fn c6_oversimplification() -> Check {
    let world = world("bgfg")?;
    let gen = OracleGenerator::new(world.clone());
    let scorer = OracleScorer::new(world.clone());
    let c = world.conditions()[0].clone();
    let low = world.region_set(Region::LowFreq);
    let k = world.codebook().size();
    let schedule = ScheduleKind::Cosine.build(world.len(), 100)?;
    let ctx = RunContext {
        gen: &gen,
        scorer: Some(&scorer),
        condition: &c,
        schedule: &schedule,
        options: options(DEFAULT_GUIDANCE),
    };
    let samples = 300u64;
    let collect = |strategy: &Strategy, cell: u64| -> remask::Result<(Vec<Vec<u64>>, Vec<f64>)> {
        let runs: Vec<(Vec<u64>, f64)> = (0..samples)
            .into_par_iter()
            .map(|j| {
                let (x, traj) = generate(&ctx, strategy, &mut sample_rng(SEED, cell, j))?;
                let mut hist = vec![0u64; k];
                low.iter().for_each(|&i| hist[x.get(i) as usize] += 1);
                Ok((hist, mean_drops(&traj.drop_counts(), &low)))
            })
            .collect::<remask::Result<_>>()?;
        Ok(runs.into_iter().unzip())
    };
    let (h_tcts, d_tcts) = collect(&Strategy::Tcts { w: PersistentWeight::default() }, 30)?;
    let (h_fas, d_fas) =
        collect(&Strategy::TctsFas { w: PersistentWeight::default(), phi: remask::sampling::DEFAULT_PHI }, 31)?;
    let e_tcts = pooled_entropy(&h_tcts, 0..h_tcts.len());
    let e_fas = pooled_entropy(&h_fas, 0..h_fas.len());
    // Percentile bootstrap of the entropy difference; one-sided upper bound.
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let reps = 2000;
    let mut diffs: Vec<f64> = (0..reps)
        .map(|_| {
            let a = pooled_entropy(
                &h_fas,
                (0..h_fas.len()).map(|_| rng.random_range(0..h_fas.len())).collect::<Vec<_>>().into_iter(),
            );
            let b = pooled_entropy(
                &h_tcts,
                (0..h_tcts.len()).map(|_| rng.random_range(0..h_tcts.len())).collect::<Vec<_>>().into_iter(),
            );
            a - b
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    let upper = diffs[((1.0 - ALPHA) * reps as f64) as usize - 1];
    let (dt, df) = (summarize(&d_tcts), summarize(&d_fas));
    let pass = upper >= 0.0 && df.mean < dt.mean;
    Ok((
        pass,
        format!(
            "T=100, {samples} samples each; background entropy tcts_fas {e_fas:.4} vs tcts {e_tcts:.4} \
             (95% upper bound of difference {upper:.4}); low-frequency drops tcts_fas {} vs tcts {}",
            fmt(df),
            fmt(dt)
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn c7_early_stage() -> Check {
    let world = world("overlap")?;
    let gen = OracleGenerator::new(world.clone());
    let c = world.conditions()[0].clone();
    let steps = 8;
    let schedule = ScheduleKind::Cosine.build(world.len(), steps)?;
    let ctx =
        RunContext { gen: &gen, scorer: None, condition: &c, schedule: &schedule, options: options(DEFAULT_GUIDANCE) };
    let seeds = 2000u64;
    let rate = |early: &Strategy, late: &Strategy| -> remask::Result<Summary> {
        let v: Vec<f64> = (0..seeds)
            .into_par_iter()
            .map(|j| {
                let (x, _) = switch_strategy_generate(&ctx, early, late, steps / 2, &mut sample_rng(SEED, 40, j))?;
                world.alignment_score(&c, &x)
            })
            .collect::<remask::Result<_>>()?;
        Ok(summarize(&v))
    };
    let u2r = rate(&Strategy::UniformFixed, &Strategy::RandomRevoke)?;
    let r2u = rate(&Strategy::RandomRevoke, &Strategy::UniformFixed)?;
    let p = p_greater(r2u, u2r);
    Ok((
        p >= ALPHA,
        format!("{seeds} seeds, s={DEFAULT_GUIDANCE}; U2R {} vs R2U {} (p(R2U > U2R)={p:.3})", fmt(u2r), fmt(r2u)),
    ))
}

// ---------------------------------------------------------------- 8

fn c8_refinement() -> Check {
    let world = world("attractive")?;
    let gen = OracleGenerator::with_temperature(world.clone(), WEAK_TEMPERATURE)?;
    let scorer = OracleScorer::new(world.clone());
    let c = world.conditions()[0].clone();
    let schedule = ScheduleKind::Cosine.build(world.len(), 8)?;
    let ctx =
        RunContext { gen: &gen, scorer: None, condition: &c, schedule: &schedule, options: options(DEFAULT_GUIDANCE) };
    let task = TaskContext { options: options(DEFAULT_GUIDANCE), ..TaskContext::new(&gen, &scorer) };
    let grids = 2000u64;
    let rows: Vec<(f64, f64, f64)> = (0..grids)
        .into_par_iter()
        .map(|j| {
            let (x, _) = generate(&ctx, &Strategy::UniformFixed, &mut sample_rng(SEED, 50, j))?;
            let base = world.alignment_score(&c, &x)?;
            let stepped = refine_steps(&x, &task, 8, &c, &mut sample_rng(SEED, 51, j))?;
            let lowest = refine_mask_lowest(&x, &task, 0.6, &c, &mut sample_rng(SEED, 52, j))?;
            Ok((base, world.alignment_score(&c, &stepped)?, world.alignment_score(&c, &lowest)?))
        })
        .collect::<remask::Result<_>>()?;
    let lift_steps: Vec<f64> = rows.iter().map(|r| r.1 - r.0).collect();
    let lift_lowest: Vec<f64> = rows.iter().map(|r| r.2 - r.0).collect();
    let (p1, p2) = (p_positive(&lift_steps), p_positive(&lift_lowest));
    let base = summarize(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    Ok((
        p1 < ALPHA && p2 < ALPHA,
        format!(
            "{grids} grids, base alignment {}; lift refine_steps(8) {} (p={p1:.2e}), refine_mask_lowest(0.6) {} (p={p2:.2e})",
            fmt(base),
            fmt(summarize(&lift_steps)),
            fmt(summarize(&lift_lowest))
        ),
    ))
}

// ---------------------------------------------------------------- 9

const GRAD_REL_TOL: f64 = 1e-3;
/// Both derivatives below this are treated as zero.
const GRAD_ZERO: f64 = 1e-7;
const ROW_TOL: f64 = 1e-6;

fn gradient_errors<E>(
    net: &remask::nn::Network,
    examples: &[E],
    loss: impl Fn(&remask::nn::Network, &E) -> remask::Result<(f64, Vec<f64>)>,
    rng: &mut ChaCha8Rng,
) -> remask::Result<(usize, usize, usize, f64)> {
    let total = |n: &remask::nn::Network| -> remask::Result<(f64, Vec<f64>)> {
        let mut l = 0.0;
        let mut g = vec![0.0; n.params().len()];
        for e in examples {
            let (li, gi) = loss(n, e)?;
            l += li;
            g.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
        Ok((l, g))
    };
    // Move off the initial point, where a zero output head hides most gradients.
    let mut net = net.clone();
    net.params_mut().iter_mut().for_each(|p| *p += rng.random_range(-0.2..0.2));
    let net = &net;
    let (_, grads) = total(net)?;
    let len = net.params().len();
    let checks = len.div_ceil(100);
    let h = 1e-6;
    let mut failures = 0;
    let mut compared = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..checks {
        let i = rng.random_range(0..len);
        let mut plus = net.clone();
        plus.params_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[i] -= h;
        let fd = (total(&plus)?.0 - total(&minus)?.0) / (2.0 * h);
        let g = grads[i];
        let scale = g.abs().max(fd.abs());
        if scale < GRAD_ZERO {
            continue;
        }
        compared += 1;
        let rel = (g - fd).abs() / scale;
        worst = worst.max(rel);
        if rel > GRAD_REL_TOL {
            failures += 1;
        }
    }
    Ok((checks, compared, failures, worst))
}

fn c9_numerics() -> Check {
    let world = world("overlap")?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut parts = Vec::new();
    let mut pass = true;

    // Gradients of both training losses.
    let cfg = TrainConfig { seed: SEED, ..TrainConfig::default() };
    let gen = NeuralGenerator::init(&world, &cfg)?;
    let gen_examples: Vec<_> =
        (0..4).map(|_| generator_example(&world, 0.5, &mut rng)).collect::<remask::Result<_>>()?;
    let (checks, compared, failures, worst) = gradient_errors(gen.network(), &gen_examples, generator_loss, &mut rng)?;
    pass &= failures == 0;
    parts.push(format!("generator gradient: {checks} parameters probed, {compared} non-zero, {failures} over tolerance (worst rel {worst:.1e})"));
    let oracle = OracleGenerator::new(world.clone());
    let sel = SelectorModel::init(&world, &cfg)?;
    let sel_examples: Vec<_> =
        (0..4).map(|_| selector_example(&oracle, &world, &cfg, &mut rng)).collect::<remask::Result<_>>()?;
    let (checks, compared, failures, worst) = gradient_errors(sel.network(), &sel_examples, selector_loss, &mut rng)?;
    pass &= failures == 0;
    parts.push(format!("selector gradient: {checks} parameters probed, {compared} non-zero, {failures} over tolerance (worst rel {worst:.1e})"));

    // Distribution rows and attention maps on random partial grids.
    let softmax_cfg = TrainConfig { attention_map: AttentionMapKind::Softmax, ..cfg.clone() };
    let gens: Vec<Box<dyn Generator>> = vec![
        Box::new(oracle),
        Box::new(OracleGenerator::with_temperature(world.clone(), 0.5)?),
        Box::new(gen),
        Box::new(NeuralGenerator::init(&world, &softmax_cfg)?),
    ];
    let mut worst_row: f64 = 0.0;
    let mut map_violations = 0;
    let mut negative = 0;
    for g in &gens {
        for _ in 0..50 {
            let c = world.conditions()[rng.random_range(0..2)].clone();
            let cells: Vec<u32> =
                (0..world.len()).map(|_| if rng.random_bool(0.5) { MASK } else { rng.random_range(0..3) }).collect();
            let x = TokenGrid::new(world.height(), world.width(), world.codebook(), cells)?;
            for s in [0.0, 1.0, DEFAULT_GUIDANCE] {
                for row in guided_predict(g.as_ref(), &x, &c, s)? {
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                    negative += row.iter().filter(|&&p| p < 0.0).count();
                }
            }
            map_violations += g.self_attention_map(&x, &c)?.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        }
    }
    pass &= worst_row <= ROW_TOL && negative == 0 && map_violations == 0;
    parts.push(format!(
        "max |row sum - 1| {worst_row:.1e} (tol {ROW_TOL:.0e}), negative entries {negative}, attention values outside [0,1] {map_violations}"
    ));
    Ok((pass, parts.join("; ")))
}

// ---------------------------------------------------------------- 10

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable output dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn remask(config: &Path, out: &Path, jobs: usize, command: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_remask"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--jobs")
        .arg(jobs.to_string())
        .args(command)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("{command:?} exited with {}: {}", status.status, String::from_utf8_lossy(&status.stderr)));
    }
    Ok(())
}

fn c10_determinism() -> Check {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let write = |name: &str, value: serde_json::Value| -> PathBuf {
        let p = root.join(name);
        std::fs::write(&p, serde_json::to_string_pretty(&value).unwrap()).unwrap();
        p
    };
    let gen_cfg = write(
        "generate.json",
        serde_json::json!({"world": "overlap", "samples": 6, "steps": 4, "seed": 11,
            "strategy": {"kind": "tcts_fas"}, "selector": {"kind": "oracle"}}),
    );
    let sweep_cfg = write(
        "sweep.json",
        serde_json::json!({"world": "overlap", "samples": 4, "steps": 4, "seed": 12,
            "strategy": {"kind": "persistent", "w": 2},
            "sweep": {"strategy.w": [1, 4, "inf"], "guidance": [1.5, 5]}}),
    );
    let small = serde_json::json!({"epochs": 1, "steps_per_epoch": 2, "batch_size": 4, "probe_size": 8,
        "d_model": 8, "ffn": 16, "min_improvement": -1.0});
    let train_cfg = write("train.json", serde_json::json!({"world": "overlap", "seed": 13, "train": small}));

    let mut results = Vec::new();
    let mut run_twice = |label: &str, cfg: &Path, command: &[&str]| -> Result<PathBuf, String> {
        let a = root.join(format!("{label}-a"));
        let b = root.join(format!("{label}-b"));
        remask(cfg, &a, 1, command)?;
        remask(cfg, &b, 3, command)?;
        results.push((label.to_string(), snapshot(&a) == snapshot(&b), snapshot(&a).len()));
        Ok(a)
    };
    let outcome = (|| -> Result<(), String> {
        let gen_out = run_twice("generate", &gen_cfg, &["generate"])?;
        run_twice("sweep", &sweep_cfg, &["sweep"])?;
        run_twice("train-generator", &train_cfg, &["train", "--kind", "generator"])?;
        run_twice("train-selector", &train_cfg, &["train", "--kind", "selector"])?;
        let input = gen_out.join("samples").join("c0_00000.txt");
        let task = |extra: serde_json::Value| {
            let mut v =
                serde_json::json!({"world": "overlap", "seed": 14, "condition": 0, "selector": {"kind": "oracle"}});
            v.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
            v
        };
        let refine_cfg = write("refine.json", task(serde_json::json!({"refine": {"input": input, "steps": 4}})));
        let lowest_cfg =
            write("lowest.json", task(serde_json::json!({"refine": {"input": input, "mode": "mask_lowest"}})));
        let edit_cfg = write(
            "edit.json",
            task(
                serde_json::json!({"edit": {"input": input, "old_condition": 0, "new_condition": 1, "component": "dog"}}),
            ),
        );
        let upscale_cfg = write(
            "upscale.json",
            task(serde_json::json!({"upscale": {"input": input, "factor": 2, "passes": 1, "refine_steps": 2}})),
        );
        run_twice("refine-steps", &refine_cfg, &["refine"])?;
        run_twice("refine-lowest", &lowest_cfg, &["refine"])?;
        run_twice("edit", &edit_cfg, &["edit"])?;
        run_twice("upscale", &upscale_cfg, &["upscale"])?;
        Ok(())
    })();
    if let Err(e) = outcome {
        return Ok((false, e));
    }
    let pass = results.iter().all(|r| r.1 && r.2 > 0);
    let detail = results
        .iter()
        .map(|(l, same, files)| format!("{l} {}({files} files)", if *same { "identical " } else { "DIFFERS " }))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, format!("each command run with --jobs 1 and --jobs 3: {detail}")))
}
