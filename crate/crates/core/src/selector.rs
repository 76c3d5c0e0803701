//! Token scorers: a learned selector trained to tell original tokens from
//! generator reconstructions, and an exact oracle scorer.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::{guided_predict, sample_categorical, Generator};
use crate::grid::{Condition, TokenGrid, MASK};
use crate::neuralgen::{fit, net_config_for, train_rngs, TrainConfig, TrainReport};
use crate::nn::{binary_cross_entropy, Network};
use crate::toyworld::ToyWorld;

/// Per-location probability that the token is original, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap(Vec<f64>);

impl ScoreMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Precondition(format!("score {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Anything that scores a fully revealed grid under a condition.
pub trait Scorer: Send + Sync {
    fn score(&self, x0: &TokenGrid, c: &Condition) -> Result<ScoreMap>;
}

fn require_revealed(x0: &TokenGrid) -> Result<()> {
    if !x0.is_fully_revealed() {
        return Err(Error::Precondition("scorer input must be fully revealed".into()));
    }
    Ok(())
}

/// Exact leave-one-out probability of each token given the rest of the grid.
pub fn oracle_score(world: &ToyWorld, c: &Condition, x0: &TokenGrid) -> Result<ScoreMap> {
    require_revealed(x0)?;
    let local = world.local_conditionals(c, x0)?;
    ScoreMap::new(local.iter().zip(x0.cells()).map(|(row, &x)| row[x as usize].clamp(0.0, 1.0)).collect())
}

#[derive(Debug, Clone)]
pub struct OracleScorer {
    world: Arc<ToyWorld>,
}

impl OracleScorer {
    pub fn new(world: Arc<ToyWorld>) -> Self {
        Self { world }
    }
}

impl Scorer for OracleScorer {
    fn score(&self, x0: &TokenGrid, c: &Condition) -> Result<ScoreMap> {
        oracle_score(&self.world, c, x0)
    }
}

/// Attention network with one sigmoid output per location.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorModel {
    net: Network,
}

impl SelectorModel {
    pub fn new(net: Network) -> Result<Self> {
        if net.config().out_dim != 1 {
            return Err(Error::Config(format!("selector head must emit 1 logit, has {}", net.config().out_dim)));
        }
        Ok(Self { net })
    }

    pub fn init(world: &ToyWorld, cfg: &TrainConfig) -> Result<Self> {
        let (mut init_rng, _, _) = train_rngs(cfg.seed);
        Self::new(Network::new(net_config_for(world, cfg, 1, false), &mut init_rng)?)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    fn logits(&self, x0: &TokenGrid, c: &Condition) -> Result<Vec<f64>> {
        let cfg = self.net.config();
        if x0.height() != cfg.height || x0.width() != cfg.width || x0.codebook().size() != cfg.codebook_size {
            return Err(Error::Shape(format!(
                "grid {}x{} does not match selector {}x{}",
                x0.height(),
                x0.width(),
                cfg.height,
                cfg.width
            )));
        }
        Ok(self.net.forward(x0.cells(), Some(c))?.output)
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

impl Scorer for SelectorModel {
    fn score(&self, x0: &TokenGrid, c: &Condition) -> Result<ScoreMap> {
        require_revealed(x0)?;
        ScoreMap::new(self.logits(x0, c)?.into_iter().map(sigmoid).collect())
    }
}

/// A reconstructed grid with per-location labels (1 = original token).
#[derive(Debug, Clone)]
pub struct SelectorExample {
    pub grid: TokenGrid,
    pub condition: Condition,
    pub labels: Vec<f64>,
}

/// Samples `x_0`, masks a random subset and refills it from the guided
/// generator with a per-example guidance scale.
pub fn selector_example<R: Rng + ?Sized>(
    gen: &dyn Generator,
    world: &ToyWorld,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SelectorExample> {
    let conds = world.conditions();
    let c = &conds[rng.random_range(0..conds.len())];
    let x0 = world.sample_true(c, rng)?;
    let n = x0.len();
    if n < 2 {
        return Err(Error::Precondition("selector training needs at least two locations".into()));
    }
    let (lo, hi) = cfg.mask_ratio;
    let ratio = lo + (hi - lo) * rng.random::<f64>();
    let count = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let (slo, shi) = cfg.guidance;
    let scale = slo + (shi - slo) * rng.random::<f64>();
    let mut x_t = x0.clone();
    let mut labels = vec![1.0; n];
    let mut masked: Vec<usize> = sample_indices(rng, n, count).into_vec();
    masked.sort_unstable();
    for &i in &masked {
        x_t.set(i, MASK)?;
        labels[i] = 0.0;
    }
    let dists = guided_predict(gen, &x_t, c, scale)?;
    let mut grid = x_t;
    for &i in &masked {
        grid.set(i, sample_categorical(&dists[i], rng) as u32)?;
    }
    Ok(SelectorExample { grid, condition: c.clone(), labels })
}

/// Per-location binary cross-entropy and its parameter gradient.
pub fn selector_loss(net: &Network, ex: &SelectorExample) -> Result<(f64, Vec<f64>)> {
    let cache = net.forward(ex.grid.cells(), Some(&ex.condition))?;
    let (loss, d_out) = binary_cross_entropy(&cache.output, &ex.labels);
    let mut grads = vec![0.0; net.params().len()];
    net.backward(&cache, &d_out, &mut grads);
    Ok((loss, grads))
}

/// Trains a selector against reconstructions from `gen`.
///
/// Fails unless the probe loss drops by at least `min_improvement` (relative).
pub fn train_selector(
    gen: &dyn Generator,
    world: &ToyWorld,
    cfg: &TrainConfig,
    min_improvement: f64,
) -> Result<(SelectorModel, TrainReport)> {
    let (mut init_rng, mut rng, mut probe_rng) = train_rngs(cfg.seed);
    let mut net = Network::new(net_config_for(world, cfg, 1, false), &mut init_rng)?;
    let probe: Vec<SelectorExample> =
        (0..cfg.probe_size.max(1)).map(|_| selector_example(gen, world, cfg, &mut probe_rng)).collect::<Result<_>>()?;
    let report = fit(&mut net, cfg, &mut rng, &probe, |r| selector_example(gen, world, cfg, r), selector_loss)?;
    let drop = 1.0 - report.last() / report.initial();
    if drop < min_improvement {
        return Err(Error::TrainingFailure(format!(
            "probe loss fell by {:.1}% (from {:.4} to {:.4}), below the required {:.1}%",
            100.0 * drop,
            report.initial(),
            report.last(),
            100.0 * min_improvement
        )));
    }
    Ok((SelectorModel::new(net)?, report))
}

/// Held-out reconstruction-detection examples drawn from their own seed.
pub fn build_eval_set(
    gen: &dyn Generator,
    world: &ToyWorld,
    cfg: &TrainConfig,
    size: usize,
    seed: u64,
) -> Result<Vec<SelectorExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    (0..size).map(|_| selector_example(gen, world, cfg, &mut rng)).collect()
}

/// ROC-AUC with tied scores sharing their average rank.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    if scores.iter().all(|&s| s == scores[0]) {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Pooled per-location AUC of `scorer` on an evaluation set.
pub fn selector_auc(scorer: &dyn Scorer, eval_set: &[SelectorExample]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for ex in eval_set {
        scores.extend_from_slice(scorer.score(&ex.grid, &ex.condition)?.values());
        labels.extend(ex.labels.iter().map(|&l| l > 0.5));
    }
    roc_auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::OracleGenerator;
    use crate::toyworld::WorldSpec;

    fn attractive() -> ToyWorld {
        let tie = vec![vec![1.5, 0.0], vec![0.0, 1.5]];
        ToyWorld::from_spec(
            WorldSpec::new(2, 2, 2)
                .condition(0, &["a"])
                .condition(1, &["b"])
                .unary(0, vec![1.0, 0.0], Some("a"))
                .unary(0, vec![0.0, 1.0], Some("b"))
                .edge(0, 1, tie.clone(), None)
                .edge(0, 2, tie.clone(), None)
                .edge(1, 3, tie.clone(), None)
                .edge(2, 3, tie, None),
        )
        .unwrap()
    }

    #[test]
    fn auc_examples() {
        let labels = [true, false, true, false];
        let as_scores: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
        assert_eq!(roc_auc(&as_scores, &labels).unwrap(), 1.0);
        let inverted: Vec<f64> = as_scores.iter().map(|s| 1.0 - s).collect();
        assert_eq!(roc_auc(&inverted, &labels).unwrap(), 0.0);
        assert!(matches!(roc_auc(&[0.3; 4], &labels), Err(Error::UndefinedAuc)));
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc)));
        assert_eq!(roc_auc(&[0.5, 0.5, 0.9], &[true, false, true]).unwrap(), 0.75);
    }

    #[test]
    fn zero_head_scores_half() {
        let w = attractive();
        let sel = SelectorModel::init(&w, &TrainConfig { d_model: 8, ffn: 8, ..TrainConfig::default() }).unwrap();
        let x = TokenGrid::new(2, 2, w.codebook(), vec![0, 1, 1, 0]).unwrap();
        assert!(sel.score(&x, &w.conditions()[0]).unwrap().values().iter().all(|&v| v == 0.5));
        let masked = TokenGrid::new(2, 2, w.codebook(), vec![0, MASK, 1, 0]).unwrap();
        assert!(matches!(sel.score(&masked, &w.conditions()[0]), Err(Error::Precondition(_))));
    }

    #[test]
    fn oracle_flags_flipped_cell() {
        let w = attractive();
        let x = TokenGrid::new(2, 2, w.codebook(), vec![0, 0, 1, 0]).unwrap();
        let c = &w.conditions()[0];
        let s = oracle_score(&w, c, &x).unwrap();
        let brute: Vec<f64> = (0..4)
            .map(|i| {
                let mut num = 0.0;
                let mut den = 0.0;
                for k in 0..2u32 {
                    let mut y = x.clone();
                    y.set(i, k).unwrap();
                    let p = w.log_prob(c, &y).unwrap().exp();
                    den += p;
                    if k == x.get(i) {
                        num += p;
                    }
                }
                num / den
            })
            .collect();
        for (a, b) in s.values().iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
        let min = s.values().iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(s.values().iter().position(|&v| v == min), Some(2));
        assert_eq!(s.values().iter().filter(|&&v| v == min).count(), 1);
    }

    #[test]
    fn uniform_world_scores_one_over_k() {
        let w = ToyWorld::from_spec(WorldSpec::new(1, 3, 4).condition(0, &["a"])).unwrap();
        let x = TokenGrid::new(1, 3, w.codebook(), vec![0, 3, 2]).unwrap();
        for v in oracle_score(&w, &w.conditions()[0], &x).unwrap().values() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn examples_respect_ratio_band() {
        let w = Arc::new(attractive());
        let g = OracleGenerator::new(w.clone());
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let ex = selector_example(&g, &w, &cfg, &mut rng).unwrap();
            let kept = ex.labels.iter().filter(|&&l| l == 1.0).count();
            assert!((1..4).contains(&kept));
            assert!(ex.grid.is_fully_revealed());
        }
    }

    #[test]
    fn training_reproducible() {
        let w = Arc::new(attractive());
        let g = OracleGenerator::new(w.clone());
        let cfg =
            TrainConfig { d_model: 8, ffn: 8, layers: 1, epochs: 2, steps_per_epoch: 4, ..TrainConfig::default() };
        let (a, ra) = train_selector(&g, &w, &cfg, f64::NEG_INFINITY).unwrap();
        let (b, rb) = train_selector(&g, &w, &cfg, f64::NEG_INFINITY).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(matches!(train_selector(&g, &w, &cfg, 0.99), Err(Error::TrainingFailure(_))));
    }
}
