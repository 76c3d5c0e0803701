//! Trainable attention generator implementing [`Generator`].

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::grid::{Codebook, Condition, TokenGrid, MASK};
use crate::nn::{masked_cross_entropy, AttentionMapKind, NetConfig, Network, Sgd};
use crate::toyworld::ToyWorld;

/// Hyperparameters shared by generator and selector training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub attention_map: AttentionMapKind,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    pub probe_size: usize,
    pub seed: u64,
    /// Fraction of generator examples trained under the null condition.
    pub null_prob: f64,
    /// Selector training: masking-ratio band.
    pub mask_ratio: (f64, f64),
    /// Selector training: guidance-scale band.
    pub guidance: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            layers: 2,
            ffn: 64,
            attention_map: AttentionMapKind::Sigmoid,
            epochs: 20,
            steps_per_epoch: 50,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            clip: 1.0,
            probe_size: 256,
            seed: 0,
            null_prob: 0.1,
            mask_ratio: (0.2, 0.9),
            guidance: (1.0, 7.0),
        }
    }
}

/// Probe-batch loss before training and after every epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub probe_losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial(&self) -> f64 {
        self.probe_losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.probe_losses.last().expect("initial loss always recorded")
    }
}

/// Seeded streams used by training: parameter init, example draws, probe set.
pub(crate) fn train_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    (stream(0), stream(1), stream(2))
}

fn mean_loss<E, L>(net: &Network, examples: &[E], loss_fn: &L) -> Result<f64>
where
    E: Sync,
    L: Fn(&Network, &E) -> Result<(f64, Vec<f64>)> + Sync,
{
    let losses: Vec<f64> = examples.par_iter().map(|e| loss_fn(net, e).map(|r| r.0)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Minibatch SGD; batch gradients are reduced in example order, so results
/// do not depend on the thread count.
pub(crate) fn fit<E, G, L>(
    net: &mut Network,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    probe: &[E],
    mut draw: G,
    loss_fn: L,
) -> Result<TrainReport>
where
    E: Send + Sync,
    G: FnMut(&mut ChaCha8Rng) -> Result<E>,
    L: Fn(&Network, &E) -> Result<(f64, Vec<f64>)> + Sync,
{
    let mut report = TrainReport { probe_losses: vec![mean_loss(net, probe, &loss_fn)?] };
    let mut opt = Sgd::new(net.params().len(), cfg.lr, cfg.momentum, cfg.clip);
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let batch: Vec<E> = (0..cfg.batch_size.max(1)).map(|_| draw(rng)).collect::<Result<_>>()?;
            let results: Vec<(f64, Vec<f64>)> = batch.par_iter().map(|e| loss_fn(net, e)).collect::<Result<_>>()?;
            let mut grads = vec![0.0; net.params().len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / results.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            if !(loss.is_finite() && grads.iter().all(|g| g.is_finite())) {
                return Err(Error::TrainingFailure(format!("non-finite loss in epoch {epoch}")));
            }
            opt.step(net.params_mut(), &grads);
        }
        let probe_loss = mean_loss(net, probe, &loss_fn)?;
        if !probe_loss.is_finite() {
            return Err(Error::TrainingFailure(format!("probe loss diverged in epoch {epoch}")));
        }
        report.probe_losses.push(probe_loss);
    }
    net.round_to_f32();
    Ok(report)
}

/// One masked-denoising training example.
#[derive(Debug, Clone)]
pub struct GeneratorExample {
    pub input: TokenGrid,
    pub target: TokenGrid,
    pub masked: Vec<bool>,
    pub condition: Option<Condition>,
}

/// Samples `x_0` from the world, masks a uniformly sized random subset and
/// drops the condition with probability `null_prob`.
pub fn generator_example<R: Rng + ?Sized>(world: &ToyWorld, null_prob: f64, rng: &mut R) -> Result<GeneratorExample> {
    let conds = world.conditions();
    let c = &conds[rng.random_range(0..conds.len())];
    let target = world.sample_true(c, rng)?;
    let n = target.len();
    let ratio: f64 = rng.random();
    let count = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut masked = vec![false; n];
    let mut input = target.clone();
    for i in sample_indices(rng, n, count).iter() {
        masked[i] = true;
        input.set(i, MASK)?;
    }
    let condition = if rng.random::<f64>() < null_prob { None } else { Some(c.clone()) };
    Ok(GeneratorExample { input, target, masked, condition })
}

/// Masked-location cross-entropy and its parameter gradient.
pub fn generator_loss(net: &Network, ex: &GeneratorExample) -> Result<(f64, Vec<f64>)> {
    let cache = net.forward(ex.input.cells(), ex.condition.as_ref())?;
    let (loss, d_out) = masked_cross_entropy(&cache.output, net.config().codebook_size, ex.target.cells(), &ex.masked);
    let mut grads = vec![0.0; net.params().len()];
    net.backward(&cache, &d_out, &mut grads);
    Ok((loss, grads))
}

pub(crate) fn net_config_for(world: &ToyWorld, cfg: &TrainConfig, out_dim: usize, null_condition: bool) -> NetConfig {
    NetConfig {
        height: world.height(),
        width: world.width(),
        codebook_size: world.codebook().size(),
        conditions: world.conditions().iter().map(|c| c.id).collect(),
        components: world.components().to_vec(),
        d_model: cfg.d_model,
        heads: cfg.heads,
        layers: cfg.layers,
        ffn: cfg.ffn,
        out_dim,
        attention_map: cfg.attention_map,
        null_condition,
    }
}

/// A small attention generator with `K` logits per location.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralGenerator {
    net: Network,
    codebook: Codebook,
}

impl NeuralGenerator {
    pub fn new(net: Network) -> Result<Self> {
        let cfg = net.config();
        if cfg.out_dim != cfg.codebook_size {
            return Err(Error::Config(format!(
                "generator head must emit {} logits, has {}",
                cfg.codebook_size, cfg.out_dim
            )));
        }
        let codebook = Codebook::new(cfg.codebook_size)?;
        Ok(Self { net, codebook })
    }

    /// Untrained generator shaped for `world` (zeroed output head).
    pub fn init(world: &ToyWorld, cfg: &TrainConfig) -> Result<Self> {
        let (mut init_rng, _, _) = train_rngs(cfg.seed);
        let net =
            Network::new(net_config_for(world, cfg, world.codebook().size(), cfg.null_prob > 0.0), &mut init_rng)?;
        Self::new(net)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }
}

/// Trains a generator on samples from `world`.
pub fn train_generator(world: &ToyWorld, cfg: &TrainConfig) -> Result<(NeuralGenerator, TrainReport)> {
    let (mut init_rng, mut rng, mut probe_rng) = train_rngs(cfg.seed);
    let mut net =
        Network::new(net_config_for(world, cfg, world.codebook().size(), cfg.null_prob > 0.0), &mut init_rng)?;
    let probe: Vec<GeneratorExample> = (0..cfg.probe_size.max(1))
        .map(|_| generator_example(world, cfg.null_prob, &mut probe_rng))
        .collect::<Result<_>>()?;
    let report = fit(&mut net, cfg, &mut rng, &probe, |r| generator_example(world, cfg.null_prob, r), generator_loss)?;
    Ok((NeuralGenerator::new(net)?, report))
}

impl Generator for NeuralGenerator {
    fn height(&self) -> usize {
        self.net.config().height
    }

    fn width(&self) -> usize {
        self.net.config().width
    }

    fn codebook(&self) -> Codebook {
        self.codebook
    }

    fn logits(&self, x_t: &TokenGrid, c: Option<&Condition>) -> Result<Vec<Vec<f64>>> {
        self.check_dims(x_t)?;
        let cache = self.net.forward(x_t.cells(), c)?;
        Ok(cache.output.chunks(self.codebook.size()).map(<[f64]>::to_vec).collect())
    }

    fn self_attention_map(&self, x_t: &TokenGrid, c: &Condition) -> Result<Vec<f64>> {
        self.check_dims(x_t)?;
        let cache = self.net.forward(x_t.cells(), Some(c))?;
        self.net.attention_map(&cache)
    }

    fn cross_attention(&self, x_t: &TokenGrid, c: &Condition, component: &str) -> Result<Vec<f64>> {
        self.check_dims(x_t)?;
        let slot = c
            .components
            .iter()
            .position(|x| x == component)
            .ok_or_else(|| Error::InvalidComponent { condition: c.id, component: component.to_string() })?;
        let cache = self.net.forward(x_t.cells(), Some(c))?;
        Ok(self.net.cross_attention_slot(&cache, slot + 1))
    }

    fn token_embeddings(&self) -> Vec<Vec<f64>> {
        self.net.token_embeddings()
    }

    fn supports_null(&self) -> bool {
        self.net.config().null_condition
    }
}
