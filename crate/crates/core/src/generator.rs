//! The generator interface shared by the oracle and neural generators, and
//! classifier-free guidance on top of it.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Codebook, Condition, TokenGrid};
use crate::toyworld::{oracle_frequency_map, ToyWorld};

/// Floor used when turning zero probabilities into logits.
pub const LOG_FLOOR: f64 = -700.0;

/// Everything a generator reports for one input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    /// `N x K` row-stochastic matrix, `p(x_0^i | x_t, c)`.
    pub dists: Vec<Vec<f64>>,
    /// Per-location value in `[0, 1]`, high in detailed regions.
    pub self_attention_map: Vec<f64>,
    /// One non-negative map per component of the condition, in order.
    pub cross_attention: Vec<(String, Vec<f64>)>,
}

/// A masked-token generator `G(x_t, c)`.
pub trait Generator: Send + Sync {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn codebook(&self) -> Codebook;

    /// `N x K` logits; `None` asks for the null (unconditional) condition.
    fn logits(&self, x_t: &TokenGrid, c: Option<&Condition>) -> Result<Vec<Vec<f64>>>;

    fn self_attention_map(&self, x_t: &TokenGrid, c: &Condition) -> Result<Vec<f64>>;

    fn cross_attention(&self, x_t: &TokenGrid, c: &Condition, component: &str) -> Result<Vec<f64>>;

    /// `K x d` embedding of each token, used for token-map upsampling.
    fn token_embeddings(&self) -> Vec<Vec<f64>>;

    /// Whether the null condition is available for guidance.
    fn supports_null(&self) -> bool {
        true
    }

    fn check_dims(&self, x_t: &TokenGrid) -> Result<()> {
        if x_t.height() != self.height() || x_t.width() != self.width() || x_t.codebook() != self.codebook() {
            return Err(Error::Shape(format!(
                "grid {}x{} (K={}) does not match generator {}x{} (K={})",
                x_t.height(),
                x_t.width(),
                x_t.codebook().size(),
                self.height(),
                self.width(),
                self.codebook().size()
            )));
        }
        Ok(())
    }
}

pub fn softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Draws an index from a probability row with a single uniform variate.
pub fn sample_categorical<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * row.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// Conditional prediction with all maps.
pub fn forward(gen: &dyn Generator, x_t: &TokenGrid, c: &Condition) -> Result<GeneratorOutput> {
    let dists = softmax_rows(&gen.logits(x_t, Some(c))?);
    let self_attention_map = gen.self_attention_map(x_t, c)?;
    let cross_attention = c
        .components
        .iter()
        .map(|comp| Ok((comp.clone(), gen.cross_attention(x_t, c, comp)?)))
        .collect::<Result<_>>()?;
    Ok(GeneratorOutput { dists, self_attention_map, cross_attention })
}

/// Combines logits as `null + s * (cond - null)` and renormalises.
///
/// `s = 1` is exactly the conditional prediction and `s = 0` exactly the
/// unconditional one.
pub fn guided_predict(gen: &dyn Generator, x_t: &TokenGrid, c: &Condition, scale: f64) -> Result<Vec<Vec<f64>>> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::Precondition(format!("guidance scale must be finite and >= 0, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(softmax_rows(&gen.logits(x_t, Some(c))?));
    }
    if !gen.supports_null() {
        return Err(Error::Config("generator was trained without a null condition; guidance unavailable".into()));
    }
    let null = gen.logits(x_t, None)?;
    if scale == 0.0 {
        return Ok(softmax_rows(&null));
    }
    let cond = gen.logits(x_t, Some(c))?;
    let combined: Vec<Vec<f64>> =
        cond.iter().zip(&null).map(|(lc, ln)| lc.iter().zip(ln).map(|(a, b)| b + scale * (a - b)).collect()).collect();
    Ok(softmax_rows(&combined))
}

/// Generator that reads its predictions off a [`ToyWorld`] exactly.
///
/// The null condition is the uniform mixture over the world's conditions.
/// `temperature` divides the log-probabilities; values below 1 sharpen.
#[derive(Debug, Clone)]
pub struct OracleGenerator {
    world: Arc<ToyWorld>,
    temperature: f64,
}

impl OracleGenerator {
    pub fn new(world: Arc<ToyWorld>) -> Self {
        Self { world, temperature: 1.0 }
    }

    pub fn with_temperature(world: Arc<ToyWorld>, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { world, temperature })
    }

    pub fn world(&self) -> &Arc<ToyWorld> {
        &self.world
    }
}

impl Generator for OracleGenerator {
    fn height(&self) -> usize {
        self.world.height()
    }

    fn width(&self) -> usize {
        self.world.width()
    }

    fn codebook(&self) -> Codebook {
        self.world.codebook()
    }

    fn logits(&self, x_t: &TokenGrid, c: Option<&Condition>) -> Result<Vec<Vec<f64>>> {
        self.check_dims(x_t)?;
        let dists = match c {
            Some(c) => self.world.oracle_predictive(c, x_t)?,
            None => self.world.unconditional_predictive(x_t)?,
        };
        Ok(dists
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&p| if p > 0.0 { p.ln().max(LOG_FLOOR) } else { LOG_FLOOR } / self.temperature)
                    .collect()
            })
            .collect())
    }

    fn self_attention_map(&self, x_t: &TokenGrid, c: &Condition) -> Result<Vec<f64>> {
        self.check_dims(x_t)?;
        Ok(oracle_frequency_map(&self.world.leave_one_out_predictive(c, x_t)?))
    }

    fn cross_attention(&self, x_t: &TokenGrid, c: &Condition, component: &str) -> Result<Vec<f64>> {
        self.check_dims(x_t)?;
        self.world.oracle_cross_attention(c, component, x_t)
    }

    fn token_embeddings(&self) -> Vec<Vec<f64>> {
        let k = self.world.codebook().size();
        (0..k).map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect()).collect()
    }
}
