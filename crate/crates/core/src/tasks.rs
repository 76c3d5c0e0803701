//! Refinement, mask-free editing and tiled upscaling built on the sampler.

use rand::Rng;

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::grid::{masked_set, Condition, LocationSet, ScheduleKind, TokenGrid, MASK};
use crate::sampling::{draw_tiers, generate_from, RunContext, SamplingOptions, Strategy};
use crate::selector::Scorer;

pub const EDIT_EPSILON: f64 = 0.05;
pub const DEFAULT_REFINE_STEPS: usize = 8;
pub const DEFAULT_REFINE_FRACTION: f64 = 0.6;
pub const DEFAULT_EDIT_NOISE: f64 = 0.25;
pub const DEFAULT_EDIT_STEPS: usize = 10;

/// Models and knobs shared by every task.
#[derive(Clone, Copy)]
pub struct TaskContext<'a> {
    pub gen: &'a dyn Generator,
    pub scorer: &'a dyn Scorer,
    pub options: SamplingOptions,
    /// Steps used to refill masked locations (capped by the masked count).
    pub fill_steps: usize,
    pub fill_schedule: ScheduleKind,
}

impl<'a> TaskContext<'a> {
    pub fn new(gen: &'a dyn Generator, scorer: &'a dyn Scorer) -> Self {
        Self { gen, scorer, options: SamplingOptions::default(), fill_steps: 4, fill_schedule: ScheduleKind::Linear }
    }
}

fn require_revealed(grid: &TokenGrid) -> Result<()> {
    if !grid.is_fully_revealed() {
        return Err(Error::Precondition("task input must be fully revealed".into()));
    }
    Ok(())
}

fn mask_cells(grid: &TokenGrid, set: &LocationSet) -> Result<TokenGrid> {
    let mut out = grid.clone();
    for &i in set.iter() {
        out.set(i, MASK)?;
    }
    Ok(out)
}

/// Regenerates the MASK cells of `grid` with UniformFixed under `c`.
pub fn refill<R: Rng + ?Sized>(
    ctx: &TaskContext<'_>,
    grid: &TokenGrid,
    c: &Condition,
    rng: &mut R,
) -> Result<TokenGrid> {
    let masked = masked_set(grid).len();
    if masked == 0 {
        return Ok(grid.clone());
    }
    let schedule = ctx.fill_schedule.build(masked, ctx.fill_steps.clamp(1, masked))?;
    let run = RunContext { gen: ctx.gen, scorer: None, condition: c, schedule: &schedule, options: ctx.options };
    Ok(generate_from(&run, &Strategy::UniformFixed, grid, rng)?.0)
}

/// Tokens re-masked per revision step: equal shares of `N`.
pub fn refine_step_count(n: usize, steps: usize) -> usize {
    n.div_ceil(steps).min(n)
}

/// `steps` revision rounds: each re-masks `refine_step_count` locations drawn
/// with weight `1 - score` and refills them.
pub fn refine_steps<R: Rng + ?Sized>(
    grid: &TokenGrid,
    ctx: &TaskContext<'_>,
    steps: usize,
    c: &Condition,
    rng: &mut R,
) -> Result<TokenGrid> {
    require_revealed(grid)?;
    let mut x = grid.clone();
    if steps == 0 {
        return Ok(x);
    }
    let n = x.len();
    let count = refine_step_count(n, steps);
    for _ in 0..steps {
        let scores = ctx.scorer.score(&x, c)?;
        let weights: Vec<f64> = scores.values().iter().map(|s| 1.0 - s).collect();
        let remask = draw_tiers(&[weights], n, count, false, rng)?;
        x = refill(ctx, &mask_cells(&x, &remask)?, c, rng)?;
    }
    Ok(x)
}

/// The `floor(fraction * N)` lowest-scoring locations, lower index first
/// among ties.
pub fn lowest_scoring(scores: &[f64], fraction: f64) -> LocationSet {
    let count = ((fraction * scores.len() as f64).floor() as usize).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    LocationSet::from_indices(order.into_iter().take(count))
}

/// Masks the lowest-scoring fraction of the grid and regenerates it.
pub fn refine_mask_lowest<R: Rng + ?Sized>(
    grid: &TokenGrid,
    ctx: &TaskContext<'_>,
    fraction: f64,
    c: &Condition,
    rng: &mut R,
) -> Result<TokenGrid> {
    require_revealed(grid)?;
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Precondition(format!("refine fraction must lie in [0, 1), got {fraction}")));
    }
    let scores = ctx.scorer.score(grid, c)?;
    let set = lowest_scoring(scores.values(), fraction);
    refill(ctx, &mask_cells(grid, &set)?, c, rng)
}

/// Moves a grid from one condition to another, re-masking where the new
/// component attends and the selector disagrees.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub source: TokenGrid,
    pub old_condition: Condition,
    pub new_condition: Condition,
    pub component: String,
    pub noise_ratio: f64,
    pub steps: usize,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        if !self.new_condition.has_component(&self.component) {
            return Err(Error::InvalidComponent {
                condition: self.new_condition.id,
                component: self.component.clone(),
            });
        }
        if !(self.noise_ratio > 0.0 && self.noise_ratio < 1.0) {
            return Err(Error::Precondition(format!("noise ratio must lie in (0, 1), got {}", self.noise_ratio)));
        }
        if self.steps == 0 {
            return Err(Error::Precondition("edit needs at least one step".into()));
        }
        require_revealed(&self.source)
    }
}

/// Edit weights `(1 - score) * (eps + cross_attention)`.
pub fn edit_weights(scores: &[f64], cross: &[f64]) -> Vec<f64> {
    scores.iter().zip(cross).map(|(s, a)| (1.0 - s) * (EDIT_EPSILON + a)).collect()
}

pub fn edit_mask_free<R: Rng + ?Sized>(req: &EditRequest, ctx: &TaskContext<'_>, rng: &mut R) -> Result<TokenGrid> {
    req.validate()?;
    let c = &req.new_condition;
    let mut x = req.source.clone();
    let n = x.len();
    let count = ((req.noise_ratio * n as f64).ceil() as usize).min(n);
    for _ in 0..req.steps {
        let cross = ctx.gen.cross_attention(&x, c, &req.component)?;
        let scores = ctx.scorer.score(&x, c)?;
        let remask = draw_tiers(&[edit_weights(scores.values(), &cross)], n, count, false, rng)?;
        x = refill(ctx, &mask_cells(&x, &remask)?, c, rng)?;
    }
    Ok(x)
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Aligned-corner source coordinate of output index `i`.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Bicubic upsampling in embedding space with nearest-embedding quantisation.
pub fn upsample_token_map(grid: &TokenGrid, embeddings: &[Vec<f64>], factor: usize) -> Result<TokenGrid> {
    require_revealed(grid)?;
    if factor < 2 {
        return Err(Error::Precondition(format!("upsampling factor must be >= 2, got {factor}")));
    }
    let k = grid.codebook().size();
    if embeddings.len() != k {
        return Err(Error::Shape(format!("{} embeddings for codebook of {k}", embeddings.len())));
    }
    let d = embeddings[0].len();
    let (h, w) = (grid.height(), grid.width());
    let (oh, ow) = (h * factor, w * factor);
    let at = |r: isize, c: isize| -> &[f64] {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        &embeddings[grid.get(r * w + c) as usize]
    };
    let mut cells = Vec::with_capacity(oh * ow);
    let mut value = vec![0.0; d];
    for oy in 0..oh {
        let sy = source_coord(oy, h, oh);
        let y0 = sy.floor() as isize;
        for ox in 0..ow {
            let sx = source_coord(ox, w, ow);
            let x0 = sx.floor() as isize;
            value.iter_mut().for_each(|v| *v = 0.0);
            for dy in -1..=2 {
                let wy = cubic_kernel(sy - (y0 + dy) as f64);
                for dx in -1..=2 {
                    let wx = cubic_kernel(sx - (x0 + dx) as f64);
                    for (v, e) in value.iter_mut().zip(at(y0 + dy, x0 + dx)) {
                        *v += wy * wx * e;
                    }
                }
            }
            cells.push(nearest_embedding(&value, embeddings));
        }
    }
    TokenGrid::new(oh, ow, grid.codebook(), cells)
}

fn nearest_embedding(v: &[f64], embeddings: &[Vec<f64>]) -> u32 {
    let mut best = (0usize, f64::INFINITY);
    for (j, e) in embeddings.iter().enumerate() {
        let dist: f64 = v.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum();
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best.0 as u32
}

/// Window origins along one axis: stride `window - overlap`, last clamped to the edge.
pub fn tile_origins(len: usize, window: usize, overlap: usize) -> Result<Vec<usize>> {
    if window > len {
        return Err(Error::InvalidTiling(format!("window {window} larger than grid extent {len}")));
    }
    if overlap >= window {
        return Err(Error::InvalidTiling(format!("overlap {overlap} must be smaller than window {window}")));
    }
    let stride = window - overlap;
    let mut origins = Vec::new();
    let mut o = 0;
    while o + window < len {
        origins.push(o);
        o += stride;
    }
    origins.push(len - window);
    Ok(origins)
}

/// Refines a large grid window by window in raster order; later windows
/// overwrite overlaps.
pub fn upscale_tiled<R: Rng + ?Sized>(
    grid: &TokenGrid,
    ctx: &TaskContext<'_>,
    overlap: usize,
    passes: usize,
    refine: usize,
    c: &Condition,
    rng: &mut R,
) -> Result<TokenGrid> {
    require_revealed(grid)?;
    let (wh, ww) = (ctx.gen.height(), ctx.gen.width());
    if grid.codebook() != ctx.gen.codebook() {
        return Err(Error::Shape("grid and generator codebooks differ".into()));
    }
    let rows = tile_origins(grid.height(), wh, overlap.min(wh.saturating_sub(1)))?;
    let cols = tile_origins(grid.width(), ww, overlap.min(ww.saturating_sub(1)))?;
    let mut covered = vec![false; grid.len()];
    for &r in &rows {
        for &col in &cols {
            for y in r..r + wh {
                for x in col..col + ww {
                    covered[y * grid.width() + x] = true;
                }
            }
        }
    }
    assert!(covered.iter().all(|&c| c), "tiling must cover every cell");
    let mut x = grid.clone();
    for _ in 0..passes {
        for &r in &rows {
            for &col in &cols {
                let window = x.window(r, col, wh, ww)?;
                let refined = refine_steps(&window, ctx, refine, c, rng)?;
                x.paste(r, col, &refined)?;
            }
        }
    }
    Ok(x)
}
