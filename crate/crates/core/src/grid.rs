//! Token-grid data model, mask schedules and weighted selection primitives.
//!
//! Locations are addressed row-major: cell `(r, c)` of an `H x W` grid has
//! index `r * W + c`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved cell value for a masked location. Never a valid token id.
pub const MASK: u32 = u32::MAX;

/// Codebook size `K` (number of token classes, MASK excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Codebook(usize);

impl Codebook {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Precondition(format!("codebook size must be at least 2, got {size}")));
        }
        Ok(Self(size))
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn contains(self, token: u32) -> bool {
        token != MASK && (token as usize) < self.0
    }
}

/// A condition label together with its ordered component labels (the toy
/// analogue of the words in a caption).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub id: i64,
    pub components: Vec<String>,
}

impl Condition {
    pub fn new(id: i64, components: Vec<String>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Precondition(format!("condition {id} has no components")));
        }
        Ok(Self { id, components })
    }

    pub fn has_component(&self, component: &str) -> bool {
        self.components.iter().any(|c| c == component)
    }
}

/// Sorted, duplicate-free set of location indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocationSet(Vec<usize>);

impl LocationSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// All locations `0..n`.
    pub fn full(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = &usize> + '_ {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn complement(&self, n: usize) -> Self {
        Self((0..n).filter(|i| !self.contains(*i)).collect())
    }

    pub fn is_subset_of(&self, other: &LocationSet) -> bool {
        self.0.iter().all(|i| other.contains(*i))
    }

    /// Membership mask of length `n`.
    pub fn indicator(&self, n: usize) -> Vec<bool> {
        let mut out = vec![false; n];
        for &i in &self.0 {
            out[i] = true;
        }
        out
    }
}

impl FromIterator<usize> for LocationSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        Self::from_indices(iter)
    }
}

/// `H x W` lattice of codebook indices with [`MASK`] for masked cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    codebook: Codebook,
    cells: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, codebook: Codebook, cells: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("grid dims must be positive, got {height}x{width}")));
        }
        if cells.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} cells for {height}x{width}, got {}",
                height * width,
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|&&v| v != MASK && !codebook.contains(v)) {
            return Err(Error::Precondition(format!("token {bad} outside codebook of size {}", codebook.size())));
        }
        Ok(Self { height, width, codebook, cells })
    }

    pub fn masked(height: usize, width: usize, codebook: Codebook) -> Self {
        Self { height, width, codebook, cells: vec![MASK; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn codebook(&self) -> Codebook {
        self.codebook
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn get(&self, i: usize) -> u32 {
        self.cells[i]
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.cells[i] == MASK
    }

    pub fn set(&mut self, i: usize, token: u32) -> Result<()> {
        if token != MASK && !self.codebook.contains(token) {
            return Err(Error::Precondition(format!("token {token} outside codebook")));
        }
        self.cells[i] = token;
        Ok(())
    }

    pub fn is_fully_revealed(&self) -> bool {
        self.cells.iter().all(|&v| v != MASK)
    }

    /// Copies the `h x w` sub-grid whose top-left corner is `(row, col)`.
    pub fn window(&self, row: usize, col: usize, h: usize, w: usize) -> Result<TokenGrid> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::Shape(format!(
                "window {h}x{w} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut cells = Vec::with_capacity(h * w);
        for r in row..row + h {
            cells.extend_from_slice(&self.cells[r * self.width + col..r * self.width + col + w]);
        }
        Ok(TokenGrid { height: h, width: w, codebook: self.codebook, cells })
    }

    /// Writes `patch` into this grid with its top-left corner at `(row, col)`.
    pub fn paste(&mut self, row: usize, col: usize, patch: &TokenGrid) -> Result<()> {
        if row + patch.height > self.height || col + patch.width > self.width {
            return Err(Error::Shape("patch exceeds grid bounds".into()));
        }
        for r in 0..patch.height {
            for c in 0..patch.width {
                self.cells[(row + r) * self.width + col + c] = patch.cells[r * patch.width + c];
            }
        }
        Ok(())
    }

    /// Plain-text dump: `H W K` header, then one line of `W` integers per row,
    /// MASK written as `-1`.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.height, self.width, self.codebook.size());
        for r in 0..self.height {
            let row: Vec<String> = self.cells[r * self.width..(r + 1) * self.width]
                .iter()
                .map(|&v| if v == MASK { "-1".to_string() } else { v.to_string() })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for TokenGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for TokenGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty grid text".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("header {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        let [h, w, k] = dims[..] else {
            return Err(Error::Parse(format!("header must be `H W K`, got {header:?}")));
        };
        let codebook = Codebook::new(k)?;
        let mut cells = Vec::with_capacity(h * w);
        for (r, line) in lines.by_ref().take(h).enumerate() {
            let row: Vec<i64> = line
                .split_whitespace()
                .map(|t| t.parse::<i64>().map_err(|e| Error::Parse(format!("row {r} {t:?}: {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != w {
                return Err(Error::Parse(format!("row {r} has {} values, expected {w}", row.len())));
            }
            for v in row {
                cells.push(match v {
                    -1 => MASK,
                    v if v >= 0 && (v as usize) < k => v as u32,
                    v => return Err(Error::Parse(format!("token {v} outside codebook of size {k}"))),
                });
            }
        }
        if cells.len() != h * w {
            return Err(Error::Parse(format!("expected {h} rows")));
        }
        TokenGrid::new(h, w, codebook, cells)
    }
}

/// Per-step keep counts in generation order: `counts[0]` is `k_T`, the number
/// of tokens revealed by the first step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSchedule {
    counts: Vec<usize>,
}

impl MaskSchedule {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidSchedule("schedule needs at least one step".into()));
        }
        if counts.contains(&0) {
            return Err(Error::InvalidSchedule("every step must reveal at least one token".into()));
        }
        Ok(Self { counts })
    }

    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Tokens revealed by the step at position `index` in generation order.
    pub fn count_at(&self, index: usize) -> usize {
        self.counts[index]
    }

    /// Cumulative kept count `m(t)` after the step at position `index`.
    pub fn cumulative(&self, index: usize) -> usize {
        self.counts[..=index].iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn build(self, n: usize, steps: usize) -> Result<MaskSchedule> {
        match self {
            ScheduleKind::Linear => make_linear_schedule(n, steps),
            ScheduleKind::Cosine => make_cosine_schedule(n, steps),
        }
    }
}

fn check_schedule_args(n: usize, steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("step count must be positive".into()));
    }
    if steps > n {
        return Err(Error::InvalidSchedule(format!("{steps} steps cannot each reveal a token of {n}")));
    }
    Ok(())
}

/// Counts as equal as possible; the earliest steps absorb the remainder.
pub fn make_linear_schedule(n: usize, steps: usize) -> Result<MaskSchedule> {
    check_schedule_args(n, steps)?;
    let base = n / steps;
    let rem = n % steps;
    let counts = (0..steps).map(|j| base + usize::from(j < rem)).collect();
    MaskSchedule::from_counts(counts)
}

/// Cosine schedule: the masked fraction after `j` of `T` steps is
/// `cos(pi/2 * j/T)`. Each step gets one token, and the remaining `N - T`
/// are spread over the cosine increments by largest remainder.
pub fn make_cosine_schedule(n: usize, steps: usize) -> Result<MaskSchedule> {
    check_schedule_args(n, steps)?;
    let extra = n - steps;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let t = steps as f64;
    let increments: Vec<f64> = (1..=steps)
        .map(|j| ((half_pi * (j - 1) as f64 / t).cos() - (half_pi * j as f64 / t).cos()) * extra as f64)
        .collect();
    let mut counts: Vec<usize> = increments.iter().map(|x| 1 + x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum::<usize>() - steps;
    let mut order: Vec<usize> = (0..steps).collect();
    // Largest fractional part first; later steps win ties so counts stay monotone.
    order.sort_by(|&a, &b| {
        let fa = increments[a] - increments[a].floor();
        let fb = increments[b] - increments[b].floor();
        fb.partial_cmp(&fa).unwrap().then(b.cmp(&a))
    });
    for &j in order.iter().take(extra.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    MaskSchedule::from_counts(counts)
}

/// `A_t`: the locations whose cell is MASK.
pub fn masked_set(grid: &TokenGrid) -> LocationSet {
    LocationSet(grid.cells.iter().enumerate().filter(|(_, &v)| v == MASK).map(|(i, _)| i).collect())
}

/// Keeps `predicted`'s token at every location of `keep`, MASK elsewhere.
pub fn apply_keep(predicted: &TokenGrid, keep: &LocationSet) -> Result<TokenGrid> {
    if !predicted.is_fully_revealed() {
        return Err(Error::Precondition("predicted grid contains MASK".into()));
    }
    if let Some(&bad) = keep.iter().find(|&&i| i >= predicted.len()) {
        return Err(Error::Precondition(format!("keep index {bad} out of range")));
    }
    let mut out = TokenGrid::masked(predicted.height, predicted.width, predicted.codebook);
    for &i in keep.iter() {
        out.cells[i] = predicted.cells[i];
    }
    Ok(out)
}

/// Draws `m` distinct indices by sequential weighted draws: pick an index
/// with probability proportional to its weight, remove it, renormalize.
///
/// Consumes exactly `m` uniform variates from `rng`.
pub fn weighted_sample_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<LocationSet> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Precondition(format!("invalid selection weight {w}")));
    }
    let available = weights.iter().filter(|&&w| w > 0.0).count();
    if m > available {
        return Err(Error::InfeasibleSample { requested: m, available });
    }
    let mut remaining: Vec<f64> = weights.to_vec();
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = remaining.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut choice = None;
        for (i, &w) in remaining.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                choice = Some(i);
                if u < acc {
                    break;
                }
            }
        }
        // Rounding can leave `u` at the very top; the last positive index wins then.
        let i = choice.expect("positive weight available");
        picked.push(i);
        remaining[i] = 0.0;
    }
    Ok(LocationSet::from_indices(picked))
}
