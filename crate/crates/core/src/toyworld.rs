//! Exactly enumerable ground-truth worlds.
//!
//! A world is a pairwise Gibbs distribution over `H x W` token grids. Each
//! potential (unary or 4-neighbour edge) either belongs to the shared base or
//! to one named component; a condition activates the base plus the potentials
//! of its components. The distribution factorises over the connected
//! components ("clusters") of the edge graph, and every oracle quantity is
//! computed by exhaustive enumeration inside each cluster.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Codebook, Condition, LocationSet, TokenGrid, MASK};

/// Default cap on the number of states enumerated in one table.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    LowFreq,
    HighFreq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub id: i64,
    pub components: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnarySpec {
    pub i: usize,
    /// Log-potential per token, length `K`.
    pub table: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub i: usize,
    pub j: usize,
    /// `table[a][b]` is the log-potential of `x_i = a, x_j = b`.
    pub table: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
}

/// On-disk world definition (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub codebook_size: usize,
    pub height: usize,
    pub width: usize,
    pub conditions: Vec<ConditionSpec>,
    #[serde(default)]
    pub unary: Vec<UnarySpec>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
    /// One tag per location; empty means every location is `high_freq`.
    #[serde(default)]
    pub regions: Vec<Region>,
}

impl WorldSpec {
    pub fn new(height: usize, width: usize, codebook_size: usize) -> Self {
        Self {
            codebook_size,
            height,
            width,
            conditions: Vec::new(),
            unary: Vec::new(),
            edges: Vec::new(),
            regions: Vec::new(),
        }
    }

    pub fn condition(mut self, id: i64, components: &[&str]) -> Self {
        self.conditions.push(ConditionSpec { id, components: components.iter().map(|s| s.to_string()).collect() });
        self
    }

    pub fn unary(mut self, i: usize, table: Vec<f64>, component: Option<&str>) -> Self {
        self.unary.push(UnarySpec { i, table, component: component.map(str::to_string) });
        self
    }

    pub fn edge(mut self, i: usize, j: usize, table: Vec<Vec<f64>>, component: Option<&str>) -> Self {
        self.edges.push(EdgeSpec { i, j, table, component: component.map(str::to_string) });
        self
    }

    pub fn regions(mut self, regions: Vec<Region>) -> Self {
        self.regions = regions;
        self
    }
}

#[derive(Debug, Clone)]
struct Unary {
    loc: usize,
    table: Vec<f64>,
    owner: Option<usize>,
}

#[derive(Debug, Clone)]
struct Edge {
    a: usize,
    b: usize,
    /// Row-major `K x K`, indexed `x_a * K + x_b`.
    table: Vec<f64>,
    owner: Option<usize>,
}

#[derive(Debug, Clone)]
struct Cluster {
    locs: Vec<usize>,
    unary: Vec<usize>,
    edges: Vec<usize>,
    /// `K^p` for each position `p` in `locs`.
    strides: Vec<usize>,
    states: usize,
}

/// Normalised per-cluster tables for one set of active potentials.
#[derive(Debug, Clone)]
struct ClusterTables {
    log_p: Vec<Vec<f64>>,
    cdf: Vec<Vec<f64>>,
}

/// Exactly enumerable conditional distribution over small grids.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    codebook: Codebook,
    height: usize,
    width: usize,
    conditions: Vec<Condition>,
    components: Vec<String>,
    unary: Vec<Unary>,
    edges: Vec<Edge>,
    regions: Vec<Region>,
    clusters: Vec<Cluster>,
    /// `(cluster, position)` of every location.
    placement: Vec<(usize, usize)>,
    tables: Vec<ClusterTables>,
    budget: u64,
}

/// Exact probability of each of the `K^N` complete grids under one condition.
/// Grid codes are `sum_i x_i * K^i`.
#[derive(Debug, Clone)]
pub struct JointTable {
    pub condition: Condition,
    pub codebook: Codebook,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

impl JointTable {
    pub fn decode(&self, code: usize) -> TokenGrid {
        let k = self.codebook.size();
        let mut rest = code;
        let cells = (0..self.height * self.width)
            .map(|_| {
                let v = (rest % k) as u32;
                rest /= k;
                v
            })
            .collect();
        TokenGrid::new(self.height, self.width, self.codebook, cells).expect("valid code")
    }

    pub fn encode(grid: &TokenGrid) -> usize {
        let k = grid.codebook().size();
        grid.cells().iter().rev().fold(0, |acc, &v| acc * k + v as usize)
    }

    pub fn prob(&self, grid: &TokenGrid) -> f64 {
        self.probs[Self::encode(grid)]
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

impl ToyWorld {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: WorldSpec = serde_json::from_str(text)?;
        Self::from_spec(spec)
    }

    pub fn from_spec(spec: WorldSpec) -> Result<Self> {
        Self::with_budget(spec, DEFAULT_ENUMERATION_BUDGET)
    }

    /// Validates the spec and tabulates every condition's cluster
    /// distributions. Fails if any cluster exceeds `budget` states.
    pub fn with_budget(spec: WorldSpec, budget: u64) -> Result<Self> {
        let codebook = Codebook::new(spec.codebook_size)?;
        let k = codebook.size();
        let (h, w) = (spec.height, spec.width);
        if h == 0 || w == 0 {
            return Err(Error::Config("world dims must be positive".into()));
        }
        let n = h * w;
        if spec.conditions.is_empty() {
            return Err(Error::Config("world has no conditions".into()));
        }
        let mut seen = BTreeSet::new();
        let mut conditions = Vec::new();
        let mut components: Vec<String> = Vec::new();
        for c in &spec.conditions {
            if !seen.insert(c.id) {
                return Err(Error::Config(format!("duplicate condition id {}", c.id)));
            }
            conditions.push(Condition::new(c.id, c.components.clone())?);
            for comp in &c.components {
                if !components.contains(comp) {
                    components.push(comp.clone());
                }
            }
        }
        let owner_of = |label: &Option<String>| -> Result<Option<usize>> {
            match label {
                None => Ok(None),
                Some(l) => components
                    .iter()
                    .position(|c| c == l)
                    .map(Some)
                    .ok_or_else(|| Error::Config(format!("potential references unknown component {l:?}"))),
            }
        };
        let mut unary = Vec::new();
        for u in &spec.unary {
            if u.i >= n {
                return Err(Error::Config(format!("unary location {} out of range", u.i)));
            }
            if u.table.len() != k || u.table.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("unary table at {} must hold {k} finite values", u.i)));
            }
            unary.push(Unary { loc: u.i, table: u.table.clone(), owner: owner_of(&u.component)? });
        }
        let mut edges = Vec::new();
        for e in &spec.edges {
            if e.i >= n || e.j >= n {
                return Err(Error::Config(format!("edge ({}, {}) out of range", e.i, e.j)));
            }
            let (ri, ci, rj, cj) = (e.i / w, e.i % w, e.j / w, e.j % w);
            if ri.abs_diff(rj) + ci.abs_diff(cj) != 1 {
                return Err(Error::Config(format!("edge ({}, {}) is not a 4-neighbour pair", e.i, e.j)));
            }
            if e.table.len() != k || e.table.iter().any(|row| row.len() != k || row.iter().any(|v| !v.is_finite())) {
                return Err(Error::Config(format!("edge table ({}, {}) must be {k}x{k} finite", e.i, e.j)));
            }
            edges.push(Edge {
                a: e.i,
                b: e.j,
                table: e.table.iter().flatten().copied().collect(),
                owner: owner_of(&e.component)?,
            });
        }
        let regions = if spec.regions.is_empty() {
            vec![Region::HighFreq; n]
        } else if spec.regions.len() == n {
            spec.regions.clone()
        } else {
            return Err(Error::Config(format!("regions must list {n} tags, got {}", spec.regions.len())));
        };

        let mut parent: Vec<usize> = (0..n).collect();
        for e in &edges {
            let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for loc in 0..n {
            let root = find(&mut parent, loc);
            groups.entry(root).or_default().push(loc);
        }
        let mut placement = vec![(0, 0); n];
        let mut clusters = Vec::new();
        for (ci, locs) in groups.into_values().enumerate() {
            let states = (k as u128).pow(locs.len() as u32);
            if states > budget as u128 {
                return Err(Error::EnumerationTooLarge { states, budget });
            }
            for (p, &loc) in locs.iter().enumerate() {
                placement[loc] = (ci, p);
            }
            let strides = (0..locs.len()).map(|p| k.pow(p as u32)).collect();
            clusters.push(Cluster { locs, unary: Vec::new(), edges: Vec::new(), strides, states: states as usize });
        }
        for (ui, u) in unary.iter().enumerate() {
            clusters[placement[u.loc].0].unary.push(ui);
        }
        for (ei, e) in edges.iter().enumerate() {
            clusters[placement[e.a].0].edges.push(ei);
        }

        let mut world = ToyWorld {
            codebook,
            height: h,
            width: w,
            conditions,
            components,
            unary,
            edges,
            regions,
            clusters,
            placement,
            tables: Vec::new(),
            budget,
        };
        world.tables = (0..world.conditions.len())
            .map(|ci| {
                let active = world.active_for(&world.conditions[ci].components.clone());
                world.build_tables(&active)
            })
            .collect();
        Ok(world)
    }

    pub fn codebook(&self) -> Codebook {
        self.codebook
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region_set(&self, region: Region) -> LocationSet {
        self.regions.iter().enumerate().filter(|(_, r)| **r == region).map(|(i, _)| i).collect()
    }

    pub fn condition(&self, id: i64) -> Result<&Condition> {
        self.conditions.iter().find(|c| c.id == id).ok_or(Error::UnknownCondition(id))
    }

    fn condition_index(&self, c: &Condition) -> Result<usize> {
        self.conditions.iter().position(|x| x.id == c.id).ok_or(Error::UnknownCondition(c.id))
    }

    fn active_for(&self, labels: &[String]) -> Vec<bool> {
        self.components.iter().map(|c| labels.contains(c)).collect()
    }

    fn is_active(owner: Option<usize>, active: &[bool]) -> bool {
        owner.is_none_or(|o| active[o])
    }

    fn cluster_log_weights(&self, cluster: &Cluster, active: &[bool]) -> Vec<f64> {
        let k = self.codebook.size();
        let pos = |loc: usize| self.placement[loc].1;
        let mut digits = vec![0usize; cluster.locs.len()];
        let mut out = Vec::with_capacity(cluster.states);
        for _ in 0..cluster.states {
            let mut e = 0.0;
            for &ui in &cluster.unary {
                let u = &self.unary[ui];
                if Self::is_active(u.owner, active) {
                    e += u.table[digits[pos(u.loc)]];
                }
            }
            for &ei in &cluster.edges {
                let ed = &self.edges[ei];
                if Self::is_active(ed.owner, active) {
                    e += ed.table[digits[pos(ed.a)] * k + digits[pos(ed.b)]];
                }
            }
            out.push(e);
            for d in digits.iter_mut() {
                *d += 1;
                if *d < k {
                    break;
                }
                *d = 0;
            }
        }
        out
    }

    fn build_tables(&self, active: &[bool]) -> ClusterTables {
        let mut log_p = Vec::with_capacity(self.clusters.len());
        let mut cdf = Vec::with_capacity(self.clusters.len());
        for cluster in &self.clusters {
            let lw = self.cluster_log_weights(cluster, active);
            let z = log_sum_exp(lw.iter().copied());
            let lp: Vec<f64> = lw.iter().map(|v| v - z).collect();
            let mut acc = 0.0;
            let c: Vec<f64> = lp
                .iter()
                .map(|v| {
                    acc += v.exp();
                    acc
                })
                .collect();
            log_p.push(lp);
            cdf.push(c);
        }
        ClusterTables { log_p, cdf }
    }

    fn tables_for(&self, c: &Condition) -> Result<&ClusterTables> {
        Ok(&self.tables[self.condition_index(c)?])
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.height() != self.height || grid.width() != self.width || grid.codebook() != self.codebook {
            return Err(Error::Shape(format!(
                "grid {}x{} (K={}) does not match world {}x{} (K={})",
                grid.height(),
                grid.width(),
                grid.codebook().size(),
                self.height,
                self.width,
                self.codebook.size()
            )));
        }
        Ok(())
    }

    /// Exact joint distribution over all `K^N` grids.
    pub fn enumerate_joint(&self, c: &Condition) -> Result<JointTable> {
        let k = self.codebook.size();
        let n = self.len();
        let states = (k as u128).pow(n as u32);
        if states > self.budget as u128 {
            return Err(Error::EnumerationTooLarge { states, budget: self.budget });
        }
        let tables = self.tables_for(c)?;
        let mut probs = Vec::with_capacity(states as usize);
        let mut digits = vec![0usize; n];
        for _ in 0..states {
            let mut lp = 0.0;
            for (ci, cluster) in self.clusters.iter().enumerate() {
                let code: usize = cluster.locs.iter().zip(&cluster.strides).map(|(&l, s)| digits[l] * s).sum();
                lp += tables.log_p[ci][code];
            }
            probs.push(lp.exp());
            for d in digits.iter_mut() {
                *d += 1;
                if *d < k {
                    break;
                }
                *d = 0;
            }
        }
        Ok(JointTable { condition: c.clone(), codebook: self.codebook, height: self.height, width: self.width, probs })
    }

    /// Draws a grid exactly from the condition's distribution.
    pub fn sample_true<R: Rng + ?Sized>(&self, c: &Condition, rng: &mut R) -> Result<TokenGrid> {
        let tables = self.tables_for(c)?;
        let k = self.codebook.size();
        let mut cells = vec![0u32; self.len()];
        for (ci, cluster) in self.clusters.iter().enumerate() {
            let cdf = &tables.cdf[ci];
            let u = rng.random::<f64>() * cdf[cdf.len() - 1];
            let code = cdf.partition_point(|&x| x <= u).min(cdf.len() - 1);
            let mut rest = code;
            for &loc in &cluster.locs {
                cells[loc] = (rest % k) as u32;
                rest /= k;
            }
        }
        TokenGrid::new(self.height, self.width, self.codebook, cells)
    }

    /// `ln p_c(grid)` for a fully revealed grid.
    pub fn log_prob(&self, c: &Condition, grid: &TokenGrid) -> Result<f64> {
        self.check_grid(grid)?;
        if !grid.is_fully_revealed() {
            return Err(Error::Precondition("log_prob needs a fully revealed grid".into()));
        }
        let tables = self.tables_for(c)?;
        Ok(self
            .clusters
            .iter()
            .enumerate()
            .map(|(ci, cluster)| {
                let code: usize =
                    cluster.locs.iter().zip(&cluster.strides).map(|(&l, s)| grid.get(l) as usize * s).sum();
                tables.log_p[ci][code]
            })
            .sum())
    }

    /// Conditional marginals inside one cluster given the revealed cells,
    /// with the cluster position `hide` treated as masked. Returns the
    /// marginals of every cluster position and the log-probability of the
    /// evidence.
    fn cluster_conditional(
        &self,
        log_p: &[f64],
        cluster: &Cluster,
        cells: &[u32],
        hide: Option<usize>,
    ) -> Option<(Vec<Vec<f64>>, f64)> {
        let k = self.codebook.size();
        let mut base = 0usize;
        let mut free = Vec::new();
        for (p, &loc) in cluster.locs.iter().enumerate() {
            if cells[loc] == MASK || hide == Some(p) {
                free.push(p);
            } else {
                base += cells[loc] as usize * cluster.strides[p];
            }
        }
        let combos = k.pow(free.len() as u32);
        let mut digits = vec![0usize; free.len()];
        let mut codes = Vec::with_capacity(combos);
        let mut max = f64::NEG_INFINITY;
        for _ in 0..combos {
            let code = base + free.iter().zip(&digits).map(|(&p, &d)| d * cluster.strides[p]).sum::<usize>();
            max = max.max(log_p[code]);
            codes.push(code);
            for d in digits.iter_mut() {
                *d += 1;
                if *d < k {
                    break;
                }
                *d = 0;
            }
        }
        if max == f64::NEG_INFINITY {
            return None;
        }
        let mut marg = vec![vec![0.0; k]; free.len()];
        let mut total = 0.0;
        digits.iter_mut().for_each(|d| *d = 0);
        for &code in &codes {
            let wgt = (log_p[code] - max).exp();
            total += wgt;
            for (j, &d) in digits.iter().enumerate() {
                marg[j][d] += wgt;
            }
            for d in digits.iter_mut() {
                *d += 1;
                if *d < k {
                    break;
                }
                *d = 0;
            }
        }
        if total.is_nan() || total <= 0.0 {
            return None;
        }
        let mut out: Vec<Vec<f64>> = cluster
            .locs
            .iter()
            .map(|&loc| {
                let mut v = vec![0.0; k];
                if cells[loc] != MASK {
                    v[cells[loc] as usize] = 1.0;
                }
                v
            })
            .collect();
        for (j, &p) in free.iter().enumerate() {
            out[p] = marg[j].iter().map(|m| m / total).collect();
        }
        Some((out, max + total.ln()))
    }

    /// Per-location marginals under `tables` plus the log-evidence.
    fn predictive_with(
        &self,
        tables: &ClusterTables,
        x_t: &TokenGrid,
        leave_one_out: bool,
    ) -> Option<(Vec<Vec<f64>>, f64)> {
        let mut dists = vec![Vec::new(); self.len()];
        let mut log_ev = 0.0;
        for (ci, cluster) in self.clusters.iter().enumerate() {
            let (marg, ev) = self.cluster_conditional(&tables.log_p[ci], cluster, x_t.cells(), None)?;
            log_ev += ev;
            for (p, &loc) in cluster.locs.iter().enumerate() {
                dists[loc] = if leave_one_out && !x_t.is_masked(loc) {
                    self.cluster_conditional(&tables.log_p[ci], cluster, x_t.cells(), Some(p))?.0[p].clone()
                } else {
                    marg[p].clone()
                };
            }
        }
        Some((dists, log_ev))
    }

    /// Exact `p_c(x_0^i = j | revealed cells of x_t)` for every location.
    /// Revealed locations get the point mass on their token.
    pub fn oracle_predictive(&self, c: &Condition, x_t: &TokenGrid) -> Result<Vec<Vec<f64>>> {
        self.check_grid(x_t)?;
        self.predictive_with(self.tables_for(c)?, x_t, false).map(|(d, _)| d).ok_or(Error::ImpossibleEvidence(c.id))
    }

    /// Like [`oracle_predictive`](Self::oracle_predictive) but each revealed
    /// location is conditioned on every other revealed cell, not itself.
    pub fn leave_one_out_predictive(&self, c: &Condition, x_t: &TokenGrid) -> Result<Vec<Vec<f64>>> {
        self.check_grid(x_t)?;
        self.predictive_with(self.tables_for(c)?, x_t, true).map(|(d, _)| d).ok_or(Error::ImpossibleEvidence(c.id))
    }

    /// Predictive marginals and log-evidence under condition `c`.
    pub fn predictive_with_evidence(&self, c: &Condition, x_t: &TokenGrid) -> Result<(Vec<Vec<f64>>, f64)> {
        self.check_grid(x_t)?;
        self.predictive_with(self.tables_for(c)?, x_t, false).ok_or(Error::ImpossibleEvidence(c.id))
    }

    /// Predictive under the unconditional mixture `p(x) = mean_c p_c(x)`.
    pub fn unconditional_predictive(&self, x_t: &TokenGrid) -> Result<Vec<Vec<f64>>> {
        let parts: Vec<(Vec<Vec<f64>>, f64)> =
            self.conditions.iter().map(|c| self.predictive_with_evidence(c, x_t)).collect::<Result<_>>()?;
        let max = parts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = parts.iter().map(|p| (p.1 - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let k = self.codebook.size();
        Ok((0..self.len())
            .map(|i| {
                (0..k).map(|j| parts.iter().zip(&weights).map(|(p, w)| p.0[i][j] * w).sum::<f64>() / total).collect()
            })
            .collect())
    }

    /// Posterior probability of `c` given a complete grid, uniform prior.
    pub fn alignment_score(&self, c: &Condition, grid: &TokenGrid) -> Result<f64> {
        let target = self.condition_index(c)?;
        let logs: Vec<f64> = self.conditions.iter().map(|x| self.log_prob(x, grid)).collect::<Result<_>>()?;
        let z = log_sum_exp(logs.iter().copied());
        if !z.is_finite() {
            return Ok(1.0 / self.conditions.len() as f64);
        }
        Ok((logs[target] - z).exp())
    }

    /// Leave-one-out conditional `p_c(x^i = . | all other cells)` of a complete
    /// grid, from the potentials incident to each location.
    pub fn local_conditionals(&self, c: &Condition, grid: &TokenGrid) -> Result<Vec<Vec<f64>>> {
        let ci = self.condition_index(c)?;
        let active = self.active_for(&self.conditions[ci].components);
        self.local_conditionals_with(&active, grid)
    }

    fn local_conditionals_with(&self, active: &[bool], grid: &TokenGrid) -> Result<Vec<Vec<f64>>> {
        self.check_grid(grid)?;
        if !grid.is_fully_revealed() {
            return Err(Error::Precondition("grid must be fully revealed".into()));
        }
        let k = self.codebook.size();
        let mut energy = vec![vec![0.0; k]; self.len()];
        for u in self.unary.iter().filter(|u| Self::is_active(u.owner, active)) {
            for (a, e) in energy[u.loc].iter_mut().enumerate() {
                *e += u.table[a];
            }
        }
        for ed in self.edges.iter().filter(|e| Self::is_active(e.owner, active)) {
            let (xa, xb) = (grid.get(ed.a) as usize, grid.get(ed.b) as usize);
            #[allow(clippy::needless_range_loop)]
            for a in 0..k {
                energy[ed.a][a] += ed.table[a * k + xb];
                energy[ed.b][a] += ed.table[xa * k + a];
            }
        }
        Ok(energy
            .into_iter()
            .map(|e| {
                let z = log_sum_exp(e.iter().copied());
                e.iter().map(|v| (v - z).exp()).collect()
            })
            .collect())
    }

    /// Per-location sensitivity of the condition to one of its components:
    /// total variation between the leave-one-out predictive under `c` and
    /// under `c` without `component`, rescaled so the maximum is 1.
    pub fn oracle_cross_attention(&self, c: &Condition, component: &str, x_t: &TokenGrid) -> Result<Vec<f64>> {
        let ci = self.condition_index(c)?;
        if !self.conditions[ci].has_component(component) {
            return Err(Error::InvalidComponent { condition: c.id, component: component.to_string() });
        }
        self.check_grid(x_t)?;
        let with = self.leave_one_out_predictive(c, x_t)?;
        let reduced: Vec<String> = self.conditions[ci].components.iter().filter(|x| *x != component).cloned().collect();
        let tables = self.build_tables(&self.active_for(&reduced));
        let without =
            self.predictive_with(&tables, x_t, true).map(|(d, _)| d).ok_or(Error::ImpossibleEvidence(c.id))?;
        let tv: Vec<f64> = with
            .iter()
            .zip(&without)
            .map(|(p, q)| 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .collect();
        let max = tv.iter().copied().fold(0.0, f64::max);
        Ok(if max > 1e-12 { tv.iter().map(|v| v / max).collect() } else { vec![0.0; tv.len()] })
    }
}

/// Normalised predictive entropy `H_i / ln K` per location.
pub fn oracle_frequency_map(dists: &[Vec<f64>]) -> Vec<f64> {
    dists
        .iter()
        .map(|d| {
            let k = d.len() as f64;
            let h: f64 = d.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            (h / k.ln()).clamp(0.0, 1.0)
        })
        .collect()
}
