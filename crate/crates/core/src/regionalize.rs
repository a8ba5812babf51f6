//! Two-stage regionalization: Ward clustering proposes nested candidate
//! partitions, and the aggregation error decides how many units to keep.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cage::{dmvcage, posterior_mvcage, LossKind};
use crate::error::{Error, Result};
use crate::geometry::{split_disconnected, Partition, SpatialGrid};
use crate::kle::MultivariateEigenSystem;

/// What the clustering features are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Per-cell process estimates.
    #[default]
    ProcessEstimates,
    /// Score-weighted eigenfunction coordinates `√λ_k [ψ_k]_j(s)`.
    KleScores,
}

/// How the relative change between consecutive levels is tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoppingRule {
    /// Stop when `(MC_{j−1} − MC_j)/MC_{j−1} < ε`; any increase stops.
    #[default]
    Decrease,
    /// Stop when `|MC_{j−1} − MC_j|/MC_{j−1} < ε`.
    Magnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionalizeConfig {
    /// Weight of process features against coordinates, in `[0, 1]`.
    pub gamma: f64,
    /// Stop once `(MC_{j−1} − MC_j) / MC_{j−1} < epsilon`.
    pub epsilon: f64,
    pub j_min: Option<usize>,
    pub j_max: Option<usize>,
    pub enforce_contiguity: bool,
    pub features: FeatureSource,
    pub stopping: StoppingRule,
    pub seed: u64,
}

impl Default for RegionalizeConfig {
    fn default() -> Self {
        RegionalizeConfig {
            gamma: 0.5,
            epsilon: 1e-4,
            j_min: None,
            j_max: None,
            enforce_contiguity: true,
            features: FeatureSource::default(),
            stopping: StoppingRule::default(),
            seed: 0,
        }
    }
}

impl RegionalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if let (Some(lo), Some(hi)) = (self.j_min, self.j_max) {
            if lo > hi {
                return Err(Error::invalid(format!("j_min {lo} exceeds j_max {hi}")));
            }
        }
        if self.j_min == Some(0) || self.j_max == Some(0) {
            return Err(Error::invalid("unit-count bounds must be positive"));
        }
        Ok(())
    }
}

fn standardize_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / col.len() as f64).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
}

fn coordinate_block(grid: &SpatialGrid) -> DMatrix<f64> {
    let mut coords = DMatrix::from_fn(grid.len(), grid.dim(), |i, d| grid.center(i)[d]);
    standardize_columns(&mut coords);
    coords
}

fn check_features(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features contain NaN or infinite values"));
    }
    Ok(())
}

/// `(γ·standardized estimates, (1 − γ)·standardized coordinates)`, each
/// column standardized to zero mean and unit variance (constant columns
/// become zero).
pub fn feature_matrix(estimates: &DMatrix<f64>, grid: &SpatialGrid, gamma: f64) -> Result<DMatrix<f64>> {
    if estimates.nrows() != grid.len() {
        return Err(Error::invalid(format!(
            "estimates have {} rows, grid has {} cells",
            estimates.nrows(),
            grid.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid("gamma must lie in [0, 1]"));
    }
    check_features(estimates)?;
    let mut est = estimates.clone();
    standardize_columns(&mut est);
    Ok(join_blocks(est * gamma, coordinate_block(grid) * (1.0 - gamma)))
}

/// Features from an eigensystem: the block of `√λ_k [ψ_k]_j(s)` is centered
/// and scaled as a whole to unit mean-square per column, which keeps the
/// eigenvalue ordering inside the block, then joined with standardized
/// coordinates as in [`feature_matrix`].
pub fn kle_feature_matrix(sys: &MultivariateEigenSystem, grid: &SpatialGrid, gamma: f64) -> Result<DMatrix<f64>> {
    if sys.n() != grid.len() {
        return Err(Error::invalid("eigensystem and grid sizes disagree"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid("gamma must lie in [0, 1]"));
    }
    let m = sys.len();
    let mut block = DMatrix::zeros(grid.len(), m * sys.n_proc());
    for j in 0..sys.n_proc() {
        let psi = sys.eigenfunctions(j);
        for k in 0..m {
            let s = sys.eigenvalues()[k].max(0.0).sqrt();
            for i in 0..grid.len() {
                block[(i, j * m + k)] = s * psi[(i, k)];
            }
        }
    }
    for mut col in block.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let cols = block.ncols().max(1) as f64;
    let rms = (block.norm_squared() / (grid.len() as f64 * cols)).sqrt();
    if rms > 0.0 {
        block /= rms;
    }
    check_features(&block)?;
    Ok(join_blocks(block * gamma, coordinate_block(grid) * (1.0 - gamma)))
}

fn join_blocks(a: DMatrix<f64>, b: DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(&a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(&b);
    out
}

/// One agglomeration step. Cluster ids `< n` are cells; merge `i` creates
/// id `n + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    /// `√(2 ΔSS)`, the Euclidean distance for two singletons.
    pub height: f64,
    /// Ward cost ΔSS, the increase in within-cluster sum of squares.
    pub cost: f64,
    pub size: usize,
}

/// Ward dendrogram over `n` leaves, merges sorted by non-decreasing height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

/// Ward hierarchical clustering by nearest-neighbour chains with the
/// Lance–Williams update on squared Euclidean distances.
///
/// Ties in the nearest-neighbour search go to the lowest cluster index,
/// except that the chain's predecessor is kept when tied, so the result is
/// deterministic.
pub fn ward_hgc(features: &DMatrix<f64>) -> Result<Dendrogram> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::invalid("clustering needs at least 2 cells"));
    }
    check_features(features)?;
    // Packed upper-triangular distance storage.
    let idx = |i: usize, j: usize| {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * n - i * (i + 1) / 2 + (j - i - 1)
    };
    let rows: Vec<Vec<f64>> = (0..n).map(|i| features.row(i).iter().copied().collect()).collect();
    let mut dist = vec![0.0; n * (n - 1) / 2];
    for i in 0..n {
        for j in (i + 1)..n {
            dist[idx(i, j)] = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut raw: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster remains"));
        }
        loop {
            let x = *chain.last().expect("chain is non-empty");
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            if let Some(p) = prev {
                best = p;
                best_d = dist[idx(x, p)];
            }
            for y in 0..n {
                if y == x || !active[y] {
                    continue;
                }
                let d = dist[idx(x, y)];
                if d < best_d {
                    best = y;
                    best_d = d;
                }
            }
            if Some(best) == prev {
                chain.pop();
                chain.pop();
                let (a, b) = (x.min(best), x.max(best));
                raw.push((a, b, best_d));
                // Lance–Williams for Ward; the merged cluster keeps slot `a`.
                let (na, nb) = (size[a] as f64, size[b] as f64);
                for k in 0..n {
                    if !active[k] || k == a || k == b {
                        continue;
                    }
                    let nk = size[k] as f64;
                    let d = ((na + nk) * dist[idx(a, k)] + (nb + nk) * dist[idx(b, k)] - nk * best_d) / (na + nb + nk);
                    dist[idx(a, k)] = d;
                }
                size[a] += size[b];
                active[b] = false;
                remaining -= 1;
                break;
            }
            chain.push(best);
        }
    }
    // Sort by distance (stable), then relabel with union-find.
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&p, &q| raw[p].2.total_cmp(&raw[q].2));
    let mut parent: Vec<usize> = (0..n).collect();
    let mut cluster_id: Vec<usize> = (0..n).collect();
    let mut csize = vec![1usize; n];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut merges = Vec::with_capacity(n - 1);
    for (step, &o) in order.iter().enumerate() {
        let (a, b, d) = raw[o];
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let (ia, ib) = (cluster_id[ra], cluster_id[rb]);
        let total = csize[ra] + csize[rb];
        parent[rb] = ra;
        csize[ra] = total;
        cluster_id[ra] = n + step;
        merges.push(Merge { a: ia.min(ib), b: ia.max(ib), height: d.max(0.0).sqrt(), cost: 0.5 * d, size: total });
    }
    Ok(Dendrogram { n, merges })
}

/// Outcome of cutting a dendrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Cut {
    pub partition: Partition,
    /// Units added by splitting disconnected clusters.
    pub added: usize,
}

/// Applies the first `n − j` merges. Labels follow the order of each
/// unit's smallest cell index. With `enforce_contiguity`, disconnected
/// units are split into connected components, so the unit count can
/// exceed `j`.
pub fn cut_dendrogram(d: &Dendrogram, j: usize, grid: &SpatialGrid, enforce_contiguity: bool) -> Result<Cut> {
    if d.n != grid.len() {
        return Err(Error::invalid("dendrogram and grid sizes disagree"));
    }
    if j == 0 || j > d.n {
        return Err(Error::invalid(format!("cut level must be in 1..={}, got {j}", d.n)));
    }
    let n = d.n;
    let mut parent: Vec<usize> = (0..2 * n).collect();
    for (step, m) in d.merges.iter().take(n - j).enumerate() {
        parent[m.a] = n + step;
        parent[m.b] = n + step;
    }
    let root = |mut x: usize| {
        while parent[x] != x {
            x = parent[x];
        }
        x
    };
    let raw: Vec<usize> = (0..n).map(root).collect();
    let part = Partition::relabeled(&raw, grid)?;
    if enforce_contiguity {
        let (fixed, added) = split_disconnected(&part, grid);
        Ok(Cut { partition: fixed, added })
    } else {
        Ok(Cut { partition: part, added: 0 })
    }
}

/// Scores a candidate partition by total aggregation error.
pub trait PartitionScorer: Sync {
    fn score(&self, part: &Partition) -> Result<f64>;
}

impl<F> PartitionScorer for F
where
    F: Fn(&Partition) -> Result<f64> + Sync,
{
    fn score(&self, part: &Partition) -> Result<f64> {
        self(part)
    }
}

/// Plain-sum DMVCAGE of one eigensystem.
pub struct PlugInScorer<'a> {
    pub sys: &'a MultivariateEigenSystem,
    pub grid: &'a SpatialGrid,
    pub loss: LossKind,
}

impl PartitionScorer for PlugInScorer<'_> {
    fn score(&self, part: &Partition) -> Result<f64> {
        Ok(dmvcage(self.sys, part, self.grid, &self.loss)?.total)
    }
}

/// Plain-sum posterior MVCAGE over prebuilt per-draw eigensystems.
pub struct PosteriorScorer<'a> {
    pub systems: &'a [MultivariateEigenSystem],
    pub grid: &'a SpatialGrid,
    pub loss: LossKind,
}

impl PartitionScorer for PosteriorScorer<'_> {
    fn score(&self, part: &Partition) -> Result<f64> {
        Ok(posterior_mvcage(self.systems, |s| Ok(s.clone()), part, self.grid, &self.loss)?.total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Relative decrease fell below ε.
    Epsilon,
    /// The total reached zero.
    Perfect,
    /// Reached `j_max`.
    JMax,
    /// Reached one unit per cell.
    Exhausted,
    /// Minimum over an explicit range of levels.
    Argmin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Requested cluster count.
    pub j: usize,
    /// Units after contiguity repair.
    pub units: usize,
    /// Total aggregation error MC_j.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionalizationResult {
    pub partition: Partition,
    pub trace: Vec<TraceEntry>,
    pub stop: StopReason,
    pub selected_j: usize,
}

fn relative_change(rule: StoppingRule, prev: f64, cur: f64) -> f64 {
    match rule {
        StoppingRule::Decrease => (prev - cur) / prev,
        StoppingRule::Magnitude => (prev - cur).abs() / prev,
    }
}

/// Ward regionalization with the relative-change stopping rule over a
/// prebuilt dendrogram.
///
/// Records MC_1, evaluates `j = max(2, j_min)` without a test, and from the
/// next level on stops as soon as `(MC_{j−1} − MC_j)/MC_{j−1} < ε`, when
/// MC_j is zero, or at `j_max` / `n`. The partition at the stopping level is
/// returned. Levels are scored speculatively in parallel batches; the scan
/// itself is sequential, so the result does not depend on the thread count.
pub fn regionalize(
    scorer: &dyn PartitionScorer,
    dendrogram: &Dendrogram,
    grid: &SpatialGrid,
    cfg: &RegionalizeConfig,
) -> Result<RegionalizationResult> {
    cfg.validate()?;
    let n = grid.len();
    if dendrogram.n != n {
        return Err(Error::invalid("dendrogram and grid sizes disagree"));
    }
    let eval = |j: usize| -> Result<(Partition, TraceEntry)> {
        let cut = cut_dendrogram(dendrogram, j, grid, cfg.enforce_contiguity)?;
        let total = scorer.score(&cut.partition)?;
        let units = cut.partition.unit_count();
        Ok((cut.partition, TraceEntry { j, units, total }))
    };
    let (whole, first) = eval(1)?;
    let mut trace = vec![first];
    let start = cfg.j_min.unwrap_or(2).max(2);
    let end = cfg.j_max.unwrap_or(n).min(n);
    if start > end {
        return Ok(RegionalizationResult { partition: whole, trace, stop: StopReason::Exhausted, selected_j: 1 });
    }
    let zero_tol = 1e-12 * first.total.abs();
    let batch = rayon::current_num_threads().max(4);
    let mut prev: Option<f64> = None;
    let mut j = start;
    while j <= end {
        let hi = (j + batch - 1).min(end);
        let level: Vec<(Partition, TraceEntry)> = (j..=hi).into_par_iter().map(eval).collect::<Result<_>>()?;
        for (part, entry) in level {
            trace.push(entry);
            let jj = entry.j;
            let stop = if entry.total.abs() <= zero_tol {
                Some(StopReason::Perfect)
            } else if prev.is_some_and(|p| p > 0.0 && relative_change(cfg.stopping, p, entry.total) < cfg.epsilon) {
                Some(StopReason::Epsilon)
            } else if prev == Some(0.0) {
                Some(StopReason::Perfect)
            } else if jj == end {
                Some(if jj == n { StopReason::Exhausted } else { StopReason::JMax })
            } else {
                None
            };
            if let Some(stop) = stop {
                return Ok(RegionalizationResult { partition: part, trace, stop, selected_j: jj });
            }
            prev = Some(entry.total);
        }
        j = hi + 1;
    }
    unreachable!("the scan stops at the last level")
}

/// Scores every level in `j_min..=j_max` (both required) and keeps the one
/// with the smallest total, with the tie rules of [`argmin_over_candidates`].
pub fn regionalize_bounded(
    scorer: &dyn PartitionScorer,
    dendrogram: &Dendrogram,
    grid: &SpatialGrid,
    cfg: &RegionalizeConfig,
) -> Result<RegionalizationResult> {
    cfg.validate()?;
    let (Some(lo), Some(hi)) = (cfg.j_min, cfg.j_max) else {
        return Err(Error::invalid("bounded search needs both j_min and j_max"));
    };
    if hi > grid.len() {
        return Err(Error::invalid(format!("j_max {hi} exceeds the {} cells", grid.len())));
    }
    let cuts: Vec<Partition> = (lo..=hi)
        .map(|j| cut_dendrogram(dendrogram, j, grid, cfg.enforce_contiguity).map(|c| c.partition))
        .collect::<Result<_>>()?;
    let (best, totals) = argmin_over_candidates(&cuts, scorer)?;
    let trace = (lo..=hi)
        .zip(&cuts)
        .zip(&totals)
        .map(|((j, p), &total)| TraceEntry { j, units: p.unit_count(), total })
        .collect();
    Ok(RegionalizationResult { partition: cuts[best].clone(), trace, stop: StopReason::Argmin, selected_j: lo + best })
}

/// Index of the candidate with the smallest total; ties go to fewer units,
/// then to the lower index.
pub fn argmin_over_candidates(candidates: &[Partition], scorer: &dyn PartitionScorer) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate partitions"));
    }
    let totals: Vec<f64> = candidates.par_iter().map(|p| scorer.score(p)).collect::<Result<_>>()?;
    let mut best = 0;
    for i in 1..candidates.len() {
        let better = totals[i] < totals[best]
            || (totals[i] == totals[best] && candidates[i].unit_count() < candidates[best].unit_count());
        if better {
            best = i;
        }
    }
    Ok((best, totals))
}

/// Random contiguous partition with `m` units by simultaneous region growing
/// from `m` distinct random seed cells. Requires a connected grid.
pub fn random_contiguous_partition<R: Rng + ?Sized>(grid: &SpatialGrid, m: usize, rng: &mut R) -> Result<Partition> {
    let n = grid.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("unit count must be in 1..={n}, got {m}")));
    }
    let mut cells: Vec<usize> = (0..n).collect();
    cells.shuffle(rng);
    let mut label = vec![usize::MAX; n];
    let mut frontier: Vec<(usize, usize)> = Vec::new();
    for (u, &c) in cells[..m].iter().enumerate() {
        label[c] = u;
    }
    for (u, &c) in cells[..m].iter().enumerate() {
        frontier.extend(grid.neighbors(c).iter().filter(|&&x| label[x] == usize::MAX).map(|&x| (x, u)));
    }
    let mut assigned = m;
    while assigned < n {
        if frontier.is_empty() {
            return Err(Error::invalid("grid is not connected"));
        }
        let pick = rng.gen_range(0..frontier.len());
        let (cell, u) = frontier.swap_remove(pick);
        if label[cell] != usize::MAX {
            continue;
        }
        label[cell] = u;
        assigned += 1;
        frontier.extend(grid.neighbors(cell).iter().filter(|&&x| label[x] == usize::MAX).map(|&x| (x, u)));
    }
    Partition::relabeled(&label, grid)
}
