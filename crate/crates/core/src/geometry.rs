//! Spatial discretization: pseudo-point lattices, areal units, adjacency and
//! change-of-support averaging.
//!
//! A [`SpatialGrid`] is the integration measure used everywhere else in the
//! crate: every integral over the domain becomes a sum over grid cells
//! weighted by cell area. A [`Partition`] groups cells into areal units; the
//! areal value of a field over a unit is its area-weighted cell mean,
//!
//! ```text
//! f(A) = Σ_{c ∈ A} |B_c| f(c) / Σ_{c ∈ A} |B_c|,
//! ```
//!
//! which reduces to the plain arithmetic mean on a uniform lattice.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned domain bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.len() > 2 {
            return Err(Error::invalid("bbox must have matching bounds in 1 or 2 dimensions"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && h > l)) {
            return Err(Error::invalid("bbox is degenerate or inverted"));
        }
        Ok(BBox { lo, hi })
    }

    pub fn unit_interval() -> Self {
        BBox { lo: vec![0.0], hi: vec![1.0] }
    }

    pub fn unit_square() -> Self {
        BBox { lo: vec![0.0, 0.0], hi: vec![1.0, 1.0] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn diameter(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| (h - l) * (h - l)).sum::<f64>().sqrt()
    }
}

/// Pseudo-point lattice over the domain with cell areas and adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    dim: usize,
    centers: Vec<f64>,
    areas: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
    bbox: BBox,
    counts: Option<Vec<usize>>,
}

/// Regular lattice over `bbox` with `counts[d]` cells along axis `d`.
///
/// Cells are ordered with the first axis varying fastest. Adjacency is
/// interval adjacency in 1-D and rook (edge-sharing) adjacency in 2-D.
pub fn build_grid(bbox: &BBox, counts: &[usize]) -> Result<SpatialGrid> {
    let bbox = BBox::new(bbox.lo.clone(), bbox.hi.clone())?;
    if counts.len() != bbox.dim() {
        return Err(Error::invalid(format!(
            "need one cell count per axis ({} axes, {} counts)",
            bbox.dim(),
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::invalid("cell counts must be at least 1 per axis"));
    }
    let dim = bbox.dim();
    let steps: Vec<f64> = (0..dim).map(|d| (bbox.hi[d] - bbox.lo[d]) / counts[d] as f64).collect();
    let n: usize = counts.iter().product();
    let area: f64 = steps.iter().product();
    let mut centers = Vec::with_capacity(n * dim);
    let mut neighbors = vec![Vec::new(); n];
    match dim {
        1 => {
            for (i, nb) in neighbors.iter_mut().enumerate() {
                centers.push(bbox.lo[0] + (i as f64 + 0.5) * steps[0]);
                if i > 0 {
                    nb.push(i - 1);
                }
                if i + 1 < n {
                    nb.push(i + 1);
                }
            }
        }
        _ => {
            let (nx, ny) = (counts[0], counts[1]);
            for iy in 0..ny {
                for ix in 0..nx {
                    let idx = ix + nx * iy;
                    centers.push(bbox.lo[0] + (ix as f64 + 0.5) * steps[0]);
                    centers.push(bbox.lo[1] + (iy as f64 + 0.5) * steps[1]);
                    if iy > 0 {
                        neighbors[idx].push(idx - nx);
                    }
                    if ix > 0 {
                        neighbors[idx].push(idx - 1);
                    }
                    if ix + 1 < nx {
                        neighbors[idx].push(idx + 1);
                    }
                    if iy + 1 < ny {
                        neighbors[idx].push(idx + nx);
                    }
                }
            }
        }
    }
    Ok(SpatialGrid { dim, centers, areas: vec![area; n], neighbors, bbox, counts: Some(counts.to_vec()) })
}

impl SpatialGrid {
    /// Build an irregular support (e.g. counties) from user-supplied cell
    /// centers, areas and an undirected adjacency edge list.
    pub fn from_parts(dim: usize, centers: Vec<Vec<f64>>, areas: Vec<f64>, edges: &[(usize, usize)]) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::invalid("grids are 1- or 2-dimensional"));
        }
        let n = centers.len();
        if n == 0 || areas.len() != n {
            return Err(Error::invalid("centers and areas must be nonempty and of equal length"));
        }
        if centers.iter().any(|c| c.len() != dim || c.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("every center needs `dim` finite coordinates"));
        }
        if areas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::invalid("cell areas must be strictly positive"));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::invalid(format!("edge ({a}, {b}) references a missing cell")));
            }
            if a == b {
                return Err(Error::invalid("adjacency must be irreflexive"));
            }
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for c in &centers {
            for d in 0..dim {
                lo[d] = lo[d].min(c[d]);
                hi[d] = hi[d].max(c[d]);
            }
        }
        for d in 0..dim {
            if hi[d] <= lo[d] {
                hi[d] = lo[d] + 1.0;
            }
        }
        let grid = SpatialGrid {
            dim,
            centers: centers.into_iter().flatten().collect(),
            areas,
            neighbors,
            bbox: BBox { lo, hi },
            counts: None,
        };
        if !grid.is_connected() {
            return Err(Error::invalid("cell adjacency graph must be connected"));
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centers(&self) -> impl Iterator<Item = &[f64]> {
        self.centers.chunks(self.dim)
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Undirected edges `(a, b)` with `a < b`, in increasing order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, list) in self.neighbors.iter().enumerate() {
            for &b in list {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    /// Lattice shape for regular grids, `None` for irregular supports.
    pub fn counts(&self) -> Option<&[usize]> {
        self.counts.as_deref()
    }

    /// Rectangle (lo, hi) of a regular-lattice cell.
    pub fn cell_bounds(&self, i: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let counts = self.counts.as_ref()?;
        let c = self.center(i);
        let half: Vec<f64> =
            (0..self.dim).map(|d| 0.5 * (self.bbox.hi[d] - self.bbox.lo[d]) / counts[d] as f64).collect();
        Some((c.iter().zip(&half).map(|(v, h)| v - h).collect(), c.iter().zip(&half).map(|(v, h)| v + h).collect()))
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.center(i).iter().zip(self.center(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    fn is_connected(&self) -> bool {
        let all: Vec<usize> = (0..self.len()).collect();
        self.component_count(&all, &vec![true; self.len()]) <= 1
    }

    /// Number of connected components of the subgraph induced by `cells`
    /// (`member[c]` must be true exactly for cells in `cells`).
    fn component_count(&self, cells: &[usize], member: &[bool]) -> usize {
        let mut seen = vec![false; self.len()];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for &start in cells {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(c) = queue.pop_front() {
                for &nb in &self.neighbors[c] {
                    if member[nb] && !seen[nb] {
                        seen[nb] = true;
                        queue.push_back(nb);
                    }
                }
            }
        }
        count
    }
}

/// Assignment of grid cells to areal units `0..m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    unit_sizes: Vec<usize>,
    contiguous: Vec<bool>,
}

impl Partition {
    /// Labels must cover `0..m` with no empty unit.
    pub fn new(labels: Vec<usize>, grid: &SpatialGrid) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::invalid(format!("partition has {} labels for {} cells", labels.len(), grid.len())));
        }
        let m = labels.iter().max().map_or(0, |v| v + 1);
        let mut unit_sizes = vec![0usize; m];
        for &l in &labels {
            unit_sizes[l] += 1;
        }
        if let Some(empty) = unit_sizes.iter().position(|&s| s == 0) {
            return Err(Error::invalid(format!("unit {empty} has no cells")));
        }
        let mut part = Partition { labels, unit_sizes, contiguous: Vec::new() };
        part.contiguous = check_contiguity(&part, grid);
        Ok(part)
    }

    /// Accepts arbitrary label values and renumbers them `0..m` in order of
    /// first appearance.
    pub fn relabeled(raw: &[usize], grid: &SpatialGrid) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Partition::new(labels, grid)
    }

    /// Every cell its own unit.
    pub fn singletons(grid: &SpatialGrid) -> Self {
        Partition::new((0..grid.len()).collect(), grid).expect("singleton labels are valid")
    }

    /// One unit covering the whole grid.
    pub fn whole(grid: &SpatialGrid) -> Self {
        Partition::new(vec![0; grid.len()], grid).expect("single-unit labels are valid")
    }

    /// `k` consecutive runs of cells in index order, sizes differing by at
    /// most one. On a 1-D lattice these are contiguous intervals.
    pub fn index_blocks(grid: &SpatialGrid, k: usize) -> Result<Self> {
        let n = grid.len();
        if k == 0 || k > n {
            return Err(Error::invalid(format!("cannot form {k} blocks from {n} cells")));
        }
        let labels = (0..n).map(|i| i * k / n).collect();
        Partition::new(labels, grid)
    }

    /// Label cells by a function of their center.
    pub fn from_fn(grid: &SpatialGrid, f: impl Fn(&[f64]) -> usize) -> Result<Self> {
        let raw: Vec<usize> = grid.centers().map(f).collect();
        Partition::relabeled(&raw, grid)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn unit_count(&self) -> usize {
        self.unit_sizes.len()
    }

    pub fn unit_sizes(&self) -> &[usize] {
        &self.unit_sizes
    }

    pub fn contiguous(&self) -> &[bool] {
        &self.contiguous
    }

    pub fn is_contiguous(&self) -> bool {
        self.contiguous.iter().all(|&c| c)
    }

    /// Cell indices of each unit, increasing within a unit.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.unit_sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (cell, &l) in self.labels.iter().enumerate() {
            out[l].push(cell);
        }
        out
    }

    pub fn unit_areas(&self, grid: &SpatialGrid) -> Vec<f64> {
        let mut out = vec![0.0; self.unit_count()];
        for (cell, &l) in self.labels.iter().enumerate() {
            out[l] += grid.areas()[cell];
        }
        out
    }

    /// Canonical form for comparing partitions irrespective of label names.
    pub fn as_set_of_sets(&self) -> std::collections::BTreeSet<Vec<usize>> {
        self.members().into_iter().collect()
    }
}

/// Area-weighted mean of each column of `field` (cells × p) over each unit.
pub fn areal_average(field: &DMatrix<f64>, part: &Partition, grid: &SpatialGrid) -> Result<DMatrix<f64>> {
    if field.nrows() != grid.len() || part.labels.len() != grid.len() {
        return Err(Error::invalid(format!(
            "field has {} rows, grid has {} cells, partition has {} labels",
            field.nrows(),
            grid.len(),
            part.labels.len()
        )));
    }
    let m = part.unit_count();
    let mut weights = vec![0.0; m];
    for (cell, &unit) in part.labels.iter().enumerate() {
        weights[unit] += grid.areas[cell];
    }
    let mut sums = DMatrix::zeros(m, field.ncols());
    for (cell, &unit) in part.labels.iter().enumerate() {
        let w = grid.areas[cell] / weights[unit];
        for c in 0..field.ncols() {
            sums[(unit, c)] += w * field[(cell, c)];
        }
    }
    Ok(sums)
}

/// Scalar-field convenience wrapper around [`areal_average`].
pub fn areal_average_scalar(field: &[f64], part: &Partition, grid: &SpatialGrid) -> Result<Vec<f64>> {
    let m = DMatrix::from_column_slice(field.len(), 1, field);
    Ok(areal_average(&m, part, grid)?.column(0).iter().cloned().collect())
}

/// Per-unit flag: true iff the unit's cells induce a connected subgraph.
pub fn check_contiguity(part: &Partition, grid: &SpatialGrid) -> Vec<bool> {
    let members = part.members();
    let mut member = vec![false; grid.len()];
    members
        .iter()
        .map(|cells| {
            for &c in cells {
                member[c] = true;
            }
            let ok = grid.component_count(cells, &member) == 1;
            for &c in cells {
                member[c] = false;
            }
            ok
        })
        .collect()
}

/// Split every disconnected unit into its connected components.
///
/// New labels are assigned in order of each component's smallest cell index,
/// so the result is deterministic. Returns the repaired partition and the
/// number of units added.
pub fn split_disconnected(part: &Partition, grid: &SpatialGrid) -> (Partition, usize) {
    let n = grid.len();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let unit = part.labels[start];
        comp[start] = next;
        queue.push_back(start);
        while let Some(c) = queue.pop_front() {
            for &nb in grid.neighbors(c) {
                if comp[nb] == usize::MAX && part.labels[nb] == unit {
                    comp[nb] = next;
                    queue.push_back(nb);
                }
            }
        }
        next += 1;
    }
    let added = next - part.unit_count();
    let repaired = Partition::new(comp, grid).expect("component labels are dense");
    (repaired, added)
}

/// Serializable form of a grid: centers, areas and adjacency as an edge list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFile {
    pub dim: usize,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
    pub centers: Vec<Vec<f64>>,
    pub areas: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
}

impl From<&SpatialGrid> for GridFile {
    fn from(g: &SpatialGrid) -> Self {
        GridFile {
            dim: g.dim,
            bbox: g.bbox.clone(),
            counts: g.counts.clone(),
            centers: g.centers().map(|c| c.to_vec()).collect(),
            areas: g.areas.clone(),
            edges: g.edges(),
        }
    }
}

impl TryFrom<GridFile> for SpatialGrid {
    type Error = Error;

    fn try_from(f: GridFile) -> Result<Self> {
        if let Some(counts) = &f.counts {
            let grid = build_grid(&f.bbox, counts)?;
            if grid.len() == f.areas.len() {
                return Ok(grid);
            }
            return Err(Error::invalid("grid file counts disagree with its cell list"));
        }
        let mut grid = SpatialGrid::from_parts(f.dim, f.centers, f.areas, &f.edges)?;
        grid.bbox = BBox::new(f.bbox.lo, f.bbox.hi)?;
        Ok(grid)
    }
}

/// Serializable form of a partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionFile {
    pub labels: Vec<usize>,
    pub unit_sizes: Vec<usize>,
    pub contiguous: Vec<bool>,
}

impl From<&Partition> for PartitionFile {
    fn from(p: &Partition) -> Self {
        PartitionFile { labels: p.labels.clone(), unit_sizes: p.unit_sizes.clone(), contiguous: p.contiguous.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> SpatialGrid {
        build_grid(&BBox::unit_interval(), &[n]).unwrap()
    }

    #[test]
    fn unit_interval_four_cells() {
        let g = line(4);
        let centers: Vec<f64> = g.centers().map(|c| c[0]).collect();
        assert_eq!(centers, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(g.areas().iter().all(|&a| a == 0.25));
    }

    #[test]
    fn square_two_by_two_has_four_rook_edges() {
        let g = build_grid(&BBox::unit_square(), &[2, 2]).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.areas().iter().all(|&a| a == 0.25));
        assert_eq!(g.edges(), vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn five_thousand_pseudo_points() {
        let g = line(5000);
        assert_eq!(g.len(), 5000);
        assert!((g.total_area() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_counts_and_boxes() {
        assert!(build_grid(&BBox::unit_interval(), &[0]).is_err());
        assert!(build_grid(&BBox { lo: vec![1.0], hi: vec![0.0] }, &[3]).is_err());
        assert!(build_grid(&BBox::unit_square(), &[3]).is_err());
    }

    #[test]
    fn constant_field_averages_to_constant() {
        let g = build_grid(&BBox::unit_square(), &[5, 4]).unwrap();
        let part = Partition::from_fn(&g, |c| usize::from(c[0] > 0.3) + 2 * usize::from(c[1] > 0.6)).unwrap();
        let out = areal_average_scalar(&vec![3.5; g.len()], &part, &g).unwrap();
        assert!(out.iter().all(|v| (v - 3.5).abs() < 1e-15));
    }

    #[test]
    fn identity_field_over_first_half() {
        // Riemann oracle: (1/0.5)∫_0^0.5 s ds = 0.25.
        let g = line(100);
        let field: Vec<f64> = g.centers().map(|c| c[0]).collect();
        let part = Partition::index_blocks(&g, 2).unwrap();
        let out = areal_average_scalar(&field, &part, &g).unwrap();
        let fine = 100_000;
        let oracle: f64 = (0..fine / 2).map(|i| (i as f64 + 0.5) / fine as f64).sum::<f64>() / (fine / 2) as f64;
        assert!((out[0] - oracle).abs() < 1e-3);
        assert!((out[0] - 0.25).abs() < 1e-3);
    }

    #[test]
    fn singleton_average_is_identity() {
        let g = line(7);
        let field: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        let out = areal_average_scalar(&field, &Partition::singletons(&g), &g).unwrap();
        assert_eq!(out, field);
    }

    #[test]
    fn length_mismatch_is_invalid() {
        let g = line(5);
        let part = Partition::whole(&g);
        assert!(matches!(areal_average_scalar(&[1.0, 2.0], &part, &g), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn interval_contiguity() {
        let g = line(3);
        assert_eq!(check_contiguity(&Partition::whole(&g), &g), vec![true]);
        let split = Partition::new(vec![0, 1, 0], &g).unwrap();
        assert_eq!(split.contiguous(), &[false, true]);
    }

    #[test]
    fn repair_splits_components() {
        let g = line(6);
        let part = Partition::new(vec![0, 1, 0, 1, 0, 0], &g).unwrap();
        let (fixed, added) = split_disconnected(&part, &g);
        assert_eq!(added, 3);
        assert_eq!(fixed.unit_count(), 5);
        assert!(fixed.is_contiguous());
    }

    #[test]
    fn irregular_grid_requires_connectivity() {
        let centers = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(SpatialGrid::from_parts(1, centers.clone(), vec![1.0; 3], &[(0, 1)]).is_err());
        let g = SpatialGrid::from_parts(1, centers, vec![1.0, 2.0, 0.5], &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn grid_json_round_trip() {
        let g = build_grid(&BBox::unit_square(), &[3, 2]).unwrap();
        let text = serde_json::to_string(&GridFile::from(&g)).unwrap();
        let back: GridFile = serde_json::from_str(&text).unwrap();
        assert_eq!(SpatialGrid::try_from(back).unwrap(), g);
    }
}
