//! Generating basis functions evaluated on a grid, their quadrature Gram
//! matrix, and Obled–Creutin (OC) orthogonalization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, SpatialGrid};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Fourier,
    GaussianRbf,
    Custom,
}

/// Basis functions evaluated at grid cell centers: an `n × M̃` matrix Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    kind: BasisKind,
    eval: DMatrix<f64>,
    frequencies: Option<usize>,
    knots: Option<Vec<Vec<f64>>>,
    bandwidth: Option<f64>,
    duplicate_knots: usize,
}

impl BasisSet {
    /// Wraps an arbitrary evaluated basis. Columns must be finite and not
    /// identically zero.
    pub fn custom(eval: DMatrix<f64>) -> Result<Self> {
        Self::checked(BasisKind::Custom, eval)
    }

    fn checked(kind: BasisKind, eval: DMatrix<f64>) -> Result<Self> {
        if eval.ncols() == 0 || eval.nrows() == 0 {
            return Err(Error::invalid("basis has no columns"));
        }
        if eval.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("basis has non-finite values"));
        }
        if let Some(k) = eval.column_iter().position(|c| c.iter().all(|&v| v == 0.0)) {
            return Err(Error::invalid(format!("basis column {k} is identically zero on the grid")));
        }
        Ok(BasisSet { kind, eval, frequencies: None, knots: None, bandwidth: None, duplicate_knots: 0 })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn eval(&self) -> &DMatrix<f64> {
        &self.eval
    }

    /// M̃, the number of basis functions.
    pub fn count(&self) -> usize {
        self.eval.ncols()
    }

    pub fn frequencies(&self) -> Option<usize> {
        self.frequencies
    }

    pub fn knots(&self) -> Option<&[Vec<f64>]> {
        self.knots.as_deref()
    }

    pub fn bandwidth(&self) -> Option<f64> {
        self.bandwidth
    }

    /// Number of knots that repeat an earlier knot exactly.
    pub fn duplicate_knots(&self) -> usize {
        self.duplicate_knots
    }
}

/// Constant plus `K` sine/cosine pairs at integer frequencies `1..=K`:
/// columns `1, sin 2πs, cos 2πs, sin 4πs, cos 4πs, …`, `2K + 1` in all.
///
/// The coordinate is rescaled to `[0, 1]` over the grid's bounding box.
pub fn fourier_basis(grid: &SpatialGrid, k: usize) -> Result<BasisSet> {
    if grid.dim() != 1 {
        return Err(Error::UnsupportedDomain(format!("Fourier basis needs a 1-D grid, got dimension {}", grid.dim())));
    }
    if k == 0 {
        return Err(Error::invalid("frequency count K must be at least 1"));
    }
    let bbox = grid.bbox();
    let (lo, width) = (bbox.lo[0], bbox.hi[0] - bbox.lo[0]);
    let tau = 2.0 * std::f64::consts::PI;
    let eval = DMatrix::from_fn(grid.len(), 2 * k + 1, |i, c| {
        if c == 0 {
            return 1.0;
        }
        let s = (grid.center(i)[0] - lo) / width;
        let f = c.div_ceil(2) as f64;
        if c % 2 == 1 {
            (tau * f * s).sin()
        } else {
            (tau * f * s).cos()
        }
    });
    let mut set = BasisSet::checked(BasisKind::Fourier, eval)
        .map_err(|e| Error::invalid(format!("K = {k} is too large for {} cells: {e}", grid.len())))?;
    set.frequencies = Some(k);
    Ok(set)
}

/// Gaussian radial basis, column `k` equal to `exp(−‖s − r_k‖² / (2h²))`.
///
/// With `bandwidth = None`, `h` is 1.5 times the median nearest-neighbour
/// distance between distinct knots (the box diameter for a single knot).
/// Duplicate knots are accepted and counted; they make the Gram singular.
pub fn gaussian_rbf_basis(grid: &SpatialGrid, knots: &[Vec<f64>], bandwidth: Option<f64>) -> Result<BasisSet> {
    if knots.is_empty() {
        return Err(Error::invalid("at least one knot is required"));
    }
    if let Some(bad) = knots.iter().find(|k| k.len() != grid.dim() || k.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid(format!("knot {bad:?} does not match grid dimension {}", grid.dim())));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::invalid(format!("bandwidth must be positive, got {h}"))),
        None => default_bandwidth(knots, grid.bbox()),
    };
    let duplicate_knots = knots.iter().enumerate().filter(|(i, k)| knots[..*i].contains(k)).count();
    let inv = 1.0 / (2.0 * h * h);
    let eval = DMatrix::from_fn(grid.len(), knots.len(), |i, k| {
        let d2: f64 = grid.center(i).iter().zip(&knots[k]).map(|(a, b)| (a - b) * (a - b)).sum();
        (-d2 * inv).exp()
    });
    let mut set = BasisSet::checked(BasisKind::GaussianRbf, eval)?;
    set.knots = Some(knots.to_vec());
    set.bandwidth = Some(h);
    set.duplicate_knots = duplicate_knots;
    Ok(set)
}

fn default_bandwidth(knots: &[Vec<f64>], bbox: &BBox) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut nn: Vec<f64> = knots
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            knots
                .iter()
                .enumerate()
                .filter(|&(j, b)| j != i && b != a)
                .map(|(_, b)| dist(a, b))
                .min_by(|x, y| x.total_cmp(y))
        })
        .collect();
    if nn.is_empty() {
        return bbox.diameter();
    }
    nn.sort_by(|a, b| a.total_cmp(b));
    let mid = nn.len() / 2;
    let median = if nn.len().is_multiple_of(2) { 0.5 * (nn[mid - 1] + nn[mid]) } else { nn[mid] };
    1.5 * median
}

/// Knots on a regular lattice of `counts[d]` points per axis, placed at the
/// centers of an equal subdivision of the box (first axis fastest).
pub fn regular_knots(bbox: &BBox, counts: &[usize]) -> Result<Vec<Vec<f64>>> {
    if counts.len() != bbox.dim() || counts.contains(&0) {
        return Err(Error::invalid("need one positive knot count per dimension"));
    }
    let total: usize = counts.iter().product();
    Ok((0..total)
        .map(|mut idx| {
            (0..counts.len())
                .map(|d| {
                    let i = idx % counts[d];
                    idx /= counts[d];
                    let w = (bbox.hi[d] - bbox.lo[d]) / counts[d] as f64;
                    bbox.lo[d] + (i as f64 + 0.5) * w
                })
                .collect()
        })
        .collect())
}

/// `W = Θᵀ diag(areas) Θ`, the quadrature approximation of `∫θ_b θ_ℓ`.
pub fn gram_matrix(basis: &BasisSet, grid: &SpatialGrid) -> Result<DMatrix<f64>> {
    if basis.eval.nrows() != grid.len() {
        return Err(Error::invalid(format!(
            "basis evaluated on {} cells, grid has {}",
            basis.eval.nrows(),
            grid.len()
        )));
    }
    Ok(linalg::weighted_gram(&basis.eval, grid.areas()))
}

/// Options for [`oc_orthogonalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcOptions {
    /// Eigenvalues of W below `rank_tol·λ_max` count as null directions.
    pub rank_tol: f64,
    /// Fail on a rank-deficient Gram instead of dropping directions.
    pub strict: bool,
}

impl Default for OcOptions {
    fn default() -> Self {
        OcOptions { rank_tol: 1e-10, strict: false }
    }
}

/// An OC basis `Ψ = Θ Q`, orthonormal under the grid quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct OcBasis {
    eval: DMatrix<f64>,
    transform: DMatrix<f64>,
    gram: DMatrix<f64>,
    dropped: usize,
}

impl OcBasis {
    /// `n × M` values of the orthonormal functions at cell centers.
    pub fn eval(&self) -> &DMatrix<f64> {
        &self.eval
    }

    /// `M̃ × M` transform Q. At full rank `QQᵀ = W⁻¹`.
    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    /// Gram matrix W of the generating basis.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn count(&self) -> usize {
        self.eval.ncols()
    }

    /// Null directions removed because of rank deficiency.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Largest deviation of `Ψᵀ diag(a) Ψ` from the identity.
    pub fn orthonormality_error(&self, grid: &SpatialGrid) -> f64 {
        let g = linalg::weighted_gram(&self.eval, grid.areas());
        max_dev_from_identity(&g)
    }
}

fn max_dev_from_identity(g: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - want).abs());
        }
    }
    worst
}

/// Obled–Creutin orthogonalization.
///
/// At full rank `W = LLᵀ` and `Q = L⁻ᵀ`, followed by up to two Cholesky
/// refinement passes when rounding leaves the quadrature Gram further than
/// 1e-10 from the identity. A rank-deficient W either fails (`strict`) or is
/// reduced to its retained eigendirections, `Q = V Λ^{-1/2}`.
pub fn oc_orthogonalize(basis: &BasisSet, grid: &SpatialGrid, opts: OcOptions) -> Result<OcBasis> {
    let w = gram_matrix(basis, grid)?;
    let (vals, vecs) = linalg::sym_eigen_desc(&w);
    let max = vals[0];
    if !(max > 0.0) {
        return Err(Error::RankDeficient { dropped: vals.len() });
    }
    let keep = vals.iter().take_while(|&&v| v > opts.rank_tol * max).count();
    let dropped = vals.len() - keep;
    let mut q = if dropped == 0 {
        let l = nalgebra::Cholesky::new(w.clone()).ok_or(Error::RankDeficient { dropped: 0 })?.l();
        linalg::solve_upper_transpose(&l, &DMatrix::identity(w.nrows(), w.nrows()))
    } else if opts.strict {
        return Err(Error::RankDeficient { dropped });
    } else {
        DMatrix::from_fn(w.nrows(), keep, |r, c| vecs[(r, c)] / vals[c].sqrt())
    };
    let mut eval = &basis.eval * &q;
    for _ in 0..2 {
        let g = linalg::weighted_gram(&eval, grid.areas());
        if max_dev_from_identity(&g) <= 1e-10 {
            break;
        }
        let Some(chol) = nalgebra::Cholesky::new(g) else { break };
        let fix = linalg::solve_upper_transpose(&chol.l(), &DMatrix::identity(q.ncols(), q.ncols()));
        q = &q * &fix;
        eval = &basis.eval * &q;
    }
    Ok(OcBasis { eval, transform: q, gram: w, dropped })
}
