//! Karhunen–Loève expansions on a grid.
//!
//! Univariate systems come from a Galerkin projection onto an OC basis.
//! Multivariate systems are assembled either from the score covariance of
//! the univariate scores or from the eigendecomposition of a coefficient
//! covariance over stacked OC bases. All integrals are area-weighted sums
//! over grid cells.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::OcBasis;
use crate::covariance::{CovSource, JointCovariance, ReplicatedData};
use crate::error::{Error, Result};
use crate::geometry::{areal_average, Partition, SpatialGrid};
use crate::linalg;

/// How many eigenpairs to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum Truncation {
    /// Keep `λ_k ≥ c·λ_1`.
    Relative(f64),
    /// Keep the leading `M` pairs (fewer if unavailable).
    Count(usize),
    /// Keep `λ_k ≥ τ`.
    Absolute(f64),
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Relative(1e-10)
    }
}

impl Truncation {
    /// Number of leading entries of a non-increasing spectrum to keep.
    pub fn keep(&self, values: &[f64]) -> usize {
        let lead = values.first().copied().unwrap_or(0.0);
        match *self {
            Truncation::Count(m) => m.min(values.len()),
            Truncation::Relative(c) => values.iter().take_while(|&&v| v >= c * lead && v > 0.0).count(),
            Truncation::Absolute(t) => values.iter().take_while(|&&v| v >= t && v > 0.0).count(),
        }
    }
}

/// Eigenvalue tolerance: kept eigenvalues down to `−EIG_TOL·λ_1` are set to 0.
const EIG_TOL: f64 = 1e-10;

fn clamp_spectrum(values: &mut [f64]) -> Result<()> {
    let lead = values.first().copied().unwrap_or(0.0).max(0.0);
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < -EIG_TOL * lead.max(f64::MIN_POSITIVE) && lead > 0.0 {
                return Err(Error::InvalidCovariance(format!(
                    "retained eigenvalue {v:.3e} is negative beyond tolerance (λ₁ = {lead:.3e})"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(())
}

/// KLE of one process: `λ_1 ≥ … ≥ λ_M ≥ 0` and `ψ_k = Ψ^OC f_k` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateEigenSystem {
    process: usize,
    eigenvalues: Vec<f64>,
    eigenfunctions: DMatrix<f64>,
    coefficients: DMatrix<f64>,
}

impl UnivariateEigenSystem {
    pub fn process(&self) -> usize {
        self.process
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `n × M` eigenfunction values at cell centers.
    pub fn eigenfunctions(&self) -> &DMatrix<f64> {
        &self.eigenfunctions
    }

    /// `M̃ × M` coefficients `f_k` in the OC basis.
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Galerkin KLE: eigendecompose `U = Ψᵀ D C D Ψ` and map back, `ψ_k = Ψ f_k`.
pub fn univariate_kle_galerkin(
    c: &DMatrix<f64>,
    basis: &OcBasis,
    grid: &SpatialGrid,
    truncation: Truncation,
    process: usize,
) -> Result<UnivariateEigenSystem> {
    let n = grid.len();
    if c.nrows() != n || c.ncols() != n || basis.eval().nrows() != n {
        return Err(Error::invalid("covariance, basis and grid sizes disagree"));
    }
    let scale = linalg::max_abs(c).max(1.0);
    if linalg::max_abs_asymmetry(c) > 1e-8 * scale {
        return Err(Error::InvalidCovariance("asymmetric beyond 1e-8".into()));
    }
    let mut u = linalg::weighted_bilinear(basis.eval(), c, basis.eval(), grid.areas());
    linalg::symmetrize_in_place(&mut u);
    let (vals, vecs) = linalg::sym_eigen_desc(&u);
    let m = truncation.keep(&vals);
    let mut eigenvalues = vals[..m].to_vec();
    clamp_spectrum(&mut eigenvalues)?;
    let mut coefficients = vecs.columns(0, m).into_owned();
    let mut eigenfunctions = basis.eval() * &coefficients;
    let signs = linalg::normalize_column_signs(&mut eigenfunctions);
    for (k, s) in signs.iter().enumerate() {
        if *s < 0.0 {
            coefficients.column_mut(k).neg_mut();
        }
    }
    Ok(UnivariateEigenSystem { process, eigenvalues, eigenfunctions, coefficients })
}

/// Covariance of the univariate KLE scores across processes,
/// `K_ij = Ψ_iᵀ D C_ij D Ψ_j`, assembled into one symmetric `M × M` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCovariance {
    sizes: Vec<usize>,
    matrix: DMatrix<f64>,
}

impl ScoreCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `M_j` for each process.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn offset(&self, j: usize) -> usize {
        self.sizes[..j].iter().sum()
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.matrix.view((self.offset(i), self.offset(j)), (self.sizes[i], self.sizes[j])).into_owned()
    }
}

/// Builds the score covariance and checks that each diagonal block is
/// `diag(λ_j)`: off-diagonal entries and diagonal deviations must stay
/// within `1e-6·λ_j1`.
pub fn score_cov(
    c: &JointCovariance,
    systems: &[UnivariateEigenSystem],
    grid: &SpatialGrid,
) -> Result<ScoreCovariance> {
    if systems.len() != c.n_proc() || c.n() != grid.len() {
        return Err(Error::invalid("one univariate system per process on the covariance grid is required"));
    }
    if systems.iter().any(|s| s.eigenfunctions.nrows() != grid.len()) {
        return Err(Error::invalid("eigensystem built on a different grid"));
    }
    let sizes: Vec<usize> = systems.iter().map(|s| s.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut matrix = DMatrix::zeros(total, total);
    let mut oi = 0;
    for (i, si) in systems.iter().enumerate() {
        let mut oj = 0;
        for (j, sj) in systems.iter().enumerate() {
            if j >= i {
                let blk =
                    linalg::weighted_bilinear(&si.eigenfunctions, &c.block(i, j), &sj.eigenfunctions, grid.areas());
                matrix.view_mut((oi, oj), (si.len(), sj.len())).copy_from(&blk);
                if j > i {
                    matrix.view_mut((oj, oi), (sj.len(), si.len())).copy_from(&blk.transpose());
                }
            }
            oj += sj.len();
        }
        oi += si.len();
    }
    linalg::symmetrize_in_place(&mut matrix);
    let k = ScoreCovariance { sizes, matrix };
    for (j, s) in systems.iter().enumerate() {
        let blk = k.block(j, j);
        let tol = 1e-6 * s.eigenvalues.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        for a in 0..s.len() {
            for b in 0..s.len() {
                let want = if a == b { s.eigenvalues[a] } else { 0.0 };
                if (blk[(a, b)] - want).abs() > tol {
                    return Err(Error::InconsistentEigensystem(format!(
                        "diagonal block {j} entry ({a}, {b}) is {:.6e}, expected {want:.6e}",
                        blk[(a, b)]
                    )));
                }
            }
        }
    }
    Ok(k)
}

/// Origin of a multivariate eigensystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ScoreCov,
    PosteriorEof,
    PlugIn,
}

/// Multivariate KLE: eigenvalues `λ_k` and vector eigenfunctions whose
/// process-`j` component is stored as column `k` of an `n × M` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateEigenSystem {
    eigenvalues: Vec<f64>,
    eigenfunctions: Vec<DMatrix<f64>>,
    mixing: Option<DMatrix<f64>>,
    block_sizes: Vec<usize>,
    provenance: Provenance,
}

impl MultivariateEigenSystem {
    /// Direct constructor. `eigenfunctions[j]` is `n × M` for process `j`.
    pub fn from_parts(
        eigenvalues: Vec<f64>,
        eigenfunctions: Vec<DMatrix<f64>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let m = eigenvalues.len();
        let n = eigenfunctions.first().map(|e| e.nrows()).unwrap_or(0);
        if eigenfunctions.is_empty() || eigenfunctions.iter().any(|e| e.ncols() != m || e.nrows() != n) {
            return Err(Error::invalid("eigenfunction blocks must share shape n × M"));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12) + 1e-300) {
            return Err(Error::invalid("eigenvalues must be non-increasing"));
        }
        Ok(MultivariateEigenSystem { eigenvalues, eigenfunctions, mixing: None, block_sizes: vec![], provenance })
    }

    /// An `N = 1` system from a univariate one.
    pub fn from_univariate(sys: &UnivariateEigenSystem) -> Self {
        MultivariateEigenSystem {
            eigenvalues: sys.eigenvalues.clone(),
            eigenfunctions: vec![sys.eigenfunctions.clone()],
            mixing: None,
            block_sizes: vec![],
            provenance: Provenance::ScoreCov,
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Process-`j` components of all eigenfunctions, `n × M`.
    pub fn eigenfunctions(&self, j: usize) -> &DMatrix<f64> {
        &self.eigenfunctions[j]
    }

    /// Mixing vectors `e_k` as columns, when the system was assembled from
    /// per-process coordinates.
    pub fn mixing(&self) -> Option<&DMatrix<f64>> {
        self.mixing.as_ref()
    }

    /// Row counts of the per-process blocks of the mixing matrix.
    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn n(&self) -> usize {
        self.eigenfunctions[0].nrows()
    }

    pub fn n_proc(&self) -> usize {
        self.eigenfunctions.len()
    }

    /// Eigenfunctions stacked by process, `nN × M`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n * self.n_proc(), self.len());
        for (j, e) in self.eigenfunctions.iter().enumerate() {
            out.view_mut((j * n, 0), (n, self.len())).copy_from(e);
        }
        out
    }

    /// The leading `m` eigenpairs.
    pub fn truncated(&self, m: usize) -> Self {
        let m = m.min(self.len());
        MultivariateEigenSystem {
            eigenvalues: self.eigenvalues[..m].to_vec(),
            eigenfunctions: self.eigenfunctions.iter().map(|e| e.columns(0, m).into_owned()).collect(),
            mixing: self.mixing.as_ref().map(|x| x.columns(0, m).into_owned()),
            block_sizes: self.block_sizes.clone(),
            provenance: self.provenance,
        }
    }

    /// Applies a truncation rule to the existing spectrum.
    pub fn truncate_by(&self, rule: Truncation) -> Self {
        self.truncated(rule.keep(&self.eigenvalues))
    }

    /// Largest deviation of `Σ_j ∫[ψ_k]_j[ψ_l]_j` from `δ_kl`.
    pub fn orthonormality_error(&self, grid: &SpatialGrid) -> f64 {
        let mut g = DMatrix::zeros(self.len(), self.len());
        for e in &self.eigenfunctions {
            g += linalg::weighted_gram(e, grid.areas());
        }
        let mut worst = 0.0_f64;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - want).abs());
            }
        }
        worst
    }
}

fn finish_multivariate(
    vals: Vec<f64>,
    vecs: DMatrix<f64>,
    blocks: &[&DMatrix<f64>],
    truncation: Truncation,
    provenance: Provenance,
) -> Result<MultivariateEigenSystem> {
    let m = truncation.keep(&vals);
    let mut eigenvalues = vals[..m].to_vec();
    for v in eigenvalues.iter_mut() {
        *v = v.max(0.0);
    }
    let mut mixing = vecs.columns(0, m).into_owned();
    let sizes: Vec<usize> = blocks.iter().map(|b| b.ncols()).collect();
    let n = blocks[0].nrows();
    let mut stacked = DMatrix::zeros(n * blocks.len(), m);
    let mut off = 0;
    for (j, b) in blocks.iter().enumerate() {
        let e = mixing.view((off, 0), (sizes[j], m));
        stacked.view_mut((j * n, 0), (n, m)).copy_from(&(*b * e));
        off += sizes[j];
    }
    let signs = linalg::normalize_column_signs(&mut stacked);
    for (k, s) in signs.iter().enumerate() {
        if *s < 0.0 {
            mixing.column_mut(k).neg_mut();
        }
    }
    let eigenfunctions = (0..blocks.len()).map(|j| stacked.view((j * n, 0), (n, m)).into_owned()).collect();
    Ok(MultivariateEigenSystem { eigenvalues, eigenfunctions, mixing: Some(mixing), block_sizes: sizes, provenance })
}

/// Multivariate KLE from the score covariance: `K e_k = λ_k e_k` and
/// `[ψ_k]_j = Σ_l e_k^j[l] ψ_jl`.
pub fn multivariate_eigensystem(
    k: &ScoreCovariance,
    systems: &[UnivariateEigenSystem],
    truncation: Truncation,
) -> Result<MultivariateEigenSystem> {
    if systems.len() != k.sizes.len() || systems.iter().zip(&k.sizes).any(|(s, &m)| s.len() != m) {
        return Err(Error::invalid("score covariance does not match the univariate systems"));
    }
    let (vals, vecs) = linalg::sym_eigen_desc(&k.matrix);
    let lead = vals.first().copied().unwrap_or(0.0);
    let min = vals.last().copied().unwrap_or(0.0);
    if min < -1e-8 * lead.max(0.0) {
        return Err(Error::IndefiniteScoreCovariance { min_eigenvalue: min, max_eigenvalue: lead });
    }
    let blocks: Vec<&DMatrix<f64>> = systems.iter().map(|s| &s.eigenfunctions).collect();
    finish_multivariate(vals, vecs, &blocks, truncation, Provenance::ScoreCov)
}

/// EOF eigensystem of a coefficient covariance `Σ̂ = ÊΛ̂Êᵀ` over stacked OC
/// bases: `[ψ_k]_j = Ψ^OC_j ê_k^j`.
pub fn posterior_eof_eigensystem(
    sigma_hat: &DMatrix<f64>,
    oc: &[OcBasis],
    truncation: Truncation,
) -> Result<MultivariateEigenSystem> {
    let total: usize = oc.iter().map(|b| b.count()).sum();
    if oc.is_empty() || sigma_hat.nrows() != total || sigma_hat.ncols() != total {
        return Err(Error::invalid(format!(
            "coefficient covariance is {}×{}, OC blocks total {total}",
            sigma_hat.nrows(),
            sigma_hat.ncols()
        )));
    }
    let n = oc[0].eval().nrows();
    if oc.iter().any(|b| b.eval().nrows() != n) {
        return Err(Error::invalid("OC bases evaluated on different grids"));
    }
    let scale = linalg::max_abs(sigma_hat).max(f64::MIN_POSITIVE);
    if linalg::max_abs_asymmetry(sigma_hat) > 1e-8 * scale {
        return Err(Error::InvalidCovariance("coefficient covariance is not symmetric".into()));
    }
    let (vals, vecs) = linalg::sym_eigen_desc(sigma_hat);
    let lead = vals[0];
    if vals[vals.len() - 1] < -1e-8 * lead.max(0.0) {
        return Err(Error::InvalidCovariance(format!(
            "coefficient covariance is indefinite (minimum eigenvalue {:.3e})",
            vals[vals.len() - 1]
        )));
    }
    let blocks: Vec<&DMatrix<f64>> = oc.iter().map(|b| b.eval()).collect();
    finish_multivariate(vals, vecs, &blocks, truncation, Provenance::PosteriorEof)
}

/// Eigensystem of a covariance matrix itself under the grid quadrature:
/// eigendecompose `D^{1/2} C D^{1/2}` and set `ψ = D^{-1/2} u`.
pub fn dense_eigensystem(
    c: &JointCovariance,
    grid: &SpatialGrid,
    truncation: Truncation,
) -> Result<MultivariateEigenSystem> {
    let n = c.n();
    if grid.len() != n {
        return Err(Error::invalid("covariance and grid sizes disagree"));
    }
    let root: Vec<f64> = (0..n * c.n_proc()).map(|i| grid.areas()[i % n].sqrt()).collect();
    let a = DMatrix::from_fn(root.len(), root.len(), |r, s| root[r] * c.matrix()[(r, s)] * root[s]);
    let (vals, vecs) = linalg::sym_eigen_desc(&a);
    let m = truncation.keep(&vals);
    let eigenvalues: Vec<f64> = vals[..m].iter().map(|v| v.max(0.0)).collect();
    let mut stacked = DMatrix::from_fn(root.len(), m, |r, k| vecs[(r, k)] / root[r]);
    linalg::normalize_column_signs(&mut stacked);
    let eigenfunctions = (0..c.n_proc()).map(|j| stacked.view((j * n, 0), (n, m)).into_owned()).collect();
    Ok(MultivariateEigenSystem {
        eigenvalues,
        eigenfunctions,
        mixing: None,
        block_sizes: vec![],
        provenance: Provenance::PlugIn,
    })
}

/// `Σ_{k ≤ M_use} λ_k ψ_k ψ_kᵀ` as an `nN × nN` covariance.
pub fn mercer_reconstruct(sys: &MultivariateEigenSystem, m_use: usize) -> Result<JointCovariance> {
    if m_use == 0 || m_use > sys.len() {
        return Err(Error::invalid(format!("M_use must be in 1..={}, got {m_use}", sys.len())));
    }
    let psi = sys.stacked().columns(0, m_use).into_owned();
    let scaled = DMatrix::from_fn(psi.nrows(), m_use, |r, k| psi[(r, k)] * sys.eigenvalues[k]);
    let mut c = scaled * psi.transpose();
    linalg::symmetrize_in_place(&mut c);
    JointCovariance::new(c, sys.n(), sys.n_proc(), CovSource::Reconstructed)
}

/// Scores `α_k = Σ_j ∫ Y_j [ψ_k]_j` of every replication, `r × M`.
pub fn project_scores(
    data: &ReplicatedData,
    sys: &MultivariateEigenSystem,
    grid: &SpatialGrid,
) -> Result<DMatrix<f64>> {
    if data.n() != sys.n() || data.n_proc() != sys.n_proc() || grid.len() != sys.n() {
        return Err(Error::invalid("data, eigensystem and grid disagree in shape"));
    }
    let weighted = linalg::scale_rows(&sys.stacked(), &repeat_areas(grid, sys.n_proc()));
    Ok(data.as_matrix() * weighted)
}

fn repeat_areas(grid: &SpatialGrid, n_proc: usize) -> Vec<f64> {
    (0..n_proc).flat_map(|_| grid.areas().iter().copied()).collect()
}

/// Areal eigenfunctions `[ψ_k^A(𝒜_u)]_j`, one `m × M` table per process.
#[derive(Debug, Clone, PartialEq)]
pub struct ArealEigenTable {
    pub eigenvalues: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
}

impl ArealEigenTable {
    pub fn unit_count(&self) -> usize {
        self.values[0].nrows()
    }

    /// `Σ_k λ_k ψ_k^A ψ_k^Aᵀ`, an `mN × mN` matrix in process-block layout.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.unit_count();
        let big = self.eigenvalues.len();
        let mut stacked = DMatrix::zeros(m * self.values.len(), big);
        for (j, v) in self.values.iter().enumerate() {
            stacked.view_mut((j * m, 0), (m, big)).copy_from(v);
        }
        let scaled = DMatrix::from_fn(stacked.nrows(), big, |r, k| stacked[(r, k)] * self.eigenvalues[k]);
        scaled * stacked.transpose()
    }
}

/// Area-weighted averages of every eigenfunction component over each unit.
pub fn areal_eigensystem(
    sys: &MultivariateEigenSystem,
    part: &Partition,
    grid: &SpatialGrid,
) -> Result<ArealEigenTable> {
    let values = sys.eigenfunctions.iter().map(|e| areal_average(e, part, grid)).collect::<Result<Vec<_>>>()?;
    Ok(ArealEigenTable { eigenvalues: sys.eigenvalues.clone(), values })
}
