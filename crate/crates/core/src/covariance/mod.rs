//! Joint covariance matrices over a grid: parametric Matérn models, the
//! empirical estimator from replications, and Gaussian-process simulation.

mod matern;
pub mod special;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use matern::{matern_kernel, BivariateMaternParams, MaternParams};

use crate::error::{Error, Result};
use crate::geometry::{Partition, SpatialGrid};
use crate::linalg;

/// Where a covariance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovSource {
    Parametric,
    Empirical,
    Posterior,
    /// Rebuilt from an eigensystem by Mercer summation.
    Reconstructed,
}

/// `nN × nN` covariance over `n` grid cells and `N` processes, stored as one
/// symmetric matrix whose `(i, j)` block of size `n × n` is `C_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCovariance {
    n: usize,
    n_proc: usize,
    matrix: DMatrix<f64>,
    source: CovSource,
}

/// Relative asymmetry accepted by [`JointCovariance::new`].
pub const SYMMETRY_TOL: f64 = 1e-10;
/// PSD tolerance: minimum eigenvalue ≥ −`PSD_TOL`·(max diagonal).
pub const PSD_TOL: f64 = 1e-8;

impl JointCovariance {
    /// Wraps a full matrix. Asymmetry beyond `1e-10·max(1, max|C|)` is an
    /// error; smaller asymmetry is averaged away.
    pub fn new(matrix: DMatrix<f64>, n: usize, n_proc: usize, source: CovSource) -> Result<Self> {
        if n == 0 || n_proc == 0 || matrix.nrows() != n * n_proc || matrix.ncols() != n * n_proc {
            return Err(Error::invalid(format!(
                "covariance of size {}×{} does not match n = {n}, N = {n_proc}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCovariance("non-finite entry".into()));
        }
        let scale = linalg::max_abs(&matrix).max(1.0);
        let asym = linalg::max_abs_asymmetry(&matrix);
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::InvalidCovariance(format!("asymmetry {asym:.3e} exceeds tolerance")));
        }
        let mut matrix = matrix;
        linalg::symmetrize_in_place(&mut matrix);
        Ok(JointCovariance { n, n_proc, matrix, source })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_proc(&self) -> usize {
        self.n_proc
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn source(&self) -> CovSource {
        self.source
    }

    /// Owned copy of block `C_ij`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.matrix.view((i * self.n, j * self.n), (self.n, self.n)).into_owned()
    }

    pub fn scaled(&self, c: f64) -> JointCovariance {
        JointCovariance { matrix: &self.matrix * c, ..self.clone() }
    }

    pub fn with_source(mut self, source: CovSource) -> Self {
        self.source = source;
        self
    }

    /// Smallest eigenvalue of the full matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.matrix)
    }

    /// Errors with [`Error::ModelInvalid`] when the matrix is indefinite
    /// beyond `PSD_TOL·(max diagonal)`.
    pub fn check_psd(&self) -> Result<()> {
        let tol = PSD_TOL * linalg::max_diagonal(&self.matrix).max(f64::MIN_POSITIVE);
        let mut shifted = self.matrix.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += tol;
        }
        if nalgebra::Cholesky::new(shifted).is_some() {
            return Ok(());
        }
        let min = self.min_eigenvalue();
        if min >= -tol {
            Ok(())
        } else {
            Err(Error::ModelInvalid { min_eigenvalue: min, tolerance: tol })
        }
    }

    /// Covariance between unit averages:
    /// `cov[y_i^A(A_u), y_j^A(A_v)] = Σ_{c∈A_u} Σ_{d∈A_v} a_c a_d C_ij(c, d) / (|A_u||A_v|)`,
    /// returned as an `mN × mN` matrix with the same block layout.
    pub fn aggregate(&self, part: &Partition, grid: &SpatialGrid) -> Result<DMatrix<f64>> {
        if grid.len() != self.n {
            return Err(Error::invalid("partition grid does not match covariance"));
        }
        let m = part.unit_count();
        let areas = part.unit_areas(grid);
        // Averaging operator P (m × n) with P[u, c] = a_c / |A_u|.
        let mut p = DMatrix::zeros(m, self.n);
        for (c, &u) in part.labels().iter().enumerate() {
            p[(u, c)] = grid.areas()[c] / areas[u];
        }
        let mut out = DMatrix::zeros(m * self.n_proc, m * self.n_proc);
        for i in 0..self.n_proc {
            for j in 0..self.n_proc {
                let blk = &p * self.block(i, j) * p.transpose();
                out.view_mut((i * m, j * m), (m, m)).copy_from(&blk);
            }
        }
        Ok(out)
    }
}

fn check_grid(grid: &SpatialGrid) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("grid has no cells"));
    }
    Ok(())
}

/// Univariate Matérn covariance on the grid cell centers.
pub fn build_univariate_cov(grid: &SpatialGrid, params: &MaternParams) -> Result<JointCovariance> {
    check_grid(grid)?;
    params.validate()?;
    let n = grid.len();
    let m = DMatrix::from_fn(n, n, |r, c| params.covariance(grid.distance(r, c)));
    let cov = JointCovariance::new(m, n, 1, CovSource::Parametric)?;
    cov.check_psd()?;
    Ok(cov)
}

/// Full bivariate Matérn covariance on the grid cell centers.
///
/// `C_ii(s, r) = σ_i² M(‖s−r‖; ν_i, a_i)` and
/// `C_12(s, r) = ρ σ_1 σ_2 M(‖s−r‖; ν12, a12)`. Inadmissible cross
/// parameters surface as [`Error::ModelInvalid`] naming the minimum
/// eigenvalue.
pub fn build_joint_cov(grid: &SpatialGrid, params: &BivariateMaternParams) -> Result<JointCovariance> {
    check_grid(grid)?;
    params.p1.validate()?;
    params.p2.validate()?;
    if !(-1.0..=1.0).contains(&params.rho) {
        return Err(Error::invalid("cross-correlation must lie in [-1, 1]"));
    }
    let n = grid.len();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for r in 0..n {
        for c in r..n {
            let d = grid.distance(r, c);
            let c11 = params.p1.covariance(d);
            let c22 = params.p2.covariance(d);
            let c12 = if params.rho == 0.0 { 0.0 } else { params.cross_covariance(d) };
            m[(r, c)] = c11;
            m[(c, r)] = c11;
            m[(n + r, n + c)] = c22;
            m[(n + c, n + r)] = c22;
            m[(r, n + c)] = c12;
            m[(c, n + r)] = c12;
            m[(n + r, c)] = c12;
            m[(n + c, r)] = c12;
        }
    }
    let cov = JointCovariance::new(m, n, 2, CovSource::Parametric)?;
    cov.check_psd()?;
    Ok(cov)
}

/// Replicated multivariate field values, `r` replications × `n` cells × `N`
/// processes. Storage is column-major with the replication index fastest:
/// `values[rep + r·(cell + n·process)]`. Missing observations are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicatedData {
    r: usize,
    n: usize,
    n_proc: usize,
    values: Vec<f64>,
}

impl ReplicatedData {
    pub fn new(r: usize, n: usize, n_proc: usize, values: Vec<f64>) -> Result<Self> {
        if r == 0 || n == 0 || n_proc == 0 || values.len() != r * n * n_proc {
            return Err(Error::invalid(format!(
                "data of length {} does not match r={r}, n={n}, N={n_proc}",
                values.len()
            )));
        }
        Ok(ReplicatedData { r, n, n_proc, values })
    }

    pub fn zeros(r: usize, n: usize, n_proc: usize) -> Self {
        ReplicatedData { r, n, n_proc, values: vec![0.0; r * n * n_proc] }
    }

    /// Single realization from an `n × N` matrix.
    pub fn from_single(z: &DMatrix<f64>) -> Self {
        ReplicatedData { r: 1, n: z.nrows(), n_proc: z.ncols(), values: z.as_slice().to_vec() }
    }

    pub fn replications(&self) -> usize {
        self.r
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_proc(&self) -> usize {
        self.n_proc
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn index(&self, rep: usize, cell: usize, process: usize) -> usize {
        rep + self.r * (cell + self.n * process)
    }

    pub fn get(&self, rep: usize, cell: usize, process: usize) -> f64 {
        self.values[self.index(rep, cell, process)]
    }

    pub fn set(&mut self, rep: usize, cell: usize, process: usize, v: f64) {
        let i = self.index(rep, cell, process);
        self.values[i] = v;
    }

    /// `r × nN` data matrix with column `cell + n·process`.
    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.r, self.n * self.n_proc, &self.values)
    }

    /// `n × N` matrix of one replication.
    pub fn replication(&self, rep: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n_proc, |c, p| self.get(rep, c, p))
    }

    /// Restrict to a subset of processes.
    pub fn select_processes(&self, processes: &[usize]) -> Result<Self> {
        if processes.iter().any(|&p| p >= self.n_proc) || processes.is_empty() {
            return Err(Error::invalid("process selection out of range"));
        }
        let block = self.r * self.n;
        let mut values = Vec::with_capacity(block * processes.len());
        for &p in processes {
            values.extend_from_slice(&self.values[p * block..(p + 1) * block]);
        }
        ReplicatedData::new(self.r, self.n, processes.len(), values)
    }

    /// Adds independent N(0, variances[p]) noise, deterministically in `seed`.
    pub fn with_noise(&self, variances: &[f64], seed: u64) -> Result<Self> {
        if variances.len() != self.n_proc || variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("need one nonnegative noise variance per process"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut out = self.clone();
        let block = self.r * self.n;
        for (i, v) in out.values.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += variances[i / block].sqrt() * z;
        }
        Ok(out)
    }
}

/// Empirical cross-covariance
/// `Ĉ_ij(s, r) = (1/ñ) Σ_k [Z_ik(s) − Z̄_i(s)][Z_jk(r) − Z̄_j(r)]`
/// with divisor ñ equal to the replication count. With `centered` the data
/// are taken as already zero-mean and no sample mean is removed.
pub fn empirical_cross_cov(data: &ReplicatedData, centered: bool) -> Result<JointCovariance> {
    if data.r < 2 {
        return Err(Error::InsufficientReplications { needed: 2, got: data.r });
    }
    if data.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("empirical covariance needs complete, finite data"));
    }
    let mut x = data.as_matrix();
    if !centered {
        for mut col in x.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }
    let mut c = x.transpose() * &x / data.r as f64;
    linalg::symmetrize_in_place(&mut c);
    JointCovariance::new(c, data.n, data.n_proc, CovSource::Empirical)
}

/// Replications generated per RNG substream.
pub const SIM_BATCH: usize = 64;

/// Zero-mean Gaussian draws with covariance `cov`.
///
/// Factorizes with Cholesky, adding jitter `1e-10·(max diagonal)` escalated
/// ×10 up to `1e-6` if needed. Replication batch `b` draws its standard
/// normals from ChaCha8 stream `b` of `seed`, so output is reproducible and
/// independent of thread count.
pub fn simulate_gp(cov: &JointCovariance, r: usize, seed: u64) -> Result<ReplicatedData> {
    if r == 0 {
        return Err(Error::invalid("replication count must be positive"));
    }
    let chol = linalg::cholesky_with_jitter(&cov.matrix, 1e-10, 1e-6)?;
    let l = chol.factor.l();
    let dim = cov.n * cov.n_proc;
    let batches: Vec<DMatrix<f64>> = (0..r.div_ceil(SIM_BATCH))
        .into_par_iter()
        .map(|b| {
            let count = SIM_BATCH.min(r - b * SIM_BATCH);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let w = DMatrix::from_fn(dim, count, |_, _| StandardNormal.sample(&mut rng));
            &l * w
        })
        .collect();
    let mut out = ReplicatedData::zeros(r, cov.n, cov.n_proc);
    for (b, y) in batches.iter().enumerate() {
        for k in 0..y.ncols() {
            let rep = b * SIM_BATCH + k;
            for idx in 0..dim {
                let i = out.index(rep, idx % cov.n, idx / cov.n);
                out.values[i] = y[(idx, k)];
            }
        }
    }
    Ok(out)
}
