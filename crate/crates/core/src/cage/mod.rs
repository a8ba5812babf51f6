//! Aggregation error of multivariate eigensystems over a partition.
//!
//! For unit 𝒜 with cells `c` of area `a_c`,
//!
//! ```text
//! DMVCAGE(𝒜) = (1/|𝒜|) Σ_{c∈𝒜} a_c Σ_k Σ_j L([ψ_k^A(𝒜)]_j, [ψ_k]_j(c); λ_k)
//! ```
//!
//! with the squared loss `λ (x − y)²` by default.

mod mse;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mse::{mse_dominance_experiment, MseConfig, MseOutcome};

use crate::error::{Error, Result};
use crate::geometry::{areal_average, Partition, SpatialGrid};
use crate::kle::{MultivariateEigenSystem, UnivariateEigenSystem};
use crate::stats;

type LossFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;

/// Loss between an areal and a point eigenfunction value, given λ.
#[derive(Clone, Default)]
pub enum LossKind {
    /// `λ (x − y)²`.
    #[default]
    Squared,
    /// `λ |x − y|`.
    Absolute,
    /// User loss `f(areal, point, λ)`; should be symmetric, nonnegative and
    /// zero on the diagonal.
    Custom { name: String, f: Arc<LossFn> },
}

impl LossKind {
    pub fn custom(name: impl Into<String>, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        LossKind::Custom { name: name.into(), f: Arc::new(f) }
    }

    /// `squared` or `absolute`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "squared" => Ok(LossKind::Squared),
            "absolute" => Ok(LossKind::Absolute),
            other => Err(Error::invalid(format!("unknown loss `{other}` (expected squared or absolute)"))),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            LossKind::Squared => "squared",
            LossKind::Absolute => "absolute",
            LossKind::Custom { name, .. } => name,
        }
    }

    #[inline]
    pub fn eval(&self, areal: f64, point: f64, lambda: f64) -> f64 {
        match self {
            LossKind::Squared => lambda * (areal - point) * (areal - point),
            LossKind::Absolute => lambda * (areal - point).abs(),
            LossKind::Custom { f, .. } => f(areal, point, lambda),
        }
    }
}

impl fmt::Debug for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LossKind({})", self.name())
    }
}

impl PartialEq for LossKind {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (LossKind::Custom { f: a, .. }, LossKind::Custom { f: b, .. }) => Arc::ptr_eq(a, b),
            _ => self.name() == other.name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CageProvenance {
    /// A single eigensystem.
    PlugIn,
    /// Average over per-draw eigensystems.
    Posterior { draws: usize, failed: usize },
}

/// Per-unit aggregation error and its breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct CageReport {
    /// DMVCAGE of each unit.
    pub per_unit: Vec<f64>,
    /// `m × N`: contribution of each process to each unit.
    pub per_process: DMatrix<f64>,
    /// Plain sum over units.
    pub total: f64,
    /// Sum over units weighted by `|𝒜_u| / |D|`.
    pub weighted_total: f64,
    pub provenance: CageProvenance,
    pub loss: String,
    /// Batch-means standard error of each unit value across draws.
    pub mc_std_error: Option<Vec<f64>>,
    pub unit_areas: Vec<f64>,
}

impl CageReport {
    fn from_parts(per_process: DMatrix<f64>, unit_areas: Vec<f64>, provenance: CageProvenance, loss: &str) -> Self {
        let per_unit: Vec<f64> = per_process.row_iter().map(|r| r.sum()).collect();
        let total = per_unit.iter().sum();
        let domain: f64 = unit_areas.iter().sum();
        let weighted_total = per_unit.iter().zip(&unit_areas).map(|(v, a)| v * a / domain).sum();
        CageReport {
            per_unit,
            per_process,
            total,
            weighted_total,
            provenance,
            loss: loss.to_string(),
            mc_std_error: None,
            unit_areas,
        }
    }

    pub fn unit_count(&self) -> usize {
        self.per_unit.len()
    }
}

fn check_shapes(sys: &MultivariateEigenSystem, part: &Partition, grid: &SpatialGrid) -> Result<()> {
    if sys.n() != grid.len() || part.labels().len() != grid.len() {
        return Err(Error::invalid(format!(
            "eigensystem has {} cells, grid {}, partition {}",
            sys.n(),
            grid.len(),
            part.labels().len()
        )));
    }
    Ok(())
}

/// Discrete MVCAGE of every unit, cell-level eigenfunctions standing in for
/// their sub-cell averages.
pub fn dmvcage(
    sys: &MultivariateEigenSystem,
    part: &Partition,
    grid: &SpatialGrid,
    loss: &LossKind,
) -> Result<CageReport> {
    check_shapes(sys, part, grid)?;
    let m = part.unit_count();
    let areas = part.unit_areas(grid);
    let lambda = sys.eigenvalues();
    let mut per_process = DMatrix::zeros(m, sys.n_proc());
    for j in 0..sys.n_proc() {
        let psi = sys.eigenfunctions(j);
        let areal = areal_average(psi, part, grid)?;
        for (c, &u) in part.labels().iter().enumerate() {
            let w = grid.areas()[c] / areas[u];
            let mut acc = 0.0;
            for (k, &l) in lambda.iter().enumerate() {
                acc += loss.eval(areal[(u, k)], psi[(c, k)], l);
            }
            per_process[(u, j)] += w * acc;
        }
    }
    Ok(CageReport::from_parts(per_process, areas, CageProvenance::PlugIn, loss.name()))
}

/// Univariate CAGE: [`dmvcage`] of the single-process system.
pub fn univariate_cage(
    sys: &UnivariateEigenSystem,
    part: &Partition,
    grid: &SpatialGrid,
    loss: &LossKind,
) -> Result<CageReport> {
    dmvcage(&MultivariateEigenSystem::from_univariate(sys), part, grid, loss)
}

/// Point and areal variance terms of one unit under the squared loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaTerms {
    /// `(1/|𝒜|) Σ_c a_c Σ_k λ_k ‖ψ_k(c)‖²`, the average point variance.
    pub point_term: f64,
    /// `Σ_k λ_k ‖ψ_k^A(𝒜)‖²`, the variance of the unit average.
    pub areal_term: f64,
}

impl AnovaTerms {
    pub fn difference(&self) -> f64 {
        self.point_term - self.areal_term
    }
}

/// Splits DMVCAGE into average point variance minus areal variance.
pub fn anova_decomposition(
    sys: &MultivariateEigenSystem,
    part: &Partition,
    grid: &SpatialGrid,
    loss: &LossKind,
) -> Result<Vec<AnovaTerms>> {
    if !matches!(loss, LossKind::Squared) {
        return Err(Error::UnsupportedLoss(loss.name().to_string()));
    }
    check_shapes(sys, part, grid)?;
    let m = part.unit_count();
    let areas = part.unit_areas(grid);
    let lambda = sys.eigenvalues();
    let mut terms = vec![AnovaTerms { point_term: 0.0, areal_term: 0.0 }; m];
    for j in 0..sys.n_proc() {
        let psi = sys.eigenfunctions(j);
        let areal = areal_average(psi, part, grid)?;
        for (c, &u) in part.labels().iter().enumerate() {
            let w = grid.areas()[c] / areas[u];
            let s: f64 = lambda.iter().enumerate().map(|(k, l)| l * psi[(c, k)] * psi[(c, k)]).sum();
            terms[u].point_term += w * s;
        }
        for (u, t) in terms.iter_mut().enumerate() {
            t.areal_term += lambda.iter().enumerate().map(|(k, l)| l * areal[(u, k)] * areal[(u, k)]).sum::<f64>();
        }
    }
    Ok(terms)
}

/// Posterior MVCAGE: DMVCAGE averaged over eigensystems built per draw.
///
/// Draws whose eigensystem construction fails are skipped and counted in the
/// provenance; if every draw fails the call errors. Draws are processed in
/// parallel and reduced in draw order with a running mean, so identical
/// draws reproduce the single-draw value exactly.
pub fn posterior_mvcage<D, F>(
    draws: &[D],
    build: F,
    part: &Partition,
    grid: &SpatialGrid,
    loss: &LossKind,
) -> Result<CageReport>
where
    D: Sync,
    F: Fn(&D) -> Result<MultivariateEigenSystem> + Sync,
{
    if draws.is_empty() {
        return Err(Error::InsufficientDraws { needed: 1, got: 0 });
    }
    let reports: Vec<Option<CageReport>> =
        draws.par_iter().map(|d| build(d).and_then(|sys| dmvcage(&sys, part, grid, loss)).ok()).collect();
    let failed = reports.iter().filter(|r| r.is_none()).count();
    let ok: Vec<&CageReport> = reports.iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::AllDrawsFailed { failed });
    }
    let mut mean = ok[0].per_process.clone();
    for (i, r) in ok.iter().enumerate().skip(1) {
        mean += (&r.per_process - &mean) / (i + 1) as f64;
    }
    let mut report = CageReport::from_parts(
        mean,
        ok[0].unit_areas.clone(),
        CageProvenance::Posterior { draws: ok.len(), failed },
        loss.name(),
    );
    if ok.len() >= 2 {
        let se = (0..report.unit_count())
            .map(|u| stats::batch_means_se(&ok.iter().map(|r| r.per_unit[u]).collect::<Vec<_>>()))
            .collect();
        report.mc_std_error = Some(se);
    }
    Ok(report)
}
