//! Bayesian basis-function model with a g-prior, fit by block Gibbs sampling.
//!
//! For process `j` and replication `k`,
//! `z_jk = μ_j + Φ_j ν_jk + ε_jk`, `ε ~ N(0, σ_j² I)`,
//! `ν_jk ~ N(0, g σ_j² (Φ_jᵀΦ_j)⁻¹)`, flat prior on `μ_j` and
//! `σ_j² ~ IG(a, b)`. The mean and noise variance are shared across
//! replications; each replication carries its own coefficient vector. With a
//! single replication this is the usual one-field model.
//!
//! Conditionals, sampled in the order σ² → μ → ν:
//!
//! * `σ² | · ~ IG(n r / 2 + a, SSR / 2 + b)`,
//!   `SSR = Σ_k Σ_i [z_k(s_i) − μ − (g/(g+1)) Φ ν̂_k]²`
//! * `μ | · ~ N(mean_{k,i}[z_k(s_i) − (g/(g+1)) Φ ν̂_k], σ² / (n r))`
//! * `ν_k | · ~ N((g/(g+1)) ν̂_k, (g/(g+1)) σ² (ΦᵀΦ)⁻¹)`
//!
//! where `ν̂_k` is the least-squares fit of `z_k − z̄` on Φ, `z̄` the mean
//! over all replications and observed cells, and `ΦᵀΦ` uses unit weights.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::OcBasis;
use crate::covariance::ReplicatedData;
use crate::error::{Error, Result};
use crate::linalg;
use crate::stats;

/// Prior and sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Prior scale; `None` means the number of observed cells.
    pub g: Option<f64>,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    /// Hold σ² at this value instead of sampling it.
    pub fixed_sigma2: Option<f64>,
    /// Added to the data mean to form the starting value of μ.
    pub start_offset: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            g: None,
            a_sigma: 0.0,
            b_sigma: 0.0,
            n_iter: 5000,
            n_burn: 1000,
            thin: 4,
            seed: 0,
            fixed_sigma2: None,
            start_offset: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.g {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::invalid(format!("g must be positive, got {g}")));
            }
        }
        if !(self.a_sigma >= 0.0 && self.b_sigma >= 0.0) {
            return Err(Error::invalid("inverse-gamma hyperparameters must be nonnegative"));
        }
        if self.n_iter <= self.n_burn {
            return Err(Error::invalid("n_iter must exceed n_burn"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if let Some(s) = self.fixed_sigma2 {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid("fixed σ² must be positive"));
            }
        }
        Ok(())
    }

    /// Retained draws, `⌊(n_iter − n_burn) / thin⌋`.
    pub fn draw_count(&self) -> usize {
        (self.n_iter - self.n_burn) / self.thin
    }
}

/// Full-conditional samplers, exposed for testing and reuse.
pub mod conditionals {
    use super::*;
    use rand_distr::{Distribution, Gamma, StandardNormal};

    /// `IG(n_obs/2 + a, ssr/2 + b)`.
    pub fn sample_sigma2<R: Rng + ?Sized>(
        rng: &mut R,
        ssr: f64,
        n_obs: usize,
        a: f64,
        b: f64,
        process: usize,
    ) -> Result<f64> {
        let shape = 0.5 * n_obs as f64 + a;
        let scale = 0.5 * ssr + b;
        if !(scale > 0.0) || !(shape > 0.0) {
            return Err(Error::DegeneratePosterior {
                process,
                reason: format!(
                    "inverse-gamma conditional is improper (shape {shape}, scale {scale}); set a_sigma, b_sigma > 0"
                ),
            });
        }
        let gamma =
            Gamma::new(shape, 1.0).map_err(|e| Error::DegeneratePosterior { process, reason: e.to_string() })?;
        let x: f64 = gamma.sample(rng);
        Ok(scale / x)
    }

    /// `N(mean, σ² / count)`.
    pub fn sample_mu<R: Rng + ?Sized>(rng: &mut R, mean: f64, sigma2: f64, count: usize) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        mean + (sigma2 / count as f64).sqrt() * z
    }

    /// `N(s ν̂, s σ² (ΦᵀΦ)⁻¹)` with `s = g/(g+1)`, given the Cholesky
    /// factor of `ΦᵀΦ`.
    pub fn sample_nu<R: Rng + ?Sized>(
        rng: &mut R,
        nu_hat: &DVector<f64>,
        shrink: f64,
        sigma2: f64,
        gram_chol: &Cholesky<f64, Dyn>,
    ) -> DVector<f64> {
        let w = DVector::from_fn(nu_hat.len(), |_, _| StandardNormal.sample(rng));
        // L⁻ᵀ w has covariance (LLᵀ)⁻¹.
        let l = gram_chol.l();
        let noise = l.transpose().solve_upper_triangular(&w).expect("Cholesky factor has a positive diagonal");
        nu_hat * shrink + noise * (shrink * sigma2).sqrt()
    }
}

/// Least-squares fit of one field on an OC design.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    /// ν̂ for `z − z̄` regressed on Φ.
    pub nu_hat: DVector<f64>,
    /// The centering value z̄.
    pub mean: f64,
    /// SSR evaluated at `μ = z̄`.
    pub ssr: f64,
    residual_base: Vec<f64>,
}

impl OlsFit {
    /// `Σ_i [z(s_i) − μ − (g/(g+1)) Φ ν̂]²` at a given μ.
    pub fn ssr_at(&self, mu: f64) -> f64 {
        self.residual_base.iter().map(|r| (r - mu) * (r - mu)).sum()
    }
}

/// Observed-cell design for one process.
struct Design {
    process: usize,
    rows: Vec<usize>,
    phi: DMatrix<f64>,
    gram_chol: Cholesky<f64, Dyn>,
}

impl Design {
    fn new(process: usize, observed: &[bool], oc: &OcBasis) -> Result<Self> {
        let rows: Vec<usize> = (0..observed.len()).filter(|&i| observed[i]).collect();
        if rows.is_empty() {
            return Err(Error::invalid(format!("process {process} has no observations")));
        }
        let phi = oc.eval().select_rows(&rows);
        if phi.ncols() > rows.len() {
            return Err(Error::RankDeficientDesign { process });
        }
        let gram = phi.transpose() * &phi;
        let gram_chol = Cholesky::new(linalg::symmetrized(&gram)).ok_or(Error::RankDeficientDesign { process })?;
        let (vals, _) = linalg::sym_eigen_desc(&gram);
        if vals[vals.len() - 1] <= 1e-12 * vals[0] {
            return Err(Error::RankDeficientDesign { process });
        }
        Ok(Design { process, rows, phi, gram_chol })
    }

    /// Fit of `z − center` on Φ. A single field is centered on its own
    /// mean; replications are centered on the pooled mean shared through μ.
    fn fit(&self, z_obs: &[f64], center: f64, g: f64) -> OlsFit {
        let mean = center;
        let centered = DVector::from_iterator(z_obs.len(), z_obs.iter().map(|z| z - mean));
        let nu_hat = self.gram_chol.solve(&(self.phi.transpose() * centered));
        let shrink = g / (g + 1.0);
        let fitted = &self.phi * &nu_hat * shrink;
        let residual_base: Vec<f64> = z_obs.iter().zip(fitted.iter()).map(|(z, f)| z - f).collect();
        let ssr = residual_base.iter().map(|r| (r - mean) * (r - mean)).sum();
        OlsFit { nu_hat, mean, ssr, residual_base }
    }
}

/// Least-squares coefficients and SSR of a single field `z` (NaN marks a
/// missing cell) on the OC basis, with shrinkage factor `g/(g+1)`.
pub fn ols_coefficients(z: &[f64], oc: &OcBasis, g: f64) -> Result<OlsFit> {
    ols_coefficients_centered(z, oc, None, g)
}

/// As [`ols_coefficients`], centered on `center` instead of the field's own
/// mean. With replications, pass the pooled mean to match the sampler.
pub fn ols_coefficients_centered(z: &[f64], oc: &OcBasis, center: Option<f64>, g: f64) -> Result<OlsFit> {
    if z.len() != oc.eval().nrows() {
        return Err(Error::invalid("data length does not match the basis"));
    }
    let observed: Vec<bool> = z.iter().map(|v| !v.is_nan()).collect();
    let design = Design::new(0, &observed, oc)?;
    let z_obs: Vec<f64> = design.rows.iter().map(|&i| z[i]).collect();
    Ok(design.fit(&z_obs, center.unwrap_or_else(|| stats::mean(&z_obs)), g))
}

/// Retained Gibbs draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    draws: usize,
    replications: usize,
    sizes: Vec<usize>,
    mu: Vec<Vec<f64>>,
    sigma2: Vec<Vec<f64>>,
    /// Per process, `M_j × (D·r)` with column `draw·r + rep`.
    nu: Vec<DMatrix<f64>>,
}

impl PosteriorDraws {
    /// Assemble draws from raw parts (e.g. when reading them back from disk).
    pub fn from_parts(
        replications: usize,
        mu: Vec<Vec<f64>>,
        sigma2: Vec<Vec<f64>>,
        nu: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n_proc = mu.len();
        let draws = mu.first().map(|m| m.len()).unwrap_or(0);
        if n_proc == 0
            || sigma2.len() != n_proc
            || nu.len() != n_proc
            || mu.iter().chain(&sigma2).any(|v| v.len() != draws)
            || nu.iter().any(|m| m.ncols() != draws * replications)
        {
            return Err(Error::invalid("inconsistent posterior draw shapes"));
        }
        if sigma2.iter().flatten().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("σ² draws must be positive"));
        }
        let sizes = nu.iter().map(|m| m.nrows()).collect();
        Ok(PosteriorDraws { draws, replications, sizes, mu, sigma2, nu })
    }

    pub fn draw_count(&self) -> usize {
        self.draws
    }

    pub fn replications(&self) -> usize {
        self.replications
    }

    pub fn n_proc(&self) -> usize {
        self.sizes.len()
    }

    /// Coefficient count `M_j` per process.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn mu(&self, process: usize) -> &[f64] {
        &self.mu[process]
    }

    pub fn sigma2(&self, process: usize) -> &[f64] {
        &self.sigma2[process]
    }

    /// Coefficients of one process for one draw and replication.
    pub fn nu(&self, process: usize, draw: usize, rep: usize) -> DVector<f64> {
        self.nu[process].column(draw * self.replications + rep).into_owned()
    }

    /// All coefficient draws of one process, `M_j × (D·r)`.
    pub fn nu_matrix(&self, process: usize) -> &DMatrix<f64> {
        &self.nu[process]
    }

    /// Stacked `(ν_1, …, ν_N)` as an `M × (D·r)` matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let total: usize = self.sizes.iter().sum();
        let cols = self.draws * self.replications;
        let mut out = DMatrix::zeros(total, cols);
        let mut off = 0;
        for m in &self.nu {
            out.view_mut((off, 0), (m.nrows(), cols)).copy_from(m);
            off += m.nrows();
        }
        out
    }

    /// Posterior mean and batch-means standard error of each coefficient of
    /// one process and replication.
    pub fn nu_mean_se(&self, process: usize, rep: usize) -> (Vec<f64>, Vec<f64>) {
        let m = &self.nu[process];
        (0..m.nrows())
            .map(|l| {
                let xs: Vec<f64> = (0..self.draws).map(|d| m[(l, d * self.replications + rep)]).collect();
                (stats::mean(&xs), stats::batch_means_se(&xs))
            })
            .unzip()
    }

    /// Posterior means and batch-means standard errors of μ and σ².
    pub fn summary(&self) -> PosteriorSummary {
        let per = |v: &Vec<Vec<f64>>| -> Vec<(f64, f64)> {
            v.iter().map(|x| (stats::mean(x), stats::batch_means_se(x))).collect()
        };
        let mu = per(&self.mu);
        let sigma2 = per(&self.sigma2);
        PosteriorSummary {
            draws: self.draws,
            replications: self.replications,
            mu_mean: mu.iter().map(|p| p.0).collect(),
            mu_se: mu.iter().map(|p| p.1).collect(),
            sigma2_mean: sigma2.iter().map(|p| p.0).collect(),
            sigma2_se: sigma2.iter().map(|p| p.1).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub draws: usize,
    pub replications: usize,
    pub mu_mean: Vec<f64>,
    pub mu_se: Vec<f64>,
    pub sigma2_mean: Vec<f64>,
    pub sigma2_se: Vec<f64>,
}

struct ProcessChain {
    mu: Vec<f64>,
    sigma2: Vec<f64>,
    nu: DMatrix<f64>,
}

fn run_chain(data: &ReplicatedData, j: usize, oc: &OcBasis, cfg: &ModelConfig) -> Result<ProcessChain> {
    let (n, r) = (data.n(), data.replications());
    let observed: Vec<bool> = (0..n).map(|c| !data.get(0, c, j).is_nan()).collect();
    for rep in 1..r {
        if (0..n).any(|c| data.get(rep, c, j).is_nan() == observed[c]) {
            return Err(Error::invalid(format!("process {j}: missing cells must be the same in every replication")));
        }
    }
    let design = Design::new(j, &observed, oc)?;
    let n_obs = design.rows.len();
    let g = cfg.g.unwrap_or(n_obs as f64);
    let shrink = g / (g + 1.0);
    let fields: Vec<Vec<f64>> = (0..r).map(|rep| design.rows.iter().map(|&c| data.get(rep, c, j)).collect()).collect();
    let count = n_obs * r;
    let data_mean = fields.iter().flatten().sum::<f64>() / count as f64;
    let fits: Vec<OlsFit> = fields.iter().map(|z| design.fit(z, data_mean, g)).collect();
    let base_mean = fits.iter().map(|f| f.residual_base.iter().sum::<f64>()).sum::<f64>() / count as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(j as u64);
    let kept = cfg.draw_count();
    let mut out = ProcessChain {
        mu: Vec::with_capacity(kept),
        sigma2: Vec::with_capacity(kept),
        nu: DMatrix::zeros(oc.count(), kept * r),
    };
    let mut mu = data_mean + cfg.start_offset;
    for iter in 0..cfg.n_iter {
        let sigma2 = match cfg.fixed_sigma2 {
            Some(s) => s,
            None => {
                let ssr: f64 = fits.iter().map(|f| f.ssr_at(mu)).sum();
                conditionals::sample_sigma2(&mut rng, ssr, count, cfg.a_sigma, cfg.b_sigma, design.process)?
            }
        };
        mu = conditionals::sample_mu(&mut rng, base_mean, sigma2, count);
        let retain = iter >= cfg.n_burn && (iter - cfg.n_burn + 1).is_multiple_of(cfg.thin) && out.mu.len() < kept;
        let slot = out.mu.len();
        for (rep, fit) in fits.iter().enumerate() {
            let nu = conditionals::sample_nu(&mut rng, &fit.nu_hat, shrink, sigma2, &design.gram_chol);
            if retain {
                out.nu.column_mut(slot * r + rep).copy_from(&nu);
            }
        }
        if retain {
            out.mu.push(mu);
            out.sigma2.push(sigma2);
        }
    }
    Ok(out)
}

/// Runs one Gibbs chain per process (processes are independent under the
/// prior). Process `j` uses ChaCha8 stream `j` of `cfg.seed`, so results do
/// not depend on the thread count.
pub fn gibbs_fit(data: &ReplicatedData, oc: &[OcBasis], cfg: &ModelConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    if oc.len() != data.n_proc() {
        return Err(Error::invalid(format!("{} OC bases for {} processes", oc.len(), data.n_proc())));
    }
    if oc.iter().any(|b| b.eval().nrows() != data.n()) {
        return Err(Error::invalid("OC basis does not match the data grid"));
    }
    let chains: Vec<ProcessChain> =
        (0..data.n_proc()).into_par_iter().map(|j| run_chain(data, j, &oc[j], cfg)).collect::<Result<_>>()?;
    let mut mu = Vec::new();
    let mut sigma2 = Vec::new();
    let mut nu = Vec::new();
    for c in chains {
        mu.push(c.mu);
        sigma2.push(c.sigma2);
        nu.push(c.nu);
    }
    PosteriorDraws::from_parts(data.replications(), mu, sigma2, nu)
}

/// Covariance of the stacked coefficients over all retained draws and
/// replications, divisor equal to their number.
pub fn posterior_coeff_cov(draws: &PosteriorDraws) -> Result<DMatrix<f64>> {
    if draws.draws < 2 {
        return Err(Error::InsufficientDraws { needed: 2, got: draws.draws });
    }
    Ok(column_covariance(&draws.stacked()))
}

/// Covariance of the stacked coefficients across replications within one
/// draw, divisor r.
pub fn per_draw_coeff_cov(draws: &PosteriorDraws, draw: usize) -> Result<DMatrix<f64>> {
    if draws.replications < 2 {
        return Err(Error::InsufficientReplications { needed: 2, got: draws.replications });
    }
    if draw >= draws.draws {
        return Err(Error::invalid(format!("draw {draw} out of range")));
    }
    let r = draws.replications;
    let x = draws.stacked().columns(draw * r, r).into_owned();
    Ok(column_covariance(&x))
}

fn column_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let count = x.ncols() as f64;
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let mut c = &centered * centered.transpose() / count;
    linalg::symmetrize_in_place(&mut c);
    c
}
