//! Monte Carlo comparison of the joint MVCAGE estimator against the sum of
//! per-process CAGE estimators.
//!
//! Each simulated dataset holds `replicates` noisy realizations of the true
//! bivariate field. The Gibbs model is fit once. For every retained draw
//! the coefficient covariance across replications gives a joint EOF
//! eigensystem (MVCAGE) and one eigensystem per diagonal block (per-process
//! CAGE), both truncated by the same rule. Because the prior factorizes
//! over processes, the process-`j` block of the draws is exactly what a
//! chain on `z_j` alone produces. The truth is the full plug-in eigensystem
//! of the true covariance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dmvcage, posterior_mvcage, LossKind};
use crate::basis::{fourier_basis, oc_orthogonalize, OcBasis, OcOptions};
use crate::bayes::{gibbs_fit, per_draw_coeff_cov, ModelConfig};
use crate::covariance::{build_joint_cov, simulate_gp, BivariateMaternParams};
use crate::error::{Error, Result};
use crate::geometry::{build_grid, BBox, Partition};
use crate::kle::{dense_eigensystem, posterior_eof_eigensystem, Truncation};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MseConfig {
    /// Cells on `[0, 1]`.
    pub n: usize,
    /// Fourier frequency count per process.
    pub fourier_k: usize,
    /// Simulated datasets (R).
    pub datasets: usize,
    /// Replications within each dataset.
    pub replicates: usize,
    pub noise_var: f64,
    /// Equal index blocks forming the partition.
    pub units: usize,
    /// Truncation shared by both estimators.
    pub truncation: Truncation,
    pub gibbs: ModelConfig,
    pub seed: u64,
}

impl Default for MseConfig {
    fn default() -> Self {
        MseConfig {
            n: 100,
            fourier_k: 20,
            datasets: 200,
            replicates: 30,
            noise_var: 0.01,
            units: 10,
            truncation: Truncation::default(),
            gibbs: ModelConfig { n_iter: 60, n_burn: 20, thin: 4, ..ModelConfig::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseOutcome {
    pub mse_mvcage: f64,
    pub mse_sum_cage: f64,
    /// Mean over datasets of (joint − summed) squared error.
    pub mean_difference: f64,
    /// Standard error of `mean_difference`.
    pub difference_se: f64,
    /// Per-unit truth `Σ_j 𝕍_j`.
    pub truth: Vec<f64>,
    /// `mse_mvcage ≤ mse_sum_cage`, up to a relative rounding allowance of
    /// 1e-12 (the two coincide when nothing is truncated).
    pub dominates: bool,
}

fn dataset_seed(seed: u64, d: usize) -> u64 {
    seed ^ (d as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the comparison. Needs at least 30 datasets.
pub fn mse_dominance_experiment(truth: &BivariateMaternParams, cfg: &MseConfig) -> Result<MseOutcome> {
    if cfg.datasets < 30 {
        return Err(Error::invalid(format!("need at least 30 datasets, got {}", cfg.datasets)));
    }
    if cfg.replicates < 2 {
        return Err(Error::InsufficientReplications { needed: 2, got: cfg.replicates });
    }
    cfg.gibbs.validate()?;
    let grid = build_grid(&BBox::unit_interval(), &[cfg.n])?;
    let part = Partition::index_blocks(&grid, cfg.units)?;
    let cov = build_joint_cov(&grid, truth)?;
    let loss = LossKind::Squared;
    let exact = dense_eigensystem(&cov, &grid, Truncation::Count(cfg.n * 2))?;
    let truth_units = dmvcage(&exact, &part, &grid, &loss)?.per_unit;
    let oc = oc_orthogonalize(&fourier_basis(&grid, cfg.fourier_k)?, &grid, OcOptions::default())?;
    let m = oc.count();
    let rule = cfg.truncation;
    let pair: [OcBasis; 2] = [oc.clone(), oc.clone()];

    let errors: Vec<(f64, f64)> = (0..cfg.datasets)
        .into_par_iter()
        .map(|d| -> Result<(f64, f64)> {
            let seed = dataset_seed(cfg.seed, d);
            let data = simulate_gp(&cov, cfg.replicates, seed)?.with_noise(&[cfg.noise_var; 2], seed)?;
            let gibbs = ModelConfig { seed, ..cfg.gibbs.clone() };
            let draws = gibbs_fit(&data, &pair, &gibbs)?;
            let idx: Vec<usize> = (0..draws.draw_count()).collect();
            let joint = posterior_mvcage(
                &idx,
                |&k| posterior_eof_eigensystem(&per_draw_coeff_cov(&draws, k)?, &pair, rule),
                &part,
                &grid,
                &loss,
            )?;
            let mut summed = vec![0.0; truth_units.len()];
            for j in 0..2 {
                let single = posterior_mvcage(
                    &idx,
                    |&k| {
                        let s = per_draw_coeff_cov(&draws, k)?;
                        let block = s.view((j * m, j * m), (m, m)).into_owned();
                        posterior_eof_eigensystem(&block, std::slice::from_ref(&oc), rule)
                    },
                    &part,
                    &grid,
                    &loss,
                )?;
                for (acc, v) in summed.iter_mut().zip(&single.per_unit) {
                    *acc += v;
                }
            }
            let se = |est: &[f64]| est.iter().zip(&truth_units).map(|(e, t)| (e - t) * (e - t)).sum::<f64>();
            Ok((se(&joint.per_unit), se(&summed)))
        })
        .collect::<Result<_>>()?;

    let joint: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let summed: Vec<f64> = errors.iter().map(|e| e.1).collect();
    let diff: Vec<f64> = errors.iter().map(|e| e.0 - e.1).collect();
    let mse_mvcage = stats::mean(&joint);
    let mse_sum_cage = stats::mean(&summed);
    Ok(MseOutcome {
        mse_mvcage,
        mse_sum_cage,
        mean_difference: stats::mean(&diff),
        difference_se: (stats::variance(&diff) / diff.len() as f64).sqrt(),
        truth: truth_units,
        dominates: mse_mvcage <= mse_sum_cage + 1e-12 * mse_sum_cage.abs().max(mse_mvcage.abs()),
    })
}
