use mvcage::basis::{fourier_basis, oc_orthogonalize, OcBasis, OcOptions};
use mvcage::bayes::{gibbs_fit, per_draw_coeff_cov, ModelConfig};
use mvcage::cage::{anova_decomposition, dmvcage, posterior_mvcage, univariate_cage, LossKind};
use mvcage::covariance::{build_joint_cov, simulate_gp, BivariateMaternParams, CovSource, JointCovariance};
use mvcage::geometry::{build_grid, BBox, Partition, SpatialGrid};
use mvcage::kle::{
    multivariate_eigensystem, posterior_eof_eigensystem, score_cov, univariate_kle_galerkin, MultivariateEigenSystem,
    Provenance, Truncation, UnivariateEigenSystem,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn line(n: usize) -> SpatialGrid {
    build_grid(&BBox::unit_interval(), &[n]).unwrap()
}

fn oc(grid: &SpatialGrid, k: usize) -> OcBasis {
    oc_orthogonalize(&fourier_basis(grid, k).unwrap(), grid, OcOptions::default()).unwrap()
}

fn systems(c: &JointCovariance, basis: &OcBasis, grid: &SpatialGrid) -> Vec<UnivariateEigenSystem> {
    (0..c.n_proc())
        .map(|j| univariate_kle_galerkin(&c.block(j, j), basis, grid, Truncation::default(), j).unwrap())
        .collect()
}

fn joint(c: &JointCovariance, basis: &OcBasis, grid: &SpatialGrid) -> MultivariateEigenSystem {
    let s = systems(c, basis, grid);
    multivariate_eigensystem(&score_cov(c, &s, grid).unwrap(), &s, Truncation::default()).unwrap()
}

fn in_span(grid: &SpatialGrid, basis: &OcBasis, n_proc: usize, seed: u64) -> JointCovariance {
    let (n, m) = (grid.len(), basis.count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(n_proc * m, n_proc * m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma = &b * b.transpose() / (n_proc * m) as f64;
    let mut phi = DMatrix::zeros(n * n_proc, m * n_proc);
    for j in 0..n_proc {
        phi.view_mut((j * n, j * m), (n, m)).copy_from(basis.eval());
    }
    JointCovariance::new(&phi * &sigma * phi.transpose(), n, n_proc, CovSource::Parametric).unwrap()
}

#[test]
fn scaling_the_covariance_scales_the_error() {
    let grid = line(60);
    let basis = oc(&grid, 6);
    let c = build_joint_cov(&grid, &BivariateMaternParams::simulation_defaults()).unwrap();
    let part = Partition::index_blocks(&grid, 6).unwrap();
    let base = dmvcage(&joint(&c, &basis, &grid), &part, &grid, &LossKind::Squared).unwrap();
    for s in [0.01, 3.0, 250.0] {
        let scaled = dmvcage(&joint(&c.scaled(s), &basis, &grid), &part, &grid, &LossKind::Squared).unwrap();
        for (a, b) in scaled.per_unit.iter().zip(&base.per_unit) {
            assert!((a - s * b).abs() <= 1e-10 * (s * b).abs().max(1e-300), "scale {s}: {a} vs {}", s * b);
        }
    }
}

#[test]
fn refinement_extremes() {
    let grid = line(50);
    let basis = oc(&grid, 5);
    let sys = joint(&build_joint_cov(&grid, &BivariateMaternParams::simulation_defaults()).unwrap(), &basis, &grid);
    let single = dmvcage(&sys, &Partition::singletons(&grid), &grid, &LossKind::Squared).unwrap();
    assert!(single.total.abs() < 1e-14);
    let whole = dmvcage(&sys, &Partition::whole(&grid), &grid, &LossKind::Squared).unwrap();
    assert!(whole.total > 0.0);
}

#[test]
fn null_maup_both_directions() {
    let grid = line(32);
    let part = Partition::index_blocks(&grid, 4).unwrap();
    let block = |c: usize| (c / 8) as f64 - 1.5;
    let wiggle = |c: usize| (c as f64 * 0.7).sin();
    let build = |vals: Vec<f64>, cols: Vec<Box<dyn Fn(usize) -> f64>>| {
        let psi = DMatrix::from_fn(32, cols.len(), |c, k| cols[k](c));
        MultivariateEigenSystem::from_parts(vals, vec![psi], Provenance::PlugIn).unwrap()
    };
    // Piecewise constant where λ > 0: zero, even with a rough null-eigenvalue term.
    let flat = build(vec![2.0, 0.0], vec![Box::new(block), Box::new(wiggle)]);
    let r = dmvcage(&flat, &part, &grid, &LossKind::Squared).unwrap();
    assert!(r.per_unit.iter().all(|v| v.abs() < 1e-14));
    // Any within-unit variation of a positive-eigenvalue term: every unit positive.
    let rough = build(vec![2.0, 1e-6], vec![Box::new(block), Box::new(wiggle)]);
    let r = dmvcage(&rough, &part, &grid, &LossKind::Squared).unwrap();
    assert!(r.per_unit.iter().all(|&v| v > 0.0));
}

#[test]
fn univariate_cage_is_single_process_dmvcage() {
    let grid = line(40);
    let basis = oc(&grid, 4);
    let c = in_span(&grid, &basis, 1, 2);
    let s = &systems(&c, &basis, &grid)[0];
    let part = Partition::index_blocks(&grid, 5).unwrap();
    let a = univariate_cage(s, &part, &grid, &LossKind::Absolute).unwrap();
    let b = dmvcage(&MultivariateEigenSystem::from_univariate(s), &part, &grid, &LossKind::Absolute).unwrap();
    assert_eq!(a.per_unit, b.per_unit);
}

#[test]
fn independent_processes_add() {
    let grid = line(80);
    let basis = oc(&grid, 8);
    let c = build_joint_cov(&grid, &BivariateMaternParams::simulation_with_rho(0.0)).unwrap();
    let part = Partition::index_blocks(&grid, 8).unwrap();
    let s = systems(&c, &basis, &grid);
    let sum: f64 = s.iter().map(|x| univariate_cage(x, &part, &grid, &LossKind::Squared).unwrap().total).sum();
    let mv = dmvcage(&joint(&c, &basis, &grid), &part, &grid, &LossKind::Squared).unwrap().total;
    assert!((sum - mv).abs() < 1e-8, "{sum} vs {mv}");
}

#[test]
fn areal_term_is_double_average_of_covariance() {
    let grid = line(45);
    let basis = oc(&grid, 5);
    let c = in_span(&grid, &basis, 2, 9);
    let sys = joint(&c, &basis, &grid);
    let whole = Partition::whole(&grid);
    let t = anova_decomposition(&sys, &whole, &grid, &LossKind::Squared).unwrap()[0];
    let a = grid.areas();
    let total: f64 = a.iter().sum();
    let mut want = 0.0;
    for j in 0..2 {
        let b = c.block(j, j);
        for x in 0..45 {
            for y in 0..45 {
                want += a[x] * a[y] * b[(x, y)];
            }
        }
    }
    want /= total * total;
    assert!((t.areal_term - want).abs() < 1e-10 * want.abs().max(1.0), "{} vs {want}", t.areal_term);
    let singles = anova_decomposition(&sys, &Partition::singletons(&grid), &grid, &LossKind::Squared).unwrap();
    assert!(singles.iter().all(|t| (t.point_term - t.areal_term).abs() < 1e-12 * t.point_term.max(1.0)));
}

#[test]
fn posterior_average_has_small_monte_carlo_error() {
    let grid = line(100);
    let basis = oc(&grid, 5);
    let cov = build_joint_cov(&grid, &BivariateMaternParams::simulation_defaults()).unwrap();
    let data = simulate_gp(&cov, 30, 12).unwrap().with_noise(&[0.05, 0.05], 12).unwrap();
    let cfg = ModelConfig { n_iter: 240, n_burn: 40, thin: 4, seed: 12, ..ModelConfig::default() };
    let draws = gibbs_fit(&data, &[basis.clone(), basis.clone()], &cfg).unwrap();
    assert_eq!(draws.draw_count(), 50);
    let idx: Vec<usize> = (0..draws.draw_count()).collect();
    let part = Partition::index_blocks(&grid, 10).unwrap();
    let oc_pair = [basis.clone(), basis.clone()];
    let report = posterior_mvcage(
        &idx,
        |&d| posterior_eof_eigensystem(&per_draw_coeff_cov(&draws, d)?, &oc_pair, Truncation::default()),
        &part,
        &grid,
        &LossKind::Squared,
    )
    .unwrap();
    let se = report.mc_std_error.clone().unwrap();
    let mut sorted = report.per_unit.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    for (u, (&v, &s)) in report.per_unit.iter().zip(&se).enumerate() {
        if v >= median {
            assert!(s < 0.1 * v, "unit {u}: s.e. {s} vs value {v}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative_and_totals_add(seed in 0u64..10_000, units in 1usize..8) {
        let grid = line(24);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = DMatrix::from_fn(24, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sys = MultivariateEigenSystem::from_parts(vec![3.0, 1.0, 0.5], vec![psi], Provenance::PlugIn).unwrap();
        let part = Partition::index_blocks(&grid, units).unwrap();
        for loss in [LossKind::Squared, LossKind::Absolute] {
            let r = dmvcage(&sys, &part, &grid, &loss).unwrap();
            prop_assert!(r.per_unit.iter().all(|&v| v >= 0.0));
            prop_assert!((r.per_unit.iter().sum::<f64>() - r.total).abs() <= 1e-12 * r.total.max(1.0));
            let by_proc: f64 = r.per_process.iter().sum();
            prop_assert!((by_proc - r.total).abs() <= 1e-12 * r.total.max(1.0));
        }
    }
}
