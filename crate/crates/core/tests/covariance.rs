use mvcage::covariance::{
    build_joint_cov, build_univariate_cov, empirical_cross_cov, matern_kernel, simulate_gp, BivariateMaternParams,
    MaternParams,
};
use mvcage::geometry::{build_grid, BBox, SpatialGrid};
use mvcage::linalg::min_eigenvalue;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matern_kernel_is_psd_on_random_point_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let n = rng.gen_range(2..=50);
        let nu = rng.gen_range(0.2..3.0);
        let a = rng.gen_range(0.5..30.0);
        let sigma2 = rng.gen_range(0.1..4.0);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
        let k = DMatrix::from_fn(n, n, |i, j| {
            let d = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
            sigma2 * matern_kernel(d, nu, a).unwrap()
        });
        assert!(min_eigenvalue(&k) >= -1e-8 * sigma2, "ν={nu} a={a} n={n}: {}", min_eigenvalue(&k));
    }
}

#[test]
fn univariate_build_matches_kernel() {
    let g = build_grid(&BBox::unit_interval(), &[6]).unwrap();
    let p = MaternParams::new(1.5, 4.0, 2.0).unwrap();
    let c = build_univariate_cov(&g, &p).unwrap();
    let d = (g.center(1)[0] - g.center(4)[0]).abs();
    assert!((c.matrix()[(1, 4)] - 2.0 * (1.0 + 4.0 * d) * (-4.0 * d).exp()).abs() < 1e-12);
}

#[test]
fn joint_blocks_are_transposes() {
    let g = build_grid(&BBox::unit_square(), &[4, 3]).unwrap();
    let c = build_joint_cov(&g, &BivariateMaternParams::simulation_defaults()).unwrap();
    assert_eq!(c.block(0, 1), c.block(1, 0).transpose());
    assert!(c.min_eigenvalue() >= -1e-8 * 1.0);
}

fn max_error(truth: &DMatrix<f64>, grid: &SpatialGrid, p: &BivariateMaternParams, r: usize, seed: u64) -> f64 {
    let cov = build_joint_cov(grid, p).unwrap();
    let emp = empirical_cross_cov(&simulate_gp(&cov, r, seed).unwrap(), true).unwrap();
    (emp.matrix() - truth).abs().max()
}

#[test]
fn empirical_error_shrinks_with_replications() {
    let grid = build_grid(&BBox::unit_interval(), &[10]).unwrap();
    let p = BivariateMaternParams::simulation_defaults();
    let truth = build_joint_cov(&grid, &p).unwrap().matrix().clone();
    let medians: Vec<f64> = [100, 1000, 10000]
        .iter()
        .map(|&r| {
            let mut errs: Vec<f64> = (0..20).map(|s| max_error(&truth, &grid, &p, r, s)).collect();
            errs.sort_by(f64::total_cmp);
            0.5 * (errs[9] + errs[10])
        })
        .collect();
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
}

#[test]
fn empirical_output_is_exactly_symmetric() {
    let grid = build_grid(&BBox::unit_interval(), &[12]).unwrap();
    let cov = build_joint_cov(&grid, &BivariateMaternParams::simulation_defaults()).unwrap();
    let emp = empirical_cross_cov(&simulate_gp(&cov, 7, 3).unwrap(), true).unwrap();
    let m = emp.matrix();
    assert_eq!(m, &m.transpose());
}
