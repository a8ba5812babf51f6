use std::collections::BTreeSet;

use mvcage::cage::LossKind;
use mvcage::geometry::{build_grid, BBox, Partition, SpatialGrid};
use mvcage::kle::{MultivariateEigenSystem, Provenance};
use mvcage::regionalize::{
    argmin_over_candidates, cut_dendrogram, feature_matrix, random_contiguous_partition, regionalize,
    regionalize_bounded, ward_hgc, PartitionScorer, PlugInScorer, RegionalizeConfig, StopReason,
};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn line(n: usize) -> SpatialGrid {
    build_grid(&BBox::unit_interval(), &[n]).unwrap()
}

fn random_system(n: usize, seed: u64) -> MultivariateEigenSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psi: Vec<DMatrix<f64>> =
        (0..2).map(|_| DMatrix::from_fn(n, 4, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
    MultivariateEigenSystem::from_parts(vec![4.0, 2.0, 1.0, 0.5], psi, Provenance::PlugIn).unwrap()
}

#[test]
fn dendrogram_is_invariant_to_cell_order() {
    let n = 30;
    let grid = line(n);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let feats = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>());
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let permuted = DMatrix::from_fn(n, 2, |i, d| feats[(perm[i], d)]);
    let (a, b) = (ward_hgc(&feats).unwrap(), ward_hgc(&permuted).unwrap());
    for j in 1..=n {
        let pa = cut_dendrogram(&a, j, &grid, false).unwrap().partition.as_set_of_sets();
        let pb: BTreeSet<Vec<usize>> = cut_dendrogram(&b, j, &grid, false)
            .unwrap()
            .partition
            .as_set_of_sets()
            .into_iter()
            .map(|unit| {
                let mut cells: Vec<usize> = unit.iter().map(|&c| perm[c]).collect();
                cells.sort_unstable();
                cells
            })
            .collect();
        assert_eq!(pa, pb, "level {j}");
    }
}

#[test]
fn trace_reaches_zero_at_one_unit_per_cell() {
    let n = 16;
    let grid = line(n);
    let sys = random_system(n, 2);
    let scorer = PlugInScorer { sys: &sys, grid: &grid, loss: LossKind::Squared };
    let feats = feature_matrix(sys.eigenfunctions(0), &grid, 0.5).unwrap();
    let cfg = RegionalizeConfig { j_min: Some(n - 2), j_max: Some(n), ..RegionalizeConfig::default() };
    let r = regionalize_bounded(&scorer, &ward_hgc(&feats).unwrap(), &grid, &cfg).unwrap();
    let last = r.trace.last().unwrap();
    assert_eq!((last.j, last.total), (n, 0.0));
    assert_eq!(r.selected_j, n);
}

#[test]
fn results_are_contiguous_on_a_lattice() {
    let grid = build_grid(&BBox::unit_square(), &[12, 12]).unwrap();
    for seed in 0..5 {
        let sys = random_system(grid.len(), seed);
        let feats = feature_matrix(sys.eigenfunctions(0), &grid, 0.9).unwrap();
        let scorer = PlugInScorer { sys: &sys, grid: &grid, loss: LossKind::Squared };
        let r = regionalize(&scorer, &ward_hgc(&feats).unwrap(), &grid, &RegionalizeConfig::default()).unwrap();
        assert!(r.partition.is_contiguous(), "seed {seed}");
    }
}

#[test]
fn piecewise_constant_truth_stops_at_its_blocks() {
    let n = 40;
    let grid = line(n);
    let levels = [0.0, 1.0, 10.0, 11.0];
    let psi = DMatrix::from_fn(n, 1, |c, _| levels[c / 10]);
    let sys = MultivariateEigenSystem::from_parts(vec![1.0], vec![psi.clone()], Provenance::PlugIn).unwrap();
    let feats = feature_matrix(&psi, &grid, 1.0).unwrap();
    let scorer = PlugInScorer { sys: &sys, grid: &grid, loss: LossKind::Squared };
    let cfg = RegionalizeConfig { gamma: 1.0, ..RegionalizeConfig::default() };
    let r = regionalize(&scorer, &ward_hgc(&feats).unwrap(), &grid, &cfg).unwrap();
    assert_eq!((r.selected_j, r.stop), (4, StopReason::Perfect));
    assert_eq!(r.partition, Partition::index_blocks(&grid, 4).unwrap());
    assert!(r.trace.windows(2).all(|w| w[1].total < w[0].total));
}

#[test]
fn argmin_matches_a_scan() {
    let grid = build_grid(&BBox::unit_square(), &[8, 8]).unwrap();
    let sys = random_system(grid.len(), 5);
    let scorer = PlugInScorer { sys: &sys, grid: &grid, loss: LossKind::Squared };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cands: Vec<Partition> = (0..5).map(|i| random_contiguous_partition(&grid, 3 + i, &mut rng).unwrap()).collect();
    let (best, totals) = argmin_over_candidates(&cands, &scorer).unwrap();
    let mut want = 0;
    for (i, p) in cands.iter().enumerate() {
        let t = scorer.score(p).unwrap();
        assert_eq!(t, totals[i]);
        if t < totals[want] {
            want = i;
        }
    }
    assert_eq!(best, want);
}

#[test]
fn equal_weights_balance_reversed_coordinates() {
    let grid = line(25);
    let est = DMatrix::from_fn(25, 1, |c, _| -grid.center(c)[0]);
    let f = feature_matrix(&est, &grid, 0.5).unwrap();
    let max_abs = |k: usize| f.column(k).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((max_abs(0) - max_abs(1)).abs() < 1e-12);
    for c in 0..25 {
        assert!((f[(c, 0)] + f[(c, 1)]).abs() < 1e-12);
    }
}
