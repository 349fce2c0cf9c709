//! Classical MDS checked against an independent eigen-decomposition and
//! against brute-force distance computations.

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use vipera_core::projection::{classical_mds, pairwise_distances, stress, Matrix};

fn planar_distances(points: &[[f64; 2]]) -> Matrix {
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|a| points.iter().map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).collect())
        .collect();
    Matrix::from_rows(&rows)
}

fn recovered(coords: &[[f64; 2]]) -> Matrix {
    planar_distances(coords)
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            worst = worst.max((a.get(i, j) - b.get(i, j)).abs());
        }
    }
    worst
}

/// Reference embedding from nalgebra's symmetric eigensolver.
fn reference_eigenvalues(d: &Matrix) -> Vec<f64> {
    let n = d.rows();
    let sq = DMatrix::from_fn(n, n, |i, j| d.get(i, j).powi(2));
    let j = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let b = -0.5 * &j * sq * &j;
    let mut values: Vec<f64> = SymmetricEigen::new(b).eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    values
}

#[test]
fn brute_force_distances() {
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|i| (0..8).map(|j| ((i * 31 + j * 17) % 11) as f64 / 3.0 - 1.2).collect())
        .collect();
    let d = pairwise_distances(&Matrix::from_rows(&rows));
    for i in 0..5 {
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..8 {
                s += (rows[i][k] - rows[j][k]) * (rows[i][k] - rows[j][k]);
            }
            assert!((d.get(i, j) - s.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn right_triangle_is_recovered() {
    let d = planar_distances(&[[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]]);
    assert_eq!(d.get(1, 2), 5.0);
    let e = classical_mds(&d, 17).unwrap();
    assert!(max_abs_diff(&recovered(&e.coords), &d) < 1e-6);
    assert!(e.stress < 1e-6);
}

#[test]
fn spread_matches_reference_eigenvalues() {
    // non-embeddable input: compare the variance captured on each axis
    let rows: Vec<Vec<f64>> = (0..9)
        .map(|i| (0..6).map(|j| (((i + 2) * (j + 5) * 7) % 13) as f64).collect())
        .collect();
    let d = pairwise_distances(&Matrix::from_rows(&rows));
    let reference = reference_eigenvalues(&d);
    let e = classical_mds(&d, 5).unwrap();
    for axis in 0..2 {
        let captured: f64 = e.coords.iter().map(|c| c[axis] * c[axis]).sum();
        assert!(
            (captured - reference[axis]).abs() < 1e-6 * reference[0].max(1.0),
            "axis {axis}: {captured} vs {}",
            reference[axis]
        );
    }
    assert!(e.stress.is_finite() && e.stress > 0.0);
    assert!((stress(&d, &e.coords) - e.stress).abs() < 1e-15);
}

proptest! {
    #[test]
    fn planted_planar_configurations(points in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..40), seed in any::<u64>()) {
        let points: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
        let d = planar_distances(&points);
        let e = classical_mds(&d, seed).unwrap();
        prop_assert!(max_abs_diff(&recovered(&e.coords), &d) < 1e-6);
        prop_assert!(e.stress < 1e-9);
    }

    #[test]
    fn repeated_runs_are_bit_identical(points in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 2..20), seed in any::<u64>()) {
        let rows: Vec<Vec<f64>> = points.into_iter().map(|(x, y, z)| vec![x, y, z]).collect();
        let d = pairwise_distances(&Matrix::from_rows(&rows));
        let a = classical_mds(&d, seed).unwrap();
        let b = classical_mds(&d, seed).unwrap();
        let bits = |e: &vipera_core::projection::Embedding| e.coords.iter().flat_map(|c| [c[0].to_bits(), c[1].to_bits()]).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        prop_assert!(a.coords[0][0] >= 0.0 && a.coords[0][1] >= 0.0);
    }
}
