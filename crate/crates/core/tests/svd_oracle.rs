//! The hand-rolled SVD and the structure update, checked against nalgebra.

use nalgebra::DMatrix;

use concm::geometry::{check_geometric_optimality, theorem1_update, ColumnSource, InitialStructure};
use concm::rng::gaussian;
use concm::tensor::svd_compact;
use concm::Matrix;

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

#[test]
fn singular_values_match_nalgebra() {
    for (i, (d, n)) in [(3, 2), (8, 5), (20, 7), (64, 12), (5, 5)].into_iter().enumerate() {
        let mut g = gaussian(40, &[i as u64]);
        let m = Matrix::new(d, n, g.vector(d * n)).unwrap();
        let ours = svd_compact(&m).unwrap();
        let mut theirs: Vec<f64> = to_nalgebra(&m).singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ours.sigma.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-10 * theirs[0], "{d}x{n}: {a} vs {b}");
        }
        assert!(ours.reconstruct().sub(&m).unwrap().max_abs() < 1e-10);
    }
}

/// The orthogonal factor of the centered initial structure is its polar
/// factor, which nalgebra gives as `C (C^T C)^{-1/2}` restricted to the
/// non-null directions. Compare through the projector onto the range.
#[test]
fn structure_update_matches_polar_factor() {
    let (d, n) = (10, 6);
    let mut g = gaussian(41, &[]);
    let m = Matrix::new(d, n, g.vector(d * n)).unwrap();
    let init = InitialStructure::from_columns(m.clone(), (0..n).collect(), vec![ColumnSource::Novel; n]).unwrap();
    let update = theorem1_update(&init).unwrap();
    assert!(check_geometric_optimality(update.structure.columns()) < 1e-10);

    let c = to_nalgebra(&m.matmul(&Matrix::centering(n)).unwrap());
    let svd = c.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    // Drop the null direction introduced by centering.
    let keep: Vec<usize> = (0..n).filter(|i| svd.singular_values[*i] > 1e-9).collect();
    assert_eq!(keep.len(), n - 1);
    let polar = u.select_columns(&keep) * vt.select_rows(&keep);

    // Delta = sqrt(N/(N-1)) U M and U M = polar on the centered subspace.
    let scale = (n as f64 / (n as f64 - 1.0)).sqrt();
    let expected = polar * to_nalgebra(&Matrix::centering(n)) * scale;
    let got = to_nalgebra(update.structure.columns());
    assert!((got - expected).abs().max() < 1e-9);
}
