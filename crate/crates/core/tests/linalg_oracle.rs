//! Dense kernels checked against nalgebra.

use fastcar::tensor::{matmul, spectral_norm, spectral_norm_upper, Mat};
use fastcar::Matrix;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn pair(rows: usize, cols: usize) -> impl Strategy<Value = (Matrix, DMatrix<f64>)> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| {
        (
            Mat::from_vec(rows, cols, v.clone()).unwrap(),
            DMatrix::from_row_slice(rows, cols, &v),
        )
    })
}

fn largest_singular(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

proptest! {
    #[test]
    fn matmul_matches((a, na) in pair(6, 9), (b, nb) in pair(9, 4)) {
        let c = matmul(&a, &b).unwrap();
        let nc = na * nb;
        for r in 0..6 {
            for k in 0..4 {
                prop_assert!((c.get(r, k) - nc[(r, k)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn spectral_norm_brackets_svd((m, nm) in pair(12, 20)) {
        let s = largest_singular(&nm);
        prop_assert!(spectral_norm(&m, 400) <= s * (1.0 + 1e-9));
        let up = spectral_norm_upper(&m, 6);
        prop_assert!(up >= s * (1.0 - 1e-12));
        prop_assert!(up <= s * 12f64.powf(1.0 / 128.0) * (1.0 + 1e-9));
    }
}

#[test]
fn power_iteration_converges_on_gapped_spectrum() {
    let v: Vec<f64> = (0..64)
        .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
        .collect();
    let m = Mat::from_vec(8, 8, v.clone()).unwrap();
    let s = largest_singular(&DMatrix::from_row_slice(8, 8, &v));
    assert!((spectral_norm(&m, 2000) - s).abs() <= 1e-8 * s);
}
