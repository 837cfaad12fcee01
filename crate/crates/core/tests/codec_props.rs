use axdelta::codec::{
    packed_row_bytes, patched_forward, patched_forward_f32, reconstruct, reconstruct_f32, sign_mask, Axis,
    AxisScaleVector, PackedSignMask,
};
use axdelta::tensor::{Matrix, SeededRng};
use axdelta::Error;
use proptest::prelude::*;

fn signs(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.sign())
}

/// LSB-first packing written out bit by bit.
fn reference_pack(m: &Matrix) -> Vec<u8> {
    let stride = m.cols().div_ceil(8);
    let mut out = vec![0u8; m.rows() * stride];
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if m.get(i, j) >= 0.0 {
                out[i * stride + j / 8] |= 1 << (j % 8);
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn pack_then_unpack_is_identity(rows in 1usize..24, cols in 1usize..70, seed in any::<u64>()) {
        let b = signs(rows, cols, seed);
        let mask = PackedSignMask::from_signs(&b);
        prop_assert_eq!(mask.as_bytes(), &reference_pack(&b)[..]);
        prop_assert_eq!(mask.as_bytes().len(), rows * packed_row_bytes(cols));
        prop_assert_eq!(mask.unpack(), b);
        let again = PackedSignMask::from_bytes(rows, cols, mask.as_bytes().to_vec()).unwrap();
        prop_assert_eq!(again, mask);
    }

    #[test]
    fn reconstruct_is_linear_in_scale(rows in 1usize..12, cols in 1usize..20, seed in any::<u64>(), col in any::<bool>()) {
        let mut rng = SeededRng::new(seed);
        let base = rng.normal_matrix(rows, cols, 1.0);
        let mask = sign_mask(&signs(rows, cols, seed ^ 1));
        let axis = if col { Axis::Col } else { Axis::Row };
        let n = axis.len_for(rows, cols);
        let a: Vec<f32> = (0..n).map(|_| rng.uniform() as f32).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.uniform() as f32).collect();
        let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let zero = Matrix::zeros(rows, cols);
        let da = reconstruct_f32(&zero, &mask, axis, &a).unwrap();
        let db = reconstruct_f32(&zero, &mask, axis, &b).unwrap();
        let ds = reconstruct_f32(&zero, &mask, axis, &sum).unwrap();
        prop_assert!(ds.dist_sq(&da.add(&db).unwrap()).unwrap() <= 1e-10);
        let w = reconstruct_f32(&base, &mask, axis, &a).unwrap();
        prop_assert!(w.sub(&base).unwrap().dist_sq(&da).unwrap() <= 1e-10);
    }

    #[test]
    fn patched_forward_matches_dense(rows in 1usize..16, cols in 1usize..40, n in 1usize..6, seed in any::<u64>(), col in any::<bool>()) {
        let mut rng = SeededRng::new(seed);
        let base = rng.normal_matrix(rows, cols, 1.0);
        let x = rng.normal_matrix(n, cols, 1.0);
        let mask = sign_mask(&rng.normal_matrix(rows, cols, 1.0));
        let axis = if col { Axis::Col } else { Axis::Row };
        let v: Vec<f32> = (0..axis.len_for(rows, cols)).map(|_| rng.uniform() as f32 * 0.1).collect();
        let scale = AxisScaleVector::from_f32(axis, &v).unwrap();
        let dense = x.matmul_t(&reconstruct(&base, &mask, &scale).unwrap()).unwrap();
        let fast = patched_forward(&x, &base, &mask, &scale).unwrap();
        prop_assert!(fast.rel_error(&dense).unwrap() <= 1e-5);
    }
}

#[test]
fn sign_of_zero_is_positive() {
    let d = Matrix::from_rows(&[&[0.0, -0.0, -1e-30, 2.0]]).unwrap();
    let mask = sign_mask(&d);
    assert_eq!(mask.unpack().row(0), &[1.0, 1.0, -1.0, 1.0]);
}

#[test]
fn padding_bits_are_zero_and_checked() {
    for cols in [1, 5, 7, 9, 13, 63] {
        let mask = sign_mask(&Matrix::from_fn(3, cols, |_, _| 1.0));
        let last = mask.row_bytes(2)[packed_row_bytes(cols) - 1];
        assert_eq!(
            last.count_ones() as usize,
            if cols % 8 == 0 { 8 } else { cols % 8 }
        );
        let mut bytes = mask.as_bytes().to_vec();
        *bytes.last_mut().unwrap() |= 0x80;
        assert!(matches!(
            PackedSignMask::from_bytes(3, cols, bytes),
            Err(Error::Malformed { .. })
        ));
    }
}

#[test]
fn wrong_scale_length_is_rejected() {
    let base = Matrix::zeros(4, 6);
    let mask = sign_mask(&base);
    assert!(reconstruct_f32(&base, &mask, Axis::Row, &[1.0; 6]).is_err());
    assert!(reconstruct_f32(&base, &mask, Axis::Col, &[1.0; 4]).is_err());
    let x = Matrix::zeros(2, 6);
    assert!(patched_forward_f32(&x, &base, &mask, Axis::Col, &[1.0; 4]).is_err());
}
