mod common;

use nalgebra::{DMatrix, DVector};
use nlsls::sls::{
    closed_loop_map, controller_step, extract_feedback, feedback_step, recover_disturbances, response_from_feedback, shift_matrix, slp_residual,
    state_response_for, BlockLowerTriangular, SystemResponse,
};
use proptest::prelude::*;

use common::{dense_blkdiag, dense_shift, random_blt, random_ltv, random_vector, rng, simulate};

trait Round {
    fn scaled_round(self) -> Self;
}

impl Round for BlockLowerTriangular {
    /// Small integer entries, so products are exact in any summation order.
    fn scaled_round(self) -> Self {
        let (t, p, q) = (self.horizon(), self.block_rows(), self.block_cols());
        BlockLowerTriangular::from_fn(t, p, q, |i, j| self.block(i, j).map(|v| (8.0 * v).round()))
    }
}

#[test]
fn shift_matrix_examples() {
    assert_eq!(shift_matrix(1, 2).unwrap().max_abs(), 0.0);
    let z = shift_matrix(3, 1).unwrap();
    assert_eq!(z.to_dense(), DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
    let z2 = z.mul(&z).unwrap();
    assert_eq!(z2.to_dense(), DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
    assert_eq!(z2.mul(&z).unwrap().max_abs(), 0.0);
    assert!(shift_matrix(0, 1).is_err());
}

#[test]
fn dense_layout_puts_lag_j_left_of_the_diagonal() {
    let m = BlockLowerTriangular::from_fn(3, 1, 1, |i, j| DMatrix::from_element(1, 1, (10 * i + j) as f64));
    let d = m.to_dense();
    assert_eq!(d[(2, 2)], 20.0);
    assert_eq!(d[(2, 1)], 21.0);
    assert_eq!(d[(2, 0)], 22.0);
    assert_eq!(d[(0, 1)], 0.0);
    assert_eq!(BlockLowerTriangular::from_dense(&d, 3, 1, 1).unwrap(), m);
}

#[test]
fn trivial_response_has_zero_residual() {
    let t = 4;
    let z = vec![DMatrix::zeros(2, 2); t];
    let zb = vec![DMatrix::zeros(2, 1); t];
    let resp = SystemResponse::new(BlockLowerTriangular::identity(t, 2), BlockLowerTriangular::zeros(t, 1, 2)).unwrap();
    assert_eq!(slp_residual(&z, &zb, &resp).unwrap().max_abs(), 0.0);
}

#[test]
fn scalar_two_step_expansion() {
    let (a, b, k) = (0.7, -1.3, 0.4);
    let blocks = |v: f64| vec![DMatrix::from_element(1, 1, v); 2];
    let phi_x = BlockLowerTriangular::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, a + b * k, 1.0]), 2, 1, 1).unwrap();
    let phi_u = BlockLowerTriangular::from_dense(&DMatrix::from_row_slice(2, 2, &[k, 0.0, 5.0, -2.0]), 2, 1, 1).unwrap();
    let resp = SystemResponse::new(phi_x, phi_u).unwrap();
    assert!(slp_residual(&blocks(a), &blocks(b), &resp).unwrap().max_abs() < 1e-15);
}

#[test]
fn extract_feedback_special_cases() {
    let mut r = rng(1);
    let (a, b) = random_ltv(&mut r, 3, 2, 1);
    let (a, b) = (a[..3].to_vec(), b[..3].to_vec());
    let resp = SystemResponse::new(state_response_for(&a, &b, &BlockLowerTriangular::zeros(3, 1, 2)).unwrap(), BlockLowerTriangular::zeros(3, 1, 2)).unwrap();
    assert_eq!(extract_feedback(&resp).unwrap().max_abs(), 0.0);
    let phi_u = random_blt(&mut r, 3, 1, 2);
    let resp = SystemResponse::new(BlockLowerTriangular::identity(3, 2), phi_u.clone()).unwrap();
    assert_eq!(extract_feedback(&resp).unwrap(), phi_u);
}

#[test]
fn extract_feedback_rejects_non_identity_diagonal() {
    let mut phi_x = BlockLowerTriangular::identity(2, 1);
    *phi_x.block_mut(1, 0) = DMatrix::from_element(1, 1, 1.5);
    let resp = SystemResponse::new(phi_x, BlockLowerTriangular::zeros(2, 1, 1)).unwrap();
    assert!(extract_feedback(&resp).is_err());
}

#[test]
fn impulse_gives_first_block_column() {
    let mut r = rng(2);
    let (a, b) = random_ltv(&mut r, 4, 2, 1);
    let (a, b) = (a[..4].to_vec(), b[..4].to_vec());
    let resp = response_from_feedback(&a, &b, &random_blt(&mut r, 4, 1, 2)).unwrap();
    let mut d = vec![DVector::zeros(2); 4];
    d[0][1] = 1.0;
    let (dx, du) = closed_loop_map(&resp, &d).unwrap();
    let (px, pu) = (resp.phi_x.to_dense(), resp.phi_u.to_dense());
    for i in 0..4 {
        assert_eq!(dx[i], px.column(1).rows(2 * i, 2).into_owned());
        assert_eq!(du[i], pu.column(1).rows(i, 1).into_owned());
    }
    let (dx, du) = closed_loop_map(&resp, &vec![DVector::zeros(2); 4]).unwrap();
    assert!(dx.iter().chain(&du).all(|v| v.amax() == 0.0));
    assert!(closed_loop_map(&resp, &d[..3]).is_err());
}

#[test]
fn controller_edge_cases() {
    let mut r = rng(3);
    let resp = SystemResponse::new(BlockLowerTriangular::identity(3, 2), random_blt(&mut r, 3, 1, 2)).unwrap();
    assert_eq!(controller_step(&resp, &[]).unwrap().amax(), 0.0);
    assert!(controller_step(&resp, &vec![DVector::zeros(2); 4]).is_err());
}

#[test]
fn controller_matches_feedback_form_on_random_histories() {
    let mut r = rng(4);
    let (a, b) = random_ltv(&mut r, 5, 3, 2);
    let (a, b) = (a[..5].to_vec(), b[..5].to_vec());
    let k = random_blt(&mut r, 5, 2, 3);
    let resp = response_from_feedback(&a, &b, &k).unwrap();
    for trial in 0..100 {
        let len = 1 + trial % 5;
        let hist: Vec<_> = (0..len).map(|_| random_vector(&mut r, 3, 1.0)).collect();
        let online = controller_step(&resp, &hist).unwrap();
        let kform = feedback_step(&k, &hist).unwrap();
        assert!((online - kform).amax() <= 1e-10);
    }
}

#[test]
fn recovered_disturbances_reproduce_the_history() {
    let mut r = rng(5);
    let (a, b) = random_ltv(&mut r, 4, 2, 2);
    let (a, b) = (a[..4].to_vec(), b[..4].to_vec());
    let resp = response_from_feedback(&a, &b, &random_blt(&mut r, 4, 2, 2)).unwrap();
    let d: Vec<_> = (0..4).map(|_| random_vector(&mut r, 2, 1.0)).collect();
    let (dx, _) = closed_loop_map(&resp, &d).unwrap();
    let w = recover_disturbances(&resp, &dx).unwrap();
    for (wi, di) in w.iter().zip(&d) {
        assert!((wi - di).amax() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn product_matches_dense_multiplication(seed in any::<u64>(), t in 1usize..5, p in 1usize..4, q in 1usize..4, s in 1usize..4) {
        let mut r = rng(seed);
        let m1 = random_blt(&mut r, t, p, q).scaled_round();
        let m2 = random_blt(&mut r, t, q, s).scaled_round();
        let prod = m1.mul(&m2).unwrap();
        let dense = m1.to_dense() * m2.to_dense();
        prop_assert_eq!(prod.to_dense(), dense.clone());
        for i in 0..t * p {
            for j in 0..t * s {
                if j / s > i / p {
                    prop_assert_eq!(dense[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn residual_matches_dense_oracle(seed in any::<u64>(), t in 1usize..5, nx in 1usize..4, nu in 1usize..3) {
        let mut r = rng(seed);
        let (a, b) = random_ltv(&mut r, t, nx, nu);
        let (a, b) = (a[..t].to_vec(), b[..t].to_vec());
        let resp = SystemResponse::new(random_blt(&mut r, t, nx, nx), random_blt(&mut r, t, nu, nx)).unwrap();
        let res = slp_residual(&a, &b, &resp).unwrap().to_dense();
        let z = dense_shift(t, nx);
        let eye = DMatrix::identity(t * nx, t * nx);
        let oracle = (&eye - &z * dense_blkdiag(&a)) * resp.phi_x.to_dense() - &z * dense_blkdiag(&b) * resp.phi_u.to_dense() - &eye;
        prop_assert!((res - oracle).amax() <= 1e-12);
    }

    #[test]
    fn feasible_responses_have_identity_diagonal(seed in any::<u64>(), t in 1usize..6) {
        let mut r = rng(seed);
        let (a, b) = random_ltv(&mut r, t, 3, 2);
        let (a, b) = (a[..t].to_vec(), b[..t].to_vec());
        let phi_u = random_blt(&mut r, t, 2, 3);
        let resp = SystemResponse::new(state_response_for(&a, &b, &phi_u).unwrap(), phi_u).unwrap();
        prop_assert!(slp_residual(&a, &b, &resp).unwrap().max_abs() <= 1e-12);
        for i in 0..t {
            prop_assert!((resp.phi_x.block(i, 0) - DMatrix::<f64>::identity(3, 3)).amax() <= 1e-9);
        }
    }

    #[test]
    fn feedback_round_trip(seed in any::<u64>(), t in 1usize..6) {
        let mut r = rng(seed);
        let (a, b) = random_ltv(&mut r, t, 3, 2);
        let (a, b) = (a[..t].to_vec(), b[..t].to_vec());
        let k = random_blt(&mut r, t, 2, 3);
        let resp = response_from_feedback(&a, &b, &k).unwrap();
        prop_assert!(slp_residual(&a, &b, &resp).unwrap().max_abs() <= 1e-10);
        let k2 = extract_feedback(&resp).unwrap();
        prop_assert!(k2.sub(&k).unwrap().max_abs() <= 1e-9);
        prop_assert!(k2.mul(&resp.phi_x).unwrap().sub(&resp.phi_u).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn convolution_matches_simulation(seed in any::<u64>(), t in 1usize..7) {
        let mut r = rng(seed);
        let (a, b) = random_ltv(&mut r, t, 3, 2);
        let (a, b) = (a[..t].to_vec(), b[..t].to_vec());
        let k = random_blt(&mut r, t, 2, 3);
        let resp = response_from_feedback(&a, &b, &k).unwrap();
        let d: Vec<_> = (0..t).map(|_| random_vector(&mut r, 3, 1.0)).collect();
        let (dx, du) = closed_loop_map(&resp, &d).unwrap();
        let (sx, su) = simulate(&a, &b, &k, &d);
        for i in 0..t {
            prop_assert!((&dx[i] - &sx[i]).amax() <= 1e-10 * (1.0 + sx[i].amax()));
            prop_assert!((&du[i] - &su[i]).amax() <= 1e-10 * (1.0 + su[i].amax()));
        }
    }

    #[test]
    fn controller_is_causal(seed in any::<u64>(), k in 1usize..4) {
        let mut r = rng(seed);
        let resp = response_from_feedback(
            &vec![DMatrix::identity(2, 2) * 0.9; 5],
            &vec![DMatrix::from_element(2, 1, 1.0); 5],
            &random_blt(&mut r, 5, 1, 2),
        ).unwrap();
        let hist: Vec<_> = (0..5).map(|_| random_vector(&mut r, 2, 1.0)).collect();
        let mut other = hist.clone();
        for h in other.iter_mut().skip(k) {
            *h = random_vector(&mut r, 2, 5.0);
        }
        prop_assert_eq!(controller_step(&resp, &hist[..k]).unwrap(), controller_step(&resp, &other[..k]).unwrap());
    }
}
