use hba_flow::haar::{self, check_scales, decompose, f_hba_forward, reconstruct, scale_logdet, HaarError, Trajectory};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn traj(values: Vec<f64>, dim: usize) -> Trajectory {
    Trajectory::new(values, dim, 0.1).unwrap()
}

/// Flattened `[f_1, ..., f_K, c_K]` of a decomposition.
fn flat_pyramid(y: &Trajectory, scales: usize, alpha: f64) -> Vec<f64> {
    let p = decompose(y, scales, &[alpha]).unwrap();
    let mut v: Vec<f64> = p.fines.iter().flat_map(|f| f.values().to_vec()).collect();
    v.extend_from_slice(p.coarsest.values());
    v
}

fn fd_jacobian(y: &[f64], dim: usize, scales: usize, alpha: f64) -> DMatrix<f64> {
    let n = y.len();
    let h = 1e-5;
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut up = y.to_vec();
        let mut dn = y.to_vec();
        up[j] += h;
        dn[j] -= h;
        let fu = flat_pyramid(&traj(up, dim), scales, alpha);
        let fd = flat_pyramid(&traj(dn, dim), scales, alpha);
        for i in 0..n {
            jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    jac
}

fn power_of_two_len() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![4usize, 8, 16, 32])
}

proptest! {
    #[test]
    fn roundtrip_is_exact(
        (len, dim, vals, scales) in (power_of_two_len(), 1usize..=2).prop_flat_map(|(len, dim)| {
            let max_k = len.trailing_zeros() as usize;
            (Just(len), Just(dim), prop::collection::vec(-10.0f64..10.0, len * dim), 1..=max_k)
        }),
        alpha in 0.0f64..0.99,
    ) {
        let y = traj(vals, dim);
        let p = decompose(&y, scales, &[alpha]).unwrap();
        prop_assert_eq!(p.scales(), scales);
        prop_assert_eq!(p.coarsest.len(), len >> scales);
        let back = reconstruct(&p).unwrap();
        prop_assert!(back.max_abs_diff(&y) < 1e-10);
    }

    #[test]
    fn pyramid_logdet_is_sum_of_scale_terms(len in power_of_two_len(), dim in 1usize..=2, alpha in 0.0f64..0.99) {
        let y = traj(vec![0.0; len * dim], dim);
        let scales = len.trailing_zeros() as usize;
        let p = decompose(&y, scales, &[alpha]).unwrap();
        let want: f64 = (0..scales).map(|k| scale_logdet(len >> k, dim, alpha)).sum();
        prop_assert!((p.total_logdet() - want).abs() < 1e-12);
    }

    #[test]
    fn coarse_tail_matches_full_decomposition(
        vals in prop::collection::vec(-5.0f64..5.0, 32),
        alpha in 0.0f64..0.99,
        k in 1usize..4,
    ) {
        let y = traj(vals, 2);
        let full = decompose(&y, 4, &[alpha]).unwrap();
        let ck = decompose(&y, k, &[alpha]).unwrap().coarsest;
        let tail = decompose(&ck, 4 - k, &[alpha]).unwrap();
        prop_assert_eq!(&tail.fines[..], &full.fines[k..]);
        prop_assert_eq!(tail.coarsest, full.coarsest);
    }
}

#[test]
fn single_scale_logdet_matches_fd_jacobian() {
    for len in [2usize, 4, 6, 8] {
        for dim in 1..=2 {
            for alpha in [0.0, 0.3, 0.5, 0.9] {
                let y: Vec<f64> = (0..len * dim).map(|i| (i as f64 * 0.37).sin()).collect();
                let jac = fd_jacobian(&y, dim, 1, alpha);
                let fd = jac.determinant().abs().ln();
                let analytic = scale_logdet(len, dim, alpha);
                assert!((fd - analytic).abs() < 1e-6, "T={len} d={dim} a={alpha}: {fd} vs {analytic}");
            }
        }
    }
}

#[test]
fn multi_scale_logdet_matches_fd_jacobian() {
    for dim in 1..=2 {
        for alpha in [0.0, 0.3, 0.5, 0.9] {
            let y: Vec<f64> = (0..8 * dim).map(|i| (i as f64 * 0.71).cos()).collect();
            let jac = fd_jacobian(&y, dim, 3, alpha);
            let p = decompose(&traj(y, dim), 3, &[alpha]).unwrap();
            assert!((jac.determinant().abs().ln() - p.total_logdet()).abs() < 1e-6);
        }
    }
}

#[test]
fn jacobian_has_two_by_two_block_pattern() {
    // time-major values: index (t, c) -> t * dim + c; output [f (T/2 x d), c (T/2 x d)]
    for len in [2usize, 4, 8] {
        for dim in 1..=2 {
            for alpha in [0.0, 0.3, 0.5, 0.9] {
                let y: Vec<f64> = (0..len * dim).map(|i| i as f64 * 0.1 - 0.4).collect();
                let jac = fd_jacobian(&y, dim, 1, alpha);
                let half = len / 2 * dim;
                let mut want = DMatrix::<f64>::zeros(len * dim, len * dim);
                for i in 0..len / 2 {
                    for c in 0..dim {
                        let row = i * dim + c;
                        let odd = 2 * i * dim + c;
                        let even = (2 * i + 1) * dim + c;
                        want[(row, odd)] = 1.0 - alpha;
                        want[(row, even)] = -(1.0 - alpha);
                        want[(half + row, odd)] = alpha;
                        want[(half + row, even)] = 1.0 - alpha;
                    }
                }
                let err = (&jac - &want).abs().max();
                assert!(err < 1e-8, "T={len} d={dim} a={alpha}: {err}");
            }
        }
    }
}

#[test]
fn scale_count_bound() {
    for len in 1..=64usize {
        for k in 1..=7usize {
            let ok = len % (1 << k) == 0 && (1usize << k) <= len;
            assert_eq!(check_scales(len, k).is_ok(), ok, "T={len} K={k}");
            let y = traj(vec![0.0; len], 1);
            assert_eq!(decompose(&y, k, &[0.5]).is_ok(), ok);
        }
    }
    let err = decompose(&traj(vec![0.0; 12], 1), 3, &[0.5]).unwrap_err();
    assert!(matches!(err, HaarError::Divisibility { len: 12, scales: 3, required: 8 }));
    assert!(err.to_string().contains("divisible"));
}

#[test]
fn single_scale_hand_values() {
    // o = points 0, 2; e = points 1, 3
    let y = traj(vec![1.0, 3.0, 5.0, 9.0], 1);
    let s = f_hba_forward(&y, 0.5).unwrap();
    assert_eq!(s.coarse.values(), &[2.0, 7.0]);
    assert_eq!(s.fine.values(), &[-1.0, -2.0]);
    assert!((s.logdet - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    let s0 = f_hba_forward(&y, 0.0).unwrap();
    assert_eq!(s0.coarse.values(), &[3.0, 9.0]);
    assert_eq!(s0.fine.values(), &[-2.0, -4.0]);
}

#[test]
fn per_scale_alphas() {
    let y = traj((0..16).map(|i| (i * i) as f64 * 0.1).collect(), 2);
    let p = decompose(&y, 3, &[0.1, 0.5, 0.8]).unwrap();
    assert_eq!(p.alphas, vec![0.1, 0.5, 0.8]);
    assert!(reconstruct(&p).unwrap().max_abs_diff(&y) < 1e-12);
    assert!(decompose(&y, 3, &[0.1, 0.5]).is_err());
    assert!(matches!(haar::f_hba_forward(&y, 1.0), Err(HaarError::Alpha(_))));
}
