use gazemd_oracles::{
    alignment_path_count, auc_paircount, best_f1_grid, chi_squared, dtw_bruteforce, f1_at, max_relative_error,
    pearson, OracleError,
};

#[test]
fn dtw_picks_the_cheapest_path() {
    // b repeats a's middle point; the best path pairs it twice at cost 0
    let a = [(0.0, 0.0), (0.5, 0.0), (1.0, 0.0)];
    let b = [(0.0, 0.0), (0.5, 0.0), (0.5, 0.0), (1.0, 0.0)];
    assert_eq!(dtw_bruteforce(&a, &b).unwrap().value, 0.0);
    // single points: the distance itself
    assert_eq!(dtw_bruteforce(&[(0.0, 0.0)], &[(0.3, 0.4)]).unwrap().value, 0.5);
    // one point against two: both must be matched to it
    assert_eq!(dtw_bruteforce(&[(0.0, 0.0)], &[(0.3, 0.4), (0.0, 0.0)]).unwrap().value, 0.5);
    assert!(matches!(dtw_bruteforce(&[], &[(0.0, 0.0)]), Err(OracleError::Empty(_))));
}

#[test]
fn path_counts_are_central_delannoy_numbers() {
    let expected = [1, 3, 13, 63, 321, 1683];
    for (n, &d) in expected.iter().enumerate() {
        assert_eq!(alignment_path_count(n + 1, n + 1), d);
    }
    assert_eq!(alignment_path_count(1, 5), 1);
}

#[test]
fn paircount_counts_ties_as_half() {
    // one positive, two negatives, one tied
    let auc = auc_paircount(&[0.5, 0.5, 0.1], &[true, false, false]).unwrap();
    assert_eq!(auc.value, 0.75);
}

#[test]
fn pearson_fixtures() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    assert_eq!(pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, -1.0, -1.0, 1.0]), 0.0);
}

#[test]
fn chi_squared_fixtures() {
    assert_eq!(chi_squared(&[vec![5, 5], vec![5, 5]]), 0.0);
    // expected 5 per cell, each deviation 5: 4 · 25 / 5
    assert_eq!(chi_squared(&[vec![10, 0], vec![0, 10]]), 20.0);
}

#[test]
fn f1_fixtures() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [false, false, true, true];
    // θ = 0.3 flags 0.4, 0.35, 0.8: P = 2/3, R = 1
    assert!((f1_at(&scores, &labels, 0.3) - 0.8).abs() < 1e-15);
    assert_eq!(f1_at(&scores, &labels, 0.9), 0.0);
    assert!((best_f1_grid(&scores, &labels, 1000) - 0.8).abs() < 1e-15);
}

#[test]
fn relative_error_uses_the_floor() {
    assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 2.0], 1e-4), 0.0);
    assert!((max_relative_error(&[1e-9], &[0.0], 1e-4) - 1e-5).abs() < 1e-18);
    assert!((max_relative_error(&[1.1], &[1.0], 1e-4) - 0.1 / 1.1).abs() < 1e-12);
}
