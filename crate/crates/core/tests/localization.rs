use losia::localization::{
    brute_force_subnet, column2row, floor_count, output_layer_subnet, row2column, select_best,
    subnet_score, RankFactor, Strategy, Subnet,
};
use losia::DenseMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn q(rows: &[&[f64]]) -> DenseMatrix {
    DenseMatrix::from_rows(rows)
}

fn rf(p: f64) -> RankFactor {
    RankFactor::uniform(p).unwrap()
}

fn random_scores(n: usize, m: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::random_uniform(n, m, 0.0, 1.0, &mut rng)
}

fn assert_feasible(s: &Subnet, n: usize, m: usize, p: f64) {
    s.validate(n, m).unwrap();
    assert_eq!(s.rows.len(), floor_count(n, p));
    assert_eq!(s.cols.len(), floor_count(m, p));
    assert!(s.rows.len() as f64 / n as f64 <= p + 1e-12);
    assert!(s.cols.len() as f64 / m as f64 <= p + 1e-12);
}

/// All k-subsets of 0..n in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn naive_score(q: &DenseMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    let mut total = 0.0;
    for &r in rows {
        for &c in cols {
            total += q.get(r, c);
        }
    }
    total
}

#[test]
fn small_worked_examples() {
    let single = q(&[&[1.0, 0.0], &[0.0, 0.0]]);
    for s in [
        row2column(&single, rf(0.5)).unwrap(),
        column2row(&single, rf(0.5)).unwrap(),
        brute_force_subnet(&single, rf(0.5)).unwrap().subnet,
    ] {
        assert_eq!((s.rows, s.cols), (vec![0], vec![0]));
    }

    let ones = DenseMatrix::filled(4, 4, 1.0);
    let s = row2column(&ones, rf(0.5)).unwrap();
    assert_eq!((s.rows, s.cols), (vec![0, 1], vec![0, 1]));

    let skew = q(&[&[3.0, 3.0], &[4.0, 0.0]]);
    let c = column2row(&skew, rf(0.5)).unwrap();
    assert_eq!((c.rows.clone(), c.cols.clone()), (vec![1], vec![0]));
    assert_eq!(subnet_score(&skew, &c).unwrap(), 4.0);
    let r = row2column(&skew, rf(0.5)).unwrap();
    assert_eq!((r.rows.clone(), r.cols.clone()), (vec![0], vec![0]));
    assert_eq!(subnet_score(&skew, &r).unwrap(), 3.0);
    let best = select_best(&skew, rf(0.5)).unwrap();
    assert_eq!((best.strategy, best.score), (Strategy::ColumnMajor, 4.0));
}

#[test]
fn infeasible_rank_factor_names_the_shape() {
    let err = row2column(&DenseMatrix::zeros(3, 8), rf(0.25))
        .unwrap_err()
        .to_string();
    assert!(err.contains('3') && err.contains('8'), "{err}");
}

#[test]
fn exhaustive_binary_three_by_three_sweep() {
    for bits in 0u32..512 {
        let m = DenseMatrix::from_fn(3, 3, |r, c| f64::from((bits >> (r * 3 + c)) & 1));
        let a = row2column(&m, rf(1.0 / 3.0)).unwrap();
        let b = column2row(&m, rf(1.0 / 3.0)).unwrap();
        let best = select_best(&m, rf(1.0 / 3.0)).unwrap();
        assert_feasible(&best.subnet, 3, 3, 1.0 / 3.0);
        let single = subnet_score(&m, &a)
            .unwrap()
            .max(subnet_score(&m, &b).unwrap());
        assert!(best.score >= single, "pattern {bits:09b}");
        let brute = brute_force_subnet(&m, rf(1.0 / 3.0)).unwrap();
        assert!(brute.score >= best.score);
    }
}

#[test]
fn transpose_symmetry() {
    for seed in 0..50 {
        let m = random_scores(7, 5, seed);
        let by_cols = column2row(&m, rf(0.4)).unwrap();
        let by_rows_t = row2column(&m.transpose(), rf(0.4)).unwrap();
        assert_eq!(by_cols.rows, by_rows_t.cols, "seed {seed}");
        assert_eq!(by_cols.cols, by_rows_t.rows, "seed {seed}");
    }
}

#[test]
fn greedy_columns_are_optimal_given_greedy_rows() {
    for seed in 0..40 {
        let m = random_scores(6, 6, 1000 + seed);
        let s = row2column(&m, rf(1.0 / 3.0)).unwrap();
        let best = subsets(6, 2)
            .iter()
            .map(|cols| naive_score(&m, &s.rows, cols))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(subnet_score(&m, &s).unwrap(), best, "seed {seed}");
    }
}

#[test]
fn subnet_score_matches_double_loop() {
    for seed in 0..20 {
        let m = random_scores(8, 8, 2000 + seed);
        let s = select_best(&m, rf(0.375)).unwrap().subnet;
        let expect = naive_score(&m, &s.rows, &s.cols);
        assert!((subnet_score(&m, &s).unwrap() - expect).abs() <= 1e-12);
    }
    let m = random_scores(4, 3, 7);
    let total: f64 = m.data().iter().sum();
    assert!((subnet_score(&m, &Subnet::full(4, 3)).unwrap() - total).abs() <= 1e-12);
}

#[test]
fn subnet_score_rejects_out_of_range() {
    let s = Subnet {
        rows: vec![0, 5],
        cols: vec![0],
    };
    assert!(subnet_score(&DenseMatrix::zeros(3, 3), &s).is_err());
}

#[test]
fn brute_force_is_exact_and_breaks_ties_lexicographically() {
    for seed in 0..10 {
        let m = random_scores(5, 4, 3000 + seed);
        let mut best = (f64::NEG_INFINITY, vec![], vec![]);
        for rows in subsets(5, 2) {
            for cols in subsets(4, 2) {
                let s = naive_score(&m, &rows, &cols);
                if s > best.0 {
                    best = (s, rows.clone(), cols);
                }
            }
        }
        let got = brute_force_subnet(&m, rf(0.5)).unwrap();
        assert_eq!((got.subnet.rows, got.subnet.cols), (best.1, best.2));
    }
    let flat = DenseMatrix::filled(4, 4, 1.0);
    let got = brute_force_subnet(&flat, rf(0.5)).unwrap().subnet;
    assert_eq!((got.rows, got.cols), (vec![0, 1], vec![0, 1]));
}

#[test]
fn brute_force_guard() {
    let big = DenseMatrix::zeros(40, 40);
    assert!(brute_force_subnet(&big, rf(0.5)).is_err());
}

#[test]
fn dominant_row_and_column_force_agreement() {
    let mut m = random_scores(6, 6, 11).scale(0.01);
    for i in 0..6 {
        m.set(2, i, 3.0);
        m.set(i, 4, 3.0);
    }
    m.set(2, 4, 10.0);
    let greedy = select_best(&m, rf(1.0 / 6.0)).unwrap().subnet;
    let brute = brute_force_subnet(&m, rf(1.0 / 6.0)).unwrap().subnet;
    assert_eq!(greedy, brute);
    assert_eq!((greedy.rows, greedy.cols), (vec![2], vec![4]));
}

#[test]
fn symmetric_scores_make_both_strategies_agree() {
    for seed in 0..20 {
        let a = random_scores(5, 5, 4000 + seed);
        let sym = a.zip_map(&a.transpose(), |x, y| x + y).unwrap();
        let r = row2column(&sym, rf(0.4)).unwrap();
        let c = column2row(&sym, rf(0.4)).unwrap();
        let (a, b) = (
            subnet_score(&sym, &r).unwrap(),
            subnet_score(&sym, &c).unwrap(),
        );
        assert!((a - b).abs() <= 1e-12 * a.abs(), "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn output_layer_subnet_is_top_k_of_column_sums() {
    let m = random_scores(16, 64, 99);
    let s = output_layer_subnet(&m, 0.125).unwrap();
    assert_eq!(s.rows, (0..16).collect::<Vec<_>>());
    let sums: Vec<f64> = (0..64)
        .map(|c| (0..16).map(|r| m.get(r, c)).sum())
        .collect();
    let mut order: Vec<usize> = (0..64).collect();
    order.sort_by(|&a, &b| sums[b].partial_cmp(&sums[a]).unwrap().then(a.cmp(&b)));
    let mut expect = order[..8].to_vec();
    expect.sort_unstable();
    assert_eq!(s.cols, expect);

    assert_eq!(
        output_layer_subnet(&m, 1.0).unwrap().cols,
        (0..64).collect::<Vec<_>>()
    );
    let mut one_col = DenseMatrix::zeros(4, 8);
    for r in 0..4 {
        one_col.set(r, 5, 1.0);
    }
    assert_eq!(
        output_layer_subnet(&one_col, 1.0 / 8.0).unwrap().cols,
        vec![5]
    );
}

#[test]
fn repeated_calls_are_identical() {
    let m = random_scores(9, 11, 5);
    assert_eq!(
        select_best(&m, rf(0.3)).unwrap(),
        select_best(&m, rf(0.3)).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniform_shift_keeps_the_selection(seed in 0u64..10_000, shift in 0.0f64..4.0) {
        // Quarter-integer scores keep every sum exact, so shifted ties stay ties.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = DenseMatrix::random_uniform(6, 5, 0.0, 8.0, &mut rng).map(|v| (v * 4.0).floor() / 4.0);
        let shift = (shift * 4.0).floor() / 4.0;
        let shifted = base.map(|v| v + shift);
        let a = select_best(&base, rf(0.5)).unwrap().subnet;
        let b = select_best(&shifted, rf(0.5)).unwrap().subnet;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn selections_are_always_feasible(seed in 0u64..10_000, n in 2usize..12, m in 2usize..12, p in 0.5f64..1.0) {
        let scores = random_scores(n, m, seed);
        let s = select_best(&scores, rf(p)).unwrap().subnet;
        prop_assert!(s.validate(n, m).is_ok());
        prop_assert_eq!(s.rows.len(), floor_count(n, p));
        prop_assert_eq!(s.cols.len(), floor_count(m, p));
    }
}
