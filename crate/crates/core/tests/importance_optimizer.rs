use losia::importance::{
    grad_score, raw_importance, DeviationReference, ImportanceState, RawImportance,
    ScoreAccumulator,
};
use losia::localization::{random_subnet, RankFactor, Subnet};
use losia::optimizer::{full_grad_path, losia_pro_grad, AdamWConfig, DenseAdamW, SubnetAdamWState};
use losia::params::LinearId;
use losia::{DenseMatrix, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn raw_importance_spot_values() {
    let w = DenseMatrix::from_rows(&[[5.0, 0.2, 2.0]]);
    let g = DenseMatrix::from_rows(&[[0.0, 1.0, 1.0]]);
    let i = raw_importance(&g, &w).unwrap().0;
    assert_eq!(i.get(0, 0), 0.0);
    assert!((i.get(0, 1) - 0.18).abs() < 1e-15);
    assert_eq!(i.get(0, 2), 0.0);
    assert!(raw_importance(&g, &DenseMatrix::zeros(2, 2)).is_err());
}

#[test]
fn first_update_from_zero() {
    let mut s = ImportanceState::new(LinearId(0), 1, 1, 0.85, 0.85).unwrap();
    s.ema_update(&RawImportance(DenseMatrix::from_rows(&[[1.0]])))
        .unwrap();
    assert!((s.sensitivity.get(0, 0) - 0.15).abs() < 1e-12);
    assert!((s.uncertainty.get(0, 0) - 0.15).abs() < 1e-12);
}

#[test]
fn bad_beta_and_early_score_fail() {
    assert!(matches!(
        ImportanceState::new(LinearId(0), 1, 1, 1.0, 0.5),
        Err(Error::Config(_))
    ));
    let s = ImportanceState::new(LinearId(0), 2, 2, 0.85, 0.85).unwrap();
    assert!(matches!(s.score(), Err(Error::State(_))));
}

#[test]
fn score_is_elementwise_product() {
    let mut s = ImportanceState::new(LinearId(0), 1, 1, 0.85, 0.85).unwrap();
    s.sensitivity = DenseMatrix::from_rows(&[[2.0]]);
    s.uncertainty = DenseMatrix::from_rows(&[[3.0]]);
    s.steps = 1;
    assert_eq!(s.score().unwrap().get(0, 0), 6.0);
}

/// Straight-line recomputation of the smoothing recursions, one scalar at a
/// time, from the stream of gradients and weights.
fn scripted(stream: &[(Vec<f64>, Vec<f64>)], b1: f64, b2: f64, post: bool) -> (Vec<f64>, Vec<f64>) {
    let n = stream[0].0.len();
    let mut ibar = vec![0.0; n];
    let mut ubar = vec![0.0; n];
    for (g, w) in stream {
        for k in 0..n {
            let x = g[k] * w[k];
            let i = (x - 0.5 * x * x).abs();
            let before = ibar[k];
            ibar[k] = b1 * before + (1.0 - b1) * i;
            let reference = if post { ibar[k] } else { before };
            ubar[k] = b2 * ubar[k] + (1.0 - b2) * (i - reference).abs();
        }
    }
    (ibar, ubar)
}

#[test]
fn ten_step_stream_matches_script() {
    for post in [false, true] {
        let mut r = rng(42);
        let stream: Vec<(Vec<f64>, Vec<f64>)> = (0..10)
            .map(|_| {
                let g: Vec<f64> = (0..9).map(|_| r.random_range(-1.5..1.5)).collect();
                let w: Vec<f64> = (0..9).map(|_| r.random_range(-1.0..1.0)).collect();
                (g, w)
            })
            .collect();
        let reference = if post {
            DeviationReference::PostUpdate
        } else {
            DeviationReference::PreUpdate
        };
        let mut state = ImportanceState::new(LinearId(3), 3, 3, 0.85, 0.85)
            .unwrap()
            .with_reference(reference);
        for (g, w) in &stream {
            let g = DenseMatrix::new(3, 3, g.clone()).unwrap();
            let w = DenseMatrix::new(3, 3, w.clone()).unwrap();
            state.ema_update(&raw_importance(&g, &w).unwrap()).unwrap();
        }
        let (ibar, ubar) = scripted(&stream, 0.85, 0.85, post);
        let score = state.score().unwrap();
        for k in 0..9 {
            assert!((state.sensitivity.data()[k] - ibar[k]).abs() <= 1e-15);
            assert!((state.uncertainty.data()[k] - ubar[k]).abs() <= 1e-15);
            assert!((score.data()[k] - ibar[k] * ubar[k]).abs() <= 1e-15);
            assert!(score.data()[k] >= 0.0);
        }
        assert_eq!(state.steps, 10);
    }
}

#[test]
fn constant_stream_converges() {
    let mut s = ImportanceState::new(LinearId(0), 1, 1, 0.85, 0.85).unwrap();
    let raw = raw_importance(
        &DenseMatrix::from_rows(&[[0.5]]),
        &DenseMatrix::from_rows(&[[1.0]]),
    )
    .unwrap();
    let c = raw.0.get(0, 0);
    for _ in 0..400 {
        s.ema_update(&raw).unwrap();
    }
    assert!((s.sensitivity.get(0, 0) - c).abs() < 1e-12);
    assert!(s.uncertainty.get(0, 0) < 1e-12);
}

#[test]
fn gradient_ranking_matches_sensitivity_when_small() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let w = DenseMatrix::filled(4, 5, 0.7);
        let g = DenseMatrix::random_uniform(4, 5, -1e-4, 1e-4, &mut r);
        let a = grad_score(&g);
        let b = raw_importance(&g, &w).unwrap().0;
        let rank = |m: &DenseMatrix| {
            let mut idx: Vec<usize> = (0..m.len()).collect();
            idx.sort_by(|&x, &y| m.data()[y].partial_cmp(&m.data()[x]).unwrap());
            idx
        };
        assert_eq!(rank(&a), rank(&b), "seed {seed}");
    }
    assert_eq!(
        grad_score(&DenseMatrix::from_rows(&[[-2.0, 0.0]])).data(),
        &[2.0, 0.0]
    );
}

#[test]
fn gradient_accumulator_is_a_running_mean() {
    let mut acc = ScoreAccumulator::GradientMagnitude {
        layer: LinearId(0),
        mean_abs: DenseMatrix::zeros(1, 2),
        steps: 0,
    };
    assert!(acc.score().is_err());
    let w = DenseMatrix::zeros(1, 2);
    for g in [[1.0, -2.0], [-3.0, 4.0]] {
        acc.observe(&DenseMatrix::from_rows(&[g]), &w).unwrap();
    }
    assert_eq!(acc.score().unwrap().data(), &[2.0, 3.0]);
}

/// Textbook AdamW on one scalar with its own step counter.
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, w: f64, g: f64, lr: f64, hp: &AdamWConfig) -> f64 {
        self.t += 1;
        self.m = hp.beta1 * self.m + (1.0 - hp.beta1) * g;
        self.v = hp.beta2 * self.v + (1.0 - hp.beta2) * g * g;
        let mh = self.m / (1.0 - hp.beta1.powi(self.t));
        let vh = self.v / (1.0 - hp.beta2.powi(self.t));
        w - lr * (mh / (vh + hp.eps).sqrt() + hp.weight_decay * w)
    }
}

#[test]
fn twenty_steps_match_scripted_adamw() {
    let hp = AdamWConfig {
        weight_decay: 0.01,
        ..AdamWConfig::default()
    };
    let mut r = rng(7);
    let mut w = DenseMatrix::random_normal(5, 6, 1.0, &mut r);
    let subnet = Subnet {
        rows: vec![0, 2, 4],
        cols: vec![1, 5],
    };
    let mut state = SubnetAdamWState::new(LinearId(0), subnet.clone(), hp);
    let mut oracle: Vec<ScalarAdam> = (0..6)
        .map(|_| ScalarAdam {
            m: 0.0,
            v: 0.0,
            t: 0,
        })
        .collect();
    let mut expect = w.clone();
    let frozen = w.clone();
    for step in 0..20 {
        let g = DenseMatrix::random_normal(3, 2, 1.0, &mut r);
        let lr = 0.01 * (step as f64 + 1.0) / 20.0;
        state.fused_step(&mut w, &g, lr, step).unwrap();
        for (i, &row) in subnet.rows.iter().enumerate() {
            for (j, &col) in subnet.cols.iter().enumerate() {
                let next = oracle[i * 2 + j].step(expect.get(row, col), g.get(i, j), lr, &hp);
                expect.set(row, col, next);
            }
        }
    }
    assert!(w.max_abs_diff(&expect) <= 1e-12);
    for r in 0..5 {
        for c in 0..6 {
            if !subnet.contains(r, c) {
                assert_eq!(w.get(r, c).to_bits(), frozen.get(r, c).to_bits());
            }
        }
    }
}

#[test]
fn fused_step_edge_cases() {
    let mut st = SubnetAdamWState::new(LinearId(0), Subnet::full(2, 2), AdamWConfig::default());
    let mut w = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
    let before = w.clone();
    st.fused_step(&mut w, &DenseMatrix::zeros(2, 2), 0.1, 0)
        .unwrap();
    assert_eq!(w, before);
    let bad = DenseMatrix::from_rows(&[[f64::NAN, 0.0], [0.0, 0.0]]);
    assert!(matches!(
        st.fused_step(&mut w, &bad, 0.1, 17),
        Err(Error::NumericOverflow { step: 17, .. })
    ));
    assert!(st
        .fused_step(&mut w, &DenseMatrix::zeros(1, 2), 0.1, 0)
        .is_err());

    let mut one = SubnetAdamWState::new(LinearId(0), Subnet::full(1, 1), AdamWConfig::default());
    let mut x = DenseMatrix::from_rows(&[[0.0]]);
    one.fused_step(&mut x, &DenseMatrix::from_rows(&[[1.0]]), 1e-3, 0)
        .unwrap();
    assert!((x.get(0, 0) + 1e-3).abs() < 1e-9);
}

#[test]
fn dense_adamw_matches_scalar_reference() {
    let hp = AdamWConfig::default();
    let mut r = rng(3);
    let mut w = DenseMatrix::random_normal(2, 3, 1.0, &mut r);
    let mut expect = w.clone();
    let mut st = DenseAdamW::new(2, 3);
    let mut oracle: Vec<ScalarAdam> = (0..6)
        .map(|_| ScalarAdam {
            m: 0.0,
            v: 0.0,
            t: 0,
        })
        .collect();
    for step in 0..10 {
        let g = DenseMatrix::random_normal(2, 3, 1.0, &mut r);
        st.step(&mut w, &g, 0.01, &hp, step).unwrap();
        for k in 0..6 {
            expect.data_mut()[k] = oracle[k].step(expect.data()[k], g.data()[k], 0.01, &hp);
        }
    }
    assert!(w.max_abs_diff(&expect) <= 1e-12);
}

#[test]
fn migration_keeps_surviving_entries() {
    let hp = AdamWConfig::default();
    let old = Subnet {
        rows: vec![0, 1, 2, 3],
        cols: vec![0, 1, 2, 3],
    };
    let mut st = SubnetAdamWState::new(LinearId(0), old.clone(), hp);
    let mut r = rng(5);
    let mut w = DenseMatrix::random_normal(8, 8, 1.0, &mut r);
    for step in 0..3 {
        st.fused_step(
            &mut w,
            &DenseMatrix::random_normal(4, 4, 1.0, &mut r),
            0.01,
            step,
        )
        .unwrap();
    }
    let new = Subnet {
        rows: vec![2, 3, 4, 5],
        cols: vec![1, 3, 5, 7],
    };
    let next = st.migrate(new.clone(), false);
    for (i, &row) in new.rows.iter().enumerate() {
        for (j, &col) in new.cols.iter().enumerate() {
            let k = i * 4 + j;
            let old_pos = old
                .rows
                .iter()
                .position(|&x| x == row)
                .zip(old.cols.iter().position(|&x| x == col));
            match old_pos {
                Some((oi, oj)) => {
                    let ok = oi * 4 + oj;
                    assert_eq!(next.m.data()[k].to_bits(), st.m.data()[ok].to_bits());
                    assert_eq!(next.v.data()[k].to_bits(), st.v.data()[ok].to_bits());
                    assert_eq!(next.counts[k], 3);
                }
                None => {
                    assert_eq!(
                        (next.m.data()[k], next.v.data()[k], next.counts[k]),
                        (0.0, 0.0, 0)
                    );
                }
            }
        }
    }
    assert_eq!(st.migrate(old.clone(), false), st);
    let disjoint = st.migrate(
        Subnet {
            rows: vec![4, 5, 6, 7],
            cols: vec![4, 5, 6, 7],
        },
        false,
    );
    assert!(disjoint
        .m
        .data()
        .iter()
        .chain(disjoint.v.data())
        .all(|&x| x == 0.0));
    let reset = st.migrate(old, true);
    assert!(reset.counts.iter().all(|&c| c == 0));
}

#[test]
fn pro_gradient_equals_sliced_full_gradient() {
    for seed in 0..100 {
        let mut r = rng(500 + seed);
        let (n, m, b) = (
            r.random_range(2..12),
            r.random_range(2..12),
            r.random_range(1..6),
        );
        let p = RankFactor::uniform(0.5).unwrap();
        let (a, c) = p.budget(n, m).unwrap();
        let s = random_subnet(n, m, a, c, &mut r);
        let x = DenseMatrix::random_normal(b, n, 1.0, &mut r);
        let dy = DenseMatrix::random_normal(b, m, 1.0, &mut r);
        let (mut macs_full, mut macs_pro) = (0, 0);
        let full = full_grad_path(&x, &dy, &mut macs_full).unwrap();
        let x_s = x.select_cols(&s.rows).unwrap();
        let block = losia_pro_grad(&x_s, &dy, &s, &mut macs_pro).unwrap();
        let pre_sliced =
            losia_pro_grad(&x_s, &dy.select_cols(&s.cols).unwrap(), &s, &mut 0).unwrap();
        let oracle = full.select_block(&s.rows, &s.cols).unwrap();
        assert!(block.max_abs_diff(&oracle) <= 1e-12, "seed {seed}");
        assert_eq!(block, pre_sliced);
        assert_eq!(macs_full, (b * n * m) as u64);
        assert_eq!(macs_pro, (b * a * c) as u64);
    }
    let s = Subnet {
        rows: vec![0, 1, 2, 3],
        cols: vec![4, 5, 6, 7],
    };
    let g = losia_pro_grad(
        &DenseMatrix::zeros(3, 4),
        &DenseMatrix::zeros(3, 8),
        &s,
        &mut 0,
    )
    .unwrap();
    assert_eq!(g, DenseMatrix::zeros(4, 4));
    assert!(losia_pro_grad(
        &DenseMatrix::zeros(3, 5),
        &DenseMatrix::zeros(3, 8),
        &s,
        &mut 0
    )
    .is_err());
}

#[test]
fn full_path_hand_cases() {
    let dy = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
    assert_eq!(
        full_grad_path(&DenseMatrix::identity(2), &dy, &mut 0).unwrap(),
        dy
    );
    let x = DenseMatrix::from_rows(&[[2.0, -1.0, 0.5]]);
    let d = DenseMatrix::from_rows(&[[3.0, 4.0]]);
    let g = full_grad_path(&x, &d, &mut 0).unwrap();
    assert_eq!(
        g,
        DenseMatrix::from_rows(&[[6.0, 8.0], [-3.0, -4.0], [1.5, 2.0]])
    );
}
