use losia::localization::floor_count;
use losia::model::{Model, TaskKind};
use losia::train::{
    load_checkpoint, run_baseline_suite, run_continual, run_training, save_checkpoint,
    selection_frequency, Method, TrainConfig, Trainer,
};

fn small(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        p: 0.25,
        slot: 10,
        steps: 60,
        batch_size: 8,
        eval_batch_size: 32,
        lr: 3e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn dense_training_learns_copy() {
    let cfg = TrainConfig {
        task: TaskKind::Copy,
        method: Method::Fft,
        steps: 300,
        seed: 7,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let t = run_training(cfg.clone()).unwrap();
    let first = t.metrics().evals.first().unwrap().loss;
    let last = t.metrics().final_eval().unwrap().loss;
    let chance = (cfg.vocab as f64).ln();
    assert!(
        last < 0.5 * chance && last < first,
        "first {first}, last {last}, chance {chance}"
    );
}

#[test]
fn pro_variant_trains_bitwise_identically() {
    let a = run_training(small(Method::Losia)).unwrap();
    let b = run_training(small(Method::LosiaPro)).unwrap();
    assert!(a.model().params().bitwise_eq(b.model().params()));
    let losses = |t: &Trainer| {
        t.metrics()
            .steps
            .iter()
            .map(|s| s.loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&a), losses(&b));
    let bytes = |t: &Trainer| {
        t.metrics()
            .steps
            .iter()
            .map(|s| s.activation_bytes)
            .sum::<usize>()
    };
    assert!(bytes(&b) < bytes(&a));
}

#[test]
fn ramp_flag_controls_multipliers() {
    let ramped = run_training(small(Method::Losia)).unwrap();
    let flat = run_training(TrainConfig {
        wds_off: true,
        ..small(Method::Losia)
    })
    .unwrap();
    let all = |t: &Trainer| {
        t.metrics()
            .steps
            .iter()
            .flat_map(|s| s.multipliers.clone())
            .collect::<Vec<_>>()
    };
    assert!(all(&flat).iter().all(|&m| m == 1.0));
    assert!(all(&ramped).iter().any(|&m| m < 1.0));
}

#[test]
fn repeated_runs_share_a_digest() {
    for method in [Method::Losia, Method::Fft, Method::RandomSubnet] {
        let a = run_training(small(method)).unwrap();
        let b = run_training(small(method)).unwrap();
        assert_eq!(a.metrics().digest(), b.metrics().digest(), "{method}");
    }
    let other = run_training(TrainConfig {
        seed: 4,
        ..small(Method::Losia)
    })
    .unwrap();
    assert_ne!(
        other.metrics().digest(),
        run_training(small(Method::Losia))
            .unwrap()
            .metrics()
            .digest()
    );
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    for (method, stop) in [
        (Method::Losia, 25),
        (Method::LosiaPro, 30),
        (Method::StaticSubnet, 7),
    ] {
        let full = run_training(small(method)).unwrap();
        let mut part = Trainer::new(small(method)).unwrap();
        part.run_until(stop).unwrap();
        let path = dir.path().join(method.to_string());
        save_checkpoint(&part, &path).unwrap();
        drop(part);
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed.step_index(), stop);
        resumed.run().unwrap();
        assert!(
            resumed.model().params().bitwise_eq(full.model().params()),
            "{method}"
        );
        assert_eq!(
            resumed.metrics().digest(),
            full.metrics().digest(),
            "{method}"
        );
        assert!(resumed.audit().passed());
    }
}

#[test]
fn frozen_parameters_never_move() {
    for method in [
        Method::Losia,
        Method::StaticSubnet,
        Method::RandomSubnet,
        Method::Fft,
    ] {
        let t = run_training(small(method)).unwrap();
        let report = t.audit();
        assert!(
            report.passed(),
            "{method}: {:?}",
            &report.violations[..report.violations.len().min(5)]
        );
        assert!(report.changed > 0);
    }
}

#[test]
fn static_subnet_selects_each_layer_once() {
    let t = run_training(small(Method::StaticSubnet)).unwrap();
    let freq = selection_frequency(t.metrics());
    assert!(!freq.is_empty());
    for f in &freq {
        assert_eq!(f.events, 1, "{}", f.name);
        assert!(f.row_counts.values().all(|&c| c == 1));
        assert_eq!(f.row_gini(), 0.0);
    }
}

#[test]
fn every_selection_has_the_budgeted_size() {
    let t = run_training(small(Method::Losia)).unwrap();
    let model = t.model();
    let cfg = t.config();
    let mut scored = 0;
    for e in &t.metrics().selections {
        let spec = &model.linears()[e.linear];
        let (n, m) = model.params().get(spec.weight).shape();
        if spec.block.is_some() {
            assert_eq!(e.subnet.rows.len(), floor_count(n, cfg.p), "{}", e.name);
            assert_eq!(e.subnet.cols.len(), floor_count(m, cfg.p), "{}", e.name);
        } else {
            assert_eq!(e.subnet.rows.len(), n);
            assert_eq!(e.subnet.cols.len(), floor_count(m, cfg.p_o));
        }
        scored += usize::from(!e.initial);
    }
    assert!(scored > 0);
    for f in selection_frequency(t.metrics()) {
        assert!((0.0..1.0).contains(&f.row_gini()));
    }
}

#[test]
fn at_most_one_layer_holds_importance() {
    let t = run_training(small(Method::Losia)).unwrap();
    assert_eq!(t.metrics().max_live_importance, 1);
    let sync = run_training(TrainConfig {
        sl: true,
        ..small(Method::Losia)
    })
    .unwrap();
    assert_eq!(sync.metrics().max_live_importance, 2);
}

#[test]
fn suite_rows_are_reproducible() {
    let cfgs = [small(Method::Losia), small(Method::Losia)];
    let rows = run_baseline_suite(&cfgs, &[0, 1]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].final_loss, rows[1].final_loss);
    assert_eq!(rows[0].digests, rows[1].digests);
    assert_ne!(rows[0].digests[0], rows[0].digests[1]);
}

#[test]
fn continual_tables() {
    let one = run_continual(&[small(Method::Losia)]).unwrap();
    assert_eq!(one.matrix.rows().len(), 2);
    assert!(one.matrix.bwt().is_err());

    // Without learning every entry is the untrained model's accuracy.
    let frozen = TrainConfig {
        lr: 0.0,
        ..small(Method::Losia)
    };
    let two = run_continual(&[frozen.clone(), frozen]).unwrap();
    let m = &two.matrix;
    assert!(m.rows().iter().flatten().all(|&v| v == m.get(0, 0)));
    assert_eq!(m.bwt().unwrap(), 0.0);
    assert_eq!(m.fwt(), 0.0);
}
