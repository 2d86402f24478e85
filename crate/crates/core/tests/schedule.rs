use losia::schedule::{timeline_csv, BaseSchedule, LayerPhase, LrShape, ScheduleState};

fn sched(layers: usize, slot: u64, warmup: u64) -> ScheduleState {
    ScheduleState::new(slot, layers, warmup, BaseSchedule::constant(1.0)).unwrap()
}

#[test]
fn five_layer_example() {
    let s = sched(5, 100, 0).at(150);
    assert_eq!(s.phase_of(2).unwrap(), LayerPhase::Accumulate);
    assert_eq!(s.phase_of(1).unwrap(), LayerPhase::Rewarm);
    assert_eq!(s.lr_multiplier(1).unwrap(), 0.5);
    for l in [0, 3, 4] {
        assert_eq!(s.phase_of(l).unwrap(), LayerPhase::Idle);
    }
    assert!(s.phase_of(5).is_err());
}

#[test]
fn boundary_transition() {
    let before = sched(5, 100, 0).at(99);
    assert_eq!(before.phase_of(1).unwrap(), LayerPhase::Accumulate);
    let (after, changed) = before.advance();
    assert_eq!(after.t, 100);
    assert_eq!(after.phase_of(1).unwrap(), LayerPhase::ReselectNow);
    assert_eq!(after.lr_multiplier(1).unwrap(), 0.0);
    assert_eq!(after.phase_of(2).unwrap(), LayerPhase::Accumulate);
    assert!(changed.contains(&1) && changed.contains(&2));
    assert_eq!(after.at(101).phase_of(1).unwrap(), LayerPhase::Rewarm);
}

#[test]
fn no_rewarm_at_start() {
    let s = sched(3, 10, 0);
    for l in 0..3 {
        let f = s.flags(l).unwrap();
        assert!(!f.rewarm && !f.reselect);
        assert_eq!(s.lr_multiplier(l).unwrap(), 1.0);
    }
}

#[test]
fn exhaustive_sweep() {
    for (layers, slot) in [(5usize, 100u64), (3, 7), (1, 4)] {
        let warmup = 2 * slot + slot / 2;
        let base = sched(layers, slot, warmup);
        let mut last_reselect = vec![None::<u64>; layers];
        for t in slot..10 * layers as u64 * slot {
            let s = base.at(t);
            let acc = (0..layers)
                .filter(|&l| s.flags(l).unwrap().accumulate)
                .count();
            let win = (0..layers)
                .filter(|&l| s.flags(l).unwrap().rewarm_window)
                .count();
            assert_eq!((acc, win), (1, 1), "L={layers} T={slot} t={t}");
            for l in 0..layers {
                let f = s.flags(l).unwrap();
                let mult = s.lr_multiplier(l).unwrap();
                if f.reselect {
                    assert_eq!(t % slot, 0);
                    if let Some(prev) = last_reselect[l] {
                        assert_eq!(t - prev, layers as u64 * slot);
                    }
                    last_reselect[l] = Some(t);
                }
                if t <= warmup {
                    assert_eq!(mult, 1.0);
                } else if f.rewarm_window {
                    let into = t % slot;
                    assert_eq!(mult, into as f64 / slot as f64);
                    if into == 0 {
                        assert_eq!(mult, 0.0);
                    }
                } else {
                    assert_eq!(mult, 1.0);
                }
                assert!(!(mult < 1.0) || (f.rewarm && t > warmup));
            }
        }
        assert!(last_reselect.iter().all(Option::is_some));
    }
}

#[test]
fn ramp_reaches_one_at_slot_end() {
    let s = sched(2, 8, 0);
    // Layer 1 rewarms over slot 1 = [8, 16); the step after the slot it is 1.
    assert_eq!(s.at(15).lr_multiplier(1).unwrap(), 7.0 / 8.0);
    assert_eq!(s.at(16).lr_multiplier(1).unwrap(), 1.0);
}

#[test]
fn single_layer_overlaps_accumulate_and_rewarm() {
    let s = sched(1, 4, 0);
    for t in 4..40 {
        let f = s.at(t).flags(0).unwrap();
        assert!(f.accumulate && f.rewarm_window, "t={t}");
        assert_eq!(f.reselect, t % 4 == 0);
    }
}

#[test]
fn advance_is_stateless() {
    let mut s = sched(4, 9, 5);
    for _ in 0..1000 {
        s = s.advance().0;
    }
    assert_eq!(s, sched(4, 9, 5).at(1000));
}

#[test]
fn synchronous_and_flat_variants() {
    let mut s = sched(3, 5, 0);
    s.synchronous = true;
    for t in 5..50 {
        let at = s.at(t);
        for l in 0..3 {
            let f = at.flags(l).unwrap();
            assert!(f.accumulate && f.rewarm_window);
            assert_eq!(f.reselect, t % 5 == 0);
        }
    }
    let mut flat = sched(3, 5, 0);
    flat.ramp = false;
    assert!((0..60).all(|t| (0..3).all(|l| flat.at(t).lr_multiplier(l).unwrap() == 1.0)));
}

#[test]
fn base_schedule_shapes() {
    let b = BaseSchedule {
        lr: 2.0,
        warmup: 10,
        total: 110,
        shape: LrShape::Cosine,
    };
    assert_eq!(b.lr(0), 0.0);
    assert_eq!(b.lr(5), 1.0);
    assert!((b.lr(10) - 2.0).abs() < 1e-12);
    assert!((b.lr(60) - 1.0).abs() < 1e-12);
    assert!(b.lr(109) < 0.01);
    let c = BaseSchedule {
        shape: LrShape::Constant,
        ..b
    };
    assert_eq!(c.lr(100), 2.0);
}

#[test]
fn invalid_parameters() {
    assert!(ScheduleState::new(0, 2, 0, BaseSchedule::constant(1.0)).is_err());
    assert!(ScheduleState::new(3, 0, 0, BaseSchedule::constant(1.0)).is_err());
}

#[test]
fn timeline_csv_layout() {
    let csv = timeline_csv(&sched(2, 3, 0), 7);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,layer,phase,multiplier");
    assert_eq!(lines.len(), 1 + 7 * 2);
    assert!(lines.contains(&"3,1,RESELECT_NOW,0"));
    assert!(lines.contains(&"6,0,RESELECT_NOW,0"));
}
