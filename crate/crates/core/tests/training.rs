use tridetect::metrics::auc;
use tridetect::trainer::HISTORY_HEADER;
use tridetect::{evaluate, make_synthetic, train, Config, SyntheticSpec};

#[test]
fn binary_only_training_separates_held_out_data_in_five_epochs() {
    let ds = make_synthetic(&SyntheticSpec {
        separation: 6.0,
        seed: 12,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (train_set, held_out) = ds.split(0.2, 12);
    let mut cfg = Config::default();
    cfg.epochs = 5;
    cfg.loss.beta = 1.0;
    cfg.loss.omega1 = 0.0;
    cfg.loss.omega2 = 0.0;
    let state = train(&train_set, &cfg, None).unwrap();
    let ev = evaluate(&state.model, &held_out).unwrap();
    let a = auc(&ev.samples).unwrap();
    assert!(a >= 0.99, "held-out auc {a}");
}

#[test]
fn default_operating_point_logs_every_series() {
    let ds = make_synthetic(&SyntheticSpec {
        n_real: 600,
        n_fake_gan: 300,
        n_fake_dm: 300,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = Config::default();
    let state = train(&ds, &cfg, None).unwrap();
    let csv = state.history_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(HISTORY_HEADER));
    let steps_per_epoch = ds.len().div_ceil(cfg.batch_size);
    assert_eq!(lines.count(), cfg.epochs * steps_per_epoch);
    assert_eq!(state.epochs.len(), cfg.epochs);
    for r in &state.history {
        let rep = r.report;
        for v in [rep.binary, rep.assignment, rep.consistency, rep.cluster, rep.total] {
            assert!(v.is_finite() && v >= 0.0);
        }
        assert!((rep.cluster - (rep.assignment + 0.1 * rep.consistency)).abs() <= 1e-12);
        assert!((rep.total - (0.7 * rep.binary + 0.3 * rep.cluster)).abs() <= 1e-12);
    }
    let first = state.epochs.first().unwrap().median_total;
    let last = state.epochs.last().unwrap().median_total;
    assert!(last < first, "median total went from {first} to {last}");
}
