//! Cross-module invariants checked with randomized inputs.

use std::collections::BTreeMap;

use proptest::prelude::*;

use glyco::eval::{mae, rmse};
use glyco::features::{
    build_channels, effective_carbs, effective_insulin, weighted_steps, FeatureParams,
    GlucoseSource,
};
use glyco::ingest::{
    align_to_grid, parse_csv, parse_ohio_xml, segment_contiguous, CsvSchema, EventKind,
    EventStream, GriddedSeries, PatientDataset, SplitTag, Timestamp,
};
use glyco::kalman::{default_glucose_model, run_filter, rts_smooth, smooth_cgm};
use glyco::nn::{init_params, stacked_forward, Mode, NetConfig};
use glyco::train::{make_windows, predict, split_train_val, train, TrainConfig};

fn dataset_with(streams: Vec<EventStream>) -> PatientDataset {
    let mut map = BTreeMap::new();
    for s in streams {
        map.insert(s.kind, s);
    }
    PatientDataset { patient_id: "prop".into(), streams: map, split_tag: SplitTag::Train }
}

fn cgm_stream(n_slots: usize) -> EventStream {
    EventStream::from_records(
        EventKind::Cgm,
        (0..n_slots).map(|i| (Timestamp(i as i64 * 5), 100.0 + i as f64)).collect(),
    )
}

// --- ingest ---

proptest! {
    #[test]
    fn gridding_round_trips_on_grid_values(values in prop::collection::vec(40.0..400.0f64, 1..50)) {
        let ds = dataset_with(vec![EventStream::from_records(
            EventKind::Cgm,
            values.iter().enumerate().map(|(i, v)| (Timestamp(i as i64 * 5), *v)).collect(),
        )]);
        let grid = &align_to_grid(&ds)[&EventKind::Cgm];
        prop_assert_eq!(grid.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            prop_assert_eq!(grid.values[i], Some(*v));
        }
    }

    #[test]
    fn gridding_conserves_bolus_mass(
        n_slots in 2usize..60,
        events in prop::collection::vec((0i64..600, 0.1..20.0f64), 1..30),
    ) {
        let ds = dataset_with(vec![
            cgm_stream(n_slots),
            EventStream::from_records(
                EventKind::Bolus,
                events.iter().map(|&(m, d)| (Timestamp(m), d)).collect(),
            ),
        ]);
        // dedup in from_records means the stream, not the raw list, is the
        // reference mass
        let stream_mass: f64 = ds.streams[&EventKind::Bolus].events.iter().map(|(_, d)| d).sum();
        let grid = &align_to_grid(&ds)[&EventKind::Bolus];
        let grid_mass: f64 = grid.values.iter().flatten().sum();
        prop_assert!((stream_mass - grid_mass).abs() < 1e-9 * stream_mass.max(1.0));
    }

    #[test]
    fn segments_are_monotone_and_disjoint(
        present in prop::collection::vec(any::<bool>(), 1..80),
        max_gap in 0usize..4,
    ) {
        let g = GriddedSeries {
            start: Timestamp(0),
            values: present.iter().map(|p| p.then_some(100.0)).collect(),
        };
        let segs = segment_contiguous(&g, max_gap);
        let mut prev_end = 0usize;
        for (i, &(off, len)) in segs.iter().enumerate() {
            prop_assert!(len >= 1);
            if i > 0 {
                prop_assert!(off > prev_end);
            }
            // runs start and end on present slots
            prop_assert_eq!(present[off], true);
            prop_assert_eq!(present[off + len - 1], true);
            prev_end = off + len;
        }
    }

    #[test]
    fn csv_parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        let _ = parse_csv(&bytes, &CsvSchema::default());
    }

    #[test]
    fn csv_parser_is_total_on_texty_input(s in "[ -~\n,]{0,300}") {
        let _ = parse_csv(s.as_bytes(), &CsvSchema::default());
    }

    #[test]
    fn xml_parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        let _ = parse_ohio_xml(&bytes);
    }

    #[test]
    fn xml_parser_is_total_on_markupish_input(s in "[<>/a-z \"=0-9\n]{0,300}") {
        let _ = parse_ohio_xml(s.as_bytes());
    }
}

// --- kalman ---

fn series_strategy() -> impl Strategy<Value = GriddedSeries> {
    prop::collection::vec(prop::option::weighted(0.8, 60.0..300.0f64), 1..40).prop_map(|values| {
        GriddedSeries { start: Timestamp(0), values }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smoothing_reduces_variance_and_keeps_symmetry(g in series_strategy()) {
        prop_assume!(g.values.iter().any(Option::is_some));
        let model = default_glucose_model(0.01, 25.0, &g);
        let fr = run_filter(&model, &g, None).unwrap();
        for step in &fr.steps {
            for m in [&step.prior_cov, &step.post_cov] {
                let asym = (m - m.transpose()).abs().max();
                prop_assert!(asym <= 1e-12);
            }
        }
        let sm = rts_smooth(&model, &fr).unwrap();
        for (k, step) in fr.steps.iter().enumerate() {
            let filtered = (&model.h * &step.post_cov * model.h.transpose())[(0, 0)];
            prop_assert!(
                sm.variance[k] <= filtered + 1e-12,
                "slot {}: smoothed {} > filtered {}", k, sm.variance[k], filtered
            );
            prop_assert!(sm.mean[k].is_finite());
        }
    }

    #[test]
    fn deleting_a_measurement_stays_finite(
        g in series_strategy(),
        idx in 0usize..40,
    ) {
        prop_assume!(g.values.iter().filter(|v| v.is_some()).count() >= 2);
        let mut gapped = g.clone();
        let present: Vec<usize> = (0..g.len()).filter(|&i| g.values[i].is_some()).collect();
        gapped.values[present[idx % present.len()]] = None;
        let sm = smooth_cgm(&gapped, 0.01, 25.0).unwrap();
        for k in 0..sm.mean.len() {
            prop_assert!(sm.mean[k].is_finite() && sm.variance[k].is_finite());
        }
    }

    #[test]
    fn constant_series_smooths_to_itself(c in 60.0..300.0f64, n in 1usize..30) {
        let g = GriddedSeries { start: Timestamp(0), values: vec![Some(c); n] };
        let sm = smooth_cgm(&g, 0.01, 25.0).unwrap();
        for m in &sm.mean {
            prop_assert!((m - c).abs() < 1e-9, "mean {} vs {}", m, c);
        }
    }
}

// --- features ---

fn impulse_list() -> impl Strategy<Value = Vec<(i64, f64)>> {
    prop::collection::vec((0i64..80, 0.5..80.0f64), 0..8)
}

proptest! {
    #[test]
    fn carb_and_insulin_superpose(a in impulse_list(), b in impulse_list(), t in 0i64..120) {
        let p = FeatureParams::default();
        let mut joined = a.clone();
        joined.extend_from_slice(&b);
        let sum_c = effective_carbs(&a, t, &p) + effective_carbs(&b, t, &p);
        prop_assert!((effective_carbs(&joined, t, &p) - sum_c).abs() < 1e-9);
        let sum_i = effective_insulin(&a, t, &p) + effective_insulin(&b, t, &p);
        prop_assert!((effective_insulin(&joined, t, &p) - sum_i).abs() < 1e-9);
    }

    #[test]
    fn future_events_do_not_affect_the_present(
        a in impulse_list(),
        t in 0i64..60,
        future_mass in 0.5..50.0f64,
    ) {
        let p = FeatureParams::default();
        let mut with_future = a.clone();
        with_future.push((t + 1, future_mass));
        prop_assert_eq!(effective_carbs(&a, t, &p), effective_carbs(&with_future, t, &p));
        prop_assert_eq!(effective_insulin(&a, t, &p), effective_insulin(&with_future, t, &p));
    }

    #[test]
    fn channels_are_non_negative(
        meals in impulse_list(),
        boluses in impulse_list(),
        steps in prop::collection::vec(prop::option::of(0.0..3000.0f64), 1..60),
        t in 0i64..120,
    ) {
        let p = FeatureParams::default();
        prop_assert!(effective_carbs(&meals, t, &p) >= 0.0);
        prop_assert!(effective_insulin(&boluses, t, &p) >= 0.0);
        let steps = GriddedSeries { start: Timestamp(0), values: steps };
        prop_assert!(weighted_steps(&steps, t, &p) >= 0.0);
    }

    #[test]
    fn carb_curve_is_continuous_at_the_peak(c_meal in 1.0..150.0f64) {
        let p = FeatureParams::default();
        let meal = [(0i64, c_meal)];
        let peak = p.peak_offset_slots as i64;
        let jump = (effective_carbs(&meal, peak + 1, &p) - effective_carbs(&meal, peak, &p)).abs();
        let bound = c_meal * p.beta_dec + c_meal * (1.0 - 9.0 * p.beta_inc);
        prop_assert!(jump <= bound + 1e-12);
    }

    #[test]
    fn insulin_decays_to_exactly_zero(dose in 0.5..25.0f64, extra in 0i64..50) {
        let p = FeatureParams::default();
        let horizon = (dose / p.r_insulin).ceil() as i64;
        let bolus = [(0i64, dose)];
        prop_assert_eq!(effective_insulin(&bolus, horizon + extra, &p), 0.0);
    }
}

// --- nn ---

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_sigma2_is_positive_and_deterministic(
        seed in any::<u64>(),
        window in prop::collection::vec(
            prop::collection::vec(-3.0..3.0f64, 4), 1..8),
    ) {
        let cfg = NetConfig {
            input_channels: 4,
            hidden: 4,
            num_lstm_layers: 2,
            dense1: 8,
            dense2: 4,
            dropout_rate: 0.2,
        };
        let params = init_params(&cfg, seed);
        let (mu, s2, _) = stacked_forward(&params, &window, Mode::Eval).unwrap();
        prop_assert!(s2 > 0.0);
        prop_assert!(mu.is_finite());
        let (mu2, s2b, _) = stacked_forward(&params, &window, Mode::Eval).unwrap();
        prop_assert_eq!(mu.to_bits(), mu2.to_bits());
        prop_assert_eq!(s2.to_bits(), s2b.to_bits());
        // train mode with a fixed mask seed is equally deterministic
        let (m1, v1, _) = stacked_forward(&params, &window, Mode::Train { mask_seed: 9 }).unwrap();
        let (m2, v2, _) = stacked_forward(&params, &window, Mode::Train { mask_seed: 9 }).unwrap();
        prop_assert_eq!(m1.to_bits(), m2.to_bits());
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
    }
}

// --- train / eval ---

fn tiny_block(n: usize, gap_at: Option<usize>) -> glyco::features::ChannelBlock {
    let mut glucose: Vec<Option<f64>> =
        (0..n).map(|i| Some(120.0 + 15.0 * (i as f64 * 0.3).sin())).collect();
    if let Some(g) = gap_at {
        if g < n {
            glucose[g] = None;
        }
    }
    glyco::features::ChannelBlock {
        start: Timestamp(0),
        glucose,
        c_eff: vec![0.0; n],
        i_eff: vec![0.0; n],
        s_avg: vec![0.0; n],
        source: GlucoseSource::Raw,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_never_leaks(n in 20usize..120, gap_at in prop::option::of(0usize..120)) {
        let cfg = TrainConfig { history_slots: 5, ph_slots: 3, ..TrainConfig::default() };
        let block = tiny_block(n, gap_at);
        let windows = make_windows(&block, &cfg);
        prop_assume!(windows.len() >= 2);
        // windows never span gaps: every input slot and the target present
        for w in &windows {
            prop_assert_eq!(w.inputs.len(), cfg.history_slots);
            for (i, row) in w.inputs.iter().enumerate() {
                let slot = w.t_anchor + 1 - cfg.history_slots + i;
                prop_assert_eq!(Some(row[0]), block.glucose[slot]);
            }
            prop_assert_eq!(Some(w.target), block.glucose[w.t_anchor + cfg.ph_slots]);
        }
        let (tr, va) = split_train_val(windows, 0.2).unwrap();
        let max_train = tr.iter().map(|w| w.t_anchor).max().unwrap();
        let min_val = va.iter().map(|w| w.t_anchor).min().unwrap();
        prop_assert!(min_val > max_train);
    }

    #[test]
    fn metric_identities(
        residual_pairs in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..40),
        scale in -4.0..4.0f64,
    ) {
        let a: Vec<f64> = residual_pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = residual_pairs.iter().map(|p| p.1).collect();
        let r = rmse(&a, &b).unwrap();
        let m = mae(&a, &b).unwrap();
        prop_assert!((r - rmse(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((m - mae(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(r >= m - 1e-12);
        prop_assert!(m >= 0.0);
        // scaling residuals scales both metrics by |c|
        let sa: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y + scale * (x - y)).collect();
        prop_assert!((rmse(&sa, &b).unwrap() - scale.abs() * r).abs() < 1e-9 * (1.0 + r));
        prop_assert!((mae(&sa, &b).unwrap() - scale.abs() * m).abs() < 1e-9 * (1.0 + m));
    }
}

#[test]
fn checkpoint_round_trip_predictions_are_bit_identical() {
    let block = tiny_block(80, None);
    let cfg = TrainConfig {
        history_slots: 6,
        ph_slots: 3,
        hidden: 6,
        dense1: 12,
        dense2: 6,
        max_epochs: 3,
        patience: 5,
        ..TrainConfig::default()
    };
    let windows = make_windows(&block, &cfg);
    let (tr, va) = split_train_val(windows, 0.2).unwrap();
    let ckpt = train(&tr, &va, &cfg, &FeatureParams::default()).unwrap();
    let before = predict(&ckpt, &block).unwrap();
    let restored = glyco::checkpoint::from_bytes(&glyco::checkpoint::to_bytes(&ckpt)).unwrap();
    let after = predict(&restored, &block).unwrap();
    assert_eq!(before.len(), after.len());
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.t_anchor, b.t_anchor);
        assert_eq!(a.mu.to_bits(), b.mu.to_bits());
        assert_eq!(a.sigma2.to_bits(), b.sigma2.to_bits());
    }
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let block = tiny_block(120, None);
    let cfg = TrainConfig {
        history_slots: 6,
        ph_slots: 3,
        hidden: 6,
        dense1: 12,
        dense2: 6,
        max_epochs: 20,
        patience: 3,
        ..TrainConfig::default()
    };
    let windows = make_windows(&block, &cfg);
    let (tr, va) = split_train_val(windows, 0.2).unwrap();
    let ckpt = train(&tr, &va, &cfg, &FeatureParams::default()).unwrap();
    let best_seen = ckpt.history.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    // kept parameters reproduce the best validation NLL seen in history
    let normalizer = &ckpt.normalizer;
    let val_set: Vec<(Vec<Vec<f64>>, f64)> =
        va.iter().map(|w| normalizer.normalize_window(w)).collect();
    let mut total = 0.0;
    for (w, y) in &val_set {
        let (mu, s2, _) = stacked_forward(&ckpt.params, w, Mode::Eval).unwrap();
        total += glyco::nn::nll_loss(mu, s2, *y).unwrap();
    }
    let kept = total / val_set.len() as f64;
    assert!(
        (kept - best_seen).abs() < 1e-9,
        "kept params NLL {kept} vs best history {best_seen}"
    );
}

#[test]
fn full_pipeline_channels_align() {
    // synth -> csv -> parse -> grid -> smooth -> channels -> windows
    let out = glyco::synth::generate(&glyco::synth::SynthConfig {
        days: 2,
        seed: 13,
        ..Default::default()
    })
    .unwrap();
    let csv = glyco::synth::to_ingest_csv(&out.dataset);
    let ds = parse_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
    let grids = align_to_grid(&ds);
    let raw = grids[&EventKind::Cgm].clone();
    let sm = smooth_cgm(&raw, 0.01, 25.0).unwrap();
    let block = build_channels(&grids, GlucoseSource::Smoothed, Some(&sm), &FeatureParams::default())
        .unwrap();
    assert_eq!(block.len(), raw.len());
    assert!(block.glucose.iter().all(Option::is_some));
    assert!(block.c_eff.iter().all(|v| *v >= 0.0));
    assert!(block.i_eff.iter().all(|v| *v >= 0.0));
    assert!(block.s_avg.iter().all(|v| *v >= 0.0));
}
