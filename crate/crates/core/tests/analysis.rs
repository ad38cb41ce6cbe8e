use merge_gate_core::analysis::*;
use merge_gate_core::data::{collate, gen_simple_vowel, ByteVocab};
use merge_gate_core::model::{DeletionMode, ForwardOptions, Model, ModelConfig};

#[test]
fn bpb_examples() {
    assert_eq!(bits_per_byte(0.0), 0.0);
    assert!((bits_per_byte(std::f64::consts::LN_2) - 1.0).abs() < 1e-15);
    assert!((bits_per_byte(0.7919) - 1.1425).abs() < 1e-4);
}

// the printed formulas, evaluated term by term with fresh names
fn spreadsheet(ne: f64, nd: f64, d: f64, dff: f64, le: f64, ld: f64, lg: f64, delta: f64) -> (f64, f64) {
    let r = 1.0 - delta;
    let enc_after = (le - lg) * r * (4.0 * ne * d * d + 2.0 * ne * ne * d * r + ne * d * dff);
    let enc_before = lg * (4.0 * ne * d * d + 2.0 * ne * ne * d + ne * d * dff);
    let self_attn = 4.0 * nd * d * d + 2.0 * nd * nd * d;
    let ff = nd * d * dff;
    let cross = 2.0 * ne * r * d * d + 2.0 * nd * d * d + 2.0 * r * ne * nd * d;
    (enc_after + enc_before, ld * (self_attn + ff + cross))
}

#[test]
fn macs_match_independent_evaluation() {
    let c = MacsConfig::small();
    for delta in [0.0, 0.25, 0.5, 0.9] {
        let r = macs_total(&MacsConfig { delta, ..c }).unwrap();
        let (e, d) = spreadsheet(1024.0, 189.0, 1472.0, 3584.0, 12.0, 4.0, 3.0, delta);
        let (e0, d0) = spreadsheet(1024.0, 189.0, 1472.0, 3584.0, 12.0, 4.0, 3.0, 0.0);
        assert!((r.encoder - e).abs() / e < 1e-12);
        assert!((r.decoder - d).abs() / d < 1e-12);
        assert!((r.reduction - (e + d) / (e0 + d0)).abs() < 1e-12);
    }
    assert_eq!(macs_total(&c).unwrap().reduction, 1.0);
}

#[test]
fn gate_at_last_layer_saves_nothing_in_encoder() {
    let c = MacsConfig { l_g: 12, delta: 1.0, ..MacsConfig::small() };
    let full = macs_total(&MacsConfig { delta: 0.0, ..c }).unwrap();
    assert_eq!(macs_total(&c).unwrap().encoder, full.encoder);
}

#[test]
fn curve_is_monotone_and_bounded() {
    let grid = delta_grid(0.9, 0.05);
    assert_eq!(grid.len(), 19);
    let rows = compute_reduction_curve(&MacsConfig::small(), &grid).unwrap();
    assert_eq!(rows[0].reduction, 1.0);
    for w in rows.windows(2) {
        assert!(w[1].reduction <= w[0].reduction);
    }
    assert!(rows.iter().all(|r| 1.0 / r.reduction < 3.5));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("curve.csv");
    write_curve_csv(&p, &rows).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next(), Some("delta,encoder_macs,decoder_macs,reduction"));
    assert_eq!(text.lines().count(), 20);
}

#[test]
fn macs_rejects_bad_configs() {
    assert!(macs_total(&MacsConfig { l_g: 13, ..MacsConfig::small() }).is_err());
    assert!(macs_total(&MacsConfig { delta: 1.5, ..MacsConfig::small() }).is_err());
}

#[test]
fn correlation_examples() {
    let line: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
    assert!((fisher_avg_correlation(&[line.clone(), line]).unwrap() - 1.0).abs() < 1e-12);

    // two groups with r = 0.5 and r = -0.5
    let pos = vec![(0.0, 0.0), (1.0, 1.0), (2.0, -1.0), (3.0, 2.0)];
    let r = pearson(&pos).unwrap();
    let neg: Vec<(f64, f64)> = pos.iter().map(|&(x, y)| (x, -y)).collect();
    assert!((fisher_avg_correlation(&[pos.clone(), neg]).unwrap()).abs() < 1e-12);
    assert!(r > 0.0);

    let with_r = |target: f64| -> Vec<(f64, f64)> {
        // x = (-1, 0, 1), y = x·target + e·sqrt(1-target²) with e orthogonal to x
        let s = (1.0 - target * target).sqrt();
        let e = [1.0, -2.0, 1.0];
        let x = [-1.0, 0.0, 1.0];
        (0..3).map(|i| (x[i], x[i] * target * (6f64).sqrt() / 2f64.sqrt() + e[i] * s)).collect()
    };
    let (a, b) = (with_r(0.2), with_r(0.4));
    assert!((pearson(&a).unwrap() - 0.2).abs() < 1e-12);
    assert!((pearson(&b).unwrap() - 0.4).abs() < 1e-12);
    let want = ((0.2f64.atanh() + 0.4f64.atanh()) / 2.0).tanh();
    assert!((fisher_avg_correlation(&[a, b]).unwrap() - want).abs() < 1e-12);
}

#[test]
fn zero_variance_groups_are_skipped() {
    let flat = vec![(1.0, 2.0), (2.0, 2.0), (3.0, 2.0)];
    let good = vec![(1.0, 1.0), (2.0, 3.0), (3.0, 2.0)];
    let r = fisher_avg_correlation(&[flat.clone(), good.clone()]).unwrap();
    assert!((r - pearson(&good).unwrap()).abs() < 1e-12);
    assert!(fisher_avg_correlation(&[flat]).is_err());
    assert!(fisher_avg_correlation(&[vec![(1.0, 1.0), (2.0, 2.0)]]).is_err());
}

fn model(seed: u64) -> Model<f32> {
    Model::new(ModelConfig::tiny(ByteVocab::new(0).size()), seed).unwrap()
}

#[test]
fn untrained_model_is_near_chance() {
    let ex = gen_simple_vowel(5, 32);
    let r = eval_model(&model(1), &ex, DeletionMode::Soft, 16, 1).unwrap();
    assert!(r.token_acc < 5.0, "{}", r.token_acc);
    assert!((0.0..=100.0).contains(&r.seq_acc));
    assert!((r.bpb - bits_per_byte(r.ce)).abs() < 1e-12);
}

#[test]
fn none_mode_reports_zero_reduction() {
    let ex = gen_simple_vowel(5, 8);
    let r = eval_model(&model(1), &ex, DeletionMode::None, 8, 1).unwrap();
    assert_eq!(r.seq_len_reduction, 0.0);
    assert!(r.soft_hard_divergence.is_none());
}

#[test]
fn reports_are_deterministic() {
    let ex = gen_simple_vowel(6, 10);
    let m = model(2);
    let strip = |mut r: EvalReport| {
        r.runtime_ms = 0.0;
        r.runtime_ms_mean = 0.0;
        r.baseline_runtime_ms = 0.0;
        r.post_gate_ms = 0.0;
        r.baseline_post_gate_ms = 0.0;
        r
    };
    let a = strip(eval_model(&m, &ex, DeletionMode::Hard, 4, 1).unwrap());
    let b = strip(eval_model(&m, &ex, DeletionMode::Hard, 4, 1).unwrap());
    assert_eq!(a, b);
    assert!(eval_model(&m, &[], DeletionMode::Hard, 4, 1).is_err());
}

#[test]
fn sequence_accuracy_recount() {
    let ex = gen_simple_vowel(7, 100);
    let m = model(3);
    let r = eval_model(&m, &ex, DeletionMode::Hard, 25, 1).unwrap();
    let mut all_right = 0;
    let mut tok = 0.0;
    for chunk in ex.chunks(25) {
        let b = collate(chunk).unwrap();
        let (g, f) = m.run(&b, &ForwardOptions::new(DeletionMode::Hard)).unwrap();
        let s = score_batch(&g, f.dec.logits, &b);
        for i in 0..b.batch {
            all_right += usize::from(s.correct[i] == s.counted[i]);
            tok += s.correct[i] as f64 / s.counted[i] as f64;
        }
    }
    assert_eq!(r.seq_acc, all_right as f64);
    assert!((r.token_acc - tok).abs() < 1e-9);
    assert!(r.seq_acc <= 100.0);
}

#[test]
fn per_sample_pairs_cover_every_example() {
    let ex = gen_simple_vowel(8, 6);
    let pairs = per_sample_bpb_increase(&model(4), &ex, DeletionMode::Hard, 4).unwrap();
    assert_eq!(pairs.len(), 6);
    assert!(pairs.iter().all(|(a, b)| a.is_finite() && (0.0..=100.0).contains(b)));
}

#[test]
fn median_of_even_and_odd() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}
