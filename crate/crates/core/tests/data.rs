use merge_gate_core::data::*;
use proptest::prelude::*;

fn letters(ids: &[usize]) -> Vec<u8> {
    ByteVocab::new(0).decode(ids)
}

// reference filters, written independently of the generators
fn ref_simple(s: &[u8]) -> Vec<u8> {
    s.iter().copied().filter(|c| !b"aeiouAEIOU".contains(c)).collect()
}

fn ref_contextual(s: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for i in 0..s.len() {
        let vowel = b"aeiouAEIOU".contains(&s[i]);
        let after_lower_consonant = i > 0 && s[i - 1].is_ascii_lowercase() && !b"aeiou".contains(&s[i - 1]);
        if !(vowel && after_lower_consonant) {
            out.push(s[i]);
        }
    }
    out
}

fn ref_merge(s: &[u8]) -> Vec<u8> {
    String::from_utf8(s.to_vec()).unwrap().replace("ABC", "D").into_bytes()
}

#[test]
fn table_rows_map_to_targets() {
    assert_eq!(simple_vowel_rule(b"zEKRreJcBxGUJQbZSIos"), b"zKRrJcBxGJQbZSs");
    assert_eq!(contextual_vowel_rule(b"EOubXgaYVbiOgiIrEnld"), b"EOubXgYVbOgIrnld");
    assert_eq!(merge_rule(b"KjAxIpABCZCxBcniABCs"), b"KjAxIpDZCxBcniDs");
}

#[test]
fn trivial_inputs_are_unchanged() {
    assert_eq!(simple_vowel_rule(b"xyzQRT"), b"xyzQRT");
    assert_eq!(contextual_vowel_rule(b"ABEQUOT"), b"ABEQUOT");
    assert_eq!(merge_rule(b"ABxBCAB"), b"ABxBCAB");
}

#[test]
fn generated_targets_match_reference_filters() {
    for ex in gen_simple_vowel(1, 300) {
        assert_eq!(letters(&ex.target), ref_simple(&letters(&ex.input)));
    }
    for ex in gen_contextual_vowel(1, 300) {
        assert_eq!(letters(&ex.target), ref_contextual(&letters(&ex.input)));
    }
    for ex in gen_sequence_merge(1, 300) {
        assert_eq!(letters(&ex.target), ref_merge(&letters(&ex.input)));
    }
}

#[test]
fn framing_and_length() {
    for ex in gen_sequence_merge(4, 50).into_iter().chain(gen_contextual_vowel(4, 50)) {
        assert_eq!(ex.input.len(), 64);
        assert_eq!((ex.input[0], *ex.input.last().unwrap()), (BOS_ID, EOS_ID));
        assert_eq!((ex.target[0], *ex.target.last().unwrap()), (BOS_ID, EOS_ID));
        assert!(letters(&ex.input).iter().all(u8::is_ascii_alphabetic));
    }
}

#[test]
fn simple_vowel_rate() {
    let (mut v, mut n) = (0usize, 0usize);
    for ex in gen_simple_vowel(11, 10_000) {
        let l = letters(&ex.input);
        v += l.iter().filter(|&&c| is_vowel(c)).count();
        n += l.len();
    }
    let rate = v as f64 / n as f64;
    assert!((rate - 0.19).abs() < 0.01, "{rate}");
}

#[test]
fn contextual_removable_rate() {
    let (mut removed, mut n) = (0usize, 0usize);
    for ex in gen_contextual_vowel(12, 10_000) {
        removed += ex.input.len() - ex.target.len();
        n += ex.input.len() - 2;
    }
    let rate = removed as f64 / n as f64;
    assert!((rate - 0.18).abs() < 0.02, "{rate}");
}

#[test]
fn merge_count_mean() {
    let mut total = 0usize;
    for ex in gen_sequence_merge(13, 10_000) {
        let s = String::from_utf8(letters(&ex.input)).unwrap();
        total += s.matches("ABC").count();
    }
    let mean = total as f64 / 10_000.0;
    assert!((mean - 5.0).abs() < 0.3, "{mean}");
}

#[test]
fn ndjson_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ndjson");
    let b = dir.path().join("b.ndjson");
    write_ndjson(&a, &gen_simple_vowel(3, 20)).unwrap();
    write_ndjson(&b, &gen_simple_vowel(3, 20)).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_ndjson(&a).unwrap(), gen_simple_vowel(3, 20));
    let empty = dir.path().join("e.ndjson");
    write_ndjson(&empty, &[]).unwrap();
    assert!(read_ndjson(&empty).unwrap().is_empty());
}

#[test]
fn collate_pads_and_shifts() {
    let ex = vec![
        TaskExample { input: vec![2, 10, 11, 1], target: vec![2, 10, 1] },
        TaskExample { input: vec![2, 12, 1], target: vec![2, 1] },
    ];
    let b = collate(&ex).unwrap();
    assert_eq!((b.enc_len, b.dec_len), (4, 2));
    assert_eq!(b.enc_ids, vec![2, 10, 11, 1, 2, 12, 1, PAD_ID]);
    assert_eq!(b.enc_valid, vec![true, true, true, true, true, true, true, false]);
    assert_eq!(b.dec_ids, vec![2, 10, 2, PAD_ID]);
    assert_eq!(b.dec_targets, vec![Some(10), Some(1), Some(1), None]);
    assert!(collate(&[]).is_err());
}

#[test]
fn span_counts_at_default_density() {
    let vocab = ByteVocab::new(100);
    let bytes: Vec<u8> = (0..1000).map(|i| b'a' + (i % 26) as u8).collect();
    let ex = span_corrupt(&bytes, 0.15, 20.0, &vocab, 1).unwrap();
    let spans = ex.input.iter().filter(|&&t| vocab.is_sentinel(t)).count();
    let masked = ex.target.iter().filter(|&&t| byte_of(t).is_some()).count();
    assert_eq!(masked, 150);
    assert!((spans as f64 - 7.5).abs() <= 0.5, "{spans}");
    assert_eq!(reconstruct(&ex, &vocab), vocab.encode(&bytes));
}

#[test]
fn span_count_averages_noise_over_mean_length() {
    let mut rng = example_rng(5, 0);
    let (mut spans, mut noise, mut trials) = (0usize, 0usize, 0usize);
    for len in 900..1100 {
        let m = noise_mask(&mut rng, len, 0.15, 20.0, 99).unwrap();
        noise += m.iter().filter(|&&x| x).count();
        spans += (0..len).filter(|&i| m[i] && (i == 0 || !m[i - 1])).count();
        trials += 1;
    }
    let mean_span = noise as f64 / spans as f64;
    assert!((mean_span - 20.0).abs() < 1.0, "{mean_span}");
    assert!((spans as f64 / trials as f64 - 7.5).abs() < 0.5);
}

#[test]
fn short_inputs_get_one_minimal_span() {
    let vocab = ByteVocab::new(10);
    let ex = span_corrupt(b"abcd", 0.15, 20.0, &vocab, 2).unwrap();
    assert_eq!(ex.input.iter().filter(|&&t| vocab.is_sentinel(t)).count(), 1);
    assert_eq!(reconstruct(&ex, &vocab), vocab.encode(b"abcd"));
}

#[test]
fn span_task_from_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    std::fs::write(&path, "the quick brown fox jumps over the lazy dog. ".repeat(20)).unwrap();
    let spec = TaskSpec::SpanCorruption { corpus: path, chunk_len: 64, density: 0.15, mean_span: 3.0, sentinels: 20 };
    let task = Task::load(&spec).unwrap();
    assert_eq!(task.vocab().size(), 259 + 20);
    let a = task.examples(7, 0, 5).unwrap();
    assert_eq!(a, task.examples(7, 0, 5).unwrap());
    for ex in &a {
        assert_eq!(reconstruct(ex, &task.vocab()).len(), 64);
        assert_eq!(ex.target[0], BOS_ID);
    }
}

proptest! {
    #[test]
    fn span_corruption_round_trips(
        bytes in prop::collection::vec(any::<u8>(), 2..300),
        density in 0.05f64..0.6,
        mean_span in 1.0f64..25.0,
        seed in any::<u64>(),
    ) {
        let vocab = ByteVocab::new(100);
        let ex = span_corrupt(&bytes, density, mean_span, &vocab, seed).unwrap();
        prop_assert_eq!(reconstruct(&ex, &vocab), vocab.encode(&bytes));
        let sentinels: Vec<usize> = ex.target.iter().copied().filter(|&t| vocab.is_sentinel(t)).collect();
        prop_assert!(sentinels.windows(2).all(|w| w[1] == w[0] + 1));
        prop_assert_eq!(sentinels[0], FIRST_SENTINEL);
        prop_assert_eq!(*ex.input.last().unwrap(), EOS_ID);
    }

    #[test]
    fn generators_are_pure(seed in any::<u64>(), idx in 0u64..1000) {
        prop_assert_eq!(simple_vowel_example(seed, idx), simple_vowel_example(seed, idx));
        prop_assert_eq!(sequence_merge_example(seed, idx), sequence_merge_example(seed, idx));
    }
}
