use std::collections::HashSet;

use memlab_core::data::{
    build_stream, count_frequency, count_in, sample_grammar_sequences, shuffle_sequence, verify_disjoint, Corpus, CorpusSpec, Injection,
    InjectionSchedule,
};
use memlab_core::tokens::{TokenSeq, TokenizerId};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, window: usize) -> Corpus {
    Corpus::synthetic(&CorpusSpec { n_windows: n, window, seed: 11, random_fraction: 0.05 }).unwrap()
}

fn lcs(a: &[u32], b: &[u32]) -> usize {
    let mut best = 0;
    let mut prev = vec![0usize; b.len() + 1];
    for &x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            if x == y {
                cur[j + 1] = prev[j] + 1;
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

#[test]
fn no_schedule_is_raw_corpus_order() {
    let c = corpus(60, 16);
    let stream = build_stream(&c, None, 3, 0).unwrap();
    let flat: Vec<TokenSeq> = stream.map(|b| b.unwrap().seqs).flatten().collect();
    assert_eq!(flat, c.sequences().to_vec());
}

#[test]
fn period_ten_offset_three() {
    let x = TokenSeq::bytes(vec![300; 16]);
    let inj = Injection::periodic(x, 10, 3);
    let steps: Vec<usize> = (0..100).filter(|&s| inj.fires_at(s)).collect();
    assert_eq!(steps, (0..10).map(|k| 3 + 10 * k).collect::<Vec<_>>());
    assert_eq!(inj.realized(100), 10);
}

#[test]
fn control_and_treatment_streams_differ_only_at_injections() {
    let c = corpus(2000, 8);
    let seqs: Vec<TokenSeq> = (0..3).map(|i| TokenSeq::bytes(vec![250 + i; 8])).collect();
    let sched = InjectionSchedule::uniform(seqs, 37, 8, 4).unwrap();
    let control = build_stream(&c, None, 2, 0).unwrap();
    let treatment = build_stream(&c, Some(&sched), 2, 0).unwrap();
    let mut diffs = Vec::new();
    for step in 0..1000 {
        let (a, b) = (control.batch_at(step).unwrap(), treatment.batch_at(step).unwrap());
        for slot in 0..2 {
            if a.seqs[slot] != b.seqs[slot] {
                diffs.push((step, slot));
            }
        }
    }
    let mut expected = Vec::new();
    for step in 0..1000 {
        for inj in sched.injections() {
            if inj.fires_at(step) {
                expected.push((step, inj.offset % 2));
            }
        }
    }
    assert_eq!(diffs, expected);
    assert_eq!(expected.len(), sched.realized_counts(1000).iter().sum::<usize>());
}

#[test]
fn stream_start_skips_whole_batches() {
    let c = corpus(100, 8);
    let a = build_stream(&c, None, 4, 5).unwrap();
    assert_eq!(a.batch_at(0).unwrap().seqs, c.sequences()[20..24].to_vec());
    assert_eq!(a.steps_available(), 20);
    assert!(a.batch_at(20).is_err());
}

#[test]
fn shuffled_bigrams_look_like_a_random_permutation() {
    let bigrams = |t: &[u32]| t.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>();
    let shared = |orig: &HashSet<(u32, u32)>, t: &[u32]| bigrams(t).iter().filter(|b| orig.contains(b)).count();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (i, x) in sample_grammar_sequences(6, 96, 5).into_iter().enumerate() {
        let s = shuffle_sequence(&x, i as u64);
        let mut a = x.tokens().to_vec();
        let mut b = s.tokens().to_vec();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        let orig: HashSet<_> = bigrams(x.tokens()).into_iter().collect();
        // expectation under uniform permutation, estimated independently
        let trials: Vec<f64> = (0..300)
            .map(|_| {
                let mut p = x.tokens().to_vec();
                p.shuffle(&mut rng);
                shared(&orig, &p) as f64
            })
            .collect();
        let mean = trials.iter().sum::<f64>() / trials.len() as f64;
        let sd = (trials.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / trials.len() as f64).sqrt();
        let got = shared(&orig, s.tokens()) as f64;
        assert!((got - mean).abs() <= 4.0 * sd + 1.0, "seq {i}: {got} shared vs {mean} ± {sd}");
        assert!(got < 0.5 * (x.len() - 1) as f64);
    }
}

#[test]
fn disjointness_examples() {
    let c = corpus(50, 24);
    let inside = c.sequences()[7].clone();
    let r = verify_disjoint(&inside, &c, 8);
    assert_eq!(r.longest, 24);
    assert!(!r.pass);
    let outside = TokenSeq::new(vec![256; 24], TokenizerId::BYTE);
    let r = verify_disjoint(&outside, &c, 8);
    assert_eq!((r.longest, r.pass), (0, true));
}

#[test]
fn frequency_counts_overlap() {
    assert_eq!(count_in(&[1, 1], &[1, 1, 1, 1]), 3);
    let c = Corpus::from_sequences(vec![TokenSeq::bytes(vec![1, 2, 3, 1]), TokenSeq::bytes(vec![2, 3, 2, 3])], 4, 0, TokenizerId::BYTE).unwrap();
    assert_eq!(count_frequency(&TokenSeq::bytes(vec![2, 3]), &c), 3);
    assert_eq!(count_frequency(&TokenSeq::bytes(vec![1, 2, 3, 1]), &c), 1);
    assert_eq!(count_frequency(&TokenSeq::bytes(vec![4]), &c), 0);
}

#[test]
fn disjointness_matches_brute_force_on_small_alphabets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let w = rng.gen_range(1..12);
        let n = rng.gen_range(1..6);
        let seqs: Vec<TokenSeq> = (0..n).map(|_| TokenSeq::bytes((0..w).map(|_| rng.gen_range(0..3)).collect())).collect();
        let c = Corpus::from_sequences(seqs.clone(), w, 0, TokenizerId::BYTE).unwrap();
        let x: Vec<u32> = (0..rng.gen_range(1..15)).map(|_| rng.gen_range(0..3)).collect();
        let want = seqs.iter().map(|s| lcs(&x, s.tokens())).max().unwrap();
        let thr = rng.gen_range(1..6);
        let r = verify_disjoint(&TokenSeq::bytes(x), &c, thr);
        assert_eq!(r.longest, want);
        assert_eq!(r.pass, want < thr);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn streams_are_deterministic(batch in 1usize..5, start in 0usize..10, period in 4usize..20, seed in 0u64..100) {
        let c = corpus(120, 8);
        let seqs: Vec<TokenSeq> = (0..3).map(|i| TokenSeq::bytes(vec![240 + i; 8])).collect();
        let sched = InjectionSchedule::uniform(seqs, period, 8, seed).unwrap();
        let a: Vec<_> = build_stream(&c, Some(&sched), batch, start).unwrap().map(Result::unwrap).collect();
        let b: Vec<_> = build_stream(&c, Some(&sched), batch, start).unwrap().map(Result::unwrap).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn shuffle_is_seed_deterministic(t in prop::collection::vec(0u32..30, 2..60), seed in any::<u64>()) {
        let x = TokenSeq::bytes(t);
        prop_assert_eq!(shuffle_sequence(&x, seed), shuffle_sequence(&x, seed));
    }
}
