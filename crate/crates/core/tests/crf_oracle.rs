mod common;

use common::{all_sequences, brute_log_z, crf_score, random_logits, random_tables};
use measx_core::crf::{log_partition, nll, sequence_score, viterbi, Constraints};
use measx_core::netcore::rng;
use rand::Rng as _;

#[test]
fn partition_and_viterbi_match_enumeration() {
    let mut r = rng(2024);
    for _ in 0..200 {
        let n = r.gen_range(1..=6);
        let k = r.gen_range(1..=4);
        let t = random_tables(&mut r, k);
        let l = random_logits(&mut r, n, k);
        let seqs = all_sequences(n, k);
        let scores: Vec<f64> = seqs.iter().map(|y| crf_score(&t, &l, y)).collect();
        let lz = log_partition(&t.view(), &l).unwrap();
        assert!((lz - brute_log_z(&scores)).abs() < 1e-8);
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (path, score) = viterbi(&t.view(), &l, None).unwrap();
        assert!((crf_score(&t, &l, &path) - best).abs() < 1e-9);
        assert!((score - best).abs() < 1e-9);
        let y = &seqs[r.gen_range(0..seqs.len())];
        assert!((sequence_score(&t.view(), &l, y).unwrap() - crf_score(&t, &l, y)).abs() < 1e-12);
    }
}

#[test]
fn nll_is_log_z_minus_gold_score() {
    let mut r = rng(5);
    for _ in 0..50 {
        let n = r.gen_range(1..=5);
        let t = random_tables(&mut r, 3);
        let l = random_logits(&mut r, n, 3);
        let gold: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
        let scores: Vec<f64> = all_sequences(n, 3).iter().map(|y| crf_score(&t, &l, y)).collect();
        let (loss, _) = nll(&t.view(), &l, &gold).unwrap();
        assert!((loss - (brute_log_z(&scores) - crf_score(&t, &l, &gold))).abs() < 1e-8);
        assert!(loss >= -1e-12);
    }
}

#[test]
fn constrained_decode_is_valid_iob_and_optimal_among_valid() {
    let mut r = rng(6);
    let c = Constraints::iob();
    for _ in 0..100 {
        let n = r.gen_range(1..=6);
        let t = random_tables(&mut r, 3);
        let l = random_logits(&mut r, n, 3);
        let valid = |y: &[usize]| y[0] != 2 && y.windows(2).all(|w| !(w[0] == 0 && w[1] == 2));
        let best = all_sequences(n, 3)
            .iter()
            .filter(|y| valid(y))
            .map(|y| crf_score(&t, &l, y))
            .fold(f64::NEG_INFINITY, f64::max);
        let (path, _) = viterbi(&t.view(), &l, Some(&c)).unwrap();
        assert!(valid(&path));
        assert!((crf_score(&t, &l, &path) - best).abs() < 1e-9);
    }
}
