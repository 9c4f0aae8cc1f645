//! Linear-chain CRF over per-token emission logits.
//!
//! The pairwise score of moving from tag `y'` to tag `y` at position `i > 0` is
//!
//! ```text
//! W_trans[y', y] * l_i[y] + b_trans[y', y]
//! ```
//!
//! so each tag pair carries its own weight on the current emission plus a
//! bias. The first position has no predecessor and is scored against the
//! start boundary instead: `W_start[y] * l_0[y] + start[y]`. The last tag
//! adds `end[y]`. With the boundary vectors at zero and `W_start` at zero the
//! first position contributes nothing.
//!
//! The normaliser is never stored; [`log_partition`] computes it with the
//! forward algorithm in log space.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{self, Mat};
use crate::netcore::{Gradients, Init, ParamId, ParamStore, Rng};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CrfError {
    #[error("logits have {found} columns, CRF has {expected} tags")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("sequence has {logits} positions but {tags} tags")]
    LengthMismatch { logits: usize, tags: usize },
    #[error("tag {tag} at position {position} out of range")]
    InvalidGold { position: usize, tag: usize },
    #[error("empty sequence")]
    EmptySequence,
}

/// Borrowed view of CRF parameters. All tables are row-major `num_tags x num_tags`.
#[derive(Debug, Clone, Copy)]
pub struct CrfWeights<'a> {
    pub num_tags: usize,
    pub w_trans: &'a [f64],
    pub b_trans: &'a [f64],
    pub w_start: &'a [f64],
    pub start: &'a [f64],
    pub end: &'a [f64],
}

/// Owned parameter set, convenient for tests and standalone use.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfTables {
    pub num_tags: usize,
    pub w_trans: Vec<f64>,
    pub b_trans: Vec<f64>,
    pub w_start: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfTables {
    pub fn zeros(num_tags: usize) -> Self {
        CrfTables {
            num_tags,
            w_trans: vec![0.0; num_tags * num_tags],
            b_trans: vec![0.0; num_tags * num_tags],
            w_start: vec![0.0; num_tags],
            start: vec![0.0; num_tags],
            end: vec![0.0; num_tags],
        }
    }

    pub fn view(&self) -> CrfWeights<'_> {
        CrfWeights {
            num_tags: self.num_tags,
            w_trans: &self.w_trans,
            b_trans: &self.b_trans,
            w_start: &self.w_start,
            start: &self.start,
            end: &self.end,
        }
    }
}

/// Which transitions decoding may use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraints {
    pub num_tags: usize,
    pub start_allowed: Vec<bool>,
    /// Row-major `from x to`.
    pub pair_allowed: Vec<bool>,
}

impl Constraints {
    pub fn none(num_tags: usize) -> Self {
        Constraints { num_tags, start_allowed: vec![true; num_tags], pair_allowed: vec![true; num_tags * num_tags] }
    }

    /// IOB with tag order `O, B, I`: forbids `O -> I` and `start -> I`.
    pub fn iob() -> Self {
        let mut c = Constraints::none(3);
        c.start_allowed[2] = false;
        c.pair_allowed[2] = false;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfConfig {
    /// Learn `start`/`end` boundary scores. When off they stay at zero.
    pub boundary_scores: bool,
    /// Mask IOB-invalid transitions during Viterbi decoding.
    pub constrained_decoding: bool,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig { boundary_scores: true, constrained_decoding: true }
    }
}

impl<'a> CrfWeights<'a> {
    #[inline]
    fn first(&self, l: &[f64], y: usize) -> f64 {
        self.w_start[y] * l[y] + self.start[y]
    }

    #[inline]
    fn pair(&self, l: &[f64], from: usize, to: usize) -> f64 {
        let k = from * self.num_tags + to;
        self.w_trans[k] * l[to] + self.b_trans[k]
    }

    fn check(&self, logits: &Mat) -> Result<(), CrfError> {
        if logits.rows == 0 {
            return Err(CrfError::EmptySequence);
        }
        if logits.cols != self.num_tags {
            return Err(CrfError::DimensionMismatch { expected: self.num_tags, found: logits.cols });
        }
        Ok(())
    }
}

/// Unnormalised log-score of one tag sequence.
pub fn sequence_score(w: &CrfWeights, logits: &Mat, tags: &[usize]) -> Result<f64, CrfError> {
    w.check(logits)?;
    if tags.len() != logits.rows {
        return Err(CrfError::LengthMismatch { logits: logits.rows, tags: tags.len() });
    }
    if let Some((position, &tag)) = tags.iter().enumerate().find(|(_, &t)| t >= w.num_tags) {
        return Err(CrfError::InvalidGold { position, tag });
    }
    let mut s = w.first(logits.row(0), tags[0]);
    for i in 1..tags.len() {
        s += w.pair(logits.row(i), tags[i - 1], tags[i]);
    }
    Ok(s + w.end[tags[tags.len() - 1]])
}

fn forward_table(w: &CrfWeights, logits: &Mat) -> Mat {
    let k = w.num_tags;
    let n = logits.rows;
    let mut alpha = Mat::zeros(n, k);
    for y in 0..k {
        alpha.set(0, y, w.first(logits.row(0), y));
    }
    let mut buf = vec![0.0; k];
    for i in 1..n {
        let l = logits.row(i);
        for y in 0..k {
            for (yp, b) in buf.iter_mut().enumerate() {
                *b = alpha.get(i - 1, yp) + w.pair(l, yp, y);
            }
            alpha.set(i, y, math::log_sum_exp(&buf));
        }
    }
    alpha
}

fn backward_table(w: &CrfWeights, logits: &Mat) -> Mat {
    let k = w.num_tags;
    let n = logits.rows;
    let mut beta = Mat::zeros(n, k);
    beta.row_mut(n - 1).copy_from_slice(w.end);
    let mut buf = vec![0.0; k];
    for i in (0..n - 1).rev() {
        let l = logits.row(i + 1);
        for yp in 0..k {
            for (y, b) in buf.iter_mut().enumerate() {
                *b = w.pair(l, yp, y) + beta.get(i + 1, y);
            }
            beta.set(i, yp, math::log_sum_exp(&buf));
        }
    }
    beta
}

fn final_lse(w: &CrfWeights, alpha: &Mat) -> f64 {
    let last = alpha.rows - 1;
    let xs: Vec<f64> = (0..w.num_tags).map(|y| alpha.get(last, y) + w.end[y]).collect();
    math::log_sum_exp(&xs)
}

/// `log Z`: log-sum-exp of [`sequence_score`] over every tag sequence.
pub fn log_partition(w: &CrfWeights, logits: &Mat) -> Result<f64, CrfError> {
    w.check(logits)?;
    Ok(final_lse(w, &forward_table(w, logits)))
}

/// Gradients of the negative log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGrads {
    pub logits: Mat,
    pub w_trans: Vec<f64>,
    pub b_trans: Vec<f64>,
    pub w_start: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// `log Z - score(gold)` and its exact gradient via forward-backward marginals.
pub fn nll(w: &CrfWeights, logits: &Mat, gold: &[usize]) -> Result<(f64, CrfGrads), CrfError> {
    let gold_score = sequence_score(w, logits, gold)?;
    let k = w.num_tags;
    let n = logits.rows;
    let alpha = forward_table(w, logits);
    let beta = backward_table(w, logits);
    let log_z = final_lse(w, &alpha);
    let mut g = CrfGrads {
        logits: Mat::zeros(n, k),
        w_trans: vec![0.0; k * k],
        b_trans: vec![0.0; k * k],
        w_start: vec![0.0; k],
        start: vec![0.0; k],
        end: vec![0.0; k],
    };
    let l0 = logits.row(0);
    for y in 0..k {
        let q = math::exp(alpha.get(0, y) + beta.get(0, y) - log_z) - (gold[0] == y) as u8 as f64;
        g.start[y] = q;
        g.w_start[y] = q * l0[y];
        g.logits.row_mut(0)[y] += q * w.w_start[y];
    }
    for i in 1..n {
        let l = logits.row(i);
        for yp in 0..k {
            let a = alpha.get(i - 1, yp);
            for y in 0..k {
                let idx = yp * k + y;
                let p = math::exp(a + w.pair(l, yp, y) + beta.get(i, y) - log_z);
                let q = p - (gold[i - 1] == yp && gold[i] == y) as u8 as f64;
                g.w_trans[idx] += q * l[y];
                g.b_trans[idx] += q;
                g.logits.row_mut(i)[y] += q * w.w_trans[idx];
            }
        }
    }
    for y in 0..k {
        g.end[y] = math::exp(alpha.get(n - 1, y) + w.end[y] - log_z) - (gold[n - 1] == y) as u8 as f64;
    }
    Ok((log_z - gold_score, g))
}

/// Highest-scoring tag sequence and its score. Ties go to the lowest tag
/// index at every backtracking step.
pub fn viterbi(w: &CrfWeights, logits: &Mat, constraints: Option<&Constraints>) -> Result<(Vec<usize>, f64), CrfError> {
    w.check(logits)?;
    let k = w.num_tags;
    let n = logits.rows;
    let start_ok = |y: usize| constraints.map_or(true, |c| c.start_allowed[y]);
    let pair_ok = |a: usize, b: usize| constraints.map_or(true, |c| c.pair_allowed[a * k + b]);
    let mut delta = Mat::zeros(n, k);
    let mut back = vec![0usize; n * k];
    for y in 0..k {
        let v = if start_ok(y) { w.first(logits.row(0), y) } else { f64::NEG_INFINITY };
        delta.set(0, y, v);
    }
    for i in 1..n {
        let l = logits.row(i);
        for y in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for yp in 0..k {
                if !pair_ok(yp, y) {
                    continue;
                }
                let v = delta.get(i - 1, yp) + w.pair(l, yp, y);
                if v > best {
                    best = v;
                    arg = yp;
                }
            }
            delta.set(i, y, best);
            back[i * k + y] = arg;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for y in 0..k {
        let v = delta.get(n - 1, y) + w.end[y];
        if v > best {
            best = v;
            last = y;
        }
    }
    let mut path = vec![0usize; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = back[i * k + path[i]];
    }
    Ok((path, best))
}

/// CRF parameters registered in a [`ParamStore`] under `crf/*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crf {
    pub num_tags: usize,
    pub w_trans: ParamId,
    pub b_trans: ParamId,
    pub w_start: ParamId,
    pub start: ParamId,
    pub end: ParamId,
    pub config: CrfConfig,
}

impl Crf {
    /// Emission weights start at one so the initial model behaves like a
    /// plain emission-plus-bias chain.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, num_tags: usize, config: CrfConfig) -> Self {
        let k = num_tags;
        Crf {
            num_tags,
            w_trans: store.add("crf/W_trans", &[k, k], Init::Constant(1.0), rng),
            b_trans: store.add("crf/b_trans", &[k, k], Init::Zeros, rng),
            w_start: store.add("crf/W_start", &[k], Init::Constant(1.0), rng),
            start: store.add("crf/start", &[k], Init::Zeros, rng),
            end: store.add("crf/end", &[k], Init::Zeros, rng),
            config,
        }
    }

    pub fn weights<'a>(&self, store: &'a ParamStore) -> CrfWeights<'a> {
        CrfWeights {
            num_tags: self.num_tags,
            w_trans: store.values(self.w_trans),
            b_trans: store.values(self.b_trans),
            w_start: store.values(self.w_start),
            start: store.values(self.start),
            end: store.values(self.end),
        }
    }

    /// Add CRF parameter gradients into `grads` and return the logits gradient.
    pub fn accumulate(&self, g: CrfGrads, grads: &mut Gradients) -> Mat {
        math::axpy(1.0, &g.w_trans, grads.get_mut(self.w_trans));
        math::axpy(1.0, &g.b_trans, grads.get_mut(self.b_trans));
        math::axpy(1.0, &g.w_start, grads.get_mut(self.w_start));
        if self.config.boundary_scores {
            math::axpy(1.0, &g.start, grads.get_mut(self.start));
            math::axpy(1.0, &g.end, grads.get_mut(self.end));
        }
        g.logits
    }

    pub fn decode(&self, store: &ParamStore, logits: &Mat) -> Result<(Vec<usize>, f64), CrfError> {
        let iob = Constraints::iob();
        let c = (self.config.constrained_decoding && self.num_tags == 3).then_some(&iob);
        viterbi(&self.weights(store), logits, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{adam_step, rng, AdamState};
    use rand::Rng as _;

    /// Scalar reimplementation of the sequence score, written straight from the formula.
    fn oracle_score(t: &CrfTables, l: &Mat, y: &[usize]) -> f64 {
        let k = t.num_tags;
        let mut s = t.start[y[0]] + t.w_start[y[0]] * l.get(0, y[0]);
        for i in 1..y.len() {
            s += t.w_trans[y[i - 1] * k + y[i]] * l.get(i, y[i]) + t.b_trans[y[i - 1] * k + y[i]];
        }
        s + t.end[y[y.len() - 1]]
    }

    fn all_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
        let total = k.pow(n as u32);
        (0..total)
            .map(|mut c| {
                let mut y = vec![0; n];
                for slot in y.iter_mut().rev() {
                    *slot = c % k;
                    c /= k;
                }
                y
            })
            .collect()
    }

    fn random_tables(r: &mut Rng, k: usize) -> CrfTables {
        let mut v = |m: usize| (0..m).map(|_| r.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
        CrfTables { num_tags: k, w_trans: v(k * k), b_trans: v(k * k), w_start: v(k), start: v(k), end: v(k) }
    }

    fn random_logits(r: &mut Rng, n: usize, k: usize) -> Mat {
        Mat::from_vec(n, k, (0..n * k).map(|_| r.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn zero_params_score_zero() {
        let t = CrfTables::zeros(3);
        let l = random_logits(&mut rng(0), 4, 3);
        for y in all_sequences(4, 3) {
            assert_eq!(sequence_score(&t.view(), &l, &y).unwrap(), 0.0);
        }
        assert!((log_partition(&t.view(), &l).unwrap() - math::ln(81.0)).abs() < 1e-12);
        assert_eq!(viterbi(&t.view(), &l, None).unwrap().0, [0, 0, 0, 0]);
    }

    #[test]
    fn single_position_start_score() {
        let mut t = CrfTables::zeros(3);
        t.start = vec![1.0, 0.0, 0.0];
        let l = random_logits(&mut rng(1), 1, 3);
        assert_eq!(sequence_score(&t.view(), &l, &[0]).unwrap(), 1.0);
    }

    #[test]
    fn uncoupled_viterbi_is_per_position_argmax() {
        let mut t = CrfTables::zeros(2);
        t.w_start = vec![1.0, 1.0];
        t.w_trans = vec![1.0; 4];
        let l = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(viterbi(&t.view(), &l, None).unwrap().0, [0, 1]);
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut r = rng(2);
        let t = random_tables(&mut r, 3);
        let l = random_logits(&mut r, 3, 3);
        for y in all_sequences(3, 3) {
            let a = sequence_score(&t.view(), &l, &y).unwrap();
            assert!((a - oracle_score(&t, &l, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_oracle() {
        let mut r = rng(3);
        for _ in 0..50 {
            let n = r.gen_range(1..=6);
            let k = r.gen_range(1..=4);
            let t = random_tables(&mut r, k);
            let l = random_logits(&mut r, n, k);
            let seqs = all_sequences(n, k);
            let scores: Vec<f64> = seqs.iter().map(|y| oracle_score(&t, &l, y)).collect();
            let brute = math::log_sum_exp(&scores);
            let lz = log_partition(&t.view(), &l).unwrap();
            assert!((brute - lz).abs() < 1e-8, "{brute} vs {lz}");
            let mass: f64 = scores.iter().map(|s| math::exp(s - lz)).sum();
            assert!((mass - 1.0).abs() < 1e-9);
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (path, vs) = viterbi(&t.view(), &l, None).unwrap();
            assert!((vs - best).abs() < 1e-9);
            assert!((oracle_score(&t, &l, &path) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn constrained_viterbi_matches_masked_enumeration() {
        let mut r = rng(4);
        let c = Constraints::iob();
        for _ in 0..50 {
            let n = r.gen_range(1..=6);
            let t = random_tables(&mut r, 3);
            let l = random_logits(&mut r, n, 3);
            let valid = |y: &Vec<usize>| {
                y[0] != 2 && y.windows(2).all(|w| !(w[0] == 0 && w[1] == 2))
            };
            let best = all_sequences(n, 3)
                .iter()
                .filter(|y| valid(y))
                .map(|y| oracle_score(&t, &l, y))
                .fold(f64::NEG_INFINITY, f64::max);
            let (path, vs) = viterbi(&t.view(), &l, Some(&c)).unwrap();
            assert!(valid(&path), "{path:?}");
            assert!((vs - best).abs() < 1e-9);
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut r = rng(5);
        for _ in 0..10 {
            let n = r.gen_range(1..=5);
            let k = 3;
            let t = random_tables(&mut r, k);
            let l = random_logits(&mut r, n, k);
            let gold: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            let (loss, g) = nll(&t.view(), &l, &gold).unwrap();
            assert!(loss >= 0.0);
            let h = 1e-6;
            let f = |t: &CrfTables, l: &Mat| nll(&t.view(), l, &gold).unwrap().0;
            for idx in 0..l.data.len() {
                let mut p = l.clone();
                p.data[idx] += h;
                let mut m = l.clone();
                m.data[idx] -= h;
                let fd = (f(&t, &p) - f(&t, &m)) / (2.0 * h);
                assert!((fd - g.logits.data[idx]).abs() < 1e-6, "logit {idx}");
            }
            let fields: [(fn(&mut CrfTables) -> &mut Vec<f64>, &Vec<f64>); 5] = [
                (|t| &mut t.w_trans, &g.w_trans),
                (|t| &mut t.b_trans, &g.b_trans),
                (|t| &mut t.w_start, &g.w_start),
                (|t| &mut t.start, &g.start),
                (|t| &mut t.end, &g.end),
            ];
            for (get, analytic) in fields {
                for idx in 0..analytic.len() {
                    let mut p = t.clone();
                    get(&mut p)[idx] += h;
                    let mut m = t.clone();
                    get(&mut m)[idx] -= h;
                    let fd = (f(&p, &l) - f(&m, &l)) / (2.0 * h);
                    assert!((fd - analytic[idx]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_tag_loss_is_zero() {
        let t = CrfTables::zeros(1);
        let l = Mat::from_rows(&[vec![0.3]]);
        let (loss, _) = nll(&t.view(), &l, &[0]).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn invalid_gold_rejected() {
        let t = CrfTables::zeros(3);
        let l = Mat::zeros(2, 3);
        assert!(matches!(nll(&t.view(), &l, &[0, 3]), Err(CrfError::InvalidGold { .. })));
        assert!(matches!(nll(&t.view(), &l, &[0]), Err(CrfError::LengthMismatch { .. })));
        assert!(matches!(log_partition(&t.view(), &Mat::zeros(2, 2)), Err(CrfError::DimensionMismatch { .. })));
    }

    #[test]
    fn large_logits_stay_finite() {
        let mut r = rng(6);
        let t = random_tables(&mut r, 3);
        let mut l = random_logits(&mut r, 6, 3);
        l.data.iter_mut().for_each(|v| *v *= 100.0);
        let lz = log_partition(&t.view(), &l).unwrap();
        assert!(lz.is_finite());
        let (loss, g) = nll(&t.view(), &l, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert!(g.logits.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn adam_reduces_loss_on_fixed_instance() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let crf = Crf::new(&mut store, &mut r, 3, CrfConfig::default());
        let l = random_logits(&mut r, 6, 3);
        let gold = [0, 1, 2, 0, 1, 0];
        let mut adam = AdamState::new(&store, 0.05);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let (loss, g) = nll(&crf.weights(&store), &l, &gold).unwrap();
            assert!(loss < prev, "{loss} >= {prev}");
            prev = loss;
            let mut grads = store.gradients();
            crf.accumulate(g, &mut grads);
            store.accumulate(&grads, 1.0);
            adam_step(&mut store, &mut adam).unwrap();
        }
    }
}
