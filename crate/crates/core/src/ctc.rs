//! Connectionist temporal classification.
//!
//! Column 0 of every posteriorgram is the blank symbol; label tokens are the
//! column indices `1..=|V|`. All lattice arithmetic happens in log space.

use crate::nn::{log_sum_exp, Matrix};

pub const BLANK: usize = 0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CtcError {
    #[error("infeasible target: {frames} frames cannot align {needed} required states")]
    Infeasible { frames: usize, needed: usize },
    #[error("target token {token} outside vocabulary of {vocab} tokens")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("posteriorgram is invalid: {0}")]
    InvalidPosteriorgram(String),
    #[error("brute-force enumeration of {paths} paths exceeds the limit of {limit}")]
    TooLarge { paths: u128, limit: u128 },
}

/// Per-frame log-probabilities over blank plus a vocabulary level.
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriorgram {
    log_probs: Matrix,
    level: usize,
}

impl Posteriorgram {
    /// Wraps already-normalized log-probabilities. Rows must exponentiate to
    /// a distribution within `1e-9`.
    pub fn new(log_probs: Matrix, level: usize) -> Result<Self, CtcError> {
        if log_probs.cols() < 1 {
            return Err(CtcError::InvalidPosteriorgram("zero columns".into()));
        }
        for t in 0..log_probs.rows() {
            let row = log_probs.row(t);
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(CtcError::InvalidPosteriorgram(format!("non-finite entry in frame {t}")));
            }
            let mass: f64 = row.iter().map(|v| v.exp()).sum();
            if (mass - 1.0).abs() > 1e-9 {
                return Err(CtcError::InvalidPosteriorgram(format!(
                    "frame {t} sums to {mass}"
                )));
            }
        }
        Ok(Self { log_probs, level })
    }

    /// Normalizes raw scores with a row-wise log-softmax.
    pub fn from_logits(logits: &Matrix, level: usize) -> Self {
        Self {
            log_probs: crate::nn::log_softmax_rows(logits),
            level,
        }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    /// `|V| + 1`.
    pub fn width(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.width() - 1
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn log_probs(&self) -> &Matrix {
        &self.log_probs
    }
}

#[derive(Clone, Debug)]
pub struct CtcLossResult {
    /// Negative log-likelihood of the target.
    pub loss: f64,
    /// Gradient of `loss` with respect to the pre-softmax logits.
    pub logit_grads: Matrix,
}

/// Remove repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &tok in path {
        if Some(tok) != prev && tok != BLANK {
            out.push(tok);
        }
        prev = Some(tok);
    }
    out
}

/// Number of adjacent equal pairs in `target`.
pub fn repeat_count(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Minimum frame count an alignment of `target` needs.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + repeat_count(target)
}

/// Whether `target` can be aligned to `frames` frames.
pub fn is_feasible(frames: usize, target: &[usize]) -> bool {
    frames >= min_frames(target)
}

/// Shortest alignment collapsing to `target`: one frame per token with a
/// blank inserted between repeats, then padded with trailing blanks to
/// `frames`.
pub fn canonical_alignment(target: &[usize], frames: usize) -> Option<Vec<usize>> {
    if !is_feasible(frames, target) {
        return None;
    }
    let mut path = Vec::with_capacity(frames);
    for (i, &tok) in target.iter().enumerate() {
        if i > 0 && target[i - 1] == tok {
            path.push(BLANK);
        }
        path.push(tok);
    }
    path.resize(frames, BLANK);
    Some(path)
}

fn check_target(post: &Posteriorgram, target: &[usize]) -> Result<(), CtcError> {
    let vocab = post.vocab_size();
    if let Some(&bad) = target.iter().find(|&&t| t == BLANK || t > vocab) {
        return Err(CtcError::TokenOutOfRange { token: bad, vocab });
    }
    if !is_feasible(post.frames(), target) {
        return Err(CtcError::Infeasible {
            frames: post.frames(),
            needed: min_frames(target),
        });
    }
    Ok(())
}

/// Exact CTC negative log-likelihood with its logit gradient, computed by
/// forward-backward over the blank-interleaved `2U + 1` state lattice.
pub fn ctc_loss(post: &Posteriorgram, target: &[usize]) -> Result<CtcLossResult, CtcError> {
    check_target(post, target)?;
    let lp = post.log_probs();
    let t_len = post.frames();
    let width = post.width();

    // Extended label sequence: blank, l1, blank, l2, ..., lU, blank.
    let states: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = states.len();
    let can_skip = |s: usize| s >= 2 && states[s] != BLANK && states[s] != states[s - 2];

    if t_len == 0 {
        // Only the empty target is feasible here, with probability one.
        return Ok(CtcLossResult {
            loss: 0.0,
            logit_grads: Matrix::zeros(0, width),
        });
    }

    // alpha[t][s]: log prob of prefixes ending in state s at frame t,
    // including the emission at t.
    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp[(0, states[0])];
    if s_len > 1 {
        alpha[1] = lp[(0, states[1])];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == neg { neg } else { acc + lp[(t, states[s])] };
        }
    }

    // beta[t][s]: log prob of completing the path from state s at frame t,
    // excluding the emission at t.
    let mut beta = vec![neg; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let emit = |j: usize| next[j] + lp[(t + 1, states[j])];
            let mut acc = emit(s);
            if s + 1 < s_len {
                acc = log_add(acc, emit(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add(acc, emit(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let last = &alpha[(t_len - 1) * s_len..];
    let log_likelihood = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    debug_assert!(log_likelihood.is_finite());
    let loss = (-log_likelihood).max(0.0);

    // d loss / d logit[t][c] = softmax[t][c] - occupancy[t][c].
    let mut logit_grads = Matrix::zeros(t_len, width);
    let mut occ = vec![neg; width];
    for t in 0..t_len {
        occ.iter_mut().for_each(|v| *v = neg);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[states[s]] = log_add(occ[states[s]], v);
        }
        let row = logit_grads.row_mut(t);
        for c in 0..width {
            let gamma = if occ[c] == neg { 0.0 } else { (occ[c] - log_likelihood).exp() };
            row[c] = lp[(t, c)].exp() - gamma;
        }
    }

    Ok(CtcLossResult { loss, logit_grads })
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Largest number of paths [`brute_force_ctc_loss`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Reference CTC loss by explicit enumeration of all `(|V|+1)^T` paths.
///
/// Returns [`CtcError::Infeasible`] when no path collapses to `target`.
pub fn brute_force_ctc_loss(post: &Posteriorgram, target: &[usize]) -> Result<f64, CtcError> {
    let width = post.width();
    let t_len = post.frames();
    let paths = (width as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(CtcError::TooLarge {
            paths,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let vocab = post.vocab_size();
    if let Some(&bad) = target.iter().find(|&&t| t == BLANK || t > vocab) {
        return Err(CtcError::TokenOutOfRange { token: bad, vocab });
    }
    let lp = post.log_probs();
    let mut path = vec![0usize; t_len];
    let mut terms = Vec::new();
    for code in 0..paths as u64 {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = (c % width as u64) as usize;
            c /= width as u64;
        }
        if collapse(&path) == target {
            terms.push(path.iter().enumerate().map(|(t, &a)| lp[(t, a)]).sum::<f64>());
        }
    }
    if terms.is_empty() {
        return Err(CtcError::Infeasible {
            frames: t_len,
            needed: min_frames(target),
        });
    }
    Ok((-log_sum_exp(&terms)).max(0.0))
}

/// Per-frame argmax (lowest index wins ties) followed by [`collapse`].
pub fn best_path_decode(post: &Posteriorgram) -> Vec<usize> {
    let lp = post.log_probs();
    let path: Vec<usize> = (0..lp.rows())
        .map(|t| {
            let row = lp.row(t);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_post(rng: &mut ChaCha8Rng, t: usize, width: usize) -> Posteriorgram {
        let logits = Matrix::from_vec(t, width, (0..t * width).map(|_| rng.random_range(-2.0..2.0)).collect());
        Posteriorgram::from_logits(&logits, 0)
    }

    fn uniform(t: usize, width: usize) -> Posteriorgram {
        Posteriorgram::from_logits(&Matrix::zeros(t, width), 0)
    }

    #[test]
    fn collapse_examples() {
        let (a, b) = (1, 2);
        assert_eq!(collapse(&[a, a, BLANK, b]), vec![a, b]);
        assert_eq!(collapse(&[BLANK, BLANK, BLANK]), Vec::<usize>::new());
        assert_eq!(collapse(&[a, BLANK, a]), vec![a, a]);
    }

    #[test]
    fn single_frame_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let post = random_post(&mut rng, 1, 4);
        let r = ctc_loss(&post, &[2]).unwrap();
        assert!((r.loss + post.log_probs()[(0, 2)]).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let post = random_post(&mut rng, 4, 3);
        let expected: f64 = (0..4).map(|t| -post.log_probs()[(t, BLANK)]).sum();
        assert!((ctc_loss(&post, &[]).unwrap().loss - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_two_frames_one_token() {
        // Paths over {e, a}: ea, ae, aa collapse to (a); ee does not.
        let post = uniform(2, 2);
        let expected = -(0.75f64).ln();
        assert!((brute_force_ctc_loss(&post, &[1]).unwrap() - expected).abs() < 1e-12);
        assert!((ctc_loss(&post, &[1]).unwrap().loss - expected).abs() < 1e-12);
    }

    #[test]
    fn three_frames_two_tokens_matches_enumeration() {
        let logits = Matrix::from_rows(&[
            vec![0.1, 1.2, -0.3],
            vec![0.5, 0.2, 0.9],
            vec![-1.0, 0.0, 1.5],
        ]);
        let post = Posteriorgram::from_logits(&logits, 0);
        let lp = post.log_probs();
        // All 27 length-3 paths, filtered by hand-independent collapse.
        let mut total = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let p = [a, b, c];
                    let mut out = Vec::new();
                    let mut prev = usize::MAX;
                    for &x in &p {
                        if x != prev && x != 0 {
                            out.push(x);
                        }
                        prev = x;
                    }
                    if out == [1, 2] {
                        total += (lp[(0, a)] + lp[(1, b)] + lp[(2, c)]).exp();
                    }
                }
            }
        }
        let r = ctc_loss(&post, &[1, 2]).unwrap();
        assert!((r.loss + total.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_an_error_in_both_routes() {
        let post = uniform(2, 3);
        assert!(matches!(ctc_loss(&post, &[1, 1]), Err(CtcError::Infeasible { .. })));
        assert!(matches!(brute_force_ctc_loss(&post, &[1, 1]), Err(CtcError::Infeasible { .. })));
        assert!(matches!(ctc_loss(&post, &[1, 2, 1]), Err(CtcError::Infeasible { .. })));
    }

    #[test]
    fn out_of_vocab_and_blank_targets_rejected() {
        let post = uniform(4, 3);
        assert!(matches!(ctc_loss(&post, &[3]), Err(CtcError::TokenOutOfRange { .. })));
        assert!(matches!(ctc_loss(&post, &[0]), Err(CtcError::TokenOutOfRange { .. })));
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let post = uniform(13, 4);
        assert!(matches!(brute_force_ctc_loss(&post, &[1]), Err(CtcError::TooLarge { .. })));
    }

    #[test]
    fn oracle_agreement_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut infeasible = 0;
        for _ in 0..300 {
            let t = rng.random_range(1..=5);
            let v = rng.random_range(1..=3);
            let u = rng.random_range(0..=3);
            let target: Vec<usize> = (0..u).map(|_| rng.random_range(1..=v)).collect();
            let post = random_post(&mut rng, t, v + 1);
            match (ctc_loss(&post, &target), brute_force_ctc_loss(&post, &target)) {
                (Ok(r), Ok(b)) => assert!((r.loss - b).abs() < 1e-9, "{} vs {}", r.loss, b),
                (Err(CtcError::Infeasible { .. }), Err(CtcError::Infeasible { .. })) => infeasible += 1,
                (a, b) => panic!("routes disagree: {a:?} vs {b:?}"),
            }
        }
        assert!(infeasible > 0);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let t = rng.random_range(2..=7);
            let v = rng.random_range(1..=4);
            let u = rng.random_range(0..=3.min(t / 2));
            let target: Vec<usize> = (0..u).map(|_| rng.random_range(1..=v)).collect();
            let logits = Matrix::from_vec(t, v + 1, (0..t * (v + 1)).map(|_| rng.random_range(-2.0..2.0)).collect());
            let r = ctc_loss(&Posteriorgram::from_logits(&logits, 0), &target).unwrap();
            let h = 1e-4;
            for i in 0..t {
                let row_sum: f64 = r.logit_grads.row(i).iter().sum();
                assert!(row_sum.abs() < 1e-9);
                for c in 0..=v {
                    let mut lo = logits.clone();
                    let mut hi = logits.clone();
                    lo[(i, c)] -= h;
                    hi[(i, c)] += h;
                    let f = |m: &Matrix| ctc_loss(&Posteriorgram::from_logits(m, 0), &target).unwrap().loss;
                    let fd = (f(&hi) - f(&lo)) / (2.0 * h);
                    let an = r.logit_grads[(i, c)];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn best_path_examples() {
        let (a, b) = (1, 2);
        let mut logits = Matrix::zeros(4, 3);
        for (t, tok) in [a, a, BLANK, b].into_iter().enumerate() {
            logits[(t, tok)] = 3.0;
        }
        let post = Posteriorgram::from_logits(&logits, 0);
        assert_eq!(best_path_decode(&post), vec![a, b]);

        let mut shifted = logits.clone();
        shifted.row_mut(2).iter_mut().for_each(|v| *v += 17.0);
        assert_eq!(best_path_decode(&Posteriorgram::from_logits(&shifted, 0)), vec![a, b]);

        assert_eq!(best_path_decode(&uniform(5, 3)), Vec::<usize>::new());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let logits = Matrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![0.5, 0.5, 0.0]]);
        assert_eq!(best_path_decode(&Posteriorgram::from_logits(&logits, 0)), vec![1]);
    }

    #[test]
    fn posteriorgram_validation() {
        assert!(Posteriorgram::new(Matrix::from_rows(&[vec![0.0, 0.0]]), 0).is_err());
        let ok = Matrix::from_rows(&[vec![0.5f64.ln(), 0.5f64.ln()]]);
        assert!(Posteriorgram::new(ok, 0).is_ok());
    }

    proptest! {
        #[test]
        fn canonical_alignment_round_trips(
            target in prop::collection::vec(1usize..4, 0..6),
            extra in 0usize..4,
        ) {
            let frames = 2 * target.len() + extra;
            let path = canonical_alignment(&target, frames).unwrap();
            prop_assert_eq!(path.len(), frames);
            prop_assert_eq!(collapse(&path), target);
        }

        #[test]
        fn feasibility_is_monotone_in_frames(
            target in prop::collection::vec(1usize..3, 0..5),
            t in 1usize..5,
            more in 0usize..3,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let short = random_post(&mut rng, t, 3);
            let long = random_post(&mut rng, t + more, 3);
            if let Ok(r) = ctc_loss(&short, &target) {
                let p = (-r.loss).exp();
                prop_assert!(p > 0.0 && p <= 1.0);
                prop_assert!(ctc_loss(&long, &target).is_ok());
            }
        }
    }
}
