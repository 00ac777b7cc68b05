//! Numeric primitives shared by every other module.
//!
//! All divergences are in nats. Everything here is a pure function of its
//! inputs except [`sample_categorical`], whose generator state is owned by the
//! caller.

use std::cmp::Ordering;
use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary index.
pub type TokenId = usize;

/// Largest deviation of a distribution's mass from 1 that is silently
/// renormalized. Anything beyond is treated as a bug upstream.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

/// Real-valued score per vocabulary token. Always nonempty and finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::usage("logit vector is empty"));
        }
        if let Some(i) = scores.iter().position(|x| !x.is_finite()) {
            return Err(Error::usage(format!(
                "logit vector has non-finite entry {} at index {i}",
                scores[i]
            )));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, token: TokenId) -> Option<f64> {
        self.0.get(token).copied()
    }

    /// Scores of `candidates`, in candidate order.
    pub fn gather(&self, candidates: &CandidateSet) -> Vec<f64> {
        candidates.iter().map(|t| self.0[t]).collect()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl<'de> Deserialize<'de> for LogitVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        LogitVector::new(v).map_err(serde::de::Error::custom)
    }
}

/// A discrete probability distribution: nonnegative entries summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Validates `probs`, renormalizing mass drift below
    /// [`RENORMALIZE_TOLERANCE`].
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::usage("probability distribution is empty"));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::usage(format!(
                "invalid probability {} at index {i}",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(Error::usage(format!("probabilities sum to {total}, not 1")));
        }
        if total != 1.0 {
            probs.iter_mut().for_each(|p| *p /= total);
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Distinct token ids ordered by descending source score, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet(Vec<TokenId>);

impl CandidateSet {
    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.0.contains(&token)
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.0.iter().copied()
    }
}

/// Cosine similarity together with a flag raised when either input had zero
/// norm (in which case `value` is 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

/// Numerically stabilized softmax (max-subtraction).
pub fn softmax(x: &[f64]) -> Result<ProbDist> {
    if x.is_empty() {
        return Err(Error::usage("softmax of an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("softmax input has non-finite entries"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbDist(exps.into_iter().map(|e| e / total).collect()))
}

/// Kullback-Leibler divergence KL(p‖q) in nats, with 0·ln(0/q) = 0.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    check_same_len(p.len(), q.len())?;
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.0.iter().zip(&q.0).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::DivergenceInfinite(format!(
                "p[{i}] = {pi} but q[{i}] = 0"
            )));
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc.max(0.0))
}

/// Jensen-Shannon divergence in nats, clamped to `[0, ln 2]`.
///
/// The mixture is formed elementwise as `0.5 * (p + q)`, so the result is
/// bit-identical under argument swap.
pub fn jsd(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    check_same_len(p.len(), q.len())?;
    let m = ProbDist(p.0.iter().zip(&q.0).map(|(a, b)| 0.5 * (a + b)).collect());
    // m_i > 0 wherever p_i or q_i is, so neither term can be infinite.
    let kl_pm = kl_divergence(p, &m)?;
    let kl_qm = kl_divergence(q, &m)?;
    Ok((0.5 * (kl_pm + kl_qm)).clamp(0.0, LN_2))
}

/// Cosine similarity clamped to `[-1, 1]`; zero-norm inputs give 0 and set
/// the degenerate flag.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<Cosine> {
    check_same_len(a.len(), b.len())?;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The `k` highest-scoring indices of `x` (all of them when `k >= len`),
/// ordered by descending score with ties broken by ascending id.
pub fn top_k(x: &LogitVector, k: usize) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::usage("top_k requires k >= 1"));
    }
    let scores = x.as_slice();
    let order =
        |a: &TokenId, b: &TokenId| -> Ordering { scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)) };
    let mut ids: Vec<TokenId> = (0..scores.len()).collect();
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, order);
        ids.truncate(k);
    }
    ids.sort_unstable_by(order);
    Ok(CandidateSet(ids))
}

/// Draws an index distributed according to `p`. Never returns an index
/// carrying zero probability.
pub fn sample_categorical<R: Rng + ?Sized>(p: &ProbDist, rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_nonzero = 0;
    for (i, &pi) in p.0.iter().enumerate() {
        if pi <= 0.0 {
            continue;
        }
        last_nonzero = i;
        cumulative += pi;
        if u < cumulative {
            return i;
        }
    }
    // u fell into the rounding gap between the cumulative sum and 1.
    last_nonzero
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(x: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in x.iter().enumerate() {
        match best {
            Some(b) if x[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::usage(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pd(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        for c in [-7.5, 0.0, 3.25, 1e6] {
            let p = softmax(&[c, c, c]).unwrap();
            for v in p.as_slice() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap().as_slice(), &[0.5, 0.5]);
        assert!(matches!(softmax(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(
            kl_divergence(&pd(&[0.5, 0.5]), &pd(&[0.5, 0.5])).unwrap(),
            0.0
        );
        let v = kl_divergence(&pd(&[1.0, 0.0]), &pd(&[0.5, 0.5])).unwrap();
        assert!((v - LN_2).abs() < 1e-15);
        // 40-digit evaluation of 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75)
        let v = kl_divergence(&pd(&[0.5, 0.5]), &pd(&[0.25, 0.75])).unwrap();
        assert!((v - 0.143_841_036_225_890_46).abs() < 1e-12);
    }

    #[test]
    fn kl_errors() {
        assert!(matches!(
            kl_divergence(&pd(&[0.5, 0.5]), &pd(&[1.0, 0.0])),
            Err(Error::DivergenceInfinite(_))
        ));
        assert!(matches!(
            kl_divergence(&pd(&[1.0]), &pd(&[0.5, 0.5])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn jsd_examples() {
        let p = pd(&[0.2, 0.3, 0.5]);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let v = jsd(&pd(&[1.0, 0.0]), &pd(&[0.0, 1.0])).unwrap();
        assert!((v - LN_2).abs() < 1e-15);
        // 40-digit evaluation of the direct formula
        let v = jsd(&pd(&[0.5, 0.5]), &pd(&[0.25, 0.75])).unwrap();
        assert!((v - 0.033_822_075_568_605_23).abs() < 1e-12);
        assert!(jsd(&pd(&[1.0]), &pd(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c.value - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(!c.degenerate);
        let z = cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(
            z,
            Cosine {
                value: 0.0,
                degenerate: true
            }
        );
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&lv(&[0.1, 0.9, 0.5]), 2).unwrap().as_slice(), &[1, 2]);
        assert_eq!(
            top_k(&lv(&[0.1, 0.9, 0.5]), 10).unwrap().as_slice(),
            &[1, 2, 0]
        );
        assert_eq!(top_k(&lv(&[1.0, 1.0, 0.0]), 1).unwrap().as_slice(), &[0]);
        assert!(matches!(top_k(&lv(&[1.0]), 0), Err(Error::Usage(_))));
    }

    #[test]
    fn sampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = pd(&[1.0, 0.0]);
        assert!((0..1000).all(|_| sample_categorical(&p, &mut rng) == 0));

        let p = pd(&[0.5, 0.5]);
        let n = 10_000;
        let zeros = (0..n)
            .filter(|_| sample_categorical(&p, &mut rng) == 0)
            .count();
        // 4 sigma of Binomial(10000, 0.5) is 0.02 in frequency
        assert!(((zeros as f64 / n as f64) - 0.5).abs() <= 0.02);

        assert_eq!(argmax(&[0.2, 0.3, 0.5]), Some(2));
        assert_eq!(argmax(&[0.5, 0.5]), Some(0));
    }

    #[test]
    fn prob_dist_renormalizes_small_drift_only() {
        let p = ProbDist::new(vec![0.5, 0.5 + 1e-8]).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::new(vec![1.5, -0.5]).is_err());
    }

    fn dist(len: usize) -> impl Strategy<Value = ProbDist> {
        prop::collection::vec(0.0f64..1.0, len).prop_filter_map("zero mass", |w| {
            let t: f64 = w.iter().sum();
            (t > 0.0).then(|| pd(&w.iter().map(|x| x / t).collect::<Vec<_>>()))
        })
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(x in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let a = softmax(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = softmax(&shifted).unwrap();
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }

        #[test]
        fn jsd_symmetric_and_bounded((p, q) in (2usize..12).prop_flat_map(|n| (dist(n), dist(n)))) {
            let a = jsd(&p, &q).unwrap();
            prop_assert_eq!(a, jsd(&q, &p).unwrap());
            prop_assert!((0.0..=LN_2 + 1e-12).contains(&a));
        }

        #[test]
        fn top_k_members_dominate(x in prop::collection::vec(-5i32..5, 1..30), k in 1usize..40) {
            let x = lv(&x.iter().map(|v| *v as f64).collect::<Vec<_>>());
            let c = top_k(&x, k).unwrap();
            prop_assert_eq!(c.len(), k.min(x.len()));
            let min_in = c.iter().map(|t| x.as_slice()[t]).fold(f64::INFINITY, f64::min);
            for t in (0..x.len()).filter(|t| !c.contains(*t)) {
                prop_assert!(x.as_slice()[t] <= min_in);
            }
        }

        #[test]
        fn sampling_avoids_zero_mass(w in prop::collection::vec(prop_oneof![Just(0.0f64), 0.01f64..1.0], 1..10), seed in any::<u64>()) {
            prop_assume!(w.iter().any(|v| *v > 0.0));
            let t: f64 = w.iter().sum();
            let p = pd(&w.iter().map(|v| v / t).collect::<Vec<_>>());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let i = sample_categorical(&p, &mut rng);
                prop_assert!(p.as_slice()[i] > 0.0);
            }
        }
    }
}
