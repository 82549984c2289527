//! Shared numerical primitives.
//!
//! Everything here works on `f64` slices. Softmax and KL go through the
//! log domain so that near-identical distributions do not lose precision to
//! cancellation. All randomness in the crate is drawn from [`seeded_rng`].

use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`ProbDist::new`].
pub const PROB_SUM_TOL: f64 = 1e-12;

/// The crate-wide deterministic generator: ChaCha with 8 rounds.
///
/// ChaCha output is specified bit-for-bit, so a given seed yields the same
/// stream on every platform.
pub type SeededRng = ChaCha8Rng;

/// Build the deterministic stream for `seed`.
///
/// The 64-bit seed is expanded to the 256-bit ChaCha key with
/// `SeedableRng::seed_from_u64`, which is a fixed PCG32 expansion; seed 0 is
/// a perfectly ordinary key.
pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A non-empty vector of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::input("vector must have at least one entry"));
        }
        ensure_finite(&data, "vector")?;
        Ok(Self(data))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vec64 {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vec64 {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Self::new(data)
    }
}

/// A categorical distribution: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::input("distribution must have at least one entry"));
        }
        ensure_finite(&probs, "distribution")?;
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::input(format!(
                "probability {i} = {} outside [0, 1]",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
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

impl Deref for ProbDist {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::input(format!(
            "{what} entry {i} is not finite ({})",
            values[i]
        ))),
        None => Ok(()),
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "temperature must be positive and finite, got {temperature}"
        )))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `log softmax(z / T)`, computed as `z/T - logsumexp(z/T)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::input("softmax of an empty vector"));
    }
    ensure_finite(logits, "logits")?;
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    Ok(scaled.into_iter().map(|s| s - log_sum).collect())
}

/// Temperature softmax with max-subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbDist> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::input("softmax of an empty vector"));
    }
    ensure_finite(logits, "logits")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbDist(exps.into_iter().map(|e| e / total).collect()))
}

/// `KL(p ‖ q)` in nats, with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::input(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (index, (&pi, &qi)) in p.iter().zip(q.iter()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::DivergenceUndefined { index, p: pi });
        }
        total += pi * (pi.ln() - qi.ln());
    }
    Ok(total.max(0.0))
}

/// `KL(softmax(z_p/T) ‖ softmax(z_q/T))` evaluated entirely from log-probabilities.
pub fn kl_from_logits(p_logits: &[f64], q_logits: &[f64], temperature: f64) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::input(format!(
            "logit lengths differ: {} vs {}",
            p_logits.len(),
            q_logits.len()
        )));
    }
    let log_p = log_softmax(p_logits, temperature)?;
    let log_q = log_softmax(q_logits, temperature)?;
    let total: f64 = log_p
        .iter()
        .zip(&log_q)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum();
    Ok(total.max(0.0))
}

/// Cross-entropy of `softmax(logits)` against a hard label.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits, 1.0)?[label])
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    ensure_finite(a, "cosine operand")?;
    ensure_finite(b, "cosine operand")?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::input("cosine similarity of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Scale to unit Euclidean norm; the zero vector is returned unchanged.
pub fn l2_normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::OracleFailure(format!(
                "non-finite evaluation around coordinate {i}: f(+h) = {up}, f(-h) = {down}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_reference_values() {
        // 30-digit mpmath exponentiation
        let expected = [0.659_001_138_885_967_9, 0.242_432_970_704_713_9, 0.098_565_890_409_318_17];
        let p = softmax(&[2.0, 1.0, 0.1], 1.0).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[1.0, f64::NAN], 1.0), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax(&[1.0, 2.0], 0.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(softmax(&[1.0, 2.0], -1.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn kl_reference_values() {
        let p = ProbDist::new(vec![0.5, 0.5]).unwrap();
        let q = ProbDist::new(vec![0.25, 0.75]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 0.143_841_036_225_890_45).abs() < 1e-14);

        let one_hot = ProbDist::new(vec![1.0, 0.0]).unwrap();
        let half = ProbDist::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&one_hot, &half).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_undefined_when_support_missing() {
        let p = ProbDist::new(vec![0.5, 0.5]).unwrap();
        let q = ProbDist::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            kl_divergence(&p, &q),
            Err(Error::DivergenceUndefined { index: 1, .. })
        ));
    }

    #[test]
    fn kl_from_logits_agrees_with_prob_route() {
        let zt = [0.3, -1.2, 2.0, 0.0];
        let zs = [1.0, 0.4, -0.5, 0.2];
        for t in [0.5, 1.0, 2.0, 7.5] {
            let direct = kl_divergence(&softmax(&zt, t).unwrap(), &softmax(&zs, t).unwrap()).unwrap();
            let logd = kl_from_logits(&zt, &zs, t).unwrap();
            assert!((direct - logd).abs() < 1e-14);
        }
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let g = finite_diff_grad(norm_sq, &[1.0, 2.0], 1e-3).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-10 && (g[1] - 4.0).abs() < 1e-10);
        let g = finite_diff_grad(|_| 3.5, &[1.0, -2.0, 0.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn finite_diff_matches_softmax_kl_gradient() {
        // d/dx KL(p ‖ softmax(x)) = softmax(x) - p
        let p = ProbDist::new(vec![0.2, 0.5, 0.3]).unwrap();
        let x = [0.3, -0.2, 0.5];
        let numeric = finite_diff_grad(
            |z| kl_divergence(&p, &softmax(z, 1.0).unwrap()).unwrap(),
            &x,
            1e-5,
        )
        .unwrap();
        let q = softmax(&x, 1.0).unwrap();
        for i in 0..3 {
            assert!((numeric[i] - (q[i] - p[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_diff_reports_non_finite() {
        let r = finite_diff_grad(|x| if x[0] > 0.0 { f64::INFINITY } else { 0.0 }, &[0.0], 1e-3);
        assert!(matches!(r, Err(Error::OracleFailure(_))));
    }

    #[test]
    fn rng_determinism() {
        let a: Vec<u64> = {
            let mut r = seeded_rng(7);
            (0..100).map(|_| r.random()).collect()
        };
        let b: Vec<u64> = {
            let mut r = seeded_rng(7);
            (0..100).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<u64> = {
            let mut r = seeded_rng(8);
            (0..10).map(|_| r.random()).collect()
        };
        assert_ne!(&a[..10], &c[..]);
        let mut zero = seeded_rng(0);
        let draws: Vec<u64> = (0..10).map(|_| zero.random()).collect();
        assert!(draws.iter().any(|&d| d != 0));
        assert!(draws.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn prob_dist_validation() {
        assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbDist::new(vec![]).is_err());
        assert!(Vec64::new(vec![f64::INFINITY]).is_err());
    }

    fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0..50.0f64, 1..max_len)
    }

    fn dist_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..8).prop_flat_map(|k| {
            (
                prop::collection::vec(-6.0..6.0f64, k),
                prop::collection::vec(-6.0..6.0f64, k),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_sums_to_one_and_shift_invariant(z in logits(12), shift in -100.0..100.0f64) {
            let p = softmax(&z, 1.0).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= PROB_SUM_TOL);
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted, 1.0).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_nonnegative_zero_iff_equal((zp, zq) in dist_pair()) {
            let p = softmax(&zp, 1.0).unwrap();
            let q = softmax(&zq, 1.0).unwrap();
            let d = kl_divergence(&p, &q).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap() <= 1e-12);
            let max_gap = p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if max_gap > 1e-6 {
                prop_assert!(d > 0.0);
            }
        }

        #[test]
        fn kl_finite_across_temperatures((zp, zq) in dist_pair(), t in 0.5..10.0f64) {
            let d = kl_from_logits(&zp, &zq, t).unwrap();
            prop_assert!(d.is_finite() && d >= 0.0);
        }

        #[test]
        fn finite_diff_exact_on_quadratics(
            a in prop::collection::vec(-3.0..3.0f64, 3),
            b in prop::collection::vec(-3.0..3.0f64, 3),
            x in prop::collection::vec(-3.0..3.0f64, 3),
        ) {
            // f(x) = Σ a_i x_i² + b_i x_i, gradient 2 a_i x_i + b_i
            let f = |v: &[f64]| v.iter().enumerate().map(|(i, xi)| a[i] * xi * xi + b[i] * xi).sum::<f64>();
            let g = finite_diff_grad(f, &x, 1e-3).unwrap();
            for i in 0..3 {
                prop_assert!((g[i] - (2.0 * a[i] * x[i] + b[i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn draw_is_uniformish() {
        let mut r = seeded_rng(1);
        let mean: f64 = (0..10_000).map(|_| r.random::<f64>()).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02);
    }
}
