//! Distributed oblivious PRF `f_k(s) = M(s)^k`.
//!
//! The client blinds `M(s)` with `β`, each keyserver raises the blinded
//! element to its Shamir share `k_i`, and the client combines `t` responses
//! with Lagrange coefficients at zero before stripping `β`.

use std::collections::BTreeSet;

use num_bigint::BigUint;
use rand::RngCore;
use thiserror::Error;

use crate::encoding::{Decoder, DecodeError, Encoder};
use crate::group::{Group, GroupElement, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DoprfError {
    #[error("invalid threshold: need 1 <= t <= n < q (t={t}, n={n})")]
    InvalidThreshold { t: usize, n: usize },
    #[error("duplicate share index {0}")]
    DuplicateIndex(u32),
    #[error("expected {expected} responses, got {got}")]
    WrongResponseCount { expected: usize, got: usize },
    #[error("blinding factor is not invertible")]
    NonInvertibleBlind,
    #[error("share index must be positive")]
    ZeroIndex,
}

/// Per-batch blinding exponent.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BlindingFactor(pub Scalar);

impl BlindingFactor {
    pub fn random<R: RngCore + ?Sized>(group: &Group, rng: &mut R) -> Self {
        BlindingFactor(group.random_nonzero_scalar(rng))
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct KeyShare {
    pub index: u32,
    pub value: Scalar,
}

impl KeyShare {
    pub fn encode(&self, group: &Group) -> Vec<u8> {
        Encoder::new()
            .u32(self.index)
            .bytes(&group.scalar_to_bytes(&self.value))
            .finish()
    }

    pub fn decode(group: &Group, bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let index = d.u32()?;
        let value = group
            .scalar_from_bytes(d.field()?)
            .map_err(|_| DecodeError::Invalid("scalar"))?;
        d.finish()?;
        Ok(KeyShare { index, value })
    }
}

fn check_threshold(group: &Group, n: usize, t: usize) -> Result<(), DoprfError> {
    if t < 1 || t > n || BigUint::from(n) >= *group.order() {
        return Err(DoprfError::InvalidThreshold { t, n });
    }
    Ok(())
}

/// Shares `k` among `n` holders so that any `t` reconstruct it.
pub fn share_key<R: RngCore + ?Sized>(
    group: &Group,
    k: &Scalar,
    n: usize,
    t: usize,
    rng: &mut R,
) -> Result<Vec<KeyShare>, DoprfError> {
    check_threshold(group, n, t)?;
    let mut coeffs = vec![k.clone()];
    coeffs.extend((1..t).map(|_| group.random_scalar(rng)));
    share_key_with_coefficients(group, &coeffs, n)
}

/// Evaluates the polynomial `coeffs[0] + coeffs[1] x + ...` at `x = 1..=n`.
/// The threshold is `coeffs.len()`.
pub fn share_key_with_coefficients(
    group: &Group,
    coeffs: &[Scalar],
    n: usize,
) -> Result<Vec<KeyShare>, DoprfError> {
    check_threshold(group, n, coeffs.len())?;
    Ok((1..=n as u32)
        .map(|i| {
            let x = group.scalar(i as u64);
            // Horner
            let value = coeffs
                .iter()
                .rev()
                .fold(group.scalar(0), |acc, c| group.add(&group.mul_scalar(&acc, &x), c));
            KeyShare { index: i, value }
        })
        .collect())
}

/// Lagrange coefficients at zero for the given index set, in input order.
pub fn lagrange_at_zero(group: &Group, indices: &[u32]) -> Result<Vec<Scalar>, DoprfError> {
    let mut seen = BTreeSet::new();
    for &i in indices {
        if i == 0 {
            return Err(DoprfError::ZeroIndex);
        }
        if !seen.insert(i) {
            return Err(DoprfError::DuplicateIndex(i));
        }
    }
    Ok(indices
        .iter()
        .map(|&i| {
            let xi = group.scalar(i as u64);
            let mut num = group.scalar(1);
            let mut den = group.scalar(1);
            for &j in indices.iter().filter(|&&j| j != i) {
                let xj = group.scalar(j as u64);
                num = group.mul_scalar(&num, &xj);
                den = group.mul_scalar(&den, &group.sub(&xj, &xi));
            }
            // distinct indices below q, so den != 0
            group.mul_scalar(&num, &group.inv(&den).expect("distinct indices"))
        })
        .collect())
}

pub fn blind(group: &Group, h: &GroupElement, beta: &BlindingFactor) -> GroupElement {
    group.exp(h, &beta.0)
}

pub fn eval_share(group: &Group, share: &KeyShare, x: &GroupElement) -> GroupElement {
    group.exp(x, &share.value)
}

/// `∏ y_i^{λ_i}` over exactly `t` responses with distinct indices.
pub fn combine(
    group: &Group,
    responses: &[(u32, GroupElement)],
    t: usize,
) -> Result<GroupElement, DoprfError> {
    if responses.len() != t {
        return Err(DoprfError::WrongResponseCount {
            expected: t,
            got: responses.len(),
        });
    }
    let indices: Vec<u32> = responses.iter().map(|(i, _)| *i).collect();
    let lambdas = lagrange_at_zero(group, &indices)?;
    Ok(responses
        .iter()
        .zip(&lambdas)
        .fold(group.identity(), |acc, ((_, y), l)| group.mul(&acc, &group.exp(y, l))))
}

pub fn unblind(group: &Group, y: &GroupElement, beta: &BlindingFactor) -> Result<GroupElement, DoprfError> {
    let inv = group.inv(&beta.0).map_err(|_| DoprfError::NonInvertibleBlind)?;
    Ok(group.exp(y, &inv))
}

/// Undistributed reference evaluation `M(s)^k`.
pub fn doprf_direct(group: &Group, s: &[u8], k: &Scalar) -> GroupElement {
    group.exp(&group.hash_to_group(s), k)
}

/// Recovers `k` from `t` shares.
pub fn reconstruct_key(group: &Group, shares: &[KeyShare]) -> Result<Scalar, DoprfError> {
    let indices: Vec<u32> = shares.iter().map(|s| s.index).collect();
    let lambdas = lagrange_at_zero(group, &indices)?;
    Ok(shares.iter().zip(&lambdas).fold(group.scalar(0), |acc, (s, l)| {
        group.add(&acc, &group.mul_scalar(&s.value, l))
    }))
}

/// Full client-side pipeline over a chosen subset of shares, used by tests
/// and the simulator's self-checks.
pub fn evaluate_distributed(
    group: &Group,
    s: &[u8],
    beta: &BlindingFactor,
    shares: &[&KeyShare],
) -> Result<GroupElement, DoprfError> {
    let x = blind(group, &group.hash_to_group(s), beta);
    let ys: Vec<(u32, GroupElement)> = shares.iter().map(|sh| (sh.index, eval_share(group, sh, &x))).collect();
    unblind(group, &combine(group, &ys, shares.len())?, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn el(g: &Group, v: u8) -> GroupElement {
        g.element_from_bytes(&[v]).unwrap()
    }

    fn shares_7_5x(g: &Group) -> Vec<KeyShare> {
        share_key_with_coefficients(g, &[g.scalar(7), g.scalar(5)], 3).unwrap()
    }

    #[test]
    fn worked_sharing_example() {
        let g = Group::test();
        let got: Vec<(u32, Scalar)> = shares_7_5x(&g).into_iter().map(|s| (s.index, s.value)).collect();
        assert_eq!(got, vec![(1, g.scalar(1)), (2, g.scalar(6)), (3, g.scalar(0))]);
        assert_eq!(lagrange_at_zero(&g, &[1, 2]).unwrap(), vec![g.scalar(2), g.scalar(10)]);
        assert_eq!(reconstruct_key(&g, &shares_7_5x(&g)[..2]).unwrap(), g.scalar(7));
    }

    #[test]
    fn degree_zero_sharing_is_the_key() {
        let g = Group::test();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let s = share_key(&g, &g.scalar(7), 1, 1, &mut rng).unwrap();
        assert_eq!(s, vec![KeyShare { index: 1, value: g.scalar(7) }]);
    }

    #[test]
    fn threshold_bounds() {
        let g = Group::test();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let k = g.scalar(3);
        for (n, t) in [(3, 0), (3, 4), (11, 2), (12, 2)] {
            assert_eq!(
                share_key(&g, &k, n, t, &mut rng),
                Err(DoprfError::InvalidThreshold { t, n })
            );
        }
        assert!(share_key(&g, &k, 10, 10, &mut rng).is_ok());
    }

    #[test]
    fn blind_examples() {
        let g = Group::test();
        let h = el(&g, 4);
        assert_eq!(blind(&g, &h, &BlindingFactor(g.scalar(1))), h);
        assert_eq!(blind(&g, &h, &BlindingFactor(g.scalar(3))), el(&g, 18));
        assert_eq!(unblind(&g, &el(&g, 18), &BlindingFactor(g.scalar(3))).unwrap(), h);
        assert_eq!(unblind(&g, &h, &BlindingFactor(g.scalar(1))).unwrap(), h);
        assert_eq!(
            unblind(&g, &h, &BlindingFactor(g.scalar(0))),
            Err(DoprfError::NonInvertibleBlind)
        );
    }

    #[test]
    fn eval_share_examples() {
        let g = Group::test();
        let two = el(&g, 2);
        let ks = |i, v| KeyShare { index: i, value: g.scalar(v) };
        assert_eq!(eval_share(&g, &ks(1, 0), &two), g.identity());
        assert_eq!(eval_share(&g, &ks(1, 1), &two), two);
        assert_eq!(eval_share(&g, &ks(2, 6), &two), el(&g, 18));
    }

    #[test]
    fn combine_examples() {
        let g = Group::test();
        assert_eq!(combine(&g, &[(1, el(&g, 2))], 1).unwrap(), el(&g, 2));
        assert_eq!(combine(&g, &[(1, el(&g, 2)), (2, el(&g, 18))], 2).unwrap(), el(&g, 13));
        let two = el(&g, 2);
        let shares = shares_7_5x(&g);
        let ys: Vec<_> = shares[1..].iter().map(|s| (s.index, eval_share(&g, s, &two))).collect();
        assert_eq!(combine(&g, &ys, 2).unwrap(), el(&g, 13));
    }

    #[test]
    fn combine_errors() {
        let g = Group::test();
        let y = el(&g, 2);
        assert_eq!(
            combine(&g, &[(1, y.clone()), (1, y.clone())], 2),
            Err(DoprfError::DuplicateIndex(1))
        );
        assert_eq!(
            combine(&g, &[(1, y.clone())], 2),
            Err(DoprfError::WrongResponseCount { expected: 2, got: 1 })
        );
    }

    #[test]
    fn direct_examples() {
        let g = Group::test();
        assert_eq!(doprf_direct(&g, b"ACGT", &g.scalar(1)), g.hash_to_group(b"ACGT"));
        assert_eq!(doprf_direct(&g, b"ACGT", &g.scalar(0)), g.identity());
        let shares = shares_7_5x(&g);
        let beta = BlindingFactor(g.scalar(6));
        assert_eq!(
            evaluate_distributed(&g, b"ACGT", &beta, &[&shares[0], &shares[2]]).unwrap(),
            doprf_direct(&g, b"ACGT", &g.scalar(7))
        );
    }

    #[test]
    fn lagrange_matches_integer_oracle() {
        // Rational Lagrange weights computed over the integers, then reduced.
        fn oracle(idx: &[i64], q: i64) -> Vec<i64> {
            let inv = |a: i64| (1..q).find(|b| (a.rem_euclid(q) * b) % q == 1).unwrap();
            idx.iter()
                .map(|&i| {
                    let (mut num, mut den) = (1i64, 1i64);
                    for &j in idx.iter().filter(|&&j| j != i) {
                        num *= j;
                        den *= j - i;
                    }
                    (num.rem_euclid(q) * inv(den)) % q
                })
                .collect()
        }
        let g = Group::test();
        for subset in [vec![1u32, 2], vec![2, 3], vec![1, 3], vec![1, 2, 3], vec![2, 4, 5], vec![1, 5, 7, 9]] {
            let got: Vec<Scalar> = lagrange_at_zero(&g, &subset).unwrap();
            let want: Vec<Scalar> = oracle(&subset.iter().map(|&i| i as i64).collect::<Vec<_>>(), 11)
                .into_iter()
                .map(|v| g.scalar(v as u64))
                .collect();
            assert_eq!(got, want, "subset {subset:?}");
        }
    }

    #[test]
    fn blind_privacy_exhaustive() {
        let g = Group::test();
        let nonid: Vec<GroupElement> = g.elements().unwrap().into_iter().filter(|e| !g.is_identity(e)).collect();
        for h in &nonid {
            let mut hits = std::collections::BTreeMap::new();
            for b in 1..11 {
                *hits.entry(blind(&g, h, &BlindingFactor(g.scalar(b)))).or_insert(0) += 1;
            }
            assert_eq!(hits.len(), nonid.len());
            assert!(hits.values().all(|&c| c == 1));
        }
    }

    #[test]
    fn share_hiding_exhaustive() {
        // With t = 2 one share (i, v) is consistent with every key k': the
        // line through (0, k') and (i, v) exists for each k'.
        let g = Group::test();
        for i in 1..11u64 {
            for v in 0..11u64 {
                for k in 0..11u64 {
                    let found = (0..11u64).any(|a1| {
                        let s = share_key_with_coefficients(&g, &[g.scalar(k), g.scalar(a1)], 10).unwrap();
                        s[i as usize - 1].value == g.scalar(v)
                    });
                    assert!(found, "share ({i},{v}) excludes key {k}");
                }
            }
        }
    }

    #[test]
    fn share_encoding_roundtrip() {
        for g in [Group::test(), Group::ristretto255()] {
            let mut rng = ChaCha20Rng::seed_from_u64(4);
            let k = g.random_scalar(&mut rng);
            for s in share_key(&g, &k, 3, 2, &mut rng).unwrap() {
                assert_eq!(KeyShare::decode(&g, &s.encode(&g)).unwrap(), s);
            }
        }
    }

    proptest! {
        #[test]
        fn blind_unblind_roundtrip(h in 0usize..10, b in 1u64..11) {
            let g = Group::test();
            let nonid: Vec<GroupElement> = g.elements().unwrap().into_iter().filter(|e| !g.is_identity(e)).collect();
            let beta = BlindingFactor(g.scalar(b));
            prop_assert_eq!(&unblind(&g, &blind(&g, &nonid[h], &beta), &beta).unwrap(), &nonid[h]);
        }

        #[test]
        fn any_t_subset_reconstructs(seed in any::<u64>(), t in 1usize..6, extra in 0usize..4) {
            let g = Group::test();
            let n = t + extra;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let k = g.random_scalar(&mut rng);
            let shares = share_key(&g, &k, n, t, &mut rng).unwrap();
            let start = (seed as usize) % (n - t + 1);
            prop_assert_eq!(reconstruct_key(&g, &shares[start..start + t]).unwrap(), k);
        }

        #[test]
        fn ristretto_pipeline_matches_direct(seed in any::<u64>(), msg in proptest::collection::vec(any::<u8>(), 0..32)) {
            let g = Group::ristretto255();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let k = g.random_scalar(&mut rng);
            let shares = share_key(&g, &k, 3, 2, &mut rng).unwrap();
            let beta = BlindingFactor::random(&g, &mut rng);
            prop_assert_eq!(
                evaluate_distributed(&g, &msg, &beta, &[&shares[2], &shares[0]]).unwrap(),
                doprf_direct(&g, &msg, &k)
            );
        }
    }
}
