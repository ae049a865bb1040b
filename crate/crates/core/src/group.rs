//! Prime-order cyclic groups.
//!
//! Two backends sit behind [`Group`]:
//!
//! * a multiplicative subgroup of `Z_p^*` of prime order `q` (the default
//!   test instance is `p = 23`, `q = 11`, `g = 2`, small enough for
//!   brute-force oracles);
//! * ristretto255, for runs that need real security margins.
//!
//! Elements are carried as their canonical byte encoding, so equality of
//! [`GroupElement`] values is equality of group elements. Scalars are
//! integers reduced modulo the group order.

use std::fmt;

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar as DalekScalar;
use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::RngCore;
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroupError {
    #[error("invalid group parameters: {0}")]
    InvalidParameters(&'static str),
    #[error("bytes do not encode an element of this group")]
    InvalidElement,
    #[error("bytes do not encode a scalar of this group")]
    InvalidScalar,
    #[error("scalar has no inverse")]
    NotInvertible,
}

/// Which group instance a scenario runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Backend {
    /// Order-11 subgroup of `Z_23^*`.
    Test,
    /// ristretto255.
    Prod,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Test => "test",
            Backend::Prod => "prod",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "test" => Ok(Backend::Test),
            "prod" => Ok(Backend::Prod),
            other => Err(format!("unknown backend `{other}` (expected test|prod)")),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(Vec<u8>);

impl GroupElement {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({})", hex::encode(&self.0))
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scalar(BigUint);

impl Scalar {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scalar({})", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Kind {
    Modp {
        p: BigUint,
        g: BigUint,
        elem_len: usize,
        scalar_len: usize,
    },
    Ristretto,
}

/// A prime-order group together with its scalar field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    kind: Kind,
    q: BigUint,
    name: String,
}

fn byte_len(n: &BigUint) -> usize {
    n.bits().div_ceil(8).max(1) as usize
}

fn is_probable_prime(n: &BigUint) -> bool {
    // Parameters are tiny test groups; trial division is enough.
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    let mut d = two.clone();
    while &d * &d <= *n {
        if (n % &d).is_zero() {
            return false;
        }
        d += 1u32;
    }
    true
}

impl Group {
    /// The order-11 subgroup of `Z_23^*` generated by 2.
    pub fn test() -> Self {
        Self::modp(23, 11, 2).expect("static parameters are valid")
    }

    pub fn ristretto255() -> Self {
        let q = BigUint::parse_bytes(
            b"7237005577332262213973186563042994240857116359379907606001950938285454250989",
            10,
        )
        .unwrap();
        Group {
            kind: Kind::Ristretto,
            q,
            name: "ristretto255".into(),
        }
    }

    pub fn for_backend(backend: Backend) -> Self {
        match backend {
            Backend::Test => Self::test(),
            Backend::Prod => Self::ristretto255(),
        }
    }

    /// Subgroup of order `q` in `Z_p^*` generated by `g`. Intended for small
    /// hand-checkable instances; primality is checked by trial division.
    pub fn modp(p: u64, q: u64, g: u64) -> Result<Self, GroupError> {
        let (bp, bq, bg) = (BigUint::from(p), BigUint::from(q), BigUint::from(g));
        if !is_probable_prime(&bp) || !is_probable_prime(&bq) {
            return Err(GroupError::InvalidParameters("p and q must be prime"));
        }
        if !(p - 1).is_multiple_of(q) {
            return Err(GroupError::InvalidParameters("q must divide p - 1"));
        }
        if g <= 1 || g >= p || !bg.modpow(&bq, &bp).is_one() {
            return Err(GroupError::InvalidParameters("g must generate the order-q subgroup"));
        }
        Ok(Group {
            kind: Kind::Modp {
                elem_len: byte_len(&bp),
                scalar_len: byte_len(&bq),
                p: bp,
                g: bg,
            },
            q: bq,
            name: format!("modp-{p}-{q}-{g}"),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Group order `q`.
    pub fn order(&self) -> &BigUint {
        &self.q
    }

    pub fn element_len(&self) -> usize {
        match &self.kind {
            Kind::Modp { elem_len, .. } => *elem_len,
            Kind::Ristretto => 32,
        }
    }

    pub fn scalar_len(&self) -> usize {
        match &self.kind {
            Kind::Modp { scalar_len, .. } => *scalar_len,
            Kind::Ristretto => 32,
        }
    }

    pub fn generator(&self) -> GroupElement {
        match &self.kind {
            Kind::Modp { g, elem_len, .. } => GroupElement(be_fixed(g, *elem_len)),
            Kind::Ristretto => GroupElement(RISTRETTO_BASEPOINT_POINT.compress().to_bytes().to_vec()),
        }
    }

    pub fn identity(&self) -> GroupElement {
        match &self.kind {
            Kind::Modp { elem_len, .. } => GroupElement(be_fixed(&BigUint::one(), *elem_len)),
            Kind::Ristretto => GroupElement(vec![0u8; 32]),
        }
    }

    pub fn is_identity(&self, x: &GroupElement) -> bool {
        *x == self.identity()
    }

    /// `base^e`.
    pub fn exp(&self, base: &GroupElement, e: &Scalar) -> GroupElement {
        match &self.kind {
            Kind::Modp { p, elem_len, .. } => {
                let b = BigUint::from_bytes_be(&base.0);
                GroupElement(be_fixed(&b.modpow(&e.0, p), *elem_len))
            }
            Kind::Ristretto => {
                let point = decompress(base);
                let s = self.dalek_scalar(e);
                GroupElement((point * s).compress().to_bytes().to_vec())
            }
        }
    }

    /// Group operation.
    pub fn mul(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        match &self.kind {
            Kind::Modp { p, elem_len, .. } => {
                let x = BigUint::from_bytes_be(&a.0) * BigUint::from_bytes_be(&b.0) % p;
                GroupElement(be_fixed(&x, *elem_len))
            }
            Kind::Ristretto => {
                GroupElement((decompress(a) + decompress(b)).compress().to_bytes().to_vec())
            }
        }
    }

    /// Deterministic hash into the group that never yields the identity.
    ///
    /// The mod-p backend maps `msg` to `g^(SHA-256(msg) mod q)`, with a zero
    /// exponent remapped to `g`; ristretto255 uses its standard
    /// hash-to-group over SHA-512.
    pub fn hash_to_group(&self, msg: &[u8]) -> GroupElement {
        match &self.kind {
            Kind::Modp { .. } => {
                let digest = Sha256::digest(msg);
                let e = BigUint::from_bytes_be(&digest) % &self.q;
                self.exp_generator_nonzero(&e)
            }
            Kind::Ristretto => {
                let point = RistrettoPoint::hash_from_bytes::<Sha512>(msg);
                let out = GroupElement(point.compress().to_bytes().to_vec());
                if self.is_identity(&out) {
                    self.generator()
                } else {
                    out
                }
            }
        }
    }

    /// The mod-p rule `g^(h mod q)` for an already-reduced exponent `h`,
    /// remapping `h = 0` to `g`. Exposed so the remap can be tested directly.
    pub fn exp_generator_nonzero(&self, h: &BigUint) -> GroupElement {
        let e = h % &self.q;
        if e.is_zero() {
            self.generator()
        } else {
            self.exp(&self.generator(), &Scalar(e))
        }
    }

    pub fn element_from_bytes(&self, bytes: &[u8]) -> Result<GroupElement, GroupError> {
        if bytes.len() != self.element_len() {
            return Err(GroupError::InvalidElement);
        }
        match &self.kind {
            Kind::Modp { p, .. } => {
                let x = BigUint::from_bytes_be(bytes);
                if x.is_zero() || x >= *p || !x.modpow(&self.q, p).is_one() {
                    return Err(GroupError::InvalidElement);
                }
                Ok(GroupElement(bytes.to_vec()))
            }
            Kind::Ristretto => {
                let c = CompressedRistretto::from_slice(bytes).map_err(|_| GroupError::InvalidElement)?;
                c.decompress().ok_or(GroupError::InvalidElement)?;
                Ok(GroupElement(bytes.to_vec()))
            }
        }
    }

    /// Every element of the group, for backends small enough to enumerate.
    pub fn elements(&self) -> Option<Vec<GroupElement>> {
        match &self.kind {
            Kind::Modp { .. } if self.q <= BigUint::from(1u32 << 16) => {
                let g = self.generator();
                let q: u64 = self.q.clone().try_into().ok()?;
                Some((0..q).map(|e| self.exp(&g, &self.scalar(e))).collect())
            }
            _ => None,
        }
    }

    // ---- scalars ----

    pub fn scalar(&self, v: u64) -> Scalar {
        Scalar(BigUint::from(v) % &self.q)
    }

    pub fn scalar_from_biguint(&self, v: &BigUint) -> Scalar {
        Scalar(v % &self.q)
    }

    /// Scalar from an arbitrary integer, reducing negatives mod `q`.
    pub fn scalar_from_i64(&self, v: i64) -> Scalar {
        let s = self.scalar(v.unsigned_abs());
        if v < 0 {
            self.neg(&s)
        } else {
            s
        }
    }

    pub fn random_scalar<R: RngCore + ?Sized>(&self, rng: &mut R) -> Scalar {
        let mut rng = RngAdapter(rng);
        Scalar(rng.gen_biguint_below(&self.q))
    }

    pub fn random_nonzero_scalar<R: RngCore + ?Sized>(&self, rng: &mut R) -> Scalar {
        let mut rng = RngAdapter(rng);
        Scalar(rng.gen_biguint_range(&BigUint::one(), &self.q))
    }

    pub fn add(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 + &b.0) % &self.q)
    }

    pub fn sub(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 + &self.q - &b.0) % &self.q)
    }

    pub fn mul_scalar(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 * &b.0) % &self.q)
    }

    pub fn neg(&self, a: &Scalar) -> Scalar {
        Scalar((&self.q - &a.0) % &self.q)
    }

    /// Multiplicative inverse mod `q` (Fermat, `q` prime).
    pub fn inv(&self, a: &Scalar) -> Result<Scalar, GroupError> {
        if a.0.is_zero() {
            return Err(GroupError::NotInvertible);
        }
        let exp = &self.q - BigUint::from(2u32);
        Ok(Scalar(a.0.modpow(&exp, &self.q)))
    }

    pub fn scalar_to_bytes(&self, s: &Scalar) -> Vec<u8> {
        match &self.kind {
            Kind::Modp { scalar_len, .. } => be_fixed(&s.0, *scalar_len),
            Kind::Ristretto => {
                let mut le = s.0.to_bytes_le();
                le.resize(32, 0);
                le
            }
        }
    }

    pub fn scalar_from_bytes(&self, bytes: &[u8]) -> Result<Scalar, GroupError> {
        if bytes.len() != self.scalar_len() {
            return Err(GroupError::InvalidScalar);
        }
        let v = match &self.kind {
            Kind::Modp { .. } => BigUint::from_bytes_be(bytes),
            Kind::Ristretto => BigUint::from_bytes_le(bytes),
        };
        if v >= self.q {
            return Err(GroupError::InvalidScalar);
        }
        Ok(Scalar(v))
    }

    fn dalek_scalar(&self, s: &Scalar) -> DalekScalar {
        let mut le = s.0.to_bytes_le();
        le.resize(32, 0);
        DalekScalar::from_bytes_mod_order(le.try_into().unwrap())
    }
}

fn decompress(x: &GroupElement) -> RistrettoPoint {
    CompressedRistretto::from_slice(&x.0)
        .ok()
        .and_then(|c| c.decompress())
        .expect("group elements are validated on construction")
}

fn be_fixed(v: &BigUint, len: usize) -> Vec<u8> {
    let raw = v.to_bytes_be();
    let mut out = vec![0u8; len.saturating_sub(raw.len())];
    out.extend_from_slice(&raw);
    out
}

/// `num-bigint` wants a sized `rand::Rng`; this forwards to any `RngCore`.
struct RngAdapter<'a, R: RngCore + ?Sized>(&'a mut R);

impl<R: RngCore + ?Sized> RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn el(g: &Group, v: u8) -> GroupElement {
        g.element_from_bytes(&[v]).unwrap()
    }

    /// Square-and-multiply over u64, independent of the BigUint path.
    fn modpow_oracle(base: u64, mut e: u64, m: u64) -> u64 {
        let (mut acc, mut b) = (1u64, base % m);
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * b % m;
            }
            b = b * b % m;
            e >>= 1;
        }
        acc
    }

    #[test]
    fn exp_examples() {
        let g = Group::test();
        assert_eq!(g.exp(&el(&g, 2), &g.scalar(1)), el(&g, 2));
        assert_eq!(modpow_oracle(2, 5, 23), 9);
        assert_eq!(g.exp(&el(&g, 2), &g.scalar(5)), el(&g, 9));
        let inner = g.exp(&el(&g, 2), &g.scalar(3));
        assert_eq!(g.exp(&inner, &g.scalar(4)), el(&g, 2));
    }

    #[test]
    fn exponent_composition_is_exhaustive_in_test_group() {
        let g = Group::test();
        for x in g.elements().unwrap() {
            for a in 0..11 {
                for b in 0..11 {
                    let lhs = g.exp(&g.exp(&x, &g.scalar(a)), &g.scalar(b));
                    let rhs = g.exp(&x, &g.scalar(a * b % 11));
                    assert_eq!(lhs, rhs);
                    let oracle = modpow_oracle(x.as_bytes()[0] as u64, a * b, 23) as u8;
                    assert_eq!(lhs.as_bytes(), &[oracle]);
                }
            }
        }
    }

    #[test]
    fn generator_has_order_q() {
        let g = Group::test();
        assert_eq!(g.exp(&g.generator(), &Scalar(BigUint::from(11u32))), g.identity());
        let elems = g.elements().unwrap();
        let distinct: std::collections::BTreeSet<_> = elems.iter().collect();
        assert_eq!(distinct.len(), 11);
    }

    #[test]
    fn hash_to_group_is_deterministic_and_never_identity() {
        for g in [Group::test(), Group::ristretto255()] {
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            for _ in 0..300 {
                let len = rng.gen_range(0..40);
                let msg: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                let a = g.hash_to_group(&msg);
                assert_eq!(a, g.hash_to_group(&msg));
                assert!(!g.is_identity(&a));
            }
        }
    }

    #[test]
    fn identity_exponent_is_remapped_to_generator() {
        let g = Group::test();
        assert_eq!(g.exp_generator_nonzero(&BigUint::zero()), g.generator());
        assert_eq!(g.exp_generator_nonzero(&BigUint::from(11u32)), g.generator());
        assert_eq!(g.exp_generator_nonzero(&BigUint::from(5u32)), el(&g, 9));
    }

    #[test]
    fn ristretto_hash_collision_scan() {
        let g = Group::ristretto255();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a: [u8; 16] = rng.gen();
            let mut b: [u8; 16] = rng.gen();
            if a == b {
                b[0] ^= 1;
            }
            assert_ne!(g.hash_to_group(&a), g.hash_to_group(&b));
        }
    }

    #[test]
    fn test_backend_hash_distribution_matches_remap_rule() {
        // Only ten possible outputs, so collisions between distinct inputs are
        // expected; the oracle is the output distribution. Exponents 0 and 1
        // both land on g, so g carries twice the weight of the others.
        let g = Group::test();
        let mut counts = std::collections::BTreeMap::new();
        for i in 0u32..11_000 {
            *counts.entry(g.hash_to_group(&i.to_be_bytes())).or_insert(0u32) += 1;
        }
        assert_eq!(counts.len(), 10);
        for (e, c) in &counts {
            let expected = if *e == g.generator() { 2000 } else { 1000 };
            let slack = expected / 7;
            assert!(c.abs_diff(expected) < slack, "bucket {e:?} count {c}");
        }
    }

    #[test]
    fn element_decoding_rejects_non_members() {
        let g = Group::test();
        // 5 is a non-residue mod 23, so it lies outside the order-11 subgroup.
        assert_eq!(g.element_from_bytes(&[5]), Err(GroupError::InvalidElement));
        assert_eq!(g.element_from_bytes(&[0]), Err(GroupError::InvalidElement));
        assert_eq!(g.element_from_bytes(&[23]), Err(GroupError::InvalidElement));
        assert!(g.element_from_bytes(&[18]).is_ok());
    }

    #[test]
    fn scalar_arithmetic_and_inverse() {
        let g = Group::test();
        assert_eq!(g.inv(&g.scalar(3)).unwrap(), g.scalar(4));
        assert_eq!(g.inv(&g.scalar(0)), Err(GroupError::NotInvertible));
        assert_eq!(g.scalar_from_i64(-1), g.scalar(10));
        assert_eq!(g.sub(&g.scalar(2), &g.scalar(5)), g.scalar(8));
        let r = Group::ristretto255();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = r.random_nonzero_scalar(&mut rng);
        assert_eq!(r.mul_scalar(&a, &r.inv(&a).unwrap()), r.scalar(1));
        let bytes = r.scalar_to_bytes(&a);
        assert_eq!(r.scalar_from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn ristretto_exponent_composition() {
        let g = Group::ristretto255();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = g.hash_to_group(b"x");
        let a = g.random_scalar(&mut rng);
        let b = g.random_scalar(&mut rng);
        assert_eq!(g.exp(&g.exp(&x, &a), &b), g.exp(&x, &g.mul_scalar(&a, &b)));
        assert_eq!(g.exp(&x, &g.scalar(0)), g.identity());
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(Group::modp(23, 7, 2).is_err());
        assert!(Group::modp(23, 11, 5).is_err());
        assert!(Group::modp(24, 11, 2).is_err());
    }
}
