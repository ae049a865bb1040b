//! Messages as terms.
//!
//! Every message a role emits is built as a [`Term`]: a tree that knows its
//! exact wire bytes *and* how those bytes were formed (which key sealed a
//! record, which exponents were applied to which base). The wire bytes are
//! what the network carries and the adversary manipulates; the symbolic
//! shape ([`KTerm`]) is what the knowledge closure reasons about.
//!
//! Group elements are compared symbolically (base plus exponent vector)
//! rather than by value: in the test group there are only ten non-identity
//! elements, so byte equality between two group elements says nothing about
//! what an observer has learned.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use crate::encoding::{frame, unframe, DecodeError};
use crate::group::{Group, GroupElement};

/// Name of a secret exponent.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScalarName {
    Named(String),
    /// Shamir share `index` of the scalar called `secret`.
    Share { secret: String, index: u32 },
}

impl ScalarName {
    pub fn named(s: impl Into<String>) -> Self {
        ScalarName::Named(s.into())
    }
}

impl fmt::Debug for ScalarName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarName::Named(n) => write!(f, "{n}"),
            ScalarName::Share { secret, index } => write!(f, "{secret}[{index}]"),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EltBase {
    Generator,
    /// `hash_to_group(bytes)`.
    Hashed(Vec<u8>),
    /// An element whose provenance is unknown (adversary-supplied bytes).
    Opaque(Vec<u8>),
}

/// Symbolic group element: `base` raised to the product of the named
/// exponents, each to its coefficient.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymElt {
    pub base: EltBase,
    pub exps: BTreeMap<ScalarName, i64>,
}

impl SymElt {
    pub fn generator() -> Self {
        Self::from_base(EltBase::Generator)
    }

    pub fn hashed(msg: &[u8]) -> Self {
        Self::from_base(EltBase::Hashed(msg.to_vec()))
    }

    pub fn opaque(bytes: &[u8]) -> Self {
        Self::from_base(EltBase::Opaque(bytes.to_vec()))
    }

    pub fn from_base(base: EltBase) -> Self {
        SymElt {
            base,
            exps: BTreeMap::new(),
        }
    }

    /// `self^(name * coeff)`.
    pub fn pow(&self, name: &ScalarName, coeff: i64) -> Self {
        let mut out = self.clone();
        let e = out.exps.entry(name.clone()).or_insert(0);
        *e += coeff;
        if *e == 0 {
            out.exps.remove(name);
        }
        out
    }

    /// Symbolic result of Lagrange-combining evaluations `x^(E·share_i)` of
    /// the same `x^E`: returns `x^(E·secret)`. `None` when the inputs do
    /// not have that shape.
    pub fn combine_shares(inputs: &[SymElt]) -> Option<SymElt> {
        let mut secret_name = None;
        let mut common: Option<SymElt> = None;
        let mut seen = std::collections::BTreeSet::new();
        for inp in inputs {
            let shares: Vec<_> = inp
                .exps
                .iter()
                .filter_map(|(n, c)| match n {
                    ScalarName::Share { secret, index } if *c == 1 => Some((secret.clone(), *index)),
                    _ => None,
                })
                .collect();
            let [(secret, index)] = shares.as_slice() else {
                return None;
            };
            match &secret_name {
                None => secret_name = Some(secret.clone()),
                Some(s) if s != secret => return None,
                _ => {}
            }
            if !seen.insert(*index) {
                return None;
            }
            let rest = inp.pow(
                &ScalarName::Share {
                    secret: secret.clone(),
                    index: *index,
                },
                -1,
            );
            match &common {
                None => common = Some(rest),
                Some(c) if *c != rest => return None,
                _ => {}
            }
        }
        let secret = secret_name?;
        Some(common?.pow(&ScalarName::Named(secret), 1))
    }
}

impl fmt::Debug for SymElt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.base {
            EltBase::Generator => write!(f, "g")?,
            EltBase::Hashed(m) => write!(f, "M({})", short_hex(m))?,
            EltBase::Opaque(b) => write!(f, "?({})", short_hex(b))?,
        }
        if !self.exps.is_empty() {
            write!(f, "^(")?;
            for (i, (n, c)) in self.exps.iter().enumerate() {
                if i > 0 {
                    write!(f, "+")?;
                }
                if *c == 1 {
                    write!(f, "{n:?}")?;
                } else {
                    write!(f, "{c}*{n:?}")?;
                }
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

fn short_hex(b: &[u8]) -> String {
    if b.len() <= 8 {
        hex::encode(b)
    } else {
        format!("{}..", hex::encode(&b[..6]))
    }
}

/// Symbolic view of a message, used by the knowledge closure.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KTerm {
    Atom(Vec<u8>),
    /// Public protocol constant (labels, tags).
    Const(String),
    Scalar(ScalarName),
    Elt(SymElt),
    /// Concatenation that a receiver can split at known boundaries.
    Seq(Vec<KTerm>),
    Hash(Vec<KTerm>),
    Enc { key: Box<KTerm>, body: Box<KTerm> },
    /// Signature by the holder of `signer` over `over`. Reveals nothing
    /// beyond itself.
    Sig { signer: Vec<u8>, over: Box<KTerm> },
    /// Private signing key whose public half is `0`.
    SigningKey(Vec<u8>),
}

impl fmt::Debug for KTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KTerm::Atom(b) => write!(f, "#{}", short_hex(b)),
            KTerm::Const(c) => write!(f, "\"{c}\""),
            KTerm::Scalar(n) => write!(f, "{n:?}"),
            KTerm::Elt(e) => write!(f, "{e:?}"),
            KTerm::Seq(parts) => f.debug_list().entries(parts).finish(),
            KTerm::Hash(parts) => {
                write!(f, "h")?;
                f.debug_tuple("").field(parts).finish()
            }
            KTerm::Enc { key, body } => write!(f, "enc({body:?}, {key:?})"),
            KTerm::Sig { signer, over } => write!(f, "sig[{}]({over:?})", short_hex(signer)),
            KTerm::SigningKey(k) => write!(f, "sk[{}]", short_hex(k)),
        }
    }
}

/// A concrete message with its symbolic provenance.
#[derive(Clone, PartialEq, Eq)]
pub enum Term {
    Atom(Vec<u8>),
    Const(&'static str),
    Elt { bytes: Vec<u8>, sym: SymElt },
    /// Canonically framed structure (length-prefixed fields).
    Seq(Vec<Term>),
    /// Raw concatenation; only used where leading fields have fixed width.
    Cat(Vec<Term>),
    /// An AEAD record.
    Sealed { wire: Vec<u8>, key: KTerm, body: Box<Term> },
    Signed { sig: Vec<u8>, signer: Vec<u8>, over: KTerm },
    /// A digest; `parts` is what was hashed.
    Hashed { digest: Vec<u8>, parts: Vec<KTerm> },
}

impl fmt::Debug for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.knowledge())
    }
}

impl Term {
    pub fn atom(b: impl Into<Vec<u8>>) -> Self {
        Term::Atom(b.into())
    }

    pub fn elt(value: &GroupElement, sym: SymElt) -> Self {
        Term::Elt {
            bytes: value.as_bytes().to_vec(),
            sym,
        }
    }

    pub fn u64(v: u64) -> Self {
        Term::Atom(v.to_be_bytes().to_vec())
    }

    pub fn u8(v: u8) -> Self {
        Term::Atom(vec![v])
    }

    /// Exact bytes this term occupies on the wire.
    pub fn wire(&self) -> Vec<u8> {
        match self {
            Term::Atom(b) => b.clone(),
            Term::Const(c) => c.as_bytes().to_vec(),
            Term::Elt { bytes, .. } => bytes.clone(),
            Term::Seq(children) => {
                let parts: Vec<Vec<u8>> = children.iter().map(Term::wire).collect();
                frame(&parts)
            }
            Term::Cat(children) => children.iter().flat_map(Term::wire).collect(),
            Term::Sealed { wire, .. } => wire.clone(),
            Term::Signed { sig, .. } => sig.clone(),
            Term::Hashed { digest, .. } => digest.clone(),
        }
    }

    pub fn knowledge(&self) -> KTerm {
        match self {
            Term::Atom(b) => KTerm::Atom(b.clone()),
            Term::Const(c) => KTerm::Const((*c).to_string()),
            Term::Elt { sym, .. } => KTerm::Elt(sym.clone()),
            Term::Seq(children) | Term::Cat(children) => {
                KTerm::Seq(children.iter().map(Term::knowledge).collect())
            }
            Term::Sealed { key, body, .. } => KTerm::Enc {
                key: Box::new(key.clone()),
                body: Box::new(body.knowledge()),
            },
            Term::Signed { signer, over, .. } => KTerm::Sig {
                signer: signer.clone(),
                over: Box::new(over.clone()),
            },
            Term::Hashed { parts, .. } => KTerm::Hash(parts.clone()),
        }
    }

    /// If this term is a record sealed under `key` whose body matches
    /// `plaintext`, the body; otherwise the plaintext as an opaque atom.
    pub fn unsealed(&self, key: &KTerm, plaintext: &[u8]) -> Term {
        match self {
            Term::Sealed { key: k, body, .. } if k == key && body.wire() == plaintext => (**body).clone(),
            _ => Term::Atom(plaintext.to_vec()),
        }
    }
}

#[derive(Debug, Clone)]
enum Cursor {
    Terms(VecDeque<Term>),
    Bytes(Vec<u8>, usize),
}

/// Reads the fields of a message term in order, keeping each field's
/// symbolic shape when the term carries one and falling back to raw bytes
/// otherwise.
#[derive(Debug, Clone)]
pub struct TermReader {
    cursor: Cursor,
    framed: bool,
}

impl TermReader {
    /// Reader over a canonically framed structure.
    pub fn framed(term: &Term) -> Result<Self, DecodeError> {
        let cursor = match term {
            Term::Seq(children) => Cursor::Terms(children.iter().cloned().collect()),
            other => {
                let bytes = other.wire();
                unframe(&bytes)?;
                Cursor::Bytes(bytes, 0)
            }
        };
        Ok(TermReader { cursor, framed: true })
    }

    /// Reader over a raw concatenation.
    pub fn raw(term: &Term) -> Self {
        let cursor = match term {
            Term::Cat(children) => Cursor::Terms(children.iter().cloned().collect()),
            other => Cursor::Bytes(other.wire(), 0),
        };
        TermReader { cursor, framed: false }
    }

    /// Next framed field.
    pub fn field(&mut self) -> Result<Term, DecodeError> {
        debug_assert!(self.framed, "field() on a raw reader");
        match &mut self.cursor {
            Cursor::Terms(q) => q.pop_front().ok_or(DecodeError::Truncated),
            Cursor::Bytes(b, pos) => {
                let mut dec = crate::encoding::Decoder::new(&b[*pos..]);
                let f = dec.field()?.to_vec();
                *pos += 4 + f.len();
                Ok(Term::Atom(f))
            }
        }
    }

    /// Next `n` bytes of a raw concatenation.
    pub fn fixed(&mut self, n: usize) -> Result<Term, DecodeError> {
        match &mut self.cursor {
            Cursor::Terms(q) => {
                let t = q.pop_front().ok_or(DecodeError::Truncated)?;
                if t.wire().len() != n {
                    return Err(DecodeError::Invalid("fixed-width field"));
                }
                Ok(t)
            }
            Cursor::Bytes(b, pos) => {
                if b.len() < *pos + n {
                    return Err(DecodeError::Truncated);
                }
                let t = Term::Atom(b[*pos..*pos + n].to_vec());
                *pos += n;
                Ok(t)
            }
        }
    }

    /// Everything left in a raw concatenation, as one term.
    pub fn rest(&mut self) -> Result<Term, DecodeError> {
        match &mut self.cursor {
            Cursor::Terms(q) => {
                if q.len() != 1 {
                    return Err(DecodeError::Invalid("unexpected trailing structure"));
                }
                Ok(q.pop_front().unwrap())
            }
            Cursor::Bytes(b, pos) => {
                let t = Term::Atom(b[*pos..].to_vec());
                *pos = b.len();
                Ok(t)
            }
        }
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        Ok(self.field()?.wire())
    }

    pub fn fixed_bytes<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let b = if self.framed { self.bytes()? } else { self.fixed(N)?.wire() };
        b.try_into().map_err(|_| DecodeError::Invalid("fixed-width field"))
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.fixed_bytes::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.fixed_bytes::<4>()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.fixed_bytes::<8>()?))
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        String::from_utf8(self.bytes()?).map_err(|_| DecodeError::Invalid("utf-8 text"))
    }

    /// Next field as a group element together with its symbolic form.
    pub fn elt(&mut self, group: &Group) -> Result<(GroupElement, SymElt), DecodeError> {
        let t = self.field()?;
        let bytes = t.wire();
        let value = group
            .element_from_bytes(&bytes)
            .map_err(|_| DecodeError::Invalid("group element"))?;
        let sym = match t {
            Term::Elt { sym, .. } => sym,
            _ => SymElt::opaque(&bytes),
        };
        Ok((value, sym))
    }

    /// Nested framed structure.
    pub fn nested(&mut self) -> Result<TermReader, DecodeError> {
        let t = self.field()?;
        TermReader::framed(&t)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.cursor {
            Cursor::Terms(q) if q.is_empty() => Ok(()),
            Cursor::Terms(q) => Err(DecodeError::TrailingBytes(q.len())),
            Cursor::Bytes(b, pos) if pos == b.len() => Ok(()),
            Cursor::Bytes(b, pos) => Err(DecodeError::TrailingBytes(b.len() - pos)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(group: &Group) -> Term {
        let h = group.hash_to_group(b"seq");
        Term::Cat(vec![
            Term::atom(vec![1u8; 4]),
            Term::Seq(vec![
                Term::Const("label"),
                Term::elt(&h, SymElt::hashed(b"seq")),
                Term::u64(9),
            ]),
        ])
    }

    #[test]
    fn reader_sees_same_fields_from_term_and_from_bytes() {
        let g = Group::test();
        let t = sample(&g);
        for source in [t.clone(), Term::Atom(t.wire())] {
            let mut raw = TermReader::raw(&source);
            assert_eq!(raw.fixed(4).unwrap().wire(), vec![1u8; 4]);
            let mut inner = TermReader::framed(&raw.rest().unwrap()).unwrap();
            assert_eq!(inner.string().unwrap(), "label");
            let (value, _) = inner.elt(&g).unwrap();
            assert_eq!(value, g.hash_to_group(b"seq"));
            assert_eq!(inner.u64().unwrap(), 9);
            inner.finish().unwrap();
        }
    }

    #[test]
    fn symbolic_shape_survives_only_for_structured_terms() {
        let g = Group::test();
        let t = sample(&g);
        let mut raw = TermReader::raw(&t);
        raw.fixed(4).unwrap();
        let mut inner = TermReader::framed(&raw.rest().unwrap()).unwrap();
        inner.field().unwrap();
        assert_eq!(inner.elt(&g).unwrap().1, SymElt::hashed(b"seq"));

        let mut raw = TermReader::raw(&Term::Atom(t.wire()));
        raw.fixed(4).unwrap();
        let mut inner = TermReader::framed(&raw.rest().unwrap()).unwrap();
        inner.field().unwrap();
        assert!(matches!(inner.elt(&g).unwrap().1.base, EltBase::Opaque(_)));
    }

    #[test]
    fn pow_cancels_to_base() {
        let beta = ScalarName::named("beta");
        let x = SymElt::hashed(b"s").pow(&beta, 1).pow(&beta, -1);
        assert_eq!(x, SymElt::hashed(b"s"));
    }

    #[test]
    fn combine_shares_requires_consistent_inputs() {
        let beta = ScalarName::named("beta");
        let blinded = SymElt::hashed(b"s").pow(&beta, 1);
        let share = |i| ScalarName::Share {
            secret: "k".into(),
            index: i,
        };
        let ys = [blinded.pow(&share(1), 1), blinded.pow(&share(3), 1)];
        let combined = SymElt::combine_shares(&ys).unwrap();
        assert_eq!(combined, blinded.pow(&ScalarName::named("k"), 1));
        assert!(SymElt::combine_shares(&[ys[0].clone(), ys[0].clone()]).is_none());
        let other = SymElt::hashed(b"t").pow(&share(2), 1);
        assert!(SymElt::combine_shares(&[ys[0].clone(), other]).is_none());
    }
}
