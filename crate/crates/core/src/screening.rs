//! Screening logic shared by the synthesizer, keyservers, the keyed hashed
//! database and the authentication backend: hazard databases, verdicts,
//! one-time codes and the application messages exchanged inside channels.
//!
//! Application messages (channel record plaintexts):
//!
//! * keyserver request: `["eval", ω, [x_1..x_n]]`, reply `["ok", [y_1..y_n]]`
//! * database request: `["query", ω, [h_1..h_n], exemption]` where
//!   `exemption` is `[]` or `[ELT chain, code, [e_1..e_m]]`;
//!   reply `["resp", body, binding]` with `binding` empty unless responses
//!   are bound to requests
//! * auth backend request: `["auth", device, code, timestamp]`, reply `["auth-ok"]` or `["auth-reject"]`
//! * any server may instead reply `["error", name]`

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::channel::ChannelError;
use crate::crypto::{sha256, sign, verify, KeyPair, Signature, VerifyKey};
use crate::doprf::{doprf_direct, DoprfError};
use crate::encoding::{frame, unframe, DecodeError, Decoder, Encoder};
use crate::group::{Group, GroupElement, Scalar};
use crate::pki::CertChain;
use crate::scep::ScepError;
use crate::term::{KTerm, SymElt, Term, TermReader};

/// A group element paired with its symbolic form.
pub type Tagged = (GroupElement, SymElt);

/// Exemption part of a database request: token, second-factor code and
/// keyed hashes of the exempt sequences.
pub type ExemptionArgs<'a> = (&'a CertChain, &'a str, &'a [Tagged]);

pub const DEFAULT_MAX_SEQUENCE_LEN: usize = 30;
pub const TOTP_STEP_SECS: u64 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScreeningError {
    #[error("cookie does not match an authenticated connection")]
    BadCookie,
    #[error("rate limit exceeded")]
    RateLimited,
    #[error("exemption-list token rejected: {0}")]
    BadEltChain(String),
    #[error("authentication backend rejected the code")]
    AuthBackendRejected,
    #[error("unknown authenticator device `{0}`")]
    UnknownDevice(String),
    #[error("response not bound to this request")]
    BindingMismatch,
    #[error("expected {expected} verdicts, got {got}")]
    VerdictCountMismatch { expected: usize, got: usize },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("server reported {0}")]
    Remote(String),
    #[error("no response (message lost or withheld)")]
    Stalled,
    #[error("not enough keyservers: need {needed}, have {available}")]
    NotEnoughKeyservers { needed: usize, available: usize },
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("scep: {0}")]
    Scep(#[from] ScepError),
    #[error("doprf: {0}")]
    Doprf(#[from] DoprfError),
    #[error("malformed message: {0}")]
    Malformed(#[from] DecodeError),
}

impl ScreeningError {
    pub fn name(&self) -> &'static str {
        match self {
            ScreeningError::BadCookie => "BadCookie",
            ScreeningError::RateLimited => "RateLimited",
            ScreeningError::BadEltChain(_) => "BadEltChain",
            ScreeningError::AuthBackendRejected => "AuthBackendRejected",
            ScreeningError::UnknownDevice(_) => "UnknownDevice",
            ScreeningError::BindingMismatch => "BindingMismatch",
            ScreeningError::VerdictCountMismatch { .. } => "VerdictCountMismatch",
            ScreeningError::InvalidSequence(_) => "InvalidSequence",
            ScreeningError::Remote(_) => "Remote",
            ScreeningError::Stalled => "Stalled",
            ScreeningError::NotEnoughKeyservers { .. } => "NotEnoughKeyservers",
            ScreeningError::Channel(e) => e.name(),
            ScreeningError::Scep(e) => e.name(),
            ScreeningError::Doprf(_) => "Doprf",
            ScreeningError::Malformed(_) => "Malformed",
        }
    }

    /// Reconstructs an error reported by a server under its name.
    pub fn from_remote(name: &str) -> Self {
        match name {
            "BadCookie" => ScreeningError::BadCookie,
            "RateLimited" => ScreeningError::RateLimited,
            "AuthBackendRejected" => ScreeningError::AuthBackendRejected,
            other if other.starts_with("BadEltChain") => ScreeningError::BadEltChain(other.to_string()),
            other => ScreeningError::Remote(other.to_string()),
        }
    }
}

pub fn validate_sequence(s: &[u8], max_len: usize) -> Result<(), ScreeningError> {
    if s.is_empty() {
        return Err(ScreeningError::InvalidSequence("empty".into()));
    }
    if s.len() > max_len {
        return Err(ScreeningError::InvalidSequence(format!("{} bytes exceeds {max_len}", s.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HazardRecord {
    pub sequence: Vec<u8>,
    pub name: String,
    pub reason: String,
}

/// Parses `hex,name,reason` lines. Blank lines and `#` comments are skipped.
pub fn parse_hazard_file(text: &str) -> Result<Vec<HazardRecord>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (Some(h), Some(name), Some(reason)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("line {}: expected `hex,name,reason`", n + 1));
        };
        let sequence = hex::decode(h.trim()).map_err(|e| format!("line {}: {e}", n + 1))?;
        validate_sequence(&sequence, usize::MAX).map_err(|e| format!("line {}: {e}", n + 1))?;
        out.push(HazardRecord {
            sequence,
            name: name.trim().to_string(),
            reason: reason.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn write_hazard_file(records: &[HazardRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{},{},{}\n", hex::encode(&r.sequence), r.name, r.reason))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct HazardInfo {
    pub name: String,
    pub reason: String,
}

/// Keyed hashes `f_k(s)` of the hazard list with their annotations. The
/// plaintext sequences are not retained.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HazardDb {
    entries: BTreeMap<GroupElement, HazardInfo>,
}

impl HazardDb {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, h: &GroupElement) -> bool {
        self.entries.contains_key(h)
    }

    pub fn info(&self, h: &GroupElement) -> Option<&HazardInfo> {
        self.entries.get(h)
    }

    pub fn entries(&self) -> impl Iterator<Item = &GroupElement> {
        self.entries.keys()
    }

    /// Sorted canonical encoding.
    pub fn encode(&self) -> Vec<u8> {
        let items: Vec<Vec<u8>> = self
            .entries
            .iter()
            .map(|(e, i)| Encoder::new().bytes(e.as_bytes()).str(&i.name).str(&i.reason).finish())
            .collect();
        frame(&items)
    }

    pub fn decode(group: &Group, bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut entries = BTreeMap::new();
        for item in unframe(bytes)? {
            let mut d = Decoder::new(item);
            let e = group
                .element_from_bytes(d.field()?)
                .map_err(|_| DecodeError::Invalid("group element"))?;
            let info = HazardInfo {
                name: d.string()?,
                reason: d.string()?,
            };
            d.finish()?;
            entries.insert(e, info);
        }
        Ok(HazardDb { entries })
    }
}

/// Keyed-hashes every hazard. Where two records hash to the same entry the
/// first annotation is kept.
pub fn build_hdb(group: &Group, hazards: &[HazardRecord], k: &Scalar) -> HazardDb {
    let mut entries = BTreeMap::new();
    for r in hazards {
        entries.entry(doprf_direct(group, &r.sequence, k)).or_insert_with(|| HazardInfo {
            name: r.name.clone(),
            reason: r.reason.clone(),
        });
    }
    HazardDb { entries }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Clear,
    /// Annotation is `None` when metadata is withheld.
    Hit(Option<HazardInfo>),
    HitExempt,
}

impl Verdict {
    pub fn is_hit(&self) -> bool {
        matches!(self, Verdict::Hit(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overall {
    Grant,
    Deny,
}

impl fmt::Display for Overall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Overall::Grant => "GRANT",
            Overall::Deny => "DENY",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResponse {
    pub verdicts: Vec<Verdict>,
}

impl QueryResponse {
    pub fn new(verdicts: Vec<Verdict>) -> Self {
        QueryResponse { verdicts }
    }

    /// Grant iff no sequence is an unexempted hit.
    pub fn overall(&self) -> Overall {
        if self.verdicts.iter().any(Verdict::is_hit) {
            Overall::Deny
        } else {
            Overall::Grant
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let items: Vec<Vec<u8>> = self
            .verdicts
            .iter()
            .map(|v| match v {
                Verdict::Clear => Encoder::new().u8(0).finish(),
                Verdict::HitExempt => Encoder::new().u8(2).finish(),
                Verdict::Hit(None) => Encoder::new().u8(1).finish(),
                Verdict::Hit(Some(i)) => Encoder::new().u8(1).str(&i.name).str(&i.reason).finish(),
            })
            .collect();
        Encoder::new()
            .u8(matches!(self.overall(), Overall::Grant) as u8)
            .bytes(&frame(&items))
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let overall = d.u8()?;
        let mut verdicts = Vec::new();
        for item in unframe(d.field()?)? {
            let mut v = Decoder::new(item);
            verdicts.push(match v.u8()? {
                0 => Verdict::Clear,
                2 => Verdict::HitExempt,
                1 if v.is_empty() => Verdict::Hit(None),
                1 => Verdict::Hit(Some(HazardInfo {
                    name: v.string()?,
                    reason: v.string()?,
                })),
                _ => return Err(DecodeError::Invalid("verdict")),
            });
            v.finish()?;
        }
        d.finish()?;
        let r = QueryResponse { verdicts };
        if (overall == 1) != (r.overall() == Overall::Grant) {
            return Err(DecodeError::Invalid("overall flag disagrees with verdicts"));
        }
        Ok(r)
    }

    /// One line per sequence plus the overall decision.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.verdicts.iter().enumerate() {
            let line = match v {
                Verdict::Clear => format!("seq {i}: clear"),
                Verdict::HitExempt => format!("seq {i}: hit (exempt)"),
                Verdict::Hit(None) => format!("seq {i}: hit"),
                Verdict::Hit(Some(h)) => format!("seq {i}: hit {} ({})", h.name, h.reason),
            };
            out.push_str(&line);
            out.push('\n');
        }
        let names: Vec<&str> = self
            .verdicts
            .iter()
            .filter_map(|v| match v {
                Verdict::Hit(Some(h)) => Some(h.name.as_str()),
                _ => None,
            })
            .collect();
        if names.is_empty() {
            out.push_str(&format!("{}\n", self.overall()));
        } else {
            out.push_str(&format!("{} {}\n", self.overall(), names.join(",")));
        }
        out
    }
}

/// Verdicts computed by the database for a set of keyed hashes.
pub fn lookup(db: &HazardDb, hashed: &[GroupElement], exempt: &[GroupElement], suppress_metadata: bool) -> QueryResponse {
    QueryResponse::new(
        hashed
            .iter()
            .map(|h| match db.info(h) {
                None => Verdict::Clear,
                Some(_) if exempt.contains(h) => Verdict::HitExempt,
                Some(_) if suppress_metadata => Verdict::Hit(None),
                Some(info) => Verdict::Hit(Some(info.clone())),
            })
            .collect(),
    )
}

/// Verdicts computed directly from plaintext, with no network, blinding or
/// sharing. Exempt sequences are compared by their keyed hashes, exactly as
/// the database sees them.
pub fn oracle_verdicts(
    group: &Group,
    k: &Scalar,
    db: &HazardDb,
    order: &[Vec<u8>],
    exempt: &[Vec<u8>],
    suppress_metadata: bool,
) -> QueryResponse {
    let hashed: Vec<GroupElement> = order.iter().map(|s| doprf_direct(group, s, k)).collect();
    let ex: Vec<GroupElement> = exempt.iter().map(|s| doprf_direct(group, s, k)).collect();
    lookup(db, &hashed, &ex, suppress_metadata)
}

/// Six-digit code for `secret` in the 30-second window containing `t`.
pub fn totp(secret: &[u8], t: u64) -> String {
    let window = t / TOTP_STEP_SECS;
    let d = sha256(&frame(&[secret, &window.to_be_bytes()]));
    let v = u32::from_be_bytes(d[..4].try_into().unwrap()) % 1_000_000;
    format!("{v:06}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthDecision {
    Ok,
    Reject,
}

/// Device registry of the authentication backend.
#[derive(Debug, Clone, Default)]
pub struct AuthBackend {
    devices: BTreeMap<String, Vec<u8>>,
}

impl AuthBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, device: &str, secret: Vec<u8>) {
        self.devices.insert(device.to_string(), secret);
    }

    /// Accepts only the code of the window containing `t`.
    pub fn verify(&self, device: &str, code: &str, t: u64) -> Result<AuthDecision, ScreeningError> {
        let secret = self
            .devices
            .get(device)
            .ok_or_else(|| ScreeningError::UnknownDevice(device.to_string()))?;
        Ok(if totp(secret, t) == code {
            AuthDecision::Ok
        } else {
            AuthDecision::Reject
        })
    }
}

fn label(s: &'static str) -> Term {
    Term::Const(s)
}

fn elts(items: &[Tagged]) -> Term {
    Term::Seq(items.iter().map(|(v, s)| Term::elt(v, s.clone())).collect())
}

fn read_label(r: &mut TermReader) -> Result<String, DecodeError> {
    r.string()
}

fn read_elts(r: &mut TermReader, group: &Group) -> Result<Vec<Tagged>, DecodeError> {
    let mut inner = r.nested()?;
    let mut out = Vec::new();
    loop {
        match inner.elt(group) {
            Ok(e) => out.push(e),
            Err(DecodeError::Truncated) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn error_message(name: &str) -> Term {
    Term::Seq(vec![label("error"), Term::atom(name.as_bytes().to_vec())])
}

/// `Some(name)` if `msg` is an error reply.
pub fn parse_error(msg: &Term) -> Option<String> {
    let mut r = TermReader::framed(msg).ok()?;
    if r.string().ok()? != "error" {
        return None;
    }
    r.string().ok()
}

pub fn keyserver_request(omega: &[u8; 32], blinded: &[Tagged]) -> Term {
    Term::Seq(vec![label("eval"), Term::atom(*omega), elts(blinded)])
}

pub fn parse_keyserver_request(group: &Group, msg: &Term) -> Result<([u8; 32], Vec<Tagged>), DecodeError> {
    let mut r = TermReader::framed(msg)?;
    if read_label(&mut r)? != "eval" {
        return Err(DecodeError::Invalid("not a keyserver request"));
    }
    let omega = r.fixed_bytes()?;
    let xs = read_elts(&mut r, group)?;
    r.finish()?;
    Ok((omega, xs))
}

pub fn keyserver_response(ys: &[Tagged]) -> Term {
    Term::Seq(vec![label("ok"), elts(ys)])
}

pub fn parse_keyserver_response(group: &Group, msg: &Term) -> Result<Vec<Tagged>, ScreeningError> {
    if let Some(e) = parse_error(msg) {
        return Err(ScreeningError::from_remote(&e));
    }
    let mut r = TermReader::framed(msg)?;
    if read_label(&mut r)? != "ok" {
        return Err(DecodeError::Invalid("not a keyserver response").into());
    }
    let ys = read_elts(&mut r, group)?;
    r.finish()?;
    Ok(ys)
}

/// Exemption part of a database request.
#[derive(Debug, Clone)]
pub struct ExemptionPart {
    pub elt: CertChain,
    pub code: String,
    pub hashed_exempt: Vec<GroupElement>,
}

#[derive(Debug, Clone)]
pub struct DatabaseRequest {
    pub omega: [u8; 32],
    pub hashed: Vec<GroupElement>,
    pub exemption: Option<ExemptionPart>,
}

pub fn database_request(
    omega: &[u8; 32],
    hashed: &[Tagged],
    exemption: Option<ExemptionArgs<'_>>,
) -> Term {
    let ex = match exemption {
        None => Term::Seq(vec![]),
        Some((chain, code, hashed_exempt)) => Term::Seq(vec![
            Term::atom(chain.encode()),
            Term::atom(code.as_bytes().to_vec()),
            elts(hashed_exempt),
        ]),
    };
    Term::Seq(vec![label("query"), Term::atom(*omega), elts(hashed), ex])
}

pub fn parse_database_request(group: &Group, msg: &Term) -> Result<DatabaseRequest, ScreeningError> {
    let mut r = TermReader::framed(msg)?;
    if read_label(&mut r)? != "query" {
        return Err(DecodeError::Invalid("not a database request").into());
    }
    let omega = r.fixed_bytes()?;
    let hashed = read_elts(&mut r, group)?.into_iter().map(|(v, _)| v).collect();
    let mut ex = r.nested()?;
    r.finish()?;
    let exemption = match ex.field() {
        Err(DecodeError::Truncated) => None,
        Err(e) => return Err(e.into()),
        Ok(chain_t) => {
            let elt = CertChain::decode(&chain_t.wire()).map_err(|e| ScreeningError::BadEltChain(e.to_string()))?;
            let code = ex.string()?;
            let hashed_exempt = read_elts(&mut ex, group)?.into_iter().map(|(v, _)| v).collect();
            ex.finish()?;
            Some(ExemptionPart {
                elt,
                code,
                hashed_exempt,
            })
        }
    };
    Ok(DatabaseRequest {
        omega,
        hashed,
        exemption,
    })
}

/// Database reply. With `binding`, the body is signed together with the
/// exact request plaintext it answers.
pub fn database_response(resp: &QueryResponse, request_wire: &[u8], binding: Option<&KeyPair>) -> Term {
    let body = resp.encode();
    let bind = match binding {
        None => Term::Atom(Vec::new()),
        Some(key) => Term::Signed {
            sig: sign(key, &frame(&[request_wire, &body])).0.to_vec(),
            signer: key.verify_key().0.to_vec(),
            over: KTerm::Hash(vec![KTerm::Atom(request_wire.to_vec()), KTerm::Atom(body.clone())]),
        },
    };
    Term::Seq(vec![label("resp"), Term::Atom(body), bind])
}

/// Parses a database reply; when `binding_key` is given the reply must
/// carry a valid signature over `request_wire` and the body.
pub fn parse_database_response(
    msg: &Term,
    request_wire: &[u8],
    binding_key: Option<&VerifyKey>,
) -> Result<QueryResponse, ScreeningError> {
    if let Some(e) = parse_error(msg) {
        return Err(ScreeningError::from_remote(&e));
    }
    let mut r = TermReader::framed(msg)?;
    if read_label(&mut r)? != "resp" {
        return Err(DecodeError::Invalid("not a database response").into());
    }
    let body = r.bytes()?;
    let bind = r.bytes()?;
    r.finish()?;
    if let Some(vk) = binding_key {
        let sig = Signature::from_slice(&bind).map_err(|_| ScreeningError::BindingMismatch)?;
        if !verify(vk, &frame(&[request_wire, &body]), &sig) {
            return Err(ScreeningError::BindingMismatch);
        }
    }
    Ok(QueryResponse::decode(&body)?)
}

pub fn auth_request(device: &str, code: &str, timestamp: u64) -> Term {
    Term::Seq(vec![
        label("auth"),
        Term::atom(device.as_bytes().to_vec()),
        Term::atom(code.as_bytes().to_vec()),
        Term::u64(timestamp),
    ])
}

pub fn parse_auth_request(msg: &Term) -> Result<(String, String, u64), DecodeError> {
    let mut r = TermReader::framed(msg)?;
    if read_label(&mut r)? != "auth" {
        return Err(DecodeError::Invalid("not an auth request"));
    }
    let device = r.string()?;
    let code = r.string()?;
    let t = r.u64()?;
    r.finish()?;
    Ok((device, code, t))
}

pub fn auth_response(d: AuthDecision) -> Term {
    Term::Seq(vec![label(match d {
        AuthDecision::Ok => "auth-ok",
        AuthDecision::Reject => "auth-reject",
    })])
}

pub fn parse_auth_response(msg: &Term) -> Result<AuthDecision, ScreeningError> {
    if let Some(e) = parse_error(msg) {
        return Err(ScreeningError::from_remote(&e));
    }
    let mut r = TermReader::framed(msg)?;
    let l = read_label(&mut r)?;
    r.finish()?;
    match l.as_str() {
        "auth-ok" => Ok(AuthDecision::Ok),
        "auth-reject" => Ok(AuthDecision::Reject),
        _ => Err(DecodeError::Invalid("not an auth response").into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doprf::{blind, combine, eval_share, share_key, unblind, BlindingFactor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rec(s: &[u8], name: &str) -> HazardRecord {
        HazardRecord {
            sequence: s.to_vec(),
            name: name.into(),
            reason: "select agent".into(),
        }
    }

    #[test]
    fn hdb_build_rules() {
        let g = Group::ristretto255();
        let k = g.scalar(7);
        assert!(build_hdb(&g, &[], &k).is_empty());
        let db = build_hdb(&g, &[rec(b"AAAA", "x"), rec(b"AAAA", "y"), rec(b"CCCC", "z")], &k);
        assert_eq!(db.len(), 2);
        assert_eq!(db.info(&doprf_direct(&g, b"AAAA", &k)).unwrap().name, "x");
        for s in [b"AAAA", b"CCCC"] {
            assert!(db.contains(&doprf_direct(&g, s, &k)));
        }
        assert_eq!(HazardDb::decode(&g, &db.encode()).unwrap(), db);
    }

    #[test]
    fn hdb_encoding_is_independent_of_input_order() {
        let g = Group::test();
        let k = g.scalar(3);
        let a = build_hdb(&g, &[rec(b"A", "a"), rec(b"G", "g")], &k);
        let b = build_hdb(&g, &[rec(b"G", "g"), rec(b"A", "a")], &k);
        assert_eq!(a.encode(), b.encode());
    }

    #[test]
    fn hdb_holds_no_plaintext() {
        let g = Group::ristretto255();
        let hazards = [rec(b"ACGTACGTACGTAAAT", "toxin")];
        let enc = build_hdb(&g, &hazards, &g.scalar(99)).encode();
        assert!(!enc.windows(hazards[0].sequence.len()).any(|w| w == hazards[0].sequence));
    }

    #[test]
    fn hazard_file_roundtrip() {
        let recs = vec![rec(b"\x01\x02", "a"), rec(b"ACGT", "b")];
        let text = write_hazard_file(&recs);
        assert_eq!(text.lines().next().unwrap(), "0102,a,select agent");
        assert_eq!(parse_hazard_file(&format!("# header\n\n{text}")).unwrap(), recs);
        assert!(parse_hazard_file("zz,a,b").is_err());
        assert!(parse_hazard_file("00").is_err());
    }

    #[test]
    fn lookup_examples() {
        let g = Group::ristretto255();
        let k = g.scalar(5);
        let db = build_hdb(&g, &[rec(b"HAZ", "toxin")], &k);
        let h = doprf_direct(&g, b"HAZ", &k);
        let c = doprf_direct(&g, b"OK", &k);
        let r = lookup(&db, &[h.clone(), c.clone()], &[], false);
        assert_eq!(
            r.verdicts,
            vec![
                Verdict::Hit(Some(HazardInfo {
                    name: "toxin".into(),
                    reason: "select agent".into()
                })),
                Verdict::Clear
            ]
        );
        assert_eq!(r.overall(), Overall::Deny);
        let r = lookup(&db, &[h.clone(), c], std::slice::from_ref(&h), false);
        assert_eq!(r.verdicts, vec![Verdict::HitExempt, Verdict::Clear]);
        assert_eq!(r.overall(), Overall::Grant);
        assert_eq!(lookup(&db, &[h], &[], true).verdicts, vec![Verdict::Hit(None)]);
    }

    #[test]
    fn response_encoding_roundtrip_and_render() {
        let r = QueryResponse::new(vec![
            Verdict::Clear,
            Verdict::Hit(Some(HazardInfo {
                name: "toxin".into(),
                reason: "r".into(),
            })),
            Verdict::Hit(None),
            Verdict::HitExempt,
        ]);
        assert_eq!(QueryResponse::decode(&r.encode()).unwrap(), r);
        assert!(r.render().ends_with("DENY toxin\n"));
        let mut bad = r.encode();
        bad[4] = 1;
        assert!(QueryResponse::decode(&bad).is_err());
    }

    #[test]
    fn totp_single_window() {
        let mut a = AuthBackend::new();
        a.register("m", b"device secret".to_vec());
        let t = 1_000_000;
        let code = totp(b"device secret", t);
        assert_eq!(code.len(), 6);
        assert_eq!(a.verify("m", &code, t).unwrap(), AuthDecision::Ok);
        // Same window, later second.
        let start = t - t % TOTP_STEP_SECS;
        assert_eq!(a.verify("m", &totp(b"device secret", start), start + 29).unwrap(), AuthDecision::Ok);
        let previous = totp(b"device secret", t - TOTP_STEP_SECS);
        assert_ne!(previous, code);
        assert_eq!(a.verify("m", &previous, t).unwrap(), AuthDecision::Reject);
        assert_eq!(a.verify("m", &code, t + TOTP_STEP_SECS).unwrap(), AuthDecision::Reject);
        assert_eq!(
            a.verify("nope", &code, t).unwrap_err(),
            ScreeningError::UnknownDevice("nope".into())
        );
    }

    #[test]
    fn binding_detects_foreign_request() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let key = KeyPair::generate(&mut rng);
        let resp = QueryResponse::new(vec![Verdict::Clear]);
        let msg = database_response(&resp, b"request one", Some(&key));
        assert_eq!(
            parse_database_response(&msg, b"request one", Some(&key.verify_key())).unwrap(),
            resp
        );
        assert_eq!(
            parse_database_response(&msg, b"request two", Some(&key.verify_key())).unwrap_err(),
            ScreeningError::BindingMismatch
        );
        let unbound = database_response(&resp, b"request one", None);
        assert_eq!(
            parse_database_response(&unbound, b"request one", Some(&key.verify_key())).unwrap_err(),
            ScreeningError::BindingMismatch
        );
        assert_eq!(parse_database_response(&unbound, b"anything", None).unwrap(), resp);
    }

    #[test]
    fn message_codecs_roundtrip_from_bytes() {
        let g = Group::test();
        let x = (g.hash_to_group(b"s"), SymElt::hashed(b"s"));
        let omega = [9u8; 32];
        let req = keyserver_request(&omega, &[x.clone(), x.clone()]);
        let (o, xs) = parse_keyserver_request(&g, &Term::Atom(req.wire())).unwrap();
        assert_eq!((o, xs.len()), (omega, 2));
        assert_eq!(parse_keyserver_response(&g, &keyserver_response(std::slice::from_ref(&x))).unwrap()[0].0, x.0);
        assert_eq!(
            parse_keyserver_response(&g, &error_message("RateLimited")).unwrap_err(),
            ScreeningError::RateLimited
        );
        let req = database_request(&omega, std::slice::from_ref(&x), None);
        let p = parse_database_request(&g, &Term::Atom(req.wire())).unwrap();
        assert!(p.exemption.is_none());
        assert_eq!(p.hashed, vec![x.0.clone()]);
        let (d, c, t) = parse_auth_request(&auth_request("m", "123456", 77)).unwrap();
        assert_eq!((d.as_str(), c.as_str(), t), ("m", "123456", 77));
        assert_eq!(parse_auth_response(&auth_response(AuthDecision::Reject)).unwrap(), AuthDecision::Reject);
    }

    fn pipeline(g: &Group, shares: &[crate::doprf::KeyShare], s: &[u8], rng: &mut ChaCha20Rng) -> GroupElement {
        let beta = BlindingFactor::random(g, rng);
        let x = blind(g, &g.hash_to_group(s), &beta);
        let ys: Vec<_> = shares.iter().map(|sh| (sh.index, eval_share(g, sh, &x))).collect();
        unblind(g, &combine(g, &ys, shares.len()).unwrap(), &beta).unwrap()
    }

    #[test]
    fn distributed_verdicts_match_plaintext_oracle() {
        let g = Group::test();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let k = g.random_nonzero_scalar(&mut rng);
        let shares = share_key(&g, &k, 3, 2, &mut rng).unwrap();
        let hazards: Vec<HazardRecord> = (0..3u8).map(|i| rec(&[b'H', i], &format!("h{i}"))).collect();
        let db = build_hdb(&g, &hazards, &k);
        for _ in 0..100 {
            let order: Vec<Vec<u8>> = (0..rng.gen_range(1..5))
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        hazards[rng.gen_range(0..3)].sequence.clone()
                    } else {
                        (0..rng.gen_range(1..8)).map(|_| rng.gen()).collect()
                    }
                })
                .collect();
            let hashed: Vec<GroupElement> = order.iter().map(|s| pipeline(&g, &shares[1..], s, &mut rng)).collect();
            assert_eq!(lookup(&db, &hashed, &[], false), oracle_verdicts(&g, &k, &db, &order, &[], false));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// With a collision-free group, a Grant with hits means every hit
        /// sequence is listed in the exemption.
        #[test]
        fn exemption_soundness(seed in any::<u64>()) {
            let g = Group::ristretto255();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let k = g.random_nonzero_scalar(&mut rng);
            let hazards: Vec<HazardRecord> = (0..6u8).map(|i| rec(&[b'H', i], "h")).collect();
            let db = build_hdb(&g, &hazards, &k);
            let pool: Vec<Vec<u8>> = (0..10u8).map(|i| if i < 6 { vec![b'H', i] } else { vec![b'B', i] }).collect();
            let order: Vec<Vec<u8>> = (0..rng.gen_range(1..6)).map(|_| pool[rng.gen_range(0..10)].clone()).collect();
            let elt: Vec<Vec<u8>> = pool.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
            let r = oracle_verdicts(&g, &k, &db, &order, &elt, false);
            if r.overall() == Overall::Grant {
                for (s, v) in order.iter().zip(&r.verdicts) {
                    if *v == Verdict::HitExempt {
                        prop_assert!(elt.contains(s));
                    }
                }
            }
            let grant_expected = order.iter().all(|s| !hazards.iter().any(|h| &h.sequence == s) || elt.contains(s));
            prop_assert_eq!(r.overall() == Overall::Grant, grant_expected);
        }
    }
}
