//! Mutual authentication inside an established channel, and the per-σ
//! rate-limit ledger.
//!
//! Message plaintexts (each carried in one channel record):
//!
//! * hello: `r_S (32) || framed[client chain, opaque fields...]`
//! * response: `ω (32) || r_W (32) || framed[server chain, sig_server]`
//! * finish: `ω (32) || sig_client (64)`
//!
//! The opaque hello fields (the keyserver literal, sequence count and target
//! id) travel on the wire but are not covered by either signature.
//!
//! Signed hashes:
//!
//! | variant | server                                   | client                                   |
//! |---------|------------------------------------------|------------------------------------------|
//! | SCEP    | server-mutauth, r_S, r_W, T_W            | client-mutauth, r_S, r_W, T_S            |
//! | SCEP+   | server-mutauth, r_S, r_W, ω, T_S, T_W    | client-mutauth, r_S, r_W, ω, T_S, T_W    |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use thiserror::Error;

use crate::crypto::{sign, verify, KeyPair, Signature};
use crate::encoding::{frame, DecodeError};
use crate::pki::{validate_chain, CertChain, Certificate, PkiError, RevocationList, Sigma, Token, TokenType};
use crate::term::{KTerm, Term, TermReader};

pub const WINDOW_SECS: u64 = 24 * 60 * 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScepVariant {
    Scep,
    ScepPlus,
}

impl ScepVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ScepVariant::Scep => "scep",
            ScepVariant::ScepPlus => "scep-plus",
        }
    }
}

impl FromStr for ScepVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scep" => Ok(ScepVariant::Scep),
            "scep-plus" | "scep+" => Ok(ScepVariant::ScepPlus),
            other => Err(format!("unknown SCEP variant `{other}` (expected scep|scep-plus)")),
        }
    }
}

impl fmt::Display for ScepVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScepError {
    #[error("client chain rejected: {0}")]
    BadClientChain(String),
    #[error("client token revoked")]
    Revoked,
    #[error("server chain rejected: {0}")]
    BadServerChain(String),
    #[error("server signature rejected")]
    BadServerSig,
    #[error("cookie mismatch")]
    BadCookie,
    #[error("client signature rejected")]
    BadClientSig,
    #[error("message out of order")]
    OutOfOrder,
    #[error("malformed message: {0}")]
    Malformed(#[from] DecodeError),
}

impl ScepError {
    pub fn name(&self) -> &'static str {
        match self {
            ScepError::BadClientChain(_) => "BadClientChain",
            ScepError::Revoked => "Revoked",
            ScepError::BadServerChain(_) => "BadServerChain",
            ScepError::BadServerSig => "BadServerSig",
            ScepError::BadCookie => "BadCookie",
            ScepError::BadClientSig => "BadClientSig",
            ScepError::OutOfOrder => "OutOfOrder",
            ScepError::Malformed(_) => "Malformed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScepState {
    Init,
    HelloSent,
    Responded,
    Finished,
    Failed,
}

/// Session parameters both ends should agree on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScepParams {
    pub r_s: [u8; 32],
    pub r_w: [u8; 32],
    pub omega: [u8; 32],
    pub t_s: Vec<u8>,
    pub t_w: Vec<u8>,
}

/// Outcome of a successful server-side run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authenticated {
    pub sigma: Sigma,
    pub rate_limit: u64,
    pub client_token: Token,
}

/// Validation context: pinned root, revocations and the current time.
#[derive(Debug, Clone)]
pub struct TrustAnchor {
    pub root: Certificate,
    pub revocations: RevocationList,
}

fn random32<R: RngCore + ?Sized>(rng: &mut R) -> [u8; 32] {
    let mut b = [0u8; 32];
    rng.fill_bytes(&mut b);
    b
}

struct HashInputs<'a> {
    r_s: &'a [u8; 32],
    r_w: &'a [u8; 32],
    omega: &'a [u8; 32],
    t_s: &'a [u8],
    t_w: &'a [u8],
}

impl HashInputs<'_> {
    /// Byte fields and symbolic form of the signed hash input.
    fn fields(&self, variant: ScepVariant, label: &'static str) -> (Vec<Vec<u8>>, KTerm) {
        let mut parts: Vec<(Vec<u8>, KTerm)> = vec![
            (label.as_bytes().to_vec(), KTerm::Const(label.to_string())),
            (self.r_s.to_vec(), KTerm::Atom(self.r_s.to_vec())),
            (self.r_w.to_vec(), KTerm::Atom(self.r_w.to_vec())),
        ];
        let atom = |b: &[u8]| (b.to_vec(), KTerm::Atom(b.to_vec()));
        match (variant, label) {
            (ScepVariant::Scep, "server-mutauth") => parts.push(atom(self.t_w)),
            (ScepVariant::Scep, _) => parts.push(atom(self.t_s)),
            (ScepVariant::ScepPlus, _) => {
                parts.push(atom(self.omega));
                parts.push(atom(self.t_s));
                parts.push(atom(self.t_w));
            }
        }
        let (bytes, terms): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        (bytes, KTerm::Hash(terms))
    }

    fn sign(&self, variant: ScepVariant, label: &'static str, key: &KeyPair) -> Term {
        let (bytes, over) = self.fields(variant, label);
        Term::Signed {
            sig: sign(key, &frame(&bytes)).0.to_vec(),
            signer: key.verify_key().0.to_vec(),
            over,
        }
    }

    fn verify(&self, variant: ScepVariant, label: &'static str, token: &Token, sig: &Signature) -> bool {
        let (bytes, _) = self.fields(variant, label);
        verify(&token.subject_key(), &frame(&bytes), sig)
    }
}

/// Client (synthesizer) side of one authentication run.
#[derive(Debug, Clone)]
pub struct ScepClient {
    pub variant: ScepVariant,
    pub state: ScepState,
    chain: CertChain,
    key: KeyPair,
    r_s: [u8; 32],
    params: Option<ScepParams>,
}

impl ScepClient {
    /// `key` signs for the token at the head of `chain`.
    pub fn new(variant: ScepVariant, chain: CertChain, key: KeyPair) -> Self {
        ScepClient {
            variant,
            state: ScepState::Init,
            chain,
            key,
            r_s: [0; 32],
            params: None,
        }
    }

    /// Builds the hello. `opaque` fields ride along unsigned.
    pub fn hello<R: RngCore + ?Sized>(&mut self, opaque: &[&str], rng: &mut R) -> Term {
        self.r_s = random32(rng);
        self.state = ScepState::HelloSent;
        let mut fields = vec![Term::atom(self.chain.encode())];
        fields.extend(opaque.iter().map(|s| Term::atom(s.as_bytes().to_vec())));
        Term::Cat(vec![Term::atom(self.r_s), Term::Seq(fields)])
    }

    /// Checks the server's chain, its binding to `dialed_server` and its
    /// signature; returns the finish message.
    pub fn on_response(
        &mut self,
        response: &Term,
        infra: &TrustAnchor,
        now: u64,
        dialed_server: &str,
    ) -> Result<Term, ScepError> {
        if self.state != ScepState::HelloSent {
            return Err(ScepError::OutOfOrder);
        }
        let res = self.check_response(response, infra, now, dialed_server);
        self.state = if res.is_ok() { ScepState::Finished } else { ScepState::Failed };
        res
    }

    fn check_response(
        &mut self,
        response: &Term,
        infra: &TrustAnchor,
        now: u64,
        dialed_server: &str,
    ) -> Result<Term, ScepError> {
        let mut raw = TermReader::raw(response);
        let omega_t = raw.fixed(32)?;
        let omega: [u8; 32] = omega_t.wire().try_into().unwrap();
        let r_w: [u8; 32] = raw.fixed(32)?.wire().try_into().unwrap();
        let mut r = TermReader::framed(&raw.rest()?)?;
        let chain_bytes = r.bytes()?;
        let sig = Signature::from_slice(&r.bytes()?).map_err(|_| DecodeError::Invalid("signature"))?;
        r.finish()?;

        let server_chain = CertChain::decode(&chain_bytes).map_err(|e| ScepError::BadServerChain(e.to_string()))?;
        validate_chain(&server_chain, &infra.root, now, &infra.revocations)
            .map_err(|e| ScepError::BadServerChain(e.to_string()))?;
        let t = &server_chain.token;
        if !matches!(t.token_type(), TokenType::KeyserverInfra | TokenType::DatabaseInfra) {
            return Err(ScepError::BadServerChain("not an infrastructure token".into()));
        }
        if t.ctx.subject.name != dialed_server {
            return Err(ScepError::BadServerChain(format!(
                "token issued to `{}`, connected to `{dialed_server}`",
                t.ctx.subject.name
            )));
        }
        let t_s = self.chain.token.encode();
        let t_w = t.encode();
        let inputs = HashInputs {
            r_s: &self.r_s,
            r_w: &r_w,
            omega: &omega,
            t_s: &t_s,
            t_w: &t_w,
        };
        if !inputs.verify(self.variant, "server-mutauth", t, &sig) {
            return Err(ScepError::BadServerSig);
        }
        let sig_client = inputs.sign(self.variant, "client-mutauth", &self.key);
        self.params = Some(ScepParams {
            r_s: self.r_s,
            r_w,
            omega,
            t_s,
            t_w,
        });
        Ok(Term::Cat(vec![omega_t, sig_client]))
    }

    pub fn params(&self) -> Option<&ScepParams> {
        self.params.as_ref()
    }

    pub fn client_nonce(&self) -> [u8; 32] {
        self.r_s
    }
}

/// Response message for `params`, signed by `key` on behalf of the token at
/// the head of `chain`. `omega` carries the cookie with its provenance.
pub fn server_response(variant: ScepVariant, params: &ScepParams, omega: Term, chain: &CertChain, key: &KeyPair) -> Term {
    let inputs = HashInputs {
        r_s: &params.r_s,
        r_w: &params.r_w,
        omega: &params.omega,
        t_s: &params.t_s,
        t_w: &params.t_w,
    };
    let sig = inputs.sign(variant, "server-mutauth", key);
    Term::Cat(vec![omega, Term::atom(params.r_w), Term::Seq(vec![Term::atom(chain.encode()), sig])])
}

/// Unverified fields of a response.
#[derive(Debug, Clone)]
pub struct ResponseFields {
    pub omega: Term,
    pub r_w: [u8; 32],
    pub chain: CertChain,
}

pub fn parse_response(response: &Term) -> Result<ResponseFields, ScepError> {
    let mut raw = TermReader::raw(response);
    let omega = raw.fixed(32)?;
    let r_w: [u8; 32] = raw.fixed(32)?.wire().try_into().unwrap();
    let mut r = TermReader::framed(&raw.rest()?)?;
    let chain = CertChain::decode(&r.bytes()?).map_err(|e| ScepError::BadServerChain(e.to_string()))?;
    r.bytes()?;
    r.finish()?;
    Ok(ResponseFields { omega, r_w, chain })
}

/// Parsed hello.
#[derive(Debug, Clone)]
pub struct Hello {
    pub r_s: [u8; 32],
    pub chain: CertChain,
    pub opaque: Vec<String>,
}

pub fn parse_hello(hello: &Term) -> Result<Hello, ScepError> {
    let mut raw = TermReader::raw(hello);
    let r_s: [u8; 32] = raw.fixed(32)?.wire().try_into().unwrap();
    let mut r = TermReader::framed(&raw.rest()?)?;
    let chain = CertChain::decode(&r.bytes()?).map_err(|e| ScepError::BadClientChain(e.to_string()))?;
    let mut opaque = Vec::new();
    loop {
        match r.string() {
            Ok(s) => opaque.push(s),
            Err(DecodeError::Truncated) => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Hello { r_s, chain, opaque })
}

/// Server (keyserver or database) side of one authentication run.
#[derive(Debug, Clone)]
pub struct ScepServerSession {
    pub variant: ScepVariant,
    pub state: ScepState,
    chain: CertChain,
    key: KeyPair,
    params: Option<ScepParams>,
    client_token: Option<Token>,
}

impl ScepServerSession {
    pub fn new(variant: ScepVariant, chain: CertChain, key: KeyPair) -> Self {
        ScepServerSession {
            variant,
            state: ScepState::Init,
            chain,
            key,
            params: None,
            client_token: None,
        }
    }

    /// Validates the client chain and returns the response carrying a fresh
    /// cookie.
    pub fn on_hello<R: RngCore + ?Sized>(
        &mut self,
        hello: &Term,
        manufacturer: &TrustAnchor,
        now: u64,
        rng: &mut R,
    ) -> Result<(Hello, Term), ScepError> {
        if self.state != ScepState::Init {
            return Err(ScepError::OutOfOrder);
        }
        let res = self.respond(hello, manufacturer, now, rng);
        self.state = if res.is_ok() { ScepState::Responded } else { ScepState::Failed };
        res
    }

    fn respond<R: RngCore + ?Sized>(
        &mut self,
        hello: &Term,
        manufacturer: &TrustAnchor,
        now: u64,
        rng: &mut R,
    ) -> Result<(Hello, Term), ScepError> {
        let h = parse_hello(hello)?;
        match validate_chain(&h.chain, &manufacturer.root, now, &manufacturer.revocations) {
            Ok(()) => {}
            Err(PkiError::Revoked(_)) => return Err(ScepError::Revoked),
            Err(e) => return Err(ScepError::BadClientChain(e.to_string())),
        }
        if h.chain.token.token_type() != TokenType::Synthesizer {
            return Err(ScepError::BadClientChain("not a synthesizer token".into()));
        }
        let omega = random32(rng);
        let r_w = random32(rng);
        let t_s = h.chain.token.encode();
        let t_w = self.chain.token.encode();
        let params = ScepParams {
            r_s: h.r_s,
            r_w,
            omega,
            t_s,
            t_w,
        };
        let response = server_response(self.variant, &params, Term::atom(omega), &self.chain, &self.key);
        self.params = Some(params);
        self.client_token = Some(h.chain.token.clone());
        Ok((h, response))
    }

    pub fn on_finish(&mut self, finish: &Term) -> Result<Authenticated, ScepError> {
        if self.state != ScepState::Responded {
            return Err(ScepError::OutOfOrder);
        }
        let res = self.check_finish(finish);
        self.state = if res.is_ok() { ScepState::Finished } else { ScepState::Failed };
        res
    }

    fn check_finish(&self, finish: &Term) -> Result<Authenticated, ScepError> {
        let p = self.params.as_ref().expect("responded");
        let token = self.client_token.as_ref().expect("responded");
        let mut raw = TermReader::raw(finish);
        let omega = raw.fixed(32)?.wire();
        let sig = Signature::from_slice(&raw.rest()?.wire()).map_err(|_| DecodeError::Invalid("signature"))?;
        raw.finish()?;
        if omega != p.omega {
            return Err(ScepError::BadCookie);
        }
        let inputs = HashInputs {
            r_s: &p.r_s,
            r_w: &p.r_w,
            omega: &p.omega,
            t_s: &p.t_s,
            t_w: &p.t_w,
        };
        if !inputs.verify(self.variant, "client-mutauth", token, &sig) {
            return Err(ScepError::BadClientSig);
        }
        Ok(Authenticated {
            sigma: token.sigma(),
            rate_limit: token.rate_limit().unwrap_or(0),
            client_token: token.clone(),
        })
    }

    pub fn params(&self) -> Option<&ScepParams> {
        self.params.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

/// Per-σ history of admitted requests.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RateLimitLedger {
    entries: BTreeMap<Sigma, Vec<(u64, u64)>>,
}

impl RateLimitLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sum of counts for `sigma` with timestamp strictly after `now - 24h`.
    pub fn window_total(&self, sigma: &Sigma, now: u64) -> u128 {
        self.entries
            .get(sigma)
            .map(|es| {
                es.iter()
                    .filter(|(t, _)| t.saturating_add(WINDOW_SECS) > now)
                    .map(|(_, c)| *c as u128)
                    .sum()
            })
            .unwrap_or(0)
    }

    /// Admits `requested` more sequences if the window total stays within
    /// `limit`, recording them; denied requests leave no trace.
    pub fn check(&mut self, sigma: &Sigma, requested: u64, now: u64, limit: u64) -> Decision {
        if self.window_total(sigma, now) + requested as u128 <= limit as u128 {
            self.entries.entry(*sigma).or_default().push((now, requested));
            Decision::Allow
        } else {
            Decision::Deny
        }
    }

    pub fn history(&self, sigma: &Sigma) -> &[(u64, u64)] {
        self.entries.get(sigma).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const V: Validity = Validity { start: 0, end: 1_000_000 };

    struct Fixture {
        manufacturer: TrustAnchor,
        infra: TrustAnchor,
        s_chain: CertChain,
        s_key: KeyPair,
        w_chain: CertChain,
        w_key: KeyPair,
        w2_chain: CertChain,
        w2_key: KeyPair,
    }

    fn hierarchy(ty: CertType, rng: &mut ChaCha20Rng) -> (Issuer, Vec<Certificate>) {
        let root = create_root(ty, Identity::new("F", "f@x"), V, rng);
        let inter = issue_subordinate(&root, Identity::new("I", "i@x"), Level::Intermediate, V, rng).unwrap();
        let leaf = issue_subordinate(&inter, Identity::new("L", "l@x"), Level::Leaf, V, rng).unwrap();
        let path = vec![leaf.cert.clone(), inter.cert.clone(), root.cert.clone()];
        (leaf, path)
    }

    fn fixture(seed: u64) -> (Fixture, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (m_leaf, m_path) = hierarchy(CertType::Manufacturer, &mut rng);
        let (i_leaf, i_path) = hierarchy(CertType::Infrastructure, &mut rng);
        let s_key = KeyPair::generate(&mut rng);
        let s_tok = issue_token(
            &m_leaf,
            Identity::new("S", "s@x"),
            s_key.verify_key(),
            TokenPayload::Synthesizer {
                synth_id: "S".into(),
                rate_limit: 100,
            },
            V,
            &mut rng,
        )
        .unwrap();
        let server = |name: &str, idx: u32, rng: &mut ChaCha20Rng| {
            let k = KeyPair::generate(rng);
            let t = issue_token(
                &i_leaf,
                Identity::new(name, "k@x"),
                k.verify_key(),
                TokenPayload::KeyserverInfra { index: idx },
                V,
                rng,
            )
            .unwrap();
            (CertChain::new(t, i_path.clone()), k)
        };
        let (w_chain, w_key) = server("K1", 1, &mut rng);
        let (w2_chain, w2_key) = server("K2", 2, &mut rng);
        let f = Fixture {
            manufacturer: TrustAnchor {
                root: m_path[2].clone(),
                revocations: RevocationList::new(),
            },
            infra: TrustAnchor {
                root: i_path[2].clone(),
                revocations: RevocationList::new(),
            },
            s_chain: CertChain::new(s_tok, m_path),
            s_key,
            w_chain,
            w_key,
            w2_chain,
            w2_key,
        };
        (f, rng)
    }

    fn run(
        f: &Fixture,
        variant: ScepVariant,
        rng: &mut ChaCha20Rng,
    ) -> (ScepClient, ScepServerSession, Result<Authenticated, ScepError>) {
        let mut c = ScepClient::new(variant, f.s_chain.clone(), f.s_key.clone());
        let mut s = ScepServerSession::new(variant, f.w_chain.clone(), f.w_key.clone());
        let hello = c.hello(&["keyserver", "3", "K1"], rng);
        let (_, resp) = s.on_hello(&hello, &f.manufacturer, 10, rng).unwrap();
        let fin = c.on_response(&resp, &f.infra, 10, "K1").unwrap();
        let out = s.on_finish(&fin);
        (c, s, out)
    }

    #[test]
    fn honest_roundtrip_both_variants() {
        for v in [ScepVariant::Scep, ScepVariant::ScepPlus] {
            let (f, mut rng) = fixture(1);
            let (c, s, out) = run(&f, v, &mut rng);
            let auth = out.unwrap();
            assert_eq!(auth.sigma, f.s_chain.token.sigma());
            assert_eq!(auth.rate_limit, 100);
            assert_eq!(c.state, ScepState::Finished);
            assert_eq!(s.state, ScepState::Finished);
            assert_eq!(c.params(), s.params());
        }
    }

    #[test]
    fn hello_layout() {
        let (f, mut rng) = fixture(2);
        let mut c = ScepClient::new(ScepVariant::Scep, f.s_chain.clone(), f.s_key.clone());
        let hello = c.hello(&["keyserver", "3", "K1"], &mut rng);
        assert_eq!(&hello.wire()[..32], &c.client_nonce());
        let h = parse_hello(&Term::Atom(hello.wire())).unwrap();
        assert_eq!(h.opaque, vec!["keyserver", "3", "K1"]);
        validate_chain(&h.chain, &f.manufacturer.root, 10, &RevocationList::new()).unwrap();
    }

    #[test]
    fn hash_inputs_per_variant() {
        let r = [1u8; 32];
        let w = [2u8; 32];
        let o = [3u8; 32];
        let i = HashInputs {
            r_s: &r,
            r_w: &w,
            omega: &o,
            t_s: b"TS",
            t_w: b"TW",
        };
        let (b, _) = i.fields(ScepVariant::Scep, "server-mutauth");
        assert_eq!(b, vec![b"server-mutauth".to_vec(), r.to_vec(), w.to_vec(), b"TW".to_vec()]);
        let (b, _) = i.fields(ScepVariant::Scep, "client-mutauth");
        assert_eq!(b, vec![b"client-mutauth".to_vec(), r.to_vec(), w.to_vec(), b"TS".to_vec()]);
        for label in ["server-mutauth", "client-mutauth"] {
            let (b, _) = i.fields(ScepVariant::ScepPlus, label);
            assert_eq!(
                b,
                vec![label.as_bytes().to_vec(), r.to_vec(), w.to_vec(), o.to_vec(), b"TS".to_vec(), b"TW".to_vec()]
            );
        }
    }

    #[test]
    fn revoked_client_is_rejected() {
        let (mut f, mut rng) = fixture(3);
        f.manufacturer.revocations.revoke_sigma(f.s_chain.token.sigma());
        let mut c = ScepClient::new(ScepVariant::Scep, f.s_chain.clone(), f.s_key.clone());
        let mut s = ScepServerSession::new(ScepVariant::Scep, f.w_chain.clone(), f.w_key.clone());
        let hello = c.hello(&[], &mut rng);
        assert_eq!(
            s.on_hello(&hello, &f.manufacturer, 10, &mut rng).unwrap_err(),
            ScepError::Revoked
        );
        assert_eq!(s.state, ScepState::Failed);
    }

    #[test]
    fn wrong_cookie_and_variant_mismatch() {
        let (f, mut rng) = fixture(4);
        let mut c = ScepClient::new(ScepVariant::Scep, f.s_chain.clone(), f.s_key.clone());
        let mut s = ScepServerSession::new(ScepVariant::Scep, f.w_chain.clone(), f.w_key.clone());
        let (_, resp) = s.on_hello(&c.hello(&[], &mut rng), &f.manufacturer, 10, &mut rng).unwrap();
        let fin = c.on_response(&resp, &f.infra, 10, "K1").unwrap();
        let mut bad = fin.wire();
        bad[0] ^= 1;
        assert_eq!(s.clone().on_finish(&Term::Atom(bad)).unwrap_err(), ScepError::BadCookie);

        let mut c = ScepClient::new(ScepVariant::ScepPlus, f.s_chain.clone(), f.s_key.clone());
        let mut s = ScepServerSession::new(ScepVariant::Scep, f.w_chain.clone(), f.w_key.clone());
        let (_, resp) = s.on_hello(&c.hello(&[], &mut rng), &f.manufacturer, 10, &mut rng).unwrap();
        assert_eq!(c.on_response(&resp, &f.infra, 10, "K1").unwrap_err(), ScepError::BadServerSig);
    }

    #[test]
    fn server_token_must_match_dialed_name() {
        let (f, mut rng) = fixture(5);
        let mut c = ScepClient::new(ScepVariant::ScepPlus, f.s_chain.clone(), f.s_key.clone());
        let mut s = ScepServerSession::new(ScepVariant::ScepPlus, f.w_chain.clone(), f.w_key.clone());
        let (_, resp) = s.on_hello(&c.hello(&[], &mut rng), &f.manufacturer, 10, &mut rng).unwrap();
        assert!(matches!(
            c.on_response(&resp, &f.infra, 10, "K2"),
            Err(ScepError::BadServerChain(_))
        ));
    }

    /// Relays S's run with W2 through to W: W's response is re-signed by W2
    /// for S (same r_W, same ω), and S's signature is forwarded to W.
    fn relay(variant: ScepVariant) -> Result<Authenticated, ScepError> {
        let (f, mut rng) = fixture(6);
        let mut c = ScepClient::new(variant, f.s_chain.clone(), f.s_key.clone());
        let mut w = ScepServerSession::new(variant, f.w_chain.clone(), f.w_key.clone());
        let hello = c.hello(&[], &mut rng);
        let (_, resp_w) = w.on_hello(&hello, &f.manufacturer, 10, &mut rng).unwrap();
        let mut raw = TermReader::raw(&resp_w);
        let omega: [u8; 32] = raw.fixed(32).unwrap().wire().try_into().unwrap();
        let r_w: [u8; 32] = raw.fixed(32).unwrap().wire().try_into().unwrap();
        let t_s = f.s_chain.token.encode();
        let t_w2 = f.w2_chain.token.encode();
        let inputs = HashInputs {
            r_s: &c.client_nonce(),
            r_w: &r_w,
            omega: &omega,
            t_s: &t_s,
            t_w: &t_w2,
        };
        let sig = inputs.sign(variant, "server-mutauth", &f.w2_key);
        let resp_k = Term::Cat(vec![
            Term::atom(omega),
            Term::atom(r_w),
            Term::Seq(vec![Term::atom(f.w2_chain.encode()), sig]),
        ]);
        let fin = c.on_response(&resp_k, &f.infra, 10, "K2").unwrap();
        w.on_finish(&fin)
    }

    #[test]
    fn forwarded_client_signature_is_accepted_only_without_binding() {
        assert!(relay(ScepVariant::Scep).is_ok());
        assert_eq!(relay(ScepVariant::ScepPlus).unwrap_err(), ScepError::BadClientSig);
    }

    #[test]
    fn replayed_hello_is_answered() {
        let (f, mut rng) = fixture(7);
        let mut c = ScepClient::new(ScepVariant::Scep, f.s_chain.clone(), f.s_key.clone());
        let hello = c.hello(&[], &mut rng);
        for _ in 0..2 {
            let mut s = ScepServerSession::new(ScepVariant::Scep, f.w_chain.clone(), f.w_key.clone());
            assert!(s.on_hello(&hello, &f.manufacturer, 10, &mut rng).is_ok());
        }
    }

    #[test]
    fn ledger_worked_example() {
        let mut l = RateLimitLedger::new();
        let s = [1u8; 16];
        let t = 1_000u64;
        let h = 3600;
        assert_eq!(l.check(&s, 60, t, 100), Decision::Allow);
        assert_eq!(l.check(&s, 40, t + h, 100), Decision::Allow);
        assert_eq!(l.check(&s, 1, t + 2 * h, 100), Decision::Deny);
        assert_eq!(l.history(&s).len(), 2);
        // The 40 recorded at t+1h sits exactly 24h back and is outside the
        // strict window, like the 60.
        assert_eq!(l.window_total(&s, t + 25 * h), 0);
        assert_eq!(l.window_total(&s, t + 25 * h - 1), 40);
        assert_eq!(l.check(&s, 1, t + 25 * h, 100), Decision::Allow);
        assert_eq!(rescan_oracle(&[(t, 60), (t + h, 40), (t + 2 * h, 1), (t + 25 * h, 1)], 100),
            vec![Decision::Allow, Decision::Allow, Decision::Deny, Decision::Allow]);
    }

    #[test]
    fn ledger_isolates_sigmas() {
        let mut l = RateLimitLedger::new();
        assert_eq!(l.check(&[1; 16], 100, 0, 100), Decision::Allow);
        assert_eq!(l.check(&[2; 16], 100, 0, 100), Decision::Allow);
        assert_eq!(l.check(&[1; 16], 1, 0, 100), Decision::Deny);
    }

    /// Brute-force reference: rescans the admitted history for each request.
    fn rescan_oracle(events: &[(u64, u64)], limit: u64) -> Vec<Decision> {
        let mut admitted: Vec<(u64, u64)> = Vec::new();
        let mut out = Vec::new();
        for &(now, n) in events {
            let mut total: u128 = 0;
            for &(t, c) in &admitted {
                if (t as i128) > now as i128 - 86_400 {
                    total += c as u128;
                }
            }
            if total + n as u128 <= limit as u128 {
                admitted.push((now, n));
                out.push(Decision::Allow);
            } else {
                out.push(Decision::Deny);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn ledger_matches_rescan(gaps in proptest::collection::vec((0u64..40_000, 0u64..60), 1..40), limit in 0u64..150) {
            let mut now = 0;
            let events: Vec<(u64, u64)> = gaps.iter().map(|&(g, n)| { now += g; (now, n) }).collect();
            let mut l = RateLimitLedger::new();
            let got: Vec<Decision> = events.iter().map(|&(t, n)| l.check(&[0; 16], n, t, limit)).collect();
            prop_assert_eq!(got, rescan_oracle(&events, limit));
        }
    }
}
