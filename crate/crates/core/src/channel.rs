//! One-way authenticated secure channel.
//!
//! Ephemeral Diffie-Hellman in the scenario group, a server certificate from
//! a dedicated channel CA, a signed key exchange, and finished messages over
//! the handshake transcript. Application data then flows as AEAD records
//! with one sequence counter per direction.
//!
//! Handshake messages are `tag || framed body`:
//!
//! | tag  | message             | body                                   |
//! |------|---------------------|----------------------------------------|
//! | 0x10 | ClientHello         | r_C                                    |
//! | 0x11 | ServerHello         | r_S, Cert_S, g^eS, sig(r_C, r_S, g^eS) |
//! | 0x12 | ClientKeyExchange   | g^eC, C_FIN record                     |
//! | 0x13 | ServerFinished      | S_FIN record                           |
//! | 0x14 | ResumeRequest       | session id                             |
//! | 0x15 | ResumeReply         | accepted (1) / refused (0)             |
//!
//! Finished records use their own record tags (0x21, 0x22) so they never
//! share a nonce with application data.

use rand::RngCore;
use thiserror::Error;

use crate::crypto::{
    aead_open, aead_seal, sha256, sign, verify, KeyPair, RecordHeader, Signature, SymmetricKey, VerifyKey,
    TAG_CLIENT_DATA, TAG_SERVER_DATA,
};
use crate::encoding::{frame, DecodeError, Decoder, Encoder};
use crate::group::{Group, GroupElement, Scalar};
use crate::term::{KTerm, ScalarName, SymElt, Term, TermReader};

pub const MSG_CLIENT_HELLO: u8 = 0x10;
pub const MSG_SERVER_HELLO: u8 = 0x11;
pub const MSG_CLIENT_KEY_EXCHANGE: u8 = 0x12;
pub const MSG_SERVER_FINISHED: u8 = 0x13;
pub const MSG_RESUME_REQUEST: u8 = 0x14;
pub const MSG_RESUME_REPLY: u8 = 0x15;

const TAG_CLIENT_FIN: u8 = 0x21;
const TAG_SERVER_FIN: u8 = 0x22;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("server certificate rejected")]
    BadServerCert,
    #[error("key exchange signature rejected")]
    BadKeyExchangeSig,
    #[error("finished message mismatch")]
    FinishedMismatch,
    #[error("record authentication failure")]
    AuthenticationFailure,
    #[error("session resumption disabled")]
    ResumptionDisabled,
    #[error("unexpected message: {0}")]
    UnexpectedMessage(&'static str),
    #[error("malformed message: {0}")]
    Malformed(#[from] DecodeError),
}

impl ChannelError {
    pub fn name(&self) -> &'static str {
        match self {
            ChannelError::BadServerCert => "BadServerCert",
            ChannelError::BadKeyExchangeSig => "BadKeyExchangeSig",
            ChannelError::FinishedMismatch => "FinishedMismatch",
            ChannelError::AuthenticationFailure => "AuthenticationFailure",
            ChannelError::ResumptionDisabled => "ResumptionDisabled",
            ChannelError::UnexpectedMessage(_) => "UnexpectedMessage",
            ChannelError::Malformed(_) => "Malformed",
        }
    }
}

/// The single key pair that vouches for server channel identities.
#[derive(Debug, Clone)]
pub struct ChannelCa {
    key: KeyPair,
}

impl ChannelCa {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        ChannelCa {
            key: KeyPair::generate(rng),
        }
    }

    pub fn verify_key(&self) -> VerifyKey {
        self.key.verify_key()
    }

    pub fn issue(&self, name: &str, server_key: VerifyKey) -> ServerTlsIdentity {
        let mut id = ServerTlsIdentity {
            name: name.to_string(),
            verify_key: server_key,
            ca_signature: Signature([0; 64]),
        };
        id.ca_signature = sign(&self.key, &id.signed_body());
        id
    }

    /// Fresh key pair plus certificate.
    pub fn credentials<R: RngCore + ?Sized>(&self, name: &str, rng: &mut R) -> ServerCredentials {
        let key = KeyPair::generate(rng);
        ServerCredentials {
            identity: self.issue(name, key.verify_key()),
            key,
        }
    }
}

/// `Cert_S`: a server name and key, signed by the channel CA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerTlsIdentity {
    pub name: String,
    pub verify_key: VerifyKey,
    pub ca_signature: Signature,
}

impl ServerTlsIdentity {
    fn signed_body(&self) -> Vec<u8> {
        Encoder::new()
            .str("channel-cert")
            .str(&self.name)
            .bytes(self.verify_key.as_bytes())
            .finish()
    }

    pub fn verify(&self, ca: &VerifyKey) -> bool {
        verify(ca, &self.signed_body(), &self.ca_signature)
    }

    pub fn encode(&self) -> Vec<u8> {
        Encoder::new()
            .str(&self.name)
            .bytes(self.verify_key.as_bytes())
            .bytes(&self.ca_signature.0)
            .finish()
    }

    pub fn decode(b: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(b);
        let name = d.string()?;
        let verify_key = VerifyKey::from_slice(d.field()?).map_err(|_| DecodeError::Invalid("verify key"))?;
        let ca_signature = Signature(d.fixed()?);
        d.finish()?;
        Ok(ServerTlsIdentity {
            name,
            verify_key,
            ca_signature,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ServerCredentials {
    pub identity: ServerTlsIdentity,
    pub key: KeyPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Client,
    Server,
}

/// First byte of a channel message.
pub fn message_tag(wire: &[u8]) -> Option<u8> {
    wire.first().copied()
}

fn handshake_msg(tag: u8, fields: Vec<Term>) -> Term {
    Term::Cat(vec![Term::u8(tag), Term::Seq(fields)])
}

fn open_handshake(msg: &Term, expected: u8, what: &'static str) -> Result<TermReader, ChannelError> {
    let mut r = TermReader::raw(msg);
    if r.fixed(1)?.wire() != [expected] {
        return Err(ChannelError::UnexpectedMessage(what));
    }
    Ok(TermReader::framed(&r.rest()?)?)
}

fn random32<R: RngCore + ?Sized>(rng: &mut R) -> [u8; 32] {
    let mut b = [0u8; 32];
    rng.fill_bytes(&mut b);
    b
}

struct KeySchedule {
    client_write: SymmetricKey,
    server_write: SymmetricKey,
    client_write_term: KTerm,
    server_write_term: KTerm,
}

fn key_schedule(pms: &GroupElement, pms_sym: &SymElt, r_c: &[u8; 32], r_s: &[u8; 32]) -> KeySchedule {
    let derive = |label: &str| SymmetricKey(sha256(&frame(&[pms.as_bytes(), r_c, r_s, label.as_bytes()])));
    let term = |label: &str| {
        KTerm::Hash(vec![
            KTerm::Elt(pms_sym.clone()),
            KTerm::Atom(r_c.to_vec()),
            KTerm::Atom(r_s.to_vec()),
            KTerm::Const(label.to_string()),
        ])
    };
    KeySchedule {
        client_write: derive("client-write"),
        server_write: derive("server-write"),
        client_write_term: term("client-write"),
        server_write_term: term("server-write"),
    }
}

fn finished_digest(pms: &GroupElement, pms_sym: &SymElt, label: &'static str, transcript: &[u8]) -> Term {
    Term::Hashed {
        digest: sha256(&frame(&[pms.as_bytes(), label.as_bytes(), transcript])).to_vec(),
        parts: vec![
            KTerm::Elt(pms_sym.clone()),
            KTerm::Const(label.to_string()),
            KTerm::Atom(transcript.to_vec()),
        ],
    }
}

fn seal_term(key: &SymmetricKey, key_term: &KTerm, tag: u8, seq: u64, body: Term) -> Term {
    Term::Sealed {
        wire: aead_seal(key, tag, seq, &body.wire()),
        key: key_term.clone(),
        body: Box::new(body),
    }
}

/// An established channel endpoint.
#[derive(Debug, Clone)]
pub struct ChannelSession {
    pub side: Side,
    pub client_random: [u8; 32],
    pub server_random: [u8; 32],
    client_write: SymmetricKey,
    server_write: SymmetricKey,
    client_write_term: KTerm,
    server_write_term: KTerm,
    pub send_seq: u64,
    pub recv_seq: u64,
    /// Name from the verified server certificate (client side).
    pub peer_server_identity: Option<String>,
    own_exponent: ScalarName,
}

impl ChannelSession {
    fn new(side: Side, r_c: [u8; 32], r_s: [u8; 32], ks: KeySchedule, peer: Option<String>, own: ScalarName) -> Self {
        ChannelSession {
            side,
            client_random: r_c,
            server_random: r_s,
            client_write: ks.client_write,
            server_write: ks.server_write,
            client_write_term: ks.client_write_term,
            server_write_term: ks.server_write_term,
            send_seq: 0,
            recv_seq: 0,
            peer_server_identity: peer,
            own_exponent: own,
        }
    }

    fn send_key(&self) -> (&SymmetricKey, &KTerm, u8) {
        match self.side {
            Side::Client => (&self.client_write, &self.client_write_term, TAG_CLIENT_DATA),
            Side::Server => (&self.server_write, &self.server_write_term, TAG_SERVER_DATA),
        }
    }

    fn recv_key(&self) -> (&SymmetricKey, &KTerm, u8) {
        match self.side {
            Side::Client => (&self.server_write, &self.server_write_term, TAG_SERVER_DATA),
            Side::Server => (&self.client_write, &self.client_write_term, TAG_CLIENT_DATA),
        }
    }

    /// Seals `body` at the current send position and advances it.
    pub fn send(&mut self, body: Term) -> Term {
        let (key, key_term, tag) = self.send_key();
        let rec = seal_term(key, key_term, tag, self.send_seq, body);
        self.send_seq += 1;
        rec
    }

    /// Opens a record at the current receive position. The position only
    /// advances on success.
    pub fn recv(&mut self, record: &Term) -> Result<Term, ChannelError> {
        let wire = record.wire();
        let (key, key_term, tag) = self.recv_key();
        match RecordHeader::parse(&wire) {
            Some(h) if h.tag == tag => {}
            _ => return Err(ChannelError::AuthenticationFailure),
        }
        let pt = aead_open(key, self.recv_seq, &wire).map_err(|_| ChannelError::AuthenticationFailure)?;
        let body = record.unsealed(key_term, &pt);
        self.recv_seq += 1;
        Ok(body)
    }

    /// A new session over the same keys with both counters back at zero.
    pub fn resume(&self, enabled: bool) -> Result<ChannelSession, ChannelError> {
        if !enabled {
            return Err(ChannelError::ResumptionDisabled);
        }
        let mut s = self.clone();
        s.send_seq = 0;
        s.recv_seq = 0;
        Ok(s)
    }

    /// Public handle for resumption lookups.
    pub fn session_id(&self) -> [u8; 32] {
        sha256(&frame(&[b"session-id".as_slice(), &self.client_random, &self.server_random]))
    }

    /// What a party holding this endpoint knows beyond the wire.
    pub fn secrets(&self) -> Vec<KTerm> {
        vec![
            KTerm::Scalar(self.own_exponent.clone()),
            self.client_write_term.clone(),
            self.server_write_term.clone(),
        ]
    }

    /// Key fingerprints, for transcripts. The keys themselves stay private.
    pub fn key_fingerprints(&self) -> (String, String) {
        (self.client_write.fingerprint(), self.server_write.fingerprint())
    }
}

struct ClientPending {
    session: ChannelSession,
    s_fin_expected: Vec<u8>,
}

/// Client side of the handshake.
pub struct ClientHandshake {
    group: Group,
    server_name: String,
    ca: VerifyKey,
    r_c: [u8; 32],
    pending: Option<ClientPending>,
}

impl ClientHandshake {
    /// Begins a handshake with `server_name`; returns the ClientHello.
    pub fn start<R: RngCore + ?Sized>(group: &Group, server_name: &str, ca: VerifyKey, rng: &mut R) -> (Self, Term) {
        let r_c = random32(rng);
        let hs = ClientHandshake {
            group: group.clone(),
            server_name: server_name.to_string(),
            ca,
            r_c,
            pending: None,
        };
        (hs, handshake_msg(MSG_CLIENT_HELLO, vec![Term::atom(r_c)]))
    }

    pub fn server_name(&self) -> &str {
        &self.server_name
    }

    /// Checks the server's certificate and signed key share; returns the
    /// ClientKeyExchange.
    pub fn on_server_hello<R: RngCore + ?Sized>(&mut self, msg: &Term, rng: &mut R) -> Result<Term, ChannelError> {
        if self.pending.is_some() {
            return Err(ChannelError::UnexpectedMessage("duplicate ServerHello"));
        }
        let mut r = open_handshake(msg, MSG_SERVER_HELLO, "expected ServerHello")?;
        let r_s: [u8; 32] = r.fixed_bytes()?;
        let cert_bytes = r.bytes()?;
        let (g_es, g_es_sym) = r.elt(&self.group)?;
        let ske = Signature::from_slice(&r.bytes()?).map_err(|_| DecodeError::Invalid("signature"))?;
        r.finish()?;

        let cert = ServerTlsIdentity::decode(&cert_bytes).map_err(|_| ChannelError::BadServerCert)?;
        if !cert.verify(&self.ca) || cert.name != self.server_name {
            return Err(ChannelError::BadServerCert);
        }
        if !verify(&cert.verify_key, &frame(&[&self.r_c[..], &r_s, g_es.as_bytes()]), &ske) {
            return Err(ChannelError::BadKeyExchangeSig);
        }

        let e_c = self.group.random_nonzero_scalar(rng);
        let e_c_name = ScalarName::named(format!("eC.{}", hex::encode(&self.r_c[..8])));
        let g_ec = self.group.exp(&self.group.generator(), &e_c);
        let pms = self.group.exp(&g_es, &e_c);
        let pms_sym = g_es_sym.pow(&e_c_name, 1);
        let ks = key_schedule(&pms, &pms_sym, &self.r_c, &r_s);

        let fmesg = frame(&[&self.r_c[..], &r_s, &cert_bytes, g_es.as_bytes(), &ske.0]);
        let c_fin = seal_term(
            &ks.client_write,
            &ks.client_write_term,
            TAG_CLIENT_FIN,
            0,
            finished_digest(&pms, &pms_sym, "client-fin", &fmesg),
        );
        let s_fin_expected = finished_digest(&pms, &pms_sym, "server-fin", &[fmesg, c_fin.wire()].concat()).wire();
        let session = ChannelSession::new(Side::Client, self.r_c, r_s, ks, Some(cert.name), e_c_name.clone());
        self.pending = Some(ClientPending { session, s_fin_expected });
        Ok(handshake_msg(
            MSG_CLIENT_KEY_EXCHANGE,
            vec![Term::elt(&g_ec, SymElt::generator().pow(&e_c_name, 1)), c_fin],
        ))
    }

    pub fn on_server_finished(self, msg: &Term) -> Result<ChannelSession, ChannelError> {
        let pending = self
            .pending
            .ok_or(ChannelError::UnexpectedMessage("ServerFinished before ServerHello"))?;
        let mut r = open_handshake(msg, MSG_SERVER_FINISHED, "expected ServerFinished")?;
        let rec = r.bytes()?;
        r.finish()?;
        let s = &pending.session;
        match RecordHeader::parse(&rec) {
            Some(h) if h.tag == TAG_SERVER_FIN => {}
            _ => return Err(ChannelError::FinishedMismatch),
        }
        let got = aead_open(&s.server_write, 0, &rec).map_err(|_| ChannelError::FinishedMismatch)?;
        if got != pending.s_fin_expected {
            return Err(ChannelError::FinishedMismatch);
        }
        Ok(pending.session)
    }
}

struct ServerPending {
    r_c: [u8; 32],
    r_s: [u8; 32],
    e_s: Scalar,
    e_s_name: ScalarName,
    fmesg: Vec<u8>,
}

/// Server side of the handshake.
pub struct ServerHandshake {
    group: Group,
    creds: ServerCredentials,
    pending: Option<ServerPending>,
}

impl ServerHandshake {
    pub fn new(group: &Group, creds: &ServerCredentials) -> Self {
        ServerHandshake {
            group: group.clone(),
            creds: creds.clone(),
            pending: None,
        }
    }

    /// Returns the ServerHello.
    pub fn on_client_hello<R: RngCore + ?Sized>(&mut self, msg: &Term, rng: &mut R) -> Result<Term, ChannelError> {
        if self.pending.is_some() {
            return Err(ChannelError::UnexpectedMessage("duplicate ClientHello"));
        }
        let mut r = open_handshake(msg, MSG_CLIENT_HELLO, "expected ClientHello")?;
        let r_c: [u8; 32] = r.fixed_bytes()?;
        r.finish()?;
        let r_s = random32(rng);
        let e_s = self.group.random_nonzero_scalar(rng);
        let e_s_name = ScalarName::named(format!("eS.{}", hex::encode(&r_s[..8])));
        let g_es = self.group.exp(&self.group.generator(), &e_s);
        let g_es_sym = SymElt::generator().pow(&e_s_name, 1);
        let ske_body = frame(&[&r_c[..], &r_s, g_es.as_bytes()]);
        let ske = sign(&self.creds.key, &ske_body);
        let cert_bytes = self.creds.identity.encode();
        let fmesg = frame(&[&r_c[..], &r_s, &cert_bytes, g_es.as_bytes(), &ske.0]);
        let signed = Term::Signed {
            sig: ske.0.to_vec(),
            signer: self.creds.identity.verify_key.0.to_vec(),
            over: KTerm::Seq(vec![
                KTerm::Atom(r_c.to_vec()),
                KTerm::Atom(r_s.to_vec()),
                KTerm::Elt(g_es_sym.clone()),
            ]),
        };
        self.pending = Some(ServerPending {
            r_c,
            r_s,
            e_s,
            e_s_name,
            fmesg,
        });
        Ok(handshake_msg(
            MSG_SERVER_HELLO,
            vec![Term::atom(r_s), Term::atom(cert_bytes), Term::elt(&g_es, g_es_sym), signed],
        ))
    }

    /// Checks the client's finished message; returns the session and the
    /// ServerFinished.
    pub fn on_client_key_exchange(self, msg: &Term) -> Result<(ChannelSession, Term), ChannelError> {
        let p = self
            .pending
            .ok_or(ChannelError::UnexpectedMessage("ClientKeyExchange before ClientHello"))?;
        let mut r = open_handshake(msg, MSG_CLIENT_KEY_EXCHANGE, "expected ClientKeyExchange")?;
        let (g_ec, g_ec_sym) = r.elt(&self.group)?;
        let c_fin = r.bytes()?;
        r.finish()?;

        let pms = self.group.exp(&g_ec, &p.e_s);
        let pms_sym = g_ec_sym.pow(&p.e_s_name, 1);
        let ks = key_schedule(&pms, &pms_sym, &p.r_c, &p.r_s);
        match RecordHeader::parse(&c_fin) {
            Some(h) if h.tag == TAG_CLIENT_FIN => {}
            _ => return Err(ChannelError::FinishedMismatch),
        }
        let got = aead_open(&ks.client_write, 0, &c_fin).map_err(|_| ChannelError::FinishedMismatch)?;
        if got != finished_digest(&pms, &pms_sym, "client-fin", &p.fmesg).wire() {
            return Err(ChannelError::FinishedMismatch);
        }
        let s_fin = seal_term(
            &ks.server_write,
            &ks.server_write_term,
            TAG_SERVER_FIN,
            0,
            finished_digest(&pms, &pms_sym, "server-fin", &[p.fmesg, c_fin].concat()),
        );
        let session = ChannelSession::new(Side::Server, p.r_c, p.r_s, ks, None, p.e_s_name);
        Ok((session, handshake_msg(MSG_SERVER_FINISHED, vec![s_fin])))
    }
}

pub fn resume_request(session: &ChannelSession) -> Term {
    handshake_msg(MSG_RESUME_REQUEST, vec![Term::atom(session.session_id())])
}

pub fn parse_resume_request(msg: &Term) -> Result<[u8; 32], ChannelError> {
    let mut r = open_handshake(msg, MSG_RESUME_REQUEST, "expected ResumeRequest")?;
    let id = r.fixed_bytes()?;
    r.finish()?;
    Ok(id)
}

pub fn resume_reply(accepted: bool) -> Term {
    handshake_msg(MSG_RESUME_REPLY, vec![Term::u8(accepted as u8)])
}

/// `Ok(())` if the server agreed to resume.
pub fn parse_resume_reply(msg: &Term) -> Result<(), ChannelError> {
    let mut r = open_handshake(msg, MSG_RESUME_REPLY, "expected ResumeReply")?;
    let accepted = r.u8()?;
    r.finish()?;
    if accepted == 1 {
        Ok(())
    } else {
        Err(ChannelError::ResumptionDisabled)
    }
}

/// Runs a complete in-memory handshake.
pub fn handshake<R: RngCore + ?Sized>(
    group: &Group,
    server_name: &str,
    ca: VerifyKey,
    creds: &ServerCredentials,
    rng: &mut R,
) -> Result<(ChannelSession, ChannelSession), ChannelError> {
    let (mut client, hello) = ClientHandshake::start(group, server_name, ca, rng);
    let mut server = ServerHandshake::new(group, creds);
    let sh = server.on_client_hello(&hello, rng)?;
    let cke = client.on_server_hello(&sh, rng)?;
    let (server_session, fin) = server.on_client_key_exchange(&cke)?;
    let client_session = client.on_server_finished(&fin)?;
    Ok((client_session, server_session))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup(seed: u64) -> (Group, ChannelCa, ServerCredentials, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ca = ChannelCa::generate(&mut rng);
        let creds = ca.credentials("K1", &mut rng);
        (Group::test(), ca, creds, rng)
    }

    #[test]
    fn honest_handshake_agrees_on_keys() {
        for g in [Group::test(), Group::ristretto255()] {
            let (_, ca, creds, mut rng) = setup(1);
            let (c, s) = handshake(&g, "K1", ca.verify_key(), &creds, &mut rng).unwrap();
            assert_eq!(c.key_fingerprints(), s.key_fingerprints());
            assert_ne!(c.client_write, c.server_write);
            assert_eq!(c.peer_server_identity.as_deref(), Some("K1"));
            assert_eq!((c.send_seq, c.recv_seq, s.send_seq, s.recv_seq), (0, 0, 0, 0));
        }
    }

    #[test]
    fn wrong_name_or_ca_is_bad_cert() {
        let (g, ca, creds, mut rng) = setup(2);
        assert_eq!(
            handshake(&g, "K2", ca.verify_key(), &creds, &mut rng).unwrap_err(),
            ChannelError::BadServerCert
        );
        let other = ChannelCa::generate(&mut rng);
        assert_eq!(
            handshake(&g, "K1", other.verify_key(), &creds, &mut rng).unwrap_err(),
            ChannelError::BadServerCert
        );
    }

    #[test]
    fn substituted_key_share_is_rejected() {
        let (g, ca, creds, mut rng) = setup(3);
        let (mut client, hello) = ClientHandshake::start(&g, "K1", ca.verify_key(), &mut rng);
        let mut server = ServerHandshake::new(&g, &creds);
        let sh = server.on_client_hello(&hello, &mut rng).unwrap();
        let mut r = open_handshake(&sh, MSG_SERVER_HELLO, "").unwrap();
        let r_s = r.field().unwrap();
        let cert = r.field().unwrap();
        let (g_es, _) = r.elt(&g).unwrap();
        let sig = r.field().unwrap();
        let mut forged = g.mul(&g_es, &g.generator());
        if g.is_identity(&forged) {
            forged = g.mul(&forged, &g.generator());
        }
        let tampered = handshake_msg(
            MSG_SERVER_HELLO,
            vec![r_s, cert, Term::elt(&forged, SymElt::opaque(forged.as_bytes())), sig],
        );
        assert_eq!(
            client.on_server_hello(&tampered, &mut rng).unwrap_err(),
            ChannelError::BadKeyExchangeSig
        );
    }

    #[test]
    fn any_ca_certified_server_completes_a_handshake() {
        // One-way authentication: a client dialing a name reaches whoever
        // holds a certificate for that name.
        let (g, ca, _, mut rng) = setup(4);
        let impostor = ca.credentials("K3", &mut rng);
        assert!(handshake(&g, "K3", ca.verify_key(), &impostor, &mut rng).is_ok());
    }

    #[test]
    fn records_in_order_and_out_of_order() {
        let (g, ca, creds, mut rng) = setup(5);
        let (mut c, mut s) = handshake(&g, "K1", ca.verify_key(), &creds, &mut rng).unwrap();
        let r0 = c.send(Term::atom(b"p0".to_vec()));
        let r1 = c.send(Term::atom(b"p1".to_vec()));
        let mut s2 = s.clone();
        assert_eq!(s.recv(&r0).unwrap().wire(), b"p0");
        assert_eq!(s.recv(&r1).unwrap().wire(), b"p1");
        assert_eq!(s2.recv(&r1), Err(ChannelError::AuthenticationFailure));
        // Replay of an accepted record.
        assert_eq!(s.recv(&r1), Err(ChannelError::AuthenticationFailure));
        // A client record reflected back to the client.
        assert_eq!(c.recv(&r0), Err(ChannelError::AuthenticationFailure));
    }

    #[test]
    fn resumption_flag() {
        let (g, ca, creds, mut rng) = setup(6);
        let (mut c, _) = handshake(&g, "K1", ca.verify_key(), &creds, &mut rng).unwrap();
        c.send(Term::atom(b"x".to_vec()));
        assert_eq!(c.resume(false).unwrap_err(), ChannelError::ResumptionDisabled);
        let r = c.resume(true).unwrap();
        assert_eq!((r.send_seq, r.recv_seq), (0, 0));
        assert_eq!(r.key_fingerprints(), c.key_fingerprints());
    }

    #[test]
    fn resumed_records_are_interchangeable() {
        let (g, ca, creds, mut rng) = setup(7);
        let (c, mut s) = handshake(&g, "K1", ca.verify_key(), &creds, &mut rng).unwrap();
        let mut s_b = s.resume(true).unwrap();
        let mut c_a = c.clone();
        let mut c_b = c.resume(true).unwrap();
        let ra = s.send(Term::atom(b"verdict A".to_vec()));
        let rb = s_b.send(Term::atom(b"verdict B".to_vec()));
        assert_eq!(c_b.recv(&ra).unwrap().wire(), b"verdict A");
        assert_eq!(c_a.recv(&rb).unwrap().wire(), b"verdict B");
    }

    #[test]
    fn fresh_handshakes_do_not_share_keys() {
        let (g, ca, creds, mut rng) = setup(8);
        let (c1, mut s1) = handshake(&g, "K1", ca.verify_key(), &creds, &mut rng).unwrap();
        let (mut c2, _) = handshake(&g, "K1", ca.verify_key(), &creds, &mut rng).unwrap();
        assert_ne!(c1.key_fingerprints(), c2.key_fingerprints());
        let rec = s1.send(Term::atom(b"x".to_vec()));
        assert_eq!(c2.recv(&rec), Err(ChannelError::AuthenticationFailure));
    }

    #[test]
    fn resume_messages_roundtrip() {
        let (g, ca, creds, mut rng) = setup(9);
        let (c, _) = handshake(&g, "K1", ca.verify_key(), &creds, &mut rng).unwrap();
        assert_eq!(parse_resume_request(&resume_request(&c)).unwrap(), c.session_id());
        assert!(parse_resume_reply(&resume_reply(true)).is_ok());
        assert_eq!(
            parse_resume_reply(&resume_reply(false)),
            Err(ChannelError::ResumptionDisabled)
        );
    }

    #[test]
    fn wire_only_messages_still_parse() {
        let (g, ca, creds, mut rng) = setup(10);
        let (mut client, hello) = ClientHandshake::start(&g, "K1", ca.verify_key(), &mut rng);
        let mut server = ServerHandshake::new(&g, &creds);
        let sh = server.on_client_hello(&Term::Atom(hello.wire()), &mut rng).unwrap();
        let cke = client.on_server_hello(&Term::Atom(sh.wire()), &mut rng).unwrap();
        let (mut s, fin) = server.on_client_key_exchange(&Term::Atom(cke.wire())).unwrap();
        let mut c = client.on_server_finished(&Term::Atom(fin.wire())).unwrap();
        let rec = s.send(Term::atom(b"ok".to_vec()));
        assert_eq!(c.recv(&Term::Atom(rec.wire())).unwrap(), Term::atom(b"ok".to_vec()));
    }
}
