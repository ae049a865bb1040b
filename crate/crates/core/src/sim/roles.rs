//! Server roles: keyservers, the keyed hashed database and the
//! authentication backend.

use std::any::Any;
use std::collections::BTreeMap;

use crate::channel::ServerCredentials;
use crate::crypto::{KeyPair, VerifyKey};
use crate::doprf::{eval_share, KeyShare};
use crate::pki::{validate_chain, CertChain, Sigma, TokenType};
use crate::scep::{Authenticated, Decision, RateLimitLedger, ScepParams, ScepServerSession, ScepState, ScepVariant, TrustAnchor};
use crate::screening::{
    auth_request, auth_response, database_response, error_message, keyserver_response, lookup, parse_auth_request,
    parse_auth_response, parse_database_request, parse_keyserver_request, AuthBackend, AuthDecision,
    DatabaseRequest, HazardDb, QueryResponse, TOTP_STEP_SECS,
};
use crate::term::{KTerm, ScalarName, Term};

use super::link::{ClientLink, ServerLink, SessionCache};
use super::net::{Envelope, NetCore, Role};

/// Long-term material of an infrastructure server.
#[derive(Clone)]
pub struct ServerIdentity {
    pub name: String,
    pub creds: ServerCredentials,
    pub chain: CertChain,
    /// Signs for the infrastructure token at the head of `chain`.
    pub key: KeyPair,
}

impl ServerIdentity {
    pub fn exports(&self) -> Vec<KTerm> {
        vec![
            KTerm::SigningKey(self.creds.key.verify_key().0.to_vec()),
            KTerm::SigningKey(self.key.verify_key().0.to_vec()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AuthEvent {
    pub conn: u32,
    pub peer: String,
    pub step: u64,
    pub outcome: Result<(Authenticated, ScepParams), String>,
}

struct ServerConn {
    link: ServerLink,
    scep: ScepServerSession,
    auth: Option<Authenticated>,
}

/// One rate-limit decision, as taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    pub sigma: Sigma,
    pub count: u64,
    pub at: u64,
    pub limit: u64,
    pub allowed: bool,
}

/// An authenticated application request.
pub struct Request {
    pub conn: u32,
    pub msg: Term,
    pub auth: Authenticated,
    pub omega: [u8; 32],
}

/// Server side of the channel and SCEP for every connection of one server.
pub struct ScepEndpoint {
    pub id: ServerIdentity,
    pub variant: ScepVariant,
    pub manufacturer: TrustAnchor,
    pub resumption: bool,
    pub ledger: RateLimitLedger,
    pub auth_log: Vec<AuthEvent>,
    pub admissions: Vec<Admission>,
    cache: SessionCache,
    conns: BTreeMap<u32, ServerConn>,
}

impl ScepEndpoint {
    pub fn new(id: ServerIdentity, variant: ScepVariant, manufacturer: TrustAnchor, resumption: bool) -> Self {
        ScepEndpoint {
            id,
            variant,
            manufacturer,
            resumption,
            ledger: RateLimitLedger::new(),
            auth_log: Vec::new(),
            admissions: Vec::new(),
            cache: SessionCache::default(),
            conns: BTreeMap::new(),
        }
    }

    pub fn reply(&mut self, net: &mut NetCore, conn: u32, body: Term) {
        if let Some(c) = self.conns.get_mut(&conn) {
            c.link.send(net, body);
        }
    }

    /// Runs the channel and SCEP; returns requests on authenticated
    /// connections.
    pub fn on_envelope(&mut self, net: &mut NetCore, env: &Envelope) -> Vec<Request> {
        let c = self.conns.entry(env.conn).or_insert_with(|| ServerConn {
            link: ServerLink::new(env.conn, &self.id.name, &env.from),
            scep: ScepServerSession::new(self.variant, self.id.chain.clone(), self.id.key.clone()),
            auth: None,
        });
        let mut out = Vec::new();
        for msg in c.link.on_envelope(net, env, &self.id.creds, &mut self.cache, self.resumption) {
            match c.scep.state {
                ScepState::Init => match c.scep.on_hello(&msg, &self.manufacturer, net.now(), &mut net.rng) {
                    Ok((_, resp)) => c.link.send(net, resp),
                    Err(e) => {
                        self.auth_log.push(AuthEvent {
                            conn: env.conn,
                            peer: env.from.clone(),
                            step: net.next_step(),
                            outcome: Err(e.name().to_string()),
                        });
                        c.link.send(net, error_message(e.name()));
                    }
                },
                ScepState::Responded => match c.scep.on_finish(&msg) {
                    Ok(auth) => {
                        let params = c.scep.params().expect("responded").clone();
                        let step = net.note(&self.id.name, format!("authenticated {} on conn {}", hex::encode(auth.sigma), env.conn));
                        self.auth_log.push(AuthEvent {
                            conn: env.conn,
                            peer: env.from.clone(),
                            step,
                            outcome: Ok((auth.clone(), params)),
                        });
                        c.auth = Some(auth);
                    }
                    Err(e) => {
                        let step = net.note(&self.id.name, format!("scep failed on conn {}: {}", env.conn, e.name()));
                        self.auth_log.push(AuthEvent {
                            conn: env.conn,
                            peer: env.from.clone(),
                            step,
                            outcome: Err(e.name().to_string()),
                        });
                        c.link.send(net, error_message(e.name()));
                    }
                },
                ScepState::Finished => {
                    let auth = c.auth.clone().expect("finished");
                    let omega = c.scep.params().expect("finished").omega;
                    out.push(Request {
                        conn: env.conn,
                        msg,
                        auth,
                        omega,
                    });
                }
                _ => c.link.send(net, error_message("Unauthenticated")),
            }
        }
        out
    }

    /// Signing keys plus every session secret.
    pub fn exports(&self) -> Vec<KTerm> {
        let mut out = self.id.exports();
        for c in self.conns.values() {
            out.extend(c.link.secrets());
        }
        out
    }

    /// Admits `count` sequences for `req` under its token's limit.
    pub fn admit(&mut self, req: &Request, count: usize, now: u64) -> bool {
        let allowed = self.ledger.check(&req.auth.sigma, count as u64, now, req.auth.rate_limit) == Decision::Allow;
        self.admissions.push(Admission {
            sigma: req.auth.sigma,
            count: count as u64,
            at: now,
            limit: req.auth.rate_limit,
            allowed,
        });
        allowed
    }
}

pub fn share_name(index: u32) -> ScalarName {
    ScalarName::Share {
        secret: "k".into(),
        index,
    }
}

pub struct KeyserverRole {
    pub ep: ScepEndpoint,
    pub share: KeyShare,
}

impl KeyserverRole {
    fn serve(&mut self, net: &mut NetCore, req: Request) {
        let group = net.group.clone();
        let reply = match parse_keyserver_request(&group, &req.msg) {
            Err(_) => error_message("Malformed"),
            Ok((omega, _)) if omega != req.omega => error_message("BadCookie"),
            Ok((_, xs)) if !self.ep.admit(&req, xs.len(), net.now()) => error_message("RateLimited"),
            Ok((_, xs)) => {
                let name = share_name(self.share.index);
                let ys: Vec<_> = xs
                    .iter()
                    .map(|(x, sym)| (eval_share(&group, &self.share, x), sym.pow(&name, 1)))
                    .collect();
                keyserver_response(&ys)
            }
        };
        self.ep.reply(net, req.conn, reply);
    }
}

impl Role for KeyserverRole {
    fn name(&self) -> &str {
        &self.ep.id.name
    }

    fn handle(&mut self, net: &mut NetCore, env: Envelope) {
        for req in self.ep.on_envelope(net, &env) {
            self.serve(net, req);
        }
    }

    fn exports(&self) -> Vec<KTerm> {
        let mut out = self.ep.exports();
        out.push(KTerm::Scalar(share_name(self.share.index)));
        out
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

struct PendingQuery {
    conn: u32,
    request: DatabaseRequest,
    wire: Vec<u8>,
}

pub struct DatabaseConfig {
    pub exemption: TrustAnchor,
    pub binding: bool,
    pub suppress_metadata: bool,
    pub auth_server: String,
    pub channel_ca: VerifyKey,
}

pub struct DatabaseRole {
    pub ep: ScepEndpoint,
    pub hdb: HazardDb,
    pub config: DatabaseConfig,
    /// `(device, code)` of every exemption request received.
    pub received_codes: Vec<(String, String)>,
    pub answered: Vec<(u32, QueryResponse)>,
    auth_links: BTreeMap<u32, (ClientLink, PendingQuery)>,
}

impl DatabaseRole {
    pub fn new(ep: ScepEndpoint, hdb: HazardDb, config: DatabaseConfig) -> Self {
        DatabaseRole {
            ep,
            hdb,
            config,
            received_codes: Vec::new(),
            answered: Vec::new(),
            auth_links: BTreeMap::new(),
        }
    }

    fn answer(&mut self, net: &mut NetCore, p: &PendingQuery, exempt: &[crate::group::GroupElement]) {
        let resp = lookup(&self.hdb, &p.request.hashed, exempt, self.config.suppress_metadata);
        let key = self.config.binding.then_some(&self.ep.id.key);
        let msg = database_response(&resp, &p.wire, key);
        self.answered.push((p.conn, resp));
        self.ep.reply(net, p.conn, msg);
    }

    fn serve(&mut self, net: &mut NetCore, req: Request) {
        let request = match parse_database_request(&net.group.clone(), &req.msg) {
            Ok(r) => r,
            Err(e) => return self.ep.reply(net, req.conn, error_message(e.name())),
        };
        if request.omega != req.omega {
            return self.ep.reply(net, req.conn, error_message("BadCookie"));
        }
        if !self.ep.admit(&req, request.hashed.len(), net.now()) {
            return self.ep.reply(net, req.conn, error_message("RateLimited"));
        }
        let pending = PendingQuery {
            conn: req.conn,
            wire: req.msg.wire(),
            request,
        };
        let Some(ex) = &pending.request.exemption else {
            return self.answer(net, &pending, &[]);
        };
        let ex_anchor = &self.config.exemption;
        let listed = ex.elt.token.exempt_sequences().map_or(0, <[_]>::len);
        let device = ex.elt.token.device_id().map(str::to_string);
        let verdict = validate_chain(&ex.elt, &ex_anchor.root, net.now(), &ex_anchor.revocations)
            .map_err(|e| e.name().to_string())
            .and_then(|()| match (ex.elt.token.token_type(), device) {
                (TokenType::Exemption, Some(d)) if listed == ex.hashed_exempt.len() => Ok(d),
                (TokenType::Exemption, Some(_)) => Err("sequence count mismatch".into()),
                _ => Err("not an exemption token".into()),
            });
        let device = match verdict {
            Ok(d) => d,
            Err(why) => return self.ep.reply(net, req.conn, error_message(&format!("BadEltChain: {why}"))),
        };
        self.received_codes.push((device.clone(), ex.code.clone()));
        let body = auth_request(&device, &ex.code, net.now());
        let mut link = ClientLink::open(net, &self.ep.id.name, &self.config.auth_server, self.config.channel_ca);
        link.send(net, body);
        self.auth_links.insert(link.conn, (link, pending));
    }

    fn on_auth_reply(&mut self, net: &mut NetCore, env: &Envelope) {
        let Some((mut link, pending)) = self.auth_links.remove(&env.conn) else {
            return;
        };
        let msgs = link.on_envelope(net, env);
        let Some(msg) = msgs.first() else {
            if link.error().is_some() {
                self.ep.reply(net, pending.conn, error_message("AuthBackendRejected"));
            } else {
                self.auth_links.insert(env.conn, (link, pending));
            }
            return;
        };
        match parse_auth_response(msg) {
            Ok(AuthDecision::Ok) => {
                let exempt = pending.request.exemption.as_ref().map(|e| e.hashed_exempt.clone()).unwrap_or_default();
                self.answer(net, &pending, &exempt);
            }
            _ => self.ep.reply(net, pending.conn, error_message("AuthBackendRejected")),
        }
    }
}

impl Role for DatabaseRole {
    fn name(&self) -> &str {
        &self.ep.id.name
    }

    fn handle(&mut self, net: &mut NetCore, env: Envelope) {
        if self.auth_links.contains_key(&env.conn) {
            return self.on_auth_reply(net, &env);
        }
        for req in self.ep.on_envelope(net, &env) {
            self.serve(net, req);
        }
    }

    fn exports(&self) -> Vec<KTerm> {
        let mut out = self.ep.exports();
        for (link, _) in self.auth_links.values() {
            out.extend(link.secrets());
        }
        out
    }

    fn state_bytes(&self) -> Vec<u8> {
        let mut out = self.hdb.encode();
        for (c, r) in &self.answered {
            out.extend(c.to_be_bytes());
            out.extend(r.encode());
        }
        out
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthLogEntry {
    pub step: u64,
    pub peer: String,
    pub device: String,
    pub code: String,
    pub decision: String,
}

/// One-time-code verifier reached over its own channel. A request is
/// judged at the backend's own clock; a stated timestamp outside the
/// current window is rejected.
pub struct AuthRole {
    pub name: String,
    pub creds: ServerCredentials,
    pub backend: AuthBackend,
    pub log: Vec<AuthLogEntry>,
    cache: SessionCache,
    links: BTreeMap<u32, ServerLink>,
}

impl AuthRole {
    pub fn new(name: &str, creds: ServerCredentials, backend: AuthBackend) -> Self {
        AuthRole {
            name: name.to_string(),
            creds,
            backend,
            log: Vec::new(),
            cache: SessionCache::default(),
            links: BTreeMap::new(),
        }
    }
}

impl Role for AuthRole {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, net: &mut NetCore, env: Envelope) {
        let link = self
            .links
            .entry(env.conn)
            .or_insert_with(|| ServerLink::new(env.conn, &self.name, &env.from));
        for msg in link.on_envelope(net, &env, &self.creds, &mut self.cache, false) {
            let now = net.now();
            let (reply, entry) = match parse_auth_request(&msg) {
                Err(_) => (error_message("Malformed"), None),
                Ok((device, code, ts)) => {
                    let decision = if ts / TOTP_STEP_SECS != now / TOTP_STEP_SECS {
                        Ok(AuthDecision::Reject)
                    } else {
                        self.backend.verify(&device, &code, now)
                    };
                    let (reply, label) = match decision {
                        Ok(d) => (auth_response(d), format!("{d:?}")),
                        Err(e) => (error_message(e.name()), e.name().to_string()),
                    };
                    (reply, Some((device, code, label)))
                }
            };
            if let Some((device, code, decision)) = entry {
                let step = net.note(&self.name, format!("auth {device}: {decision}"));
                self.log.push(AuthLogEntry {
                    step,
                    peer: env.from.clone(),
                    device,
                    code,
                    decision,
                });
            }
            link.send(net, reply);
        }
    }

    fn exports(&self) -> Vec<KTerm> {
        let mut out = vec![KTerm::SigningKey(self.creds.key.verify_key().0.to_vec())];
        for l in self.links.values() {
            out.extend(l.secrets());
        }
        out
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
