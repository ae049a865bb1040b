//! The synthesizer (merged with its customer), driven step by step by a
//! scenario rather than reacting to deliveries.

use std::collections::{BTreeMap, VecDeque};

use crate::channel::{ChannelError, ChannelSession};
use crate::crypto::{KeyPair, VerifyKey};
use crate::doprf::{blind, combine, unblind, BlindingFactor};
use crate::group::GroupElement;
use crate::pki::{validate_chain, CertChain, Token, TokenPayload, TokenType};
use crate::scep::{ScepClient, ScepParams, ScepVariant, TrustAnchor};
use crate::screening::{
    database_request, keyserver_request, parse_database_response, parse_error, parse_keyserver_response,
    validate_sequence, ExemptionArgs, QueryResponse, ScreeningError,
};
use crate::term::{KTerm, ScalarName, SymElt, Term};

use super::link::ClientLink;
use super::net::Sim;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub variant: ScepVariant,
    pub resumption: bool,
    pub binding: bool,
    pub threshold: usize,
    /// Keyservers in order of preference; the first `threshold` that
    /// complete authentication are used.
    pub keyservers: Vec<String>,
    pub database: String,
    pub max_sequence_len: usize,
}

/// A completed client-side SCEP run.
#[derive(Debug, Clone)]
pub struct ClientRun {
    pub server: String,
    pub conn: u32,
    pub params: ScepParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Basic,
    Exemption,
}

#[derive(Debug, Clone)]
pub struct QueryRecord {
    pub kind: QueryKind,
    pub order: Vec<Vec<u8>>,
    pub exempt: Vec<Vec<u8>>,
    /// Database the query was sent to.
    pub database: String,
    pub result: Result<QueryResponse, ScreeningError>,
    /// Transcript step at which the outcome was recorded.
    pub step: u64,
}

struct SConn {
    server: String,
    link: ClientLink,
    app: VecDeque<Term>,
    omega: [u8; 32],
    token: Option<Token>,
}

pub struct Synthesizer {
    pub name: String,
    pub chain: CertChain,
    key: KeyPair,
    channel_ca: VerifyKey,
    infra: TrustAnchor,
    exemption: TrustAnchor,
    pub config: SynthConfig,
    pub runs: Vec<ClientRun>,
    pub queries: Vec<QueryRecord>,
    /// Reconnections where resumption was wanted but refused.
    pub resume_refusals: Vec<(String, ChannelError)>,
    conns: BTreeMap<u32, SConn>,
    cache: BTreeMap<String, ChannelSession>,
    batch: u64,
    secrets: Vec<KTerm>,
}

impl Synthesizer {
    pub fn new(
        name: &str,
        chain: CertChain,
        key: KeyPair,
        channel_ca: VerifyKey,
        infra: TrustAnchor,
        exemption: TrustAnchor,
        config: SynthConfig,
    ) -> Self {
        Synthesizer {
            name: name.to_string(),
            chain,
            key,
            channel_ca,
            infra,
            exemption,
            config,
            runs: Vec::new(),
            queries: Vec::new(),
            resume_refusals: Vec::new(),
            conns: BTreeMap::new(),
            cache: BTreeMap::new(),
            batch: 0,
            secrets: Vec::new(),
        }
    }

    /// Token key, blinding exponents and channel secrets.
    pub fn exports(&self) -> Vec<KTerm> {
        let mut out = vec![KTerm::SigningKey(self.key.verify_key().0.to_vec())];
        out.extend(self.secrets.iter().cloned());
        for s in self.cache.values() {
            out.extend(s.secrets());
        }
        out
    }

    fn route(&mut self, sim: &mut Sim) {
        for env in sim.net.take_inbox(&self.name) {
            if let Some(c) = self.conns.get_mut(&env.conn) {
                let msgs = c.link.on_envelope(&mut sim.net, &env);
                c.app.extend(msgs);
            }
        }
    }

    fn wait_open(&mut self, sim: &mut Sim, conn: u32) -> Result<(), ScreeningError> {
        loop {
            let c = &self.conns[&conn];
            if c.link.is_open() {
                return Ok(());
            }
            if let Some(e) = c.link.error() {
                return Err(e.clone().into());
            }
            if !sim.pump_for(&self.name) {
                return Err(ScreeningError::Stalled);
            }
            self.route(sim);
        }
    }

    fn recv_app(&mut self, sim: &mut Sim, conn: u32) -> Result<Term, ScreeningError> {
        loop {
            let c = self.conns.get_mut(&conn).expect("open connection");
            if let Some(m) = c.app.pop_front() {
                return Ok(m);
            }
            if let Some(e) = c.link.error() {
                return Err(e.clone().into());
            }
            if !sim.pump_for(&self.name) {
                return Err(ScreeningError::Stalled);
            }
            self.route(sim);
        }
    }

    fn send(&mut self, sim: &mut Sim, conn: u32, body: Term) {
        let c = self.conns.get_mut(&conn).expect("open connection");
        c.link.send(&mut sim.net, body);
    }

    fn open_channel(&mut self, sim: &mut Sim, server: &str) -> Result<u32, ScreeningError> {
        if let Some(old) = self.cache.get(server).cloned() {
            match ClientLink::resume(&mut sim.net, &self.name, server, &old, self.config.resumption) {
                Ok(link) => {
                    let conn = self.register(server, link);
                    match self.wait_open(sim, conn) {
                        Ok(()) => return Ok(conn),
                        Err(ScreeningError::Channel(e @ ChannelError::ResumptionDisabled)) => {
                            self.conns.remove(&conn);
                            sim.net.note(&self.name, format!("resume {server} refused: {}", e.name()));
                            self.resume_refusals.push((server.to_string(), e));
                        }
                        Err(e) => return Err(e),
                    }
                }
                Err(e) => {
                    sim.net.note(&self.name, format!("resume {server}: {}", e.name()));
                    self.resume_refusals.push((server.to_string(), e));
                }
            }
        }
        let link = ClientLink::open(&mut sim.net, &self.name, server, self.channel_ca);
        let conn = self.register(server, link);
        self.wait_open(sim, conn)?;
        Ok(conn)
    }

    fn register(&mut self, server: &str, link: ClientLink) -> u32 {
        let conn = link.conn;
        self.conns.insert(
            conn,
            SConn {
                server: server.to_string(),
                link,
                app: VecDeque::new(),
                omega: [0; 32],
                token: None,
            },
        );
        conn
    }

    /// Opens (or resumes) a channel to `server` and authenticates over it.
    fn connect(&mut self, sim: &mut Sim, server: &str, purpose: &str) -> Result<u32, ScreeningError> {
        let conn = self.open_channel(sim, server)?;
        let mut scep = ScepClient::new(self.config.variant, self.chain.clone(), self.key.clone());
        let hello = scep.hello(&[purpose], &mut sim.net.rng);
        self.send(sim, conn, hello);
        let resp = self.recv_app(sim, conn)?;
        if let Some(e) = parse_error(&resp) {
            return Err(ScreeningError::from_remote(&e));
        }
        let fin = scep.on_response(&resp, &self.infra, sim.net.now(), server)?;
        self.send(sim, conn, fin);
        let params = scep.params().expect("finished").clone();
        let token = Token::decode(&params.t_w).ok();
        let c = self.conns.get_mut(&conn).expect("registered");
        c.omega = params.omega;
        c.token = token;
        self.runs.push(ClientRun {
            server: server.to_string(),
            conn,
            params,
        });
        Ok(conn)
    }

    fn close_all(&mut self) {
        for (_, c) in std::mem::take(&mut self.conns) {
            if let Some(s) = c.link.session() {
                self.cache.insert(c.server, s.clone());
            }
        }
    }

    fn connect_keyservers(&mut self, sim: &mut Sim) -> Result<Vec<u32>, ScreeningError> {
        let t = self.config.threshold;
        let mut out = Vec::new();
        let mut last_err = None;
        for ks in self.config.keyservers.clone() {
            if out.len() == t {
                break;
            }
            match self.connect(sim, &ks, "keyserver") {
                Ok(c) => out.push(c),
                Err(e) => {
                    sim.net.note(&self.name, format!("keyserver {ks} unavailable: {}", e.name()));
                    last_err = Some(e);
                }
            }
        }
        if out.len() < t {
            return Err(last_err.unwrap_or(ScreeningError::NotEnoughKeyservers {
                needed: t,
                available: out.len(),
            }));
        }
        Ok(out)
    }

    /// One blinded evaluation round over `keyservers`; returns `f_k(s)` per
    /// sequence.
    fn evaluate(
        &mut self,
        sim: &mut Sim,
        keyservers: &[u32],
        seqs: &[Vec<u8>],
    ) -> Result<Vec<(GroupElement, SymElt)>, ScreeningError> {
        let group = sim.net.group.clone();
        let beta = BlindingFactor::random(&group, &mut sim.net.rng);
        let beta_name = ScalarName::named(format!("beta.{}.{}", self.name, self.batch));
        self.batch += 1;
        self.secrets.push(KTerm::Scalar(beta_name.clone()));
        let xs: Vec<(GroupElement, SymElt)> = seqs
            .iter()
            .map(|s| (blind(&group, &group.hash_to_group(s), &beta), SymElt::hashed(s).pow(&beta_name, 1)))
            .collect();
        for &c in keyservers {
            let omega = self.conns[&c].omega;
            self.send(sim, c, keyserver_request(&omega, &xs));
        }
        let mut per_server = Vec::new();
        for &c in keyservers {
            let msg = self.recv_app(sim, c)?;
            let ys = parse_keyserver_response(&group, &msg)?;
            if ys.len() != seqs.len() {
                return Err(ScreeningError::VerdictCountMismatch {
                    expected: seqs.len(),
                    got: ys.len(),
                });
            }
            let index = match self.conns[&c].token.as_ref().map(|t| &t.payload) {
                Some(TokenPayload::KeyserverInfra { index }) => *index,
                _ => return Err(ScreeningError::Remote("keyserver token carries no share index".into())),
            };
            per_server.push((index, ys));
        }
        let t = keyservers.len();
        (0..seqs.len())
            .map(|j| {
                let pts: Vec<(u32, GroupElement)> = per_server.iter().map(|(i, ys)| (*i, ys[j].0.clone())).collect();
                let syms: Vec<SymElt> = per_server.iter().map(|(_, ys)| ys[j].1.clone()).collect();
                let v = unblind(&group, &combine(&group, &pts, t)?, &beta)?;
                let sym = SymElt::combine_shares(&syms)
                    .map(|e| e.pow(&beta_name, -1))
                    .unwrap_or_else(|| SymElt::opaque(v.as_bytes()));
                Ok((v, sym))
            })
            .collect()
    }

    fn ask_database(
        &mut self,
        sim: &mut Sim,
        hashed: &[(GroupElement, SymElt)],
        exemption: Option<ExemptionArgs<'_>>,
    ) -> Result<QueryResponse, ScreeningError> {
        let db = self.config.database.clone();
        let conn = self.connect(sim, &db, "database")?;
        let omega = self.conns[&conn].omega;
        let request = database_request(&omega, hashed, exemption);
        let wire = request.wire();
        self.send(sim, conn, request);
        let msg = self.recv_app(sim, conn)?;
        let binding_key = if self.config.binding {
            self.conns[&conn].token.as_ref().map(Token::subject_key)
        } else {
            None
        };
        if self.config.binding && binding_key.is_none() {
            return Err(ScreeningError::BindingMismatch);
        }
        let resp = parse_database_response(&msg, &wire, binding_key.as_ref())?;
        if resp.verdicts.len() != hashed.len() {
            return Err(ScreeningError::VerdictCountMismatch {
                expected: hashed.len(),
                got: resp.verdicts.len(),
            });
        }
        Ok(resp)
    }

    fn check_order(&self, order: &[Vec<u8>]) -> Result<(), ScreeningError> {
        if order.is_empty() {
            return Err(ScreeningError::InvalidSequence("empty order".into()));
        }
        order.iter().try_for_each(|s| validate_sequence(s, self.config.max_sequence_len))
    }

    fn record(&mut self, sim: &mut Sim, kind: QueryKind, order: &[Vec<u8>], exempt: Vec<Vec<u8>>, result: Result<QueryResponse, ScreeningError>) -> Result<QueryResponse, ScreeningError> {
        self.close_all();
        let summary = match &result {
            Ok(r) => r.overall().to_string(),
            Err(e) => format!("error {}", e.name()),
        };
        let step = sim.net.note(&self.name, format!("{kind:?} query: {summary}"));
        self.queries.push(QueryRecord {
            kind,
            order: order.to_vec(),
            exempt,
            database: self.config.database.clone(),
            result: result.clone(),
            step,
        });
        result
    }

    /// Blind, evaluate at `t` keyservers, combine, unblind, and look the
    /// keyed hashes up at the database.
    pub fn basic_query(&mut self, sim: &mut Sim, order: &[Vec<u8>]) -> Result<QueryResponse, ScreeningError> {
        let result = self.basic_inner(sim, order);
        self.record(sim, QueryKind::Basic, order, Vec::new(), result)
    }

    fn basic_inner(&mut self, sim: &mut Sim, order: &[Vec<u8>]) -> Result<QueryResponse, ScreeningError> {
        self.check_order(order)?;
        let ks = self.connect_keyservers(sim)?;
        let hashed = self.evaluate(sim, &ks, order)?;
        self.ask_database(sim, &hashed, None)
    }

    /// As the basic query, with a second keyserver round over the exempt
    /// sequences of `elt` and the exemption part attached to the database
    /// request.
    pub fn exemption_query(
        &mut self,
        sim: &mut Sim,
        order: &[Vec<u8>],
        elt: &CertChain,
        code: &str,
    ) -> Result<QueryResponse, ScreeningError> {
        let exempt = elt.token.exempt_sequences().map(<[_]>::to_vec).unwrap_or_default();
        let result = self.exemption_inner(sim, order, elt, code, &exempt);
        self.record(sim, QueryKind::Exemption, order, exempt, result)
    }

    fn exemption_inner(
        &mut self,
        sim: &mut Sim,
        order: &[Vec<u8>],
        elt: &CertChain,
        code: &str,
        exempt: &[Vec<u8>],
    ) -> Result<QueryResponse, ScreeningError> {
        self.check_order(order)?;
        validate_chain(elt, &self.exemption.root, sim.net.now(), &self.exemption.revocations)
            .map_err(|e| ScreeningError::BadEltChain(e.to_string()))?;
        if elt.token.token_type() != TokenType::Exemption || exempt.is_empty() {
            return Err(ScreeningError::BadEltChain("not an exemption token".into()));
        }
        let ks = self.connect_keyservers(sim)?;
        let hashed = self.evaluate(sim, &ks, order)?;
        let hashed_exempt = self.evaluate(sim, &ks, exempt)?;
        self.ask_database(sim, &hashed, Some((elt, code, &hashed_exempt)))
    }
}
