//! Deterministic message network: a virtual clock, a FIFO delivery queue,
//! adversary taps and an append-only transcript.

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::channel::{
    MSG_CLIENT_HELLO, MSG_CLIENT_KEY_EXCHANGE, MSG_RESUME_REPLY, MSG_RESUME_REQUEST, MSG_SERVER_FINISHED,
    MSG_SERVER_HELLO,
};
use crate::crypto::{RecordHeader, TAG_CLIENT_DATA, TAG_SERVER_DATA};
use crate::group::Group;
use crate::term::{KTerm, Term};

#[derive(Debug, Clone)]
pub struct Envelope {
    pub id: u64,
    pub conn: u32,
    pub from: String,
    pub to: String,
    pub term: Term,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connection {
    pub id: u32,
    pub client: String,
    pub server: String,
    /// Position among connections between the same client and server.
    pub ordinal: usize,
}

/// Selects an application record by direction, connection ordinal and
/// record sequence number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordMatcher {
    pub from: String,
    pub to: String,
    pub ordinal: usize,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tap {
    Drop(u64),
    /// Delivers message `.0` unmodified, cancelling earlier taps on it.
    Deliver(u64),
    /// Delivers the payload of message `.1` in place of message `.0`.
    Substitute(u64, u64),
    Modify(u64, Vec<u8>),
    /// Replaces the record matched by `target` with the earlier record
    /// matched by `source`.
    ReplaceRecord { target: RecordMatcher, source: RecordMatcher },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptRecord {
    pub step: u64,
    pub clock: u64,
    pub event: String,
    pub msg: Option<u64>,
    pub conn: Option<u32>,
    pub from: String,
    pub to: String,
    pub kind: String,
    pub wire: String,
    /// Record plaintext, for records whose keys the scenario knows.
    pub view: Option<String>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub records: Vec<TranscriptRecord>,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn message_kind(wire: &[u8]) -> &'static str {
    match wire.first().copied() {
        Some(MSG_CLIENT_HELLO) => "ClientHello",
        Some(MSG_SERVER_HELLO) => "ServerHello",
        Some(MSG_CLIENT_KEY_EXCHANGE) => "ClientKeyExchange",
        Some(MSG_SERVER_FINISHED) => "ServerFinished",
        Some(MSG_RESUME_REQUEST) => "ResumeRequest",
        Some(MSG_RESUME_REPLY) => "ResumeReply",
        Some(TAG_CLIENT_DATA) => "ClientData",
        Some(TAG_SERVER_DATA) => "ServerData",
        _ => "Unknown",
    }
}

/// Sequence number of an application record.
pub fn record_seq(wire: &[u8]) -> Option<u64> {
    RecordHeader::parse(wire)
        .filter(|h| h.tag == TAG_CLIENT_DATA || h.tag == TAG_SERVER_DATA)
        .map(|h| h.seq)
}

pub struct NetCore {
    pub group: Group,
    pub rng: ChaCha20Rng,
    clock: u64,
    next_msg: u64,
    queue: VecDeque<Envelope>,
    conns: Vec<Connection>,
    inboxes: BTreeMap<String, VecDeque<Envelope>>,
    sent: Vec<Envelope>,
    taps: Vec<Tap>,
    transcript: Transcript,
}

impl NetCore {
    pub fn new(group: Group, seed: u64, start_time: u64) -> Self {
        NetCore {
            group,
            rng: ChaCha20Rng::seed_from_u64(seed),
            clock: start_time,
            next_msg: 0,
            queue: VecDeque::new(),
            conns: Vec::new(),
            inboxes: BTreeMap::new(),
            sent: Vec::new(),
            taps: Vec::new(),
            transcript: Transcript::default(),
        }
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn advance_clock(&mut self, secs: u64) {
        self.clock += secs;
        self.log("advance-clock", None, None, "", "", "", Vec::new(), None, Some(format!("+{secs}s")));
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Step number the next transcript record will get.
    pub fn next_step(&self) -> u64 {
        self.transcript.records.len() as u64
    }

    /// Every message put on the wire, as sent (including injections).
    pub fn sent(&self) -> &[Envelope] {
        &self.sent
    }

    pub fn connections(&self) -> &[Connection] {
        &self.conns
    }

    pub fn connection(&self, id: u32) -> Option<&Connection> {
        self.conns.get(id as usize)
    }

    pub fn add_tap(&mut self, tap: Tap) {
        self.taps.push(tap);
    }

    #[allow(clippy::too_many_arguments)]
    fn log(
        &mut self,
        event: &str,
        msg: Option<u64>,
        conn: Option<u32>,
        from: &str,
        to: &str,
        kind: &str,
        wire: Vec<u8>,
        view: Option<String>,
        note: Option<String>,
    ) -> u64 {
        let step = self.next_step();
        self.transcript.records.push(TranscriptRecord {
            step,
            clock: self.clock,
            event: event.to_string(),
            msg,
            conn,
            from: from.to_string(),
            to: to.to_string(),
            kind: kind.to_string(),
            wire: hex::encode(wire),
            view,
            note,
        });
        step
    }

    /// Free-form transcript annotation; returns its step.
    pub fn note(&mut self, who: &str, text: impl Into<String>) -> u64 {
        self.log("note", None, None, who, "", "", Vec::new(), None, Some(text.into()))
    }

    pub fn connect(&mut self, client: &str, server: &str) -> u32 {
        let id = self.conns.len() as u32;
        let ordinal = self.conns.iter().filter(|c| c.client == client && c.server == server).count();
        self.conns.push(Connection {
            id,
            client: client.to_string(),
            server: server.to_string(),
            ordinal,
        });
        self.log("connect", None, Some(id), client, server, "", Vec::new(), None, Some(format!("ordinal {ordinal}")));
        id
    }

    fn enqueue(&mut self, event: &str, conn: u32, from: &str, to: &str, term: Term) -> u64 {
        let id = self.next_msg;
        self.next_msg += 1;
        let wire = term.wire();
        let view = match &term {
            Term::Sealed { body, .. } => Some(hex::encode(body.wire())),
            _ => None,
        };
        self.log(event, Some(id), Some(conn), from, to, message_kind(&wire), wire, view, None);
        let env = Envelope {
            id,
            conn,
            from: from.to_string(),
            to: to.to_string(),
            term,
        };
        self.sent.push(env.clone());
        self.queue.push_back(env);
        id
    }

    pub fn send(&mut self, conn: u32, from: &str, to: &str, term: Term) -> u64 {
        self.enqueue("send", conn, from, to, term)
    }

    /// Adversary-originated message, queued like any other.
    pub fn inject(&mut self, conn: u32, from: &str, to: &str, wire: Vec<u8>) -> u64 {
        self.enqueue("inject", conn, from, to, Term::Atom(wire))
    }

    fn matches(&self, env: &Envelope, m: &RecordMatcher) -> bool {
        env.from == m.from
            && env.to == m.to
            && self.connection(env.conn).map(|c| c.ordinal) == Some(m.ordinal)
            && record_seq(&env.term.wire()) == Some(m.seq)
    }

    /// Applies taps; `None` if the message is dropped.
    fn tapped(&mut self, mut env: Envelope) -> Option<Envelope> {
        let mut action = None;
        for tap in &self.taps {
            match tap {
                Tap::Drop(id) | Tap::Deliver(id) | Tap::Substitute(id, _) | Tap::Modify(id, _) if *id == env.id => {
                    action = Some(tap.clone())
                }
                Tap::ReplaceRecord { target, source } if self.matches(&env, target) => {
                    if let Some(src) = self.sent.iter().find(|e| self.matches(e, source)) {
                        action = Some(Tap::Substitute(env.id, src.id));
                    }
                }
                _ => {}
            }
        }
        match action {
            Some(Tap::Drop(_)) => {
                self.log("drop", Some(env.id), Some(env.conn), &env.from, &env.to, "", Vec::new(), None, None);
                None
            }
            Some(Tap::Substitute(_, src)) => {
                if let Some(s) = self.sent.iter().find(|e| e.id == src) {
                    env.term = s.term.clone();
                    let wire = env.term.wire();
                    self.log(
                        "substitute",
                        Some(env.id),
                        Some(env.conn),
                        &env.from,
                        &env.to,
                        message_kind(&wire),
                        wire,
                        None,
                        Some(format!("payload of message {src}")),
                    );
                }
                Some(env)
            }
            Some(Tap::Modify(_, bytes)) => {
                env.term = Term::Atom(bytes.clone());
                self.log("modify", Some(env.id), Some(env.conn), &env.from, &env.to, message_kind(&bytes), bytes, None, None);
                Some(env)
            }
            _ => Some(env),
        }
    }

    /// Pops the next message and applies taps. Returns `None` when the queue
    /// is empty; `Some(None)` when the popped message was dropped.
    pub fn pop(&mut self) -> Option<Option<Envelope>> {
        let env = self.queue.pop_front()?;
        Some(self.tapped(env).inspect(|e| {
            let wire = e.term.wire();
            self.log("deliver", Some(e.id), Some(e.conn), &e.from, &e.to, message_kind(&wire), Vec::new(), None, None);
        }))
    }

    pub fn push_inbox(&mut self, env: Envelope) {
        self.inboxes.entry(env.to.clone()).or_default().push_back(env);
    }

    pub fn take_inbox(&mut self, who: &str) -> Vec<Envelope> {
        self.inboxes.get_mut(who).map(|q| q.drain(..).collect()).unwrap_or_default()
    }

    pub fn has_inbox(&self, who: &str) -> bool {
        self.inboxes.get(who).is_some_and(|q| !q.is_empty())
    }
}

/// A reactive network participant.
pub trait Role: Any {
    fn name(&self) -> &str;
    fn handle(&mut self, net: &mut NetCore, env: Envelope);
    /// Keys and secrets the role holds, handed to the adversary when the
    /// role is corrupt.
    fn exports(&self) -> Vec<KTerm>;
    /// Serialized state, for at-rest scans.
    fn state_bytes(&self) -> Vec<u8> {
        Vec::new()
    }
    fn as_any(&self) -> &dyn Any;
}

/// Network plus reactive roles. Messages to names without a registered
/// role collect in that name's inbox for a driver to consume.
pub struct Sim {
    pub net: NetCore,
    roles: BTreeMap<String, Box<dyn Role>>,
}

impl Sim {
    pub fn new(net: NetCore) -> Self {
        Sim {
            net,
            roles: BTreeMap::new(),
        }
    }

    pub fn add_role(&mut self, role: Box<dyn Role>) {
        self.roles.insert(role.name().to_string(), role);
    }

    pub fn role<T: 'static>(&self, name: &str) -> Option<&T> {
        self.roles.get(name)?.as_any().downcast_ref()
    }

    pub fn role_dyn(&self, name: &str) -> Option<&dyn Role> {
        self.roles.get(name).map(|r| r.as_ref())
    }

    pub fn role_names(&self) -> impl Iterator<Item = &String> {
        self.roles.keys()
    }

    /// Delivers one message. `false` when nothing is queued.
    pub fn step(&mut self) -> bool {
        let Some(next) = self.net.pop() else {
            return false;
        };
        if let Some(env) = next {
            match self.roles.get_mut(&env.to) {
                Some(role) => role.handle(&mut self.net, env),
                None => self.net.push_inbox(env),
            }
        }
        true
    }

    /// Delivers messages until `who` has mail. `false` if the queue drains
    /// first.
    pub fn pump_for(&mut self, who: &str) -> bool {
        while !self.net.has_inbox(who) {
            if !self.step() {
                return false;
            }
        }
        true
    }

    pub fn run_until_idle(&mut self) {
        while self.step() {}
    }
}
