//! Channel endpoints bound to simulator connections.

use std::collections::BTreeMap;

use crate::channel::{
    message_tag, parse_resume_reply, parse_resume_request, resume_reply, resume_request, ChannelError,
    ChannelSession, ClientHandshake, ServerCredentials, ServerHandshake, MSG_CLIENT_HELLO, MSG_CLIENT_KEY_EXCHANGE,
    MSG_RESUME_REPLY, MSG_RESUME_REQUEST, MSG_SERVER_FINISHED, MSG_SERVER_HELLO,
};
use crate::crypto::VerifyKey;
use crate::term::{KTerm, Term};

use super::net::{Envelope, NetCore};

enum ClientState {
    Handshaking(Box<ClientHandshake>),
    Resuming(ChannelSession),
    Open(ChannelSession),
    Failed(ChannelError),
}

/// Client end of one connection. Application messages sent before the
/// handshake completes are held and flushed once it does.
pub struct ClientLink {
    pub conn: u32,
    me: String,
    peer: String,
    state: ClientState,
    pending: Vec<Term>,
    last_session: Option<ChannelSession>,
}

impl ClientLink {
    pub fn open(net: &mut NetCore, me: &str, peer: &str, ca: VerifyKey) -> Self {
        let conn = net.connect(me, peer);
        let (hs, hello) = ClientHandshake::start(&net.group.clone(), peer, ca, &mut net.rng);
        net.send(conn, me, peer, hello);
        ClientLink {
            conn,
            me: me.to_string(),
            peer: peer.to_string(),
            state: ClientState::Handshaking(Box::new(hs)),
            pending: Vec::new(),
            last_session: None,
        }
    }

    /// Reconnects under the keys of `old`. Fails without touching the
    /// network when `enabled` is off.
    pub fn resume(net: &mut NetCore, me: &str, peer: &str, old: &ChannelSession, enabled: bool) -> Result<Self, ChannelError> {
        let resumed = old.resume(enabled)?;
        let conn = net.connect(me, peer);
        net.send(conn, me, peer, resume_request(old));
        Ok(ClientLink {
            conn,
            me: me.to_string(),
            peer: peer.to_string(),
            state: ClientState::Resuming(resumed),
            pending: Vec::new(),
            last_session: None,
        })
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn is_open(&self) -> bool {
        matches!(self.state, ClientState::Open(_))
    }

    pub fn error(&self) -> Option<&ChannelError> {
        match &self.state {
            ClientState::Failed(e) => Some(e),
            _ => None,
        }
    }

    /// The established session, or the last one before a failure.
    pub fn session(&self) -> Option<&ChannelSession> {
        match &self.state {
            ClientState::Open(s) => Some(s),
            _ => self.last_session.as_ref(),
        }
    }

    pub fn secrets(&self) -> Vec<KTerm> {
        self.session().map(ChannelSession::secrets).unwrap_or_default()
    }

    pub fn send(&mut self, net: &mut NetCore, body: Term) {
        match &mut self.state {
            ClientState::Open(s) => {
                let rec = s.send(body);
                net.send(self.conn, &self.me, &self.peer, rec);
            }
            ClientState::Failed(_) => {}
            _ => self.pending.push(body),
        }
    }

    fn fail(&mut self, e: ChannelError) {
        if let ClientState::Open(s) = std::mem::replace(&mut self.state, ClientState::Failed(e.clone())) {
            self.last_session = Some(s);
        }
        self.state = ClientState::Failed(e);
    }

    fn established(&mut self, net: &mut NetCore, session: ChannelSession) {
        self.state = ClientState::Open(session);
        for body in std::mem::take(&mut self.pending) {
            self.send(net, body);
        }
    }

    /// Processes one incoming message; returns any application plaintexts.
    pub fn on_envelope(&mut self, net: &mut NetCore, env: &Envelope) -> Vec<Term> {
        let tag = message_tag(&env.term.wire());
        let state = std::mem::replace(&mut self.state, ClientState::Failed(ChannelError::UnexpectedMessage("busy")));
        match state {
            ClientState::Handshaking(mut hs) if tag == Some(MSG_SERVER_HELLO) => {
                match hs.on_server_hello(&env.term, &mut net.rng) {
                    Ok(cke) => {
                        net.send(self.conn, &self.me, &self.peer, cke);
                        self.state = ClientState::Handshaking(hs);
                    }
                    Err(e) => self.fail(e),
                }
                Vec::new()
            }
            ClientState::Handshaking(hs) if tag == Some(MSG_SERVER_FINISHED) => {
                match hs.on_server_finished(&env.term) {
                    Ok(s) => self.established(net, s),
                    Err(e) => self.fail(e),
                }
                Vec::new()
            }
            ClientState::Resuming(s) if tag == Some(MSG_RESUME_REPLY) => {
                match parse_resume_reply(&env.term) {
                    Ok(()) => self.established(net, s),
                    Err(e) => self.fail(e),
                }
                Vec::new()
            }
            ClientState::Open(mut s) => match s.recv(&env.term) {
                Ok(body) => {
                    self.state = ClientState::Open(s);
                    vec![body]
                }
                Err(e) => {
                    self.state = ClientState::Open(s);
                    self.fail(e);
                    Vec::new()
                }
            },
            ClientState::Failed(e) => {
                self.state = ClientState::Failed(e);
                Vec::new()
            }
            _ => {
                self.fail(ChannelError::UnexpectedMessage("out-of-order handshake message"));
                Vec::new()
            }
        }
    }
}

/// Server-side store of established sessions, by session id.
#[derive(Default)]
pub struct SessionCache {
    sessions: BTreeMap<[u8; 32], ChannelSession>,
}

impl SessionCache {
    pub fn insert(&mut self, s: &ChannelSession) {
        self.sessions.insert(s.session_id(), s.clone());
    }

    pub fn get(&self, id: &[u8; 32]) -> Option<&ChannelSession> {
        self.sessions.get(id)
    }
}

enum ServerState {
    Fresh,
    Handshaking(Box<ServerHandshake>),
    Open(Box<ChannelSession>),
    Failed(ChannelError),
}

/// Server end of one connection.
pub struct ServerLink {
    pub conn: u32,
    pub peer: String,
    me: String,
    state: ServerState,
    last_session: Option<ChannelSession>,
}

impl ServerLink {
    pub fn new(conn: u32, me: &str, peer: &str) -> Self {
        ServerLink {
            conn,
            peer: peer.to_string(),
            me: me.to_string(),
            state: ServerState::Fresh,
            last_session: None,
        }
    }

    pub fn session(&self) -> Option<&ChannelSession> {
        match &self.state {
            ServerState::Open(s) => Some(s.as_ref()),
            _ => self.last_session.as_ref(),
        }
    }

    pub fn error(&self) -> Option<&ChannelError> {
        match &self.state {
            ServerState::Failed(e) => Some(e),
            _ => None,
        }
    }

    pub fn secrets(&self) -> Vec<KTerm> {
        self.session().map(ChannelSession::secrets).unwrap_or_default()
    }

    pub fn send(&mut self, net: &mut NetCore, body: Term) {
        if let ServerState::Open(s) = &mut self.state {
            let rec = s.send(body);
            net.send(self.conn, &self.me, &self.peer, rec);
        }
    }

    fn fail(&mut self, e: ChannelError) {
        if let ServerState::Open(s) = std::mem::replace(&mut self.state, ServerState::Failed(e.clone())) {
            self.last_session = Some(*s);
        }
    }

    pub fn on_envelope(
        &mut self,
        net: &mut NetCore,
        env: &Envelope,
        creds: &ServerCredentials,
        cache: &mut SessionCache,
        resumption: bool,
    ) -> Vec<Term> {
        let tag = message_tag(&env.term.wire());
        let state = std::mem::replace(&mut self.state, ServerState::Failed(ChannelError::UnexpectedMessage("busy")));
        match state {
            ServerState::Fresh if tag == Some(MSG_CLIENT_HELLO) => {
                let mut hs = ServerHandshake::new(&net.group.clone(), creds);
                match hs.on_client_hello(&env.term, &mut net.rng) {
                    Ok(sh) => {
                        net.send(self.conn, &self.me, &self.peer, sh);
                        self.state = ServerState::Handshaking(Box::new(hs));
                    }
                    Err(e) => self.fail(e),
                }
            }
            ServerState::Fresh if tag == Some(MSG_RESUME_REQUEST) => {
                let resumed = parse_resume_request(&env.term)
                    .ok()
                    .and_then(|id| cache.get(&id))
                    .and_then(|s| s.resume(resumption).ok());
                net.send(self.conn, &self.me, &self.peer, resume_reply(resumed.is_some()));
                self.state = match resumed {
                    Some(s) => ServerState::Open(Box::new(s)),
                    None => ServerState::Failed(ChannelError::ResumptionDisabled),
                };
            }
            ServerState::Handshaking(hs) if tag == Some(MSG_CLIENT_KEY_EXCHANGE) => match hs.on_client_key_exchange(&env.term) {
                Ok((s, fin)) => {
                    net.send(self.conn, &self.me, &self.peer, fin);
                    cache.insert(&s);
                    self.state = ServerState::Open(Box::new(s));
                }
                Err(e) => self.fail(e),
            },
            ServerState::Open(mut s) => {
                let res = s.recv(&env.term);
                self.state = ServerState::Open(s);
                match res {
                    Ok(body) => return vec![body],
                    Err(e) => self.fail(e),
                }
            }
            ServerState::Failed(e) => self.state = ServerState::Failed(e),
            _ => self.fail(ChannelError::UnexpectedMessage("out-of-order handshake message")),
        }
        Vec::new()
    }
}
