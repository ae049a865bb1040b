//! Scripted attacks: a relaying keyserver spending a victim's rate limit,
//! response swapping across reconnections, one-time-code replay by a
//! database, and σ collisions between tokens.

use std::any::Any;
use std::collections::BTreeMap;

use rand::RngCore;

use crate::channel::ChannelError;
use crate::crypto::VerifyKey;
use crate::doprf::{eval_share, KeyShare};
use crate::group::GroupElement;
use crate::scep::{parse_hello, parse_response, server_response, ScepParams, ScepServerSession, ScepState, ScepVariant, TrustAnchor};
use crate::screening::{
    auth_request, error_message, keyserver_request, keyserver_response, parse_auth_response, parse_error,
    parse_keyserver_request, parse_keyserver_response, AuthDecision, ScreeningError,
};
use crate::term::{KTerm, SymElt, Term};

use super::link::{ClientLink, ServerLink, SessionCache};
use super::net::{Envelope, NetCore, RecordMatcher, Role, Tap, Transcript};
use super::roles::{share_name, DatabaseRole, ServerIdentity};
use super::scenario::{endpoint_of, replay_admissions, CommonExpect, Run, ScenarioOutcome, ADVERSARY};
use super::world::{database_name, World, WorldConfig, DATABASE, DEVICE, SYNTH};

enum Stage {
    Hello,
    /// Hello passed on to the target; waiting for its response.
    Relaying,
    Finish,
    Serving,
    Honest(Box<ScepServerSession>),
}

struct Victim {
    link: ServerLink,
    stage: Stage,
}

enum RelayStage {
    AwaitResponse { r_s: [u8; 32], t_s: Vec<u8> },
    Authenticating,
    Spending,
    Stopped,
}

struct Relay {
    link: ClientLink,
    victim: u32,
    omega: [u8; 32],
    stage: RelayStage,
}

/// A corrupt keyserver. It relays the first synthesizer that connects to
/// it into an authentication run with `target`, presents itself to the
/// synthesizer under its own token, forwards the synthesizer's signature,
/// and then spends the synthesizer's budget at `target` in fixed batches.
/// It answers the synthesizer's own evaluation requests honestly.
pub struct MitmKeyserver {
    id: ServerIdentity,
    share: KeyShare,
    variant: ScepVariant,
    manufacturer: TrustAnchor,
    resumption: bool,
    target: String,
    channel_ca: VerifyKey,
    batch: usize,
    cache: SessionCache,
    victims: BTreeMap<u32, Victim>,
    relay: Option<Relay>,
    /// Sequences the target admitted on the relayed connection.
    pub spent: u64,
    /// Error names the target returned on the relayed connection.
    pub target_errors: Vec<String>,
}

impl MitmKeyserver {
    pub fn new(world: &World, name: &str, target: &str, batch: usize) -> Self {
        let index: u32 = name.trim_start_matches('K').parse().expect("keyserver name");
        MitmKeyserver {
            id: world.servers[name].clone(),
            share: world.shares.iter().find(|s| s.index == index).expect("share").clone(),
            variant: world.config.variant,
            manufacturer: world.manufacturer.anchor(),
            resumption: world.config.resumption,
            target: target.to_string(),
            channel_ca: world.channel_ca.verify_key(),
            batch,
            cache: SessionCache::default(),
            victims: BTreeMap::new(),
            relay: None,
            spent: 0,
            target_errors: Vec::new(),
        }
    }

    fn spend(&mut self, net: &mut NetCore) {
        let Some(relay) = self.relay.as_mut() else { return };
        let group = net.group.clone();
        let xs: Vec<(GroupElement, SymElt)> = (0..self.batch)
            .map(|_| {
                let mut b = [0u8; 32];
                net.rng.fill_bytes(&mut b);
                let e = group.hash_to_group(&b);
                let sym = SymElt::opaque(e.as_bytes());
                (e, sym)
            })
            .collect();
        relay.link.send(net, keyserver_request(&relay.omega, &xs));
    }

    fn evaluate(&self, net: &mut NetCore, msg: &Term) -> Term {
        let group = net.group.clone();
        match parse_keyserver_request(&group, msg) {
            Ok((_, xs)) => {
                let name = share_name(self.share.index);
                let ys: Vec<_> = xs
                    .iter()
                    .map(|(x, sym)| (eval_share(&group, &self.share, x), sym.pow(&name, 1)))
                    .collect();
                keyserver_response(&ys)
            }
            Err(_) => error_message("Malformed"),
        }
    }

    fn on_victim(&mut self, net: &mut NetCore, env: &Envelope) {
        let mut v = self.victims.remove(&env.conn).unwrap_or_else(|| Victim {
            link: ServerLink::new(env.conn, &self.id.name, &env.from),
            stage: Stage::Hello,
        });
        for msg in v.link.on_envelope(net, env, &self.id.creds, &mut self.cache, self.resumption) {
            v.stage = match std::mem::replace(&mut v.stage, Stage::Serving) {
                Stage::Hello if self.relay.is_none() => match parse_hello(&msg) {
                    Ok(h) => {
                        net.note(&self.id.name, format!("relaying hello of {} to {}", h.chain.token.ctx.subject.name, self.target));
                        let mut link = ClientLink::open(net, &self.id.name, &self.target, self.channel_ca);
                        link.send(net, msg.clone());
                        self.relay = Some(Relay {
                            link,
                            victim: env.conn,
                            omega: [0; 32],
                            stage: RelayStage::AwaitResponse {
                                r_s: h.r_s,
                                t_s: h.chain.token.encode(),
                            },
                        });
                        Stage::Relaying
                    }
                    Err(e) => {
                        v.link.send(net, error_message(e.name()));
                        Stage::Hello
                    }
                },
                Stage::Hello => {
                    let mut s = ScepServerSession::new(self.variant, self.id.chain.clone(), self.id.key.clone());
                    match s.on_hello(&msg, &self.manufacturer, net.now(), &mut net.rng) {
                        Ok((_, resp)) => v.link.send(net, resp),
                        Err(e) => v.link.send(net, error_message(e.name())),
                    }
                    Stage::Honest(Box::new(s))
                }
                Stage::Honest(mut s) if s.state == ScepState::Responded => {
                    match s.on_finish(&msg) {
                        Ok(_) => Stage::Serving,
                        Err(e) => {
                            v.link.send(net, error_message(e.name()));
                            Stage::Honest(s)
                        }
                    }
                }
                Stage::Finish => {
                    net.note(&self.id.name, format!("forwarding client signature to {}", self.target));
                    if let Some(r) = self.relay.as_mut() {
                        r.link.send(net, msg.clone());
                        r.stage = RelayStage::Spending;
                    }
                    self.spend(net);
                    Stage::Serving
                }
                Stage::Serving => {
                    let reply = self.evaluate(net, &msg);
                    v.link.send(net, reply);
                    Stage::Serving
                }
                other => {
                    v.link.send(net, error_message("Unauthenticated"));
                    other
                }
            };
        }
        self.victims.insert(env.conn, v);
    }

    fn on_relay(&mut self, net: &mut NetCore, env: &Envelope) {
        let Some(mut r) = self.relay.take() else { return };
        for msg in r.link.on_envelope(net, env) {
            if let Some(e) = parse_error(&msg) {
                net.note(&self.id.name, format!("{} answered {e}", self.target));
                self.target_errors.push(e);
                r.stage = RelayStage::Stopped;
                continue;
            }
            match std::mem::replace(&mut r.stage, RelayStage::Stopped) {
                RelayStage::AwaitResponse { r_s, t_s } => match parse_response(&msg) {
                    Ok(f) => {
                        let omega: [u8; 32] = f.omega.wire().try_into().expect("32-byte cookie");
                        let params = ScepParams {
                            r_s,
                            r_w: f.r_w,
                            omega,
                            t_s,
                            t_w: self.id.chain.token.encode(),
                        };
                        let resp = server_response(self.variant, &params, f.omega, &self.id.chain, &self.id.key);
                        if let Some(v) = self.victims.get_mut(&r.victim) {
                            v.link.send(net, resp);
                            v.stage = Stage::Finish;
                        }
                        r.omega = omega;
                        r.stage = RelayStage::Authenticating;
                    }
                    Err(e) => self.target_errors.push(e.name().to_string()),
                },
                RelayStage::Spending => {
                    if let Ok(ys) = parse_keyserver_response(&net.group.clone(), &msg) {
                        self.spent += ys.len() as u64;
                        r.stage = RelayStage::Spending;
                        self.relay = Some(r);
                        self.spend(net);
                        r = self.relay.take().expect("relay");
                    }
                }
                s => r.stage = s,
            }
        }
        self.relay = Some(r);
    }
}

impl Role for MitmKeyserver {
    fn name(&self) -> &str {
        &self.id.name
    }

    fn handle(&mut self, net: &mut NetCore, env: Envelope) {
        if self.relay.as_ref().is_some_and(|r| r.link.conn == env.conn) {
            self.on_relay(net, &env);
        } else {
            self.on_victim(net, &env);
        }
    }

    fn exports(&self) -> Vec<KTerm> {
        let mut out = self.id.exports();
        out.push(KTerm::Scalar(share_name(self.share.index)));
        for v in self.victims.values() {
            out.extend(v.link.secrets());
        }
        if let Some(r) = &self.relay {
            out.extend(r.link.secrets());
        }
        out
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

pub const ADVERSARY_AUTHENTICATED_AS_S: &str = "server-authenticated-adversary-as-S";
pub const BUDGET_SPENT_BY_ADVERSARY: &str = "victim-budget-spent-by-adversary";
pub const CLIENT_SIG_REJECTED: &str = "client-signature-rejected";

/// Batch size of the relaying keyserver's evaluation requests.
pub const MITM_BATCH: usize = 10;

/// A corrupt keyserver relays `S`'s authentication to keyserver `K1` and
/// spends `S`'s budget there. `S` prefers the corrupt keyserver.
pub fn attack_mitm_rate_limit(config: &WorldConfig, seed: u64) -> (Transcript, ScenarioOutcome) {
    let world = World::build(config.clone(), seed);
    let names = world.keyserver_names();
    assert!(names.len() >= 2, "needs a second keyserver to target");
    let target = names[0].clone();
    let rogue = names.last().expect("keyserver").clone();
    let mitm = MitmKeyserver::new(&world, &rogue, &target, MITM_BATCH);
    let mut run = Run::new(world, &[&rogue]);
    run.sim.add_role(Box::new(mitm));
    run.corrupt.insert(rogue.clone());
    run.synth.config.keyservers = names.iter().rev().cloned().collect();

    let scep = config.variant == ScepVariant::Scep;
    let mut out = ScenarioOutcome::new(&format!("mitm-rate-limit-{}", config.variant.as_str()));
    run.declare_common(
        &mut out,
        CommonExpect {
            oracle: true,
            agreement: !scep,
            cookie_secrecy: !scep,
        },
    );
    out.declare(ADVERSARY_AUTHENTICATED_AS_S, scep);
    out.declare(BUDGET_SPENT_BY_ADVERSARY, scep);
    out.declare(CLIENT_SIG_REJECTED, !scep);

    run.sim.net.note(ADVERSARY, format!("corrupt {rogue}"));
    let order = vec![run.world.config.hazards[0].sequence.clone(), run.world.benign[0].clone()];
    let _ = run.synth.basic_query(&mut run.sim, &order);
    run.sim.run_until_idle();

    let sigma_s = run.world.synth.chain.token.sigma();
    let now = run.sim.net.now();
    let w = endpoint_of(&run.sim, &target).expect("target endpoint");
    let impersonated = w
        .auth_log
        .iter()
        .find(|e| e.peer == rogue && matches!(&e.outcome, Ok((a, _)) if a.sigma == sigma_s));
    out.set(
        ADVERSARY_AUTHENTICATED_AS_S,
        impersonated.is_some(),
        match impersonated {
            Some(e) => format!("{target} step {}: authenticated S's token on conn {} opened by {rogue}", e.step, e.conn),
            None => format!("{target} never authenticated S's token on a connection from {rogue}"),
        },
    );
    let used = w.ledger.window_total(&sigma_s, now);
    let mitm = run.sim.role::<MitmKeyserver>(&rogue).expect("mitm role");
    let limit = run.world.config.rate_limit;
    let spent = used == limit as u128 && mitm.spent == limit && mitm.target_errors.last().map(String::as_str) == Some("RateLimited");
    out.set(
        BUDGET_SPENT_BY_ADVERSARY,
        spent,
        format!(
            "{target} ledger for S: {used}/{limit} used, {} admitted to {rogue}, last refusal {:?}",
            mitm.spent,
            mitm.target_errors.last()
        ),
    );
    let rejected = w
        .auth_log
        .iter()
        .find(|e| e.peer == rogue && e.outcome.as_ref().err().map(String::as_str) == Some("BadClientSig"));
    out.set(
        CLIENT_SIG_REJECTED,
        rejected.is_some(),
        match rejected {
            Some(e) => format!("{target} step {}: BadClientSig on conn {}", e.step, e.conn),
            None => format!("{target} accepted or never saw the forwarded signature"),
        },
    );
    out.headline = match (impersonated.is_some(), rejected.is_some(), w.auth_log.iter().find(|e| e.peer == rogue)) {
        (true, _, _) => "ATTACK SUCCEEDED".to_string(),
        (false, true, _) => "ATTACK BLOCKED: BadClientSig".to_string(),
        (false, false, Some(e)) => format!("ATTACK BLOCKED: {}", e.outcome.as_ref().err().cloned().unwrap_or_default()),
        (false, false, None) => "ATTACK BLOCKED: relay never reached the target".to_string(),
    };
    run.check_common(&mut out);
    (run.sim.net.transcript().clone(), out)
}

pub const WRONG_VERDICT_ACCEPTED: &str = "wrong-verdict-accepted";
pub const BINDING_MISMATCH_DETECTED: &str = "binding-mismatch-detected";
pub const RESUMPTION_DISABLED: &str = "resumption-disabled";
pub const SWAP_REJECTED_BY_CHANNEL: &str = "swap-rejected-by-channel";

/// Two queries with opposite verdicts; the database's answer on the second
/// connection is replaced by the record carrying its answer on the first.
pub fn attack_response_swap(config: &WorldConfig, seed: u64) -> (Transcript, ScenarioOutcome) {
    let world = World::build(config.clone(), seed);
    let mut run = Run::new(world, &[]);
    let (res, bind) = (config.resumption, config.binding);
    let onoff = |b: bool| if b { "on" } else { "off" };
    let mut out = ScenarioOutcome::new(&format!("response-swap-resumption-{}-binding-{}", onoff(res), onoff(bind)));
    run.declare_common(
        &mut out,
        CommonExpect {
            oracle: !(res && !bind),
            ..CommonExpect::default()
        },
    );
    out.declare(WRONG_VERDICT_ACCEPTED, res && !bind);
    out.declare(BINDING_MISMATCH_DETECTED, res && bind);
    out.declare(RESUMPTION_DISABLED, !res);
    out.declare(SWAP_REJECTED_BY_CHANNEL, !res);

    // The database's answer is its second record on a connection: the
    // first carries its authentication response.
    let answer = |ordinal| RecordMatcher {
        from: DATABASE.into(),
        to: SYNTH.into(),
        ordinal,
        seq: 1,
    };
    run.sim.net.add_tap(Tap::ReplaceRecord {
        target: answer(1),
        source: answer(0),
    });
    let first = vec![run.world.benign[0].clone()];
    let second = vec![run.world.config.hazards[0].sequence.clone()];
    let q1 = run.synth.basic_query(&mut run.sim, &first);
    let q2 = run.synth.basic_query(&mut run.sim, &second);
    run.sim.run_until_idle();

    let truth = run.oracle_response(&second, &[]);
    let swapped = run.sim.net.transcript().records.iter().find(|r| r.event == "substitute").map(|r| r.step);
    let at = swapped.map_or("no substitution".to_string(), |s| format!("substituted at step {s}"));
    let wrong = matches!(&q2, Ok(r) if *r != truth);
    out.set(
        WRONG_VERDICT_ACCEPTED,
        wrong,
        format!("second query: {} (truth {}), {at}", describe(&q2), truth.overall()),
    );
    out.set(
        BINDING_MISMATCH_DETECTED,
        matches!(q2, Err(ScreeningError::BindingMismatch)),
        format!("second query: {}", describe(&q2)),
    );
    let refusals: Vec<_> = run
        .synth
        .resume_refusals
        .iter()
        .filter(|(_, e)| *e == ChannelError::ResumptionDisabled)
        .map(|(s, _)| s.as_str())
        .collect();
    out.set(
        RESUMPTION_DISABLED,
        refusals.contains(&DATABASE),
        format!("resumption refused towards [{}]", refusals.join(", ")),
    );
    out.set(
        SWAP_REJECTED_BY_CHANNEL,
        swapped.is_some() && matches!(q2, Err(ScreeningError::Channel(ChannelError::AuthenticationFailure))),
        format!("second query: {}, {at}", describe(&q2)),
    );
    out.headline = match &q2 {
        _ if wrong => "VERDICT INVERTED".to_string(),
        Err(ScreeningError::BindingMismatch) => "SWAP DETECTED: BindingMismatch".to_string(),
        Err(e) => format!("SWAP REJECTED: {}", e.name()),
        Ok(_) => "SWAP HAD NO EFFECT".to_string(),
    };
    let _ = q1;
    run.check_common(&mut out);
    (run.sim.net.transcript().clone(), out)
}

fn describe(r: &Result<crate::screening::QueryResponse, ScreeningError>) -> String {
    match r {
        Ok(resp) => resp.overall().to_string(),
        Err(ScreeningError::Remote(n)) => n.clone(),
        Err(e) => e.name().to_string(),
    }
}

/// Opens an adversary connection to `peer`, sends `body` and waits for
/// the first reply.
fn adversary_call(run: &mut Run, peer: &str, body: Term) -> Result<Term, ScreeningError> {
    let ca = run.world.channel_ca.verify_key();
    let mut link = ClientLink::open(&mut run.sim.net, ADVERSARY, peer, ca);
    link.send(&mut run.sim.net, body);
    let reply = loop {
        let mut got = None;
        for env in run.sim.net.take_inbox(ADVERSARY) {
            if env.conn == link.conn {
                got = got.or(link.on_envelope(&mut run.sim.net, &env).into_iter().next());
            }
        }
        if let Some(m) = got {
            break Ok(m);
        }
        if let Some(e) = link.error() {
            break Err(e.clone().into());
        }
        if !run.sim.pump_for(ADVERSARY) {
            break Err(ScreeningError::Stalled);
        }
    };
    run.handed_over.extend(link.secrets().into_iter().map(|t| (ADVERSARY.to_string(), t)));
    reply
}

pub const REPLAY_IN_WINDOW_ACCEPTED: &str = "replay-in-window-accepted";
pub const REPLAY_NEXT_WINDOW_REJECTED: &str = "replay-next-window-rejected";
pub const HONEST_EXEMPTION_GRANTED: &str = "honest-exemption-granted";

/// A corrupt database reuses the one-time code from a synthesizer's
/// exemption request in its own request to the authentication backend.
pub fn attack_passcode_replay(config: &WorldConfig, seed: u64) -> (Transcript, ScenarioOutcome) {
    let mut config = config.clone();
    config.extra_databases = config.extra_databases.max(1);
    let world = World::build(config, seed);
    let mut run = Run::new(world, &[]);
    let rogue = database_name(1);
    run.corrupt.insert(rogue.clone());
    run.sim.net.note(ADVERSARY, format!("corrupt {rogue}"));
    let mut out = ScenarioOutcome::new("passcode-replay");
    run.declare_common(&mut out, CommonExpect::default());
    out.declare(REPLAY_IN_WINDOW_ACCEPTED, true);
    out.declare(REPLAY_NEXT_WINDOW_REJECTED, true);
    out.declare(HONEST_EXEMPTION_GRANTED, true);

    let elt = run.world.elt.clone();
    let order = vec![run.world.config.hazards[0].sequence.clone(), run.world.benign[0].clone()];
    run.synth.config.database = rogue.clone();
    let code = run.world.fresh_code(run.sim.net.now());
    let q1 = run.synth.exemption_query(&mut run.sim, &order, &elt, &code);

    let harvested = run
        .sim
        .role::<DatabaseRole>(&rogue)
        .and_then(|d| d.received_codes.last().cloned());
    let replay = |run: &mut Run| -> String {
        let Some((device, code)) = harvested.clone() else {
            return "nothing harvested".into();
        };
        let now = run.sim.net.now();
        run.sim.net.note(ADVERSARY, format!("replaying code of {device} from {rogue}"));
        match adversary_call(run, super::world::AUTH, auth_request(&device, &code, now)) {
            Ok(m) => match parse_auth_response(&m) {
                Ok(AuthDecision::Ok) => "Ok".into(),
                Ok(AuthDecision::Reject) => "Reject".into(),
                Err(_) => parse_error(&m).unwrap_or_else(|| "Malformed".into()),
            },
            Err(e) => e.name().to_string(),
        }
    };
    let first = replay(&mut run);
    let first_step = run.sim.net.next_step();
    run.sim.net.advance_clock(crate::screening::TOTP_STEP_SECS);
    let second = replay(&mut run);
    let second_step = run.sim.net.next_step();

    run.synth.config.database = DATABASE.to_string();
    let code = run.world.fresh_code(run.sim.net.now());
    let q2 = run.synth.exemption_query(&mut run.sim, &order, &elt, &code);
    run.sim.run_until_idle();

    let device_ok = harvested.as_ref().is_some_and(|(d, _)| d == DEVICE);
    out.set(
        REPLAY_IN_WINDOW_ACCEPTED,
        device_ok && first == "Ok",
        format!("backend answered {first} before step {first_step}"),
    );
    out.set(
        REPLAY_NEXT_WINDOW_REJECTED,
        second == "Reject",
        format!("backend answered {second} before step {second_step}"),
    );
    let granted = |q: &Result<crate::screening::QueryResponse, ScreeningError>| {
        matches!(q, Ok(r) if r.overall() == crate::screening::Overall::Grant)
    };
    out.set(
        HONEST_EXEMPTION_GRANTED,
        granted(&q1) && granted(&q2),
        format!("via {rogue}: {}, via {DATABASE}: {}", describe(&q1), describe(&q2)),
    );
    out.headline = match (first.as_str(), second.as_str()) {
        ("Ok", "Reject") => "REPLAY ACCEPTED WITHIN WINDOW, REJECTED AFTER".to_string(),
        (a, b) => format!("REPLAY: within window {a}, next window {b}"),
    };
    run.check_common(&mut out);
    (run.sim.net.transcript().clone(), out)
}

pub const SIGMA_COLLISION: &str = "sigma-collision";
pub const BOTH_TOKENS_AUTHENTICATED: &str = "both-tokens-authenticated";
pub const HONEST_QUERY_RATE_LIMITED: &str = "honest-query-rate-limited";
pub const LEDGER_REPLAY_CONSISTENT: &str = "ledger-replay-consistent";

/// Name of the colliding synthesizer.
pub const COLLIDER: &str = "X";

/// A token issued under a second manufacturer leaf with `S`'s σ (when
/// `forced`) exhausts the budget both tokens then share.
pub fn attack_token_collision_dos(config: &WorldConfig, seed: u64, forced: bool) -> (Transcript, ScenarioOutcome) {
    let world = World::build(config.clone(), seed);
    let mut run = Run::new(world, &[]);
    let mut out = ScenarioOutcome::new(if forced { "token-collision" } else { "token-collision-control" });
    run.declare_common(&mut out, CommonExpect::default());
    out.declare(SIGMA_COLLISION, forced);
    out.declare(BOTH_TOKENS_AUTHENTICATED, true);
    out.declare(HONEST_QUERY_RATE_LIMITED, forced);
    out.declare(LEDGER_REPLAY_CONSISTENT, true);

    let sigma_s = run.world.synth.chain.token.sigma();
    let leaf = run.world.extra_manufacturer_leaf("second manufacturer");
    let creds = run.world.synth_credentials_under(leaf, COLLIDER, forced.then_some(sigma_s));
    let mut x = run.world.synthesizer(COLLIDER, &creds);
    let budget = run.world.config.rate_limit.min(10_000);
    let x_order: Vec<Vec<u8>> = (0..budget).map(|i| format!("ACGTACGTAC{i:06}").into_bytes()).collect();
    let xq = x.basic_query(&mut run.sim, &x_order);
    run.handed_over.extend(x.exports().into_iter().map(|t| (COLLIDER.to_string(), t)));
    let sq = run.synth.basic_query(&mut run.sim, &[run.world.benign[0].clone()]);
    run.sim.run_until_idle();

    let sigma_x = creds.chain.token.sigma();
    out.set(
        SIGMA_COLLISION,
        sigma_x == sigma_s,
        format!("σ_S {} σ_X {}", hex::encode(sigma_s), hex::encode(sigma_x)),
    );
    let first_ks = run.world.keyserver_names()[0].clone();
    let ep = endpoint_of(&run.sim, &first_ks).expect("keyserver");
    let authed = |token: Vec<u8>| {
        ep.auth_log
            .iter()
            .find(|e| matches!(&e.outcome, Ok((_, p)) if p.t_s == token))
            .map(|e| e.step)
    };
    let (as_, ax) = (authed(run.world.synth.chain.token.encode()), authed(creds.chain.token.encode()));
    out.set(
        BOTH_TOKENS_AUTHENTICATED,
        as_.is_some() && ax.is_some(),
        format!("{first_ks} authenticated S at {as_:?}, X at {ax:?}"),
    );
    out.set(
        HONEST_QUERY_RATE_LIMITED,
        matches!(sq, Err(ScreeningError::RateLimited)),
        format!("X's {} sequences: {}; S's query: {}", x_order.len(), describe(&xq), describe(&sq)),
    );
    let mut bad = Vec::new();
    let mut decisions = 0;
    for name in run.sim.role_names() {
        if let Some(ep) = endpoint_of(&run.sim, name) {
            decisions += ep.admissions.len();
            if let Some(i) = replay_admissions(&ep.admissions) {
                bad.push(format!("{name} decision {i}"));
            }
        }
    }
    out.set(
        LEDGER_REPLAY_CONSISTENT,
        bad.is_empty(),
        if bad.is_empty() {
            format!("{decisions} logged decisions match a rescan")
        } else {
            bad.join(", ")
        },
    );
    out.headline = if matches!(sq, Err(ScreeningError::RateLimited)) {
        "HONEST TOKEN RATE-LIMITED BY COLLIDING TOKEN".to_string()
    } else {
        format!("BUDGETS INDEPENDENT: S's query {}", describe(&sq))
    };
    run.check_common(&mut out);
    (run.sim.net.transcript().clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: ScepVariant) -> WorldConfig {
        WorldConfig {
            variant,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn mitm_succeeds_against_scep_only() {
        let (_, out) = attack_mitm_rate_limit(&cfg(ScepVariant::Scep), 5);
        assert!(out.as_expected(), "{}", out.render());
        assert_eq!(out.headline, "ATTACK SUCCEEDED");
        let (_, out) = attack_mitm_rate_limit(&cfg(ScepVariant::ScepPlus), 5);
        assert!(out.as_expected(), "{}", out.render());
        assert_eq!(out.headline, "ATTACK BLOCKED: BadClientSig");
    }

    #[test]
    fn swap_matrix() {
        for (res, bind, head) in [
            (true, false, "VERDICT INVERTED"),
            (true, true, "SWAP DETECTED: BindingMismatch"),
            (false, false, "SWAP REJECTED: AuthenticationFailure"),
            (false, true, "SWAP REJECTED: AuthenticationFailure"),
        ] {
            let c = WorldConfig {
                resumption: res,
                binding: bind,
                ..WorldConfig::default()
            };
            let (_, out) = attack_response_swap(&c, 6);
            assert!(out.as_expected(), "{}", out.render());
            assert_eq!(out.headline, head);
        }
    }

    #[test]
    fn passcode_replay_within_window() {
        let (_, out) = attack_passcode_replay(&WorldConfig::default(), 7);
        assert!(out.as_expected(), "{}", out.render());
    }

    #[test]
    fn collision_merges_budgets() {
        let (_, out) = attack_token_collision_dos(&WorldConfig::default(), 8, true);
        assert!(out.as_expected(), "{}", out.render());
        let (_, out) = attack_token_collision_dos(&WorldConfig::default(), 8, false);
        assert!(out.as_expected(), "{}", out.render());
    }
}
