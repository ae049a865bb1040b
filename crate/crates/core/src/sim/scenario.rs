//! Scenario execution and the assertions every run is judged by.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::scep::ScepVariant;
use crate::screening::{oracle_verdicts, Overall, QueryResponse, ScreeningError};
use crate::term::{KTerm, SymElt};

use super::knowledge::Knowledge;
use super::net::{Role, Sim, Tap, Transcript};
use super::roles::{Admission, DatabaseRole, KeyserverRole, ScepEndpoint};
use super::script::{parse_script, Code, Command, Expect, Item, ScriptError, ScriptLine};
use super::synth::{QueryKind, Synthesizer};
use super::world::{World, WorldConfig, SYNTH};

/// Name under which adversary-originated connections appear.
pub const ADVERSARY: &str = "ADV";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assertion {
    pub id: String,
    /// Whether the property is expected to hold in this configuration.
    pub expected: bool,
    /// `None` until evaluated.
    pub pass: Option<bool>,
    /// Transcript steps and observations backing the verdict.
    pub evidence: String,
}

impl Assertion {
    pub fn as_expected(&self) -> bool {
        self.pass == Some(self.expected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioOutcome {
    pub name: String,
    pub headline: String,
    pub assertions: Vec<Assertion>,
    /// Rendered query results, in order.
    pub report: Vec<String>,
}

impl ScenarioOutcome {
    pub fn new(name: &str) -> Self {
        ScenarioOutcome {
            name: name.to_string(),
            headline: String::new(),
            assertions: Vec::new(),
            report: Vec::new(),
        }
    }

    pub fn declare(&mut self, id: &str, expected: bool) {
        assert!(self.get(id).is_none(), "assertion `{id}` declared twice");
        self.assertions.push(Assertion {
            id: id.to_string(),
            expected,
            pass: None,
            evidence: String::new(),
        });
    }

    /// Records the verdict of a declared assertion.
    pub fn set(&mut self, id: &str, pass: bool, evidence: impl Into<String>) {
        let a = self
            .assertions
            .iter_mut()
            .find(|a| a.id == id)
            .unwrap_or_else(|| panic!("assertion `{id}` was not declared"));
        a.pass = Some(pass);
        a.evidence = evidence.into();
    }

    pub fn get(&self, id: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.id == id)
    }

    /// Whether `id` was evaluated and held.
    pub fn held(&self, id: &str) -> bool {
        self.get(id).and_then(|a| a.pass) == Some(true)
    }

    pub fn as_expected(&self) -> bool {
        self.assertions.iter().all(Assertion::as_expected)
    }

    /// Final machine-readable verdict.
    pub fn token(&self) -> &'static str {
        if self.as_expected() {
            "expected"
        } else {
            "unexpected"
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("scenario {}\n", self.name);
        for a in &self.assertions {
            let got = match a.pass {
                Some(true) => "holds",
                Some(false) => "fails",
                None => "unevaluated",
            };
            let want = if a.expected { "holds" } else { "fails" };
            let mark = if a.as_expected() { "ok" } else { "MISMATCH" };
            let _ = writeln!(out, "  {mark:<8} {:<32} {got:<11} (expected {want}) {}", a.id, a.evidence);
        }
        if !self.headline.is_empty() {
            let _ = writeln!(out, "{}", self.headline);
        }
        out
    }
}

/// Expectations for the properties checked in every scenario.
#[derive(Debug, Clone, Copy)]
pub struct CommonExpect {
    pub oracle: bool,
    pub agreement: bool,
    pub cookie_secrecy: bool,
}

impl Default for CommonExpect {
    fn default() -> Self {
        CommonExpect {
            oracle: true,
            agreement: true,
            cookie_secrecy: true,
        }
    }
}

pub const QUERIES_MATCH_ORACLE: &str = "queries-match-oracle";
pub const AGREEMENT: &str = "agreement";
pub const COOKIE_SECRECY: &str = "cookie-secrecy";
pub const ORDER_SECRECY: &str = "order-secrecy";
pub const HDB_AT_REST: &str = "hdb-at-rest";

/// The server endpoint of a keyserver or database role.
pub fn endpoint_of<'a>(sim: &'a Sim, name: &str) -> Option<&'a ScepEndpoint> {
    sim.role::<KeyserverRole>(name)
        .map(|k| &k.ep)
        .or_else(|| sim.role::<DatabaseRole>(name).map(|d| &d.ep))
}

/// Rescans a decision log: each decision must equal the one implied by the
/// allowed entries for the same σ in the 24 hours before it. Returns the
/// index of the first disagreement.
pub fn replay_admissions(log: &[Admission]) -> Option<usize> {
    const DAY: u64 = 24 * 60 * 60;
    (0..log.len()).find(|&i| {
        let d = &log[i];
        let used: u128 = log[..i]
            .iter()
            .filter(|e| e.allowed && e.sigma == d.sigma && e.at + DAY > d.at)
            .map(|e| e.count as u128)
            .sum();
        (used + d.count as u128 <= d.limit as u128) != d.allowed
    })
}

/// A world, its network and the honest synthesizer `S`.
pub struct Run {
    pub world: World,
    pub sim: Sim,
    pub synth: Synthesizer,
    /// Registered roles under adversary control.
    pub corrupt: BTreeSet<String>,
    /// Further material the adversary holds (its own drivers' keys).
    pub handed_over: Vec<(String, KTerm)>,
}

impl Run {
    /// `skip` names server roles the caller registers itself.
    pub fn new(mut world: World, skip: &[&str]) -> Self {
        let sim = world.sim(skip);
        let synth = world.synthesizer(SYNTH, &world.synth.clone());
        Run {
            world,
            sim,
            synth,
            corrupt: BTreeSet::new(),
            handed_over: Vec::new(),
        }
    }

    pub fn synth_corrupt(&self) -> bool {
        self.corrupt.contains(SYNTH)
    }

    /// Everything the adversary saw or was handed, closed.
    pub fn knowledge(&self) -> Knowledge {
        let mut k = Knowledge::new(self.world.config.threshold);
        for env in self.sim.net.sent() {
            k.observe(env.id, env.term.knowledge());
        }
        for name in &self.corrupt {
            let exports = if name == SYNTH {
                self.synth.exports()
            } else {
                self.sim.role_dyn(name).map(|r| r.exports()).unwrap_or_default()
            };
            for t in exports {
                k.give(name, t);
            }
        }
        for (who, t) in &self.handed_over {
            k.give(who, t.clone());
        }
        k.close();
        k
    }

    fn honest_servers(&self) -> Vec<(String, &ScepEndpoint)> {
        self.sim
            .role_names()
            .filter(|n| !self.corrupt.contains(*n))
            .filter_map(|n| endpoint_of(&self.sim, n).map(|ep| (n.clone(), ep)))
            .collect()
    }

    pub fn declare_common(&self, out: &mut ScenarioOutcome, e: CommonExpect) {
        out.declare(QUERIES_MATCH_ORACLE, e.oracle);
        out.declare(AGREEMENT, e.agreement);
        out.declare(COOKIE_SECRECY, e.cookie_secrecy);
        out.declare(ORDER_SECRECY, true);
        out.declare(HDB_AT_REST, true);
    }

    pub fn oracle_response(&self, order: &[Vec<u8>], exempt: &[Vec<u8>]) -> QueryResponse {
        let w = &self.world;
        oracle_verdicts(&w.group, &w.k, &w.hdb, order, exempt, w.config.suppress_metadata)
    }

    pub fn check_common(&self, out: &mut ScenarioOutcome) {
        self.check_oracle(out);
        self.check_agreement(out);
        let k = self.knowledge();
        self.check_cookies(out, &k);
        self.check_orders(out, &k);
        self.check_at_rest(out);
    }

    fn check_oracle(&self, out: &mut ScenarioOutcome) {
        let mut bad = Vec::new();
        let mut checked = 0;
        for q in &self.synth.queries {
            if let Ok(resp) = &q.result {
                checked += 1;
                if *resp != self.oracle_response(&q.order, &q.exempt) {
                    bad.push(format!("step {}", q.step));
                }
            }
        }
        let ev = if bad.is_empty() {
            format!("{checked} answered queries agree with direct keyed lookup")
        } else {
            format!("verdicts differ from direct keyed lookup at {}", bad.join(", "))
        };
        out.set(QUERIES_MATCH_ORACLE, bad.is_empty(), ev);
    }

    /// Every honest server that authenticated `S`'s token did so in a run
    /// `S` took part in with that server, on the same parameters, and no
    /// client run accounts for two server runs.
    fn check_agreement(&self, out: &mut ScenarioOutcome) {
        let s_token = self.synth.chain.token.encode();
        let mut used = BTreeSet::new();
        let mut bad = Vec::new();
        let mut checked = 0;
        for (name, ep) in self.honest_servers() {
            for ev in &ep.auth_log {
                let Ok((_, params)) = &ev.outcome else { continue };
                if params.t_s != s_token {
                    continue;
                }
                checked += 1;
                let m = self
                    .synth
                    .runs
                    .iter()
                    .position(|r| r.server == name && r.params == *params);
                match m {
                    Some(i) if used.insert(i) => {}
                    Some(_) => bad.push(format!("{name} step {}: client run matched twice", ev.step)),
                    None => bad.push(format!("{name} step {} authenticated S via peer {} with no matching S run", ev.step, ev.peer)),
                }
            }
        }
        let ev = if bad.is_empty() {
            format!("{checked} server runs for S's token each match one S run")
        } else {
            bad.join("; ")
        };
        out.set(AGREEMENT, bad.is_empty(), ev);
    }

    fn cookie_secrets(&self) -> Vec<(String, KTerm)> {
        if self.synth_corrupt() {
            return Vec::new();
        }
        let s_token = self.synth.chain.token.encode();
        let mut out = BTreeSet::new();
        for (name, ep) in self.honest_servers() {
            for ev in &ep.auth_log {
                if let Ok((_, p)) = &ev.outcome {
                    if p.t_s == s_token {
                        out.insert((format!("cookie {name} step {}", ev.step), KTerm::Atom(p.omega.to_vec())));
                    }
                }
            }
        }
        for r in &self.synth.runs {
            if !self.corrupt.contains(&r.server) {
                out.insert((format!("cookie of S run with {} conn {}", r.server, r.conn), KTerm::Atom(r.params.omega.to_vec())));
            }
        }
        out.into_iter().collect()
    }

    fn order_secrets(&self) -> Vec<(String, KTerm)> {
        if self.synth_corrupt() {
            return Vec::new();
        }
        let mut revealed = BTreeSet::new();
        let mut seqs = BTreeSet::new();
        for q in &self.synth.queries {
            seqs.extend(q.order.iter().cloned());
            seqs.extend(q.exempt.iter().cloned());
            if q.kind == QueryKind::Exemption && self.corrupt.contains(&q.database) {
                revealed.extend(q.exempt.iter().cloned());
            }
        }
        seqs.difference(&revealed)
            .flat_map(|s| {
                let label = String::from_utf8_lossy(s).into_owned();
                [
                    (format!("M({label})"), KTerm::Elt(SymElt::hashed(s))),
                    (format!("sequence {label}"), KTerm::Atom(s.clone())),
                ]
            })
            .collect()
    }

    fn probe(out: &mut ScenarioOutcome, id: &str, k: &Knowledge, secrets: &[(String, KTerm)]) {
        let leaks: Vec<_> = k.probe(secrets).into_iter().filter(|p| p.leaked).collect();
        let ev = match leaks.first() {
            None => format!("{} secrets underivable from {} adversary facts", secrets.len(), k.len()),
            Some(p) => format!(
                "{} of {} derivable; first: {}\n{}",
                leaks.len(),
                secrets.len(),
                p.label,
                p.evidence.as_deref().unwrap_or("")
            ),
        };
        out.set(id, leaks.is_empty(), ev);
    }

    fn check_cookies(&self, out: &mut ScenarioOutcome, k: &Knowledge) {
        Self::probe(out, COOKIE_SECRECY, k, &self.cookie_secrets());
    }

    fn check_orders(&self, out: &mut ScenarioOutcome, k: &Knowledge) {
        Self::probe(out, ORDER_SECRECY, k, &self.order_secrets());
    }

    /// No database state contains a hazard in the clear.
    fn check_at_rest(&self, out: &mut ScenarioOutcome) {
        let mut bad = Vec::new();
        let mut scanned = 0;
        for name in self.sim.role_names() {
            let Some(db) = self.sim.role::<DatabaseRole>(name) else { continue };
            let state = db.state_bytes();
            scanned += state.len();
            for h in &self.world.config.hazards {
                if !h.sequence.is_empty() && state.windows(h.sequence.len()).any(|w| w == h.sequence.as_slice()) {
                    bad.push(format!("{name} holds {}", h.name));
                }
            }
        }
        let ev = if bad.is_empty() {
            format!("{scanned} bytes of database state scanned")
        } else {
            bad.join(", ")
        };
        out.set(HDB_AT_REST, bad.is_empty(), ev);
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub world: WorldConfig,
}

fn check_roles(world: &World, lines: &[ScriptLine]) -> Result<(), ScriptError> {
    let declared = world.role_names();
    for l in lines {
        let allowed_adv = matches!(l.command, Command::Inject { .. });
        for r in l.roles() {
            if !declared.iter().any(|d| d == r) && !(allowed_adv && r == ADVERSARY) {
                return Err(ScriptError::UndeclaredRole {
                    line: l.line,
                    role: r.to_string(),
                });
            }
        }
        if let Command::Query { items, .. } = &l.command {
            for it in items {
                let (what, i, n) = match it {
                    Item::Hazard(i) => ("hazard", *i, world.config.hazards.len()),
                    Item::Benign(i) => ("benign", *i, world.benign.len()),
                    Item::Bytes(_) => continue,
                };
                if i >= n {
                    return Err(ScriptError::BadReference {
                        line: l.line,
                        message: format!("{what}:{i} out of range ({n} available)"),
                    });
                }
            }
        }
    }
    Ok(())
}

fn resolve(world: &World, items: &[Item]) -> Vec<Vec<u8>> {
    items
        .iter()
        .map(|it| match it {
            Item::Hazard(i) => world.config.hazards[*i].sequence.clone(),
            Item::Benign(i) => world.benign[*i].clone(),
            Item::Bytes(b) => b.clone(),
        })
        .collect()
}

fn meets(result: &Result<QueryResponse, ScreeningError>, e: &Expect) -> bool {
    match (result, e) {
        (Ok(r), Expect::Grant) => r.overall() == Overall::Grant,
        (Ok(r), Expect::Deny) => r.overall() == Overall::Deny,
        (Err(ScreeningError::Remote(n)), Expect::Error(want)) => n == want,
        (Err(err), Expect::Error(want)) => err.name() == want,
        _ => false,
    }
}

fn describe(result: &Result<QueryResponse, ScreeningError>) -> String {
    match result {
        Ok(r) => r.overall().to_string(),
        Err(ScreeningError::Remote(n)) => n.clone(),
        Err(e) => e.name().to_string(),
    }
}

/// Runs `script` against a fresh world built from `seed`.
pub fn run_scenario(config: &ScenarioConfig, script: &str, seed: u64) -> Result<(Transcript, ScenarioOutcome), ScriptError> {
    let lines = parse_script(script)?;
    let world = World::build(config.world.clone(), seed);
    check_roles(&world, &lines)?;
    let mut run = Run::new(world, &[]);
    let mut out = ScenarioOutcome::new(&config.name);
    run.declare_common(&mut out, CommonExpect::default());
    let mut expectations = Vec::new();
    for l in &lines {
        if let Command::Query { expect: Some(e), .. } = &l.command {
            let id = format!("line-{}-expect", l.line);
            out.declare(&id, true);
            expectations.push((id, e.clone()));
        }
    }

    let mut results = Vec::new();
    for l in &lines {
        match &l.command {
            Command::Corrupt(r) => {
                run.corrupt.insert(r.clone());
                run.sim.net.note(ADVERSARY, format!("corrupt {r}"));
            }
            Command::AdvanceClock(s) => run.sim.net.advance_clock(*s),
            Command::Drop(id) => run.sim.net.add_tap(Tap::Drop(*id)),
            Command::Deliver(id) => run.sim.net.add_tap(Tap::Deliver(*id)),
            Command::Swap(a, b) => {
                run.sim.net.add_tap(Tap::Substitute(*a, *b));
                run.sim.net.add_tap(Tap::Substitute(*b, *a));
            }
            Command::Modify(id, bytes) => run.sim.net.add_tap(Tap::Modify(*id, bytes.clone())),
            Command::Inject { conn, from, to, wire } => {
                run.sim.net.inject(*conn, from, to, wire.clone());
            }
            Command::Query { kind, items, code, .. } => {
                let order = resolve(&run.world, items);
                let result = match kind {
                    QueryKind::Basic => run.synth.basic_query(&mut run.sim, &order),
                    QueryKind::Exemption => {
                        let now = run.sim.net.now();
                        let code = match code.as_ref().unwrap_or(&Code::Fresh) {
                            Code::Fresh => run.world.fresh_code(now),
                            Code::Stale => run.world.fresh_code(now.saturating_sub(crate::screening::TOTP_STEP_SECS)),
                            Code::Literal(c) => c.clone(),
                        };
                        let elt = run.world.elt.clone();
                        run.synth.exemption_query(&mut run.sim, &order, &elt, &code)
                    }
                };
                results.push((l.line, result));
            }
        }
    }
    run.sim.run_until_idle();

    for (line, result) in &results {
        out.report.push(match result {
            Ok(r) => format!("line {line}:\n{}", r.render()),
            Err(e) => format!("line {line}:\nERROR {} ({e})", describe(result)),
        });
        if let Some((id, e)) = expectations.iter().find(|(id, _)| *id == format!("line-{line}-expect")) {
            out.set(id, meets(result, e), format!("got {} (wanted {e:?})", describe(result)));
        }
    }
    run.check_common(&mut out);
    out.headline = format!(
        "queries: {}",
        if results.is_empty() {
            "none".to_string()
        } else {
            results.iter().map(|(_, r)| describe(r)).collect::<Vec<_>>().join(", ")
        }
    );
    Ok((run.sim.net.transcript().clone(), out))
}

/// Scenarios shipped with the simulator, each with its script.
pub fn shipped_scenarios() -> Vec<(ScenarioConfig, &'static str)> {
    let with = |name: &str, variant: ScepVariant| ScenarioConfig {
        name: name.to_string(),
        world: WorldConfig {
            variant,
            ..WorldConfig::default()
        },
    };
    const BASIC: &str = "query basic hazard:0 benign:0 expect=deny\nquery basic benign:1 benign:2 expect=grant\n";
    const EXEMPTION: &str = "query exemption hazard:0 benign:0 code=fresh expect=grant\n\
                             query exemption hazard:0 code=stale expect=AuthBackendRejected\n\
                             query exemption hazard:0 hazard:1 expect=deny\n";
    const CORRUPT_KS: &str = "corrupt K1\nquery basic hazard:0 benign:0 expect=deny\nquery basic benign:3 expect=grant\n";
    const WINDOW: &str = "query basic 100*benign:0 expect=grant\n\
                          query basic benign:1 expect=RateLimited\n\
                          advance-clock 90000\n\
                          query basic benign:1 expect=grant\n";
    vec![
        (with("honest-basic-scep", ScepVariant::Scep), BASIC),
        (with("honest-basic-scep-plus", ScepVariant::ScepPlus), BASIC),
        (with("honest-exemption-scep", ScepVariant::Scep), EXEMPTION),
        (with("honest-exemption-scep-plus", ScepVariant::ScepPlus), EXEMPTION),
        (with("corrupt-keyserver-scep", ScepVariant::Scep), CORRUPT_KS),
        (with("corrupt-keyserver-scep-plus", ScepVariant::ScepPlus), CORRUPT_KS),
        (with("rate-limit-window", ScepVariant::ScepPlus), WINDOW),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn honest() -> ScenarioConfig {
        ScenarioConfig {
            name: "t".into(),
            world: WorldConfig::default(),
        }
    }

    #[test]
    fn honest_basic_query_meets_every_assertion() {
        let (t, out) = run_scenario(&honest(), "query basic hazard:0 benign:0 expect=deny", 1).unwrap();
        assert!(out.as_expected(), "{}", out.render());
        assert!(!t.is_empty());
    }

    #[test]
    fn same_seed_same_transcript() {
        let a = run_scenario(&honest(), "query basic hazard:1 benign:2", 9).unwrap().0;
        let b = run_scenario(&honest(), "query basic hazard:1 benign:2", 9).unwrap().0;
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let c = run_scenario(&honest(), "query basic hazard:1 benign:2", 10).unwrap().0;
        assert_ne!(a.to_jsonl(), c.to_jsonl());
    }

    #[test]
    fn undeclared_roles_are_script_errors() {
        let e = run_scenario(&honest(), "corrupt K9", 0).unwrap_err();
        assert_eq!(e, ScriptError::UndeclaredRole { line: 1, role: "K9".into() });
        let e = run_scenario(&honest(), "query basic hazard:0\ninject 0 S Z 00", 0).unwrap_err();
        assert!(matches!(e, ScriptError::UndeclaredRole { line: 2, .. }));
        assert!(run_scenario(&honest(), "inject 0 ADV H 00", 0).is_ok());
        assert!(matches!(
            run_scenario(&honest(), "query basic hazard:7", 0).unwrap_err(),
            ScriptError::BadReference { .. }
        ));
    }

    #[test]
    fn unmet_query_expectation_is_reported() {
        let (_, out) = run_scenario(&honest(), "query basic hazard:0 expect=grant", 2).unwrap();
        assert!(!out.as_expected());
        assert_eq!(out.get("line-1-expect").unwrap().pass, Some(false));
    }

    #[test]
    fn dropped_hello_falls_back_to_next_keyserver() {
        let (t, out) = run_scenario(&honest(), "drop 0\nquery basic benign:0 expect=grant", 3).unwrap();
        assert!(out.as_expected(), "{}", out.render());
        assert!(t.records.iter().any(|r| r.event == "drop" && r.msg == Some(0)));
        assert!(t.records.iter().any(|r| r.note.as_deref() == Some("keyserver K1 unavailable: Stalled")));
    }

    #[test]
    fn shipped_scenarios_run_as_expected() {
        for (cfg, script) in shipped_scenarios() {
            let (_, out) = run_scenario(&cfg, script, 4).unwrap();
            assert!(out.as_expected(), "{}", out.render());
        }
    }

    #[test]
    fn every_adversary_fact_replays() {
        let world = World::build(WorldConfig::default(), 11);
        let mut run = Run::new(world, &[]);
        run.corrupt.insert("K1".into());
        run.corrupt.insert("H".into());
        let order = vec![run.world.config.hazards[0].sequence.clone(), run.world.benign[0].clone()];
        run.synth.basic_query(&mut run.sim, &order).unwrap();
        let k = run.knowledge();
        assert!(k.len() > 50);
        assert!((0..k.len()).all(|i| k.check_fact(i)));
        // The database sees keyed hashes, never the hashed inputs.
        let keyed = SymElt::hashed(&order[0]).pow(&crate::term::ScalarName::named("k"), 1);
        assert!(k.derive(&KTerm::Elt(keyed)).is_some());
        assert!(k.derive(&KTerm::Elt(SymElt::hashed(&order[0]))).is_none());
    }

    #[test]
    fn ledger_replay_catches_a_wrong_decision() {
        let sigma = [7u8; 16];
        let rec = |at, count, allowed| Admission {
            sigma,
            count,
            at,
            limit: 10,
            allowed,
        };
        let log = vec![rec(0, 6, true), rec(5, 4, true), rec(6, 1, false), rec(86_400, 5, true)];
        assert_eq!(replay_admissions(&log), None);
        let mut bad = log.clone();
        bad[2].allowed = true;
        assert_eq!(replay_admissions(&bad), Some(2));
    }
}
