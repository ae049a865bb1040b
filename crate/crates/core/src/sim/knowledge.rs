//! Adversary knowledge: every observed message plus what corrupt roles
//! hand over, closed under decryption with derivable keys, splitting of
//! sequences and parseable framings, stripping known exponents, and
//! threshold recombination of key shares.
//!
//! Synthesis (hashing, encrypting, signing, exponentiating what is known)
//! is not materialized; [`Knowledge::derive`] decides it on demand for a
//! given target. Every fact carries the step that produced it and every
//! derivation is a checkable [`Proof`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::encoding::{frame, unframe};
use crate::term::{EltBase, KTerm, ScalarName, SymElt};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// Message id of an observed wire message.
    Observed(u64),
    /// Handed over by a corrupt role.
    Initial(String),
    Split { parent: usize, index: usize },
    /// Field of a length-prefixed framing found inside an atom.
    Unframe { parent: usize, index: usize },
    Decrypt { parent: usize, key: Proof },
    Strip { parent: usize, scalar: usize },
    /// `t` evaluations under distinct shares of one secret.
    Combine { parents: Vec<usize> },
    /// `t` distinct shares of one secret.
    Reconstruct { parents: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Fact {
    pub term: KTerm,
    pub step: Step,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExpBase {
    Fact(usize),
    Generator,
    Hashed(Box<Proof>),
}

/// How a target term is built from known facts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Proof {
    Fact(usize),
    Const,
    /// Sequence or hash of derivable parts.
    Compose(Vec<Proof>),
    Enc { key: Box<Proof>, body: Box<Proof> },
    Sig { key: usize, over: Box<Proof> },
    /// Exponentiate `base` by known scalars (fact indices), each with its
    /// coefficient.
    Exp { base: ExpBase, by: Vec<(usize, i64)> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeResult {
    pub label: String,
    pub leaked: bool,
    /// Rendered derivation when leaked.
    pub evidence: Option<String>,
}

pub struct Knowledge {
    facts: Vec<Fact>,
    index: BTreeMap<KTerm, usize>,
    by_base: BTreeMap<EltBase, Vec<usize>>,
    threshold: usize,
    observed: BTreeMap<u64, KTerm>,
    initial: BTreeSet<(String, KTerm)>,
    opened: BTreeSet<usize>,
    sealed: Vec<usize>,
}

fn single_share(e: &SymElt) -> Option<(String, u32)> {
    let shares: Vec<_> = e
        .exps
        .iter()
        .filter_map(|(n, c)| match n {
            ScalarName::Share { secret, index } if *c == 1 => Some((secret.clone(), *index)),
            _ => None,
        })
        .collect();
    match shares.as_slice() {
        [one] => Some(one.clone()),
        _ => None,
    }
}

fn strip_share(e: &SymElt, secret: &str, index: u32) -> SymElt {
    e.pow(
        &ScalarName::Share {
            secret: secret.to_string(),
            index,
        },
        -1,
    )
}

/// Splits `b` if it is exactly a canonical framing of at least one field.
fn parse_frame(b: &[u8]) -> Option<Vec<Vec<u8>>> {
    let fields = unframe(b).ok()?;
    if fields.is_empty() {
        return None;
    }
    let owned: Vec<Vec<u8>> = fields.into_iter().map(<[u8]>::to_vec).collect();
    (frame(&owned) == b).then_some(owned)
}

impl Knowledge {
    pub fn new(threshold: usize) -> Self {
        Knowledge {
            facts: Vec::new(),
            index: BTreeMap::new(),
            by_base: BTreeMap::new(),
            threshold: threshold.max(1),
            observed: BTreeMap::new(),
            initial: BTreeSet::new(),
            opened: BTreeSet::new(),
            sealed: Vec::new(),
        }
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn observe(&mut self, msg: u64, term: KTerm) {
        self.observed.insert(msg, term.clone());
        self.add(term, Step::Observed(msg));
    }

    pub fn give(&mut self, who: &str, term: KTerm) {
        self.initial.insert((who.to_string(), term.clone()));
        self.add(term, Step::Initial(who.to_string()));
    }

    fn add(&mut self, term: KTerm, step: Step) -> bool {
        if self.index.contains_key(&term) {
            return false;
        }
        let i = self.facts.len();
        if let KTerm::Elt(e) = &term {
            self.by_base.entry(e.base.clone()).or_default().push(i);
        }
        self.index.insert(term.clone(), i);
        self.facts.push(Fact { term, step });
        true
    }

    pub fn knows(&self, term: &KTerm) -> Option<usize> {
        self.index.get(term).copied()
    }

    fn scalar_fact(&self, n: &ScalarName) -> Option<usize> {
        self.knows(&KTerm::Scalar(n.clone()))
    }

    fn analyze(&mut self, i: usize) {
        let term = self.facts[i].term.clone();
        match term {
            KTerm::Seq(parts) => {
                for (index, p) in parts.into_iter().enumerate() {
                    self.add(p, Step::Split { parent: i, index });
                }
            }
            KTerm::Atom(b) => {
                if let Some(fields) = parse_frame(&b) {
                    for (index, f) in fields.into_iter().enumerate() {
                        self.add(KTerm::Atom(f), Step::Unframe { parent: i, index });
                    }
                }
            }
            KTerm::Enc { .. } => self.sealed.push(i),
            KTerm::Elt(e) => {
                for n in e.exps.keys() {
                    if let Some(s) = self.scalar_fact(n) {
                        let c = e.exps[n];
                        self.add(KTerm::Elt(e.pow(n, -c)), Step::Strip { parent: i, scalar: s });
                    }
                }
            }
            KTerm::Scalar(n) => {
                let holders: Vec<usize> = self
                    .facts
                    .iter()
                    .enumerate()
                    .filter(|(_, f)| matches!(&f.term, KTerm::Elt(e) if e.exps.contains_key(&n)))
                    .map(|(j, _)| j)
                    .collect();
                for j in holders {
                    let KTerm::Elt(e) = self.facts[j].term.clone() else { unreachable!() };
                    let c = e.exps[&n];
                    self.add(KTerm::Elt(e.pow(&n, -c)), Step::Strip { parent: j, scalar: i });
                }
            }
            _ => {}
        }
    }

    /// Share reconstruction and evaluation recombination. Returns whether
    /// anything new was learned.
    fn combine_pass(&mut self) -> bool {
        let t = self.threshold;
        let mut scalar_groups: BTreeMap<String, BTreeMap<u32, usize>> = BTreeMap::new();
        let mut elt_groups: BTreeMap<(String, SymElt), BTreeMap<u32, usize>> = BTreeMap::new();
        for (i, f) in self.facts.iter().enumerate() {
            match &f.term {
                KTerm::Scalar(ScalarName::Share { secret, index }) => {
                    scalar_groups.entry(secret.clone()).or_default().entry(*index).or_insert(i);
                }
                KTerm::Elt(e) => {
                    if let Some((secret, index)) = single_share(e) {
                        let rest = strip_share(e, &secret, index);
                        elt_groups.entry((secret, rest)).or_default().entry(index).or_insert(i);
                    }
                }
                _ => {}
            }
        }
        let mut progress = false;
        for (secret, shares) in scalar_groups {
            if shares.len() >= t {
                let parents = shares.values().take(t).copied().collect();
                progress |= self.add(KTerm::Scalar(ScalarName::Named(secret)), Step::Reconstruct { parents });
            }
        }
        for ((secret, rest), evals) in elt_groups {
            if evals.len() >= t {
                let parents = evals.values().take(t).copied().collect();
                let combined = rest.pow(&ScalarName::Named(secret), 1);
                progress |= self.add(KTerm::Elt(combined), Step::Combine { parents });
            }
        }
        progress
    }

    /// Runs analysis to a fixpoint.
    pub fn close(&mut self) {
        let mut done = 0;
        loop {
            while done < self.facts.len() {
                self.analyze(done);
                done += 1;
            }
            let mut progress = false;
            for i in self.sealed.clone() {
                if self.opened.contains(&i) {
                    continue;
                }
                let KTerm::Enc { key, body } = self.facts[i].term.clone() else { unreachable!() };
                if let Some(p) = self.derive(&key) {
                    self.opened.insert(i);
                    self.add(*body, Step::Decrypt { parent: i, key: p });
                    progress = true;
                }
            }
            progress |= self.combine_pass();
            if !progress && done == self.facts.len() {
                return;
            }
        }
    }

    fn derive_exp(&self, base: ExpBase, from: &SymElt, target: &SymElt) -> Option<Proof> {
        let names: BTreeSet<&ScalarName> = from.exps.keys().chain(target.exps.keys()).collect();
        let mut by = Vec::new();
        for n in names {
            let delta = target.exps.get(n).copied().unwrap_or(0) - from.exps.get(n).copied().unwrap_or(0);
            if delta != 0 {
                by.push((self.scalar_fact(n)?, delta));
            }
        }
        Some(Proof::Exp { base, by })
    }

    fn derive_elt(&self, e: &SymElt) -> Option<Proof> {
        for &i in self.by_base.get(&e.base).into_iter().flatten() {
            let KTerm::Elt(f) = &self.facts[i].term else { continue };
            if let Some(p) = self.derive_exp(ExpBase::Fact(i), f, e) {
                return Some(p);
            }
        }
        let bare = SymElt::from_base(e.base.clone());
        match &e.base {
            EltBase::Generator => self.derive_exp(ExpBase::Generator, &bare, e),
            EltBase::Hashed(m) => {
                let pm = self.derive(&KTerm::Atom(m.clone()))?;
                self.derive_exp(ExpBase::Hashed(Box::new(pm)), &bare, e)
            }
            EltBase::Opaque(_) => None,
        }
    }

    /// A proof that `target` can be built from what is known.
    pub fn derive(&self, target: &KTerm) -> Option<Proof> {
        if let Some(i) = self.knows(target) {
            return Some(Proof::Fact(i));
        }
        match target {
            KTerm::Const(_) => Some(Proof::Const),
            KTerm::Seq(parts) | KTerm::Hash(parts) => {
                parts.iter().map(|p| self.derive(p)).collect::<Option<Vec<_>>>().map(Proof::Compose)
            }
            KTerm::Enc { key, body } => Some(Proof::Enc {
                key: Box::new(self.derive(key)?),
                body: Box::new(self.derive(body)?),
            }),
            KTerm::Sig { signer, over } => Some(Proof::Sig {
                key: self.knows(&KTerm::SigningKey(signer.clone()))?,
                over: Box::new(self.derive(over)?),
            }),
            KTerm::Elt(e) => self.derive_elt(e),
            KTerm::Atom(_) | KTerm::Scalar(_) | KTerm::SigningKey(_) => None,
        }
    }

    /// Replays the step that produced fact `i`, and transitively its
    /// inputs, against the recorded observations and hand-overs.
    pub fn check_fact(&self, i: usize) -> bool {
        let mut seen = BTreeSet::new();
        self.check_fact_memo(i, &mut seen)
    }

    fn check_fact_memo(&self, i: usize, seen: &mut BTreeSet<usize>) -> bool {
        if seen.contains(&i) {
            return true;
        }
        let Some(f) = self.facts.get(i) else { return false };
        let ok = match &f.step {
            Step::Observed(id) => self.observed.get(id) == Some(&f.term),
            Step::Initial(who) => self.initial.contains(&(who.clone(), f.term.clone())),
            Step::Split { parent, index } => {
                *parent < i
                    && matches!(&self.facts[*parent].term, KTerm::Seq(ps) if ps.get(*index) == Some(&f.term))
                    && self.check_fact_memo(*parent, seen)
            }
            Step::Unframe { parent, index } => {
                *parent < i
                    && matches!(&self.facts[*parent].term, KTerm::Atom(b)
                        if parse_frame(b).and_then(|fs| fs.get(*index).cloned()).map(KTerm::Atom).as_ref() == Some(&f.term))
                    && self.check_fact_memo(*parent, seen)
            }
            Step::Decrypt { parent, key } => match &self.facts[*parent].term {
                KTerm::Enc { key: k, body } => {
                    **body == f.term && self.check_proof_memo(key, k, seen) && self.check_fact_memo(*parent, seen)
                }
                _ => false,
            },
            Step::Strip { parent, scalar } => match (&self.facts[*parent].term, &self.facts[*scalar].term) {
                (KTerm::Elt(e), KTerm::Scalar(n)) if e.exps.contains_key(n) => {
                    KTerm::Elt(e.pow(n, -e.exps[n])) == f.term
                        && self.check_fact_memo(*parent, seen)
                        && self.check_fact_memo(*scalar, seen)
                }
                _ => false,
            },
            Step::Combine { parents } => self.check_combine(parents, &f.term) && parents.iter().all(|p| self.check_fact_memo(*p, seen)),
            Step::Reconstruct { parents } => {
                let mut idx = BTreeSet::new();
                let mut secret_seen = None;
                let shape = parents.iter().all(|p| match &self.facts[*p].term {
                    KTerm::Scalar(ScalarName::Share { secret, index }) => {
                        idx.insert(*index);
                        secret_seen.get_or_insert_with(|| secret.clone()) == secret
                    }
                    _ => false,
                });
                shape
                    && idx.len() >= self.threshold
                    && secret_seen.map(|s| KTerm::Scalar(ScalarName::Named(s))) == Some(f.term.clone())
                    && parents.iter().all(|p| self.check_fact_memo(*p, seen))
            }
        };
        if ok {
            seen.insert(i);
        }
        ok
    }

    fn check_combine(&self, parents: &[usize], term: &KTerm) -> bool {
        let mut idx = BTreeSet::new();
        let mut common: Option<(String, SymElt)> = None;
        for p in parents {
            let KTerm::Elt(e) = &self.facts[*p].term else { return false };
            let Some((secret, index)) = single_share(e) else { return false };
            let rest = strip_share(e, &secret, index);
            match &common {
                None => common = Some((secret, rest)),
                Some(c) if *c != (secret, rest) => return false,
                _ => {}
            }
            idx.insert(index);
        }
        match common {
            Some((secret, rest)) => {
                idx.len() >= self.threshold && KTerm::Elt(rest.pow(&ScalarName::Named(secret), 1)) == *term
            }
            None => false,
        }
    }

    /// Checks that `proof` builds exactly `target`.
    pub fn check_proof(&self, proof: &Proof, target: &KTerm) -> bool {
        self.check_proof_memo(proof, target, &mut BTreeSet::new())
    }

    fn check_proof_memo(&self, proof: &Proof, target: &KTerm, seen: &mut BTreeSet<usize>) -> bool {
        match (proof, target) {
            (Proof::Fact(i), t) => self.facts.get(*i).is_some_and(|f| f.term == *t) && self.check_fact_memo(*i, seen),
            (Proof::Const, KTerm::Const(_)) => true,
            (Proof::Compose(ps), KTerm::Seq(parts) | KTerm::Hash(parts)) => {
                ps.len() == parts.len() && ps.iter().zip(parts).all(|(p, t)| self.check_proof_memo(p, t, seen))
            }
            (Proof::Enc { key, body }, KTerm::Enc { key: k, body: b }) => {
                self.check_proof_memo(key, k, seen) && self.check_proof_memo(body, b, seen)
            }
            (Proof::Sig { key, over }, KTerm::Sig { signer, over: o }) => {
                self.facts.get(*key).is_some_and(|f| f.term == KTerm::SigningKey(signer.clone()))
                    && self.check_fact_memo(*key, seen)
                    && self.check_proof_memo(over, o, seen)
            }
            (Proof::Exp { base, by }, KTerm::Elt(target)) => {
                let start = match base {
                    ExpBase::Fact(i) => match self.facts.get(*i).map(|f| &f.term) {
                        Some(KTerm::Elt(e)) if self.check_fact_memo(*i, seen) => e.clone(),
                        _ => return false,
                    },
                    ExpBase::Generator => SymElt::generator(),
                    ExpBase::Hashed(p) => match &target.base {
                        EltBase::Hashed(m) if self.check_proof_memo(p, &KTerm::Atom(m.clone()), seen) => {
                            SymElt::hashed(m)
                        }
                        _ => return false,
                    },
                };
                let mut cur = start;
                for (s, c) in by {
                    match self.facts.get(*s).map(|f| &f.term) {
                        Some(KTerm::Scalar(n)) if self.check_fact_memo(*s, seen) => cur = cur.pow(n, *c),
                        _ => return false,
                    }
                }
                cur == *target
            }
            _ => false,
        }
    }

    /// Human-readable derivation of `target`.
    pub fn explain(&self, proof: &Proof) -> String {
        let mut out = String::new();
        self.render(proof, 0, &mut out);
        out
    }

    fn render(&self, proof: &Proof, depth: usize, out: &mut String) {
        let pad = "  ".repeat(depth);
        match proof {
            Proof::Fact(i) => self.render_fact(*i, depth, out, &mut BTreeSet::new()),
            Proof::Const => out.push_str(&format!("{pad}public constant\n")),
            Proof::Compose(ps) => {
                out.push_str(&format!("{pad}compose\n"));
                ps.iter().for_each(|p| self.render(p, depth + 1, out));
            }
            Proof::Enc { key, body } => {
                out.push_str(&format!("{pad}encrypt\n"));
                self.render(key, depth + 1, out);
                self.render(body, depth + 1, out);
            }
            Proof::Sig { key, over } => {
                out.push_str(&format!("{pad}sign with fact {key}\n"));
                self.render(over, depth + 1, out);
            }
            Proof::Exp { base, by } => {
                out.push_str(&format!("{pad}exponentiate by facts {by:?}\n"));
                match base {
                    ExpBase::Fact(i) => self.render_fact(*i, depth + 1, out, &mut BTreeSet::new()),
                    ExpBase::Generator => out.push_str(&format!("{pad}  generator\n")),
                    ExpBase::Hashed(p) => self.render(p, depth + 1, out),
                }
            }
        }
    }

    fn render_fact(&self, i: usize, depth: usize, out: &mut String, seen: &mut BTreeSet<usize>) {
        let pad = "  ".repeat(depth);
        let f = &self.facts[i];
        let what = format!("{:?}", f.term);
        let what: String = what.chars().take(100).collect();
        if !seen.insert(i) {
            out.push_str(&format!("{pad}#{i} (above)\n"));
            return;
        }
        let (how, parents): (String, Vec<usize>) = match &f.step {
            Step::Observed(m) => (format!("observed message {m}"), vec![]),
            Step::Initial(w) => (format!("from corrupt {w}"), vec![]),
            Step::Split { parent, index } => (format!("field {index} of"), vec![*parent]),
            Step::Unframe { parent, index } => (format!("framed field {index} of"), vec![*parent]),
            Step::Decrypt { parent, .. } => ("decrypt".into(), vec![*parent]),
            Step::Strip { parent, scalar } => ("strip exponent".into(), vec![*parent, *scalar]),
            Step::Combine { parents } => ("combine evaluations".into(), parents.clone()),
            Step::Reconstruct { parents } => ("reconstruct scalar".into(), parents.clone()),
        };
        out.push_str(&format!("{pad}#{i} {what} <- {how}\n"));
        for p in parents {
            self.render_fact(p, depth + 1, out, seen);
        }
    }

    /// Leak verdict for each labelled secret.
    pub fn probe(&self, secrets: &[(String, KTerm)]) -> Vec<ProbeResult> {
        secrets
            .iter()
            .map(|(label, t)| {
                // A leak is only reported with a derivation that replays.
                let proof = self.derive(t).filter(|p| self.check_proof(p, t));
                ProbeResult {
                    label: label.clone(),
                    leaked: proof.is_some(),
                    evidence: proof.map(|p| self.explain(&p)),
                }
            })
            .collect()
    }
}

impl fmt::Debug for Knowledge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Knowledge({} facts)", self.facts.len())
    }
}
