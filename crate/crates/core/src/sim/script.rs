//! Line-oriented scenario scripts.
//!
//! ```text
//! # comment
//! corrupt K1
//! advance-clock 90000
//! drop 12
//! deliver 12
//! swap 14 20
//! modify 14 deadbeef
//! inject 3 S H 170303...
//! query basic hazard:0 benign:1 3*text:ACGT expect=deny
//! query exemption hazard:0 code=fresh expect=grant
//! ```
//!
//! Query items are `hazard:N` (the N-th hazard), `benign:N` (the N-th
//! sequence known to miss the database), `hex:..` or `text:..`, each
//! optionally repeated as `N*item`. `expect=` takes `grant`, `deny` or an
//! error name; `code=` takes `fresh`, `stale` or literal digits.

use thiserror::Error;

use super::synth::QueryKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: undeclared role `{role}`")]
    UndeclaredRole { line: usize, role: String },
    #[error("line {line}: {message}")]
    BadReference { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Hazard(usize),
    Benign(usize),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Code {
    Fresh,
    /// Code of the previous window.
    Stale,
    Literal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    Grant,
    Deny,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Corrupt(String),
    AdvanceClock(u64),
    Drop(u64),
    Deliver(u64),
    /// Messages `a` and `b` are delivered with each other's payloads.
    Swap(u64, u64),
    Modify(u64, Vec<u8>),
    Inject {
        conn: u32,
        from: String,
        to: String,
        wire: Vec<u8>,
    },
    Query {
        kind: QueryKind,
        items: Vec<Item>,
        code: Option<Code>,
        expect: Option<Expect>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptLine {
    pub line: usize,
    pub command: Command,
}

impl ScriptLine {
    /// Role names the command refers to.
    pub fn roles(&self) -> Vec<&str> {
        match &self.command {
            Command::Corrupt(r) => vec![r],
            Command::Inject { from, to, .. } => vec![from, to],
            _ => Vec::new(),
        }
    }
}

/// Maximum repetition count of one query item.
const MAX_REPEAT: usize = 10_000;

fn syntax(line: usize, message: impl Into<String>) -> ScriptError {
    ScriptError::Syntax {
        line,
        message: message.into(),
    }
}

fn number<T: std::str::FromStr>(line: usize, what: &str, s: Option<&str>) -> Result<T, ScriptError> {
    let s = s.ok_or_else(|| syntax(line, format!("missing {what}")))?;
    s.parse().map_err(|_| syntax(line, format!("bad {what} `{s}`")))
}

fn hex_arg(line: usize, s: Option<&str>) -> Result<Vec<u8>, ScriptError> {
    let s = s.ok_or_else(|| syntax(line, "missing hex bytes"))?;
    hex::decode(s).map_err(|_| syntax(line, format!("bad hex `{s}`")))
}

fn parse_item(line: usize, tok: &str) -> Result<Vec<Item>, ScriptError> {
    let (count, body) = match tok.split_once('*') {
        Some((n, rest)) => (number::<usize>(line, "repeat count", Some(n))?, rest),
        None => (1, tok),
    };
    if count == 0 || count > MAX_REPEAT {
        return Err(syntax(line, format!("repeat count {count} out of range")));
    }
    let item = match body.split_once(':') {
        Some(("hazard", n)) => Item::Hazard(number(line, "hazard index", Some(n))?),
        Some(("benign", n)) => Item::Benign(number(line, "benign index", Some(n))?),
        Some(("hex", h)) => Item::Bytes(hex_arg(line, Some(h))?),
        Some(("text", t)) => Item::Bytes(t.as_bytes().to_vec()),
        _ => return Err(syntax(line, format!("bad query item `{tok}`"))),
    };
    Ok(vec![item; count])
}

fn parse_query(line: usize, args: &[&str]) -> Result<Command, ScriptError> {
    let kind = match args.first() {
        Some(&"basic") => QueryKind::Basic,
        Some(&"exemption") => QueryKind::Exemption,
        other => return Err(syntax(line, format!("bad query kind {other:?}"))),
    };
    let mut items = Vec::new();
    let mut code = None;
    let mut expect = None;
    for tok in &args[1..] {
        if let Some(v) = tok.strip_prefix("expect=") {
            expect = Some(match v {
                "grant" => Expect::Grant,
                "deny" => Expect::Deny,
                "" => return Err(syntax(line, "empty expectation")),
                e => Expect::Error(e.to_string()),
            });
        } else if let Some(v) = tok.strip_prefix("code=") {
            if kind != QueryKind::Exemption {
                return Err(syntax(line, "code= applies to exemption queries only"));
            }
            code = Some(match v {
                "fresh" => Code::Fresh,
                "stale" => Code::Stale,
                d if !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()) => Code::Literal(d.to_string()),
                _ => return Err(syntax(line, format!("bad code `{v}`"))),
            });
        } else {
            items.extend(parse_item(line, tok)?);
        }
    }
    if items.is_empty() {
        return Err(syntax(line, "query without sequences"));
    }
    if kind == QueryKind::Exemption && code.is_none() {
        code = Some(Code::Fresh);
    }
    Ok(Command::Query {
        kind,
        items,
        code,
        expect,
    })
}

fn parse_line(line: usize, text: &str) -> Result<Option<Command>, ScriptError> {
    let text = text.split('#').next().unwrap_or("").trim();
    let toks: Vec<&str> = text.split_whitespace().collect();
    let Some((&op, args)) = toks.split_first() else {
        return Ok(None);
    };
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(syntax(line, format!("`{op}` takes {n} argument(s), got {}", args.len())))
        }
    };
    let cmd = match op {
        "corrupt" => {
            arity(1)?;
            Command::Corrupt(args[0].to_string())
        }
        "advance-clock" => {
            arity(1)?;
            Command::AdvanceClock(number(line, "seconds", args.first().copied())?)
        }
        "drop" => {
            arity(1)?;
            Command::Drop(number(line, "message id", args.first().copied())?)
        }
        "deliver" => {
            arity(1)?;
            Command::Deliver(number(line, "message id", args.first().copied())?)
        }
        "swap" => {
            arity(2)?;
            Command::Swap(number(line, "message id", Some(args[0]))?, number(line, "message id", Some(args[1]))?)
        }
        "modify" => {
            arity(2)?;
            Command::Modify(number(line, "message id", Some(args[0]))?, hex_arg(line, Some(args[1]))?)
        }
        "inject" => {
            arity(4)?;
            Command::Inject {
                conn: number(line, "connection id", Some(args[0]))?,
                from: args[1].to_string(),
                to: args[2].to_string(),
                wire: hex_arg(line, Some(args[3]))?,
            }
        }
        "query" => parse_query(line, args)?,
        other => return Err(syntax(line, format!("unknown command `{other}`"))),
    };
    Ok(Some(cmd))
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptLine>, ScriptError> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if let Some(command) = parse_line(i + 1, l)? {
            out.push(ScriptLine { line: i + 1, command });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_command() {
        let s = parse_script(
            "# setup\ncorrupt K1\n\nadvance-clock 30\ndrop 1\ndeliver 1\nswap 2 3\nmodify 4 00ff\ninject 0 S H 0a0b\n\
             query basic hazard:0 2*benign:1 text:AC expect=deny\nquery exemption hazard:0 code=123456 expect=AuthBackendRejected\n",
        )
        .unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s[0].line, 2);
        assert_eq!(s[0].command, Command::Corrupt("K1".into()));
        assert_eq!(s[4].command, Command::Swap(2, 3));
        assert_eq!(s[5].command, Command::Modify(4, vec![0, 255]));
        assert_eq!(s[6].roles(), vec!["S", "H"]);
        assert_eq!(
            s[7].command,
            Command::Query {
                kind: QueryKind::Basic,
                items: vec![Item::Hazard(0), Item::Benign(1), Item::Benign(1), Item::Bytes(b"AC".to_vec())],
                code: None,
                expect: Some(Expect::Deny),
            }
        );
        match &s[8].command {
            Command::Query { code, expect, .. } => {
                assert_eq!(code, &Some(Code::Literal("123456".into())));
                assert_eq!(expect, &Some(Expect::Error("AuthBackendRejected".into())));
            }
            c => panic!("{c:?}"),
        }
    }

    #[test]
    fn exemption_defaults_to_fresh_code() {
        let s = parse_script("query exemption hazard:0").unwrap();
        assert!(matches!(&s[0].command, Command::Query { code: Some(Code::Fresh), .. }));
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in [
            "frobnicate",
            "drop",
            "drop x",
            "swap 1",
            "modify 1 zz",
            "inject 0 S H",
            "query",
            "query basic",
            "query weird hazard:0",
            "query basic hazard:x",
            "query basic 0*hazard:0",
            "query basic code=fresh hazard:0",
            "query basic seq:ACGT",
            "advance-clock -5",
        ] {
            let err = parse_script(&format!("corrupt K1\n{bad}")).unwrap_err();
            assert!(matches!(err, ScriptError::Syntax { line: 2, .. }), "{bad}: {err:?}");
        }
    }
}
