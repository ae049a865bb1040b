use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const HAZARDS: &str = "# hex,name,reason\n\
                       4143475454474341414747435454414143474741,toxin-a,select agent toxin\n\
                       5454474143434747544141434754434154544743,toxin-b,select agent toxin\n";
const TOXIN_A: &str = "4143475454474341414747435454414143474741";

fn scepsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scepsim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn last_line(o: &Output) -> String {
    stdout(o).lines().last().unwrap_or("").to_string()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = scepsim(dir, args);
    assert!(o.status.success(), "{args:?}\nstdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    assert_eq!(last_line(&o), "OUTCOME: expected");
    stdout(&o)
}

/// Root, intermediate, leaf and one synthesizer token under `dir`.
fn hierarchy(dir: &Path, cert_type: &str) {
    ok(dir, &["pki", "create-root", "--type", cert_type, "--out", "root"]);
    ok(dir, &["pki", "issue-cert", "--issuer", "root", "--level", "intermediate", "--name", "Int", "--out", "int"]);
    ok(dir, &["pki", "issue-cert", "--issuer", "int", "--level", "leaf", "--name", "Leaf", "--out", "leaf"]);
}

#[test]
fn pki_flow_validates_in_both_encodings() {
    let d = tempfile::tempdir().unwrap();
    hierarchy(d.path(), "manufacturer");
    ok(d.path(), &["pki", "issue-token", "--issuer", "leaf", "--type", "synthesizer", "--name", "S1", "--out", "s1"]);
    for (chain, root) in [("s1.chain", "root.cert"), ("s1.chain.txt", "root.cert.txt")] {
        let out = ok(d.path(), &["pki", "validate-chain", "--chain", chain, "--root", root]);
        assert!(out.starts_with("VALID\n"), "{out}");
    }
}

#[test]
fn flipped_signature_byte_is_bad_signature() {
    let d = tempfile::tempdir().unwrap();
    hierarchy(d.path(), "manufacturer");
    ok(d.path(), &["pki", "issue-token", "--issuer", "leaf", "--type", "synthesizer", "--name", "S1", "--out", "s1"]);
    let text = fs::read_to_string(d.path().join("s1.chain.txt")).unwrap();
    let sig_hex = text.lines().find_map(|l| l.strip_prefix("signature: ")).unwrap();
    let sig = hex::decode(sig_hex).unwrap();
    let mut bytes = fs::read(d.path().join("s1.chain")).unwrap();
    let at = bytes.windows(sig.len()).position(|w| w == sig.as_slice()).unwrap();
    bytes[at + 5] ^= 0x01;
    fs::write(d.path().join("bad.chain"), &bytes).unwrap();

    let o = scepsim(d.path(), &["pki", "validate-chain", "--chain", "bad.chain", "--root", "root.cert"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).lines().next(), Some("BadSignature"));
    assert_eq!(last_line(&o), "OUTCOME: error");
}

#[test]
fn any_64_bit_rate_limit_is_accepted() {
    let d = tempfile::tempdir().unwrap();
    hierarchy(d.path(), "manufacturer");
    let max = u64::MAX.to_string();
    ok(
        d.path(),
        &["pki", "issue-token", "--issuer", "leaf", "--type", "synthesizer", "--name", "S1", "--rate-limit", &max, "--out", "s1"],
    );
    let text = fs::read_to_string(d.path().join("s1.chain.txt")).unwrap();
    assert!(text.contains(&format!("rate_limit: {max}\n")));
    ok(d.path(), &["pki", "validate-chain", "--chain", "s1.chain", "--root", "root.cert"]);
}

#[test]
fn wrong_hierarchy_and_revocation_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    hierarchy(d.path(), "manufacturer");
    ok(d.path(), &["pki", "issue-token", "--issuer", "leaf", "--type", "synthesizer", "--name", "S1", "--out", "s1"]);
    ok(d.path(), &["pki", "create-root", "--type", "infrastructure", "--out", "other"]);
    let o = scepsim(d.path(), &["pki", "validate-chain", "--chain", "s1.chain", "--root", "other.cert"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).lines().next(), Some("UntrustedRoot"));

    ok(d.path(), &["pki", "revoke", "--list", "crl", "--cert", "int.cert"]);
    let o = scepsim(d.path(), &["pki", "validate-chain", "--chain", "s1.chain", "--root", "root.cert", "--revocations", "crl"]);
    assert_eq!(stderr(&o).lines().next(), Some("Revoked"));

    let o = scepsim(d.path(), &["pki", "issue-token", "--issuer", "leaf", "--type", "keyserver", "--name", "K1", "--out", "k1"]);
    assert_eq!(stderr(&o).lines().next(), Some("TypeMismatch"));
}

#[test]
fn subtokens_must_narrow_their_parent() {
    let d = tempfile::tempdir().unwrap();
    hierarchy(d.path(), "exemption");
    ok(
        d.path(),
        &[
            "pki", "issue-token", "--issuer", "leaf", "--type", "exemption", "--name", "Lab",
            "--sequences", "aabb,ccdd", "--with-subtoken-key", "--out", "elt",
        ],
    );
    ok(d.path(), &["pki", "issue-subtoken", "--parent", "elt", "--sequences", "ccdd", "--out", "sub"]);
    ok(d.path(), &["pki", "validate-chain", "--chain", "sub.chain", "--root", "root.cert"]);
    let o = scepsim(d.path(), &["pki", "issue-subtoken", "--parent", "elt", "--sequences", "eeff", "--out", "bad"]);
    assert_eq!(stderr(&o).lines().next(), Some("NotASubset"));
}

fn fixtures(dir: &Path) {
    fs::write(dir.join("hazards.csv"), HAZARDS).unwrap();
    fs::write(dir.join("order.txt"), format!("{TOXIN_A}\n")).unwrap();
    fs::write(dir.join("exempt.txt"), format!("{TOXIN_A}\n")).unwrap();
}

#[test]
fn basic_run_denies_naming_the_hazard() {
    let d = tempfile::tempdir().unwrap();
    fixtures(d.path());
    let out = ok(d.path(), &["run", "basic", "--hazards", "hazards.csv", "--order", "order.txt", "--out", "t.jsonl"]);
    assert!(out.lines().any(|l| l == "DENY toxin-a"), "{out}");
}

#[test]
fn exemption_run_with_fresh_code_grants() {
    let d = tempfile::tempdir().unwrap();
    fixtures(d.path());
    let args = ["run", "exemption", "--hazards", "hazards.csv", "--order", "order.txt", "--exempt", "exempt.txt"];
    let out = ok(d.path(), &[&args[..], &["--out", "t.jsonl"]].concat());
    assert!(out.lines().any(|l| l == "GRANT"), "{out}");
    let out = ok(d.path(), &[&args[..], &["--code", "stale", "--out", "t.jsonl"]].concat());
    assert!(out.contains("ERROR AuthBackendRejected"), "{out}");
}

#[test]
fn equal_seeds_give_identical_transcripts() {
    let d = tempfile::tempdir().unwrap();
    fixtures(d.path());
    let run = |out: &str, seed: &str| {
        ok(d.path(), &["--seed", seed, "run", "basic", "--hazards", "hazards.csv", "--order", "order.txt", "--out", out]);
        fs::read(d.path().join(out)).unwrap()
    };
    let a = run("a.jsonl", "5");
    assert!(!a.is_empty());
    assert_eq!(a, run("b.jsonl", "5"));
    assert_ne!(a, run("c.jsonl", "6"));

    let attack = |out: &str| {
        ok(d.path(), &["--seed", "3", "attack", "swap", "--resumption", "on", "--out", out]);
        fs::read(d.path().join(out)).unwrap()
    };
    assert_eq!(attack("s1.jsonl"), attack("s2.jsonl"));
}

#[test]
fn attack_headlines_follow_the_flags() {
    let d = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 5] = [
        (&["attack", "mitm", "--scep-variant", "scep"], "ATTACK SUCCEEDED"),
        (&["attack", "mitm", "--scep-variant", "scep-plus"], "ATTACK BLOCKED: BadClientSig"),
        (&["attack", "swap", "--resumption", "on", "--bind-responses", "off"], "VERDICT INVERTED"),
        (&["attack", "swap", "--resumption", "on", "--bind-responses", "on"], "SWAP DETECTED: BindingMismatch"),
        (&["attack", "swap", "--resumption", "off"], "SWAP REJECTED: AuthenticationFailure"),
    ];
    for (args, headline) in cases {
        let out = ok(d.path(), &[args, &["--out", "t.jsonl"]].concat());
        assert!(out.lines().any(|l| l == headline), "{args:?}: {out}");
    }
}

#[test]
fn shipped_scenarios_and_transcript_view() {
    let d = tempfile::tempdir().unwrap();
    let list = ok(d.path(), &["scenario", "list"]);
    let names: Vec<&str> = list.lines().filter(|l| !l.starts_with("OUTCOME")).collect();
    assert!(names.len() >= 5);
    ok(d.path(), &["scenario", "run", names[0], "--out", "t.jsonl"]);
    let view = ok(d.path(), &["transcript", "t.jsonl", "--event", "note"]);
    assert!(view.lines().count() > 1);
    assert!(view.lines().filter(|l| !l.starts_with("OUTCOME")).all(|l| l.contains(" note ")));
}

#[test]
fn script_with_unmet_expectation_exits_nonzero() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("s.txt"), "query basic hazard:0 expect=grant\n").unwrap();
    let o = scepsim(d.path(), &["scenario", "script", "s.txt", "--out", "t.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(last_line(&o), "OUTCOME: unexpected");
}

#[test]
fn flags_are_validated_before_running() {
    let d = tempfile::tempdir().unwrap();
    let o = scepsim(d.path(), &["--threshold", "4", "--keyservers", "3", "attack", "mitm", "--out", "t.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("t.jsonl").exists());
    assert_eq!(last_line(&o), "OUTCOME: error");
    let o = scepsim(d.path(), &["--resumption", "maybe", "attack", "swap"]);
    assert!(!o.status.success());
}
