use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use scepsim::group::Group;
use scepsim::screening::{build_hdb, parse_hazard_file};
use scepsim::sim::attacks::{
    attack_mitm_rate_limit, attack_passcode_replay, attack_response_swap, attack_token_collision_dos,
};
use scepsim::sim::scenario::{run_scenario, shipped_scenarios, ScenarioConfig, ScenarioOutcome};
use scepsim::sim::Transcript;
use serde_json::Value;

use crate::{CliError, Common, Outcome};

#[derive(Subcommand, Debug)]
pub enum HdbCmd {
    /// Keys a hazard file under a fresh key; writes `P.hdb` and `P.k`.
    Build {
        #[arg(long)]
        hazards: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKindArg {
    Basic,
    Exemption,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(value_enum)]
    kind: QueryKindArg,
    /// `hex,name,reason` lines.
    #[arg(long)]
    hazards: PathBuf,
    /// One hex sequence per line.
    #[arg(long)]
    order: PathBuf,
    /// Sequences listed in the exemption token, one hex sequence per line.
    /// Defaults to the first hazard.
    #[arg(long)]
    exempt: Option<PathBuf>,
    /// Second-factor code: `fresh`, `stale` or literal digits.
    #[arg(long, default_value = "fresh")]
    code: String,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Mitm,
    Swap,
    Passcode,
    Collision,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(value_enum)]
    kind: AttackKind,
    /// Collision only: draw σ honestly instead of forcing a collision.
    #[arg(long)]
    control: bool,
}

#[derive(Subcommand, Debug)]
pub enum ScenarioCmd {
    /// Names of the shipped scenarios.
    List,
    /// Runs a shipped scenario under its own configuration.
    Run { name: String },
    /// Runs a script file under the configuration given by the global flags.
    Script { file: PathBuf },
}

#[derive(Args, Debug)]
pub struct TranscriptArgs {
    file: PathBuf,
    #[arg(long)]
    conn: Option<u32>,
    #[arg(long)]
    event: Option<String>,
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_sequences(path: &Path) -> Result<Vec<Vec<u8>>, CliError> {
    let mut out = Vec::new();
    for (n, line) in read_text(path)?.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(hex::decode(line).map_err(|e| CliError::Invalid(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

/// Writes the transcript to `--out`, or prints it when no path is given.
fn emit_transcript(common: &Common, t: &Transcript) -> Result<(), CliError> {
    match &common.out {
        Some(p) => fs::write(p, t.to_jsonl()).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{}", t.to_jsonl());
            Ok(())
        }
    }
}

fn finish(common: &Common, t: &Transcript, out: &ScenarioOutcome) -> Result<Outcome, CliError> {
    emit_transcript(common, t)?;
    for r in &out.report {
        println!("{r}");
    }
    print!("{}", out.render());
    Ok(out.as_expected())
}

pub fn hdb(common: &Common, cmd: HdbCmd) -> Result<Outcome, CliError> {
    let HdbCmd::Build { hazards } = cmd;
    let prefix = common.out_prefix()?;
    let records = parse_hazard_file(&read_text(&hazards)?).map_err(CliError::Invalid)?;
    let world = common.world();
    let group = Group::for_backend(world.backend);
    let k = group.random_nonzero_scalar(&mut common.rng("hdb-build"));
    let db = build_hdb(&group, &records, &k);
    let path = |ext: &str| PathBuf::from(format!("{}.{ext}", prefix.display()));
    fs::write(path("hdb"), db.encode())?;
    fs::write(path("k"), hex::encode(group.scalar_to_bytes(&k)) + "\n")?;
    println!("{} hazards, {} entries ({})", records.len(), db.len(), group.name());
    if db.len() < records.len() {
        println!("warning: {} keyed-hash collisions", records.len() - db.len());
    }
    Ok(true)
}

pub fn run(common: &Common, args: RunArgs) -> Result<Outcome, CliError> {
    let mut world = common.world();
    world.hazards = parse_hazard_file(&read_text(&args.hazards)?).map_err(CliError::Invalid)?;
    if world.hazards.is_empty() {
        return Err(CliError::Invalid("hazard file lists no sequences".into()));
    }
    if let Some(p) = &args.exempt {
        world.elt_sequences = Some(read_sequences(p)?);
    }
    let order = read_sequences(&args.order)?;
    if order.is_empty() {
        return Err(CliError::Invalid("order file lists no sequences".into()));
    }
    let items: Vec<String> = order.iter().map(|s| format!("hex:{}", hex::encode(s))).collect();
    let script = match args.kind {
        QueryKindArg::Basic => format!("query basic {}\n", items.join(" ")),
        QueryKindArg::Exemption => format!("query exemption {} code={}\n", items.join(" "), args.code),
    };
    let config = ScenarioConfig {
        name: format!("run-{:?}", args.kind).to_lowercase(),
        world,
    };
    let (t, out) = run_scenario(&config, &script, common.seed).map_err(|e| CliError::Invalid(e.to_string()))?;
    finish(common, &t, &out)
}

pub fn attack(common: &Common, args: AttackArgs) -> Result<Outcome, CliError> {
    if args.control && args.kind != AttackKind::Collision {
        return Err(CliError::Usage("--control applies to the collision attack only".into()));
    }
    let world = common.world();
    let (t, out) = match args.kind {
        AttackKind::Mitm => attack_mitm_rate_limit(&world, common.seed),
        AttackKind::Swap => attack_response_swap(&world, common.seed),
        AttackKind::Passcode => attack_passcode_replay(&world, common.seed),
        AttackKind::Collision => attack_token_collision_dos(&world, common.seed, !args.control),
    };
    finish(common, &t, &out)
}

pub fn scenario(common: &Common, cmd: ScenarioCmd) -> Result<Outcome, CliError> {
    match cmd {
        ScenarioCmd::List => {
            for (c, _) in shipped_scenarios() {
                println!("{}", c.name);
            }
            Ok(true)
        }
        ScenarioCmd::Run { name } => {
            let (config, script) = shipped_scenarios()
                .into_iter()
                .find(|(c, _)| c.name == name)
                .ok_or_else(|| CliError::Usage(format!("no shipped scenario `{name}`")))?;
            let (t, out) = run_scenario(&config, script, common.seed).map_err(|e| CliError::Invalid(e.to_string()))?;
            finish(common, &t, &out)
        }
        ScenarioCmd::Script { file } => {
            let script = read_text(&file)?;
            let name = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let config = ScenarioConfig {
                name,
                world: common.world(),
            };
            let (t, out) = run_scenario(&config, &script, common.seed)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", file.display())))?;
            finish(common, &t, &out)
        }
    }
}

fn field(v: &Value, key: &str) -> String {
    match &v[key] {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn transcript(args: TranscriptArgs) -> Result<Outcome, CliError> {
    let text = read_text(&args.file)?;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line)
            .map_err(|e| CliError::Invalid(format!("{}:{}: {e}", args.file.display(), n + 1)))?;
        if args.conn.is_some_and(|c| v["conn"].as_u64() != Some(c.into())) {
            continue;
        }
        if args.event.as_deref().is_some_and(|e| v["event"].as_str() != Some(e)) {
            continue;
        }
        let mut row = format!(
            "{:>5} t={} {:<10} msg={:<4} conn={:<3} {}->{} {}",
            field(&v, "step"),
            field(&v, "clock"),
            field(&v, "event"),
            field(&v, "msg"),
            field(&v, "conn"),
            field(&v, "from"),
            field(&v, "to"),
            field(&v, "kind"),
        );
        if let Some(view) = v["view"].as_str() {
            row.push_str(&format!(" [{view}]"));
        }
        if let Some(note) = v["note"].as_str() {
            row.push_str(&format!(" ({note})"));
        }
        println!("{row}");
    }
    Ok(true)
}
