//! File formats, all written side by side under the `--out` prefix `P`:
//!
//! - `P.cert` canonical certificate bytes, `P.cert.txt` its text dump
//! - `P.path` framed certificates from `P.cert` up to the root
//! - `P.key`, `P.subkey` hex Ed25519 seeds
//! - `P.chain` canonical chain bytes, `P.chain.txt` one text block per element
//!
//! Certificates and chains are read in either form; revocation lists are
//! binary only.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use scepsim::crypto::KeyPair;
use scepsim::encoding::{frame, unframe};
use scepsim::pki::{
    create_root, issue_certificate, issue_subtoken, issue_token, validate_chain, CertChain, CertType, Certificate,
    Identity, Issuer, Level, RevocationList, Sigma, Token, TokenPayload, TokenType, Validity,
};
use scepsim::sim::world::START_TIME;

use crate::{CliError, Common, Outcome};

const DAY: u64 = 24 * 3600;

#[derive(Subcommand, Debug)]
pub enum PkiCmd {
    /// Self-signed root certificate.
    CreateRoot {
        #[arg(long = "type")]
        cert_type: CertType,
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        validity: ValidityArgs,
    },
    /// Certificate one level below an issuer.
    IssueCert {
        /// Prefix of the issuing certificate's files.
        #[arg(long)]
        issuer: PathBuf,
        #[arg(long)]
        level: Level,
        #[arg(long)]
        name: String,
        #[command(flatten)]
        validity: ValidityArgs,
    },
    /// Token issued by a leaf certificate. Synthesizer tokens take the
    /// global `--rate-limit`.
    IssueToken {
        #[arg(long)]
        issuer: PathBuf,
        #[arg(long = "type")]
        token_type: TokenType,
        #[arg(long)]
        name: String,
        /// Keyserver index.
        #[arg(long, default_value_t = 1)]
        index: u32,
        /// Comma-separated hex sequences of an exemption token.
        #[arg(long, value_delimiter = ',')]
        sequences: Vec<String>,
        /// Second-factor device of an exemption token.
        #[arg(long, default_value = "device-1")]
        device: String,
        /// Also generate a key for issuing sub-tokens.
        #[arg(long)]
        with_subtoken_key: bool,
        #[command(flatten)]
        validity: ValidityArgs,
    },
    /// Exemption token for a subset of a parent's sequences.
    IssueSubtoken {
        /// Prefix of the parent's `.chain` and `.subkey` files.
        #[arg(long)]
        parent: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sequences: Vec<String>,
        #[arg(long)]
        with_subtoken_key: bool,
    },
    /// Validates a chain against a pinned root; prints VALID or the error name.
    ValidateChain {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        revocations: Option<PathBuf>,
        #[arg(long, default_value_t = START_TIME)]
        now: u64,
    },
    /// Adds entries to a revocation list, creating it if missing.
    Revoke {
        #[arg(long)]
        list: PathBuf,
        #[arg(long)]
        sigma: Vec<String>,
        /// Revokes the token of a chain file by σ.
        #[arg(long)]
        chain: Vec<PathBuf>,
        /// Revokes a certificate's subject key.
        #[arg(long)]
        cert: Vec<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Copy)]
pub struct ValidityArgs {
    #[arg(long, default_value_t = START_TIME)]
    start: u64,
    #[arg(long, default_value_t = 3650)]
    days: u64,
}

impl ValidityArgs {
    fn validity(self) -> Result<Validity, CliError> {
        let end = self
            .days
            .checked_mul(DAY)
            .and_then(|d| self.start.checked_add(d))
            .ok_or_else(|| CliError::Usage("validity end overflows".into()))?;
        Ok(Validity::new(self.start, end)?)
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Text dumps start with a `kind:` line; anything else is binary.
fn as_text(bytes: &[u8]) -> Option<&str> {
    std::str::from_utf8(bytes).ok().filter(|t| t.starts_with("kind:"))
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(format!("{}: {e}", path.display()))
}

pub fn read_cert(path: &Path) -> Result<Certificate, CliError> {
    let bytes = read(path)?;
    match as_text(&bytes) {
        Some(t) => Certificate::from_text(t).map_err(|e| invalid(path, e)),
        None => Ok(Certificate::decode(&bytes)?),
    }
}

fn read_key(path: &Path) -> Result<KeyPair, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let seed: [u8; 32] = hex::decode(text.trim())
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| invalid(path, "expected 32 hex-encoded bytes"))?;
    Ok(KeyPair::from_seed(seed))
}

fn write_key(path: &Path, key: &KeyPair) -> Result<(), CliError> {
    write(path, hex::encode(key.seed()) + "\n")
}

fn read_path(path: &Path) -> Result<Vec<Certificate>, CliError> {
    let bytes = read(path)?;
    let fields = unframe(&bytes).map_err(|e| invalid(path, e))?;
    fields.into_iter().map(|f| Ok(Certificate::decode(f)?)).collect()
}

fn load_issuer(prefix: &Path) -> Result<(Issuer, Vec<Certificate>), CliError> {
    let cert = match read_cert(&with_ext(prefix, "cert")) {
        Err(CliError::Io(_)) => read_cert(&with_ext(prefix, "cert.txt"))?,
        r => r?,
    };
    let key = read_key(&with_ext(prefix, "key"))?;
    if key.verify_key() != cert.subject_key() {
        return Err(invalid(prefix, "key does not match certificate"));
    }
    let path = read_path(&with_ext(prefix, "path"))?;
    Ok((Issuer { cert, key }, path))
}

fn save_issuer(prefix: &Path, issuer: &Issuer, path: &[Certificate]) -> Result<(), CliError> {
    write(&with_ext(prefix, "cert"), issuer.cert.encode())?;
    write(&with_ext(prefix, "cert.txt"), issuer.cert.to_text())?;
    write_key(&with_ext(prefix, "key"), &issuer.key)?;
    let encoded: Vec<Vec<u8>> = path.iter().map(Certificate::encode).collect();
    write(&with_ext(prefix, "path"), frame(&encoded))
}

fn chain_text(chain: &CertChain) -> String {
    let mut blocks = vec![chain.token.to_text()];
    blocks.extend(chain.parents.iter().map(Token::to_text));
    blocks.extend(chain.path.iter().map(Certificate::to_text));
    blocks.join("\n")
}

/// Inverse of [`chain_text`]: the first token is the presented one, later
/// tokens are its parents, certificates form the path.
fn chain_from_text(text: &str) -> Result<CertChain, String> {
    let mut tokens = Vec::new();
    let mut path = Vec::new();
    for block in text.split("\n\n").map(str::trim).filter(|b| !b.is_empty()) {
        if block.starts_with("kind: token") {
            tokens.push(Token::from_text(block)?);
        } else {
            path.push(Certificate::from_text(block)?);
        }
    }
    if tokens.is_empty() {
        return Err("no token block".into());
    }
    let token = tokens.remove(0);
    Ok(CertChain {
        token,
        parents: tokens,
        path,
    })
}

pub fn read_chain(path: &Path) -> Result<CertChain, CliError> {
    let bytes = read(path)?;
    match as_text(&bytes) {
        Some(t) => chain_from_text(t).map_err(|e| invalid(path, e)),
        None => Ok(CertChain::decode(&bytes)?),
    }
}

fn save_chain(prefix: &Path, chain: &CertChain) -> Result<(), CliError> {
    write(&with_ext(prefix, "chain"), chain.encode())?;
    write(&with_ext(prefix, "chain.txt"), chain_text(chain))
}

fn parse_sequences(list: &[String]) -> Result<Vec<Vec<u8>>, CliError> {
    list.iter()
        .map(|s| hex::decode(s.trim()).map_err(|e| CliError::Usage(format!("sequence `{s}`: {e}"))))
        .collect()
}

fn parse_sigma(s: &str) -> Result<Sigma, CliError> {
    hex::decode(s)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| CliError::Usage(format!("sigma `{s}` is not 16 hex-encoded bytes")))
}

fn read_revocations(path: &Path) -> Result<RevocationList, CliError> {
    let bytes = read(path)?;
    RevocationList::decode(&bytes).map_err(|e| invalid(path, e))
}

pub fn run(common: &Common, cmd: PkiCmd) -> Result<Outcome, CliError> {
    match cmd {
        PkiCmd::CreateRoot {
            cert_type,
            name,
            validity,
        } => {
            let out = common.out_prefix()?;
            let name = name.unwrap_or_else(|| format!("{cert_type} root"));
            let id = Identity::new(name.clone(), format!("{}@root", cert_type));
            let root = create_root(cert_type, id, validity.validity()?, &mut common.rng("create-root"));
            save_issuer(out, &root, std::slice::from_ref(&root.cert))?;
            println!("root {name} sigma {}", hex::encode(root.cert.sigma()));
        }
        PkiCmd::IssueCert {
            issuer,
            level,
            name,
            validity,
        } => {
            let out = common.out_prefix()?;
            let (parent, path) = load_issuer(&issuer)?;
            let mut rng = common.rng("issue-cert");
            let key = KeyPair::generate(&mut rng);
            let id = Identity::new(name.clone(), format!("{}@{}", name.to_lowercase(), parent.cert.desc.cert_type));
            let cert = issue_certificate(
                &parent,
                id,
                key.verify_key(),
                parent.cert.desc.cert_type,
                level,
                validity.validity()?,
                &mut rng,
            )?;
            let mut full = vec![cert.clone()];
            full.extend(path);
            save_issuer(out, &Issuer { cert, key }, &full)?;
            println!("{level} {name} sigma {}", hex::encode(full[0].sigma()));
        }
        PkiCmd::IssueToken {
            issuer,
            token_type,
            name,
            index,
            sequences,
            device,
            with_subtoken_key,
            validity,
        } => {
            let out = common.out_prefix()?;
            let (leaf, path) = load_issuer(&issuer)?;
            let mut rng = common.rng("issue-token");
            let key = KeyPair::generate(&mut rng);
            let sub = with_subtoken_key.then(|| KeyPair::generate(&mut rng));
            if (with_subtoken_key || !sequences.is_empty()) && token_type != TokenType::Exemption {
                return Err(CliError::Usage("--sequences and --with-subtoken-key need --type exemption".into()));
            }
            let payload = match token_type {
                TokenType::Synthesizer => TokenPayload::Synthesizer {
                    synth_id: name.clone(),
                    rate_limit: common.rate_limit,
                },
                TokenType::KeyserverInfra => TokenPayload::KeyserverInfra { index },
                TokenType::DatabaseInfra => TokenPayload::DatabaseInfra,
                TokenType::Exemption => TokenPayload::Exemption {
                    sequences: parse_sequences(&sequences)?,
                    device_id: device,
                    subtoken_key: sub.as_ref().map(KeyPair::verify_key),
                },
            };
            let id = Identity::new(name.clone(), format!("{}@{}", name.to_lowercase(), token_type));
            let token = issue_token(&leaf, id, key.verify_key(), payload, validity.validity()?, &mut rng)?;
            let chain = CertChain::new(token, path);
            save_chain(out, &chain)?;
            write_key(&with_ext(out, "key"), &key)?;
            if let Some(sub) = &sub {
                write_key(&with_ext(out, "subkey"), sub)?;
            }
            println!("{token_type} token {name} sigma {}", hex::encode(chain.token.sigma()));
        }
        PkiCmd::IssueSubtoken {
            parent,
            sequences,
            with_subtoken_key,
        } => {
            let out = common.out_prefix()?;
            let parent_chain = read_chain(&with_ext(&parent, "chain"))?;
            let parent_sub = read_key(&with_ext(&parent, "subkey"))?;
            let mut rng = common.rng("issue-subtoken");
            let next = with_subtoken_key.then(|| KeyPair::generate(&mut rng));
            let token = issue_subtoken(
                &parent_chain.token,
                &parent_sub,
                &parse_sequences(&sequences)?,
                next.as_ref().map(KeyPair::verify_key),
                &mut rng,
            )?;
            let mut parents = vec![parent_chain.token.clone()];
            parents.extend(parent_chain.parents.iter().cloned());
            let chain = CertChain {
                token,
                parents,
                path: parent_chain.path,
            };
            save_chain(out, &chain)?;
            if let Some(next) = &next {
                write_key(&with_ext(out, "subkey"), next)?;
            }
            println!("sub-token sigma {} depth {}", hex::encode(chain.token.sigma()), chain.depth());
        }
        PkiCmd::ValidateChain {
            chain,
            root,
            revocations,
            now,
        } => {
            let chain = read_chain(&chain)?;
            let root = read_cert(&root)?;
            let revocations = match revocations {
                Some(p) => read_revocations(&p)?,
                None => RevocationList::new(),
            };
            validate_chain(&chain, &root, now, &revocations)?;
            println!("VALID");
        }
        PkiCmd::Revoke {
            list,
            sigma,
            chain,
            cert,
        } => {
            let mut rl = if list.exists() {
                read_revocations(&list)?
            } else {
                RevocationList::new()
            };
            for s in &sigma {
                rl.revoke_sigma(parse_sigma(s)?);
            }
            for c in &chain {
                rl.revoke_sigma(read_chain(c)?.token.sigma());
            }
            for c in &cert {
                rl.revoke_key(read_cert(c)?.subject_key());
            }
            write(&list, rl.encode())?;
            println!(
                "revocation list: {} sigma, {} keys",
                rl.revoked_sigma.len(),
                rl.revoked_keys.len()
            );
        }
    }
    Ok(true)
}

