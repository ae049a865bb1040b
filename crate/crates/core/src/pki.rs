//! Certificate hierarchies, tokens and chain validation.
//!
//! Three independent hierarchies (manufacturer, infrastructure, exemption)
//! each have one root, intermediates under the root and leaves under the
//! intermediates. Leaves issue tokens only. Exemption-list tokens may carry a
//! sub-token key, under which narrower sub-tokens can be issued.
//!
//! Chains travel leaf-first: the presented token, any parent tokens it was
//! derived from, then certificates from the issuing leaf up to the root.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::RngCore;
use thiserror::Error;

use crate::crypto::{sign, verify, KeyPair, Signature, VerifyKey};
use crate::encoding::{frame, unframe, DecodeError, Decoder, Encoder};

pub const CERT_VERSION: u32 = 1;

pub type Sigma = [u8; 16];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PkiError {
    #[error("bad signature at depth {0}")]
    BadSignature(usize),
    #[error("untrusted root")]
    UntrustedRoot,
    #[error("expired at depth {0}")]
    Expired(usize),
    #[error("revoked at depth {0}")]
    Revoked(usize),
    #[error("hierarchy level violation")]
    LevelViolation,
    #[error("certificate type mismatch")]
    TypeMismatch,
    #[error("sub-token sequences are not a subset of the parent's")]
    NotASubset,
    #[error("parent token has no sub-token key")]
    NoSubtokenKey,
    #[error("validity window must satisfy start < end")]
    InvalidValidity,
    #[error("malformed encoding: {0}")]
    Malformed(#[from] DecodeError),
}

impl PkiError {
    /// Variant name without payload, as printed by the command line.
    pub fn name(&self) -> &'static str {
        match self {
            PkiError::BadSignature(_) => "BadSignature",
            PkiError::UntrustedRoot => "UntrustedRoot",
            PkiError::Expired(_) => "Expired",
            PkiError::Revoked(_) => "Revoked",
            PkiError::LevelViolation => "LevelViolation",
            PkiError::TypeMismatch => "TypeMismatch",
            PkiError::NotASubset => "NotASubset",
            PkiError::NoSubtokenKey => "NoSubtokenKey",
            PkiError::InvalidValidity => "InvalidValidity",
            PkiError::Malformed(_) => "Malformed",
        }
    }
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident = $code:literal, $text:literal),* $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),* }

        impl $name {
            pub fn code(self) -> u8 {
                match self { $($name::$variant => $code),* }
            }

            pub fn from_code(c: u8) -> Result<Self, DecodeError> {
                match c {
                    $($code => Ok($name::$variant),)*
                    _ => Err(DecodeError::Invalid(stringify!($name))),
                }
            }

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),* }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)*
                    other => Err(format!("unknown {} `{other}`", stringify!($name))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

text_enum!(CertType {
    Manufacturer = 1, "manufacturer",
    Infrastructure = 2, "infrastructure",
    Exemption = 3, "exemption",
});

text_enum!(Level {
    Root = 1, "root",
    Intermediate = 2, "intermediate",
    Leaf = 3, "leaf",
});

text_enum!(TokenType {
    Synthesizer = 1, "synthesizer",
    KeyserverInfra = 2, "keyserver",
    DatabaseInfra = 3, "database",
    Exemption = 4, "exemption",
});

impl TokenType {
    pub fn cert_type(self) -> CertType {
        match self {
            TokenType::Synthesizer => CertType::Manufacturer,
            TokenType::KeyserverInfra | TokenType::DatabaseInfra => CertType::Infrastructure,
            TokenType::Exemption => CertType::Exemption,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CertDescription {
    pub version: u32,
    pub cert_type: CertType,
    pub level: Level,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Identity {
    pub name: String,
    pub email: String,
}

impl Identity {
    pub fn new(name: impl Into<String>, email: impl Into<String>) -> Self {
        Identity {
            name: name.into(),
            email: email.into(),
        }
    }

    fn encode(&self) -> Vec<u8> {
        Encoder::new().str(&self.name).str(&self.email).finish()
    }

    fn decode(b: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(b);
        let id = Identity {
            name: d.string()?,
            email: d.string()?,
        };
        d.finish()?;
        if id.name.is_empty() {
            return Err(DecodeError::Invalid("empty identity name"));
        }
        Ok(id)
    }
}

/// Closed interval of simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validity {
    pub start: u64,
    pub end: u64,
}

impl Validity {
    pub fn new(start: u64, end: u64) -> Result<Self, PkiError> {
        if start < end {
            Ok(Validity { start, end })
        } else {
            Err(PkiError::InvalidValidity)
        }
    }

    pub fn contains(&self, now: u64) -> bool {
        self.start <= now && now <= self.end
    }

    fn encode(&self) -> Vec<u8> {
        Encoder::new().u64(self.start).u64(self.end).finish()
    }

    fn decode(b: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(b);
        let v = Validity {
            start: d.u64()?,
            end: d.u64()?,
        };
        d.finish()?;
        Ok(v)
    }
}

/// Fields shared by certificates and tokens, covered by the signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub subject: Identity,
    pub sigma: Sigma,
    pub subject_key: VerifyKey,
    pub issuer: Identity,
    pub issuer_key: VerifyKey,
    pub validity: Validity,
}

impl Context {
    fn push(&self, enc: &mut Encoder) {
        enc.push(&self.subject.encode());
        enc.push(&self.sigma);
        enc.push(self.subject_key.as_bytes());
        enc.push(&self.issuer.encode());
        enc.push(self.issuer_key.as_bytes());
        enc.push(&self.validity.encode());
    }

    fn read(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Context {
            subject: Identity::decode(d.field()?)?,
            sigma: d.fixed()?,
            subject_key: read_key(d)?,
            issuer: Identity::decode(d.field()?)?,
            issuer_key: read_key(d)?,
            validity: Validity::decode(d.field()?)?,
        })
    }
}

fn read_key(d: &mut Decoder<'_>) -> Result<VerifyKey, DecodeError> {
    VerifyKey::from_slice(d.field()?).map_err(|_| DecodeError::Invalid("verify key"))
}

fn read_sig(d: &mut Decoder<'_>) -> Result<Signature, DecodeError> {
    Ok(Signature(d.fixed()?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub desc: CertDescription,
    pub ctx: Context,
    pub signature: Signature,
}

impl Certificate {
    /// Bytes covered by the signature.
    pub fn signed_body(&self) -> Vec<u8> {
        let mut enc = Encoder::new()
            .u32(self.desc.version)
            .u8(self.desc.cert_type.code())
            .u8(self.desc.level.code());
        self.ctx.push(&mut enc);
        enc.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        frame(&[self.signed_body(), self.signature.0.to_vec()])
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PkiError> {
        let mut outer = Decoder::new(bytes);
        let body = outer.field()?;
        let signature = read_sig(&mut outer)?;
        outer.finish()?;
        let mut d = Decoder::new(body);
        let desc = CertDescription {
            version: d.u32()?,
            cert_type: CertType::from_code(d.u8()?)?,
            level: Level::from_code(d.u8()?)?,
        };
        let ctx = Context::read(&mut d)?;
        d.finish()?;
        Ok(Certificate { desc, ctx, signature })
    }

    pub fn sigma(&self) -> Sigma {
        self.ctx.sigma
    }

    pub fn subject_key(&self) -> VerifyKey {
        self.ctx.subject_key
    }

    fn signature_valid_under(&self, key: &VerifyKey) -> bool {
        self.ctx.issuer_key == *key && verify(key, &self.signed_body(), &self.signature)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        line(&mut out, "kind", "certificate");
        line(&mut out, "version", self.desc.version);
        line(&mut out, "type", self.desc.cert_type);
        line(&mut out, "level", self.desc.level);
        write_context(&mut out, &self.ctx);
        line(&mut out, "signature", hex::encode(self.signature.0));
        out
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut f = Fields::read(text)?;
        f.expect("kind", "certificate")?;
        let desc = CertDescription {
            version: f.parse("version")?,
            cert_type: f.parse("type")?,
            level: f.parse("level")?,
        };
        let ctx = read_context(&mut f)?;
        let signature = Signature::from_slice(&f.hex("signature")?).map_err(|e| e.to_string())?;
        f.finish()?;
        Ok(Certificate { desc, ctx, signature })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenPayload {
    Synthesizer {
        synth_id: String,
        rate_limit: u64,
    },
    KeyserverInfra {
        index: u32,
    },
    DatabaseInfra,
    Exemption {
        sequences: Vec<Vec<u8>>,
        device_id: String,
        subtoken_key: Option<VerifyKey>,
    },
}

impl TokenPayload {
    pub fn token_type(&self) -> TokenType {
        match self {
            TokenPayload::Synthesizer { .. } => TokenType::Synthesizer,
            TokenPayload::KeyserverInfra { .. } => TokenType::KeyserverInfra,
            TokenPayload::DatabaseInfra => TokenType::DatabaseInfra,
            TokenPayload::Exemption { .. } => TokenType::Exemption,
        }
    }

    fn encode(&self) -> Vec<u8> {
        match self {
            TokenPayload::Synthesizer { synth_id, rate_limit } => {
                Encoder::new().str(synth_id).u64(*rate_limit).finish()
            }
            TokenPayload::KeyserverInfra { index } => Encoder::new().u32(*index).finish(),
            TokenPayload::DatabaseInfra => Vec::new(),
            TokenPayload::Exemption {
                sequences,
                device_id,
                subtoken_key,
            } => Encoder::new()
                .bytes(&frame(sequences))
                .str(device_id)
                .bytes(subtoken_key.as_ref().map(|k| k.as_bytes().as_slice()).unwrap_or(&[]))
                .finish(),
        }
    }

    fn decode(ty: TokenType, b: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(b);
        let p = match ty {
            TokenType::Synthesizer => TokenPayload::Synthesizer {
                synth_id: d.string()?,
                rate_limit: d.u64()?,
            },
            TokenType::KeyserverInfra => TokenPayload::KeyserverInfra { index: d.u32()? },
            TokenType::DatabaseInfra => TokenPayload::DatabaseInfra,
            TokenType::Exemption => {
                let sequences = unframe(d.field()?)?.into_iter().map(<[u8]>::to_vec).collect();
                let device_id = d.string()?;
                let key = d.field()?;
                let subtoken_key = if key.is_empty() {
                    None
                } else {
                    Some(VerifyKey::from_slice(key).map_err(|_| DecodeError::Invalid("verify key"))?)
                };
                TokenPayload::Exemption {
                    sequences,
                    device_id,
                    subtoken_key,
                }
            }
        };
        d.finish()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub version: u32,
    pub payload: TokenPayload,
    pub ctx: Context,
    pub signature: Signature,
}

impl Token {
    pub fn token_type(&self) -> TokenType {
        self.payload.token_type()
    }

    pub fn sigma(&self) -> Sigma {
        self.ctx.sigma
    }

    pub fn subject_key(&self) -> VerifyKey {
        self.ctx.subject_key
    }

    pub fn signed_body(&self) -> Vec<u8> {
        let mut enc = Encoder::new()
            .u8(self.token_type().code())
            .bytes(&self.payload.encode())
            .u32(self.version);
        self.ctx.push(&mut enc);
        enc.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        frame(&[self.signed_body(), self.signature.0.to_vec()])
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PkiError> {
        let mut outer = Decoder::new(bytes);
        let body = outer.field()?;
        let signature = read_sig(&mut outer)?;
        outer.finish()?;
        let mut d = Decoder::new(body);
        let ty = TokenType::from_code(d.u8()?)?;
        let payload = TokenPayload::decode(ty, d.field()?)?;
        let version = d.u32()?;
        let ctx = Context::read(&mut d)?;
        d.finish()?;
        Ok(Token {
            version,
            payload,
            ctx,
            signature,
        })
    }

    /// Rate limit μ of a synthesizer token.
    pub fn rate_limit(&self) -> Option<u64> {
        match &self.payload {
            TokenPayload::Synthesizer { rate_limit, .. } => Some(*rate_limit),
            _ => None,
        }
    }

    pub fn exempt_sequences(&self) -> Option<&[Vec<u8>]> {
        match &self.payload {
            TokenPayload::Exemption { sequences, .. } => Some(sequences),
            _ => None,
        }
    }

    pub fn device_id(&self) -> Option<&str> {
        match &self.payload {
            TokenPayload::Exemption { device_id, .. } => Some(device_id),
            _ => None,
        }
    }

    fn signature_valid_under(&self, key: &VerifyKey) -> bool {
        self.ctx.issuer_key == *key && verify(key, &self.signed_body(), &self.signature)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        line(&mut out, "kind", "token");
        line(&mut out, "version", self.version);
        line(&mut out, "token_type", self.token_type());
        match &self.payload {
            TokenPayload::Synthesizer { synth_id, rate_limit } => {
                line(&mut out, "synth_id", synth_id);
                line(&mut out, "rate_limit", rate_limit);
            }
            TokenPayload::KeyserverInfra { index } => line(&mut out, "keyserver_index", index),
            TokenPayload::DatabaseInfra => {}
            TokenPayload::Exemption {
                sequences,
                device_id,
                subtoken_key,
            } => {
                line(&mut out, "exempt_count", sequences.len());
                for s in sequences {
                    line(&mut out, "exempt_sequence", hex::encode(s));
                }
                line(&mut out, "device_id", device_id);
                line(
                    &mut out,
                    "subtoken_key",
                    subtoken_key.map(|k| hex::encode(k.0)).unwrap_or_else(|| "none".into()),
                );
            }
        }
        write_context(&mut out, &self.ctx);
        line(&mut out, "signature", hex::encode(self.signature.0));
        out
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut f = Fields::read(text)?;
        f.expect("kind", "token")?;
        let version = f.parse("version")?;
        let ty: TokenType = f.parse("token_type")?;
        let payload = match ty {
            TokenType::Synthesizer => TokenPayload::Synthesizer {
                synth_id: f.take("synth_id")?,
                rate_limit: f.parse("rate_limit")?,
            },
            TokenType::KeyserverInfra => TokenPayload::KeyserverInfra {
                index: f.parse("keyserver_index")?,
            },
            TokenType::DatabaseInfra => TokenPayload::DatabaseInfra,
            TokenType::Exemption => {
                let count: usize = f.parse("exempt_count")?;
                let sequences = (0..count).map(|_| f.hex("exempt_sequence")).collect::<Result<_, _>>()?;
                let device_id = f.take("device_id")?;
                let key = f.take("subtoken_key")?;
                let subtoken_key = if key == "none" {
                    None
                } else {
                    let b = hex::decode(&key).map_err(|e| e.to_string())?;
                    Some(VerifyKey::from_slice(&b).map_err(|e| e.to_string())?)
                };
                TokenPayload::Exemption {
                    sequences,
                    device_id,
                    subtoken_key,
                }
            }
        };
        let ctx = read_context(&mut f)?;
        let signature = Signature::from_slice(&f.hex("signature")?).map_err(|e| e.to_string())?;
        f.finish()?;
        Ok(Token {
            version,
            payload,
            ctx,
            signature,
        })
    }
}

fn line(out: &mut String, key: &str, value: impl fmt::Display) {
    writeln!(out, "{key}: {value}").unwrap();
}

fn write_context(out: &mut String, c: &Context) {
    line(out, "subject_name", &c.subject.name);
    line(out, "subject_email", &c.subject.email);
    line(out, "sigma", hex::encode(c.sigma));
    line(out, "subject_key", hex::encode(c.subject_key.0));
    line(out, "issuer_name", &c.issuer.name);
    line(out, "issuer_email", &c.issuer.email);
    line(out, "issuer_key", hex::encode(c.issuer_key.0));
    line(out, "valid_from", c.validity.start);
    line(out, "valid_until", c.validity.end);
}

fn read_context(f: &mut Fields) -> Result<Context, String> {
    let key = |b: Vec<u8>| VerifyKey::from_slice(&b).map_err(|e| e.to_string());
    Ok(Context {
        subject: Identity::new(f.take("subject_name")?, f.take("subject_email")?),
        sigma: f.hex("sigma")?.try_into().map_err(|_| "sigma must be 16 bytes".to_string())?,
        subject_key: key(f.hex("subject_key")?)?,
        issuer: Identity::new(f.take("issuer_name")?, f.take("issuer_email")?),
        issuer_key: key(f.hex("issuer_key")?)?,
        validity: Validity {
            start: f.parse("valid_from")?,
            end: f.parse("valid_until")?,
        },
    })
}

/// Ordered `key: value` lines of a text dump.
struct Fields {
    lines: std::collections::VecDeque<(String, String)>,
}

impl Fields {
    fn read(text: &str) -> Result<Self, String> {
        let lines = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once(": ")
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| format!("malformed line `{l}`"))
            })
            .collect::<Result<_, _>>()?;
        Ok(Fields { lines })
    }

    fn take(&mut self, key: &str) -> Result<String, String> {
        match self.lines.pop_front() {
            Some((k, v)) if k == key => Ok(v),
            Some((k, _)) => Err(format!("expected `{key}`, found `{k}`")),
            None => Err(format!("missing `{key}`")),
        }
    }

    fn expect(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = self.take(key)?;
        if v == value {
            Ok(())
        } else {
            Err(format!("expected {key} `{value}`, found `{v}`"))
        }
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<T, String>
    where
        T::Err: fmt::Display,
    {
        self.take(key)?.parse().map_err(|e: T::Err| format!("{key}: {e}"))
    }

    fn hex(&mut self, key: &str) -> Result<Vec<u8>, String> {
        hex::decode(self.take(key)?).map_err(|e| format!("{key}: {e}"))
    }

    fn finish(self) -> Result<(), String> {
        match self.lines.front() {
            None => Ok(()),
            Some((k, _)) => Err(format!("unexpected trailing field `{k}`")),
        }
    }
}

/// A certificate together with the private key that issues under it.
#[derive(Debug, Clone)]
pub struct Issuer {
    pub cert: Certificate,
    pub key: KeyPair,
}

fn random_sigma<R: RngCore + ?Sized>(rng: &mut R) -> Sigma {
    let mut s = [0u8; 16];
    rng.fill_bytes(&mut s);
    s
}

/// Self-signed root of one hierarchy.
pub fn create_root<R: RngCore + ?Sized>(
    cert_type: CertType,
    identity: Identity,
    validity: Validity,
    rng: &mut R,
) -> Issuer {
    let key = KeyPair::generate(rng);
    let mut cert = Certificate {
        desc: CertDescription {
            version: CERT_VERSION,
            cert_type,
            level: Level::Root,
        },
        ctx: Context {
            subject: identity.clone(),
            sigma: random_sigma(rng),
            subject_key: key.verify_key(),
            issuer: identity,
            issuer_key: key.verify_key(),
            validity,
        },
        signature: Signature([0; 64]),
    };
    cert.signature = sign(&key, &cert.signed_body());
    Issuer { cert, key }
}

fn child_level(parent: Level) -> Option<Level> {
    match parent {
        Level::Root => Some(Level::Intermediate),
        Level::Intermediate => Some(Level::Leaf),
        Level::Leaf => None,
    }
}

/// Issues a certificate one level below `issuer`, in the hierarchy `cert_type`.
pub fn issue_certificate<R: RngCore + ?Sized>(
    issuer: &Issuer,
    subject: Identity,
    subject_key: VerifyKey,
    cert_type: CertType,
    level: Level,
    validity: Validity,
    rng: &mut R,
) -> Result<Certificate, PkiError> {
    if child_level(issuer.cert.desc.level) != Some(level) {
        return Err(PkiError::LevelViolation);
    }
    if issuer.cert.desc.cert_type != cert_type {
        return Err(PkiError::TypeMismatch);
    }
    if validity.start >= validity.end {
        return Err(PkiError::InvalidValidity);
    }
    let mut cert = Certificate {
        desc: CertDescription {
            version: CERT_VERSION,
            cert_type,
            level,
        },
        ctx: Context {
            subject,
            sigma: random_sigma(rng),
            subject_key,
            issuer: issuer.cert.ctx.subject.clone(),
            issuer_key: issuer.key.verify_key(),
            validity,
        },
        signature: Signature([0; 64]),
    };
    cert.signature = sign(&issuer.key, &cert.signed_body());
    Ok(cert)
}

/// Generates a key pair and a certificate for it in one step.
pub fn issue_subordinate<R: RngCore + ?Sized>(
    issuer: &Issuer,
    subject: Identity,
    level: Level,
    validity: Validity,
    rng: &mut R,
) -> Result<Issuer, PkiError> {
    let key = KeyPair::generate(rng);
    let cert = issue_certificate(
        issuer,
        subject,
        key.verify_key(),
        issuer.cert.desc.cert_type,
        level,
        validity,
        rng,
    )?;
    Ok(Issuer { cert, key })
}

pub fn issue_token<R: RngCore + ?Sized>(
    leaf: &Issuer,
    subject: Identity,
    subject_key: VerifyKey,
    payload: TokenPayload,
    validity: Validity,
    rng: &mut R,
) -> Result<Token, PkiError> {
    let sigma = random_sigma(rng);
    issue_token_with_sigma(leaf, subject, subject_key, payload, validity, sigma)
}

/// Issues a token with a caller-chosen σ. Honest issuers draw σ at random;
/// nothing in validation prevents two tokens from sharing one.
pub fn issue_token_with_sigma(
    leaf: &Issuer,
    subject: Identity,
    subject_key: VerifyKey,
    payload: TokenPayload,
    validity: Validity,
    sigma: Sigma,
) -> Result<Token, PkiError> {
    if leaf.cert.desc.level != Level::Leaf {
        return Err(PkiError::LevelViolation);
    }
    if payload.token_type().cert_type() != leaf.cert.desc.cert_type {
        return Err(PkiError::TypeMismatch);
    }
    if validity.start >= validity.end {
        return Err(PkiError::InvalidValidity);
    }
    let mut token = Token {
        version: CERT_VERSION,
        payload,
        ctx: Context {
            subject,
            sigma,
            subject_key,
            issuer: leaf.cert.ctx.subject.clone(),
            issuer_key: leaf.key.verify_key(),
            validity,
        },
        signature: Signature([0; 64]),
    };
    token.signature = sign(&leaf.key, &token.signed_body());
    Ok(token)
}

/// Issues an exemption token for `subset` of the parent's sequences, signed
/// by the parent's sub-token key. `next_subtoken_key` lets the new token
/// delegate further.
pub fn issue_subtoken<R: RngCore + ?Sized>(
    parent: &Token,
    parent_subtoken_key: &KeyPair,
    subset: &[Vec<u8>],
    next_subtoken_key: Option<VerifyKey>,
    rng: &mut R,
) -> Result<Token, PkiError> {
    let TokenPayload::Exemption {
        sequences,
        device_id,
        subtoken_key,
    } = &parent.payload
    else {
        return Err(PkiError::TypeMismatch);
    };
    let Some(sub_key) = subtoken_key else {
        return Err(PkiError::NoSubtokenKey);
    };
    if *sub_key != parent_subtoken_key.verify_key() {
        return Err(PkiError::NoSubtokenKey);
    }
    if !subset.iter().all(|s| sequences.contains(s)) {
        return Err(PkiError::NotASubset);
    }
    let mut token = Token {
        version: CERT_VERSION,
        payload: TokenPayload::Exemption {
            sequences: subset.to_vec(),
            device_id: device_id.clone(),
            subtoken_key: next_subtoken_key,
        },
        ctx: Context {
            subject: parent.ctx.subject.clone(),
            sigma: random_sigma(rng),
            subject_key: parent.ctx.subject_key,
            issuer: parent.ctx.subject.clone(),
            issuer_key: *sub_key,
            validity: parent.ctx.validity,
        },
        signature: Signature([0; 64]),
    };
    token.signature = sign(parent_subtoken_key, &token.signed_body());
    Ok(token)
}

/// A presented token with everything needed to verify it to a root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertChain {
    pub token: Token,
    /// Exemption tokens `token` was derived from, nearest first.
    pub parents: Vec<Token>,
    /// Issuing leaf first, root last.
    pub path: Vec<Certificate>,
}

impl CertChain {
    pub fn new(token: Token, path: Vec<Certificate>) -> Self {
        CertChain {
            token,
            parents: Vec::new(),
            path,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let parents: Vec<Vec<u8>> = self.parents.iter().map(Token::encode).collect();
        let path: Vec<Vec<u8>> = self.path.iter().map(Certificate::encode).collect();
        frame(&[self.token.encode(), frame(&parents), frame(&path)])
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PkiError> {
        let mut d = Decoder::new(bytes);
        let token = Token::decode(d.field()?)?;
        let parents = unframe(d.field()?)?
            .into_iter()
            .map(Token::decode)
            .collect::<Result<_, _>>()?;
        let path = unframe(d.field()?)?
            .into_iter()
            .map(Certificate::decode)
            .collect::<Result<_, _>>()?;
        d.finish()?;
        Ok(CertChain { token, parents, path })
    }

    /// Number of signed elements (tokens plus certificates).
    pub fn depth(&self) -> usize {
        1 + self.parents.len() + self.path.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RevocationList {
    pub revoked_sigma: BTreeSet<Sigma>,
    pub revoked_keys: BTreeSet<VerifyKey>,
}

impl RevocationList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn revoke_sigma(&mut self, sigma: Sigma) {
        self.revoked_sigma.insert(sigma);
    }

    pub fn revoke_key(&mut self, key: VerifyKey) {
        self.revoked_keys.insert(key);
    }

    pub fn is_revoked(&self, sigma: &Sigma, key: &VerifyKey) -> bool {
        self.revoked_sigma.contains(sigma) || self.revoked_keys.contains(key)
    }

    pub fn encode(&self) -> Vec<u8> {
        let sigmas: Vec<&[u8]> = self.revoked_sigma.iter().map(|s| s.as_slice()).collect();
        let keys: Vec<&[u8]> = self.revoked_keys.iter().map(|k| k.0.as_slice()).collect();
        frame(&[frame(&sigmas), frame(&keys)])
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let mut out = RevocationList::new();
        for s in unframe(d.field()?)? {
            out.revoke_sigma(s.try_into().map_err(|_| DecodeError::Invalid("sigma"))?);
        }
        for k in unframe(d.field()?)? {
            out.revoke_key(VerifyKey::from_slice(k).map_err(|_| DecodeError::Invalid("verify key"))?);
        }
        d.finish()?;
        Ok(out)
    }
}

/// Validates a certificate path (leaf-first, root-last, possibly a bare
/// root) against a pinned root. `base_depth` is the depth of `path[0]` in
/// the enclosing chain, used in error positions.
pub fn validate_certificate_path(
    path: &[Certificate],
    trusted_root: &Certificate,
    now: u64,
    revocations: &RevocationList,
    base_depth: usize,
) -> Result<(), PkiError> {
    check_path_structure(path, trusted_root, base_depth)?;
    check_status(path.iter().map(|c| &c.ctx), now, revocations, base_depth)
}

fn check_path_structure(path: &[Certificate], trusted_root: &Certificate, base_depth: usize) -> Result<(), PkiError> {
    let root = path.last().ok_or(PkiError::UntrustedRoot)?;
    if root.encode() != trusted_root.encode() {
        return Err(PkiError::UntrustedRoot);
    }
    let root_depth = base_depth + path.len() - 1;
    if !root.signature_valid_under(&root.ctx.subject_key) {
        return Err(PkiError::BadSignature(root_depth));
    }
    for i in (0..path.len() - 1).rev() {
        if !path[i].signature_valid_under(&path[i + 1].ctx.subject_key) {
            return Err(PkiError::BadSignature(base_depth + i));
        }
    }
    let expected_levels: &[Level] = match path.len() {
        1 => &[Level::Root],
        2 => &[Level::Intermediate, Level::Root],
        3 => &[Level::Leaf, Level::Intermediate, Level::Root],
        _ => return Err(PkiError::LevelViolation),
    };
    for (c, l) in path.iter().zip(expected_levels) {
        if c.desc.level != *l {
            return Err(PkiError::LevelViolation);
        }
        if c.desc.cert_type != root.desc.cert_type {
            return Err(PkiError::TypeMismatch);
        }
    }
    Ok(())
}

/// Expiry, then revocation, nearest element first.
fn check_status<'a>(
    elements: impl Iterator<Item = &'a Context> + Clone,
    now: u64,
    revocations: &RevocationList,
    base_depth: usize,
) -> Result<(), PkiError> {
    for (i, c) in elements.clone().enumerate() {
        if !c.validity.contains(now) {
            return Err(PkiError::Expired(base_depth + i));
        }
    }
    for (i, c) in elements.enumerate() {
        if revocations.is_revoked(&c.sigma, &c.subject_key) {
            return Err(PkiError::Revoked(base_depth + i));
        }
    }
    Ok(())
}

/// Validates `chain` down from the pinned `trusted_root`. Depth 0 is the
/// presented token.
pub fn validate_chain(
    chain: &CertChain,
    trusted_root: &Certificate,
    now: u64,
    revocations: &RevocationList,
) -> Result<(), PkiError> {
    let tokens: Vec<&Token> = std::iter::once(&chain.token).chain(&chain.parents).collect();
    let cert_base = tokens.len();
    if chain.path.len() != 3 {
        // Tokens come only from leaves, so a full path is always three long.
        if chain.path.last().map(Certificate::encode) != Some(trusted_root.encode()) {
            return Err(PkiError::UntrustedRoot);
        }
        return Err(PkiError::LevelViolation);
    }
    check_path_structure(&chain.path, trusted_root, cert_base)?;
    let leaf = &chain.path[0];

    // Signatures, from the token nearest the leaf down to the presented one.
    let mut issuer_key = leaf.ctx.subject_key;
    for depth in (0..tokens.len()).rev() {
        let t = tokens[depth];
        if !t.signature_valid_under(&issuer_key) {
            return Err(PkiError::BadSignature(depth));
        }
        if depth > 0 {
            issuer_key = match &t.payload {
                TokenPayload::Exemption {
                    subtoken_key: Some(k), ..
                } => *k,
                _ => return Err(PkiError::LevelViolation),
            };
        }
    }

    let outer = tokens[tokens.len() - 1];
    if outer.token_type().cert_type() != leaf.desc.cert_type {
        return Err(PkiError::TypeMismatch);
    }
    for pair in tokens.windows(2) {
        let (child, parent) = (pair[0], pair[1]);
        if child.token_type() != TokenType::Exemption {
            return Err(PkiError::TypeMismatch);
        }
        let (Some(cs), Some(ps)) = (child.exempt_sequences(), parent.exempt_sequences()) else {
            return Err(PkiError::TypeMismatch);
        };
        if !cs.iter().all(|s| ps.contains(s)) {
            return Err(PkiError::NotASubset);
        }
        if child.device_id() != parent.device_id() {
            return Err(PkiError::TypeMismatch);
        }
    }
    let contexts = tokens.iter().map(|t| &t.ctx).chain(chain.path.iter().map(|c| &c.ctx));
    check_status(contexts, now, revocations, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const V: Validity = Validity { start: 0, end: 1000 };

    struct Hierarchy {
        root: Issuer,
        inter: Issuer,
        leaf: Issuer,
    }

    fn hierarchy(ty: CertType, rng: &mut ChaCha20Rng) -> Hierarchy {
        let root = create_root(ty, Identity::new("F", "f@example.org"), V, rng);
        let inter = issue_subordinate(&root, Identity::new("I", "i@example.org"), Level::Intermediate, V, rng).unwrap();
        let leaf = issue_subordinate(&inter, Identity::new("L", "l@example.org"), Level::Leaf, V, rng).unwrap();
        Hierarchy { root, inter, leaf }
    }

    fn path(h: &Hierarchy) -> Vec<Certificate> {
        vec![h.leaf.cert.clone(), h.inter.cert.clone(), h.root.cert.clone()]
    }

    fn synth_chain(rng: &mut ChaCha20Rng) -> (Hierarchy, CertChain) {
        let h = hierarchy(CertType::Manufacturer, rng);
        let holder = KeyPair::generate(rng);
        let t = issue_token(
            &h.leaf,
            Identity::new("S", "s@example.org"),
            holder.verify_key(),
            TokenPayload::Synthesizer {
                synth_id: "S".into(),
                rate_limit: 100,
            },
            V,
            rng,
        )
        .unwrap();
        let chain = CertChain::new(t, path(&h));
        (h, chain)
    }

    #[test]
    fn root_is_self_signed_and_validates_alone() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let r = create_root(CertType::Manufacturer, Identity::new("F", "f@x"), V, &mut rng);
        assert!(verify(&r.cert.ctx.subject_key, &r.cert.signed_body(), &r.cert.signature));
        validate_certificate_path(std::slice::from_ref(&r.cert), &r.cert, 5, &RevocationList::new(), 0).unwrap();
    }

    #[test]
    fn roots_have_distinct_sigma() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let sigmas: BTreeSet<Sigma> = [CertType::Manufacturer, CertType::Infrastructure, CertType::Exemption]
            .into_iter()
            .map(|t| create_root(t, Identity::new("F", "f@x"), V, &mut rng).cert.sigma())
            .collect();
        assert_eq!(sigmas.len(), 3);
    }

    #[test]
    fn depth_three_chain_validates() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (h, chain) = synth_chain(&mut rng);
        validate_chain(&chain, &h.root.cert, 10, &RevocationList::new()).unwrap();
    }

    #[test]
    fn issuance_level_and_type_rules() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let h = hierarchy(CertType::Manufacturer, &mut rng);
        let k = KeyPair::generate(&mut rng).verify_key();
        let id = Identity::new("X", "x@x");
        assert_eq!(
            issue_certificate(&h.leaf, id.clone(), k, CertType::Manufacturer, Level::Leaf, V, &mut rng),
            Err(PkiError::LevelViolation)
        );
        assert_eq!(
            issue_certificate(&h.root, id.clone(), k, CertType::Manufacturer, Level::Leaf, V, &mut rng),
            Err(PkiError::LevelViolation)
        );
        let e = hierarchy(CertType::Exemption, &mut rng);
        assert_eq!(
            issue_certificate(&e.root, id.clone(), k, CertType::Manufacturer, Level::Intermediate, V, &mut rng),
            Err(PkiError::TypeMismatch)
        );
        assert_eq!(
            issue_token(&h.inter, id.clone(), k, TokenPayload::DatabaseInfra, V, &mut rng),
            Err(PkiError::LevelViolation)
        );
        assert_eq!(
            issue_token(&h.leaf, id, k, TokenPayload::DatabaseInfra, V, &mut rng),
            Err(PkiError::TypeMismatch)
        );
    }

    #[test]
    fn token_payload_shapes() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let m = hierarchy(CertType::Manufacturer, &mut rng);
        let i = hierarchy(CertType::Infrastructure, &mut rng);
        let e = hierarchy(CertType::Exemption, &mut rng);
        let k = KeyPair::generate(&mut rng).verify_key();
        let id = Identity::new("X", "x@x");
        let t = issue_token(
            &m.leaf,
            id.clone(),
            k,
            TokenPayload::Synthesizer {
                synth_id: "S".into(),
                rate_limit: u64::MAX,
            },
            V,
            &mut rng,
        )
        .unwrap();
        assert_eq!(Token::decode(&t.encode()).unwrap().rate_limit(), Some(u64::MAX));
        let t = issue_token(&i.leaf, id.clone(), k, TokenPayload::DatabaseInfra, V, &mut rng).unwrap();
        assert!(TokenPayload::encode(&t.payload).is_empty());
        let t = issue_token(
            &e.leaf,
            id,
            k,
            TokenPayload::Exemption {
                sequences: vec![b"AAA".to_vec()],
                device_id: "yubikey-7".into(),
                subtoken_key: None,
            },
            V,
            &mut rng,
        )
        .unwrap();
        assert_eq!(Token::decode(&t.encode()).unwrap().device_id(), Some("yubikey-7"));
    }

    fn elt_fixture(rng: &mut ChaCha20Rng, seqs: &[&[u8]]) -> (Hierarchy, Token, KeyPair) {
        let e = hierarchy(CertType::Exemption, rng);
        let sub = KeyPair::generate(rng);
        let t = issue_token(
            &e.leaf,
            Identity::new("C", "c@x"),
            KeyPair::generate(rng).verify_key(),
            TokenPayload::Exemption {
                sequences: seqs.iter().map(|s| s.to_vec()).collect(),
                device_id: "m".into(),
                subtoken_key: Some(sub.verify_key()),
            },
            V,
            rng,
        )
        .unwrap();
        (e, t, sub)
    }

    #[test]
    fn subtoken_issuance() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (e, parent, sub) = elt_fixture(&mut rng, &[b"A", b"B", b"C"]);
        let all = parent.exempt_sequences().unwrap().to_vec();
        let full = issue_subtoken(&parent, &sub, &all, None, &mut rng).unwrap();
        let empty = issue_subtoken(&parent, &sub, &[], None, &mut rng).unwrap();
        for t in [full, empty] {
            let chain = CertChain {
                token: t,
                parents: vec![parent.clone()],
                path: path(&e),
            };
            validate_chain(&chain, &e.root.cert, 1, &RevocationList::new()).unwrap();
        }
        assert_eq!(
            issue_subtoken(&parent, &sub, &[b"A".to_vec(), b"Z".to_vec()], None, &mut rng),
            Err(PkiError::NotASubset)
        );
        let leafless = issue_subtoken(&parent, &sub, &[b"A".to_vec()], None, &mut rng).unwrap();
        assert_eq!(
            issue_subtoken(&leafless, &sub, &[], None, &mut rng),
            Err(PkiError::NoSubtokenKey)
        );
    }

    #[test]
    fn revoking_token_sigma_gives_depth_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (h, chain) = synth_chain(&mut rng);
        let mut rl = RevocationList::new();
        rl.revoke_sigma(chain.token.sigma());
        assert_eq!(validate_chain(&chain, &h.root.cert, 1, &rl), Err(PkiError::Revoked(0)));
        let mut rl = RevocationList::new();
        rl.revoke_key(h.inter.cert.subject_key());
        assert_eq!(validate_chain(&chain, &h.root.cert, 1, &rl), Err(PkiError::Revoked(2)));
    }

    #[test]
    fn validity_is_a_closed_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (h, chain) = synth_chain(&mut rng);
        let rl = RevocationList::new();
        assert!(validate_chain(&chain, &h.root.cert, 0, &rl).is_ok());
        assert!(validate_chain(&chain, &h.root.cert, 1000, &rl).is_ok());
        assert_eq!(validate_chain(&chain, &h.root.cert, 1001, &rl), Err(PkiError::Expired(0)));
        assert_eq!(Validity::new(5, 5), Err(PkiError::InvalidValidity));
    }

    #[test]
    fn cross_hierarchy_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (_, chain) = synth_chain(&mut rng);
        let other = hierarchy(CertType::Infrastructure, &mut rng);
        assert_eq!(
            validate_chain(&chain, &other.root.cert, 1, &RevocationList::new()),
            Err(PkiError::UntrustedRoot)
        );
    }

    #[test]
    fn text_dump_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (h, chain) = synth_chain(&mut rng);
        for c in &chain.path {
            assert_eq!(&Certificate::from_text(&c.to_text()).unwrap(), c);
        }
        assert_eq!(Token::from_text(&chain.token.to_text()).unwrap(), chain.token);
        let (_, elt, _) = elt_fixture(&mut rng, &[b"ACGT", b""]);
        assert_eq!(Token::from_text(&elt.to_text()).unwrap(), elt);
        assert!(h.root.cert.to_text().lines().all(|l| l.contains(": ")));
    }

    #[test]
    fn chain_and_revocation_encodings_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let (_, chain) = synth_chain(&mut rng);
        assert_eq!(CertChain::decode(&chain.encode()).unwrap(), chain);
        let mut rl = RevocationList::new();
        rl.revoke_sigma([3; 16]);
        rl.revoke_key(chain.token.subject_key());
        assert_eq!(RevocationList::decode(&rl.encode()).unwrap(), rl);
    }

    #[test]
    fn forced_sigma_collides() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (_, chain) = synth_chain(&mut rng);
        let other = hierarchy(CertType::Manufacturer, &mut rng);
        let forged = issue_token_with_sigma(
            &other.leaf,
            Identity::new("X", "x@x"),
            KeyPair::generate(&mut rng).verify_key(),
            chain.token.payload.clone(),
            V,
            chain.token.sigma(),
        )
        .unwrap();
        assert_eq!(forged.sigma(), chain.token.sigma());
        validate_chain(&CertChain::new(forged, path(&other)), &other.root.cert, 1, &RevocationList::new()).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn subtoken_sets_shrink_along_paths(seed in any::<u64>(), masks in proptest::collection::vec(any::<u8>(), 3)) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let seqs: Vec<&[u8]> = vec![b"a", b"b", b"c", b"d", b"e", b"f", b"g", b"h"];
            let (e, root_tok, mut key) = elt_fixture(&mut rng, &seqs);
            let mut parents = vec![root_tok];
            for m in &masks {
                let current = parents[0].exempt_sequences().unwrap().to_vec();
                let subset: Vec<Vec<u8>> = current.iter().enumerate().filter(|(i, _)| m & (1 << i) != 0).map(|(_, s)| s.clone()).collect();
                let next = KeyPair::generate(&mut rng);
                let t = issue_subtoken(&parents[0], &key, &subset, Some(next.verify_key()), &mut rng).unwrap();
                for s in t.exempt_sequences().unwrap() {
                    for p in &parents {
                        prop_assert!(p.exempt_sequences().unwrap().contains(s));
                    }
                }
                parents.insert(0, t);
                key = next;
            }
            let token = parents.remove(0);
            let chain = CertChain { token, parents, path: path(&e) };
            prop_assert!(validate_chain(&chain, &e.root.cert, 1, &RevocationList::new()).is_ok());
        }
    }
}
