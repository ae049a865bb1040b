//! Hashing, signatures and the authenticated record cipher.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoding::frame;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("malformed key material")]
    MalformedKey,
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// SHA-256 over the canonical encoding of `fields`.
pub fn hash_fields<T: AsRef<[u8]>>(fields: &[T]) -> [u8; 32] {
    sha256(&frame(fields))
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VerifyKey(pub [u8; 32]);

impl VerifyKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn from_slice(b: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = b.try_into().map_err(|_| CryptoError::MalformedKey)?;
        VerifyingKey::from_bytes(&arr).map_err(|_| CryptoError::MalformedKey)?;
        Ok(VerifyKey(arr))
    }
}

impl fmt::Debug for VerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyKey({})", hex::encode(&self.0[..8]))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl Signature {
    pub fn as_bytes(&self) -> &[u8; 64] {
        &self.0
    }

    pub fn from_slice(b: &[u8]) -> Result<Self, CryptoError> {
        b.try_into().map(Signature).map_err(|_| CryptoError::MalformedKey)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

/// Long-term signing key and its public half.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyPair {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn verify_key(&self) -> VerifyKey {
        VerifyKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        sign(self, msg)
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("verify_key", &self.verify_key())
            .finish_non_exhaustive()
    }
}

/// Signs the SHA-256 digest of `msg`.
pub fn sign(key: &KeyPair, msg: &[u8]) -> Signature {
    Signature(key.signing.sign(&sha256(msg)).to_bytes())
}

/// Never panics; any mismatch or malformed key is `false`.
pub fn verify(key: &VerifyKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify_strict(&sha256(msg), &sig).is_ok()
}

#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey(pub [u8; 32]);

impl SymmetricKey {
    /// Short identifier for logs; the key itself never leaves the process.
    pub fn fingerprint(&self) -> String {
        hex::encode(&sha256(&self.0)[..6])
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymmetricKey(#{})", self.fingerprint())
    }
}

/// Length of the record header: tag, sequence number, ciphertext length.
pub const RECORD_HEADER_LEN: usize = 1 + 8 + 4;

/// Record header tag for application data flowing client to server.
pub const TAG_CLIENT_DATA: u8 = 0x01;
/// Record header tag for application data flowing server to client.
pub const TAG_SERVER_DATA: u8 = 0x02;

/// Seals `plaintext` into a record: `tag || seq (u64 BE) || len (u32 BE) || ciphertext`.
///
/// The nonce is derived from `tag` and `seq`; the whole header is
/// authenticated as associated data.
pub fn aead_seal(key: &SymmetricKey, tag: u8, seq: u64, plaintext: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let ct_len = plaintext.len() + 16;
    let header = record_header(tag, seq, ct_len as u32);
    let ct = cipher
        .encrypt(
            &record_nonce(tag, seq),
            Payload {
                msg: plaintext,
                aad: &header,
            },
        )
        .expect("chacha20poly1305 encryption is infallible for bounded inputs");
    let mut out = header.to_vec();
    out.extend_from_slice(&ct);
    out
}

/// Opens a record at the receiver's expected `seq`. Any mismatch of key,
/// sequence number, header or ciphertext is an `AuthenticationFailure`.
pub fn aead_open(key: &SymmetricKey, seq: u64, record: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let header = RecordHeader::parse(record).ok_or(CryptoError::AuthenticationFailure)?;
    if record.len() != RECORD_HEADER_LEN + header.len as usize {
        return Err(CryptoError::AuthenticationFailure);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    cipher
        .decrypt(
            &record_nonce(header.tag, seq),
            Payload {
                msg: &record[RECORD_HEADER_LEN..],
                aad: &record[..RECORD_HEADER_LEN],
            },
        )
        .map_err(|_| CryptoError::AuthenticationFailure)
}

/// Cleartext header fields of a record, as visible on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordHeader {
    pub tag: u8,
    pub seq: u64,
    pub len: u32,
}

impl RecordHeader {
    pub fn parse(record: &[u8]) -> Option<Self> {
        if record.len() < RECORD_HEADER_LEN {
            return None;
        }
        Some(RecordHeader {
            tag: record[0],
            seq: u64::from_be_bytes(record[1..9].try_into().unwrap()),
            len: u32::from_be_bytes(record[9..13].try_into().unwrap()),
        })
    }
}

fn record_header(tag: u8, seq: u64, len: u32) -> [u8; RECORD_HEADER_LEN] {
    let mut h = [0u8; RECORD_HEADER_LEN];
    h[0] = tag;
    h[1..9].copy_from_slice(&seq.to_be_bytes());
    h[9..13].copy_from_slice(&len.to_be_bytes());
    h
}

fn record_nonce(tag: u8, seq: u64) -> Nonce {
    let mut n = [0u8; 12];
    n[3] = tag;
    n[4..].copy_from_slice(&seq.to_be_bytes());
    *Nonce::from_slice(&n)
}
