//! Builds every long-term artifact of a scenario from one seed: the three
//! hierarchies, server identities, key shares, the hazard database and the
//! synthesizer's tokens.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::channel::{ChannelCa, ServerCredentials};
use crate::crypto::KeyPair;
use crate::doprf::{doprf_direct, share_key, KeyShare};
use crate::group::{Backend, Group, GroupElement, Scalar};
use crate::pki::{
    create_root, issue_subordinate, issue_token, issue_token_with_sigma, CertChain, CertType, Identity, Issuer, Level,
    RevocationList, Sigma, TokenPayload, Validity,
};
use crate::scep::{ScepVariant, TrustAnchor};
use crate::screening::{build_hdb, totp, AuthBackend, HazardDb, HazardRecord, DEFAULT_MAX_SEQUENCE_LEN};

use super::net::{NetCore, Sim};
use super::roles::{AuthRole, DatabaseConfig, DatabaseRole, KeyserverRole, ScepEndpoint, ServerIdentity};
use super::synth::{SynthConfig, Synthesizer};

pub const START_TIME: u64 = 1_700_000_000;
const VALID_UNTIL: u64 = START_TIME + 10 * 365 * 24 * 3600;

pub const SYNTH: &str = "S";
pub const DATABASE: &str = "H";
pub const AUTH: &str = "A";
pub const DEVICE: &str = "authenticator-S";

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub backend: Backend,
    pub variant: ScepVariant,
    pub resumption: bool,
    pub binding: bool,
    pub rate_limit: u64,
    pub threshold: usize,
    pub keyservers: usize,
    pub suppress_metadata: bool,
    pub max_sequence_len: usize,
    pub hazards: Vec<HazardRecord>,
    /// Extra database servers beyond `H` (named `H2`, `H3`, ...).
    pub extra_databases: usize,
    /// Sequences listed in `S`'s exemption token; the first hazard if
    /// unset.
    pub elt_sequences: Option<Vec<Vec<u8>>>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            backend: Backend::Test,
            variant: ScepVariant::Scep,
            resumption: false,
            binding: false,
            rate_limit: 100,
            threshold: 2,
            keyservers: 3,
            suppress_metadata: false,
            max_sequence_len: DEFAULT_MAX_SEQUENCE_LEN,
            hazards: default_hazards(),
            extra_databases: 0,
            elt_sequences: None,
        }
    }
}

pub fn default_hazards() -> Vec<HazardRecord> {
    [
        ("ACGTTGCAAGGCTTAACGGA", "toxin-a", "select agent toxin"),
        ("TTGACCGGTAACGTCATTGC", "toxin-b", "select agent toxin"),
        ("GGCATCGATCGGATCCAATG", "virulence-c", "virulence factor"),
    ]
    .iter()
    .map(|(s, n, r)| HazardRecord {
        sequence: s.as_bytes().to_vec(),
        name: n.to_string(),
        reason: r.to_string(),
    })
    .collect()
}

fn issue_synth(
    rng: &mut ChaCha20Rng,
    h: &Hierarchy,
    leaf: &Issuer,
    name: &str,
    sigma: Option<Sigma>,
    rate_limit: u64,
) -> SynthCredentials {
    let key = KeyPair::generate(rng);
    let subject = Identity::new(name, format!("{}@synth", name.to_lowercase()));
    let payload = TokenPayload::Synthesizer {
        synth_id: name.to_string(),
        rate_limit,
    };
    let token = match sigma {
        Some(s) => issue_token_with_sigma(leaf, subject, key.verify_key(), payload, validity(), s),
        None => issue_token(leaf, subject, key.verify_key(), payload, validity(), rng),
    }
    .expect("synthesizer token");
    SynthCredentials {
        chain: CertChain::new(token, h.path_via(leaf)),
        key,
    }
}

fn issue_elt(rng: &mut ChaCha20Rng, h: &Hierarchy, holder: &SynthCredentials, sequences: &[Vec<u8>]) -> CertChain {
    let token = issue_token(
        &h.leaf,
        holder.chain.token.ctx.subject.clone(),
        holder.key.verify_key(),
        TokenPayload::Exemption {
            sequences: sequences.to_vec(),
            device_id: DEVICE.to_string(),
            subtoken_key: None,
        },
        validity(),
        rng,
    )
    .expect("exemption token");
    CertChain::new(token, h.path())
}

pub struct Hierarchy {
    pub root: Issuer,
    pub intermediate: Issuer,
    pub leaf: Issuer,
}

impl Hierarchy {
    fn new(cert_type: CertType, label: &str, rng: &mut ChaCha20Rng) -> Self {
        let v = validity();
        let root = create_root(cert_type, Identity::new(format!("{label} root"), format!("root@{label}")), v, rng);
        let intermediate = issue_subordinate(
            &root,
            Identity::new(format!("{label} intermediate"), format!("int@{label}")),
            Level::Intermediate,
            v,
            rng,
        )
        .expect("intermediate");
        let leaf = issue_subordinate(
            &intermediate,
            Identity::new(format!("{label} leaf"), format!("leaf@{label}")),
            Level::Leaf,
            v,
            rng,
        )
        .expect("leaf");
        Hierarchy {
            root,
            intermediate,
            leaf,
        }
    }

    pub fn path(&self) -> Vec<crate::pki::Certificate> {
        self.path_via(&self.leaf)
    }

    pub fn path_via(&self, leaf: &Issuer) -> Vec<crate::pki::Certificate> {
        vec![leaf.cert.clone(), self.intermediate.cert.clone(), self.root.cert.clone()]
    }

    pub fn anchor(&self) -> TrustAnchor {
        TrustAnchor {
            root: self.root.cert.clone(),
            revocations: RevocationList::new(),
        }
    }
}

fn validity() -> Validity {
    Validity::new(0, VALID_UNTIL).expect("valid interval")
}

/// A synthesizer token and the key it certifies.
#[derive(Clone)]
pub struct SynthCredentials {
    pub chain: CertChain,
    pub key: KeyPair,
}

pub struct World {
    pub config: WorldConfig,
    pub group: Group,
    pub k: Scalar,
    pub shares: Vec<KeyShare>,
    pub hdb: HazardDb,
    pub channel_ca: ChannelCa,
    pub manufacturer: Hierarchy,
    pub infra: Hierarchy,
    pub exemption: Hierarchy,
    /// Keyservers and databases.
    pub servers: BTreeMap<String, ServerIdentity>,
    pub auth_creds: ServerCredentials,
    pub synth: SynthCredentials,
    /// Exemption token for `S`.
    pub elt: CertChain,
    pub device_secret: Vec<u8>,
    /// Sequences whose keyed hash misses the database.
    pub benign: Vec<Vec<u8>>,
    rng: ChaCha20Rng,
}

pub fn keyserver_name(i: usize) -> String {
    format!("K{i}")
}

pub fn database_name(i: usize) -> String {
    if i == 0 {
        DATABASE.to_string()
    } else {
        format!("H{}", i + 1)
    }
}

impl World {
    pub fn build(config: WorldConfig, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let group = Group::for_backend(config.backend);
        // Resample (a bounded number of times) until the hazards have
        // distinct keyed hashes, so plaintext truth and keyed-hash verdicts
        // coincide. Large lists in the small test group cannot satisfy this.
        let mut k = group.random_nonzero_scalar(&mut rng);
        for _ in 0..64 {
            let mut hs: Vec<GroupElement> = config.hazards.iter().map(|h| doprf_direct(&group, &h.sequence, &k)).collect();
            hs.sort();
            hs.dedup();
            if hs.len() == config.hazards.len() {
                break;
            }
            k = group.random_nonzero_scalar(&mut rng);
        }
        let shares = share_key(&group, &k, config.keyservers, config.threshold, &mut rng).expect("valid threshold");
        let hdb = build_hdb(&group, &config.hazards, &k);
        let benign = (0..10_000)
            .map(|i| format!("ATGCATGCAT{i:04}").into_bytes())
            .filter(|s| !hdb.contains(&doprf_direct(&group, s, &k)))
            .take(8)
            .collect();

        let channel_ca = ChannelCa::generate(&mut rng);
        let manufacturer = Hierarchy::new(CertType::Manufacturer, "manufacturer", &mut rng);
        let infra = Hierarchy::new(CertType::Infrastructure, "infrastructure", &mut rng);
        let exemption = Hierarchy::new(CertType::Exemption, "exemption", &mut rng);

        let mut servers = BTreeMap::new();
        let mut add_server = |name: String, payload: TokenPayload, rng: &mut ChaCha20Rng| {
            let creds = channel_ca.credentials(&name, rng);
            let key = KeyPair::generate(rng);
            let token = issue_token(
                &infra.leaf,
                Identity::new(name.clone(), format!("{}@infra", name.to_lowercase())),
                key.verify_key(),
                payload,
                validity(),
                rng,
            )
            .expect("infra token");
            servers.insert(
                name.clone(),
                ServerIdentity {
                    name,
                    creds,
                    chain: CertChain::new(token, infra.path()),
                    key,
                },
            );
        };
        for sh in &shares {
            add_server(keyserver_name(sh.index as usize), TokenPayload::KeyserverInfra { index: sh.index }, &mut rng);
        }
        for i in 0..=config.extra_databases {
            add_server(database_name(i), TokenPayload::DatabaseInfra, &mut rng);
        }
        let auth_creds = channel_ca.credentials(AUTH, &mut rng);
        let synth = issue_synth(&mut rng, &manufacturer, &manufacturer.leaf, SYNTH, None, config.rate_limit);
        let mut device_secret = vec![0u8; 20];
        rng.fill_bytes(&mut device_secret);
        let listed = match &config.elt_sequences {
            Some(l) => l.clone(),
            None => config.hazards.first().map(|h| vec![h.sequence.clone()]).unwrap_or_default(),
        };
        let elt = issue_elt(&mut rng, &exemption, &synth, &listed);
        World {
            config,
            group,
            k,
            shares,
            hdb,
            channel_ca,
            manufacturer,
            infra,
            exemption,
            servers,
            auth_creds,
            synth,
            elt,
            device_secret,
            benign,
            rng,
        }
    }

    /// A synthesizer token from the manufacturer leaf, optionally with a
    /// chosen σ.
    pub fn synth_credentials(&mut self, name: &str, sigma: Option<Sigma>) -> SynthCredentials {
        let leaf = &self.manufacturer.leaf;
        self.synth_credentials_under(leaf.clone(), name, sigma)
    }

    pub fn synth_credentials_under(&mut self, leaf: Issuer, name: &str, sigma: Option<Sigma>) -> SynthCredentials {
        issue_synth(&mut self.rng, &self.manufacturer, &leaf, name, sigma, self.config.rate_limit)
    }

    /// A second leaf in the manufacturer hierarchy.
    pub fn extra_manufacturer_leaf(&mut self, label: &str) -> Issuer {
        issue_subordinate(
            &self.manufacturer.intermediate,
            Identity::new(format!("{label} leaf"), format!("leaf@{label}")),
            Level::Leaf,
            validity(),
            &mut self.rng,
        )
        .expect("leaf")
    }

    pub fn issue_elt(&mut self, sequences: &[Vec<u8>]) -> CertChain {
        issue_elt(&mut self.rng, &self.exemption, &self.synth, sequences)
    }

    pub fn fresh_code(&self, now: u64) -> String {
        totp(&self.device_secret, now)
    }

    pub fn keyserver_names(&self) -> Vec<String> {
        self.shares.iter().map(|s| keyserver_name(s.index as usize)).collect()
    }

    /// Every role name a script may refer to.
    pub fn role_names(&self) -> Vec<String> {
        let mut v = vec![SYNTH.to_string(), AUTH.to_string()];
        v.extend(self.servers.keys().cloned());
        v
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            variant: self.config.variant,
            resumption: self.config.resumption,
            binding: self.config.binding,
            threshold: self.config.threshold,
            keyservers: self.keyserver_names(),
            database: DATABASE.to_string(),
            max_sequence_len: self.config.max_sequence_len,
        }
    }

    pub fn synthesizer(&self, name: &str, creds: &SynthCredentials) -> Synthesizer {
        Synthesizer::new(
            name,
            creds.chain.clone(),
            creds.key.clone(),
            self.channel_ca.verify_key(),
            self.infra.anchor(),
            self.exemption.anchor(),
            self.synth_config(),
        )
    }

    pub fn endpoint(&self, name: &str) -> ScepEndpoint {
        ScepEndpoint::new(
            self.servers[name].clone(),
            self.config.variant,
            self.manufacturer.anchor(),
            self.config.resumption,
        )
    }

    pub fn keyserver_role(&self, index: u32) -> KeyserverRole {
        let share = self.shares.iter().find(|s| s.index == index).expect("share").clone();
        KeyserverRole {
            ep: self.endpoint(&keyserver_name(index as usize)),
            share,
        }
    }

    pub fn database_role(&self, name: &str) -> DatabaseRole {
        DatabaseRole::new(
            self.endpoint(name),
            self.hdb.clone(),
            DatabaseConfig {
                exemption: self.exemption.anchor(),
                binding: self.config.binding,
                suppress_metadata: self.config.suppress_metadata,
                auth_server: AUTH.to_string(),
                channel_ca: self.channel_ca.verify_key(),
            },
        )
    }

    pub fn auth_role(&self) -> AuthRole {
        let mut backend = AuthBackend::new();
        backend.register(DEVICE, self.device_secret.clone());
        AuthRole::new(AUTH, self.auth_creds.clone(), backend)
    }

    /// A network with every honest server role registered. `skip` names
    /// roles the caller will register itself.
    pub fn sim(&mut self, skip: &[&str]) -> Sim {
        let seed = self.rng.next_u64();
        let mut sim = Sim::new(NetCore::new(self.group.clone(), seed, START_TIME));
        for sh in &self.shares {
            let name = keyserver_name(sh.index as usize);
            if !skip.contains(&name.as_str()) {
                sim.add_role(Box::new(self.keyserver_role(sh.index)));
            }
        }
        for i in 0..=self.config.extra_databases {
            let name = database_name(i);
            if !skip.contains(&name.as_str()) {
                sim.add_role(Box::new(self.database_role(&name)));
            }
        }
        if !skip.contains(&AUTH) {
            sim.add_role(Box::new(self.auth_role()));
        }
        sim
    }
}
