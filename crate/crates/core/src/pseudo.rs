//! Reversible pseudonymisation of identifying columns.
//!
//! Identifying cells are swapped for random tokens; the original <-> token
//! pairs go to a [`StoreHandle`] kept apart from the release. Tokens carry no
//! information about the value they replace, so a release is useless without
//! the store, while equal tokens still expose relationships (per-entity mode).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::identifier::validate_hi;
use crate::schema::{dataset_to_bytes, Dataset, FieldClass, SchemaDescriptor};
use crate::store::{MappingRow, StoreError, StoreHandle};

pub const TOKEN_ALPHABET: &[u8; 36] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
pub const MIN_TOKEN_LEN: usize = 3;
pub const MAX_TOKEN_LEN: usize = 16;
pub const DEFAULT_TOKEN_LEN: usize = 8;
const MANIFEST_FORMAT: &str = "pseudovault-manifest/1";
/// Shortest original value that must never appear inside a released cell.
pub const LEAK_MIN_LEN: usize = 4;
const MAX_DRAWS_PER_TOKEN: usize = 10_000;

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("{0}")]
    Config(String),
    #[error("record {record}: `{value}` in column `{column}` is not a valid healthcare identifier ({failures})")]
    InvalidHi {
        record: usize,
        column: String,
        value: String,
        failures: String,
    },
    #[error("token space exhausted for column `{0}`")]
    TokenSpaceExhausted(String),
    #[error("release was made at epoch {release} but the store is at epoch {store}; pass an explicit epoch")]
    EpochMismatch { release: u64, store: u64 },
    #[error("release belongs to store {release}, not {store}")]
    StoreMismatch { release: String, store: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid pseudonym `{0}`: expected 3-16 characters from [A-Z0-9]")]
    InvalidPseudonym(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PseudoError {
    pub fn code(&self) -> &'static str {
        match self {
            PseudoError::Config(_) => "CONFIG",
            PseudoError::InvalidHi { .. } => "INVALID_HI",
            PseudoError::TokenSpaceExhausted(_) => "TOKEN_SPACE_EXHAUSTED",
            PseudoError::EpochMismatch { .. } => "EPOCH_MISMATCH",
            PseudoError::StoreMismatch { .. } => "STORE_MISMATCH",
            PseudoError::Manifest(_) => "MANIFEST",
            PseudoError::InvalidPseudonym(_) => "INVALID_PSEUDONYM",
            PseudoError::Store(e) => e.code(),
        }
    }
}

/// A token of 3 to 16 characters over `[A-Z0-9]`, stored inline.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pseudonym {
    len: u8,
    bytes: [u8; MAX_TOKEN_LEN],
}

impl Pseudonym {
    pub fn new(token: &str) -> Result<Self, PseudoError> {
        let raw = token.as_bytes();
        let ok = (MIN_TOKEN_LEN..=MAX_TOKEN_LEN).contains(&raw.len())
            && raw.iter().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit());
        if !ok {
            return Err(PseudoError::InvalidPseudonym(token.to_owned()));
        }
        let mut bytes = [0u8; MAX_TOKEN_LEN];
        bytes[..raw.len()].copy_from_slice(raw);
        Ok(Self {
            len: raw.len() as u8,
            bytes,
        })
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.bytes[..usize::from(self.len)]).expect("ascii token")
    }

    pub fn len(&self) -> usize {
        usize::from(self.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl fmt::Debug for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pseudonym({})", self.as_str())
    }
}

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pseudonym {
    type Err = PseudoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pseudonym::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Fresh token for every cell; rows of one patient cannot be joined.
    PerOccurrence,
    /// One token per distinct original; equality between cells is preserved.
    #[default]
    PerEntity,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PerOccurrence => "PER_OCCURRENCE",
            Mode::PerEntity => "PER_ENTITY",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "PER_OCCURRENCE" => Ok(Mode::PerOccurrence),
            "PER_ENTITY" => Ok(Mode::PerEntity),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudonymPolicy {
    pub mode: Mode,
    pub token_length: usize,
    pub seed: Option<u64>,
    pub columns: Vec<String>,
    /// Columns whose cells must be Luhn-valid healthcare identifiers.
    pub hi_columns: Vec<String>,
    pub allow_invalid_hi: bool,
}

impl PseudonymPolicy {
    pub fn new<I, S>(mode: Mode, columns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            mode,
            token_length: DEFAULT_TOKEN_LEN,
            seed: None,
            columns: columns.into_iter().map(Into::into).collect(),
            hi_columns: Vec::new(),
            allow_invalid_hi: false,
        }
    }

    /// Key-value policy file:
    ///
    /// ```text
    /// mode = PER_ENTITY
    /// token_length = 8
    /// seed = 42
    /// column = Healthcare Identifier
    /// column = Name
    /// hi_column = Healthcare Identifier
    /// ```
    pub fn parse(text: &str) -> Result<Self, PseudoError> {
        let mut p = PseudonymPolicy::new(Mode::default(), Vec::<String>::new());
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: String| PseudoError::Config(format!("policy line {}: {m}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad("expected `key = value`".into()))?;
            let v = v.trim();
            match k.trim() {
                "mode" => p.mode = v.parse().map_err(bad)?,
                "token_length" => p.token_length = v.parse().map_err(|_| bad(format!("bad token_length `{v}`")))?,
                "seed" => p.seed = Some(v.parse().map_err(|_| bad(format!("bad seed `{v}`")))?),
                "column" => p.columns.push(v.to_owned()),
                "hi_column" => p.hi_columns.push(v.to_owned()),
                "allow_invalid_hi" => p.allow_invalid_hi = v.parse().map_err(|_| bad(format!("bad boolean `{v}`")))?,
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        Ok(p)
    }

    fn validate(&self, schema: &SchemaDescriptor) -> Result<(), PseudoError> {
        if self.columns.is_empty() {
            return Err(PseudoError::Config("policy names no columns".into()));
        }
        if !(MIN_TOKEN_LEN..=MAX_TOKEN_LEN).contains(&self.token_length) {
            return Err(PseudoError::Config(format!(
                "token_length must be within {MIN_TOKEN_LEN}..={MAX_TOKEN_LEN}, got {}",
                self.token_length
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.columns {
            let col = schema
                .column(c)
                .ok_or_else(|| PseudoError::Config(format!("unknown column `{c}`")))?;
            if col.class != FieldClass::Identifying {
                return Err(PseudoError::Config(format!(
                    "column `{c}` is {} not IDENTIFYING",
                    col.class
                )));
            }
            if !seen.insert(c) {
                return Err(PseudoError::Config(format!("column `{c}` listed twice")));
            }
        }
        for c in &self.hi_columns {
            if !self.columns.contains(c) {
                return Err(PseudoError::Config(format!(
                    "hi_column `{c}` is not a pseudonymised column"
                )));
            }
        }
        Ok(())
    }
}

/// Draws uniform tokens over [`TOKEN_ALPHABET`].
pub struct TokenSource {
    rng: ChaCha20Rng,
    length: usize,
}

impl TokenSource {
    pub fn new(length: usize, seed: Option<u64>) -> Self {
        let rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_os_rng(),
        };
        Self { rng, length }
    }

    pub fn draw(&mut self) -> Pseudonym {
        let mut buf = [0u8; MAX_TOKEN_LEN];
        for b in &mut buf[..self.length] {
            *b = TOKEN_ALPHABET[self.rng.random_range(0..TOKEN_ALPHABET.len())];
        }
        Pseudonym {
            len: self.length as u8,
            bytes: buf,
        }
    }

    /// Number of distinct tokens of this length.
    pub fn space(&self) -> u128 {
        36u128.pow(self.length as u32)
    }
}

/// Salt for a store created alongside a seeded run, so seeded runs against
/// fresh stores produce identical store files.
pub fn derive_store_salt(seed: u64) -> [u8; 16] {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut salt = [0u8; 16];
    rng.fill(&mut salt[..]);
    salt
}

/// Per-column issuing state: rejects collisions, self-maps and leaks.
struct Issuer<'a> {
    column: &'a str,
    taken: &'a dyn Fn(&Pseudonym) -> bool,
    issued: HashSet<Pseudonym>,
    budget: u128,
    /// Originals short enough to fit inside a token.
    forbidden: &'a HashSet<String>,
}

impl Issuer<'_> {
    fn issue(&mut self, tokens: &mut TokenSource, original: &str) -> Result<Pseudonym, PseudoError> {
        if self.issued.len() as u128 >= self.budget {
            return Err(PseudoError::TokenSpaceExhausted(self.column.to_owned()));
        }
        for _ in 0..MAX_DRAWS_PER_TOKEN {
            let t = tokens.draw();
            if t.as_str() == original
                || self.issued.contains(&t)
                || (self.taken)(&t)
                || leaks(t.as_str(), self.forbidden)
            {
                continue;
            }
            self.issued.insert(t);
            return Ok(t);
        }
        Err(PseudoError::TokenSpaceExhausted(self.column.to_owned()))
    }
}

fn leaks(token: &str, forbidden: &HashSet<String>) -> bool {
    if forbidden.is_empty() {
        return false;
    }
    let n = token.len();
    (0..n).any(|start| (start + LEAK_MIN_LEN..=n).any(|end| forbidden.contains(&token[start..end])))
}

fn issue_budget(store: &StoreHandle, column: &str, tokens: &TokenSource) -> u128 {
    let used = store.table(column).map_or(0, |t| t.len()) as u128;
    (tokens.space() / 2).saturating_sub(used)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub source: String,
    pub records: usize,
    pub mode: Mode,
    pub token_length: usize,
    pub seed: Option<u64>,
    pub epoch: u64,
    pub store_id: String,
    pub release_sha256: String,
    pub columns: Vec<String>,
    pub hi_columns: Vec<String>,
    pub schema: SchemaDescriptor,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "format = {MANIFEST_FORMAT}\nsource = {}\nrecords = {}\nmode = {}\ntoken_length = {}\n",
            self.source, self.records, self.mode, self.token_length
        );
        if let Some(seed) = self.seed {
            s.push_str(&format!("seed = {seed}\n"));
        }
        s.push_str(&format!(
            "epoch = {}\nstore_id = {}\nrelease_sha256 = {}\n",
            self.epoch, self.store_id, self.release_sha256
        ));
        for c in &self.columns {
            s.push_str(&format!("pseudonymised = {c}\n"));
        }
        for c in &self.hi_columns {
            s.push_str(&format!("hi_column = {c}\n"));
        }
        for c in self.schema.columns() {
            s.push_str(&format!("schema = {} = {},{}\n", c.name, c.class, c.kind));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, PseudoError> {
        let bad = |m: String| PseudoError::Manifest(m);
        let mut format = None;
        let mut source = None;
        let mut records = None;
        let mut mode = None;
        let mut token_length = None;
        let mut seed = None;
        let mut epoch = None;
        let mut store_id = None;
        let mut digest = None;
        let mut columns = Vec::new();
        let mut hi_columns = Vec::new();
        let mut profile = String::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("bad line `{line}`")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("`{k}` is not a number")));
            match k {
                "format" => format = Some(v.to_owned()),
                "source" => source = Some(v.to_owned()),
                "records" => records = Some(num(v)? as usize),
                "mode" => mode = Some(v.parse::<Mode>().map_err(bad)?),
                "token_length" => token_length = Some(num(v)? as usize),
                "seed" => seed = Some(num(v)?),
                "epoch" => epoch = Some(num(v)?),
                "store_id" => store_id = Some(v.to_owned()),
                "release_sha256" => digest = Some(v.to_owned()),
                "pseudonymised" => columns.push(v.to_owned()),
                "hi_column" => hi_columns.push(v.to_owned()),
                "schema" => {
                    profile.push_str(v);
                    profile.push('\n');
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        if format.as_deref() != Some(MANIFEST_FORMAT) {
            return Err(bad("unsupported manifest format".into()));
        }
        let missing = |k: &str| bad(format!("missing `{k}`"));
        Ok(Manifest {
            source: source.ok_or_else(|| missing("source"))?,
            records: records.ok_or_else(|| missing("records"))?,
            mode: mode.ok_or_else(|| missing("mode"))?,
            token_length: token_length.ok_or_else(|| missing("token_length"))?,
            seed,
            epoch: epoch.ok_or_else(|| missing("epoch"))?,
            store_id: store_id.ok_or_else(|| missing("store_id"))?,
            release_sha256: digest.ok_or_else(|| missing("release_sha256"))?,
            columns,
            hi_columns,
            schema: SchemaDescriptor::parse_profile(&profile).map_err(|e| bad(e.to_string()))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreRef {
    pub root: PathBuf,
    pub epoch: u64,
}

#[derive(Debug, Clone)]
pub struct ReleaseBundle {
    pub released: Dataset,
    pub store_ref: StoreRef,
    pub manifest: Manifest,
    /// The released dataset serialised as CSV; `manifest.release_sha256`
    /// is the digest of exactly these bytes.
    pub csv: Vec<u8>,
    pub warnings: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Replaces every cell of the policy columns with a token and records the
/// mappings in `store`, which must be open for writing. Takes the dataset by
/// value; identifying values move into the store rather than being copied.
pub fn pseudonymise(
    mut d: Dataset,
    policy: &PseudonymPolicy,
    store: &mut StoreHandle,
) -> Result<ReleaseBundle, PseudoError> {
    policy.validate(&d.schema)?;
    let col_idx: Vec<usize> = policy
        .columns
        .iter()
        .map(|c| d.schema.index_of(c).expect("validated"))
        .collect();

    let mut warnings = Vec::new();
    for c in &policy.hi_columns {
        let ci = d.schema.index_of(c).expect("validated");
        for (ri, cell) in d.column_cells(ci).enumerate() {
            let report = validate_hi(cell);
            if report.is_valid() {
                continue;
            }
            let failures = report.failures.iter().map(|f| f.code()).collect::<Vec<_>>().join(",");
            if !policy.allow_invalid_hi {
                return Err(PseudoError::InvalidHi {
                    record: ri,
                    column: c.clone(),
                    value: cell.to_owned(),
                    failures,
                });
            }
            warnings.push(format!(
                "record {ri}: column `{c}` holds an invalid identifier ({failures})"
            ));
        }
    }

    let forbidden: HashSet<String> = col_idx
        .iter()
        .flat_map(|&ci| d.column_cells(ci))
        .filter(|v| (LEAK_MIN_LEN..=policy.token_length).contains(&v.chars().count()))
        .map(str::to_owned)
        .collect();

    let epoch = store.epoch();
    let mut tokens = TokenSource::new(policy.token_length, policy.seed);
    for (&ci, column) in col_idx.iter().zip(&policy.columns) {
        let table = store.table(column);
        let taken = |t: &Pseudonym| table.is_some_and(|tb| tb.contains_token(t));
        let mut issuer = Issuer {
            column,
            taken: &taken,
            issued: HashSet::new(),
            budget: issue_budget(store, column, &tokens),
            forbidden: &forbidden,
        };
        let mut rows = Vec::new();
        match policy.mode {
            Mode::PerEntity => {
                let mut assigned: HashMap<String, Pseudonym> = HashMap::new();
                for record in d.records.iter_mut() {
                    let cell = &mut record[ci];
                    let token = match assigned.get(cell.as_str()) {
                        Some(t) => *t,
                        None => {
                            let t = match table.and_then(|tb| tb.active_entity_token(cell)) {
                                Some(existing) => *existing,
                                None => {
                                    let t = issuer.issue(&mut tokens, cell)?;
                                    rows.push(MappingRow {
                                        epoch,
                                        active: true,
                                        original: cell.clone(),
                                        pseudonym: t,
                                        occurrence: None,
                                    });
                                    t
                                }
                            };
                            assigned.insert(cell.clone(), t);
                            t
                        }
                    };
                    *cell = token.as_str().to_owned();
                }
            }
            Mode::PerOccurrence => {
                rows.reserve(d.records.len());
                for (ri, record) in d.records.iter_mut().enumerate() {
                    let t = issuer.issue(&mut tokens, &record[ci])?;
                    let original = std::mem::replace(&mut record[ci], t.as_str().to_owned());
                    rows.push(MappingRow {
                        epoch,
                        active: true,
                        original,
                        pseudonym: t,
                        occurrence: Some(ri as u64),
                    });
                }
            }
        }
        store.put_entries(column, rows)?;
    }

    let csv = dataset_to_bytes(&d);
    let manifest = Manifest {
        source: d.source_id.clone(),
        records: d.len(),
        mode: policy.mode,
        token_length: policy.token_length,
        seed: policy.seed,
        epoch,
        store_id: store.store_id(),
        release_sha256: sha256_hex(&csv),
        columns: policy.columns.clone(),
        hi_columns: policy.hi_columns.clone(),
        schema: d.schema.clone(),
    };
    Ok(ReleaseBundle {
        released: d,
        store_ref: StoreRef {
            root: store.root().to_owned(),
            epoch,
        },
        manifest,
        csv,
        warnings,
    })
}

/// Restores the original identifying values of a release. Without an
/// explicit `epoch` the release must be from the store's current epoch.
pub fn reidentify(
    released: &Dataset,
    manifest: &Manifest,
    store: &StoreHandle,
    epoch: Option<u64>,
) -> Result<Dataset, PseudoError> {
    if manifest.store_id != store.store_id() {
        return Err(PseudoError::StoreMismatch {
            release: manifest.store_id.clone(),
            store: store.store_id(),
        });
    }
    if released.schema != manifest.schema {
        return Err(PseudoError::Config("release columns differ from its manifest".into()));
    }
    if epoch.is_none() && manifest.epoch != store.epoch() {
        return Err(PseudoError::EpochMismatch {
            release: manifest.epoch,
            store: store.epoch(),
        });
    }
    let mut out = released.clone();
    for column in &manifest.columns {
        let ci = out
            .schema
            .index_of(column)
            .ok_or_else(|| PseudoError::Config(format!("unknown column `{column}`")))?;
        for record in out.records.iter_mut() {
            let original = store.get_by_token(column, &record[ci], epoch)?;
            record[ci] = original.to_owned();
        }
    }
    Ok(out)
}

/// Resolves a single token against the current epoch.
pub fn lookup_token<'s>(store: &'s StoreHandle, column: &str, token: &str) -> Result<&'s str, PseudoError> {
    Ok(store.get_by_token(column, token, None)?)
}

/// Reissues every active token in `columns` under a new epoch. Superseded
/// tokens stay in the store and keep resolving for their own epochs.
pub fn rotate(store: &mut StoreHandle, columns: &[String], seed: Option<u64>) -> Result<u64, PseudoError> {
    let next = store.epoch() + 1;
    let mut batches = Vec::new();
    for column in columns {
        let Some(table) = store.table(column) else {
            continue;
        };
        let active: Vec<_> = table.active_entries().collect();
        if active.is_empty() {
            continue;
        }
        let token_length = active[0].pseudonym.len();
        let mut tokens = TokenSource::new(token_length, seed.map(|s| s ^ next));
        let forbidden: HashSet<String> = active
            .iter()
            .map(|e| e.original.as_str())
            .filter(|v| (LEAK_MIN_LEN..=token_length).contains(&v.chars().count()))
            .map(str::to_owned)
            .collect();
        let taken = |t: &Pseudonym| table.contains_token(t);
        let mut issuer = Issuer {
            column,
            taken: &taken,
            issued: HashSet::new(),
            budget: issue_budget(store, column, &tokens),
            forbidden: &forbidden,
        };
        let mut rows = Vec::with_capacity(active.len() * 2);
        for e in active {
            let fresh = issuer.issue(&mut tokens, &e.original)?;
            rows.push(MappingRow {
                epoch: next,
                active: false,
                original: e.original.clone(),
                pseudonym: e.pseudonym,
                occurrence: e.occurrence,
            });
            rows.push(MappingRow {
                epoch: next,
                active: true,
                original: e.original.clone(),
                pseudonym: fresh,
                occurrence: e.occurrence,
            });
        }
        batches.push((column.clone(), rows));
    }
    if store.lock_state() != crate::store::LockState::Exclusive {
        return Err(StoreError::Lock("store handle is not opened for writing".into()).into());
    }
    for (column, rows) in batches {
        store.put_entries(&column, rows)?;
    }
    Ok(store.advance_epoch()?)
}
