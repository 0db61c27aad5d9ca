//! The secure mapping store: original <-> pseudonym tables kept in a directory
//! apart from any release.
//!
//! Layout:
//!
//! ```text
//! <root>/header                     key = value lines, sealed
//! <root>/lock                       advisory lock target
//! <root>/<slug>-<crc>.csv           one append-only table per mapped column
//! ```
//!
//! A table file is CSV with the columns `epoch,active,original,pseudonym,occurrence`.
//! Every write batch ends with a seal line `# crc32: xxxxxxxx` holding the
//! CRC-32 of all bytes before it, so the last line of a file always checks
//! the whole file. Rows are never rewritten. A row with `active = false`
//! retires the token it names as of its epoch.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{self, Write};
use std::path::{Component, Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pseudo::Pseudonym;

const FORMAT: &str = "pseudovault-store/1";
const HEADER_FILE: &str = "header";
const LOCK_FILE: &str = "lock";
const TABLE_HEADER: &str = "epoch,active,original,pseudonym,occurrence\n";
const SEAL_PREFIX: &[u8] = b"# crc32: ";
const SEAL_LEN: usize = SEAL_PREFIX.len() + 8 + 1;
pub const MIN_SECRET_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store already exists at {0}")]
    Exists(PathBuf),
    #[error("credential rejected")]
    Auth,
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{0}")]
    Lock(String),
    #[error("no token `{token}` in table `{column}`")]
    UnknownToken { column: String, token: String },
    #[error("secret must be at least {MIN_SECRET_LEN} characters")]
    WeakCredential,
    #[error("table `{column}`: {reason}")]
    InvalidRow { column: String, reason: String },
    #[error("store {store} and release {release} overlap")]
    Colocation { store: PathBuf, release: PathBuf },
    #[error("invalid column name `{0}`")]
    BadColumn(String),
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Exists(_) => "EXISTS",
            StoreError::Auth => "AUTH",
            StoreError::Corrupt { .. } => "CORRUPT",
            StoreError::Lock(_) => "LOCK",
            StoreError::UnknownToken { .. } => "UNKNOWN_TOKEN",
            StoreError::WeakCredential => "CREDENTIAL",
            StoreError::InvalidRow { .. } => "INVALID_ROW",
            StoreError::Colocation { .. } => "STORE_COLOCATION",
            StoreError::BadColumn(_) => "CONFIG",
            StoreError::Write { .. } => "STORE_WRITE",
            StoreError::Io { .. } => "IO",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Write {
        path: path.to_owned(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> StoreError {
    StoreError::Corrupt {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

/// Shared secret guarding the store. Never written anywhere in clear.
#[derive(Clone)]
pub struct Credential(String);

impl Credential {
    pub fn new(secret: impl Into<String>) -> Result<Self, StoreError> {
        let secret = secret.into();
        if secret.chars().count() < MIN_SECRET_LEN {
            return Err(StoreError::WeakCredential);
        }
        Ok(Self(secret))
    }

    fn digest(&self, salt: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(salt);
        h.update(self.0.as_bytes());
        h.finalize().into()
    }
}

impl std::fmt::Debug for Credential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Credential(<redacted>)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockState {
    None,
    Shared,
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
}

/// One row as written to a table file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingRow {
    pub epoch: u64,
    pub active: bool,
    pub original: String,
    pub pseudonym: Pseudonym,
    pub occurrence: Option<u64>,
}

/// A token and its history, folded from the rows that mention it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingEntry {
    pub original: String,
    pub pseudonym: Pseudonym,
    pub active: bool,
    /// Epoch the token was issued in.
    pub epoch: u64,
    /// Epoch from which the token no longer resolves by default.
    pub retired: Option<u64>,
    /// Record ordinal within its release, for per-occurrence tokens.
    pub occurrence: Option<u64>,
}

impl MappingEntry {
    pub fn valid_at(&self, epoch: u64) -> bool {
        self.epoch <= epoch && self.retired.is_none_or(|r| epoch < r)
    }
}

#[derive(Debug, Clone)]
pub struct MappingTable {
    pub column: String,
    file_name: String,
    entries: Vec<MappingEntry>,
    by_token: HashMap<Pseudonym, usize>,
    active_by_original: HashMap<String, usize>,
    crc: crc32fast::Hasher,
    file_len: u64,
}

impl MappingTable {
    fn empty(column: &str, file_name: String) -> Self {
        Self {
            column: column.to_owned(),
            file_name,
            entries: Vec::new(),
            by_token: HashMap::new(),
            active_by_original: HashMap::new(),
            crc: crc32fast::Hasher::new(),
            file_len: 0,
        }
    }

    pub fn file_name(&self) -> &str {
        &self.file_name
    }

    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    pub fn active_entries(&self) -> impl Iterator<Item = &MappingEntry> {
        self.entries.iter().filter(|e| e.active)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_token(&self, token: &Pseudonym) -> bool {
        self.by_token.contains_key(token)
    }

    pub fn by_token(&self, token: &str) -> Option<&MappingEntry> {
        let t = Pseudonym::new(token).ok()?;
        self.by_token.get(&t).map(|&i| &self.entries[i])
    }

    /// The active per-entity token for `original`, if any.
    pub fn active_entity_token(&self, original: &str) -> Option<&Pseudonym> {
        self.active_by_original
            .get(original)
            .map(|&i| &self.entries[i].pseudonym)
    }

    /// Checks a batch of rows against the table and against each other:
    /// tokens are issued once, retired at most once, and per-entity
    /// originals hold at most one active token.
    fn check_batch(&self, rows: &[MappingRow]) -> Result<(), String> {
        // token -> (original, per-entity, active) for tokens touched by the batch
        let mut overlay: HashMap<Pseudonym, (&str, bool, bool)> = HashMap::new();
        let mut entity_active: HashMap<&str, bool> = HashMap::new();
        for row in rows {
            let known = overlay.get(&row.pseudonym).copied().or_else(|| {
                self.by_token.get(&row.pseudonym).map(|&i| {
                    let e = &self.entries[i];
                    (e.original.as_str(), e.occurrence.is_none(), e.active)
                })
            });
            let entity = row.occurrence.is_none();
            if row.active {
                if known.is_some() {
                    return Err(format!("token `{}` issued twice", row.pseudonym));
                }
                if entity {
                    let has_active = entity_active
                        .get(row.original.as_str())
                        .copied()
                        .unwrap_or_else(|| self.active_by_original.contains_key(&row.original));
                    if has_active {
                        return Err(format!("a second active token `{}` for one original", row.pseudonym));
                    }
                    entity_active.insert(&row.original, true);
                }
                overlay.insert(row.pseudonym, (&row.original, entity, true));
            } else {
                match known {
                    None => return Err(format!("retiring unknown token `{}`", row.pseudonym)),
                    Some((_, _, false)) => return Err(format!("token `{}` retired twice", row.pseudonym)),
                    Some((original, was_entity, true)) => {
                        if was_entity {
                            entity_active.insert(original, false);
                        }
                        overlay.insert(row.pseudonym, (original, was_entity, false));
                    }
                }
            }
        }
        Ok(())
    }

    fn apply(&mut self, row: MappingRow) {
        if row.active {
            let i = self.entries.len();
            self.by_token.insert(row.pseudonym, i);
            if row.occurrence.is_none() {
                self.active_by_original.insert(row.original.clone(), i);
            }
            self.entries.push(MappingEntry {
                original: row.original,
                pseudonym: row.pseudonym,
                active: true,
                epoch: row.epoch,
                retired: None,
                occurrence: row.occurrence,
            });
        } else {
            let i = self.by_token[&row.pseudonym];
            let e = &mut self.entries[i];
            e.active = false;
            e.retired = Some(row.epoch);
            if e.occurrence.is_none() && self.active_by_original.get(&e.original) == Some(&i) {
                self.active_by_original.remove(&e.original);
            }
        }
    }
}

/// Two-column view of one mapping table, active entries only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedTable {
    pub column: String,
    pub rows: Vec<(String, String)>,
}

#[derive(Debug)]
pub struct StoreHandle {
    root: PathBuf,
    epoch: u64,
    salt: [u8; 16],
    credential_digest: [u8; 32],
    lock_state: LockState,
    lock_file: File,
    tables: Vec<MappingTable>,
}

fn hex_array<const N: usize>(s: &str) -> Option<[u8; N]> {
    let mut out = [0u8; N];
    hex::decode_to_slice(s, &mut out).ok()?;
    Some(out)
}

fn seal(crc: u32) -> String {
    format!("# crc32: {crc:08x}\n")
}

/// Checks the trailing seal of a file and returns the body before it.
fn verify_sealed<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a [u8], StoreError> {
    if bytes.len() < SEAL_LEN {
        return Err(corrupt(path, "missing checksum line"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - SEAL_LEN);
    let hex = trailer
        .strip_prefix(SEAL_PREFIX)
        .and_then(|t| t.strip_suffix(b"\n"))
        .filter(|h| h.iter().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')))
        .ok_or_else(|| corrupt(path, "malformed checksum line"))?;
    let stored = u32::from_str_radix(std::str::from_utf8(hex).expect("ascii"), 16).expect("8 hex digits");
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(corrupt(
            path,
            format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
        ));
    }
    Ok(body)
}

/// File name for a column's table: a readable slug plus a hash of the exact name.
pub fn table_file_name(column: &str) -> String {
    let slug: String = column
        .chars()
        .take(40)
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("{slug}-{:08x}.csv", crc32fast::hash(column.as_bytes()))
}

fn acquire(file: &File, root: &Path, access: Access) -> Result<LockState, StoreError> {
    let (res, state) = match access {
        Access::Read => (file.try_lock_shared(), LockState::Shared),
        Access::Write => (file.try_lock(), LockState::Exclusive),
    };
    match res {
        Ok(()) => Ok(state),
        Err(TryLockError::WouldBlock) => Err(StoreError::Lock(format!(
            "store {} is locked by another process",
            root.display()
        ))),
        Err(TryLockError::Error(e)) => Err(io_err(root)(e)),
    }
}

/// Creates a new store at `root`, which must be absent or an empty directory.
/// The parent directory must already exist.
pub fn init_store(root: &Path, credential: &Credential) -> Result<StoreHandle, StoreError> {
    let mut salt = [0u8; 16];
    rand::Rng::fill(&mut rand::rng(), &mut salt[..]);
    init_store_with_salt(root, credential, salt)
}

pub fn init_store_with_salt(root: &Path, credential: &Credential, salt: [u8; 16]) -> Result<StoreHandle, StoreError> {
    match fs::read_dir(root) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(StoreError::Exists(root.to_owned()));
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            fs::create_dir(root).map_err(io_err(root))?;
        }
        Err(e) => return Err(io_err(root)(e)),
    }
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(root, fs::Permissions::from_mode(0o700)).map_err(io_err(root))?;
    }
    let root = fs::canonicalize(root).map_err(io_err(root))?;
    let lock_path = root.join(LOCK_FILE);
    let lock_file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lock_path)
        .map_err(io_err(&lock_path))?;
    let lock_state = acquire(&lock_file, &root, Access::Write)?;
    let handle = StoreHandle {
        root,
        epoch: 1,
        salt,
        credential_digest: credential.digest(&salt),
        lock_state,
        lock_file,
        tables: Vec::new(),
    };
    handle.write_header()?;
    Ok(handle)
}

/// Opens an existing store, verifying every checksum and the credential.
/// `Access::Read` takes a shared lock, `Access::Write` an exclusive one; both
/// fail immediately with `LOCK` when contended.
pub fn open_store(root: &Path, credential: &Credential, access: Access) -> Result<StoreHandle, StoreError> {
    let root = fs::canonicalize(root).map_err(io_err(root))?;
    let lock_path = root.join(LOCK_FILE);
    let lock_file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lock_path)
        .map_err(io_err(&lock_path))?;
    let lock_state = acquire(&lock_file, &root, access)?;

    let header_path = root.join(HEADER_FILE);
    let bytes = fs::read(&header_path).map_err(io_err(&header_path))?;
    let body = verify_sealed(&header_path, &bytes)?;
    let text = std::str::from_utf8(body).map_err(|_| corrupt(&header_path, "header is not UTF-8"))?;

    let mut format = None;
    let mut epoch = None;
    let mut salt = None;
    let mut digest = None;
    let mut table_refs: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| corrupt(&header_path, format!("bad header line `{line}`")))?;
        match k {
            "format" => format = Some(v),
            "epoch" => epoch = v.parse::<u64>().ok().filter(|&e| e >= 1),
            "salt" => salt = hex_array::<16>(v),
            "credential" => digest = hex_array::<32>(v),
            "table" => {
                let (file, column) = v
                    .split_once(' ')
                    .ok_or_else(|| corrupt(&header_path, "bad table line"))?;
                table_refs.push((file.to_owned(), column.to_owned()));
            }
            _ => return Err(corrupt(&header_path, format!("unknown header key `{k}`"))),
        }
    }
    if format != Some(FORMAT) {
        return Err(corrupt(&header_path, "unsupported format"));
    }
    let (Some(epoch), Some(salt), Some(credential_digest)) = (epoch, salt, digest) else {
        return Err(corrupt(&header_path, "incomplete header"));
    };

    let presented = credential.digest(&salt);
    let mismatch = presented
        .iter()
        .zip(credential_digest.iter())
        .fold(0u8, |acc, (a, b)| acc | (a ^ b));
    if mismatch != 0 {
        return Err(StoreError::Auth);
    }

    let mut tables = Vec::with_capacity(table_refs.len());
    for (file, column) in table_refs {
        if file != table_file_name(&column) {
            return Err(corrupt(
                &header_path,
                format!("table file `{file}` does not match column"),
            ));
        }
        tables.push(load_table(&root, &column, file)?);
    }

    Ok(StoreHandle {
        root,
        epoch,
        salt,
        credential_digest,
        lock_state,
        lock_file,
        tables,
    })
}

fn load_table(root: &Path, column: &str, file_name: String) -> Result<MappingTable, StoreError> {
    let path = root.join(&file_name);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let body = verify_sealed(&path, &bytes)?;
    let mut table = MappingTable::empty(column, file_name);
    if !body.starts_with(TABLE_HEADER.as_bytes()) {
        return Err(corrupt(&path, "missing table header"));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(body);
    for rec in reader.records() {
        let rec = rec.map_err(|e| corrupt(&path, e.to_string()))?;
        let row = parse_row(&rec).map_err(|reason| corrupt(&path, reason))?;
        table
            .check_batch(std::slice::from_ref(&row))
            .map_err(|reason| corrupt(&path, reason))?;
        table.apply(row);
    }
    table.crc.update(&bytes);
    table.file_len = bytes.len() as u64;
    Ok(table)
}

fn parse_row(rec: &csv::StringRecord) -> Result<MappingRow, String> {
    if rec.len() != 5 {
        return Err(format!("row has {} fields, expected 5", rec.len()));
    }
    let epoch = rec[0].parse::<u64>().map_err(|_| format!("bad epoch `{}`", &rec[0]))?;
    let active = match &rec[1] {
        "true" => true,
        "false" => false,
        other => return Err(format!("bad active flag `{other}`")),
    };
    let pseudonym = Pseudonym::new(&rec[3]).map_err(|e| e.to_string())?;
    let occurrence = match &rec[4] {
        "" => None,
        s => Some(s.parse::<u64>().map_err(|_| format!("bad occurrence `{s}`"))?),
    };
    Ok(MappingRow {
        epoch,
        active,
        original: rec[2].to_owned(),
        pseudonym,
        occurrence,
    })
}

impl StoreHandle {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn lock_state(&self) -> LockState {
        self.lock_state
    }

    /// Short public identifier derived from the salt.
    pub fn store_id(&self) -> String {
        hex::encode(&Sha256::digest(self.salt)[..8])
    }

    pub fn tables(&self) -> &[MappingTable] {
        &self.tables
    }

    pub fn table(&self, column: &str) -> Option<&MappingTable> {
        self.tables.iter().find(|t| t.column == column)
    }

    /// Drops the advisory lock. Reads and writes fail with `LOCK` afterwards.
    pub fn unlock(&mut self) -> Result<(), StoreError> {
        self.lock_file.unlock().map_err(io_err(&self.root))?;
        self.lock_state = LockState::None;
        Ok(())
    }

    fn require_read(&self) -> Result<(), StoreError> {
        match self.lock_state {
            LockState::None => Err(StoreError::Lock("store handle holds no lock".into())),
            _ => Ok(()),
        }
    }

    fn require_write(&self) -> Result<(), StoreError> {
        match self.lock_state {
            LockState::Exclusive => Ok(()),
            _ => Err(StoreError::Lock("store handle is not opened for writing".into())),
        }
    }

    fn header_text(&self) -> String {
        let mut s = format!(
            "format = {FORMAT}\nepoch = {}\nsalt = {}\ncredential = {}\n",
            self.epoch,
            hex::encode(self.salt),
            hex::encode(self.credential_digest)
        );
        for t in &self.tables {
            s.push_str(&format!("table = {} {}\n", t.file_name, t.column));
        }
        s
    }

    fn write_header(&self) -> Result<(), StoreError> {
        let mut bytes = self.header_text().into_bytes();
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(seal(crc).as_bytes());
        let tmp = self.root.join("header.tmp");
        let path = self.root.join(HEADER_FILE);
        {
            let mut f = File::create(&tmp).map_err(write_err(&tmp))?;
            f.write_all(&bytes).map_err(write_err(&tmp))?;
            f.sync_all().map_err(write_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(write_err(&path))
    }

    /// Appends rows to a column's table, creating it on first use. The whole
    /// batch is validated before anything touches disk.
    pub fn put_entries(&mut self, column: &str, rows: Vec<MappingRow>) -> Result<(), StoreError> {
        self.require_write()?;
        if column.is_empty() || column.contains(['\n', '\r']) {
            return Err(StoreError::BadColumn(column.to_owned()));
        }
        if rows.is_empty() {
            return Ok(());
        }
        let idx = match self.tables.iter().position(|t| t.column == column) {
            Some(i) => i,
            None => {
                self.tables.push(MappingTable::empty(column, table_file_name(column)));
                self.tables.len() - 1
            }
        };
        let is_new = self.tables[idx].file_len == 0;
        if let Err(reason) = self.tables[idx].check_batch(&rows) {
            if is_new {
                self.tables.pop();
            }
            return Err(StoreError::InvalidRow {
                column: column.to_owned(),
                reason,
            });
        }

        let mut buf = Vec::new();
        if is_new {
            buf.extend_from_slice(TABLE_HEADER.as_bytes());
        }
        {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(&mut buf);
            for r in &rows {
                let occ = r.occurrence.map(|o| o.to_string()).unwrap_or_default();
                w.write_record([
                    r.epoch.to_string().as_str(),
                    if r.active { "true" } else { "false" },
                    r.original.as_str(),
                    r.pseudonym.as_str(),
                    occ.as_str(),
                ])
                .expect("in-memory csv");
            }
            w.flush().expect("in-memory csv");
        }
        let mut crc = self.tables[idx].crc.clone();
        crc.update(&buf);
        let seal_line = seal(crc.clone().finalize());
        buf.extend_from_slice(seal_line.as_bytes());
        crc.update(seal_line.as_bytes());

        let path = self.root.join(&self.tables[idx].file_name);
        let written = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| {
                f.write_all(&buf)?;
                f.sync_data()
            });
        if let Err(e) = written {
            if is_new {
                self.tables.pop();
            }
            return Err(write_err(&path)(e));
        }
        let table = &mut self.tables[idx];
        table.crc = crc;
        table.file_len += buf.len() as u64;
        for r in rows {
            table.apply(r);
        }
        if is_new {
            self.write_header()?;
        }
        Ok(())
    }

    /// Resolves a token. Without `epoch` only active entries match; with an
    /// explicit epoch any entry valid at that epoch matches.
    pub fn get_by_token(&self, column: &str, token: &str, epoch: Option<u64>) -> Result<&str, StoreError> {
        self.require_read()?;
        let unknown = || StoreError::UnknownToken {
            column: column.to_owned(),
            token: token.to_owned(),
        };
        let entry = self.table(column).and_then(|t| t.by_token(token)).ok_or_else(unknown)?;
        let ok = match epoch {
            None => entry.active,
            Some(e) => entry.valid_at(e),
        };
        if ok {
            Ok(&entry.original)
        } else {
            Err(unknown())
        }
    }

    /// Per column, the (original, pseudonym) pairs of the
    /// active entries in issue order.
    pub fn export_tables(&self) -> Result<Vec<ExportedTable>, StoreError> {
        self.require_read()?;
        Ok(self
            .tables
            .iter()
            .map(|t| ExportedTable {
                column: t.column.clone(),
                rows: t
                    .active_entries()
                    .map(|e| (e.original.clone(), e.pseudonym.as_str().to_owned()))
                    .collect(),
            })
            .collect())
    }

    /// Moves the store to the next epoch and persists it.
    pub fn advance_epoch(&mut self) -> Result<u64, StoreError> {
        self.require_write()?;
        self.epoch += 1;
        if let Err(e) = self.write_header() {
            self.epoch -= 1;
            return Err(e);
        }
        Ok(self.epoch)
    }
}

/// Resolves `.`/`..` and symlinks on the longest existing prefix, keeping
/// any nonexistent tail as written.
fn canonical_path(path: &Path) -> Result<PathBuf, StoreError> {
    let absolute = if path.is_absolute() {
        path.to_owned()
    } else {
        std::env::current_dir().map_err(io_err(path))?.join(path)
    };
    let mut existing = absolute.clone();
    let mut tail = Vec::new();
    loop {
        match fs::canonicalize(&existing) {
            Ok(c) => {
                let mut out = c;
                for part in tail.iter().rev() {
                    match Path::new(part).components().next() {
                        Some(Component::ParentDir) => {
                            out.pop();
                        }
                        Some(Component::CurDir) | None => {}
                        Some(_) => out.push(part),
                    }
                }
                return Ok(out);
            }
            Err(_) => {
                let Some(last) = existing.components().next_back() else {
                    return Err(io_err(path)(io::Error::from(io::ErrorKind::NotFound)));
                };
                tail.push(last.as_os_str().to_owned());
                if !existing.pop() {
                    return Err(io_err(path)(io::Error::from(io::ErrorKind::NotFound)));
                }
            }
        }
    }
}

/// Fails when either canonical path contains the other.
pub fn check_separation(store_root: &Path, release_root: &Path) -> Result<(), StoreError> {
    let store = canonical_path(store_root)?;
    let release = canonical_path(release_root)?;
    if store.starts_with(&release) || release.starts_with(&store) {
        return Err(StoreError::Colocation { store, release });
    }
    Ok(())
}
