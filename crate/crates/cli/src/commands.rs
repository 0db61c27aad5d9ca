use std::fs;
use std::io::{self, BufRead, IsTerminal};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use pseudovault_core::identifier::IdError;
use pseudovault_core::linkage::LinkError;
use pseudovault_core::lint::LintError;
use pseudovault_core::pseudo::{derive_store_salt, sha256_hex, PseudoError};
use pseudovault_core::schema::{dataset_to_bytes, SchemaError};
use pseudovault_core::store::{init_store_with_salt, StoreError};
use pseudovault_core::{
    detect_anomalies, generate_hi, group_by_hi, init_store, load_dataset, load_vocabulary, open_store, pseudonymise,
    reidentify, run_lints, Access, Credential, LinkColumns, LintConfig, Manifest, PseudonymPolicy, SchemaDescriptor,
};

use crate::{output, Format, PseudoArgs};

pub const SECRET_ENV: &str = "PSEUDOVAULT_SECRET";

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(e.code(), e.to_string())
            }
        }
    )*};
}
coded!(IdError, SchemaError, LintError, LinkError, StoreError, PseudoError);

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new("IO", e.to_string())
    }
}

pub enum Outcome {
    Clean,
    Reported,
}

impl Outcome {
    pub fn exit_code(self) -> ExitCode {
        match self {
            Outcome::Clean => ExitCode::SUCCESS,
            Outcome::Reported => ExitCode::from(1),
        }
    }
}

type CliResult = Result<Outcome, CliError>;

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::new("IO", format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read(path)?).map_err(|_| CliError::new("ENCODING", format!("{} is not UTF-8", path.display())))
}

fn load_schema(path: &Path) -> Result<SchemaDescriptor, CliError> {
    Ok(SchemaDescriptor::parse_profile(&read_text(path)?)?)
}

fn source_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "release".into())
}

/// Refuses to write over the input file.
fn output_path(out_dir: &Path, name: &str, input: &Path) -> Result<PathBuf, CliError> {
    let target = out_dir.join(name);
    if let (Ok(a), Ok(b)) = (fs::canonicalize(&target), fs::canonicalize(input)) {
        if a == b {
            return Err(CliError::new(
                "CONFIG",
                format!("output {} would overwrite the input", target.display()),
            ));
        }
    }
    Ok(target)
}

/// The secret comes from the environment or, failing that, a prompt (a
/// plain line of stdin when stdin is not a terminal). It is never accepted
/// as a flag.
fn credential() -> Result<Credential, CliError> {
    let secret = match std::env::var(SECRET_ENV) {
        Ok(s) => s,
        Err(_) if io::stdin().is_terminal() => rpassword::prompt_password("store secret: ")?,
        Err(_) => {
            let mut line = String::new();
            io::stdin().lock().read_line(&mut line)?;
            line.trim_end_matches(['\n', '\r']).to_owned()
        }
    };
    if secret.is_empty() {
        return Err(CliError::new(
            "CREDENTIAL",
            format!("no secret given; set {SECRET_ENV} or enter it at the prompt"),
        ));
    }
    Ok(Credential::new(secret)?)
}

pub fn validate_hi(ids: &[String], format: Format) -> CliResult {
    let reports: Vec<_> = ids
        .iter()
        .map(|id| (id.clone(), pseudovault_core::validate_hi(id)))
        .collect();
    output::validation(io::stdout().lock(), &reports, format)?;
    Ok(if reports.iter().all(|(_, r)| r.is_valid()) {
        Outcome::Clean
    } else {
        Outcome::Reported
    })
}

pub fn gen_hi(iin: &str, iai: &str) -> CliResult {
    let hi = generate_hi(iin, iai)?;
    println!("{hi}");
    Ok(Outcome::Clean)
}

pub fn lint(schema: &Path, vocab: &Path, config: Option<&Path>, csv: &Path, format: Format) -> CliResult {
    let schema = load_schema(schema)?;
    let vocab = load_vocabulary(&read(vocab)?)?;
    let config = match config {
        Some(p) => LintConfig::parse(&read_text(p)?)?,
        None => LintConfig::default(),
    };
    let d = load_dataset(&read(csv)?[..], &schema, source_name(csv))?;
    let findings = run_lints(&d, &vocab, &config)?;
    output::findings(io::stdout().lock(), &findings, format)?;
    Ok(if findings.is_empty() {
        Outcome::Clean
    } else {
        Outcome::Reported
    })
}

pub fn link(schema: &Path, hi_column: &str, name_column: &str, csv: &Path, format: Format) -> CliResult {
    let schema = load_schema(schema)?;
    let d = load_dataset(&read(csv)?[..], &schema, source_name(csv))?;
    let cols = LinkColumns::new(hi_column, name_column);
    let groups = group_by_hi(&d, &cols)?;
    let anomalies = detect_anomalies(&groups, &d, &cols)?;
    output::linkage(io::stdout().lock(), &groups, &anomalies, format)?;
    Ok(if anomalies.is_empty() {
        Outcome::Clean
    } else {
        Outcome::Reported
    })
}

fn create_parent(root: &Path) -> Result<(), CliError> {
    match root.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => Ok(fs::create_dir_all(parent)?),
        _ => Ok(()),
    }
}

fn store_is_fresh(root: &Path) -> bool {
    match fs::read_dir(root) {
        Ok(mut entries) => entries.next().is_none(),
        Err(e) => e.kind() == io::ErrorKind::NotFound,
    }
}

pub fn pseudo(args: &PseudoArgs) -> CliResult {
    pseudovault_core::check_separation(&args.store, &args.out)?;
    let schema = load_schema(&args.schema)?;
    let mut policy = PseudonymPolicy::parse(&read_text(&args.policy)?)?;
    if args.seed.is_some() {
        policy.seed = args.seed;
    }
    policy.allow_invalid_hi |= args.allow_invalid_hi;
    let d = load_dataset(&read(&args.csv)?[..], &schema, source_name(&args.csv))?;
    let cred = credential()?;

    let fresh = store_is_fresh(&args.store);
    let mut store = if fresh {
        create_parent(&args.store)?;
        match policy.seed {
            Some(seed) => init_store_with_salt(&args.store, &cred, derive_store_salt(seed))?,
            None => init_store(&args.store, &cred)?,
        }
    } else {
        open_store(&args.store, &cred, Access::Write)?
    };

    let stem = file_stem(&args.csv);
    fs::create_dir_all(&args.out)?;
    let release_path = output_path(&args.out, &format!("{stem}.csv"), &args.csv)?;
    let manifest_path = output_path(&args.out, &format!("{stem}.manifest"), &args.csv)?;

    let bundle = pseudonymise(d, &policy, &mut store)?;
    if fresh {
        eprintln!("initialised store at {}", store.root().display());
    }
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
    }
    fs::write(&release_path, &bundle.csv)?;
    fs::write(&manifest_path, bundle.manifest.to_text())?;
    println!("{}", release_path.display());
    println!("{}", manifest_path.display());
    Ok(Outcome::Clean)
}

pub fn reid(store: &Path, out: &Path, epoch: Option<u64>, manifest: Option<&Path>, released: &Path) -> CliResult {
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| released.with_extension("manifest"));
    let manifest = Manifest::parse(&read_text(&manifest_path)?)?;
    let bytes = read(released)?;
    if sha256_hex(&bytes) != manifest.release_sha256 {
        return Err(CliError::new(
            "DIGEST_MISMATCH",
            format!(
                "{} does not match the digest in {}",
                released.display(),
                manifest_path.display()
            ),
        ));
    }
    let d = load_dataset(&bytes[..], &manifest.schema, source_name(released))?;
    let cred = credential()?;
    let store = open_store(store, &cred, Access::Read)?;
    let original = reidentify(&d, &manifest, &store, epoch)?;

    fs::create_dir_all(out)?;
    let target = output_path(out, &format!("{}.csv", file_stem(released)), released)?;
    fs::write(&target, dataset_to_bytes(&original))?;
    println!("{}", target.display());
    Ok(Outcome::Clean)
}

pub fn rotate(store: &Path, columns: &[String], seed: Option<u64>) -> CliResult {
    let cred = credential()?;
    let mut h = open_store(store, &cred, Access::Write)?;
    let epoch = pseudovault_core::rotate(&mut h, columns, seed)?;
    println!("{epoch}");
    Ok(Outcome::Clean)
}

pub fn store_init(store: &Path) -> CliResult {
    let cred = credential()?;
    create_parent(store)?;
    let h = init_store(store, &cred)?;
    println!("{}", h.root().display());
    Ok(Outcome::Clean)
}

pub fn store_export(store: &Path, format: Format) -> CliResult {
    let cred = credential()?;
    let h = open_store(store, &cred, Access::Read)?;
    output::tables(io::stdout().lock(), &h.export_tables()?, format)?;
    Ok(Outcome::Clean)
}
