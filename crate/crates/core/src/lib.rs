//! Data-integrity toolkit for tabular health records.
//!
//! - [`identifier`]: 16-digit healthcare identifiers with a Luhn check digit.
//! - [`schema`]: CSV datasets and per-column classification.
//! - [`lint`]: coded-entry and data-entry risk rules.
//! - [`linkage`]: grouping records by identifier, flagging mismatches.
//! - [`pseudo`]: reversible pseudonymisation and pseudonym rotation.
//! - [`store`]: the separately kept mapping store.

pub mod identifier;
pub mod linkage;
pub mod lint;
pub mod pseudo;
pub mod schema;
pub mod store;

pub use identifier::{generate_hi, luhn_check_digit, parse_hi, validate_hi, HealthcareIdentifier, ValidationReport};
pub use linkage::{detect_anomalies, group_by_hi, LinkAnomaly, LinkColumns, LinkGroup};
pub use lint::{load_vocabulary, run_lints, Finding, LintConfig, Vocabulary};
pub use pseudo::{
    lookup_token, pseudonymise, reidentify, rotate, Manifest, Mode, Pseudonym, PseudonymPolicy, ReleaseBundle,
};
pub use schema::{load_dataset, write_dataset, Dataset, FieldClass, FieldKind, SchemaDescriptor};
pub use store::{check_separation, init_store, open_store, Access, Credential, StoreHandle};
