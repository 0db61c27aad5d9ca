//! Grouping records by healthcare identifier and flagging mismatches.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::identifier::{parse_hi, validate_hi, HealthcareIdentifier};
use crate::schema::{Dataset, FieldClass};

#[derive(Debug, Error)]
#[error("{0}")]
pub struct LinkError(pub String);

impl LinkError {
    pub fn code(&self) -> &'static str {
        "CONFIG"
    }
}

/// Columns used for linkage. `duplicate_keys` defaults to the name column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkColumns {
    pub hi: String,
    pub name: String,
    pub duplicate_keys: Vec<String>,
}

impl LinkColumns {
    pub fn new(hi: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            hi: hi.into(),
            name: name.into(),
            duplicate_keys: Vec::new(),
        }
    }

    fn resolve(&self, d: &Dataset) -> Result<Resolved, LinkError> {
        let find = |c: &str| {
            d.schema
                .index_of(c)
                .ok_or_else(|| LinkError(format!("unknown column `{c}`")))
        };
        let hi = find(&self.hi)?;
        if d.schema.columns()[hi].class != FieldClass::Identifying {
            return Err(LinkError(format!("column `{}` is not IDENTIFYING", self.hi)));
        }
        let name = find(&self.name)?;
        let keys = if self.duplicate_keys.is_empty() {
            vec![name]
        } else {
            self.duplicate_keys.iter().map(|c| find(c)).collect::<Result<_, _>>()?
        };
        Ok(Resolved { hi, name, keys })
    }
}

struct Resolved {
    hi: usize,
    name: usize,
    keys: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkGroup {
    pub hi: HealthcareIdentifier,
    pub record_indices: Vec<usize>,
    pub distinct_names: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnomalyKind {
    InvalidHi,
    NameConflict,
    PossibleDuplicate,
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnomalyKind::InvalidHi => "INVALID_HI",
            AnomalyKind::NameConflict => "NAME_CONFLICT",
            AnomalyKind::PossibleDuplicate => "POSSIBLE_DUPLICATE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkAnomaly {
    pub kind: AnomalyKind,
    pub detail: String,
    pub record_indices: Vec<usize>,
}

/// Groups records sharing a Luhn-valid identifier, ordered by first
/// occurrence. Records with invalid identifiers are left out.
pub fn group_by_hi(d: &Dataset, cols: &LinkColumns) -> Result<Vec<LinkGroup>, LinkError> {
    let r = cols.resolve(d)?;
    let mut slot: HashMap<HealthcareIdentifier, usize> = HashMap::new();
    let mut groups: Vec<LinkGroup> = Vec::new();
    for (i, record) in d.records.iter().enumerate() {
        let Ok(hi) = parse_hi(&record[r.hi]) else {
            continue;
        };
        let g = *slot.entry(hi).or_insert_with(|| {
            groups.push(LinkGroup {
                hi,
                record_indices: Vec::new(),
                distinct_names: BTreeSet::new(),
            });
            groups.len() - 1
        });
        groups[g].record_indices.push(i);
        groups[g].distinct_names.insert(record[r.name].trim().to_owned());
    }
    Ok(groups)
}

pub fn detect_anomalies(groups: &[LinkGroup], d: &Dataset, cols: &LinkColumns) -> Result<Vec<LinkAnomaly>, LinkError> {
    let r = cols.resolve(d)?;
    let mut out = Vec::new();

    for (i, record) in d.records.iter().enumerate() {
        let report = validate_hi(&record[r.hi]);
        if !report.is_valid() {
            let codes: Vec<_> = report.failures.iter().map(|f| f.code()).collect();
            out.push(LinkAnomaly {
                kind: AnomalyKind::InvalidHi,
                detail: format!("`{}` failed {}", record[r.hi], codes.join(",")),
                record_indices: vec![i],
            });
        }
    }

    for g in groups {
        if g.distinct_names.len() >= 2 {
            let names: Vec<_> = g.distinct_names.iter().map(String::as_str).collect();
            out.push(LinkAnomaly {
                kind: AnomalyKind::NameConflict,
                detail: format!("{} carries names [{}]", g.hi, names.join("; ")),
                record_indices: g.record_indices.clone(),
            });
        }
    }

    // key -> (groups it appears in, records), in first-occurrence order
    let mut by_key: Vec<(Vec<String>, BTreeSet<usize>, BTreeSet<usize>)> = Vec::new();
    let mut slot: HashMap<Vec<String>, usize> = HashMap::new();
    for (gi, g) in groups.iter().enumerate() {
        for &ri in &g.record_indices {
            let key: Vec<String> = r.keys.iter().map(|&k| d.records[ri][k].trim().to_owned()).collect();
            let s = *slot.entry(key.clone()).or_insert_with(|| {
                by_key.push((key, BTreeSet::new(), BTreeSet::new()));
                by_key.len() - 1
            });
            by_key[s].1.insert(gi);
            by_key[s].2.insert(ri);
        }
    }
    for (key, gs, records) in by_key {
        if gs.len() >= 2 {
            let his: Vec<String> = gs.iter().map(|&g| groups[g].hi.to_string()).collect();
            out.push(LinkAnomaly {
                kind: AnomalyKind::PossibleDuplicate,
                detail: format!(
                    "`{}` appears under {} identifiers: {}",
                    key.join(" / "),
                    gs.len(),
                    his.join(", ")
                ),
                record_indices: records.into_iter().collect(),
            });
        }
    }
    Ok(out)
}
