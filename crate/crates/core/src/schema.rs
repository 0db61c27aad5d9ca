//! Tabular datasets, column classification and the CSV carrier.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("line {line}: expected {expected} cells, found {found}")]
    RaggedRow { line: u64, expected: usize, found: usize },
    #[error("line {line}: input is not valid UTF-8")]
    Encoding { line: u64 },
    #[error("schema profile line {line}: {message}")]
    Profile { line: usize, message: String },
    #[error("invalid schema: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SchemaError {
    pub fn code(&self) -> &'static str {
        match self {
            SchemaError::HeaderMismatch(_) => "HEADER_MISMATCH",
            SchemaError::RaggedRow { .. } => "RAGGED_ROW",
            SchemaError::Encoding { .. } => "ENCODING",
            SchemaError::Profile { .. } | SchemaError::Invalid(_) => "SCHEMA",
            SchemaError::Csv(_) => "CSV",
            SchemaError::Io(_) => "IO",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldClass {
    Identifying,
    QuasiIdentifying,
    SensitiveClear,
    Clear,
}

impl FieldClass {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldClass::Identifying => "IDENTIFYING",
            FieldClass::QuasiIdentifying => "QUASI_IDENTIFYING",
            FieldClass::SensitiveClear => "SENSITIVE_CLEAR",
            FieldClass::Clear => "CLEAR",
        }
    }
}

impl FromStr for FieldClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "IDENTIFYING" => Ok(FieldClass::Identifying),
            "QUASI_IDENTIFYING" => Ok(FieldClass::QuasiIdentifying),
            "SENSITIVE_CLEAR" => Ok(FieldClass::SensitiveClear),
            "CLEAR" => Ok(FieldClass::Clear),
            other => Err(format!("unknown field class `{other}`")),
        }
    }
}

impl fmt::Display for FieldClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Text,
    Numeric,
    Date,
    Coded,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Text => "TEXT",
            FieldKind::Numeric => "NUMERIC",
            FieldKind::Date => "DATE",
            FieldKind::Coded => "CODED",
        }
    }
}

impl FromStr for FieldKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TEXT" => Ok(FieldKind::Text),
            "NUMERIC" => Ok(FieldKind::Numeric),
            "DATE" => Ok(FieldKind::Date),
            "CODED" => Ok(FieldKind::Coded),
            other => Err(format!("unknown field kind `{other}`")),
        }
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub class: FieldClass,
    pub kind: FieldKind,
}

impl Column {
    pub fn new(name: impl Into<String>, class: FieldClass, kind: FieldKind) -> Self {
        Self {
            name: name.into(),
            class,
            kind,
        }
    }
}

/// Ordered column list with unique names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaDescriptor {
    columns: Vec<Column>,
}

impl SchemaDescriptor {
    pub fn new(columns: Vec<Column>) -> Result<Self, SchemaError> {
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(SchemaError::Invalid(format!("duplicate column name `{}`", c.name)));
            }
        }
        Ok(Self { columns })
    }

    /// Parses the `name = class,kind` profile format. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse_profile(text: &str) -> Result<Self, SchemaError> {
        let mut columns = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| SchemaError::Profile { line: line_no, message };
            let (name, spec) = line
                .rsplit_once('=')
                .ok_or_else(|| err("expected `name = class,kind`".into()))?;
            let (class, kind) = spec
                .split_once(',')
                .ok_or_else(|| err("expected `class,kind` after `=`".into()))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(err("empty column name".into()));
            }
            columns.push(Column::new(
                name,
                class.parse().map_err(err)?,
                kind.parse().map_err(err)?,
            ));
        }
        Self::new(columns)
    }

    pub fn to_profile(&self) -> String {
        self.columns
            .iter()
            .map(|c| format!("{} = {},{}\n", c.name, c.class, c.kind))
            .collect()
    }

    /// Classification of the five-column worked example: identifier and
    /// name are substituted, the rest stays in the clear.
    pub fn visits_profile() -> Self {
        use FieldClass::*;
        use FieldKind::*;
        Self {
            columns: vec![
                Column::new("Healthcare Identifier", Identifying, Text),
                Column::new("Medication", SensitiveClear, Text),
                Column::new("Date", Clear, Date),
                Column::new("Condition", SensitiveClear, Coded),
                Column::new("Name", Identifying, Text),
            ],
        }
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }
}

pub type Record = Vec<String>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub schema: SchemaDescriptor,
    pub records: Vec<Record>,
    pub source_id: String,
}

impl Dataset {
    pub fn new(
        schema: SchemaDescriptor,
        records: Vec<Record>,
        source_id: impl Into<String>,
    ) -> Result<Self, SchemaError> {
        if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.len() != schema.len()) {
            return Err(SchemaError::RaggedRow {
                line: i as u64 + 2,
                expected: schema.len(),
                found: r.len(),
            });
        }
        Ok(Self {
            schema,
            records,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Cells of one column, in record order.
    pub fn column_cells(&self, index: usize) -> impl Iterator<Item = &str> {
        self.records.iter().map(move |r| r[index].as_str())
    }
}

fn utf8(bytes: &[u8], line: u64) -> Result<&str, SchemaError> {
    std::str::from_utf8(bytes).map_err(|_| SchemaError::Encoding { line })
}

/// Reads a headered CSV whose header must equal the schema's column names.
/// Cells are kept verbatim.
pub fn load_dataset<R: Read>(
    input: R,
    schema: &SchemaDescriptor,
    source_id: impl Into<String>,
) -> Result<Dataset, SchemaError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows = reader.byte_records();

    let header = match rows.next() {
        Some(h) => h?,
        None if schema.is_empty() => {
            return Dataset::new(schema.clone(), Vec::new(), source_id);
        }
        None => return Err(SchemaError::HeaderMismatch("input has no header row".into())),
    };
    let header_line = header.position().map_or(1, |p| p.line());
    let names = header
        .iter()
        .map(|f| utf8(f, header_line))
        .collect::<Result<Vec<_>, _>>()?;
    if !names.iter().copied().eq(schema.names()) {
        return Err(SchemaError::HeaderMismatch(format!(
            "expected [{}], found [{}]",
            schema.names().collect::<Vec<_>>().join(", "),
            names.join(", ")
        )));
    }

    let mut records = Vec::new();
    for row in rows {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != schema.len() {
            return Err(SchemaError::RaggedRow {
                line,
                expected: schema.len(),
                found: row.len(),
            });
        }
        let cells = row
            .iter()
            .map(|f| utf8(f, line).map(str::to_owned))
            .collect::<Result<Vec<_>, _>>()?;
        records.push(cells);
    }
    Dataset::new(schema.clone(), records, source_id)
}

/// Writes RFC 4180-style CSV with LF line endings.
pub fn write_dataset<W: Write>(d: &Dataset, out: W) -> Result<(), SchemaError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    writer.write_record(d.schema.names())?;
    for r in &d.records {
        writer.write_record(r)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn dataset_to_bytes(d: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(d, &mut buf).expect("writing to memory cannot fail");
    buf
}
