//! Record-level data-quality rules.
//!
//! | rule | risk                                   | severity |
//! |------|----------------------------------------|----------|
//! | R1   | free text in a coded field             | ERROR    |
//! | R2   | copy-pasted note under the same patient| WARN     |
//! | R3   | implausible unit conversion            | ERROR    |
//! | R4   | numeric value outside its bounds       | ERROR    |
//! | R5   | structured dose vs free-text sig       | WARN     |
//!
//! Rules only report; the dataset is never modified.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::schema::{Dataset, FieldClass, FieldKind};

#[derive(Debug, Error)]
pub enum LintError {
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("vocabulary line {line} is not valid UTF-8")]
    Encoding { line: usize },
    #[error("{0}")]
    Config(String),
}

impl LintError {
    pub fn code(&self) -> &'static str {
        match self {
            LintError::EmptyVocabulary => "EMPTY_VOCABULARY",
            LintError::Encoding { .. } => "ENCODING",
            LintError::Config(_) => "CONFIG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RuleId {
    R1,
    R2,
    R3,
    R4,
    R5,
}

impl RuleId {
    pub const ALL: [RuleId; 5] = [RuleId::R1, RuleId::R2, RuleId::R3, RuleId::R4, RuleId::R5];

    pub fn severity(self) -> Severity {
        match self {
            RuleId::R1 | RuleId::R3 | RuleId::R4 => Severity::Error,
            RuleId::R2 | RuleId::R5 => Severity::Warn,
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for RuleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "R1" => Ok(RuleId::R1),
            "R2" => Ok(RuleId::R2),
            "R3" => Ok(RuleId::R3),
            "R4" => Ok(RuleId::R4),
            "R5" => Ok(RuleId::R5),
            other => Err(format!("unknown rule `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Warn,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Warn => "WARN",
            Severity::Error => "ERROR",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub name: String,
    pub version: String,
    terms: BTreeSet<String>,
}

impl Vocabulary {
    pub fn new<I, S>(name: impl Into<String>, version: impl Into<String>, terms: I) -> Result<Self, LintError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let terms: BTreeSet<String> = terms.into_iter().map(Into::into).collect();
        if terms.is_empty() {
            return Err(LintError::EmptyVocabulary);
        }
        Ok(Self {
            name: name.into(),
            version: version.into(),
            terms,
        })
    }

    pub fn contains(&self, term: &str) -> bool {
        self.terms.contains(term)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(String::as_str)
    }
}

/// One term per line. Optional `# name: ...` and `# version: ...` directives;
/// other `#` lines and blank lines are skipped.
pub fn load_vocabulary(bytes: &[u8]) -> Result<Vocabulary, LintError> {
    let mut name = String::from("vocabulary");
    let mut version = String::new();
    let mut terms = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(raw)
            .map_err(|_| LintError::Encoding { line: i + 1 })?
            .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("name:") {
                name = v.trim().to_owned();
            } else if let Some(v) = comment.trim().strip_prefix("version:") {
                version = v.trim().to_owned();
            }
            continue;
        }
        terms.push(line.to_owned());
    }
    Vocabulary::new(name, version, terms)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitPair {
    pub column_a: String,
    pub column_b: String,
    pub factor: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DosePair {
    pub dose_column: String,
    pub sig_column: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LintConfig {
    pub enabled_rules: BTreeSet<RuleId>,
    pub r2_min_length: usize,
    pub r3_pairs: Vec<UnitPair>,
    pub r4_bounds: BTreeMap<String, (f64, f64)>,
    pub r5_pairs: Vec<DosePair>,
}

impl Default for LintConfig {
    fn default() -> Self {
        Self {
            enabled_rules: RuleId::ALL.into_iter().collect(),
            r2_min_length: 20,
            r3_pairs: Vec::new(),
            r4_bounds: BTreeMap::new(),
            r5_pairs: Vec::new(),
        }
    }
}

impl LintConfig {
    /// Key-value format:
    ///
    /// ```text
    /// rules = R1,R2,R3,R4,R5
    /// r2_min_length = 20
    /// r3 = weight_lb, weight_kg, 2.20462, 0.02
    /// r4 = Glucose, 2, 30
    /// r5 = Dose, Sig
    /// ```
    ///
    /// `r3`, `r4` and `r5` may repeat.
    pub fn parse(text: &str) -> Result<Self, LintError> {
        let mut cfg = LintConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| LintError::Config(format!("config line {}: {msg}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
            let parts: Vec<&str> = value.split(',').map(str::trim).collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("`{s}` is not a number")));
            match key.trim() {
                "rules" => {
                    cfg.enabled_rules = parts
                        .iter()
                        .filter(|p| !p.is_empty())
                        .map(|p| p.parse().map_err(|e: String| bad(&e)))
                        .collect::<Result<_, _>>()?;
                }
                "r2_min_length" => {
                    cfg.r2_min_length = value
                        .trim()
                        .parse()
                        .map_err(|_| bad("r2_min_length must be an integer"))?;
                }
                "r3" => match parts.as_slice() {
                    [a, b, f, t] => cfg.r3_pairs.push(UnitPair {
                        column_a: a.to_string(),
                        column_b: b.to_string(),
                        factor: num(f)?,
                        tolerance: num(t)?,
                    }),
                    _ => return Err(bad("r3 expects `column_a, column_b, factor, tolerance`")),
                },
                "r4" => match parts.as_slice() {
                    [c, lo, hi] => {
                        cfg.r4_bounds.insert(c.to_string(), (num(lo)?, num(hi)?));
                    }
                    _ => return Err(bad("r4 expects `column, min, max`")),
                },
                "r5" => match parts.as_slice() {
                    [dose, sig] => cfg.r5_pairs.push(DosePair {
                        dose_column: dose.to_string(),
                        sig_column: sig.to_string(),
                    }),
                    _ => return Err(bad("r5 expects `dose_column, sig_column`")),
                },
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        Ok(cfg)
    }

    fn validate(&self, d: &Dataset) -> Result<(), LintError> {
        let schema = &d.schema;
        let exists = |c: &str| {
            schema
                .column(c)
                .ok_or_else(|| LintError::Config(format!("unknown column `{c}`")))
        };
        if self.r2_min_length < 1 {
            return Err(LintError::Config("r2_min_length must be at least 1".into()));
        }
        for p in &self.r3_pairs {
            exists(&p.column_a)?;
            exists(&p.column_b)?;
            if !(p.factor > 0.0 && p.factor.is_finite()) {
                return Err(LintError::Config(format!("r3 factor must be > 0, got {}", p.factor)));
            }
            if p.tolerance.is_nan() || p.tolerance < 0.0 {
                return Err(LintError::Config(format!(
                    "r3 tolerance must be >= 0, got {}",
                    p.tolerance
                )));
            }
        }
        for (c, &(lo, hi)) in &self.r4_bounds {
            if exists(c)?.kind != FieldKind::Numeric {
                return Err(LintError::Config(format!("r4 column `{c}` is not NUMERIC")));
            }
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(LintError::Config(format!("r4 bounds for `{c}` need min < max")));
            }
        }
        for p in &self.r5_pairs {
            exists(&p.dose_column)?;
            exists(&p.sig_column)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub rule: RuleId,
    pub severity: Severity,
    pub record_index: usize,
    pub column: String,
    pub message: String,
}

impl Finding {
    fn new(rule: RuleId, record_index: usize, column: &str, message: String) -> Self {
        Self {
            rule,
            severity: rule.severity(),
            record_index,
            column: column.to_owned(),
            message,
        }
    }
}

/// Runs every enabled rule. Output is ordered by record, then rule.
pub fn run_lints(d: &Dataset, vocab: &Vocabulary, cfg: &LintConfig) -> Result<Vec<Finding>, LintError> {
    cfg.validate(d)?;
    let mut findings = Vec::new();
    let on = |r: RuleId| cfg.enabled_rules.contains(&r);
    if on(RuleId::R1) {
        free_text_in_coded(d, vocab, &mut findings);
    }
    if on(RuleId::R2) {
        copy_paste(d, cfg.r2_min_length, &mut findings);
    }
    if on(RuleId::R3) {
        for pair in &cfg.r3_pairs {
            unit_conversion(d, pair, &mut findings);
        }
    }
    if on(RuleId::R4) {
        for (column, &bounds) in &cfg.r4_bounds {
            out_of_range(d, column, bounds, &mut findings);
        }
    }
    if on(RuleId::R5) {
        for pair in &cfg.r5_pairs {
            dose_contradiction(d, pair, &mut findings);
        }
    }
    // stable: keeps per-rule column order for ties
    findings.sort_by_key(|f| (f.record_index, f.rule));
    Ok(findings)
}

fn free_text_in_coded(d: &Dataset, vocab: &Vocabulary, out: &mut Vec<Finding>) {
    for (ci, col) in d.schema.columns().iter().enumerate() {
        if col.kind != FieldKind::Coded {
            continue;
        }
        for (ri, cell) in d.column_cells(ci).enumerate() {
            if !cell.is_empty() && !vocab.contains(cell) {
                out.push(Finding::new(
                    RuleId::R1,
                    ri,
                    &col.name,
                    format!("`{cell}` is not a term of {}", vocab.name),
                ));
            }
        }
    }
}

fn copy_paste(d: &Dataset, min_len: usize, out: &mut Vec<Finding>) {
    let key_cols: Vec<usize> = d
        .schema
        .columns()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.class == FieldClass::Identifying)
        .map(|(i, _)| i)
        .collect();
    for (ci, col) in d.schema.columns().iter().enumerate() {
        if col.kind != FieldKind::Text || col.class == FieldClass::Identifying {
            continue;
        }
        let mut first_seen: HashMap<(Vec<&str>, &str), usize> = HashMap::new();
        for (ri, record) in d.records.iter().enumerate() {
            let cell = record[ci].as_str();
            if cell.chars().count() < min_len {
                continue;
            }
            let key: Vec<&str> = key_cols.iter().map(|&k| record[k].as_str()).collect();
            match first_seen.get(&(key.clone(), cell)) {
                Some(&first) => out.push(Finding::new(
                    RuleId::R2,
                    ri,
                    &col.name,
                    format!("text identical to record {first} for the same patient"),
                )),
                None => {
                    first_seen.insert((key, cell), ri);
                }
            }
        }
    }
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Relative deviation of `a` from `b * factor`.
pub fn conversion_deviation(a: f64, b: f64, factor: f64) -> f64 {
    let expected = b * factor;
    if expected == 0.0 {
        return if a == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (a - expected).abs() / expected.abs()
}

fn unit_conversion(d: &Dataset, pair: &UnitPair, out: &mut Vec<Finding>) {
    let (Some(ia), Some(ib)) = (d.schema.index_of(&pair.column_a), d.schema.index_of(&pair.column_b)) else {
        return;
    };
    for (ri, record) in d.records.iter().enumerate() {
        let (Some(a), Some(b)) = (parse_number(&record[ia]), parse_number(&record[ib])) else {
            continue;
        };
        let dev = conversion_deviation(a, b, pair.factor);
        if dev > pair.tolerance {
            out.push(Finding::new(
                RuleId::R3,
                ri,
                &pair.column_a,
                format!(
                    "{a} vs {b} x {} = {} deviates by {:.4} (tolerance {})",
                    pair.factor,
                    b * pair.factor,
                    dev,
                    pair.tolerance
                ),
            ));
        }
    }
}

fn out_of_range(d: &Dataset, column: &str, (lo, hi): (f64, f64), out: &mut Vec<Finding>) {
    let Some(ci) = d.schema.index_of(column) else {
        return;
    };
    for (ri, cell) in d.column_cells(ci).enumerate() {
        if let Some(v) = parse_number(cell) {
            if v < lo || v > hi {
                out.push(Finding::new(
                    RuleId::R4,
                    ri,
                    column,
                    format!("{v} outside [{lo}, {hi}]"),
                ));
            }
        }
    }
}

fn dose_contradiction(d: &Dataset, pair: &DosePair, out: &mut Vec<Finding>) {
    let (Some(id), Some(is)) = (
        d.schema.index_of(&pair.dose_column),
        d.schema.index_of(&pair.sig_column),
    ) else {
        return;
    };
    for (ri, record) in d.records.iter().enumerate() {
        let (Some(structured), Some(free)) = (parse_structured_dose(&record[id]), parse_sig(&record[is])) else {
            continue;
        };
        if structured != free {
            out.push(Finding::new(
                RuleId::R5,
                ri,
                &pair.sig_column,
                format!("structured dose gives {structured} pills/day, free text gives {free}"),
            ));
        }
    }
}

fn number_token(word: &str) -> Option<u32> {
    const WORDS: [&str; 10] = [
        "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    if !word.is_empty() && word.bytes().all(|b| b.is_ascii_digit()) {
        return word.parse().ok();
    }
    WORDS.iter().position(|w| *w == word).map(|i| i as u32 + 1)
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .trim()
        .trim_end_matches('.')
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// `<n> pill(s), <m>/day` as pills per day.
pub fn parse_structured_dose(cell: &str) -> Option<u32> {
    let lower = cell.to_lowercase();
    let (pills, freq) = lower.split_once(',')?;
    let pills: Vec<&str> = pills.split_whitespace().collect();
    let count = match pills.as_slice() {
        [n, "pill" | "pills"] => number_token(n)?,
        _ => return None,
    };
    let per_day = freq.trim().strip_suffix("day")?.trim_end().strip_suffix('/')?.trim();
    Some(count * number_token(per_day)?)
}

/// Pills per day from a free-text sig, or `None` when the text falls outside
/// the accepted grammar:
///
/// ```text
/// [take] <n> pill(s) <m> time(s) a day
/// [take] <n> pill(s) in the morning [and <m> pill(s) in the evening]
/// ```
///
/// Numbers are digits or the words one..ten.
pub fn parse_sig(text: &str) -> Option<u32> {
    let w = words(text);
    let mut w: Vec<&str> = w.iter().map(String::as_str).collect();
    if w.first() == Some(&"take") {
        w.remove(0);
    }
    let is_pill = |s: &str| s == "pill" || s == "pills";
    match w.as_slice() {
        [n, p, m, t, "a", "day"] if is_pill(p) && (*t == "time" || *t == "times") => {
            Some(number_token(n)? * number_token(m)?)
        }
        [n, p, "in", "the", "morning"] if is_pill(p) => number_token(n),
        [n, p, "in", "the", "morning", "and", m, q, "in", "the", "evening"] if is_pill(p) && is_pill(q) => {
            Some(number_token(n)? + number_token(m)?)
        }
        _ => None,
    }
}
