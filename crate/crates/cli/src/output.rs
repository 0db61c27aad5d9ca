use std::io::{self, Write};

use pseudovault_core::linkage::{LinkAnomaly, LinkGroup};
use pseudovault_core::lint::Finding;
use pseudovault_core::store::ExportedTable;
use pseudovault_core::ValidationReport;

use crate::Format;

fn join(indices: &[usize], sep: &str) -> String {
    indices.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

pub fn validation<W: Write>(out: W, reports: &[(String, ValidationReport)], format: Format) -> io::Result<()> {
    match format {
        Format::Text => {
            let mut out = out;
            for (id, r) in reports {
                if r.is_valid() {
                    writeln!(out, "{id} VALID")?;
                } else {
                    let codes: Vec<_> = r.failures.iter().map(|f| f.code()).collect();
                    writeln!(out, "{id} INVALID {}", codes.join(","))?;
                }
            }
            Ok(())
        }
        Format::Csv => {
            let mut w = csv_writer(out);
            w.write_record(["id", "well_formed", "luhn_valid", "failures"])?;
            for (id, r) in reports {
                let codes: Vec<_> = r.failures.iter().map(|f| f.code()).collect();
                w.write_record([
                    id.as_str(),
                    &r.well_formed.to_string(),
                    &r.luhn_valid.to_string(),
                    &codes.join(";"),
                ])?;
            }
            w.flush()
        }
    }
}

pub fn findings<W: Write>(out: W, findings: &[Finding], format: Format) -> io::Result<()> {
    match format {
        Format::Text => {
            let mut out = out;
            for f in findings {
                writeln!(
                    out,
                    "record {} {} {} {}: {}",
                    f.record_index, f.rule, f.severity, f.column, f.message
                )?;
            }
            Ok(())
        }
        Format::Csv => {
            let mut w = csv_writer(out);
            if !findings.is_empty() {
                w.write_record(["record_index", "rule", "severity", "column", "message"])?;
            }
            for f in findings {
                w.write_record([
                    f.record_index.to_string().as_str(),
                    &f.rule.to_string(),
                    &f.severity.to_string(),
                    &f.column,
                    &f.message,
                ])?;
            }
            w.flush()
        }
    }
}

pub fn linkage<W: Write>(out: W, groups: &[LinkGroup], anomalies: &[LinkAnomaly], format: Format) -> io::Result<()> {
    match format {
        Format::Text => {
            let mut out = out;
            for g in groups {
                let names: Vec<_> = g.distinct_names.iter().map(String::as_str).collect();
                writeln!(
                    out,
                    "group {} records={} names={}",
                    g.hi,
                    join(&g.record_indices, ","),
                    names.join("; ")
                )?;
            }
            for a in anomalies {
                writeln!(
                    out,
                    "anomaly {} records={} {}",
                    a.kind,
                    join(&a.record_indices, ","),
                    a.detail
                )?;
            }
            Ok(())
        }
        Format::Csv => {
            let mut w = csv_writer(out);
            w.write_record(["kind", "hi", "record_indices", "detail"])?;
            for g in groups {
                let names: Vec<_> = g.distinct_names.iter().map(String::as_str).collect();
                w.write_record(["GROUP", g.hi.as_str(), &join(&g.record_indices, ";"), &names.join("; ")])?;
            }
            for a in anomalies {
                w.write_record([
                    a.kind.to_string().as_str(),
                    "",
                    &join(&a.record_indices, ";"),
                    &a.detail,
                ])?;
            }
            w.flush()
        }
    }
}

/// Text form mirrors the two-column "original, pseudonym" tables, one block
/// per mapped column.
pub fn tables<W: Write>(out: W, tables: &[ExportedTable], format: Format) -> io::Result<()> {
    match format {
        Format::Text => {
            let mut out = out;
            for (i, t) in tables.iter().enumerate() {
                if i > 0 {
                    writeln!(out)?;
                }
                writeln!(out, "Table: {}", t.column)?;
                let mut w = csv_writer(&mut out);
                w.write_record([t.column.clone(), format!("{} Pseudonym", t.column)])?;
                for (original, token) in &t.rows {
                    w.write_record([original, token])?;
                }
                w.flush()?;
            }
            Ok(())
        }
        Format::Csv => {
            let mut w = csv_writer(out);
            w.write_record(["column", "original", "pseudonym"])?;
            for t in tables {
                for (original, token) in &t.rows {
                    w.write_record([&t.column, original, token])?;
                }
            }
            w.flush()
        }
    }
}
