//! Comma-separated impression logs.
//!
//! Header: `f0,…,f{k-1},click,conversion` optionally followed by
//! `oracle_ctr,oracle_cvr,oracle_conv_all`. Floats carry 9 significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DataError, Dataset, FieldSchema, ImpressionRecord, OracleLabels};

const ORACLE_COLUMNS: [&str; 3] = ["oracle_ctr", "oracle_cvr", "oracle_conv_all"];

pub fn write_log(d: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    let k = d.schema().num_fields();
    let mut header: Vec<String> = (0..k).map(|f| format!("f{f}")).collect();
    header.push("click".into());
    header.push("conversion".into());
    if d.has_oracle() {
        header.extend(ORACLE_COLUMNS.iter().map(|s| s.to_string()));
    }
    writeln!(w, "{}", header.join(","))?;
    for r in d.records() {
        let mut line = String::with_capacity(64);
        for c in &r.features {
            line.push_str(&c.to_string());
            line.push(',');
        }
        line.push_str(if r.click { "1," } else { "0," });
        line.push_str(if r.conversion { "1" } else { "0" });
        if let Some(o) = &r.oracle {
            line.push_str(&format!(
                ",{:.8e},{:.8e},{}",
                o.ctr,
                o.cvr,
                u8::from(o.conversion_all)
            ));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

struct Parsed {
    num_fields: usize,
    records: Vec<ImpressionRecord>,
}

fn parse_flag(tok: &str, row: usize, col: &str) -> Result<bool, DataError> {
    match tok.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(DataError::Row {
            row,
            reason: format!("{col} must be 0 or 1, got {other:?}"),
        }),
    }
}

fn parse_file(path: &Path) -> Result<Parsed, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Header("empty file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let click_at = cols
        .iter()
        .position(|c| *c == "click")
        .ok_or_else(|| DataError::Header("missing click column".into()))?;
    for (i, c) in cols[..click_at].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(DataError::Header(format!("expected f{i}, found {c:?}")));
        }
    }
    if click_at == 0 {
        return Err(DataError::Header("no feature columns".into()));
    }
    if cols.get(click_at + 1) != Some(&"conversion") {
        return Err(DataError::Header("conversion must follow click".into()));
    }
    let tail = &cols[click_at + 2..];
    let has_oracle = match tail.len() {
        0 => false,
        3 if tail == ORACLE_COLUMNS => true,
        _ => {
            return Err(DataError::Header(format!(
                "unexpected trailing columns {tail:?}"
            )))
        }
    };
    let width = cols.len();

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.trim().split(',').collect();
        if toks.len() != width {
            return Err(DataError::Row {
                row,
                reason: format!("expected {width} columns, found {}", toks.len()),
            });
        }
        let features = toks[..click_at]
            .iter()
            .map(|t| {
                t.trim().parse::<u32>().map_err(|e| DataError::Row {
                    row,
                    reason: format!("bad category {t:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let click = parse_flag(toks[click_at], row, "click")?;
        let conversion = parse_flag(toks[click_at + 1], row, "conversion")?;
        if conversion && !click {
            return Err(DataError::Funnel { row });
        }
        let oracle = if has_oracle {
            let prob = |t: &str, col: &str| -> Result<f64, DataError> {
                let v: f64 = t.trim().parse().map_err(|e| DataError::Row {
                    row,
                    reason: format!("bad {col} {t:?}: {e}"),
                })?;
                if !(v > 0.0 && v < 1.0) {
                    return Err(DataError::Row {
                        row,
                        reason: format!("{col} must lie in (0, 1), got {v}"),
                    });
                }
                Ok(v)
            };
            Some(OracleLabels {
                ctr: prob(tail_tok(&toks, click_at, 0), "oracle_ctr")?,
                cvr: prob(tail_tok(&toks, click_at, 1), "oracle_cvr")?,
                conversion_all: parse_flag(tail_tok(&toks, click_at, 2), row, "oracle_conv_all")?,
            })
        } else {
            None
        };
        if let Some(o) = &oracle {
            if click && o.conversion_all != conversion {
                return Err(DataError::Row {
                    row,
                    reason: "oracle_conv_all disagrees with the observed conversion of a click"
                        .into(),
                });
            }
        }
        records.push(ImpressionRecord {
            features,
            click,
            conversion,
            oracle,
        });
    }
    Ok(Parsed {
        num_fields: click_at,
        records,
    })
}

fn tail_tok<'a>(toks: &[&'a str], click_at: usize, i: usize) -> &'a str {
    toks[click_at + 2 + i]
}

/// Reads a log that must match `schema`.
pub fn load_log(path: &Path, schema: &FieldSchema) -> Result<Dataset, DataError> {
    let parsed = parse_file(path)?;
    if parsed.num_fields != schema.num_fields() {
        return Err(DataError::Header(format!(
            "file has {} feature columns, schema expects {}",
            parsed.num_fields,
            schema.num_fields()
        )));
    }
    Dataset::new(schema.clone(), parsed.records)
}

/// Reads a log, taking each field's cardinality as its largest category plus one.
pub fn load_log_inferred(path: &Path) -> Result<Dataset, DataError> {
    let parsed = parse_file(path)?;
    let mut cards = vec![1usize; parsed.num_fields];
    for r in &parsed.records {
        for (c, &v) in cards.iter_mut().zip(&r.features) {
            *c = (*c).max(v as usize + 1);
        }
    }
    Dataset::new(FieldSchema::new(cards)?, parsed.records)
}
