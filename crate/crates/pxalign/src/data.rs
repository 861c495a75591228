//! Delimited data tables exchanged between pipeline stages.
//!
//! A table is a CSV document with a header and one row per record. The
//! column layout is prefix-namespaced and ordered by section:
//!
//! `record_id`, [`z_true`], `bias:<dim>`…, `s:<signal>`…, [`x:<signal>`…],
//! [`z:<signal>`…], [`z_final`]
//!
//! `z_true` exists only for simulated data (the latent interest used to
//! generate it), `x:` columns hold per-signal predictions, `z:` columns
//! hold aligned scores, and `z_final` the fused score. Numbers are
//! written in the shortest form that parses back to the identical bit
//! pattern, so a read-write cycle of a table produced by this module is
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const RECORD_ID: &str = "record_id";
const Z_TRUE: &str = "z_true";
const Z_FINAL: &str = "z_final";
const BIAS_PREFIX: &str = "bias:";
const OBSERVED_PREFIX: &str = "s:";
const PREDICTED_PREFIX: &str = "x:";
const SCORE_PREFIX: &str = "z:";

/// Which columns a table carries. Section order is fixed; the name order
/// inside a section is whatever the schema (or file header) declares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub has_z_true: bool,
    pub bias_dims: Vec<String>,
    pub observed_signals: Vec<String>,
    pub predicted_signals: Vec<String>,
    pub score_signals: Vec<String>,
    pub has_z_final: bool,
}

impl TableSchema {
    pub fn validate(&self) -> Result<()> {
        for section in [
            &self.bias_dims,
            &self.observed_signals,
            &self.predicted_signals,
            &self.score_signals,
        ] {
            for name in section {
                if name.is_empty() {
                    return Err(Error::Data("empty column name".into()));
                }
            }
            let mut sorted = section.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != section.len() {
                return Err(Error::Data(format!(
                    "duplicate column names within a section: {section:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> Vec<String> {
        let mut header = vec![RECORD_ID.to_string()];
        if self.has_z_true {
            header.push(Z_TRUE.to_string());
        }
        header.extend(self.bias_dims.iter().map(|d| format!("{BIAS_PREFIX}{d}")));
        header.extend(
            self.observed_signals
                .iter()
                .map(|s| format!("{OBSERVED_PREFIX}{s}")),
        );
        header.extend(
            self.predicted_signals
                .iter()
                .map(|s| format!("{PREDICTED_PREFIX}{s}")),
        );
        header.extend(self.score_signals.iter().map(|s| format!("{SCORE_PREFIX}{s}")));
        if self.has_z_final {
            header.push(Z_FINAL.to_string());
        }
        header
    }

    /// Parses a header into a schema, enforcing the documented section
    /// order so that reading and rewriting a file is byte-stable.
    pub fn parse_header(header: &[String]) -> Result<Self> {
        // Section ranks: record_id 0, z_true 1, bias 2, s 3, x 4, z 5,
        // z_final 6.
        let mut schema = TableSchema {
            has_z_true: false,
            bias_dims: Vec::new(),
            observed_signals: Vec::new(),
            predicted_signals: Vec::new(),
            score_signals: Vec::new(),
            has_z_final: false,
        };
        let mut rank = 0u8;
        let advance = |col: &str, to: u8, rank: &mut u8| -> Result<()> {
            if to < *rank {
                return Err(Error::Data(format!(
                    "column '{col}' is out of section order \
                     (expected record_id, z_true, bias:*, s:*, x:*, z:*, z_final)"
                )));
            }
            *rank = to;
            Ok(())
        };
        let mut saw_record_id = false;
        for (i, col) in header.iter().enumerate() {
            if col == RECORD_ID {
                if i != 0 {
                    return Err(Error::Data(format!(
                        "'{RECORD_ID}' must be the first column, found at position {i}"
                    )));
                }
                saw_record_id = true;
            } else if col == Z_TRUE {
                advance(col, 1, &mut rank)?;
                if schema.has_z_true {
                    return Err(Error::Data(format!("duplicate column '{Z_TRUE}'")));
                }
                schema.has_z_true = true;
                rank = 2;
            } else if let Some(dim) = col.strip_prefix(BIAS_PREFIX) {
                advance(col, 2, &mut rank)?;
                schema.bias_dims.push(dim.to_string());
            } else if let Some(sig) = col.strip_prefix(OBSERVED_PREFIX) {
                advance(col, 3, &mut rank)?;
                schema.observed_signals.push(sig.to_string());
            } else if let Some(sig) = col.strip_prefix(PREDICTED_PREFIX) {
                advance(col, 4, &mut rank)?;
                schema.predicted_signals.push(sig.to_string());
            } else if let Some(sig) = col.strip_prefix(SCORE_PREFIX) {
                advance(col, 5, &mut rank)?;
                schema.score_signals.push(sig.to_string());
            } else if col == Z_FINAL {
                advance(col, 6, &mut rank)?;
                if schema.has_z_final {
                    return Err(Error::Data(format!("duplicate column '{Z_FINAL}'")));
                }
                schema.has_z_final = true;
                rank = 7;
            } else {
                return Err(Error::Data(format!("unrecognized column '{col}'")));
            }
        }
        if !saw_record_id {
            return Err(Error::Data(format!("missing required column '{RECORD_ID}'")));
        }
        schema.validate()?;
        Ok(schema)
    }
}

/// One record's observables and (optionally) derived values.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRow {
    pub record_id: u64,
    pub z_true: Option<f64>,
    /// Raw bias readings keyed by dimension name (categorical readings
    /// are bucket indices as floats).
    pub bias: BTreeMap<String, f64>,
    /// Observed behavior per signal.
    pub observed: BTreeMap<String, f64>,
    /// Predicted behavior per signal.
    pub predicted: BTreeMap<String, f64>,
    /// Aligned score per signal.
    pub scores: BTreeMap<String, f64>,
    pub z_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    schema: TableSchema,
    rows: Vec<DataRow>,
}

impl DataTable {
    pub fn new(schema: TableSchema) -> Result<Self> {
        schema.validate()?;
        Ok(Self {
            schema,
            rows: Vec::new(),
        })
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[DataRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: DataRow) -> Result<()> {
        self.check_row(&row)?;
        self.rows.push(row);
        Ok(())
    }

    /// Deterministic output ordering for parallel-produced rows.
    pub fn sort_by_record_id(&mut self) {
        self.rows.sort_by_key(|r| r.record_id);
    }

    fn check_row(&self, row: &DataRow) -> Result<()> {
        let context = format!("row with record_id {}", row.record_id);
        if row.z_true.is_some() != self.schema.has_z_true {
            return Err(Error::Data(format!(
                "{context}: z_true presence does not match the schema"
            )));
        }
        if row.z_final.is_some() != self.schema.has_z_final {
            return Err(Error::Data(format!(
                "{context}: z_final presence does not match the schema"
            )));
        }
        let sections: [(&BTreeMap<String, f64>, &[String], &str); 4] = [
            (&row.bias, &self.schema.bias_dims, "bias"),
            (&row.observed, &self.schema.observed_signals, "s"),
            (&row.predicted, &self.schema.predicted_signals, "x"),
            (&row.scores, &self.schema.score_signals, "z"),
        ];
        for (map, names, section) in sections {
            if map.len() != names.len() || !names.iter().all(|n| map.contains_key(n)) {
                return Err(Error::Data(format!(
                    "{context}: {section} columns {:?} do not match the schema's {names:?}",
                    map.keys().collect::<Vec<_>>()
                )));
            }
        }
        for v in row
            .z_true
            .iter()
            .chain(row.z_final.iter())
            .chain(row.bias.values())
            .chain(row.observed.values())
            .chain(row.predicted.values())
            .chain(row.scores.values())
        {
            if !v.is_finite() {
                return Err(Error::Data(format!("{context}: non-finite value {v}")));
            }
        }
        Ok(())
    }

    fn render_row(&self, row: &DataRow) -> Vec<String> {
        let mut fields = vec![row.record_id.to_string()];
        if let Some(z) = row.z_true {
            fields.push(format_float(z));
        }
        for dim in &self.schema.bias_dims {
            fields.push(format_float(row.bias[dim]));
        }
        for sig in &self.schema.observed_signals {
            fields.push(format_float(row.observed[sig]));
        }
        for sig in &self.schema.predicted_signals {
            fields.push(format_float(row.predicted[sig]));
        }
        for sig in &self.schema.score_signals {
            fields.push(format_float(row.scores[sig]));
        }
        if let Some(z) = row.z_final {
            fields.push(format_float(z));
        }
        fields
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(self.schema.header())?;
        for row in &self.rows {
            writer.write_record(self.render_row(row))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Data(format!("csv buffer error: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(format!("non-utf8 csv output: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header: Vec<String> = csv_reader
            .headers()?
            .iter()
            .map(|s| s.to_string())
            .collect();
        let schema = TableSchema::parse_header(&header)?;
        let mut table = DataTable::new(schema)?;
        for (index, record) in csv_reader.records().enumerate() {
            let record = record?;
            let row = parse_row(&header, &record, index + 1)?;
            table.push(row)?;
        }
        Ok(table)
    }

    pub fn from_csv_string(text: &str) -> Result<Self> {
        Self::from_csv_reader(text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot read data file {}: {e}", path.display())))?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }
}

/// Shortest decimal encoding that parses back to the identical bits.
fn format_float(v: f64) -> String {
    format!("{v}")
}

fn parse_row(header: &[String], record: &csv::StringRecord, data_row: usize) -> Result<DataRow> {
    if record.len() != header.len() {
        return Err(Error::Data(format!(
            "data row {data_row} has {} fields but the header declares {}",
            record.len(),
            header.len()
        )));
    }
    let mut row = DataRow {
        record_id: 0,
        z_true: None,
        bias: BTreeMap::new(),
        observed: BTreeMap::new(),
        predicted: BTreeMap::new(),
        scores: BTreeMap::new(),
        z_final: None,
    };
    let parse_f64 = |field: &str, col: &str| -> Result<f64> {
        let v: f64 = field.parse().map_err(|_| {
            Error::Data(format!(
                "data row {data_row}, column '{col}': cannot parse '{field}' as a number"
            ))
        })?;
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "data row {data_row}, column '{col}': non-finite value '{field}'"
            )));
        }
        Ok(v)
    };
    for (col, field) in header.iter().zip(record.iter()) {
        if col == RECORD_ID {
            row.record_id = field.parse().map_err(|_| {
                Error::Data(format!(
                    "data row {data_row}: cannot parse record_id '{field}'"
                ))
            })?;
        } else if col == Z_TRUE {
            row.z_true = Some(parse_f64(field, col)?);
        } else if col == Z_FINAL {
            row.z_final = Some(parse_f64(field, col)?);
        } else if let Some(dim) = col.strip_prefix(BIAS_PREFIX) {
            row.bias.insert(dim.to_string(), parse_f64(field, col)?);
        } else if let Some(sig) = col.strip_prefix(OBSERVED_PREFIX) {
            row.observed.insert(sig.to_string(), parse_f64(field, col)?);
        } else if let Some(sig) = col.strip_prefix(PREDICTED_PREFIX) {
            row.predicted.insert(sig.to_string(), parse_f64(field, col)?);
        } else if let Some(sig) = col.strip_prefix(SCORE_PREFIX) {
            row.scores.insert(sig.to_string(), parse_f64(field, col)?);
        }
    }
    Ok(row)
}
