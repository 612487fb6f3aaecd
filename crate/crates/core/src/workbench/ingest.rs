//! CSV ingestion of model outputs.
//!
//! Schema: header `class,model_id,variable,value` (UTF-8, `.` decimal
//! separator) with optional `unit` and `timestamp` columns. One row per
//! (model, variable). Classes and models keep their order of first
//! appearance.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linear_belief::VariableSet;
use crate::synthesis::{ClassOutputs, ModelOutput, ModelOutputBatch};

const REQUIRED: [&str; 4] = ["class", "model_id", "variable", "value"];
const OPTIONAL: [&str; 2] = ["unit", "timestamp"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("model {model_id:?} is missing variable {variable:?}")]
    IncompleteModel { model_id: String, variable: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("line {line}: {message}")]
    Value { line: u64, message: String },
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// A model the caller expects to find in the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredModel {
    pub class: String,
    pub model_id: String,
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub class_label: String,
    pub model_id: String,
    pub variable: String,
    pub value: f64,
    pub unit: Option<String>,
    pub timestamp: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    class: String,
    model_id: String,
    variable: String,
    value: String,
    #[serde(default)]
    unit: Option<String>,
    #[serde(default)]
    timestamp: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.map(|v| v.trim().to_string()).filter(|v| !v.is_empty())
}

pub fn read_records<R: Read>(reader: R, vars: &VariableSet) -> Result<Vec<IngestRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::Schema(format!("unreadable header: {e}")))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Vec::new());
    }
    for h in headers.iter() {
        if !REQUIRED.contains(&h) && !OPTIONAL.contains(&h) {
            return Err(IngestError::Schema(format!("unknown column {h:?}")));
        }
    }
    for r in REQUIRED {
        if !headers.iter().any(|h| h == r) {
            return Err(IngestError::Schema(format!("missing column {r:?}")));
        }
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<RawRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            IngestError::Value {
                line,
                message: e.to_string(),
            }
        })?;
        let line = out.len() as u64 + 2;
        let Some(index) = vars.index_of(&row.variable) else {
            return Err(IngestError::Schema(format!("line {line}: unknown variable {:?}", row.variable)));
        };
        if row.class.is_empty() || row.model_id.is_empty() {
            return Err(IngestError::Schema(format!("line {line}: empty class or model_id")));
        }
        let value: f64 = row.value.parse().map_err(|_| IngestError::Value {
            line,
            message: format!("{:?} is not a number", row.value),
        })?;
        if !value.is_finite() {
            return Err(IngestError::Value {
                line,
                message: format!("value {value} is not finite"),
            });
        }
        let unit = non_empty(row.unit);
        if let Some(u) = &unit {
            if u != vars.unit(index) {
                return Err(IngestError::Schema(format!(
                    "line {line}: unit {u:?} for {:?}, expected {:?}",
                    row.variable,
                    vars.unit(index)
                )));
            }
        }
        out.push(IngestRecord {
            class_label: row.class,
            model_id: row.model_id,
            variable: row.variable,
            value,
            unit,
            timestamp: non_empty(row.timestamp),
        });
    }
    Ok(out)
}

/// Groups records into a batch, checking that every model supplies every
/// variable exactly once.
pub fn group_records(records: &[IngestRecord], vars: &VariableSet, declared: &[DeclaredModel]) -> Result<ModelOutputBatch> {
    if records.is_empty() {
        let model_id = declared.first().map(|d| d.model_id.clone()).unwrap_or_default();
        return Err(IngestError::IncompleteModel {
            model_id,
            variable: vars.name(0).to_string(),
        });
    }
    let q = vars.len();
    let mut class_order: Vec<String> = Vec::new();
    let mut model_order: Vec<(String, String)> = Vec::new();
    let mut model_class: HashMap<String, String> = HashMap::new();
    let mut values: HashMap<String, Vec<Option<f64>>> = HashMap::new();
    let mut timestamps: HashMap<String, String> = HashMap::new();

    for r in records {
        match model_class.get(&r.model_id) {
            Some(c) if c != &r.class_label => {
                return Err(IngestError::Schema(format!(
                    "model {:?} appears in classes {c:?} and {:?}",
                    r.model_id, r.class_label
                )))
            }
            Some(_) => {}
            None => {
                model_class.insert(r.model_id.clone(), r.class_label.clone());
                model_order.push((r.class_label.clone(), r.model_id.clone()));
                if !class_order.contains(&r.class_label) {
                    class_order.push(r.class_label.clone());
                }
            }
        }
        let slot = values.entry(r.model_id.clone()).or_insert_with(|| vec![None; q]);
        let index = vars.index_of(&r.variable).expect("validated when read");
        if slot[index].replace(r.value).is_some() {
            return Err(IngestError::Schema(format!(
                "duplicate row for model {:?}, variable {:?}",
                r.model_id, r.variable
            )));
        }
        if let Some(ts) = &r.timestamp {
            timestamps.entry(r.model_id.clone()).or_insert_with(|| ts.clone());
        }
    }

    if !declared.is_empty() {
        let seen: HashSet<(&str, &str)> = model_order.iter().map(|(c, m)| (c.as_str(), m.as_str())).collect();
        for d in declared {
            if !seen.contains(&(d.class.as_str(), d.model_id.as_str())) {
                return Err(IngestError::IncompleteModel {
                    model_id: d.model_id.clone(),
                    variable: vars.name(0).to_string(),
                });
            }
        }
        let expected: HashSet<(&str, &str)> = declared.iter().map(|d| (d.class.as_str(), d.model_id.as_str())).collect();
        if let Some((c, m)) = model_order.iter().find(|(c, m)| !expected.contains(&(c.as_str(), m.as_str()))) {
            return Err(IngestError::Schema(format!("undeclared model {m:?} in class {c:?}")));
        }
    }

    let mut classes: Vec<ClassOutputs> = class_order
        .iter()
        .map(|c| ClassOutputs {
            label: c.clone(),
            models: Vec::new(),
        })
        .collect();
    for (class, model_id) in &model_order {
        let slot = &values[model_id];
        if let Some(missing) = slot.iter().position(|v| v.is_none()) {
            return Err(IngestError::IncompleteModel {
                model_id: model_id.clone(),
                variable: vars.name(missing).to_string(),
            });
        }
        let target = classes.iter_mut().find(|c| &c.label == class).expect("class recorded");
        target.models.push(ModelOutput {
            model_id: model_id.clone(),
            timestamp: timestamps.get(model_id).cloned(),
            values: slot.iter().map(|v| v.expect("checked")).collect(),
        });
    }
    Ok(ModelOutputBatch {
        variables: vars.names().to_vec(),
        classes,
    })
}

pub fn parse_outputs<R: Read>(reader: R, vars: &VariableSet, declared: &[DeclaredModel]) -> Result<ModelOutputBatch> {
    let records = read_records(reader, vars)?;
    group_records(&records, vars, declared)
}

pub fn ingest_outputs(path: &Path, vars: &VariableSet, declared: &[DeclaredModel]) -> Result<ModelOutputBatch> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_outputs(file, vars, declared)
}
