//! Dataset files: FASTA sequences, FASTA-like dot-bracket structures,
//! an expression CSV (`id,e1,...,eE`) and a tab-separated label file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{normalize_sequence, parse_dot_bracket, RnaRecord};
use crate::error::{Error, Result};

pub const SEQUENCES_FILE: &str = "sequences.fasta";
pub const STRUCTURES_FILE: &str = "structures.fasta";
pub const EXPRESSION_FILE: &str = "expression.csv";
pub const LABELS_FILE: &str = "labels.tsv";

/// Paths of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFiles {
    pub sequences: PathBuf,
    pub structures: PathBuf,
    pub expression: Option<PathBuf>,
    pub labels: PathBuf,
}

impl DatasetFiles {
    /// Standard file names inside `dir`; the expression file is optional.
    pub fn in_dir(dir: &Path) -> Self {
        let expression = dir.join(EXPRESSION_FILE);
        Self {
            sequences: dir.join(SEQUENCES_FILE),
            structures: dir.join(STRUCTURES_FILE),
            expression: expression.exists().then_some(expression),
            labels: dir.join(LABELS_FILE),
        }
    }

    pub fn load(&self) -> Result<Vec<RnaRecord>> {
        load_dataset(
            &self.sequences,
            &self.structures,
            self.expression.as_deref(),
            &self.labels,
        )
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `>id` headers followed by one or more content lines, concatenated.
fn parse_fasta(text: &str, what: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let id = header.split_whitespace().next().unwrap_or("").to_string();
            if id.is_empty() {
                return Err(Error::Ingestion(format!("{what} line {}: empty id", lineno + 1)));
            }
            out.push((id, String::new()));
        } else {
            match out.last_mut() {
                Some((_, body)) => body.push_str(line),
                None => {
                    return Err(Error::Ingestion(format!(
                        "{what} line {}: content before first '>' header",
                        lineno + 1
                    )))
                }
            }
        }
    }
    Ok(out)
}

fn index_unique(entries: Vec<(String, String)>, what: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::with_capacity(entries.len());
    for (id, body) in entries {
        if map.insert(id.clone(), body).is_some() {
            return Err(Error::Ingestion(format!("duplicate id {id} in {what}")));
        }
    }
    Ok(map)
}

fn parse_labels(text: &str) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Ingestion(format!(
                "labels line {}: expected \"id<TAB>label\"",
                lineno + 1
            )));
        };
        let label = label.trim().parse::<usize>().map_err(|_| {
            Error::Ingestion(format!("labels line {}: bad label {label:?}", lineno + 1))
        })?;
        out.push((id.trim().to_string(), label));
    }
    Ok(out)
}

fn parse_expression(text: &str) -> Result<HashMap<String, Vec<f64>>> {
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r')).enumerate();
    let (_, header) = lines
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::Ingestion("expression file is empty".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first().map(|c| c.trim()) != Some("id") {
        return Err(Error::Ingestion("expression header must start with \"id\"".into()));
    }
    let width = cols.len() - 1;
    let mut out = HashMap::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + 1 {
            return Err(Error::Ingestion(format!(
                "expression row {} has {} values, header declares {}",
                lineno + 1,
                fields.len() - 1,
                width
            )));
        }
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::Ingestion(format!("expression row {}: bad value {f:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let id = fields[0].trim().to_string();
        if out.insert(id.clone(), values).is_some() {
            return Err(Error::Ingestion(format!("duplicate id {id} in expression file")));
        }
    }
    Ok(out)
}

/// Joins the four files on the ids listed in the labels file, in label-file order.
pub fn load_dataset(
    seq_path: &Path,
    struct_path: &Path,
    expr_path: Option<&Path>,
    labels_path: &Path,
) -> Result<Vec<RnaRecord>> {
    let sequences = index_unique(parse_fasta(&read(seq_path)?, "sequences")?, "sequences")?;
    let structures = index_unique(parse_fasta(&read(struct_path)?, "structures")?, "structures")?;
    let expression = expr_path.map(|p| read(p).and_then(|t| parse_expression(&t))).transpose()?;
    let labels = parse_labels(&read(labels_path)?)?;

    let mut missing: Vec<String> = Vec::new();
    for (id, _) in &labels {
        let mut absent = Vec::new();
        if !sequences.contains_key(id) {
            absent.push("sequences");
        }
        if !structures.contains_key(id) {
            absent.push("structures");
        }
        if expression.as_ref().is_some_and(|e| !e.contains_key(id)) {
            absent.push("expression");
        }
        if !absent.is_empty() {
            missing.push(format!("{id} ({})", absent.join(", ")));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Ingestion(format!(
            "ids listed in labels but missing from modality files: {}",
            missing.join("; ")
        )));
    }

    labels
        .into_iter()
        .map(|(id, label)| {
            let record_err = |message: String| Error::Record {
                id: id.clone(),
                message,
            };
            let sequence = normalize_sequence(&sequences[&id]).map_err(|e| record_err(e.to_string()))?;
            let structure = structures[&id].clone();
            parse_dot_bracket(&structure).map_err(|e| record_err(e.to_string()))?;
            if sequence.len() != structure.len() {
                return Err(record_err(format!(
                    "sequence length {} differs from structure length {}",
                    sequence.len(),
                    structure.len()
                )));
            }
            let expression = expression.as_ref().map(|e| e[&id].clone());
            Ok(RnaRecord {
                id,
                sequence,
                structure,
                expression,
                label,
            })
        })
        .collect()
}

/// Writes `records` in the standard layout under `dir`. The expression file is
/// written only when every record carries an expression vector.
pub fn write_dataset(dir: &Path, records: &[RnaRecord]) -> Result<DatasetFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seqs = String::new();
    let mut structs = String::new();
    let mut labels = String::new();
    for r in records {
        let _ = writeln!(seqs, ">{}\n{}", r.id, r.sequence);
        let _ = writeln!(structs, ">{}\n{}", r.id, r.structure);
        let _ = writeln!(labels, "{}\t{}", r.id, r.label);
    }
    let files = DatasetFiles {
        sequences: dir.join(SEQUENCES_FILE),
        structures: dir.join(STRUCTURES_FILE),
        expression: None,
        labels: dir.join(LABELS_FILE),
    };
    let write = |p: &Path, s: &str| fs::write(p, s).map_err(|e| Error::io(p, e));
    write(&files.sequences, &seqs)?;
    write(&files.structures, &structs)?;
    write(&files.labels, &labels)?;

    let width = records.first().and_then(|r| r.expression.as_ref()).map(Vec::len);
    let all_present = records.iter().all(|r| r.expression.as_ref().map(Vec::len) == width);
    let expression = match width {
        Some(w) if all_present => {
            let mut csv = String::from("id");
            for k in 1..=w {
                let _ = write!(csv, ",e{k}");
            }
            csv.push('\n');
            for r in records {
                csv.push_str(&r.id);
                for v in r.expression.as_ref().expect("checked above") {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
            }
            let p = dir.join(EXPRESSION_FILE);
            write(&p, &csv)?;
            Some(p)
        }
        _ => None,
    };
    Ok(DatasetFiles { expression, ..files })
}
