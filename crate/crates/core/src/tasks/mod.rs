//! Instruction tasks, label stringification, numeric answer extraction,
//! deterministic splits and the JSONL dataset format.

pub mod synth;

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::molgraph::{parse_smiles, SmilesError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Positive,
    Negative,
    Value(f64),
}

impl Label {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(&self) -> Option<bool> {
        match self {
            Label::Positive => Some(true),
            Label::Negative => Some(false),
            Label::Value(_) => None,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Label::Value(v) => Some(v),
            _ => None,
        }
    }

    fn fits(&self, kind: TaskKind) -> bool {
        match (self, kind) {
            (Label::Value(v), TaskKind::Regression) => v.is_finite(),
            (Label::Positive | Label::Negative, TaskKind::Classification) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub smiles: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task_id: String,
    pub kind: TaskKind,
    pub instruction: String,
    pub samples: Vec<Sample>,
}

/// Rounds half away from zero to two decimals.
pub fn round2(x: f64) -> f64 {
    let r = (x * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Label as the text the decoder is trained to emit: `Yes`/`No` for classes,
/// integers unchanged, other reals rounded to two decimals.
pub fn format_label(label: &Label) -> String {
    match *label {
        Label::Positive => "Yes".to_string(),
        Label::Negative => "No".to_string(),
        Label::Value(v) if v.fract() == 0.0 && v.abs() < 1e15 => format!("{}", v as i64),
        Label::Value(v) => format!("{:.2}", round2(v)),
    }
}

/// Inverse of [`format_label`] for classification strings.
pub fn parse_class_label(s: &str) -> Option<Label> {
    match s {
        "Yes" => Some(Label::Positive),
        "No" => Some(Label::Negative),
        _ => None,
    }
}

/// Answer template, kept verbatim including its reluctant quantifiers.
pub const NUMBER_PATTERN: &str = r"-?\d+\.?\d*e??\d*?";

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(NUMBER_PATTERN).expect("valid pattern"))
}

/// First number in generated text, or `None` when nothing matches.
pub fn extract_number(generated: &str) -> Option<f64> {
    number_regex()
        .find(generated)
        .and_then(|m| m.as_str().parse::<f64>().ok())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("need at least 10 samples to split, got {0}")]
pub struct TooFewSamples(pub usize);

/// Seeded shuffle then an 80/10/10 cut.
pub fn deterministic_split(n: usize, seed: u64) -> Result<Split, TooFewSamples> {
    if n < 10 {
        return Err(TooFewSamples(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let test = idx.split_off(n_train + n_valid);
    let valid = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        valid,
        test,
    })
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown task kind {kind:?}")]
    UnknownTaskKind { line: usize, kind: String },
    #[error("line {line}: duplicate task id {task_id:?}")]
    DuplicateTask { line: usize, task_id: String },
    #[error("line {line}: invalid SMILES: {source}")]
    InvalidSmiles {
        line: usize,
        #[source]
        source: SmilesError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DatasetError {
    pub fn code(&self) -> &'static str {
        match self {
            DatasetError::Parse { .. } => "ParseError",
            DatasetError::UnknownTaskKind { .. } => "UnknownTaskKind",
            DatasetError::DuplicateTask { .. } => "DuplicateTask",
            DatasetError::InvalidSmiles { .. } => "InvalidSmiles",
            DatasetError::Io(_) => "IoError",
        }
    }
}

#[derive(Serialize)]
struct HeaderLine<'a> {
    task_id: &'a str,
    kind: &'a str,
    instruction: &'a str,
}

#[derive(Serialize)]
struct SampleLine<'a> {
    task_id: &'a str,
    smiles: &'a str,
    label: Value,
}

fn label_json(label: &Label) -> Value {
    match *label {
        Label::Positive => Value::from("Yes"),
        Label::Negative => Value::from("No"),
        Label::Value(v) => Value::from(v),
    }
}

pub fn write_dataset<W: Write>(tasks: &[TaskRecord], mut out: W) -> std::io::Result<()> {
    for t in tasks {
        let header = HeaderLine {
            task_id: &t.task_id,
            kind: t.kind.as_str(),
            instruction: &t.instruction,
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("serializable"))?;
        for s in &t.samples {
            let line = SampleLine {
                task_id: &t.task_id,
                smiles: &s.smiles,
                label: label_json(&s.label),
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("serializable"))?;
        }
    }
    out.flush()
}

pub fn save_dataset(tasks: &[TaskRecord], path: &Path) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path)?;
    write_dataset(tasks, std::io::BufWriter::new(file))?;
    Ok(())
}

fn str_field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, line: usize) -> Result<&'a str, DatasetError> {
    obj.get(key)
        .ok_or_else(|| DatasetError::Parse {
            line,
            message: format!("missing field {key:?}"),
        })?
        .as_str()
        .ok_or_else(|| DatasetError::Parse {
            line,
            message: format!("field {key:?} must be a string"),
        })
}

/// Parses JSONL; line numbers in errors are 1-based.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<TaskRecord>, DatasetError> {
    let mut tasks: Vec<TaskRecord> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(DatasetError::Parse {
                line: line_no,
                message: "expected a JSON object".into(),
            });
        };
        let task_id = str_field(&obj, "task_id", line_no)?;
        if obj.contains_key("kind") || obj.contains_key("instruction") {
            let kind = match str_field(&obj, "kind", line_no)? {
                "classification" => TaskKind::Classification,
                "regression" => TaskKind::Regression,
                other => {
                    return Err(DatasetError::UnknownTaskKind {
                        line: line_no,
                        kind: other.to_string(),
                    })
                }
            };
            let instruction = str_field(&obj, "instruction", line_no)?;
            if !seen.insert(task_id.to_string()) {
                return Err(DatasetError::DuplicateTask {
                    line: line_no,
                    task_id: task_id.to_string(),
                });
            }
            tasks.push(TaskRecord {
                task_id: task_id.to_string(),
                kind,
                instruction: instruction.to_string(),
                samples: Vec::new(),
            });
            continue;
        }
        let Some(task) = tasks.last_mut().filter(|t| t.task_id == task_id) else {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("sample for task {task_id:?} does not follow its header"),
            });
        };
        let smiles = str_field(&obj, "smiles", line_no)?;
        parse_smiles(smiles).map_err(|source| DatasetError::InvalidSmiles { line: line_no, source })?;
        let label = match obj.get("label") {
            Some(Value::String(s)) => parse_class_label(s),
            Some(Value::Number(n)) => n.as_f64().map(Label::Value),
            _ => None,
        }
        .filter(|l| l.fits(task.kind))
        .ok_or_else(|| DatasetError::Parse {
            line: line_no,
            message: format!("missing or invalid label for {} task", task.kind.as_str()),
        })?;
        task.samples.push(Sample {
            smiles: smiles.to_string(),
            label,
        });
    }
    Ok(tasks)
}

pub fn load_dataset(path: &Path) -> Result<Vec<TaskRecord>, DatasetError> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn format_label_cases() {
        assert_eq!(format_label(&Label::Positive), "Yes");
        assert_eq!(format_label(&Label::Negative), "No");
        assert_eq!(format_label(&Label::Value(5.1027)), "5.10");
        assert_eq!(format_label(&Label::Value(7.0)), "7");
        assert_eq!(format_label(&Label::Value(-3.0)), "-3");
        assert_eq!(format_label(&Label::Value(2.345)), "2.35");
        assert_eq!(format_label(&Label::Value(-2.5)), "-2.50");
        assert_eq!(format_label(&Label::Value(-0.001)), "0.00");
    }

    #[test]
    fn class_labels_round_trip() {
        for l in [Label::Positive, Label::Negative] {
            assert_eq!(parse_class_label(&format_label(&l)), Some(l));
        }
    }

    #[test]
    fn extraction_matches_reference_engine() {
        // Expected matches produced by a backtracking regex engine on the same pattern.
        let cases = [
            ("-3.21", Some(-3.21)),
            ("Yes", None),
            ("value 5.10 found", Some(5.10)),
            ("1.5e3", Some(1.5)),
            ("abc -0.5 and 7", Some(-0.5)),
            ("12.", Some(12.0)),
            ("--4", Some(-4.0)),
            ("3 . 2", Some(3.0)),
            ("7e-2", Some(7.0)),
            (".5", Some(5.0)),
        ];
        for (s, want) in cases {
            assert_eq!(extract_number(s), want, "{s:?}");
        }
    }

    proptest! {
        #[test]
        fn extraction_inverts_formatting(x in -1e6f64..1e6) {
            let got = extract_number(&format_label(&Label::Value(x))).unwrap();
            prop_assert_eq!(got, round2(x));
        }

        #[test]
        fn integers_extract_exactly(k in -100_000i64..100_000) {
            let got = extract_number(&format_label(&Label::Value(k as f64))).unwrap();
            prop_assert_eq!(got, k as f64);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = deterministic_split(10, 0).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        assert_eq!(
            deterministic_split(100, 4).unwrap(),
            deterministic_split(100, 4).unwrap()
        );
        assert_ne!(
            deterministic_split(100, 4).unwrap(),
            deterministic_split(100, 5).unwrap()
        );
        let s = deterministic_split(157, 9).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..157).collect::<Vec<_>>());
        assert_eq!(deterministic_split(9, 0), Err(TooFewSamples(9)));
    }

    fn sample_tasks() -> Vec<TaskRecord> {
        vec![
            TaskRecord {
                task_id: "ring".into(),
                kind: TaskKind::Classification,
                instruction: "Does the molecule contain a ring?".into(),
                samples: vec![
                    Sample {
                        smiles: "c1ccccc1".into(),
                        label: Label::Positive,
                    },
                    Sample {
                        smiles: "CCO".into(),
                        label: Label::Negative,
                    },
                ],
            },
            TaskRecord {
                task_id: "size".into(),
                kind: TaskKind::Regression,
                instruction: "How many heavy atoms?".into(),
                samples: vec![Sample {
                    smiles: "CCO".into(),
                    label: Label::Value(3.0),
                }],
            },
        ]
    }

    #[test]
    fn dataset_round_trip() {
        let tasks = sample_tasks();
        let mut buf = Vec::new();
        write_dataset(&tasks, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), tasks);
    }

    #[test]
    fn dataset_errors_name_lines() {
        let missing = "{\"task_id\":\"a\",\"kind\":\"classification\",\"instruction\":\"x\"}\n{\"task_id\":\"a\",\"label\":\"Yes\"}\n";
        assert!(matches!(
            read_dataset(missing.as_bytes()),
            Err(DatasetError::Parse { line: 2, .. })
        ));
        let kind = "{\"task_id\":\"a\",\"kind\":\"ranking\",\"instruction\":\"x\"}\n";
        assert!(matches!(
            read_dataset(kind.as_bytes()),
            Err(DatasetError::UnknownTaskKind { line: 1, .. })
        ));
        let dup = "{\"task_id\":\"a\",\"kind\":\"regression\",\"instruction\":\"x\"}\n{\"task_id\":\"a\",\"kind\":\"regression\",\"instruction\":\"y\"}\n";
        assert!(matches!(
            read_dataset(dup.as_bytes()),
            Err(DatasetError::DuplicateTask { line: 2, .. })
        ));
        let bad_label = "{\"task_id\":\"a\",\"kind\":\"regression\",\"instruction\":\"x\"}\n{\"task_id\":\"a\",\"smiles\":\"C\",\"label\":\"Yes\"}\n";
        assert!(matches!(
            read_dataset(bad_label.as_bytes()),
            Err(DatasetError::Parse { line: 2, .. })
        ));
        let bad_smiles = "{\"task_id\":\"a\",\"kind\":\"regression\",\"instruction\":\"x\"}\n{\"task_id\":\"a\",\"smiles\":\"C(\",\"label\":1}\n";
        assert!(matches!(
            read_dataset(bad_smiles.as_bytes()),
            Err(DatasetError::InvalidSmiles { line: 2, .. })
        ));
    }
}
