//! Interaction logs: CSV ingestion, windowing, student-level folds, batching
//! and a slip/guess student simulator.
//!
//! CSV schema (header required):
//! `student_id,question_id,concept_id,correct,timestamp,anomaly`, where
//! `concept_id`, `timestamp` and `anomaly` may be empty or absent.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;

pub const CSV_COLUMNS: [&str; 6] = [
    "student_id",
    "question_id",
    "concept_id",
    "correct",
    "timestamp",
    "anomaly",
];
const REQUIRED_COLUMNS: [&str; 3] = ["student_id", "question_id", "correct"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("line {line}: invalid {field} `{value}`")]
    InvalidValue {
        line: u64,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: unknown question id `{id}`")]
    UnknownQuestion { line: u64, id: String },
    #[error("no sequence with at least 2 interactions")]
    Empty,
    #[error("need at least {folds} students for {folds} folds, got {students}")]
    TooFewStudents { students: usize, folds: usize },
    #[error("invalid simulator config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anomaly {
    None,
    Slip,
    Guess,
}

impl fmt::Display for Anomaly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Anomaly::None => "none",
            Anomaly::Slip => "slip",
            Anomaly::Guess => "guess",
        })
    }
}

impl FromStr for Anomaly {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "none" => Ok(Anomaly::None),
            "slip" => Ok(Anomaly::Slip),
            "guess" => Ok(Anomaly::Guess),
            _ => Err(()),
        }
    }
}

/// One parsed CSV row before question re-indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub student_id: String,
    pub question_id: String,
    pub concept_id: Option<String>,
    pub correct: u8,
    pub timestamp: Option<i64>,
    pub anomaly: Option<Anomaly>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSequence {
    pub student_id: String,
    /// Dense question indices.
    pub questions: Vec<usize>,
    pub responses: Vec<u8>,
    pub concepts: Vec<Option<String>>,
    pub timestamps: Vec<Option<i64>>,
    pub anomalies: Vec<Option<Anomaly>>,
}

impl StudentSequence {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            student_id: self.student_id.clone(),
            questions: self.questions[start..end].to_vec(),
            responses: self.responses[start..end].to_vec(),
            concepts: self.concepts[start..end].to_vec(),
            timestamps: self.timestamps[start..end].to_vec(),
            anomalies: self.anomalies[start..end].to_vec(),
        }
    }

    pub fn has_anomaly_labels(&self) -> bool {
        self.anomalies.iter().all(Option::is_some)
    }
}

/// Dense question index ↔ original id. Ids are sorted (numerically when
/// every id is an integer) so the mapping does not depend on row order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct QuestionVocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for QuestionVocab {
    fn from(ids: Vec<String>) -> Self {
        Self::new(ids)
    }
}

impl From<QuestionVocab> for Vec<String> {
    fn from(v: QuestionVocab) -> Self {
        v.ids
    }
}

impl QuestionVocab {
    pub fn new(mut ids: Vec<String>) -> Self {
        ids.sort();
        ids.dedup();
        if ids.iter().all(|s| s.parse::<i64>().is_ok()) {
            ids.sort_by_key(|s| s.parse::<i64>().unwrap());
        }
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<StudentSequence>,
    pub vocab: QuestionVocab,
}

impl Dataset {
    /// Groups records by student (first-appearance order), orders each group
    /// by timestamp when every row has one, and re-indexes questions.
    /// Sequences shorter than 2 are dropped.
    pub fn from_records(
        records: &[(u64, InteractionRecord)],
        vocab: Option<&QuestionVocab>,
    ) -> Result<Self, DataError> {
        let vocab = match vocab {
            Some(v) => v.clone(),
            None => QuestionVocab::new(records.iter().map(|(_, r)| r.question_id.clone()).collect()),
        };
        let mut order: Vec<&str> = Vec::new();
        let mut groups: HashMap<&str, Vec<&(u64, InteractionRecord)>> = HashMap::new();
        for rec in records {
            let id = rec.1.student_id.as_str();
            groups
                .entry(id)
                .or_insert_with(|| {
                    order.push(id);
                    Vec::new()
                })
                .push(rec);
        }
        let mut sequences = Vec::new();
        for id in order {
            let mut rows = groups.remove(id).unwrap();
            if rows.iter().all(|(_, r)| r.timestamp.is_some()) {
                rows.sort_by_key(|(_, r)| r.timestamp.unwrap());
            }
            if rows.len() < 2 {
                continue;
            }
            let mut seq = StudentSequence {
                student_id: id.to_string(),
                questions: Vec::with_capacity(rows.len()),
                responses: Vec::with_capacity(rows.len()),
                concepts: Vec::with_capacity(rows.len()),
                timestamps: Vec::with_capacity(rows.len()),
                anomalies: Vec::with_capacity(rows.len()),
            };
            for (line, r) in rows {
                let q = vocab.index_of(&r.question_id).ok_or_else(|| DataError::UnknownQuestion {
                    line: *line,
                    id: r.question_id.clone(),
                })?;
                seq.questions.push(q);
                seq.responses.push(r.correct);
                seq.concepts.push(r.concept_id.clone());
                seq.timestamps.push(r.timestamp);
                seq.anomalies.push(r.anomaly);
            }
            sequences.push(seq);
        }
        if sequences.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Self { sequences, vocab })
    }

    pub fn n_questions(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.sequences.iter().map(StudentSequence::len).sum()
    }

    pub fn student_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.sequences
            .iter()
            .filter(|s| seen.insert(s.student_id.clone()))
            .map(|s| s.student_id.clone())
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct RawRow {
    student_id: String,
    question_id: String,
    #[serde(default)]
    concept_id: Option<String>,
    correct: String,
    #[serde(default)]
    timestamp: Option<String>,
    #[serde(default)]
    anomaly: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.trim().is_empty())
}

/// Parses rows, returning each record with its 1-based file line.
pub fn read_records<R: Read>(reader: R) -> Result<Vec<(u64, InteractionRecord)>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for required in REQUIRED_COLUMNS {
        if !headers.iter().any(|h| h == required) {
            return Err(DataError::MissingColumn(required.into()));
        }
    }
    if let Some(extra) = headers.iter().find(|h| !CSV_COLUMNS.contains(h)) {
        return Err(DataError::UnknownColumn(extra.into()));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<RawRow>() {
        let row = row?;
        // header is line 1; the reader has already advanced past this row
        let line = out.len() as u64 + 2;
        let correct = match row.correct.as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::InvalidValue {
                    line,
                    field: "correct",
                    value: other.into(),
                })
            }
        };
        let timestamp = match non_empty(row.timestamp) {
            None => None,
            Some(t) => Some(t.parse::<i64>().map_err(|_| DataError::InvalidValue {
                line,
                field: "timestamp",
                value: t.clone(),
            })?),
        };
        let anomaly = match non_empty(row.anomaly) {
            None => None,
            Some(a) => Some(a.parse::<Anomaly>().map_err(|_| DataError::InvalidValue {
                line,
                field: "anomaly",
                value: a.clone(),
            })?),
        };
        if row.student_id.is_empty() || row.question_id.is_empty() {
            let field = if row.student_id.is_empty() { "student_id" } else { "question_id" };
            return Err(DataError::InvalidValue {
                line,
                field,
                value: String::new(),
            });
        }
        out.push((
            line,
            InteractionRecord {
                student_id: row.student_id,
                question_id: row.question_id,
                concept_id: non_empty(row.concept_id),
                correct,
                timestamp,
                anomaly,
            },
        ));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let records = read_records(open(path)?)?;
    Dataset::from_records(&records, None)
}

/// Loads against a fixed vocabulary; unseen question ids are an error.
pub fn load_csv_with_vocab(path: &Path, vocab: &QuestionVocab) -> Result<Dataset, DataError> {
    let records = read_records(open(path)?)?;
    Dataset::from_records(&records, Some(vocab))
}

pub fn write_csv_to<W: Write>(dataset: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for seq in &dataset.sequences {
        for t in 0..seq.len() {
            w.write_record([
                seq.student_id.as_str(),
                dataset.vocab.id_of(seq.questions[t]),
                seq.concepts[t].as_deref().unwrap_or(""),
                if seq.responses[t] == 1 { "1" } else { "0" },
                &seq.timestamps[t].map(|v| v.to_string()).unwrap_or_default(),
                &seq.anomalies[t].map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_csv_to(dataset, &mut buf)?;
    write_atomic(path, &buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Consecutive non-overlapping chunks of at most `max_len`; chunks shorter
/// than 2 are dropped.
pub fn window(seq: &StudentSequence, max_len: usize) -> Vec<StudentSequence> {
    let max_len = max_len.max(2);
    (0..seq.len())
        .step_by(max_len)
        .map(|start| (start, (start + max_len).min(seq.len())))
        .filter(|(s, e)| e - s >= 2)
        .map(|(s, e)| seq.slice(s, e))
        .collect()
}

pub fn window_all(seqs: &[StudentSequence], max_len: usize) -> Vec<StudentSequence> {
    seqs.iter().flat_map(|s| window(s, max_len)).collect()
}

/// Student → fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, student: &str) -> Option<usize> {
        self.assignment.get(student).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle of the distinct students, then round-robin assignment.
pub fn split_folds(students: &[String], folds: usize, seed: u64) -> Result<FoldSplit, DataError> {
    let mut seen = std::collections::HashSet::new();
    let mut ids: Vec<String> = students.iter().filter(|s| seen.insert(*s)).cloned().collect();
    if folds == 0 || ids.len() < folds {
        return Err(DataError::TooFewStudents {
            students: ids.len(),
            folds,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids.into_iter().enumerate().map(|(i, s)| (s, i % folds)).collect();
    Ok(FoldSplit { folds, assignment })
}

/// Right-padded `(batch, len)` grid of interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub questions: Vec<usize>,
    pub responses: Vec<u8>,
    /// True at non-padding positions.
    pub valid: Vec<bool>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&StudentSequence]) -> Self {
        let batch = seqs.len();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut questions = vec![0; batch * len];
        let mut responses = vec![0; batch * len];
        let mut valid = vec![false; batch * len];
        for (b, s) in seqs.iter().enumerate() {
            let off = b * len;
            questions[off..off + s.len()].copy_from_slice(&s.questions);
            responses[off..off + s.len()].copy_from_slice(&s.responses);
            valid[off..off + s.len()].fill(true);
        }
        Self {
            batch,
            len,
            questions,
            responses,
            valid,
        }
    }

    /// Positions that carry a prediction target: valid and not the first step.
    pub fn target_mask(&self) -> Vec<bool> {
        self.valid
            .iter()
            .enumerate()
            .map(|(i, &v)| v && i % self.len != 0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub n_students: usize,
    pub n_questions: usize,
    pub n_concepts: usize,
    /// Probability that practicing an unmastered concept masters it.
    pub p_learn: f64,
    pub p_slip: f64,
    pub p_guess: f64,
    /// Probability that a concept starts mastered.
    pub prior_mastery: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            n_students: 200,
            n_questions: 50,
            n_concepts: 5,
            p_learn: 0.1,
            p_slip: 0.1,
            p_guess: 0.1,
            prior_mastery: 0.3,
            min_len: 30,
            max_len: 80,
            seed: 7,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let probs = [
            ("p_learn", self.p_learn),
            ("p_slip", self.p_slip),
            ("p_guess", self.p_guess),
            ("prior_mastery", self.prior_mastery),
        ];
        for (field, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::InvalidConfig {
                    field,
                    message: format!("must be in [0, 1], got {p}"),
                });
            }
        }
        let counts = [
            ("n_students", self.n_students),
            ("n_questions", self.n_questions),
            ("n_concepts", self.n_concepts),
        ];
        for (field, n) in counts {
            if n == 0 {
                return Err(DataError::InvalidConfig {
                    field,
                    message: "must be >= 1".into(),
                });
            }
        }
        if self.min_len < 2 {
            return Err(DataError::InvalidConfig {
                field: "min_len",
                message: format!("must be >= 2, got {}", self.min_len),
            });
        }
        if self.max_len < self.min_len {
            return Err(DataError::InvalidConfig {
                field: "max_len",
                message: format!("must be >= min_len ({}), got {}", self.min_len, self.max_len),
            });
        }
        Ok(())
    }

    /// Concept of a question: questions are dealt round-robin over concepts.
    pub fn concept_of(&self, question: usize) -> usize {
        question % self.n_concepts
    }
}

/// Simulated dataset together with the hidden mastery state at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub dataset: Dataset,
    pub mastery: Vec<Vec<bool>>,
}

pub fn simulate(cfg: &SimulatorConfig) -> Result<Dataset, DataError> {
    simulate_traced(cfg).map(|s| s.dataset)
}

pub fn simulate_traced(cfg: &SimulatorConfig) -> Result<Simulation, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut mastery_trace = Vec::with_capacity(cfg.n_students);
    let mut line = 2;
    for s in 0..cfg.n_students {
        let mut mastered: Vec<bool> = (0..cfg.n_concepts)
            .map(|_| rng.random_bool(cfg.prior_mastery))
            .collect();
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut trace = Vec::with_capacity(len);
        for step in 0..len {
            let q = rng.random_range(0..cfg.n_questions);
            let c = cfg.concept_of(q);
            if !mastered[c] && rng.random_bool(cfg.p_learn) {
                mastered[c] = true;
            }
            let (correct, anomaly) = if mastered[c] {
                if rng.random_bool(cfg.p_slip) {
                    (0, Anomaly::Slip)
                } else {
                    (1, Anomaly::None)
                }
            } else if rng.random_bool(cfg.p_guess) {
                (1, Anomaly::Guess)
            } else {
                (0, Anomaly::None)
            };
            trace.push(mastered[c]);
            records.push((
                line,
                InteractionRecord {
                    student_id: format!("s{s:04}"),
                    question_id: q.to_string(),
                    concept_id: Some(c.to_string()),
                    correct,
                    timestamp: Some(step as i64),
                    anomaly: Some(anomaly),
                },
            ));
            line += 1;
        }
        mastery_trace.push(trace);
    }
    let dataset = Dataset::from_records(&records, None)?;
    Ok(Simulation {
        dataset,
        mastery: mastery_trace,
    })
}
