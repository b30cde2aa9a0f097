//! Domain types shared across the crate.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-dimension real vector with finite entries.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("EmbeddingVector").field(&self.0).finish()
    }
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding of dimension 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0);
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        crate::tensor::norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// The six retrieval settings an instruction can select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Traditional ReID: same person, same clothes.
    Trad,
    /// Clothes-changing.
    Cc,
    /// Clothes-template based clothes-changing.
    Ctcc,
    /// Visible-infrared.
    Vi,
    /// Text-to-image.
    T2i,
    /// Language-instructed.
    Li,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Trad,
        TaskKind::Cc,
        TaskKind::Ctcc,
        TaskKind::Vi,
        TaskKind::T2i,
        TaskKind::Li,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Trad => "trad",
            TaskKind::Cc => "cc",
            TaskKind::Ctcc => "ctcc",
            TaskKind::Vi => "vi",
            TaskKind::T2i => "t2i",
            TaskKind::Li => "li",
        }
    }

    /// Queries of these tasks must bring their own instruction payload.
    pub fn query_needs_instruction(self) -> bool {
        matches!(self, TaskKind::Ctcc | TaskKind::Li | TaskKind::T2i)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Instruction {
    Text { text: String },
    Embedding { embedding: EmbeddingVector },
}

impl Instruction {
    pub fn text(s: impl Into<String>) -> Self {
        Instruction::Text { text: s.into() }
    }

    pub fn embedding(v: EmbeddingVector) -> Self {
        Instruction::Embedding { embedding: v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Query => "query",
            Role::Gallery => "gallery",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Role::Query),
            "gallery" => Ok(Role::Gallery),
            _ => Err(Error::InvalidArgument(format!("unknown role `{s}`"))),
        }
    }
}

/// One query or gallery entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonRecord {
    pub record_id: String,
    pub identity: usize,
    pub role: Role,
    pub task: TaskKind,
    /// Absent only for text-to-image queries.
    pub image_embedding: Option<EmbeddingVector>,
    pub instruction: Option<Instruction>,
}

impl PersonRecord {
    pub fn is_t2i_query(&self) -> bool {
        self.task == TaskKind::T2i && self.role == Role::Query
    }
}

/// One way a dataset can be malformed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DimensionMismatch {
        record: String,
        expected: usize,
        found: usize,
    },
    MissingImage {
        record: String,
    },
    MissingInstruction {
        record: String,
        task: TaskKind,
    },
    DuplicateId {
        record: String,
    },
    NonDenseIdentities {
        missing: Vec<usize>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DimensionMismatch {
                record,
                expected,
                found,
            } => write!(f, "{record}: dimension {found}, expected {expected}"),
            Violation::MissingImage { record } => write!(f, "{record}: missing image embedding"),
            Violation::MissingInstruction { record, task } => {
                write!(f, "{record}: {task} query without instruction")
            }
            Violation::DuplicateId { record } => write!(f, "{record}: duplicate record id"),
            Violation::NonDenseIdentities { missing } => {
                write!(f, "identity labels not dense, missing {missing:?}")
            }
        }
    }
}

/// Checks every record-level and dataset-level invariant; an empty report
/// means the dataset is well formed.
pub fn validate_dataset(records: &[PersonRecord]) -> Vec<Violation> {
    let mut out = Vec::new();
    let dim = records
        .iter()
        .find_map(|r| r.image_embedding.as_ref().map(EmbeddingVector::dim))
        .or_else(|| {
            records.iter().find_map(|r| match &r.instruction {
                Some(Instruction::Embedding { embedding }) => Some(embedding.dim()),
                _ => None,
            })
        });
    let mut seen = HashMap::new();

    for r in records {
        if seen.insert(r.record_id.as_str(), ()).is_some() {
            out.push(Violation::DuplicateId {
                record: r.record_id.clone(),
            });
        }
        match &r.image_embedding {
            None if !r.is_t2i_query() => out.push(Violation::MissingImage {
                record: r.record_id.clone(),
            }),
            Some(e) if Some(e.dim()) != dim => out.push(Violation::DimensionMismatch {
                record: r.record_id.clone(),
                expected: dim.unwrap_or(0),
                found: e.dim(),
            }),
            _ => {}
        }
        match &r.instruction {
            None if r.role == Role::Query && r.task.query_needs_instruction() => {
                out.push(Violation::MissingInstruction {
                    record: r.record_id.clone(),
                    task: r.task,
                })
            }
            Some(Instruction::Embedding { embedding }) if Some(embedding.dim()) != dim => {
                out.push(Violation::DimensionMismatch {
                    record: r.record_id.clone(),
                    expected: dim.unwrap_or(0),
                    found: embedding.dim(),
                })
            }
            _ => {}
        }
    }

    let ids: BTreeSet<usize> = records.iter().map(|r| r.identity).collect();
    if let Some(&max) = ids.iter().next_back() {
        let missing: Vec<usize> = (0..=max).filter(|i| !ids.contains(i)).collect();
        if !missing.is_empty() {
            out.push(Violation::NonDenseIdentities { missing });
        }
    }
    out
}

/// Number of distinct identities, assuming a validated (dense) dataset.
pub fn identity_count(records: &[PersonRecord]) -> usize {
    records.iter().map(|r| r.identity + 1).max().unwrap_or(0)
}

/// How deep into each rank list metrics look.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Depth {
    #[default]
    Full,
    Top(usize),
}

impl Depth {
    pub fn resolve(self, len: usize) -> usize {
        match self {
            Depth::Full => len,
            Depth::Top(n) => n.min(len),
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Depth::Full => f.write_str("full"),
            Depth::Top(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Depth::Full);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Depth::Top(n)),
            _ => Err(Error::InvalidArgument(format!(
                "depth must be a positive integer or `full`, got `{s}`"
            ))),
        }
    }
}

impl Serialize for Depth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Depth::Full => s.serialize_str("full"),
            Depth::Top(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Depth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("depth must be positive")),
            Raw::N(n) => Ok(Depth::Top(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyQueryPolicy {
    /// Queries with no surviving positive score 0 and stay in the mean.
    #[default]
    CountAsZero,
    /// Such queries are dropped from the mean.
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEvalConfig {
    pub tau: f64,
    pub depth: Depth,
    pub empty_query_policy: EmptyQueryPolicy,
}

impl Default for RankEvalConfig {
    fn default() -> Self {
        Self {
            tau: -1.0,
            depth: Depth::Full,
            empty_query_policy: EmptyQueryPolicy::CountAsZero,
        }
    }
}

impl RankEvalConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    #[serde(default)]
    pub gallery_index: usize,
    pub gallery_id: String,
    pub score: f64,
    pub identity_match: bool,
    /// Cosine between query and gallery instructions; `None` when either
    /// side has no instruction.
    pub instr_cos: Option<f64>,
}

/// One query's gallery ordering, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankList {
    #[serde(default)]
    pub query_index: usize,
    pub query_id: String,
    pub ranked: Vec<RankedItem>,
}

impl RankList {
    /// Builds a list directly from `(identity_match, instr_cos)` pairs, in
    /// rank order. Mostly useful for metric tests.
    pub fn from_flags(query_index: usize, flags: &[(bool, Option<f64>)]) -> Self {
        RankList {
            query_index,
            query_id: format!("q{query_index}"),
            ranked: flags
                .iter()
                .enumerate()
                .map(|(i, &(identity_match, instr_cos))| RankedItem {
                    gallery_index: i,
                    gallery_id: format!("g{i}"),
                    score: -(i as f64),
                    identity_match,
                    instr_cos,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, identity: usize, role: Role, task: TaskKind) -> PersonRecord {
        PersonRecord {
            record_id: id.into(),
            identity,
            role,
            task,
            image_embedding: Some(EmbeddingVector::new(vec![1.0, 0.0]).unwrap()),
            instruction: None,
        }
    }

    #[test]
    fn well_formed_dataset_has_empty_report() {
        let records = vec![
            rec("a", 0, Role::Query, TaskKind::Trad),
            rec("b", 0, Role::Gallery, TaskKind::Trad),
            rec("c", 1, Role::Query, TaskKind::Cc),
            rec("d", 1, Role::Gallery, TaskKind::Cc),
        ];
        assert!(validate_dataset(&records).is_empty());
    }

    #[test]
    fn t2i_query_without_instruction() {
        let mut q = rec("q", 0, Role::Query, TaskKind::T2i);
        q.image_embedding = None;
        let report = validate_dataset(&[q, rec("g", 0, Role::Gallery, TaskKind::T2i)]);
        assert_eq!(
            report,
            vec![Violation::MissingInstruction {
                record: "q".into(),
                task: TaskKind::T2i
            }]
        );
    }

    #[test]
    fn identity_gap_is_reported() {
        let report = validate_dataset(&[
            rec("a", 0, Role::Query, TaskKind::Trad),
            rec("b", 2, Role::Gallery, TaskKind::Trad),
        ]);
        assert_eq!(report, vec![Violation::NonDenseIdentities { missing: vec![1] }]);
    }

    #[test]
    fn dimension_and_image_violations() {
        let mut bad = rec("b", 0, Role::Gallery, TaskKind::Trad);
        bad.image_embedding = Some(EmbeddingVector::new(vec![1.0, 2.0, 3.0]).unwrap());
        let mut missing = rec("c", 0, Role::Gallery, TaskKind::Trad);
        missing.image_embedding = None;
        let report = validate_dataset(&[rec("a", 0, Role::Query, TaskKind::Trad), bad, missing]);
        assert_eq!(report.len(), 2);
        assert!(matches!(report[0], Violation::DimensionMismatch { found: 3, .. }));
        assert!(matches!(report[1], Violation::MissingImage { .. }));
    }

    #[test]
    fn task_kind_round_trips() {
        for k in TaskKind::ALL {
            assert_eq!(k.to_string().parse::<TaskKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(serde_json::from_str::<TaskKind>(&json).unwrap(), k);
        }
        assert!("reid".parse::<TaskKind>().is_err());
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
        assert!(serde_json::from_str::<EmbeddingVector>("[1.0, 2.0]").is_ok());
    }

    #[test]
    fn depth_parsing() {
        assert_eq!("full".parse::<Depth>().unwrap(), Depth::Full);
        assert_eq!("7".parse::<Depth>().unwrap(), Depth::Top(7));
        assert!("0".parse::<Depth>().is_err());
        assert_eq!(Depth::Top(10).resolve(4), 4);
    }
}
