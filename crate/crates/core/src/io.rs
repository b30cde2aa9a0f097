//! On-disk formats: OREB embedding files, the dataset manifest, rank-list
//! JSON lines, JSON reports and the named-block parameter file.
//!
//! Every writer goes through [`atomic_write`], so a reader never sees a
//! half-written file.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::editing::EditingLayerParams;
use crate::error::{Error, Result};
use crate::model::{validate_dataset, EmbeddingVector, Instruction, PersonRecord, RankList, Role, TaskKind};
use crate::retrieval::ModelParams;
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"OREB";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_embeddings(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::InvalidArgument("too many rows".into()))?;
    let dim = u32::try_from(m.cols()).map_err(|_| Error::InvalidArgument("dimension too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for &v in m.as_slice() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite("embedding payload"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses an OREB buffer; `path` is only used in error messages.
pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            path: path.into(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
        });
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let expected = HEADER_LEN + rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    if dim == 0 {
        return Err(Error::InvalidArgument(format!("{}: zero embedding dimension", path.display())));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Matrix::new(rows, dim, data)
}

pub fn write_embeddings(path: &Path, m: &Matrix) -> Result<()> {
    atomic_write(path, &encode_embeddings(m)?)
}

pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    decode_embeddings(&read_bytes(path)?, path)
}

/// A `(file, row)` pointer into an embedding file, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbRef {
    pub file: String,
    pub row: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionKind {
    Text,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInstruction {
    pub kind: InstructionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emb: Option<EmbRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub identity: usize,
    pub role: Role,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_emb: Option<EmbRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<ManifestInstruction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDocument {
    pub records: Vec<ManifestRecord>,
}

impl ManifestDocument {
    /// Checks that every instruction carries exactly the payload its kind
    /// names.
    pub fn check_schema(&self) -> Result<()> {
        for r in &self.records {
            if let Some(i) = &r.instruction {
                let ok = match i.kind {
                    InstructionKind::Text => i.text.is_some() && i.emb.is_none(),
                    InstructionKind::Embedding => i.emb.is_some() && i.text.is_none(),
                };
                if !ok {
                    return Err(Error::InvalidArgument(format!(
                        "record {}: instruction payload does not match its kind",
                        r.id
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<ManifestDocument> {
    let doc: ManifestDocument = serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::json(path, e))?;
    doc.check_schema()?;
    Ok(doc)
}

pub fn write_manifest(path: &Path, doc: &ManifestDocument) -> Result<()> {
    write_json(path, doc)
}

/// Loads every embedding file the manifest references, once each.
fn resolve_records(doc: &ManifestDocument, base: &Path) -> Result<Vec<PersonRecord>> {
    let mut files: HashMap<&str, Matrix> = HashMap::new();
    for r in &doc.records {
        let refs = r
            .image_emb
            .iter()
            .chain(r.instruction.as_ref().and_then(|i| i.emb.as_ref()));
        for e in refs {
            if !files.contains_key(e.file.as_str()) {
                files.insert(&e.file, read_embeddings(&base.join(&e.file))?);
            }
        }
    }
    let lookup = |record: &str, e: &EmbRef| -> Result<EmbeddingVector> {
        let m = &files[e.file.as_str()];
        if e.row >= m.rows() {
            return Err(Error::BadReference {
                record: record.into(),
                file: e.file.clone(),
                row: e.row,
            });
        }
        m.row_vector(e.row)
    };
    doc.records
        .iter()
        .map(|r| {
            let image_embedding = r.image_emb.as_ref().map(|e| lookup(&r.id, e)).transpose()?;
            let instruction = match &r.instruction {
                None => None,
                Some(i) => Some(match (&i.text, &i.emb) {
                    (Some(t), _) => Instruction::text(t.clone()),
                    (None, Some(e)) => Instruction::embedding(lookup(&r.id, e)?),
                    (None, None) => unreachable!("schema checked"),
                }),
            };
            Ok(PersonRecord {
                record_id: r.id.clone(),
                identity: r.identity,
                role: r.role,
                task: r.task,
                image_embedding,
                instruction,
            })
        })
        .collect()
}

/// Reads a manifest, resolves its embedding references relative to the
/// manifest's directory and validates the result.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<PersonRecord>> {
    let doc = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let records = resolve_records(&doc, base)?;
    let violations = validate_dataset(&records);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(records)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::json(path, e))
}

/// One JSON object per line.
pub fn write_rank_lists(path: &Path, ranks: &[RankList]) -> Result<()> {
    let mut out = Vec::new();
    for r in ranks {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

pub fn read_rank_lists(path: &Path) -> Result<Vec<RankList>> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// A named matrix in a parameter file.
pub type NamedBlock = (String, Matrix);

/// Sequence of `[u16 name length][name bytes][OREB block]`.
pub fn encode_blocks(blocks: &[NamedBlock]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (name, m) in blocks {
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("block name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_embeddings(m)?);
    }
    Ok(out)
}

pub fn decode_blocks(bytes: &[u8], path: &Path) -> Result<Vec<NamedBlock>> {
    let truncated = |expected: usize| Error::TruncatedPayload {
        path: path.into(),
        expected,
        found: bytes.len(),
    };
    let mut blocks = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        if at + 2 > bytes.len() {
            return Err(truncated(at + 2));
        }
        let len = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
        at += 2;
        if at + len + HEADER_LEN > bytes.len() {
            return Err(truncated(at + len + HEADER_LEN));
        }
        let name = String::from_utf8(bytes[at..at + len].to_vec())
            .map_err(|_| Error::BadMagic { path: path.into() })?;
        at += len;
        let rows = u32::from_le_bytes(bytes[at + 6..at + 10].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(bytes[at + 10..at + 14].try_into().expect("4 bytes")) as usize;
        let end = at + HEADER_LEN + rows * dim * 4;
        if end > bytes.len() {
            return Err(truncated(end));
        }
        blocks.push((name, decode_embeddings(&bytes[at..end], path)?));
        at = end;
    }
    Ok(blocks)
}

pub fn write_blocks(path: &Path, blocks: &[NamedBlock]) -> Result<()> {
    atomic_write(path, &encode_blocks(blocks)?)
}

pub fn read_blocks(path: &Path) -> Result<Vec<NamedBlock>> {
    decode_blocks(&read_bytes(path)?, path)
}

fn layer_blocks(prefix: &str, layer: &EditingLayerParams, out: &mut Vec<NamedBlock>) {
    for (name, m) in layer.matrices() {
        out.push((format!("{prefix}.{name}"), m.clone()));
    }
    out.push((
        format!("{prefix}.gate"),
        Matrix::new(1, 1, vec![layer.gate]).expect("finite gate"),
    ));
}

/// Flattens model parameters into named blocks, frozen weights included.
pub fn model_blocks(params: &ModelParams) -> Vec<NamedBlock> {
    let mut out = vec![("projection".to_string(), params.projection.clone())];
    for (i, l) in params.stack.iter().enumerate() {
        layer_blocks(&format!("stack.{i}"), l, &mut out);
    }
    layer_blocks("fusion", &params.fusion, &mut out);
    out.push(("match_head".into(), params.match_head.clone()));
    out
}

/// Rebuilds model parameters from named blocks; unrelated blocks (such as
/// classifier heads) are ignored.
pub fn model_from_blocks(blocks: &[NamedBlock]) -> Result<ModelParams> {
    let map: HashMap<&str, &Matrix> = blocks.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let get = |name: &str| -> Result<Matrix> {
        map.get(name)
            .map(|m| (*m).clone())
            .ok_or_else(|| Error::InvalidArgument(format!("parameter block `{name}` missing")))
    };
    let layer = |prefix: &str| -> Result<EditingLayerParams> {
        let mut l = EditingLayerParams::from_matrices(
            get(&format!("{prefix}.w_q"))?,
            get(&format!("{prefix}.w_k"))?,
            get(&format!("{prefix}.w_k_instr"))?,
            get(&format!("{prefix}.w_v"))?,
            get(&format!("{prefix}.w_v_instr"))?,
            get(&format!("{prefix}.w_o"))?,
        )?;
        l.gate = get(&format!("{prefix}.gate"))?.get(0, 0);
        Ok(l)
    };
    let mut stack = Vec::new();
    while map.contains_key(format!("stack.{}.w_q", stack.len()).as_str()) {
        stack.push(layer(&format!("stack.{}", stack.len()))?);
    }
    if stack.is_empty() {
        return Err(Error::InvalidArgument("parameter file has no stack layers".into()));
    }
    let params = ModelParams {
        projection: get("projection")?,
        stack,
        fusion: layer("fusion")?,
        match_head: get("match_head")?,
    };
    let c = params.dim();
    if params.projection.shape() != (c, c)
        || params.stack.iter().any(|l| l.dim() != c)
        || params.fusion.dim() != c
        || params.match_head.shape() != (2, c)
    {
        return Err(Error::DimensionMismatch("parameter blocks disagree on dimension".into()));
    }
    Ok(params)
}

pub fn write_model(path: &Path, params: &ModelParams, extra: &[NamedBlock]) -> Result<()> {
    let mut blocks = model_blocks(params);
    blocks.extend_from_slice(extra);
    write_blocks(path, &blocks)
}

pub fn read_model(path: &Path) -> Result<ModelParams> {
    model_from_blocks(&read_blocks(path)?)
}

/// Creates `dir` and its parents.
pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| f64::from(rng.random_range(-1.0f32..1.0)))
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn embedding_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.oreb");
        let m = random_matrix(3, 4, 1);
        write_embeddings(&p, &m).unwrap();
        let back = read_embeddings(&p).unwrap();
        assert_eq!(back.shape(), (3, 4));
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
            assert_eq!(a, b);
        }
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"OREB");
        assert_eq!(bytes.len(), 14 + 3 * 4 * 4);
    }

    #[test]
    fn header_errors() {
        let p = Path::new("x.oreb");
        let good = encode_embeddings(&random_matrix(10, 2, 2)).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embeddings(&bad, p), Err(Error::BadMagic { .. })));

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_embeddings(&v2, p),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        let short = &good[..good.len() - 8];
        assert!(matches!(
            decode_embeddings(short, p),
            Err(Error::TruncatedPayload { expected, found, .. }) if expected == 14 + 80 && found == 14 + 72
        ));
        assert!(matches!(decode_embeddings(&good[..9], p), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(decode_embeddings(b"OR", p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn blocks_round_trip() {
        let params = ModelParams::init(4, 2, 7).unwrap();
        let mut gated = params.clone();
        gated.set_all_gates(0.25);
        let bytes = encode_blocks(&model_blocks(&gated)).unwrap();
        let back = model_from_blocks(&decode_blocks(&bytes, Path::new("p")).unwrap()).unwrap();
        assert_eq!(back.stack.len(), 2);
        assert_eq!(back.gates(), vec![0.25; 3]);
        assert!(back.projection.max_abs_diff(&gated.projection) == 0.0);
        assert!(back.stack[1].w_v.max_abs_diff(&gated.stack[1].w_v) < 1e-6);
        assert!(decode_blocks(&bytes[..bytes.len() - 3], Path::new("p")).is_err());
    }

    #[test]
    fn manifest_schema_rejects_mismatched_payload() {
        let doc: ManifestDocument = serde_json::from_str(
            r#"{"records":[{"id":"q","identity":0,"role":"query","task":"li",
                "instruction":{"kind":"embedding","text":"hi"}}]}"#,
        )
        .unwrap();
        assert!(doc.check_schema().is_err());
        assert!(serde_json::from_str::<ManifestDocument>(r#"{"records":[],"extra":1}"#).is_err());
    }
}
