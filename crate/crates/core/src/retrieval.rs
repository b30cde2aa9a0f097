//! Query and gallery feature construction, cosine ranking and two-stage
//! rerank.
//!
//! Features are built along two paths:
//!
//! * task-specific: image tokens are edited by the instruction in every
//!   stack layer and then fused with it again; gallery images carry an
//!   instruction of the probing task.
//! * task-free: the stack runs instruction-free (it acts as the image
//!   encoder), queries are fused with their instruction, and gallery images
//!   are fused with nothing. The gallery side is therefore independent of
//!   the task being probed and can be computed once.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::editing::{editing_stack_forward, fuse, EditingLayerParams, TokenSequence};
use crate::error::{Error, Result};
use crate::instructions::{embed_text_instruction, pick_sentence};
use crate::loss::match_probability;
use crate::metrics::{MetricReport, DEFAULT_CMC_KS, DEFAULT_TAUS};
use crate::model::{
    EmbeddingVector, Instruction, PersonRecord, RankEvalConfig, RankList, RankedItem, Role, TaskKind,
};
use crate::tensor::{cosine, matmul, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    TaskSpecific,
    TaskFree,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMode::TaskSpecific => "task_specific",
            RetrievalMode::TaskFree => "task_free",
        })
    }
}

impl FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_specific" => Ok(RetrievalMode::TaskSpecific),
            "task_free" => Ok(RetrievalMode::TaskFree),
            _ => Err(Error::InvalidArgument(format!("unknown retrieval mode `{s}`"))),
        }
    }
}

/// Everything needed to turn records into retrieval features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Applied to image embeddings as `x · projection`.
    pub projection: Matrix,
    pub stack: Vec<EditingLayerParams>,
    pub fusion: EditingLayerParams,
    /// Two-way pair classifier used by the rerank stage.
    pub match_head: Matrix,
}

impl ModelParams {
    /// Identity projection, seeded random attention weights, all gates zero.
    pub fn init(dim: usize, stack_depth: usize, seed: u64) -> Result<Self> {
        if dim == 0 || stack_depth == 0 {
            return Err(Error::InvalidArgument(
                "model needs a positive dimension and at least one stack layer".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = (0..stack_depth)
            .map(|_| EditingLayerParams::random(dim, &mut rng))
            .collect();
        let fusion = EditingLayerParams::random(dim, &mut rng);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let match_head = Matrix::new(2, dim, (0..2 * dim).map(|_| normal.sample(&mut rng)).collect())?;
        Ok(Self {
            projection: Matrix::identity(dim),
            stack,
            fusion,
            match_head,
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn gates(&self) -> Vec<f64> {
        self.stack
            .iter()
            .map(|l| l.gate)
            .chain(std::iter::once(self.fusion.gate))
            .collect()
    }

    pub fn set_all_gates(&mut self, gate: f64) {
        for l in &mut self.stack {
            l.gate = gate;
        }
        self.fusion.gate = gate;
    }

    /// `x · projection` as a one-row matrix.
    pub fn project(&self, image: &EmbeddingVector) -> Result<EmbeddingVector> {
        let z = matmul(&Matrix::from_vector(image), &self.projection)?;
        z.row_vector(0)
    }

    fn empty_instr(&self) -> Matrix {
        Matrix::zeros(0, self.dim())
    }
}

pub(crate) fn mix_seed(seed: u64, record_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in record_id.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Resolves the instruction a record carries when used for `task`.
///
/// Stock-phrase tasks use the record's own sentence when it has one and
/// otherwise draw from their pool (seeded per record); the other tasks use
/// the record's own payload, which must then exist.
pub fn instruction_for_task(task: TaskKind, record: &PersonRecord, seed: u64) -> Result<Instruction> {
    if let Some(s) = pick_sentence(task, mix_seed(seed, &record.record_id)) {
        return Ok(match &record.instruction {
            Some(i @ Instruction::Text { .. }) => i.clone(),
            _ => Instruction::text(s),
        });
    }
    match (task, &record.instruction) {
        (TaskKind::Ctcc, Some(i @ Instruction::Embedding { .. })) => Ok(i.clone()),
        (TaskKind::Li | TaskKind::T2i, Some(i)) => Ok(i.clone()),
        _ => Err(Error::MissingInstruction(record.record_id.clone())),
    }
}

pub fn instruction_embedding(instr: &Instruction, dim: usize) -> Result<EmbeddingVector> {
    match instr {
        Instruction::Text { text } => embed_text_instruction(text, dim),
        Instruction::Embedding { embedding } => {
            if embedding.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "instruction dim {} vs model dim {dim}",
                    embedding.dim()
                )));
            }
            Ok(embedding.clone())
        }
    }
}

/// The instruction as a single-token matrix.
pub fn instruction_tokens(instr: &Instruction, dim: usize) -> Result<Matrix> {
    Ok(Matrix::from_vector(&instruction_embedding(instr, dim)?))
}

fn image_of(record: &PersonRecord) -> Result<&EmbeddingVector> {
    record.image_embedding.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("record {} has no image embedding", record.record_id))
    })
}

/// Edited-then-fused feature of an image under `instr` (possibly empty).
fn task_specific_feature(image: &EmbeddingVector, instr: &Matrix, params: &ModelParams) -> Result<EmbeddingVector> {
    let tokens = TokenSequence::cls_only(&params.project(image)?);
    let edited = editing_stack_forward(&tokens, instr, &params.stack)?;
    fuse(&edited, instr, &params.fusion)
}

/// Instruction-free image feature from the stack.
pub fn image_feature(image: &EmbeddingVector, params: &ModelParams) -> Result<EmbeddingVector> {
    let tokens = TokenSequence::cls_only(&params.project(image)?);
    editing_stack_forward(&tokens, &params.empty_instr(), &params.stack)
}

/// The query feature and the instruction embedding used to build it.
pub fn build_query_feature_with_instruction(
    record: &PersonRecord,
    mode: RetrievalMode,
    params: &ModelParams,
    seed: u64,
) -> Result<(EmbeddingVector, EmbeddingVector)> {
    if record.role != Role::Query {
        return Err(Error::InvalidArgument(format!(
            "record {} is not a query",
            record.record_id
        )));
    }
    let dim = params.dim();
    let instr = instruction_for_task(record.task, record, seed)?;
    let instr_emb = instruction_embedding(&instr, dim)?;
    if record.task == TaskKind::T2i {
        return Ok((instr_emb.clone(), instr_emb));
    }
    let tokens = Matrix::from_vector(&instr_emb);
    let image = image_of(record)?;
    let feature = match mode {
        RetrievalMode::TaskSpecific => task_specific_feature(image, &tokens, params)?,
        RetrievalMode::TaskFree => fuse(&image_feature(image, params)?, &tokens, &params.fusion)?,
    };
    Ok((feature, instr_emb))
}

pub fn build_query_feature(
    record: &PersonRecord,
    mode: RetrievalMode,
    params: &ModelParams,
    seed: u64,
) -> Result<EmbeddingVector> {
    Ok(build_query_feature_with_instruction(record, mode, params, seed)?.0)
}

/// Gallery features. In task-specific mode every record is instructed as a
/// `probe`-task gallery image (text-to-image galleries are plain images);
/// in task-free mode `probe` is ignored.
pub fn build_gallery_features(
    records: &[PersonRecord],
    mode: RetrievalMode,
    params: &ModelParams,
    probe: TaskKind,
    seed: u64,
) -> Result<Vec<EmbeddingVector>> {
    let empty = params.empty_instr();
    records
        .iter()
        .map(|r| {
            if r.role != Role::Gallery {
                return Err(Error::InvalidArgument(format!(
                    "record {} is not a gallery record",
                    r.record_id
                )));
            }
            let image = image_of(r)?;
            match mode {
                RetrievalMode::TaskFree => task_specific_feature(image, &empty, params),
                RetrievalMode::TaskSpecific if probe == TaskKind::T2i => {
                    task_specific_feature(image, &empty, params)
                }
                RetrievalMode::TaskSpecific => {
                    let instr = instruction_for_task(probe, r, seed)?;
                    let tokens = instruction_tokens(&instr, params.dim())?;
                    task_specific_feature(image, &tokens, params)
                }
            }
        })
        .collect()
}

/// Gallery features keyed by probe, with hit/miss accounting. Task-free
/// features live under a single key shared by every probe.
#[derive(Debug, Default)]
pub struct GalleryCache {
    entries: HashMap<(RetrievalMode, Option<TaskKind>), Arc<Vec<EmbeddingVector>>>,
    hits: usize,
    misses: usize,
}

impl GalleryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(
        &mut self,
        records: &[PersonRecord],
        mode: RetrievalMode,
        params: &ModelParams,
        probe: TaskKind,
        seed: u64,
    ) -> Result<Arc<Vec<EmbeddingVector>>> {
        let key = match mode {
            RetrievalMode::TaskFree => (mode, None),
            RetrievalMode::TaskSpecific => (mode, Some(probe)),
        };
        if let Some(f) = self.entries.get(&key) {
            self.hits += 1;
            return Ok(Arc::clone(f));
        }
        self.misses += 1;
        let feats = Arc::new(build_gallery_features(records, mode, params, probe, seed)?);
        self.entries.insert(key, Arc::clone(&feats));
        Ok(feats)
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn misses(&self) -> usize {
        self.misses
    }
}

/// A gallery ready to be searched.
#[derive(Debug, Clone)]
pub struct GalleryView<'a> {
    pub records: &'a [PersonRecord],
    pub features: &'a [EmbeddingVector],
    /// Stored instruction embedding of each gallery record, if any.
    pub instructions: &'a [Option<EmbeddingVector>],
}

/// Embeddings of the instructions gallery records carry.
pub fn gallery_instruction_embeddings(records: &[PersonRecord], dim: usize) -> Result<Vec<Option<EmbeddingVector>>> {
    records
        .iter()
        .map(|r| r.instruction.as_ref().map(|i| instruction_embedding(i, dim)).transpose())
        .collect()
}

/// The query as seen by [`rank`].
#[derive(Debug, Clone, Copy)]
pub struct QueryView<'a> {
    pub index: usize,
    pub id: &'a str,
    pub identity: usize,
    pub feature: &'a EmbeddingVector,
    pub instruction: Option<&'a EmbeddingVector>,
}

/// Orders the gallery by descending cosine to the query, ties by ascending
/// index.
pub fn rank(query: QueryView<'_>, gallery: &GalleryView<'_>) -> Result<RankList> {
    if gallery.features.len() != gallery.records.len() || gallery.instructions.len() != gallery.records.len() {
        return Err(Error::DimensionMismatch("gallery views of unequal length".into()));
    }
    let mut scored = gallery
        .features
        .iter()
        .enumerate()
        .map(|(i, g)| Ok((i, cosine(query.feature, g)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let ranked = scored
        .into_iter()
        .map(|(i, score)| {
            let rec = &gallery.records[i];
            let instr_cos = match (query.instruction, &gallery.instructions[i]) {
                (Some(q), Some(g)) => Some(cosine(q, g)?),
                _ => None,
            };
            Ok(RankedItem {
                gallery_index: i,
                gallery_id: rec.record_id.clone(),
                score,
                identity_match: rec.identity == query.identity,
                instr_cos,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankList {
        query_index: query.index,
        query_id: query.id.to_string(),
        ranked,
    })
}

/// Re-scores the first `shortlist_size` entries with `scorer` (higher is
/// better) and re-sorts only that prefix; the tail keeps its order.
pub fn rerank_with<F>(mut stage1: RankList, shortlist_size: usize, mut scorer: F) -> Result<RankList>
where
    F: FnMut(usize) -> Result<f64>,
{
    if shortlist_size == 0 {
        return Err(Error::InvalidArgument("shortlist size must be at least 1".into()));
    }
    let s = shortlist_size.min(stage1.ranked.len());
    let mut head: Vec<(usize, RankedItem)> = stage1.ranked.drain(..s).enumerate().collect();
    for (_, item) in head.iter_mut() {
        item.score = scorer(item.gallery_index)?;
    }
    head.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    let mut ranked: Vec<RankedItem> = head.into_iter().map(|(_, it)| it).collect();
    ranked.append(&mut stage1.ranked);
    stage1.ranked = ranked;
    Ok(stage1)
}

/// Two-stage text-to-image retrieval: cosine shortlist, then the match
/// head's positive-pair probability on `fuse(image feature, text)`.
pub fn rerank_top_k(
    query: QueryView<'_>,
    gallery: &GalleryView<'_>,
    gallery_images: &[EmbeddingVector],
    shortlist_size: usize,
    params: &ModelParams,
) -> Result<RankList> {
    if shortlist_size == 0 {
        return Err(Error::InvalidArgument("shortlist size must be at least 1".into()));
    }
    let text = query
        .instruction
        .ok_or_else(|| Error::MissingInstruction(query.id.to_string()))?;
    let tokens = Matrix::from_vector(text);
    let stage1 = rank(query, gallery)?;
    rerank_with(stage1, shortlist_size, |gi| {
        let fused = fuse(&gallery_images[gi], &tokens, &params.fusion)?;
        match_probability(&fused, &params.match_head)
    })
}

/// Ranks every query against `gallery`. Each query is searched in the
/// gallery built for its own task, taken from `cache`.
pub fn rank_queries(
    queries: &[PersonRecord],
    gallery: &[PersonRecord],
    mode: RetrievalMode,
    params: &ModelParams,
    seed: u64,
    cache: &mut GalleryCache,
) -> Result<Vec<RankList>> {
    let dim = params.dim();
    let gallery_instr = gallery_instruction_embeddings(gallery, dim)?;
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let feats = cache.get_or_build(gallery, mode, params, q.task, seed)?;
            let (feature, instr) = build_query_feature_with_instruction(q, mode, params, seed)?;
            let view = GalleryView {
                records: gallery,
                features: &feats,
                instructions: &gallery_instr,
            };
            rank(
                QueryView {
                    index: qi,
                    id: &q.record_id,
                    identity: q.identity,
                    feature: &feature,
                    instruction: Some(&instr),
                },
                &view,
            )
        })
        .collect()
}

/// Ranks every query of a dataset against its gallery. With a shortlist
/// size, text-to-image queries are additionally reranked by the match head.
pub fn rank_dataset(
    records: &[PersonRecord],
    mode: RetrievalMode,
    params: &ModelParams,
    seed: u64,
    shortlist: Option<usize>,
) -> Result<Vec<RankList>> {
    let (queries, gallery) = split_roles(records);
    let mut cache = GalleryCache::new();
    let ranks = rank_queries(&queries, &gallery, mode, params, seed, &mut cache)?;
    let Some(s) = shortlist else {
        return Ok(ranks);
    };
    if !queries.iter().any(|q| q.task == TaskKind::T2i) {
        return Ok(ranks);
    }
    let images = gallery
        .iter()
        .map(|g| image_feature(image_of(g)?, params))
        .collect::<Result<Vec<_>>>()?;
    let fusion_tokens = queries
        .iter()
        .map(|q| -> Result<Option<Matrix>> {
            if q.task != TaskKind::T2i {
                return Ok(None);
            }
            let instr = instruction_for_task(q.task, q, seed)?;
            Ok(Some(instruction_tokens(&instr, params.dim())?))
        })
        .collect::<Result<Vec<_>>>()?;
    ranks
        .into_iter()
        .zip(&fusion_tokens)
        .map(|(r, tokens)| match tokens {
            None => Ok(r),
            Some(t) => rerank_with(r, s, |gi| {
                let fused = fuse(&images[gi], t, &params.fusion)?;
                match_probability(&fused, &params.match_head)
            }),
        })
        .collect()
}

/// Splits records by role.
pub fn split_roles(records: &[PersonRecord]) -> (Vec<PersonRecord>, Vec<PersonRecord>) {
    records.iter().cloned().partition(|r| r.role == Role::Query)
}

/// Rank lists plus the metric report for a query set.
pub fn evaluate(
    queries: &[PersonRecord],
    gallery: &[PersonRecord],
    mode: RetrievalMode,
    params: &ModelParams,
    seed: u64,
    config: RankEvalConfig,
) -> Result<(Vec<RankList>, MetricReport)> {
    let mut cache = GalleryCache::new();
    let ranks = rank_queries(queries, gallery, mode, params, seed, &mut cache)?;
    let report = MetricReport::compute(&ranks, &DEFAULT_TAUS, &DEFAULT_CMC_KS, config)?;
    Ok((ranks, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn gallery_rec(id: &str, identity: usize, image: &[f64]) -> PersonRecord {
        PersonRecord {
            record_id: id.into(),
            identity,
            role: Role::Gallery,
            task: TaskKind::Trad,
            image_embedding: Some(ev(image)),
            instruction: Some(Instruction::embedding(ev(&[1.0, 0.0]))),
        }
    }

    fn query_rec(task: TaskKind, image: Option<&[f64]>, instr: Option<Instruction>) -> PersonRecord {
        PersonRecord {
            record_id: "q".into(),
            identity: 0,
            role: Role::Query,
            task,
            image_embedding: image.map(ev),
            instruction: instr,
        }
    }

    #[test]
    fn instruction_resolution() {
        let q = query_rec(TaskKind::Trad, Some(&[1.0, 0.0]), None);
        match instruction_for_task(TaskKind::Trad, &q, 1).unwrap() {
            Instruction::Text { text } => assert!(crate::instructions::TRAD_POOL.contains(&text.as_str())),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            instruction_for_task(TaskKind::Ctcc, &q, 1),
            Err(Error::MissingInstruction(_))
        ));
        let text = query_rec(TaskKind::T2i, None, Some(Instruction::text("a man in red")));
        assert_eq!(
            instruction_for_task(TaskKind::T2i, &text, 0).unwrap(),
            Instruction::text("a man in red")
        );
    }

    #[test]
    fn t2i_query_is_text_embedding() {
        let params = ModelParams::init(8, 1, 3).unwrap();
        let q = query_rec(TaskKind::T2i, None, Some(Instruction::text("woman with a blue bag")));
        let f = build_query_feature(&q, RetrievalMode::TaskSpecific, &params, 0).unwrap();
        assert_eq!(f, embed_text_instruction("woman with a blue bag", 8).unwrap());
    }

    #[test]
    fn task_free_query_ignores_instruction_at_zero_gate() {
        let params = ModelParams::init(4, 2, 5).unwrap();
        let a = query_rec(TaskKind::Ctcc, Some(&[0.2, 0.4, -0.1, 1.0]), Some(Instruction::embedding(ev(&[1.0, 0.0, 0.0, 0.0]))));
        let mut b = a.clone();
        b.instruction = Some(Instruction::embedding(ev(&[0.0, -3.0, 1.0, 0.5])));
        let fa = build_query_feature(&a, RetrievalMode::TaskFree, &params, 0).unwrap();
        let fb = build_query_feature(&b, RetrievalMode::TaskFree, &params, 0).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn ctcc_query_reference_at_identity_projections() {
        let mut params = ModelParams::init(2, 1, 0).unwrap();
        params.stack = vec![EditingLayerParams::identity(2)];
        params.fusion = EditingLayerParams::identity(2);
        params.set_all_gates(1.0);
        let x = [0.6, -0.2];
        let t = [0.1, 0.9];
        let q = query_rec(TaskKind::Ctcc, Some(&x), Some(Instruction::embedding(ev(&t))));
        // every softmax is over a single key, so each layer adds the instruction once
        let want = [x[0] + 2.0 * t[0], x[1] + 2.0 * t[1]];
        let f = build_query_feature(&q, RetrievalMode::TaskSpecific, &params, 0).unwrap();
        assert!((f.as_slice()[0] - want[0]).abs() < 1e-15);
        assert!((f.as_slice()[1] - want[1]).abs() < 1e-15);
        let f = build_query_feature(&q, RetrievalMode::TaskFree, &params, 0).unwrap();
        assert!((f.as_slice()[0] - (x[0] + t[0])).abs() < 1e-15);
        assert!((f.as_slice()[1] - (x[1] + t[1])).abs() < 1e-15);
    }

    #[test]
    fn zero_gate_galleries_coincide() {
        let params = ModelParams::init(2, 2, 9).unwrap();
        let recs = vec![gallery_rec("a", 0, &[1.0, 0.5]), gallery_rec("b", 1, &[-0.3, 0.8])];
        let free = build_gallery_features(&recs, RetrievalMode::TaskFree, &params, TaskKind::Trad, 0).unwrap();
        for probe in TaskKind::ALL {
            let spec = build_gallery_features(&recs, RetrievalMode::TaskSpecific, &params, probe, 0).unwrap();
            assert_eq!(spec, free);
            let free_p = build_gallery_features(&recs, RetrievalMode::TaskFree, &params, probe, 0).unwrap();
            assert_eq!(free_p, free);
        }
        let mut gated = params.clone();
        gated.set_all_gates(0.5);
        let spec = build_gallery_features(&recs, RetrievalMode::TaskSpecific, &gated, TaskKind::Trad, 0).unwrap();
        let free = build_gallery_features(&recs, RetrievalMode::TaskFree, &gated, TaskKind::Trad, 0).unwrap();
        assert_ne!(spec, free);
        assert!(build_gallery_features(&[], RetrievalMode::TaskFree, &params, TaskKind::Trad, 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn cache_accounting() {
        let params = ModelParams::init(2, 1, 1).unwrap();
        let recs = vec![gallery_rec("a", 0, &[1.0, 0.5])];
        let mut cache = GalleryCache::new();
        for probe in TaskKind::ALL {
            cache.get_or_build(&recs, RetrievalMode::TaskFree, &params, probe, 0).unwrap();
        }
        assert_eq!((cache.misses(), cache.hits()), (1, 5));
        for probe in TaskKind::ALL {
            cache.get_or_build(&recs, RetrievalMode::TaskSpecific, &params, probe, 0).unwrap();
        }
        assert_eq!((cache.misses(), cache.hits()), (7, 5));
    }

    fn view<'a>(
        recs: &'a [PersonRecord],
        feats: &'a [EmbeddingVector],
        instrs: &'a [Option<EmbeddingVector>],
    ) -> GalleryView<'a> {
        GalleryView {
            records: recs,
            features: feats,
            instructions: instrs,
        }
    }

    #[test]
    fn rank_orders_and_breaks_ties() {
        let recs = vec![
            gallery_rec("a", 0, &[1.0, 0.0]),
            gallery_rec("b", 1, &[1.0, 0.0]),
            gallery_rec("c", 0, &[1.0, 0.0]),
        ];
        let instrs = vec![None, None, None];
        // cosines 0.9, 0.1, 0.5 against the query (1, 0)
        let unit = |c: f64| ev(&[c, (1.0 - c * c).sqrt()]);
        let feats = vec![unit(0.9), unit(0.1), unit(0.5)];
        let qf = ev(&[1.0, 0.0]);
        let q = QueryView { index: 0, id: "q", identity: 0, feature: &qf, instruction: None };
        let r = rank(q, &view(&recs, &feats, &instrs)).unwrap();
        let order: Vec<usize> = r.ranked.iter().map(|e| e.gallery_index).collect();
        assert_eq!(order, vec![0, 2, 1]);
        assert_eq!(
            r.ranked.iter().map(|e| e.identity_match).collect::<Vec<_>>(),
            vec![true, true, false]
        );

        let ortho = vec![ev(&[0.0, 1.0]), ev(&[0.0, 2.0]), ev(&[0.0, -1.0])];
        let r = rank(q, &view(&recs, &ortho, &instrs)).unwrap();
        let order: Vec<usize> = r.ranked.iter().map(|e| e.gallery_index).collect();
        assert_eq!(order, vec![0, 1, 2]);

        let own = vec![unit(0.3), qf.clone(), unit(0.99)];
        let r = rank(q, &view(&recs, &own, &instrs)).unwrap();
        assert_eq!(r.ranked[0].gallery_index, 1);
    }

    #[test]
    fn rank_attaches_instruction_cosines() {
        let recs = vec![gallery_rec("a", 0, &[1.0, 0.0]), gallery_rec("b", 0, &[0.0, 1.0])];
        let instrs = vec![Some(ev(&[1.0, 0.0])), None];
        let feats = vec![ev(&[1.0, 0.0]), ev(&[0.0, 1.0])];
        let qf = ev(&[1.0, 0.0]);
        let qi = ev(&[1.0, 1.0]);
        let q = QueryView { index: 3, id: "q", identity: 0, feature: &qf, instruction: Some(&qi) };
        let r = rank(q, &view(&recs, &feats, &instrs)).unwrap();
        assert!((r.ranked[0].instr_cos.unwrap() - 0.7071067811865475).abs() < 1e-15);
        assert_eq!(r.ranked[1].instr_cos, None);
        assert_eq!(r.query_index, 3);
    }

    #[test]
    fn rerank_cases() {
        let stage1 = RankList::from_flags(0, &[(true, None), (false, None), (true, None), (false, None)]);
        // degenerate shortlist: full re-sort
        let full = rerank_with(stage1.clone(), 10, |gi| Ok(gi as f64)).unwrap();
        let order: Vec<usize> = full.ranked.iter().map(|e| e.gallery_index).collect();
        assert_eq!(order, vec![3, 2, 1, 0]);
        // consistent scorer keeps stage-1 order
        let same = rerank_with(stage1.clone(), 3, |gi| Ok(-(gi as f64))).unwrap();
        let order: Vec<usize> = same.ranked.iter().map(|e| e.gallery_index).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
        // inverted top-2
        let swapped = rerank_with(stage1.clone(), 2, |gi| Ok(gi as f64)).unwrap();
        let order: Vec<usize> = swapped.ranked.iter().map(|e| e.gallery_index).collect();
        assert_eq!(order, vec![1, 0, 2, 3]);
        assert!(rerank_with(stage1, 0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn rerank_top_k_with_match_head() {
        let mut params = ModelParams::init(2, 1, 0).unwrap();
        params.fusion = EditingLayerParams::identity(2);
        // positive logit grows with the second coordinate
        params.match_head = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 10.0]]).unwrap();
        let images = vec![ev(&[1.0, 0.0]), ev(&[0.9, 0.3]), ev(&[0.0, 1.0]), ev(&[-1.0, 0.0])];
        let recs: Vec<_> = images
            .iter()
            .enumerate()
            .map(|(i, x)| gallery_rec(&format!("g{i}"), i % 2, x.as_slice()))
            .collect();
        let instrs = vec![None; 4];
        let text = ev(&[1.0, 0.0]);
        let q = QueryView { index: 0, id: "t", identity: 0, feature: &text, instruction: Some(&text) };
        let g = view(&recs, &images, &instrs);
        let stage1 = rank(q, &g).unwrap();
        let order: Vec<usize> = stage1.ranked.iter().map(|e| e.gallery_index).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
        let out = rerank_top_k(q, &g, &images, 2, &params).unwrap();
        let order: Vec<usize> = out.ranked.iter().map(|e| e.gallery_index).collect();
        assert_eq!(order, vec![1, 0, 2, 3]);
    }
}
