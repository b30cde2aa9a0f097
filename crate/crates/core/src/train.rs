//! Desk-scale training of the projection, gates and heads.
//!
//! The attention weights stay frozen. Each step samples
//! `identities_per_batch × samples_per_identity` training records, runs the
//! traced forward pass, evaluates the recipe's objective, backpropagates to
//! the image projection and the gates, and takes a plain gradient step.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::editing::{layer_backward, layer_forward_traced, stack_backward, stack_forward_traced, LayerTrace, StackTrace, TokenSequence};
use crate::error::{Error, Result};
use crate::io::{ensure_dir, write_json, write_model, atomic_write, NamedBlock};
use crate::loss::{irm_total, relatedness, ClassifierHead, IrmBatch, Triplet, TripletConfig};
use crate::memory_bank::{irmpp_total, Bank, ContrastiveConfig, MemoryBankPair};
use crate::metrics::MetricReport;
use crate::model::{EmbeddingVector, PersonRecord, RankEvalConfig, Role};
use crate::retrieval::{evaluate, instruction_embedding, instruction_for_task, ModelParams, RetrievalMode};
use crate::tensor::{matmul, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    /// Adaptive triplet plus identity loss on edited and fused features.
    Irm,
    /// Identity loss plus memory-bank soft and hard contrastive losses.
    Irmpp,
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Recipe::Irm => "irm",
            Recipe::Irmpp => "irmpp",
        })
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irm" => Ok(Recipe::Irm),
            "irmpp" => Ok(Recipe::Irmpp),
            _ => Err(Error::InvalidArgument(format!("unknown recipe `{s}`"))),
        }
    }
}

impl Recipe {
    /// The evaluation setting a recipe is trained for.
    pub fn retrieval_mode(self) -> RetrievalMode {
        match self {
            Recipe::Irm => RetrievalMode::TaskSpecific,
            Recipe::Irmpp => RetrievalMode::TaskFree,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginMode {
    /// Margin scaled by the relatedness difference.
    Adaptive,
    /// Relatedness reduced to the identity indicator, so every kept triplet
    /// has margin `m`.
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub recipe: Recipe,
    pub steps: usize,
    pub learning_rate: f64,
    /// Warmup starts at `learning_rate × warmup_start_ratio`.
    pub warmup_start_ratio: f64,
    /// Fraction of the steps spent warming up linearly.
    pub warmup_fraction: f64,
    pub identities_per_batch: usize,
    pub samples_per_identity: usize,
    pub triplet: TripletConfig,
    pub contrastive: ContrastiveConfig,
    pub margin_mode: MarginMode,
    pub max_triplets: usize,
    pub stack_depth: usize,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            recipe: Recipe::Irm,
            steps: 2000,
            learning_rate: 0.05,
            warmup_start_ratio: 0.01,
            warmup_fraction: 0.1,
            identities_per_batch: 8,
            samples_per_identity: 4,
            triplet: TripletConfig::default(),
            contrastive: ContrastiveConfig {
                temperature: 0.1,
                ..ContrastiveConfig::default()
            },
            margin_mode: MarginMode::Adaptive,
            max_triplets: 512,
            stack_depth: 1,
            heldout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(self.warmup_start_ratio >= 0.0) {
            return bad("warmup settings out of range");
        }
        if self.identities_per_batch == 0 || self.samples_per_identity == 0 {
            return bad("batch sizes must be positive");
        }
        if self.max_triplets == 0 || self.stack_depth == 0 {
            return bad("max_triplets and stack_depth must be positive");
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return bad("held-out fraction must lie strictly between 0 and 1");
        }
        self.triplet.validate()?;
        self.contrastive.validate()
    }

    /// Learning rate at `step` (0-based): linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_fraction * self.steps as f64).ceil() as usize;
        if step >= warm {
            return self.learning_rate;
        }
        let start = self.learning_rate * self.warmup_start_ratio;
        start + (self.learning_rate - start) * step as f64 / warm as f64
    }
}

/// Identity-disjoint train/held-out split of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train_identities: Vec<usize>,
    pub heldout_identities: Vec<usize>,
    /// Training records with their identity remapped to `0..n_train`.
    pub train: Vec<PersonRecord>,
    pub heldout_queries: Vec<PersonRecord>,
    pub heldout_gallery: Vec<PersonRecord>,
}

/// Seeded identity-disjoint split. Training keeps every record with an
/// image; held-out records keep their original labels.
pub fn split_by_identity(records: &[PersonRecord], heldout_fraction: f64, seed: u64) -> Result<Split> {
    let ids: BTreeSet<usize> = records.iter().map(|r| r.identity).collect();
    let mut ids: Vec<usize> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a17));
    let n_held = ((ids.len() as f64) * heldout_fraction).round() as usize;
    if n_held == 0 || n_held >= ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} identities with held-out fraction {heldout_fraction}",
            ids.len()
        )));
    }
    let mut held: Vec<usize> = ids[..n_held].to_vec();
    let mut train: Vec<usize> = ids[n_held..].to_vec();
    held.sort_unstable();
    train.sort_unstable();

    let dense = |id: usize| train.binary_search(&id).ok();
    let train_records: Vec<PersonRecord> = records
        .iter()
        .filter(|r| r.image_embedding.is_some())
        .filter_map(|r| {
            dense(r.identity).map(|d| PersonRecord {
                identity: d,
                ..r.clone()
            })
        })
        .collect();
    let in_held = |r: &&PersonRecord| held.binary_search(&r.identity).is_ok();
    let heldout_queries: Vec<PersonRecord> = records
        .iter()
        .filter(in_held)
        .filter(|r| r.role == Role::Query)
        .cloned()
        .collect();
    let heldout_gallery: Vec<PersonRecord> = records
        .iter()
        .filter(in_held)
        .filter(|r| r.role == Role::Gallery)
        .cloned()
        .collect();
    if train_records.is_empty() || heldout_queries.is_empty() || heldout_gallery.is_empty() {
        return Err(Error::InvalidArgument("a split side is empty".into()));
    }
    Ok(Split {
        train_identities: train,
        heldout_identities: held,
        train: train_records,
        heldout_queries,
        heldout_gallery,
    })
}

/// Per-record inputs that do not change during training.
struct Sample {
    image: Matrix,
    identity: usize,
    role: Role,
    /// Instruction for the record's own task, as a single token.
    instr: Matrix,
    instr_emb: EmbeddingVector,
    /// Instruction embedding the record stores, for the auxiliary bank.
    aux: EmbeddingVector,
}

fn prepare(train: &[PersonRecord], dim: usize, seed: u64) -> Result<Vec<Sample>> {
    train
        .iter()
        .map(|r| {
            let instr = instruction_for_task(r.task, r, seed)?;
            let instr_emb = instruction_embedding(&instr, dim)?;
            let aux = match &r.instruction {
                Some(i) => instruction_embedding(i, dim)?,
                None => instr_emb.clone(),
            };
            Ok(Sample {
                image: Matrix::from_vector(r.image_embedding.as_ref().expect("training records have images")),
                identity: r.identity,
                role: r.role,
                instr: Matrix::from_vector(&instr_emb),
                instr_emb,
                aux,
            })
        })
        .collect()
}

fn sample_batch(by_id: &[Vec<usize>], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let ids: Vec<usize> = (0..by_id.len()).collect();
    let chosen: Vec<usize> = ids
        .choose_multiple(rng, cfg.identities_per_batch.min(by_id.len()))
        .copied()
        .collect();
    let mut batch = Vec::with_capacity(chosen.len() * cfg.samples_per_identity);
    for id in chosen {
        let pool = &by_id[id];
        if pool.len() >= cfg.samples_per_identity {
            batch.extend(pool.choose_multiple(rng, cfg.samples_per_identity).copied());
        } else {
            for _ in 0..cfg.samples_per_identity {
                batch.push(*pool.choose(rng).expect("identity has samples"));
            }
        }
    }
    batch
}

/// Triplets for one batch. For each anchor: pairs of same-identity
/// references whose relatedness differs, and (same identity, other identity)
/// pairs. Every kept triplet is oriented so that `ref1` is the more related
/// reference and that reference shares the anchor's identity; pairs where
/// that does not hold carry no identity signal and are skipped.
fn build_triplets(
    batch: &[usize],
    samples: &[Sample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>> {
    let n = batch.len();
    let mut beta = vec![vec![0.0; n]; n];
    for a in 0..n {
        for r in 0..n {
            let (sa, sr) = (&samples[batch[a]], &samples[batch[r]]);
            beta[a][r] = match cfg.margin_mode {
                MarginMode::Adaptive => relatedness(sa.identity, sr.identity, &sa.instr_emb, &sr.instr_emb)?,
                MarginMode::Vanilla => f64::from(u8::from(sa.identity == sr.identity)),
            };
        }
    }
    let id = |i: usize| samples[batch[i]].identity;
    let mut out = Vec::new();
    for a in 0..n {
        for r1 in 0..n {
            if r1 == a || id(r1) != id(a) {
                continue;
            }
            for r2 in 0..n {
                if r2 == a || r2 == r1 {
                    continue;
                }
                let (b1, b2) = (beta[a][r1], beta[a][r2]);
                // each same-identity pair is visited twice; keep one orientation
                if !(b1 > b2) {
                    continue;
                }
                out.push(Triplet {
                    anchor: a,
                    ref1: r1,
                    ref2: r2,
                    beta1: b1,
                    beta2: b2,
                });
            }
        }
    }
    if out.len() > cfg.max_triplets {
        out.shuffle(rng);
        out.truncate(cfg.max_triplets);
    }
    Ok(out)
}

/// Classifier heads trained alongside the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub edited: ClassifierHead,
    pub fused: ClassifierHead,
}

impl Heads {
    fn init(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut draw = || Matrix::new(n, dim, (0..n * dim).map(|_| normal.sample(rng)).collect());
        Ok(Self {
            edited: ClassifierHead::new(draw()?),
            fused: ClassifierHead::new(draw()?),
        })
    }

    pub fn blocks(&self) -> Vec<NamedBlock> {
        vec![
            ("head.edited".into(), self.edited.weights.clone()),
            ("head.fused".into(), self.fused.weights.clone()),
        ]
    }
}

/// Gradients of one step with respect to every trainable parameter.
struct Grads {
    projection: Matrix,
    stack_gates: Vec<f64>,
    fusion_gate: f64,
    head_edited: Matrix,
    head_fused: Matrix,
}

impl Grads {
    fn zeros(params: &ModelParams, heads: &Heads) -> Self {
        let c = params.dim();
        Self {
            projection: Matrix::zeros(c, c),
            stack_gates: vec![0.0; params.stack.len()],
            fusion_gate: 0.0,
            head_edited: Matrix::zeros(heads.edited.weights.rows(), c),
            head_fused: Matrix::zeros(heads.fused.weights.rows(), c),
        }
    }
}

/// Forward state of one sample.
struct Forward {
    stack: StackTrace,
    fusion: LayerTrace,
}

fn forward(sample: &Sample, instr: &Matrix, fusion_instr: &Matrix, params: &ModelParams) -> Result<Forward> {
    let z = matmul(&sample.image, &params.projection)?;
    let stack = stack_forward_traced(&TokenSequence::new(z)?, instr, &params.stack)?;
    let f = stack.layers.last().expect("non-empty stack").output().clone();
    let fusion = layer_forward_traced(&f, fusion_instr, &params.fusion)?;
    Ok(Forward { stack, fusion })
}

/// Backpropagates gradients on the edited (`d_f`) and fused (`d_out`)
/// features of one sample into `grads`.
fn backward(
    fwd: &Forward,
    sample: &Sample,
    d_f: &[f64],
    d_out: &[f64],
    params: &ModelParams,
    grads: &mut Grads,
) -> Result<()> {
    let fg = layer_backward(&fwd.fusion, &params.fusion, &Matrix::new(1, d_out.len(), d_out.to_vec())?)?;
    grads.fusion_gate += fg.d_gate;
    let d_cls: Vec<f64> = d_f.iter().zip(fg.d_input.row(0)).map(|(a, b)| a + b).collect();
    let sg = stack_backward(&fwd.stack, &params.stack, &d_cls)?;
    for (g, d) in grads.stack_gates.iter_mut().zip(&sg.d_gates) {
        *g += d;
    }
    // z = x·P, so dP = xᵀ·dz
    let d_p = matmul(&sample.image.transpose(), &sg.d_state)?;
    grads.projection.add_scaled(&d_p, 1.0);
    Ok(())
}

fn irm_step(
    batch: &[usize],
    samples: &[Sample],
    params: &ModelParams,
    heads: &Heads,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Grads)> {
    let c = params.dim();
    let fwds = batch
        .iter()
        .map(|&i| forward(&samples[i], &samples[i].instr, &samples[i].instr, params))
        .collect::<Result<Vec<_>>>()?;
    let mut feats = Matrix::zeros(batch.len(), c);
    let mut fused = Matrix::zeros(batch.len(), c);
    for (b, f) in fwds.iter().enumerate() {
        feats.row_mut(b).copy_from_slice(f.stack.layers.last().expect("layer").output().row(0));
        fused.row_mut(b).copy_from_slice(f.fusion.output().row(0));
    }
    let labels: Vec<usize> = batch.iter().map(|&i| samples[i].identity).collect();
    let triplets = build_triplets(batch, samples, cfg, rng)?;
    let out = irm_total(
        IrmBatch {
            features: &feats,
            fused: &fused,
            labels: &labels,
            triplets: &triplets,
        },
        &heads.edited,
        &heads.fused,
        &cfg.triplet,
    )?;
    let mut grads = Grads::zeros(params, heads);
    for (b, (&i, f)) in batch.iter().zip(&fwds).enumerate() {
        backward(f, &samples[i], out.grad("features").row(b), out.grad("fused").row(b), params, &mut grads)?;
    }
    grads.head_edited = out.grad("head").clone();
    grads.head_fused = out.grad("head_fused").clone();
    Ok((out.value, grads))
}

fn irmpp_step(
    batch: &[usize],
    samples: &[Sample],
    params: &ModelParams,
    heads: &Heads,
    banks: &mut MemoryBankPair,
    cfg: &TrainConfig,
) -> Result<(f64, Grads)> {
    let c = params.dim();
    let empty = Matrix::zeros(0, c);
    let w = 1.0 / batch.len() as f64;
    let mut grads = Grads::zeros(params, heads);
    let mut total = 0.0;
    for &i in batch {
        let s = &samples[i];
        // queries are fused with their instruction, gallery images with none
        let fusion_instr = if s.role == Role::Query { &s.instr } else { &empty };
        let fwd = forward(s, &empty, fusion_instr, params)?;
        let f_r = fwd.fusion.output().row_vector(0)?;
        let out = irmpp_total(&f_r, &s.aux, s.identity, banks, &heads.fused, &cfg.contrastive)?;
        total += w * out.value;
        let d_out: Vec<f64> = out.grad("feature").as_slice().iter().map(|g| w * g).collect();
        backward(&fwd, s, &vec![0.0; c], &d_out, params, &mut grads)?;
        grads.head_fused.add_scaled(out.grad("head_weights"), w);
        banks.update(Bank::Retrieval, s.identity, &f_r)?;
        banks.update(Bank::Auxiliary, s.identity, &s.aux)?;
    }
    Ok((total, grads))
}

fn apply(params: &mut ModelParams, heads: &mut Heads, grads: &Grads, lr: f64) {
    if lr == 0.0 {
        return;
    }
    params.projection.add_scaled(&grads.projection, -lr);
    for (l, g) in params.stack.iter_mut().zip(&grads.stack_gates) {
        l.gate -= lr * g;
    }
    params.fusion.gate -= lr * grads.fusion_gate;
    heads.edited.weights.add_scaled(&grads.head_edited, -lr);
    heads.fused.weights.add_scaled(&grads.head_fused, -lr);
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub initial_params: ModelParams,
    pub heads: Heads,
    pub report_before: MetricReport,
    pub report_after: MetricReport,
    /// `(step, loss)` for every step.
    pub loss_log: Vec<(usize, f64)>,
    pub split: Split,
}

impl TrainOutcome {
    /// Mean logged loss over `window` steps ending at `end` (exclusive).
    pub fn window_mean(&self, end: usize, window: usize) -> Option<f64> {
        let start = end.checked_sub(window)?;
        let vals: Vec<f64> = self.loss_log.iter().filter(|(s, _)| (start..end).contains(s)).map(|p| p.1).collect();
        (vals.len() == window).then(|| vals.iter().sum::<f64>() / window as f64)
    }
}

/// Trains on the identity-disjoint training side of `records` and evaluates
/// on the held-out side before and after.
pub fn train_demo(records: &[PersonRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dim = records
        .iter()
        .find_map(|r| r.image_embedding.as_ref().map(EmbeddingVector::dim))
        .ok_or_else(|| Error::InvalidArgument("dataset has no images".into()))?;
    let split = split_by_identity(records, cfg.heldout_fraction, cfg.seed)?;
    let n_train = split.train_identities.len();
    if cfg.identities_per_batch > n_train {
        return Err(Error::InvalidArgument(format!(
            "batch asks for {} identities, training split has {n_train}",
            cfg.identities_per_batch
        )));
    }
    let samples = prepare(&split.train, dim, cfg.seed)?;
    let mut by_id = vec![Vec::new(); n_train];
    for (i, s) in samples.iter().enumerate() {
        by_id[s.identity].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(dim, cfg.stack_depth, cfg.seed)?;
    let initial_params = params.clone();
    let mut heads = Heads::init(n_train, dim, &mut rng)?;
    let mut banks = MemoryBankPair::init(n_train, dim, cfg.seed ^ 0xba2c)?;

    let mode = cfg.recipe.retrieval_mode();
    let eval_cfg = RankEvalConfig::default();
    let eval = |p: &ModelParams| {
        evaluate(&split.heldout_queries, &split.heldout_gallery, mode, p, cfg.seed, eval_cfg).map(|r| r.1)
    };
    let report_before = eval(&params)?;

    let mut loss_log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(&by_id, cfg, &mut rng);
        let (value, grads) = match cfg.recipe {
            Recipe::Irm => irm_step(&batch, &samples, &params, &heads, cfg, &mut rng)?,
            Recipe::Irmpp => irmpp_step(&batch, &samples, &params, &heads, &mut banks, cfg)?,
        };
        if !value.is_finite() {
            return Err(Error::Diverged { step, value });
        }
        loss_log.push((step, value));
        apply(&mut params, &mut heads, &grads, cfg.lr_at(step));
    }

    let report_after = eval(&params)?;
    Ok(TrainOutcome {
        params,
        initial_params,
        heads,
        report_before,
        report_after,
        loss_log,
        split,
    })
}

/// Writes `config.json`, `loss_log.csv`, `params.bin`,
/// `report_before.json` and `report_after.json` into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    ensure_dir(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let mut csv = String::from("step,value\n");
    for (s, v) in &outcome.loss_log {
        csv.push_str(&format!("{s},{v}\n"));
    }
    atomic_write(&dir.join("loss_log.csv"), csv.as_bytes())?;
    write_model(&dir.join("params.bin"), &outcome.params, &outcome.heads.blocks())?;
    write_json(&dir.join("report_before.json"), &outcome.report_before)?;
    write_json(&dir.join("report_after.json"), &outcome.report_after)
}
