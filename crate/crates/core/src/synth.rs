//! Synthetic instruction-conditioned datasets with known ground truth.
//!
//! Every image embedding is `identity vector + clothes vector + noise`. The
//! clothes vectors are a scaled orthonormal set, shared across identities,
//! so untrained cosine retrieval is dominated by clothing while a linear
//! projection can remove it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instructions::pick_sentence;
use crate::io::{
    ensure_dir, write_embeddings, write_json, write_manifest, EmbRef, InstructionKind, ManifestDocument,
    ManifestInstruction, ManifestRecord,
};
use crate::model::{EmbeddingVector, Instruction, PersonRecord, Role, TaskKind};
use crate::tensor::Matrix;

pub const IMAGES_FILE: &str = "images.oreb";
pub const INSTRUCTIONS_FILE: &str = "instructions.oreb";
pub const IDENTITIES_FILE: &str = "identity_vectors.oreb";
pub const ATTRIBUTES_FILE: &str = "attribute_vectors.oreb";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub dim: usize,
    /// Number of distinct clothes vectors.
    pub n_attributes: usize,
    /// Per-coordinate standard deviation of image noise.
    pub noise_sigma: f64,
    /// Expected norm of identity vectors.
    pub identity_scale: f64,
    /// Norm of every clothes vector.
    pub attribute_scale: f64,
    /// Distinct clothes each identity's gallery samples wear. Queries wear
    /// clothes from outside this set whenever `n_attributes` allows.
    pub wardrobe_size: usize,
    /// Per-coordinate noise on clothes-derived instruction embeddings,
    /// relative to their unit direction.
    pub instruction_noise: f64,
    /// The first samples of each identity become queries.
    pub queries_per_identity: usize,
    pub task_mix: BTreeMap<TaskKind, f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 50,
            samples_per_identity: 8,
            dim: 32,
            n_attributes: 8,
            noise_sigma: 0.08,
            identity_scale: 1.0,
            attribute_scale: 2.0,
            wardrobe_size: 3,
            instruction_noise: 0.05,
            queries_per_identity: 2,
            task_mix: default_task_mix(),
            seed: 0,
        }
    }
}

/// Every task except text-to-image: hashed identity descriptions carry no
/// information about identities unseen in training.
pub fn default_task_mix() -> BTreeMap<TaskKind, f64> {
    BTreeMap::from([
        (TaskKind::Trad, 0.25),
        (TaskKind::Cc, 0.25),
        (TaskKind::Ctcc, 0.2),
        (TaskKind::Vi, 0.1),
        (TaskKind::Li, 0.2),
    ])
}

impl SynthConfig {
    /// All records of a single task.
    pub fn single_task(task: TaskKind) -> Self {
        Self {
            task_mix: BTreeMap::from([(task, 1.0)]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if self.n_identities == 0 || self.dim == 0 || self.n_attributes == 0 {
            return bad("identities, dimension and attributes must be positive");
        }
        if self.dim < self.n_attributes {
            return bad("dimension must be at least the number of attributes");
        }
        if self.queries_per_identity == 0 || self.samples_per_identity <= self.queries_per_identity {
            return bad("each identity needs at least one query and one gallery sample");
        }
        if self.wardrobe_size == 0 || self.wardrobe_size > self.n_attributes {
            return bad("wardrobe size must be between 1 and the number of attributes");
        }
        for v in [self.noise_sigma, self.identity_scale, self.attribute_scale, self.instruction_noise] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad("scales and noise levels must be finite and non-negative");
            }
        }
        if self.task_mix.values().any(|&f| !(f >= 0.0)) {
            return bad("task fractions must be non-negative");
        }
        let total: f64 = self.task_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("task fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Per-record generation facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub id: String,
    pub identity: usize,
    pub sample: usize,
    pub clothes: usize,
    /// Clothes named by a clothes-derived query instruction.
    pub target_clothes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub records: Vec<GroundTruthRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub records: Vec<PersonRecord>,
    pub manifest: ManifestDocument,
    /// One row per record that has an image, in record order.
    pub images: Matrix,
    /// One row per embedding instruction, in record order.
    pub instructions: Matrix,
    pub identity_vectors: Matrix,
    pub attribute_vectors: Matrix,
    pub ground_truth: GroundTruth,
}

const COLORS: [&str; 10] = [
    "red", "blue", "black", "white", "green", "grey", "yellow", "brown", "pink", "purple",
];
const GARMENTS: [&str; 8] = ["jacket", "shirt", "coat", "dress", "hoodie", "sweater", "skirt", "jeans"];
const EXTRAS: [&str; 6] = ["backpack", "handbag", "hat", "glasses", "scarf", "umbrella"];

/// Values are rounded to 32-bit floats so that in-memory data equals what
/// a reader gets back from disk.
fn f32_round(v: f64) -> f64 {
    f64::from(v as f32)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn orthonormal_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &rows {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= p * b;
            }
        }
        if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6 {
            rows.push(unit(v));
        }
    }
    rows
}

fn draw_task(mix: &BTreeMap<TaskKind, f64>, rng: &mut ChaCha8Rng) -> TaskKind {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = TaskKind::Trad;
    for (&t, &f) in mix {
        if f == 0.0 {
            continue;
        }
        acc += f;
        last = t;
        if u < acc {
            return t;
        }
    }
    last
}

/// A clothes direction with instruction noise, normalized.
fn clothes_instruction(dir: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, noise / (dir.len() as f64).sqrt()).expect("valid std");
    unit(dir.iter().map(|d| d + normal.sample(rng)).collect())
        .into_iter()
        .map(f32_round)
        .collect()
}

fn describe(identity_words: &[&str; 5]) -> String {
    format!(
        "a person in a {} {} and {} {} carrying a {}",
        identity_words[0], identity_words[1], identity_words[2], identity_words[3], identity_words[4]
    )
}

/// Builds the dataset in memory. Deterministic for a given config.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.dim;

    let attr_dirs = orthonormal_rows(cfg.n_attributes, dim, &mut rng);
    let id_normal = Normal::new(0.0, cfg.identity_scale / (dim as f64).sqrt()).expect("valid std");
    let identities: Vec<Vec<f64>> = (0..cfg.n_identities)
        .map(|_| (0..dim).map(|_| id_normal.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid std");
    let attr_indices: Vec<usize> = (0..cfg.n_attributes).collect();

    let mut records = Vec::new();
    let mut manifest = Vec::new();
    let mut gt = Vec::new();
    let mut images: Vec<f64> = Vec::new();
    let mut instr_rows: Vec<f64> = Vec::new();
    let (mut n_images, mut n_instr) = (0usize, 0usize);

    for (identity, id_vec) in identities.iter().enumerate() {
        let wardrobe: Vec<usize> = attr_indices
            .choose_multiple(&mut rng, cfg.wardrobe_size)
            .copied()
            .collect();
        // queries change into clothes their gallery never shows, when any
        // are left over
        let outside: Vec<usize> = attr_indices.iter().copied().filter(|a| !wardrobe.contains(a)).collect();
        let query_pool = if outside.is_empty() { &wardrobe } else { &outside };
        let clothes: Vec<usize> = (0..cfg.samples_per_identity)
            .map(|s| match s.checked_sub(cfg.queries_per_identity) {
                None => *query_pool.choose(&mut rng).expect("non-empty pool"),
                // the gallery sees every wardrobe item at least once
                Some(g) if g < wardrobe.len() => wardrobe[g],
                Some(_) => *wardrobe.choose(&mut rng).expect("non-empty wardrobe"),
            })
            .collect();
        let words = [
            *COLORS.choose(&mut rng).expect("non-empty"),
            *GARMENTS.choose(&mut rng).expect("non-empty"),
            *COLORS.choose(&mut rng).expect("non-empty"),
            *GARMENTS.choose(&mut rng).expect("non-empty"),
            *EXTRAS.choose(&mut rng).expect("non-empty"),
        ];

        for (sample, &c) in clothes.iter().enumerate() {
            let role = if sample < cfg.queries_per_identity {
                Role::Query
            } else {
                Role::Gallery
            };
            let task = draw_task(&cfg.task_mix, &mut rng);
            let id = format!("p{identity:04}_s{sample:02}");
            let image: Vec<f64> = id_vec
                .iter()
                .zip(&attr_dirs[c])
                .map(|(i, a)| f32_round(i + cfg.attribute_scale * a + noise.sample(&mut rng)))
                .collect();
            let has_image = !(role == Role::Query && task == TaskKind::T2i);

            let mut target = None;
            let instruction = match (role, task) {
                (Role::Query, TaskKind::Trad | TaskKind::Cc | TaskKind::Vi) => {
                    let s = pick_sentence(task, rng.random()).expect("pool task");
                    Some(Instruction::text(s))
                }
                (Role::Query, TaskKind::T2i) => Some(Instruction::text(describe(&words))),
                (Role::Query, TaskKind::Ctcc | TaskKind::Li) => {
                    let gallery_clothes = &clothes[cfg.queries_per_identity..];
                    let others: Vec<usize> = gallery_clothes.iter().copied().filter(|&g| g != c).collect();
                    let t = *others
                        .choose(&mut rng)
                        .or_else(|| gallery_clothes.choose(&mut rng))
                        .expect("gallery present");
                    target = Some(t);
                    Some(Instruction::embedding(EmbeddingVector::new(clothes_instruction(
                        &attr_dirs[t],
                        cfg.instruction_noise,
                        &mut rng,
                    ))?))
                }
                (Role::Gallery, _) => Some(Instruction::embedding(EmbeddingVector::new(
                    clothes_instruction(&attr_dirs[c], cfg.instruction_noise, &mut rng),
                )?)),
            };

            let image_emb = if has_image {
                images.extend_from_slice(&image);
                n_images += 1;
                Some(EmbRef {
                    file: IMAGES_FILE.into(),
                    row: n_images - 1,
                })
            } else {
                None
            };
            let m_instr = match &instruction {
                Some(Instruction::Text { text }) => Some(ManifestInstruction {
                    kind: InstructionKind::Text,
                    text: Some(text.clone()),
                    emb: None,
                }),
                Some(Instruction::Embedding { embedding }) => {
                    instr_rows.extend_from_slice(embedding.as_slice());
                    n_instr += 1;
                    Some(ManifestInstruction {
                        kind: InstructionKind::Embedding,
                        text: None,
                        emb: Some(EmbRef {
                            file: INSTRUCTIONS_FILE.into(),
                            row: n_instr - 1,
                        }),
                    })
                }
                None => None,
            };
            manifest.push(ManifestRecord {
                id: id.clone(),
                identity,
                role,
                task,
                image_emb,
                instruction: m_instr,
            });
            records.push(PersonRecord {
                record_id: id.clone(),
                identity,
                role,
                task,
                image_embedding: if has_image {
                    Some(EmbeddingVector::new(image)?)
                } else {
                    None
                },
                instruction,
            });
            gt.push(GroundTruthRecord {
                id,
                identity,
                sample,
                clothes: c,
                target_clothes: target,
            });
        }
    }

    let round_rows = |rows: &[Vec<f64>], scale: f64| -> Vec<f64> {
        rows.iter().flatten().map(|v| f32_round(v * scale)).collect()
    };
    Ok(SynthDataset {
        records,
        manifest: ManifestDocument { records: manifest },
        images: Matrix::new(n_images, dim, images)?,
        instructions: Matrix::new(n_instr, dim, instr_rows)?,
        identity_vectors: Matrix::new(cfg.n_identities, dim, round_rows(&identities, 1.0))?,
        attribute_vectors: Matrix::new(cfg.n_attributes, dim, round_rows(&attr_dirs, cfg.attribute_scale))?,
        ground_truth: GroundTruth {
            config: cfg.clone(),
            records: gt,
        },
    })
}

impl SynthDataset {
    /// Writes the manifest, embedding files and ground truth into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_embeddings(&dir.join(IMAGES_FILE), &self.images)?;
        write_embeddings(&dir.join(INSTRUCTIONS_FILE), &self.instructions)?;
        write_embeddings(&dir.join(IDENTITIES_FILE), &self.identity_vectors)?;
        write_embeddings(&dir.join(ATTRIBUTES_FILE), &self.attribute_vectors)?;
        write_json(&dir.join(GROUND_TRUTH_FILE), &self.ground_truth)?;
        write_manifest(&dir.join(MANIFEST_FILE), &self.manifest)
    }
}
