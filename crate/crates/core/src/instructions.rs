//! Instruction sentence pools and a deterministic stand-in text encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{EmbeddingVector, TaskKind};
use crate::tensor::{norm, NORM_EPS};

pub const TRAD_POOL: [&str; 20] = [
    "do not change clothes",
    "maintain consistent clothes",
    "keep original clothes",
    "preserve current clothes",
    "retain existing clothes",
    "wear the same clothes",
    "stick with your clothes",
    "don't alter your clothes",
    "no changes to clothes",
    "unchanged outfit",
    "clothes remain constant",
    "no clothing adjustments",
    "steady clothing choice",
    "clothing remains unchanged",
    "consistent clothing selection",
    "retain your clothing style",
    "clothing choice remains",
    "don't swap clothes",
    "maintain clothing selection",
    "clothes stay the same",
];

pub const CC_POOL: [&str; 20] = [
    "change your clothes",
    "swap outfits",
    "switch attire",
    "get into a different outfit",
    "try on something new",
    "put on fresh clothing",
    "dress in alternative attire",
    "alter your outfit",
    "wear something else",
    "don a different ensemble",
    "trade your garments",
    "shift your wardrobe",
    "exchange your clothing",
    "update your attire",
    "replace your outfit",
    "clothe yourself differently",
    "switch your style",
    "update your look",
    "put on a new wardrobe",
    "ignore clothes",
];

pub const VI_POOL: [&str; 20] = [
    "retrieve cross-modality images",
    "fetch images across different modalities",
    "collect images from various modalities",
    "obtain images spanning different modalities",
    "retrieve images from diverse modalities",
    "gather images across modalities",
    "access images across different modalities",
    "acquire images spanning various modalities",
    "extract images from different modalities",
    "retrieve images across multiple modalities",
    "fetch images from distinct modalities",
    "collect images across various modalities",
    "access images from different modalities",
    "obtain images from diverse modalities",
    "gather images spanning different modalities",
    "extract images from various modalities",
    "retrieve images across varied modalities",
    "obtain images from distinct modalities",
    "access images across multiple modalities",
    "collect images spanning diverse modalities",
];

/// The fixed sentence pool for tasks whose instruction is a stock phrase.
pub fn pool(task: TaskKind) -> Option<&'static [&'static str; 20]> {
    match task {
        TaskKind::Trad => Some(&TRAD_POOL),
        TaskKind::Cc => Some(&CC_POOL),
        TaskKind::Vi => Some(&VI_POOL),
        _ => None,
    }
}

/// Uniform seeded pick from a task's pool.
pub fn pick_sentence(task: TaskKind, seed: u64) -> Option<&'static str> {
    let p = pool(task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(p[rng.random_range(0..p.len())])
}

/// Down-weighted function words.
const STOPWORDS: [&str; 12] = [
    "a", "an", "the", "to", "in", "on", "into", "from", "with", "across", "don", "t",
];
const STOPWORD_WEIGHT: f64 = 0.25;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Hashed bag-of-tokens embedding: every token seeds a Gaussian direction,
/// the directions are summed and the result normalized.
pub fn embed_text_instruction(text: &str, dim: usize) -> Result<EmbeddingVector> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dimension 0".into()));
    }
    let mut acc = vec![0.0; dim];
    let mut any = false;
    for tok in tokens(text) {
        any = true;
        let w = if STOPWORDS.contains(&tok.as_str()) {
            STOPWORD_WEIGHT
        } else {
            1.0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tok.as_bytes()));
        for a in acc.iter_mut() {
            let x: f64 = StandardNormal.sample(&mut rng);
            *a += w * x;
        }
    }
    if !any {
        return Err(Error::InvalidArgument("instruction text has no tokens".into()));
    }
    let n = norm(&acc);
    if n < NORM_EPS {
        return Err(Error::DegenerateVector { norm: n });
    }
    EmbeddingVector::new(acc.into_iter().map(|v| v / n).collect())
}
