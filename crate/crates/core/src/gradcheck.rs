//! Central finite-difference checks of every analytic gradient.
//!
//! Each point packs all differentiated inputs into one flat vector. The
//! error at a point is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`
//! and the report carries the maximum over points.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::editing::{gate_gradient, layer_forward_traced, EditingLayerParams, TokenSequence};
use crate::error::{Error, Result};
use crate::loss::{adaptive_triplet, identity_ce, info_nce, match_bce, ClassifierHead, MatchLabel, TripletConfig};
use crate::memory_bank::{
    hard_contrastive, one_hot, scores_backward, similarity_scores, soft_contrastive, ContrastiveConfig,
};
use crate::model::EmbeddingVector;
use crate::tensor::{norm, Matrix};

pub const FD_STEP: f64 = 1e-5;
/// Points closer than this to a hinge or sign discontinuity are redrawn.
pub const KINK_GUARD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradLoss {
    AdaptiveTriplet,
    IdentityCe,
    InfoNce,
    MatchBce,
    SoftContrastive,
    HardContrastive,
    Gate,
}

impl GradLoss {
    pub const ALL: [GradLoss; 7] = [
        GradLoss::AdaptiveTriplet,
        GradLoss::IdentityCe,
        GradLoss::InfoNce,
        GradLoss::MatchBce,
        GradLoss::SoftContrastive,
        GradLoss::HardContrastive,
        GradLoss::Gate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GradLoss::AdaptiveTriplet => "adaptive_triplet",
            GradLoss::IdentityCe => "identity_ce",
            GradLoss::InfoNce => "info_nce",
            GradLoss::MatchBce => "match_bce",
            GradLoss::SoftContrastive => "soft_contrastive",
            GradLoss::HardContrastive => "hard_contrastive",
            GradLoss::Gate => "gate",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            GradLoss::Gate => 1e-6,
            _ => 1e-5,
        }
    }
}

impl fmt::Display for GradLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradLoss::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::UnknownLoss(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: GradLoss,
    pub n_points: usize,
    pub seed: u64,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Points redrawn because they sat near a kink.
    pub rejected: usize,
    pub tolerance: f64,
    pub passed: bool,
}

type ScalarFn = Box<dyn Fn(&[f64]) -> Result<f64>>;

/// A scalar function of a flat input with its analytic gradient.
struct Point {
    x: Vec<f64>,
    f: ScalarFn,
    grad: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn ev(v: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(v.to_vec()).expect("finite input")
}

fn mat(rows: usize, cols: usize, v: &[f64]) -> Matrix {
    Matrix::new(rows, cols, v.to_vec()).expect("finite input")
}

fn numeric_grad(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + FD_STEP;
            let up = f(&xp)?;
            xp[i] = x[i] - FD_STEP;
            let down = f(&xp)?;
            xp[i] = x[i];
            Ok((up - down) / (2.0 * FD_STEP))
        })
        .collect()
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-8)
}

const DIM: usize = 6;

/// Draws one point, or `None` when it lands next to a kink.
fn draw(loss: GradLoss, rng: &mut ChaCha8Rng) -> Result<Option<Point>> {
    match loss {
        GradLoss::AdaptiveTriplet => {
            let x = gaussian(rng, 3 * DIM);
            let b1: f64 = rng.random_range(-1.0..1.0);
            let b2: f64 = rng.random_range(-1.0..1.0);
            let cfg = TripletConfig::default();
            let f = move |x: &[f64]| -> Result<f64> {
                Ok(adaptive_triplet(&ev(&x[..DIM]), &ev(&x[DIM..2 * DIM]), &ev(&x[2 * DIM..]), b1, b2, &cfg)?.value)
            };
            // bracket value in the canonical orientation
            let d = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            let (a, r1, r2) = (&x[..DIM], &x[DIM..2 * DIM], &x[2 * DIM..]);
            let delta = b1 - b2;
            let bracket = delta.signum() * (d(a, r1) + delta * cfg.max_margin - d(a, r2));
            if delta.abs() < KINK_GUARD || bracket.abs() < KINK_GUARD {
                return Ok(None);
            }
            let out = adaptive_triplet(&ev(a), &ev(r1), &ev(r2), b1, b2, &cfg)?;
            let grad = [out.grad("anchor"), out.grad("ref1"), out.grad("ref2")]
                .iter()
                .flat_map(|m| m.as_slice().to_vec())
                .collect();
            Ok(Some(Point { x, f: Box::new(f), grad }))
        }
        GradLoss::IdentityCe => {
            let k = 5;
            let label = rng.random_range(0..k);
            let x = gaussian(rng, DIM + k * DIM + k);
            let split = move |x: &[f64]| {
                let head = ClassifierHead {
                    weights: mat(k, DIM, &x[DIM..DIM + k * DIM]),
                    bias: Some(x[DIM + k * DIM..].to_vec()),
                };
                (ev(&x[..DIM]), head)
            };
            let f = move |x: &[f64]| -> Result<f64> {
                let (feat, head) = split(x);
                Ok(identity_ce(&feat, &head, label)?.value)
            };
            let (feat, head) = split(&x);
            let out = identity_ce(&feat, &head, label)?;
            let grad = [out.grad("feature"), out.grad("head_weights"), out.grad("head_bias")]
                .iter()
                .flat_map(|m| m.as_slice().to_vec())
                .collect();
            Ok(Some(Point { x, f: Box::new(f), grad }))
        }
        GradLoss::InfoNce => {
            let b = 4;
            let temperature = rng.random_range(0.2..1.0);
            let x = gaussian(rng, 2 * b * DIM);
            let split = move |x: &[f64]| {
                let rows = |o: usize| (0..b).map(|i| ev(&x[o + i * DIM..o + (i + 1) * DIM])).collect::<Vec<_>>();
                (rows(0), rows(b * DIM))
            };
            let f = move |x: &[f64]| -> Result<f64> {
                let (img, txt) = split(x);
                Ok(info_nce(&img, &txt, temperature)?.value)
            };
            let (img, txt) = split(&x);
            let out = info_nce(&img, &txt, temperature)?;
            let grad = [out.grad("image"), out.grad("text")]
                .iter()
                .flat_map(|m| m.as_slice().to_vec())
                .collect();
            Ok(Some(Point { x, f: Box::new(f), grad }))
        }
        GradLoss::MatchBce => {
            let label = if rng.random::<bool>() {
                MatchLabel::PositivePair
            } else {
                MatchLabel::NegativePair
            };
            let x = gaussian(rng, 3 * DIM);
            let f = move |x: &[f64]| -> Result<f64> {
                Ok(match_bce(&ev(&x[..DIM]), &mat(2, DIM, &x[DIM..]), label)?.value)
            };
            let out = match_bce(&ev(&x[..DIM]), &mat(2, DIM, &x[DIM..]), label)?;
            let grad = [out.grad("fused"), out.grad("match_head")]
                .iter()
                .flat_map(|m| m.as_slice().to_vec())
                .collect();
            Ok(Some(Point { x, f: Box::new(f), grad }))
        }
        GradLoss::SoftContrastive | GradLoss::HardContrastive => {
            let k = 5;
            let cfg = ContrastiveConfig {
                temperature: rng.random_range(0.1..1.0),
                ..ContrastiveConfig::default()
            };
            let mut slots = Matrix::zeros(k, DIM);
            for i in 0..k {
                let v = gaussian(rng, DIM);
                let n = norm(&v);
                for (s, x) in slots.row_mut(i).iter_mut().zip(&v) {
                    *s = x / n;
                }
            }
            let target: Vec<f64> = if loss == GradLoss::SoftContrastive {
                (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()
            } else {
                one_hot(k, rng.random_range(0..k))
            };
            let x = gaussian(rng, DIM);
            let hard = loss == GradLoss::HardContrastive;
            let value = move |t: &[f64], s: &[f64]| {
                if hard {
                    hard_contrastive(t, s, &cfg)
                } else {
                    soft_contrastive(t, s, &cfg)
                }
            };
            // differentiated through the cosine scores to the feature
            let slots_f = slots.clone();
            let target_f = target.clone();
            let f = move |x: &[f64]| -> Result<f64> {
                let s = similarity_scores(&ev(x), &slots_f)?;
                Ok(value(&target_f, &s)?.value)
            };
            let s = similarity_scores(&ev(&x), &slots)?;
            let out = value(&target, &s)?;
            let grad = scores_backward(&ev(&x), &slots, out.grad("scores").as_slice());
            Ok(Some(Point { x, f: Box::new(f), grad }))
        }
        GradLoss::Gate => {
            let (n, m) = (3, 2);
            let params = EditingLayerParams::random(DIM, rng);
            let state = mat(n, DIM, &gaussian(rng, n * DIM));
            let instr = mat(m, DIM, &gaussian(rng, m * DIM));
            let upstream = mat(n, DIM, &gaussian(rng, n * DIM));
            let gate: f64 = rng.random_range(-1.0..1.0);
            let with_gate = move |g: f64| {
                let mut p = params.clone();
                p.gate = g;
                p
            };
            let (s2, i2, u2, wg) = (state.clone(), instr.clone(), upstream.clone(), with_gate.clone());
            let f = move |x: &[f64]| -> Result<f64> {
                let out = layer_forward_traced(&s2, &i2, &wg(x[0]))?;
                Ok(out.output().as_slice().iter().zip(u2.as_slice()).map(|(a, b)| a * b).sum())
            };
            let g = gate_gradient(&TokenSequence::new(state)?, &instr, &with_gate(gate), &upstream)?;
            Ok(Some(Point {
                x: vec![gate],
                f: Box::new(f),
                grad: vec![g],
            }))
        }
    }
}

/// Checks `loss` at `n_points` seeded points.
pub fn gradcheck(loss: GradLoss, n_points: usize, seed: u64) -> Result<GradcheckReport> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("need at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(n_points);
    let mut rejected = 0;
    while errors.len() < n_points {
        let Some(p) = draw(loss, &mut rng)? else {
            rejected += 1;
            continue;
        };
        let numeric = numeric_grad(p.f.as_ref(), &p.x)?;
        errors.push(rel_error(&p.grad, &numeric));
    }
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    let tolerance = loss.tolerance();
    Ok(GradcheckReport {
        loss,
        n_points,
        seed,
        max_rel_error,
        mean_rel_error: errors.iter().sum::<f64>() / n_points as f64,
        rejected,
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}

/// Parses a loss name and runs [`gradcheck`].
pub fn gradcheck_by_name(name: &str, n_points: usize, seed: u64) -> Result<GradcheckReport> {
    gradcheck(name.parse()?, n_points, seed)
}
