//! Identity-indexed feature memory banks and the soft/hard contrastive
//! losses computed against them.
//!
//! Each bank holds one unit-norm slot per training identity. Updates replace
//! the slot outright; there is no momentum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{identity_ce, ClassifierHead, LossOutput};
use crate::model::EmbeddingVector;
use crate::tensor::{cosine_slices, dot, l2_normalize, norm, softmax, Matrix, NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBankPair {
    retrieval: Matrix,
    auxiliary: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bank {
    Retrieval,
    Auxiliary,
}

impl MemoryBankPair {
    /// Both banks filled with seeded random unit vectors.
    pub fn init(n_identities: usize, dim: usize, seed: u64) -> Result<Self> {
        if n_identities == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "memory bank needs at least one identity and dimension".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = || {
            let mut m = Matrix::zeros(n_identities, dim);
            for i in 0..n_identities {
                loop {
                    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = norm(&v);
                    if n >= NORM_EPS {
                        for (dst, x) in m.row_mut(i).iter_mut().zip(&v) {
                            *dst = x / n;
                        }
                        break;
                    }
                }
            }
            m
        };
        let retrieval = fill();
        let auxiliary = fill();
        Ok(Self {
            retrieval,
            auxiliary,
        })
    }

    /// Wraps existing slot matrices, normalizing every row.
    pub fn from_slots(retrieval: Matrix, auxiliary: Matrix) -> Result<Self> {
        if retrieval.shape() != auxiliary.shape() || retrieval.rows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "bank shapes {:?} and {:?}",
                retrieval.shape(),
                auxiliary.shape()
            )));
        }
        let mut pair = Self {
            retrieval,
            auxiliary,
        };
        for bank in [Bank::Retrieval, Bank::Auxiliary] {
            for i in 0..pair.n_identities() {
                let v = EmbeddingVector::new(pair.slots(bank).row(i).to_vec())?;
                pair.update(bank, i, &v)?;
            }
        }
        Ok(pair)
    }

    pub fn n_identities(&self) -> usize {
        self.retrieval.rows()
    }

    pub fn dim(&self) -> usize {
        self.retrieval.cols()
    }

    pub fn slots(&self, bank: Bank) -> &Matrix {
        match bank {
            Bank::Retrieval => &self.retrieval,
            Bank::Auxiliary => &self.auxiliary,
        }
    }

    /// Replaces slot `identity` of `bank` with the normalized feature.
    pub fn update(&mut self, bank: Bank, identity: usize, feature: &EmbeddingVector) -> Result<()> {
        if identity >= self.n_identities() {
            return Err(Error::LabelOutOfRange {
                label: identity,
                n_classes: self.n_identities(),
            });
        }
        if feature.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "feature dim {} vs bank dim {}",
                feature.dim(),
                self.dim()
            )));
        }
        let unit = l2_normalize(feature)?;
        let slots = match bank {
            Bank::Retrieval => &mut self.retrieval,
            Bank::Auxiliary => &mut self.auxiliary,
        };
        slots.row_mut(identity).copy_from_slice(unit.as_slice());
        Ok(())
    }
}

/// Cosine of `feat` with every slot.
pub fn similarity_scores(feat: &EmbeddingVector, slots: &Matrix) -> Result<Vec<f64>> {
    if feat.dim() != slots.cols() {
        return Err(Error::DimensionMismatch(format!(
            "feature dim {} vs slot dim {}",
            feat.dim(),
            slots.cols()
        )));
    }
    let scores = (0..slots.rows())
        .map(|i| cosine_slices(feat.as_slice(), slots.row(i)))
        .collect::<Result<Vec<_>>>()?;
    debug_assert!(scores.iter().all(|s| (-1.0..=1.0).contains(s)));
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Smoothing added to both sides of the log ratio.
    pub xi: f64,
    pub temperature: f64,
    /// Weight of the hard-label term.
    pub weight_beta: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            xi: 1e-8,
            temperature: 1.0,
            weight_beta: 5.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) || !(self.temperature > 0.0) || !(self.weight_beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid contrastive config {self:?}"
            )));
        }
        Ok(())
    }
}

fn scaled_softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    softmax(&z)
}

/// `Σ P_t,i · ln((P_t,i + ξ) / (P_r,i + ξ))` with `P = softmax(S / T)`.
/// Only `S_r` is differentiated; gradient key `scores`.
fn smoothed_kl(target: &[f64], scores: &[f64], cfg: &ContrastiveConfig) -> Result<LossOutput> {
    if target.len() != scores.len() {
        return Err(Error::DimensionMismatch(format!(
            "score vectors of length {} and {}",
            target.len(),
            scores.len()
        )));
    }
    let p_t = scaled_softmax(target, cfg.temperature);
    let p_r = scaled_softmax(scores, cfg.temperature);
    let value: f64 = p_t
        .iter()
        .zip(&p_r)
        .map(|(t, r)| t * ((t + cfg.xi) / (r + cfg.xi)).ln())
        .sum();

    // dL/dP_r,i = −P_t,i / (P_r,i + ξ), then through the softmax
    let w: Vec<f64> = p_t.iter().zip(&p_r).map(|(t, r)| -t / (r + cfg.xi)).collect();
    let inner = dot(&w, &p_r);
    let grad: Vec<f64> = p_r
        .iter()
        .zip(&w)
        .map(|(r, wi)| r * (wi - inner) / cfg.temperature)
        .collect();
    let mut out = LossOutput {
        value,
        ..Default::default()
    };
    out.grads
        .insert("scores", Matrix::new(1, grad.len(), grad)?);
    Ok(out)
}

/// Soft-label loss: the auxiliary score distribution is the target.
pub fn soft_contrastive(s_a: &[f64], s_r: &[f64], cfg: &ContrastiveConfig) -> Result<LossOutput> {
    smoothed_kl(s_a, s_r, cfg)
}

/// Hard-label loss: a one-hot identity vector is the target.
pub fn hard_contrastive(s_gt: &[f64], s_r: &[f64], cfg: &ContrastiveConfig) -> Result<LossOutput> {
    let ones = s_gt.iter().filter(|&&v| v == 1.0).count();
    let zeros = s_gt.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != s_gt.len() {
        return Err(Error::InvalidArgument("hard target is not one-hot".into()));
    }
    smoothed_kl(s_gt, s_r, cfg)
}

pub fn one_hot(n: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

/// Chains a gradient on cosine scores back to the feature they were computed
/// from. Slots are assumed unit norm.
pub fn scores_backward(feat: &EmbeddingVector, slots: &Matrix, d_scores: &[f64]) -> Vec<f64> {
    let f = feat.as_slice();
    let n = norm(f);
    let mut out = vec![0.0; f.len()];
    for (i, &g) in d_scores.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let m = slots.row(i);
        let cos = dot(f, m) / n;
        // ∂cos/∂f = (m − cos·f/‖f‖) / ‖f‖
        for ((o, &mi), &fi) in out.iter_mut().zip(m).zip(f) {
            *o += g * (mi - cos * fi / n) / n;
        }
    }
    out
}

/// `L_id(F) + L_soft(F) + β·L_hard(F)` for one sample.
///
/// Gradients: `feature` (through the retrieval scores and the classifier)
/// and `head_weights`.
pub fn irmpp_total(
    feature: &EmbeddingVector,
    aux_feature: &EmbeddingVector,
    identity: usize,
    banks: &MemoryBankPair,
    head: &ClassifierHead,
    cfg: &ContrastiveConfig,
) -> Result<LossOutput> {
    if identity >= banks.n_identities() {
        return Err(Error::LabelOutOfRange {
            label: identity,
            n_classes: banks.n_identities(),
        });
    }
    let s_r = similarity_scores(feature, banks.slots(Bank::Retrieval))?;
    let s_a = similarity_scores(aux_feature, banks.slots(Bank::Auxiliary))?;
    let s_gt = one_hot(banks.n_identities(), identity);

    let id = identity_ce(feature, head, identity)?;
    let soft = soft_contrastive(&s_a, &s_r, cfg)?;
    let hard = hard_contrastive(&s_gt, &s_r, cfg)?;

    let mut d_scores = soft.grad("scores").clone();
    d_scores.add_scaled(hard.grad("scores"), cfg.weight_beta);
    let through_scores = scores_backward(feature, banks.slots(Bank::Retrieval), d_scores.as_slice());
    let mut d_feature = id.grad("feature").clone();
    for (d, s) in d_feature.as_mut_slice().iter_mut().zip(&through_scores) {
        *d += s;
    }

    let value = id.value + soft.value + cfg.weight_beta * hard.value;
    let mut out = LossOutput {
        value,
        ..Default::default()
    };
    out.grads.insert("feature", d_feature);
    out.grads
        .insert("head_weights", id.grad("head_weights").clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_unit() {
        let a = MemoryBankPair::init(5, 4, 7).unwrap();
        let b = MemoryBankPair::init(5, 4, 7).unwrap();
        assert_eq!(a, b);
        for bank in [Bank::Retrieval, Bank::Auxiliary] {
            for i in 0..5 {
                assert!((norm(a.slots(bank).row(i)) - 1.0).abs() < 1e-12);
            }
        }
        let c = MemoryBankPair::init(5, 4, 8).unwrap();
        assert_ne!(a, c);
        assert!(MemoryBankPair::init(0, 4, 1).is_err());
    }

    #[test]
    fn update_replaces_one_slot() {
        let mut bank = MemoryBankPair::init(3, 2, 1).unwrap();
        let before = bank.clone();
        bank.update(Bank::Retrieval, 1, &ev(&[3.0, 4.0])).unwrap();
        assert_eq!(bank.slots(Bank::Retrieval).row(1), &[0.6, 0.8]);
        assert_eq!(bank.slots(Bank::Retrieval).row(0), before.slots(Bank::Retrieval).row(0));
        assert_eq!(bank.slots(Bank::Auxiliary), before.slots(Bank::Auxiliary));
        bank.update(Bank::Retrieval, 1, &ev(&[0.0, -2.0])).unwrap();
        assert_eq!(bank.slots(Bank::Retrieval).row(1), &[0.0, -1.0]);
        assert!(bank.update(Bank::Retrieval, 3, &ev(&[1.0, 0.0])).is_err());
        assert!(bank.update(Bank::Retrieval, 0, &ev(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn similarity_examples() {
        let slots = Matrix::identity(3);
        let s = similarity_scores(&ev(&[0.0, 1.0, 0.0]), &slots).unwrap();
        assert_eq!(s, vec![0.0, 1.0, 0.0]);
        let s = similarity_scores(&ev(&[1.0, 1.0]), &Matrix::identity(2)).unwrap();
        assert!((s[0] - 0.7071067811865475).abs() < 1e-15);
        assert!((s[1] - 0.7071067811865475).abs() < 1e-15);
    }

    #[test]
    fn contrastive_identities() {
        let cfg = ContrastiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(soft_contrastive(&s, &s, &cfg).unwrap().value, 0.0);
            let gt = one_hot(6, rng.random_range(0..6));
            assert_eq!(hard_contrastive(&gt, &gt, &cfg).unwrap().value, 0.0);
            let a = soft_contrastive(&gt, &s, &cfg).unwrap();
            let b = hard_contrastive(&gt, &s, &cfg).unwrap();
            assert_eq!(a, b);
            let other: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(soft_contrastive(&other, &s, &cfg).unwrap().value >= -10.0 * cfg.xi);
        }
        assert!(hard_contrastive(&[0.5, 0.5], &[0.0, 0.0], &cfg).is_err());
        assert!(soft_contrastive(&[0.5], &[0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn irmpp_total_components() {
        let mut banks = MemoryBankPair::init(3, 4, 5).unwrap();
        let feature = ev(&[0.5, -0.2, 0.9, 0.1]);
        let aux = ev(&[0.1, 0.3, -0.4, 0.8]);
        banks.update(Bank::Retrieval, 1, &feature).unwrap();
        banks.update(Bank::Auxiliary, 1, &aux).unwrap();
        let head = ClassifierHead::new(
            Matrix::new(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        );
        let cfg = ContrastiveConfig::default();
        let out = irmpp_total(&feature, &aux, 1, &banks, &head, &cfg).unwrap();

        let s_r = similarity_scores(&feature, banks.slots(Bank::Retrieval)).unwrap();
        let s_a = similarity_scores(&aux, banks.slots(Bank::Auxiliary)).unwrap();
        let want = identity_ce(&feature, &head, 1).unwrap().value
            + soft_contrastive(&s_a, &s_r, &cfg).unwrap().value
            + 5.0 * hard_contrastive(&one_hot(3, 1), &s_r, &cfg).unwrap().value;
        assert!((out.value - want).abs() < 1e-12);

        let no_hard = ContrastiveConfig { weight_beta: 0.0, ..cfg };
        let out0 = irmpp_total(&feature, &aux, 1, &banks, &head, &no_hard).unwrap();
        let want0 = identity_ce(&feature, &head, 1).unwrap().value
            + soft_contrastive(&s_a, &s_r, &cfg).unwrap().value;
        assert!((out0.value - want0).abs() < 1e-12);
    }

    #[test]
    fn irmpp_feature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let banks = MemoryBankPair::init(4, 3, 9).unwrap();
        let head = ClassifierHead::new(
            Matrix::new(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        let cfg = ContrastiveConfig { temperature: 0.5, ..Default::default() };
        for _ in 0..20 {
            let f: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let aux = ev(&(0..3).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let out = irmpp_total(&ev(&f), &aux, 2, &banks, &head, &cfg).unwrap();
            let h = 1e-5;
            for i in 0..3 {
                let (mut fp, mut fm) = (f.clone(), f.clone());
                fp[i] += h;
                fm[i] -= h;
                let vp = irmpp_total(&ev(&fp), &aux, 2, &banks, &head, &cfg).unwrap().value;
                let vm = irmpp_total(&ev(&fm), &aux, 2, &banks, &head, &cfg).unwrap().value;
                let fd = (vp - vm) / (2.0 * h);
                assert!((fd - out.grad("feature").as_slice()[i]).abs() < 1e-7);
            }
        }
    }
}
