//! Metric-learning and classification losses with analytic gradients.
//!
//! Every loss returns a [`LossOutput`] whose gradient entries have the same
//! shape as the corresponding input (vectors come back as `1 x C`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingVector;
use crate::tensor::{cosine, dot, matmul, matmul_transposed, norm, softmax, Matrix, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    /// Largest margin, reached when one reference is fully related and the
    /// other not at all.
    pub max_margin: f64,
    /// Weight of each triplet term in the IRM objective.
    pub weight_alpha: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            max_margin: 0.3,
            weight_alpha: 3.0,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_margin > 0.0) {
            return Err(Error::InvalidArgument("max_margin must be positive".into()));
        }
        if !(self.weight_alpha >= 0.0) {
            return Err(Error::InvalidArgument("weight_alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear identity classifier, one row per identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl ClassifierHead {
    pub fn new(weights: Matrix) -> Self {
        Self {
            weights,
            bias: None,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.weights.cols() {
            return Err(Error::DimensionMismatch(format!(
                "feature dim {} vs head dim {}",
                feature.len(),
                self.weights.cols()
            )));
        }
        let mut z: Vec<f64> = (0..self.weights.rows())
            .map(|r| dot(self.weights.row(r), feature))
            .collect();
        if let Some(b) = &self.bias {
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi += bi;
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossOutput {
    pub value: f64,
    pub grads: BTreeMap<&'static str, Matrix>,
}

impl LossOutput {
    fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
        }
    }

    fn with(mut self, name: &'static str, g: Matrix) -> Self {
        self.grads.insert(name, g);
        self
    }

    /// Panics if `name` was not produced by this loss.
    pub fn grad(&self, name: &str) -> &Matrix {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient named `{name}`"))
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self
                .grads
                .values()
                .all(|m| m.as_slice().iter().all(|v| v.is_finite()))
    }
}

fn row(v: &[f64]) -> Matrix {
    Matrix::new(1, v.len(), v.to_vec()).expect("finite row")
}

fn same_dim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Squared Euclidean distance.
pub fn euclid_sq(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    same_dim(a, b)?;
    Ok(sq_dist(a.as_slice(), b.as_slice()))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Relatedness of a reference to an anchor: instruction cosine if the two
/// share an identity, zero otherwise.
pub fn relatedness(
    anchor_id: usize,
    ref_id: usize,
    instr_a: &EmbeddingVector,
    instr_r: &EmbeddingVector,
) -> Result<f64> {
    let c = cosine(instr_a, instr_r)?;
    Ok(if anchor_id == ref_id { c } else { 0.0 })
}

/// `{Sign(β₁−β₂) [d(a,r₁) + (β₁−β₂)m − d(a,r₂)]}₊` with `Sign(0) = 0`.
///
/// Evaluated in the equivalent form `[d(a,r_hi) + |β₁−β₂|m − d(a,r_lo)]₊`,
/// where `r_hi` is the more related reference. The two forms agree in exact
/// arithmetic; the second one makes swapping the references a bitwise no-op.
pub fn adaptive_triplet(
    anchor: &EmbeddingVector,
    ref1: &EmbeddingVector,
    ref2: &EmbeddingVector,
    beta1: f64,
    beta2: f64,
    cfg: &TripletConfig,
) -> Result<LossOutput> {
    same_dim(anchor, ref1)?;
    same_dim(anchor, ref2)?;
    let (a, r1, r2) = (anchor.as_slice(), ref1.as_slice(), ref2.as_slice());
    let zeros = || row(&vec![0.0; a.len()]);
    let zero_out = |value| {
        LossOutput::new(value)
            .with("anchor", zeros())
            .with("ref1", zeros())
            .with("ref2", zeros())
    };

    let (hi, lo, delta, swapped) = if beta1 > beta2 {
        (r1, r2, beta1 - beta2, false)
    } else if beta2 > beta1 {
        (r2, r1, beta2 - beta1, true)
    } else {
        return Ok(zero_out(0.0));
    };
    let bracket = sq_dist(a, hi) + delta * cfg.max_margin - sq_dist(a, lo);
    if bracket <= 0.0 {
        return Ok(zero_out(0.0));
    }

    // ∂/∂a = 2(a−hi) − 2(a−lo), ∂/∂hi = −2(a−hi), ∂/∂lo = 2(a−lo)
    let g_a: Vec<f64> = hi.iter().zip(lo).map(|(h, l)| 2.0 * (l - h)).collect();
    let g_hi: Vec<f64> = a.iter().zip(hi).map(|(x, h)| -2.0 * (x - h)).collect();
    let g_lo: Vec<f64> = a.iter().zip(lo).map(|(x, l)| 2.0 * (x - l)).collect();
    let (g1, g2) = if swapped { (g_lo, g_hi) } else { (g_hi, g_lo) };
    Ok(LossOutput::new(bracket)
        .with("anchor", row(&g_a))
        .with("ref1", row(&g1))
        .with("ref2", row(&g2)))
}

/// Cross-entropy `logsumexp(z) − z_y` and its gradient `softmax(z) − e_y`.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let (arg, &max) = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty logits");
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, z)| (z - max).exp())
        .sum();
    let value = (max - logits[label]) + rest.ln_1p();
    let mut g = softmax(logits);
    g[label] -= 1.0;
    (value, g)
}

/// Softmax cross-entropy of `head · feature` against `label`. Gradients:
/// `feature`, `head_weights`, and `head_bias` when the head has one.
pub fn identity_ce(
    feature: &EmbeddingVector,
    head: &ClassifierHead,
    label: usize,
) -> Result<LossOutput> {
    if label >= head.n_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: head.n_classes(),
        });
    }
    let f = feature.as_slice();
    let logits = head.logits(f)?;
    let (value, dz) = softmax_xent(&logits, label);

    let dz_m = row(&dz);
    let d_feature = matmul(&dz_m, &head.weights)?;
    let d_weights = matmul(&dz_m.transpose(), &row(f))?;
    let mut out = LossOutput::new(value)
        .with("feature", d_feature)
        .with("head_weights", d_weights);
    if head.bias.is_some() {
        out = out.with("head_bias", dz_m);
    }
    Ok(out)
}

/// Backprop through `u = x / ‖x‖`.
fn normalize_backward(x: &[f64], du: &[f64]) -> Vec<f64> {
    let n = norm(x);
    let u: Vec<f64> = x.iter().map(|v| v / n).collect();
    let proj = dot(&u, du);
    du.iter().zip(&u).map(|(d, ui)| (d - ui * proj) / n).collect()
}

fn normalized_rows(feats: &[EmbeddingVector]) -> Result<Matrix> {
    let dim = feats[0].dim();
    let mut m = Matrix::zeros(feats.len(), dim);
    for (i, f) in feats.iter().enumerate() {
        if f.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "feature {i} has dim {}, expected {dim}",
                f.dim()
            )));
        }
        let n = f.norm();
        if n < NORM_EPS {
            return Err(Error::DegenerateVector { norm: n });
        }
        for (dst, v) in m.row_mut(i).iter_mut().zip(f.as_slice()) {
            *dst = v / n;
        }
    }
    Ok(m)
}

/// Symmetric in-batch contrastive loss between paired image and text
/// features: the mean of the image→text and text→image cross-entropies over
/// cosine similarities divided by `temperature`, with matching indices as
/// targets. Gradients: `image`, `text` (each `B x C`).
pub fn info_nce(
    image_feats: &[EmbeddingVector],
    text_feats: &[EmbeddingVector],
    temperature: f64,
) -> Result<LossOutput> {
    let b = image_feats.len();
    if b < 2 || text_feats.len() != b {
        return Err(Error::InvalidArgument(format!(
            "info_nce needs two equal batches of at least 2, got {b} and {}",
            text_feats.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let u = normalized_rows(image_feats)?;
    let v = normalized_rows(text_feats)?;
    if u.cols() != v.cols() {
        return Err(Error::DimensionMismatch("image and text dims differ".into()));
    }
    let logits = matmul_transposed(&u, &v)?.scale(1.0 / temperature);
    let logits_t = logits.transpose();

    let mut value = 0.0;
    let mut d_logits = Matrix::zeros(b, b);
    let w = 0.5 / b as f64;
    for i in 0..b {
        let (l_row, g_row) = softmax_xent(logits.row(i), i);
        let (l_col, g_col) = softmax_xent(logits_t.row(i), i);
        value += w * (l_row + l_col);
        for j in 0..b {
            let cur = d_logits.get(i, j);
            d_logits.set(i, j, cur + w * g_row[j]);
            let cur = d_logits.get(j, i);
            d_logits.set(j, i, cur + w * g_col[j]);
        }
    }
    let d_logits = d_logits.scale(1.0 / temperature);
    let d_u = matmul(&d_logits, &v)?;
    let d_v = matmul(&d_logits.transpose(), &u)?;

    let mut d_img = Matrix::zeros(b, u.cols());
    let mut d_txt = Matrix::zeros(b, u.cols());
    for i in 0..b {
        d_img
            .row_mut(i)
            .copy_from_slice(&normalize_backward(image_feats[i].as_slice(), d_u.row(i)));
        d_txt
            .row_mut(i)
            .copy_from_slice(&normalize_backward(text_feats[i].as_slice(), d_v.row(i)));
    }
    Ok(LossOutput::new(value)
        .with("image", d_img)
        .with("text", d_txt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLabel {
    NegativePair,
    PositivePair,
}

impl MatchLabel {
    fn class(self) -> usize {
        match self {
            MatchLabel::NegativePair => 0,
            MatchLabel::PositivePair => 1,
        }
    }
}

/// Two-way cross-entropy of `match_head · fused`; class 1 is "positive
/// pair". Gradients: `fused`, `match_head`.
pub fn match_bce(
    fused: &EmbeddingVector,
    match_head: &Matrix,
    label: MatchLabel,
) -> Result<LossOutput> {
    if match_head.shape() != (2, fused.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "match head {:?} for feature dim {}",
            match_head.shape(),
            fused.dim()
        )));
    }
    let f = fused.as_slice();
    let logits = [dot(match_head.row(0), f), dot(match_head.row(1), f)];
    let (value, dz) = softmax_xent(&logits, label.class());
    let dz_m = row(&dz);
    Ok(LossOutput::new(value)
        .with("fused", matmul(&dz_m, match_head)?)
        .with("match_head", matmul(&dz_m.transpose(), &row(f))?))
}

/// Positive-class probability of a fused pair under `match_head`.
pub fn match_probability(fused: &EmbeddingVector, match_head: &Matrix) -> Result<f64> {
    if match_head.shape() != (2, fused.dim()) {
        return Err(Error::DimensionMismatch("match head shape".into()));
    }
    let f = fused.as_slice();
    let p = softmax(&[dot(match_head.row(0), f), dot(match_head.row(1), f)]);
    Ok(p[1])
}

/// Batch-index triplet with precomputed relatednesses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub anchor: usize,
    pub ref1: usize,
    pub ref2: usize,
    pub beta1: f64,
    pub beta2: f64,
}

/// Mean adaptive-triplet value over `triplets`, scattering gradients into a
/// `B x C` matrix. An empty triplet set contributes zero.
pub fn mean_triplet(
    feats: &Matrix,
    triplets: &[Triplet],
    cfg: &TripletConfig,
) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(feats.rows(), feats.cols());
    if triplets.is_empty() {
        return Ok((0.0, grad));
    }
    let w = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    for t in triplets {
        let out = adaptive_triplet(
            &feats.row_vector(t.anchor)?,
            &feats.row_vector(t.ref1)?,
            &feats.row_vector(t.ref2)?,
            t.beta1,
            t.beta2,
            cfg,
        )?;
        total += out.value;
        if out.value > 0.0 {
            for (name, idx) in [("anchor", t.anchor), ("ref1", t.ref1), ("ref2", t.ref2)] {
                for (g, d) in grad.row_mut(idx).iter_mut().zip(out.grad(name).as_slice()) {
                    *g += w * d;
                }
            }
        }
    }
    Ok((total * w, grad))
}

/// Mean identity cross-entropy over a batch. Returns the value plus
/// gradients for the features and the head weights.
pub fn mean_identity_ce(
    feats: &Matrix,
    labels: &[usize],
    head: &ClassifierHead,
) -> Result<(f64, Matrix, Matrix)> {
    if feats.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} features for {} labels",
            feats.rows(),
            labels.len()
        )));
    }
    let w = 1.0 / labels.len().max(1) as f64;
    let mut value = 0.0;
    let mut d_feats = Matrix::zeros(feats.rows(), feats.cols());
    let mut d_head = Matrix::zeros(head.weights.rows(), head.weights.cols());
    for (i, &y) in labels.iter().enumerate() {
        let out = identity_ce(&feats.row_vector(i)?, head, y)?;
        value += out.value;
        for (g, d) in d_feats.row_mut(i).iter_mut().zip(out.grad("feature").as_slice()) {
            *g += w * d;
        }
        d_head.add_scaled(out.grad("head_weights"), w);
    }
    Ok((value * w, d_feats, d_head))
}

/// Inputs of the IRM objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct IrmBatch<'a> {
    /// Edited features, one row per sample.
    pub features: &'a Matrix,
    /// Fused features, same shape.
    pub fused: &'a Matrix,
    pub labels: &'a [usize],
    pub triplets: &'a [Triplet],
}

/// `α·L_atri(F) + L_id(F) + α·L_atri(F_out) + L_id(F_out)`.
///
/// Gradients: `features`, `fused`, `head`, `head_fused`.
pub fn irm_total(
    batch: IrmBatch<'_>,
    head: &ClassifierHead,
    head_fused: &ClassifierHead,
    cfg: &TripletConfig,
) -> Result<LossOutput> {
    if batch.features.shape() != batch.fused.shape() {
        return Err(Error::DimensionMismatch("features and fused differ in shape".into()));
    }
    let alpha = cfg.weight_alpha;
    let (tri_f, mut g_f) = mean_triplet(batch.features, batch.triplets, cfg)?;
    let (tri_o, mut g_o) = mean_triplet(batch.fused, batch.triplets, cfg)?;
    let (id_f, gid_f, gh_f) = mean_identity_ce(batch.features, batch.labels, head)?;
    let (id_o, gid_o, gh_o) = mean_identity_ce(batch.fused, batch.labels, head_fused)?;

    let value = alpha * tri_f + id_f + alpha * tri_o + id_o;
    g_f = g_f.scale(alpha);
    g_f.add_scaled(&gid_f, 1.0);
    g_o = g_o.scale(alpha);
    g_o.add_scaled(&gid_o, 1.0);
    Ok(LossOutput::new(value)
        .with("features", g_f)
        .with("fused", g_o)
        .with("head", gh_f)
        .with("head_fused", gh_o))
}

/// Contrastive alignment plus mean pair-matching loss.
///
/// Gradients: `image`, `text`, `fused` (one row per pair, `0 x C` when there
/// are none), `match_head`.
pub fn t2i_total(
    image_feats: &[EmbeddingVector],
    text_feats: &[EmbeddingVector],
    fused_pairs: &[EmbeddingVector],
    labels: &[MatchLabel],
    temperature: f64,
    match_head: &Matrix,
) -> Result<LossOutput> {
    if fused_pairs.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} fused pairs for {} labels",
            fused_pairs.len(),
            labels.len()
        )));
    }
    let cl = info_nce(image_feats, text_feats, temperature)?;
    let mut value = cl.value;
    let mut d_fused = Matrix::zeros(fused_pairs.len(), match_head.cols());
    let mut d_head = Matrix::zeros(match_head.rows(), match_head.cols());
    if !fused_pairs.is_empty() {
        let w = 1.0 / fused_pairs.len() as f64;
        let mut sum = 0.0;
        for (i, (f, &y)) in fused_pairs.iter().zip(labels).enumerate() {
            let m = match_bce(f, match_head, y)?;
            sum += m.value;
            for (g, d) in d_fused.row_mut(i).iter_mut().zip(m.grad("fused").as_slice()) {
                *g = w * d;
            }
            d_head.add_scaled(m.grad("match_head"), w);
        }
        value += sum * w;
    }
    let LossOutput { grads, .. } = cl;
    let mut out = LossOutput { value, grads };
    out.grads.insert("fused", d_fused);
    out.grads.insert("match_head", d_head);
    Ok(out)
}
