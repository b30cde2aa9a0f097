//! Instruction-editing attention layers with zero-initialized gating.
//!
//! A layer attends from its input tokens to two key sets: the tokens
//! themselves and the instruction tokens. The instruction branch is scaled by
//! a scalar gate that starts at zero, so a freshly built layer is exactly a
//! single-head self-attention block followed by an output projection.
//!
//! There is no residual path, norm or MLP. Only the gate and the inputs
//! receive gradients; the projection weights are treated as frozen.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingVector;
use crate::tensor::{matmul, matmul_transposed, softmax_rows, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditingLayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_k_instr: Matrix,
    pub w_v: Matrix,
    pub w_v_instr: Matrix,
    pub w_o: Matrix,
    pub gate: f64,
}

impl EditingLayerParams {
    /// Builds a layer from explicit projections. The gate starts at zero.
    pub fn from_matrices(
        w_q: Matrix,
        w_k: Matrix,
        w_k_instr: Matrix,
        w_v: Matrix,
        w_v_instr: Matrix,
        w_o: Matrix,
    ) -> Result<Self> {
        let c = w_q.rows();
        for (name, m) in [
            ("w_q", &w_q),
            ("w_k", &w_k),
            ("w_k_instr", &w_k_instr),
            ("w_v", &w_v),
            ("w_v_instr", &w_v_instr),
            ("w_o", &w_o),
        ] {
            if m.shape() != (c, c) {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {:?}, expected {c}x{c}",
                    m.shape()
                )));
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_k_instr,
            w_v,
            w_v_instr,
            w_o,
            gate: 0.0,
        })
    }

    /// All six projections set to the identity.
    pub fn identity(dim: usize) -> Self {
        let i = Matrix::identity(dim);
        Self {
            w_q: i.clone(),
            w_k: i.clone(),
            w_k_instr: i.clone(),
            w_v: i.clone(),
            w_v_instr: i.clone(),
            w_o: i,
            gate: 0.0,
        }
    }

    /// Random orthogonal projections: Gaussian draws orthonormalized row by
    /// row. They preserve norms, so an untrained stack keeps the geometry of
    /// its input.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut draw = || random_orthogonal(dim, rng);
        Self {
            w_q: draw(),
            w_k: draw(),
            w_k_instr: draw(),
            w_v: draw(),
            w_v_instr: draw(),
            w_o: draw(),
            gate: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn matrices(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_k_instr", &self.w_k_instr),
            ("w_v", &self.w_v),
            ("w_v_instr", &self.w_v_instr),
            ("w_o", &self.w_o),
        ]
    }
}

/// Modified Gram-Schmidt on Gaussian rows; a row that collapses is redrawn.
fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for u in &rows {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= p * b;
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Matrix::new(dim, dim, rows.concat()).expect("finite rows")
}

/// A CLS token followed by zero or more patch tokens, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Matrix,
}

impl TokenSequence {
    pub fn new(tokens: Matrix) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::InvalidArgument(
                "token sequence needs at least the CLS row".into(),
            ));
        }
        Ok(Self { tokens })
    }

    /// A sequence holding only the CLS token.
    pub fn cls_only(feature: &EmbeddingVector) -> Self {
        Self {
            tokens: Matrix::from_vector(feature),
        }
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn cls(&self) -> EmbeddingVector {
        EmbeddingVector::new(self.tokens.row(0).to_vec()).expect("finite tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Intermediate values of one layer's forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    input: Matrix,
    instr: Matrix,
    q: Matrix,
    k: Matrix,
    k_instr: Matrix,
    v: Matrix,
    v_instr: Matrix,
    /// Softmax over self keys.
    attn: Matrix,
    /// Softmax over instruction keys, before gating.
    attn_instr: Matrix,
    /// `attn_instr · v_instr`, the quantity the gate multiplies.
    instr_mix: Matrix,
    output: Matrix,
}

impl LayerTrace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// The row-concatenated attention map `[A, g·A']`.
    pub fn attention_map(&self, gate: f64) -> Matrix {
        let n = self.attn.rows();
        let (ns, ni) = (self.attn.cols(), self.attn_instr.cols());
        let mut out = Matrix::zeros(n, ns + ni);
        for r in 0..n {
            let row = out.row_mut(r);
            row[..ns].copy_from_slice(self.attn.row(r));
            for (dst, src) in row[ns..].iter_mut().zip(self.attn_instr.row(r)) {
                *dst = gate * src;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_input: Matrix,
    pub d_instr: Matrix,
    pub d_gate: f64,
}

fn check_instr(instr: &Matrix, dim: usize) -> Result<()> {
    if instr.cols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "instruction tokens have {} columns, layer dim is {dim}",
            instr.cols()
        )));
    }
    Ok(())
}

pub fn layer_forward_traced(
    state: &Matrix,
    instr: &Matrix,
    params: &EditingLayerParams,
) -> Result<LayerTrace> {
    let c = params.dim();
    if state.cols() != c {
        return Err(Error::DimensionMismatch(format!(
            "state has {} columns, layer dim is {c}",
            state.cols()
        )));
    }
    check_instr(instr, c)?;
    let scale = (c as f64).sqrt();

    let q = matmul(state, &params.w_q)?;
    let k = matmul(state, &params.w_k)?;
    let v = matmul(state, &params.w_v)?;
    let k_instr = matmul(instr, &params.w_k_instr)?;
    let v_instr = matmul(instr, &params.w_v_instr)?;

    let attn = softmax_rows(&matmul_transposed(&q, &k)?.scale(1.0 / scale));
    let attn_instr = softmax_rows(&matmul_transposed(&q, &k_instr)?.scale(1.0 / scale));

    let mut mixed = matmul(&attn, &v)?;
    let instr_mix = matmul(&attn_instr, &v_instr)?;
    // A zero gate contributes nothing, not even a signed zero.
    if params.gate != 0.0 {
        mixed.add_scaled(&instr_mix, params.gate);
    }
    let output = matmul(&mixed, &params.w_o)?;

    Ok(LayerTrace {
        input: state.clone(),
        instr: instr.clone(),
        q,
        k,
        k_instr,
        v,
        v_instr,
        attn,
        attn_instr,
        instr_mix,
        output,
    })
}

/// One gated attention layer. `instr` may have zero rows, in which case the
/// instruction branch is empty and contributes nothing.
pub fn editing_layer_forward(
    state: &TokenSequence,
    instr: &Matrix,
    params: &EditingLayerParams,
) -> Result<TokenSequence> {
    let trace = layer_forward_traced(state.tokens(), instr, params)?;
    Ok(TokenSequence {
        tokens: trace.output,
    })
}

/// Backpropagates `d_output` (same shape as the layer output) to the layer
/// inputs and the gate. Projection weights are not differentiated.
pub fn layer_backward(
    trace: &LayerTrace,
    params: &EditingLayerParams,
    d_output: &Matrix,
) -> Result<LayerGrads> {
    if d_output.shape() != trace.output.shape() {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient {:?} vs output {:?}",
            d_output.shape(),
            trace.output.shape()
        )));
    }
    let c = params.dim();
    let inv_scale = 1.0 / (c as f64).sqrt();
    let gate = params.gate;

    let d_mixed = matmul_transposed(d_output, &params.w_o)?;
    let d_gate: f64 = d_mixed
        .as_slice()
        .iter()
        .zip(trace.instr_mix.as_slice())
        .map(|(a, b)| a * b)
        .sum();

    // self branch
    let d_attn = matmul_transposed(&d_mixed, &trace.v)?;
    let d_v = matmul(&trace.attn.transpose(), &d_mixed)?;
    let d_scores = softmax_backward(&trace.attn, &d_attn).scale(inv_scale);

    // instruction branch
    let d_attn_instr = matmul_transposed(&d_mixed, &trace.v_instr)?.scale(gate);
    let d_v_instr = matmul(&trace.attn_instr.transpose(), &d_mixed)?.scale(gate);
    let d_scores_instr = softmax_backward(&trace.attn_instr, &d_attn_instr).scale(inv_scale);

    let mut d_q = matmul(&d_scores, &trace.k)?;
    d_q.add_scaled(&matmul(&d_scores_instr, &trace.k_instr)?, 1.0);
    let d_k = matmul(&d_scores.transpose(), &trace.q)?;
    let d_k_instr = matmul(&d_scores_instr.transpose(), &trace.q)?;

    let mut d_input = matmul_transposed(&d_q, &params.w_q)?;
    d_input.add_scaled(&matmul_transposed(&d_k, &params.w_k)?, 1.0);
    d_input.add_scaled(&matmul_transposed(&d_v, &params.w_v)?, 1.0);

    let mut d_instr = matmul_transposed(&d_k_instr, &params.w_k_instr)?;
    d_instr.add_scaled(&matmul_transposed(&d_v_instr, &params.w_v_instr)?, 1.0);

    debug_assert_eq!(d_input.shape(), trace.input.shape());
    debug_assert_eq!(d_instr.shape(), trace.instr.shape());
    Ok(LayerGrads {
        d_input,
        d_instr,
        d_gate,
    })
}

/// Row-wise softmax Jacobian-vector product: `p ⊙ (g − Σ g⊙p)`.
fn softmax_backward(p: &Matrix, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let (pr, gr) = (p.row(r), g.row(r));
        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (pi, gi)) in out.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
            *o = pi * (gi - inner);
        }
    }
    out
}

/// Derivative of `⟨upstream, layer output⟩` with respect to the gate.
pub fn gate_gradient(
    state: &TokenSequence,
    instr: &Matrix,
    params: &EditingLayerParams,
    upstream: &Matrix,
) -> Result<f64> {
    let trace = layer_forward_traced(state.tokens(), instr, params)?;
    if upstream.shape() != trace.output.shape() {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient {:?} vs output {:?}",
            upstream.shape(),
            trace.output.shape()
        )));
    }
    let d_mixed = matmul_transposed(upstream, &params.w_o)?;
    Ok(d_mixed
        .as_slice()
        .iter()
        .zip(trace.instr_mix.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

/// Forward traces for every layer of a stack.
#[derive(Debug, Clone)]
pub struct StackTrace {
    pub layers: Vec<LayerTrace>,
}

impl StackTrace {
    pub fn cls(&self) -> EmbeddingVector {
        let last = self.layers.last().expect("non-empty stack");
        EmbeddingVector::new(last.output.row(0).to_vec()).expect("finite output")
    }
}

#[derive(Debug, Clone)]
pub struct StackGrads {
    pub d_state: Matrix,
    pub d_instr: Matrix,
    pub d_gates: Vec<f64>,
}

pub fn stack_forward_traced(
    state: &TokenSequence,
    instr: &Matrix,
    layers: &[EditingLayerParams],
) -> Result<StackTrace> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("editing stack has no layers".into()));
    }
    let mut traces = Vec::with_capacity(layers.len());
    let mut current = state.tokens().clone();
    for layer in layers {
        let t = layer_forward_traced(&current, instr, layer)?;
        current = t.output.clone();
        traces.push(t);
    }
    Ok(StackTrace { layers: traces })
}

/// Runs the layers in order and returns the final CLS row.
pub fn editing_stack_forward(
    state: &TokenSequence,
    instr: &Matrix,
    layers: &[EditingLayerParams],
) -> Result<EmbeddingVector> {
    Ok(stack_forward_traced(state, instr, layers)?.cls())
}

/// Backpropagates a gradient on the final CLS row through the whole stack.
pub fn stack_backward(
    trace: &StackTrace,
    layers: &[EditingLayerParams],
    d_cls: &[f64],
) -> Result<StackGrads> {
    let last = trace.layers.last().expect("non-empty stack");
    let mut d_out = Matrix::zeros(last.output.rows(), last.output.cols());
    d_out.row_mut(0).copy_from_slice(d_cls);
    let mut d_instr = Matrix::zeros(last.instr.rows(), last.instr.cols());
    let mut d_gates = vec![0.0; layers.len()];
    for (i, (t, p)) in trace.layers.iter().zip(layers).enumerate().rev() {
        let g = layer_backward(t, p, &d_out)?;
        d_instr.add_scaled(&g.d_instr, 1.0);
        d_gates[i] = g.d_gate;
        d_out = g.d_input;
    }
    Ok(StackGrads {
        d_state: d_out,
        d_instr,
        d_gates,
    })
}

/// The fusion head: one editing layer over the single-token sequence
/// `[feature]`, returning its output token.
pub fn fuse(
    feature: &EmbeddingVector,
    instr: &Matrix,
    params: &EditingLayerParams,
) -> Result<EmbeddingVector> {
    if feature.dim() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature dim {} vs layer dim {}",
            feature.dim(),
            params.dim()
        )));
    }
    let out = editing_layer_forward(&TokenSequence::cls_only(feature), instr, params)?;
    Ok(out.cls())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let n = Normal::new(0.0, 1.0).unwrap();
        Matrix::new(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
    }

    /// Straight-line gated attention at C = 2, identity projections:
    /// out_i = Σ_j softmax_j(x_i·x_j/√2) x_j + g Σ_t softmax_t(x_i·t_t/√2) t_t
    fn reference_identity_layer(x: &[[f64; 2]], t: &[[f64; 2]], g: f64) -> Vec<[f64; 2]> {
        let s = 2f64.sqrt();
        x.iter()
            .map(|xi| {
                let attend = |keys: &[[f64; 2]]| {
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|k| (xi[0] * k[0] + xi[1] * k[1]) / s)
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = w.iter().sum();
                    let mut out = [0.0; 2];
                    for (wk, k) in w.iter().zip(keys) {
                        out[0] += wk / z * k[0];
                        out[1] += wk / z * k[1];
                    }
                    out
                };
                let a = attend(x);
                let b = attend(t);
                [a[0] + g * b[0], a[1] + g * b[1]]
            })
            .collect()
    }

    #[test]
    fn identity_layer_matches_reference() {
        let x = [[0.3, -1.2], [0.8, 0.5]];
        let t = [[1.5, 0.2]];
        let mut p = EditingLayerParams::identity(2);
        p.gate = 1.0;
        let state = TokenSequence::new(m(&[&x[0], &x[1]])).unwrap();
        let out = editing_layer_forward(&state, &m(&[&t[0]]), &p).unwrap();
        let want = reference_identity_layer(&x, &t, 1.0);
        for (r, w) in want.iter().enumerate() {
            for c in 0..2 {
                assert!((out.tokens().get(r, c) - w[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_layer_stack_matches_reference() {
        let x = [[0.3, -1.2], [0.8, 0.5], [-0.4, 0.1]];
        let t = [[1.5, 0.2], [-0.3, 0.9]];
        let l0 = EditingLayerParams::identity(2);
        let mut l1 = EditingLayerParams::identity(2);
        l1.gate = 1.0;
        let state = TokenSequence::new(m(&[&x[0], &x[1], &x[2]])).unwrap();
        let cls = editing_stack_forward(&state, &m(&[&t[0], &t[1]]), &[l0, l1]).unwrap();
        let h = reference_identity_layer(&x, &t, 0.0);
        let want = reference_identity_layer(&h, &t, 1.0)[0];
        assert!((cls.as_slice()[0] - want[0]).abs() < 1e-14);
        assert!((cls.as_slice()[1] - want[1]).abs() < 1e-14);
    }

    #[test]
    fn zero_gate_ignores_instruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EditingLayerParams::random(4, &mut rng);
        let state = TokenSequence::new(random_matrix(&mut rng, 3, 4)).unwrap();
        let a = editing_layer_forward(&state, &random_matrix(&mut rng, 2, 4), &p).unwrap();
        let b = editing_layer_forward(&state, &random_matrix(&mut rng, 5, 4), &p).unwrap();
        let none = editing_layer_forward(&state, &Matrix::zeros(0, 4), &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, none);
    }

    #[test]
    fn fuse_examples() {
        let f = EmbeddingVector::new(vec![0.4, -0.7]).unwrap();
        let p = EditingLayerParams::identity(2);
        assert_eq!(fuse(&f, &m(&[&[9.0, 9.0]]), &p).unwrap(), f);

        let mut p1 = p.clone();
        p1.gate = 1.0;
        let out = fuse(&f, &Matrix::from_vector(&f), &p1).unwrap();
        assert_eq!(out.as_slice(), &[0.8, -1.4]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pr = EditingLayerParams::random(2, &mut rng);
        let out = fuse(&f, &m(&[&[1.0, 2.0]]), &pr).unwrap();
        let want = matmul(&matmul(&Matrix::from_vector(&f), &pr.w_v).unwrap(), &pr.w_o).unwrap();
        assert_eq!(out.as_slice(), want.row(0));
    }

    #[test]
    fn attention_map_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = EditingLayerParams::random(3, &mut rng);
        p.gate = 0.37;
        let x = random_matrix(&mut rng, 4, 3);
        let t = random_matrix(&mut rng, 2, 3);
        let trace = layer_forward_traced(&x, &t, &p).unwrap();
        let map = trace.attention_map(p.gate);
        for r in 0..4 {
            let first: f64 = map.row(r)[..4].iter().sum();
            let second: f64 = map.row(r)[4..].iter().sum();
            assert!((first - 1.0).abs() < 1e-12);
            assert!((second - 0.37).abs() < 1e-10);
        }
    }

    #[test]
    fn gate_gradient_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = EditingLayerParams::random(3, &mut rng);
        p.gate = 0.5;
        let state = TokenSequence::new(random_matrix(&mut rng, 2, 3)).unwrap();
        let instr = random_matrix(&mut rng, 2, 3);
        let zero_up = Matrix::zeros(2, 3);
        assert_eq!(gate_gradient(&state, &instr, &p, &zero_up).unwrap(), 0.0);

        let mut p0 = p.clone();
        p0.w_v_instr = Matrix::zeros(3, 3);
        let up = random_matrix(&mut rng, 2, 3);
        assert_eq!(
            gate_gradient(&state, &Matrix::zeros(2, 3), &p0, &up).unwrap(),
            0.0
        );
    }

    /// Central differences of `⟨upstream, out⟩` against the analytic
    /// input, instruction and gate gradients.
    #[test]
    fn layer_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mut p = EditingLayerParams::random(3, &mut rng);
            p.gate = rng.random_range(-1.5..1.5);
            let x = random_matrix(&mut rng, 3, 3);
            let t = random_matrix(&mut rng, 2, 3);
            let up = random_matrix(&mut rng, 3, 3);
            let objective = |x: &Matrix, t: &Matrix, p: &EditingLayerParams| {
                let o = layer_forward_traced(x, t, p).unwrap();
                crate::tensor::dot(o.output().as_slice(), up.as_slice())
            };
            let trace = layer_forward_traced(&x, &t, &p).unwrap();
            let g = layer_backward(&trace, &p, &up).unwrap();
            let h = 1e-5;
            for i in 0..9 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.as_mut_slice()[i] += h;
                xm.as_mut_slice()[i] -= h;
                let fd = (objective(&xp, &t, &p) - objective(&xm, &t, &p)) / (2.0 * h);
                assert!((fd - g.d_input.as_slice()[i]).abs() < 1e-7, "d_input[{i}]");
            }
            for i in 0..6 {
                let (mut tp, mut tm) = (t.clone(), t.clone());
                tp.as_mut_slice()[i] += h;
                tm.as_mut_slice()[i] -= h;
                let fd = (objective(&x, &tp, &p) - objective(&x, &tm, &p)) / (2.0 * h);
                assert!((fd - g.d_instr.as_slice()[i]).abs() < 1e-7, "d_instr[{i}]");
            }
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.gate += h;
            pm.gate -= h;
            let fd = (objective(&x, &t, &pp) - objective(&x, &t, &pm)) / (2.0 * h);
            assert!((fd - g.d_gate).abs() < 1e-7);
        }
    }

    #[test]
    fn stack_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layers: Vec<_> = (0..2).map(|_| EditingLayerParams::random(3, &mut rng)).collect();
        layers[0].gate = 0.4;
        layers[1].gate = -0.8;
        let x = random_matrix(&mut rng, 2, 3);
        let t = random_matrix(&mut rng, 1, 3);
        let d_cls = [0.3, -1.0, 0.5];
        let objective = |x: &Matrix, layers: &[EditingLayerParams]| {
            let s = TokenSequence::new(x.clone()).unwrap();
            let cls = editing_stack_forward(&s, &t, layers).unwrap();
            crate::tensor::dot(cls.as_slice(), &d_cls)
        };
        let trace = stack_forward_traced(&TokenSequence::new(x.clone()).unwrap(), &t, &layers).unwrap();
        let g = stack_backward(&trace, &layers, &d_cls).unwrap();
        let h = 1e-5;
        for i in 0..6 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_mut_slice()[i] += h;
            xm.as_mut_slice()[i] -= h;
            let fd = (objective(&xp, &layers) - objective(&xm, &layers)) / (2.0 * h);
            assert!((fd - g.d_state.as_slice()[i]).abs() < 1e-7);
        }
        for l in 0..2 {
            let (mut lp, mut lm) = (layers.clone(), layers.clone());
            lp[l].gate += h;
            lm[l].gate -= h;
            let fd = (objective(&x, &lp) - objective(&x, &lm)) / (2.0 * h);
            assert!((fd - g.d_gates[l]).abs() < 1e-7);
        }
    }

    #[test]
    fn empty_stack_is_an_error() {
        let s = TokenSequence::cls_only(&EmbeddingVector::new(vec![1.0, 0.0]).unwrap());
        assert!(editing_stack_forward(&s, &Matrix::zeros(0, 2), &[]).is_err());
    }
}
