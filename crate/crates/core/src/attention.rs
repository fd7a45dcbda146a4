//! Causal multi-head self-attention and the three-phase generalized
//! cross-attention used to read from the knowledge base.
//!
//! Each operation is written once against the gradient [`Tape`]; the
//! `Matrix`-level functions evaluate the same graph with constant leaves, so
//! the taped (training) and untaped (inference) paths agree bit for bit.

use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeBase, Threshold, ThresholdVars};
use crate::tensor::{Matrix, Rng, Tape, Var};

/// Similarity-to-weight mapping applied to scaled query-key scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Softmax,
    Relu,
}

fn check_qkv(op: &'static str, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() || k.rows() != v.rows() || q.cols() == 0 {
        return Err(Error::shape(
            op,
            format!(
                "Q {}x{}, K {}x{}, V {}x{}",
                q.rows(),
                q.cols(),
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            ),
        ));
    }
    Ok(())
}

/// `gate(Q Kᵀ / sqrt(d_k) + thresholds) V + bias` on the tape.
///
/// `thresholds` may be a `1 x |K|` row (broadcast over queries) or a full
/// `rows(Q) x |K|` matrix. Softmax ignores thresholds only if none are given.
pub fn attend(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    gate: Gate,
    thresholds: Option<Var>,
    bias: Option<Var>,
) -> Result<Var> {
    let d_k = t.value(q).cols();
    let kt = t.transpose(k);
    let scores = t.matmul(q, kt)?;
    let mut pre = t.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    if let Some(th) = thresholds {
        let th_shape = t.value(th).shape();
        pre = if th_shape.0 == 1 {
            t.add_row(pre, th)?
        } else {
            t.add(pre, th)?
        };
    }
    let weights = match gate {
        Gate::Softmax => t.softmax_rows(pre),
        Gate::Relu => t.relu(pre),
    };
    let mut out = t.matmul(weights, v)?;
    if let Some(b) = bias {
        out = t.add_row(out, b)?;
    }
    Ok(out)
}

fn eval_attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    gate: Gate,
    thresholds: Option<&Matrix>,
    bias: Option<&Matrix>,
) -> Result<Matrix> {
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let th = thresholds.map(|m| t.constant(m.clone()));
    let b = bias.map(|m| t.constant(m.clone()));
    let out = attend(&mut t, qv, kv, vv, gate, th, b)?;
    Ok(t.value(out).clone())
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V`.
pub fn attention_softmax(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_qkv("attention_softmax", q, k, v)?;
    eval_attend(q, k, v, Gate::Softmax, None, None)
}

/// `ReLU(Q Kᵀ / sqrt(d_k)) V`.
pub fn attention_relu(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_qkv("attention_relu", q, k, v)?;
    eval_attend(q, k, v, Gate::Relu, None, None)
}

fn check_thresholds(op: &'static str, q: &Matrix, k: &Matrix, b1: &Matrix) -> Result<()> {
    let ok = b1.cols() == k.rows() && (b1.rows() == 1 || b1.rows() == q.rows());
    if !ok {
        return Err(Error::shape(
            op,
            format!(
                "thresholds {}x{} for {} queries and {} keys",
                b1.rows(),
                b1.cols(),
                q.rows(),
                k.rows()
            ),
        ));
    }
    Ok(())
}

/// `ReLU(Q Kᵀ / sqrt(d_k) + B1) V`: an entry contributes only where its
/// score clears its threshold.
pub fn attention_relu_threshold(q: &Matrix, k: &Matrix, v: &Matrix, b1: &Matrix) -> Result<Matrix> {
    check_qkv("attention_relu_threshold", q, k, v)?;
    check_thresholds("attention_relu_threshold", q, k, b1)?;
    eval_attend(q, k, v, Gate::Relu, Some(b1), None)
}

/// `ReLU(Q Kᵀ / sqrt(d_k) + B1) V + b2`.
pub fn generalized_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    b1: &Matrix,
    b2: &Matrix,
) -> Result<Matrix> {
    check_qkv("generalized_attention", q, k, v)?;
    check_thresholds("generalized_attention", q, k, b1)?;
    if b2.rows() != 1 || b2.cols() != v.cols() {
        return Err(Error::shape(
            "generalized_attention",
            format!("b2 {}x{} for value width {}", b2.rows(), b2.cols(), v.cols()),
        ));
    }
    eval_attend(q, k, v, Gate::Relu, Some(b1), Some(b2))
}

/// Multi-head self-attention projections. Heads are stored side by side:
/// columns `j*d_head..(j+1)*d_head` of `wq`, `wk`, `wv` belong to head `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttnParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

impl SelfAttnParams {
    pub fn init(d: usize, heads: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Matrix::randn(d, d, std, rng),
            wk: Matrix::randn(d, d, std, rng),
            wv: Matrix::randn(d, d, std, rng),
            wo: Matrix::randn(d, d, std, rng),
            heads,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.wq.cols() / self.heads
    }

    fn validate(&self) -> Result<()> {
        let d = self.wq.rows();
        let inner = self.wq.cols();
        let ok = self.heads > 0
            && inner % self.heads == 0
            && self.wk.shape() == (d, inner)
            && self.wv.shape() == (d, inner)
            && self.wo.shape() == (inner, d);
        if !ok {
            return Err(Error::shape("self_attention", "inconsistent projection shapes"));
        }
        Ok(())
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> SelfAttnVars {
        SelfAttnVars {
            wq: t.leaf(self.wq.clone(), trainable),
            wk: t.leaf(self.wk.clone(), trainable),
            wv: t.leaf(self.wv.clone(), trainable),
            wo: t.leaf(self.wo.clone(), trainable),
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

/// Self-attention over `h`, which stacks `rows / seq_len` independent
/// sequences of `seq_len` positions each. Sequences never attend to each other.
pub fn self_attention_var(
    t: &mut Tape,
    h: Var,
    p: &SelfAttnVars,
    seq_len: usize,
    causal: bool,
) -> Result<Var> {
    let rows = t.value(h).rows();
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::shape(
            "self_attention",
            format!("{rows} rows is not a multiple of sequence length {seq_len}"),
        ));
    }
    let q = t.matmul(h, p.wq)?;
    let k = t.matmul(h, p.wk)?;
    let v = t.matmul(h, p.wv)?;
    let inner = t.value(q).cols();
    let d_head = inner / p.heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut seqs = Vec::with_capacity(rows / seq_len);
    for s in 0..rows / seq_len {
        let (r0, r1) = (s * seq_len, (s + 1) * seq_len);
        let (qs, ks, vs) = if rows == seq_len {
            (q, k, v)
        } else {
            (
                t.slice_rows(q, r0, r1)?,
                t.slice_rows(k, r0, r1)?,
                t.slice_rows(v, r0, r1)?,
            )
        };
        let mut heads = Vec::with_capacity(p.heads);
        for j in 0..p.heads {
            let (c0, c1) = (j * d_head, (j + 1) * d_head);
            let (qh, kh, vh) = if p.heads == 1 {
                (qs, ks, vs)
            } else {
                (
                    t.slice_cols(qs, c0, c1)?,
                    t.slice_cols(ks, c0, c1)?,
                    t.slice_cols(vs, c0, c1)?,
                )
            };
            let kt = t.transpose(kh);
            let scores = t.matmul(qh, kt)?;
            let mut scores = t.scale(scores, scale)?;
            if causal {
                scores = t.causal_mask_fill(scores);
            }
            let w = t.softmax_rows(scores);
            heads.push(t.matmul(w, vh)?);
        }
        seqs.push(if heads.len() == 1 {
            heads[0]
        } else {
            t.concat_cols(&heads)?
        });
    }
    let joined = if seqs.len() == 1 {
        seqs[0]
    } else {
        t.concat_rows(&seqs)?
    };
    t.matmul(joined, p.wo)
}

/// Masked (when `causal`) multi-head self-attention of one sequence.
pub fn self_attention(h: &Matrix, p: &SelfAttnParams, causal: bool) -> Result<Matrix> {
    p.validate()?;
    if h.cols() != p.model_dim() {
        return Err(Error::shape(
            "self_attention",
            format!("input width {} for model dim {}", h.cols(), p.model_dim()),
        ));
    }
    let mut t = Tape::new();
    let hv = t.constant(h.clone());
    let pv = p.bind(&mut t, false);
    let out = self_attention_var(&mut t, hv, &pv, h.rows().max(1), causal)?;
    Ok(t.value(out).clone())
}

/// Per-layer view of the shared knowledge base: `W_Q` (d x d_k),
/// `W_K` (d_E x d_k), `W_V` (d_E x d), the entry thresholds and the
/// transformation bias `b2` (1 x d).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub threshold: Threshold,
    pub b2: Matrix,
}

impl CrossAttnParams {
    pub fn init(d: usize, d_k: usize, d_e: usize, std: f64, out_bias: f64, rng: &mut Rng) -> Self {
        Self {
            wq: Matrix::randn(d, d_k, std, rng),
            wk: Matrix::randn(d_e, d_k, std, rng),
            wv: Matrix::randn(d_e, d, std, rng),
            threshold: Threshold::Net(crate::knowledge::ThresholdNet::init(d_e, std, out_bias, rng)),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn key_dim(&self) -> usize {
        self.wq.cols()
    }

    pub fn entry_dim(&self) -> usize {
        self.wk.rows()
    }

    /// Checks internal shapes and compatibility with `kb`.
    pub fn validate(&self, kb: &KnowledgeBase) -> Result<()> {
        let (d, d_k, d_e) = (self.model_dim(), self.key_dim(), self.entry_dim());
        let ok = self.wk.cols() == d_k
            && self.wv.shape() == (d_e, d)
            && self.b2.shape() == (1, d)
            && kb.entry_dim() == d_e
            && self.threshold.validate(d_e, kb.entry_count());
        if !ok {
            return Err(Error::shape(
                "cross_attention",
                format!(
                    "W_Q {:?}, W_K {:?}, W_V {:?}, b2 {:?}, KB {}x{}",
                    self.wq.shape(),
                    self.wk.shape(),
                    self.wv.shape(),
                    self.b2.shape(),
                    kb.entry_count(),
                    kb.entry_dim()
                ),
            ));
        }
        Ok(())
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> CrossAttnVars {
        CrossAttnVars {
            wq: t.leaf(self.wq.clone(), trainable),
            wk: t.leaf(self.wk.clone(), trainable),
            wv: t.leaf(self.wv.clone(), trainable),
            threshold: self.threshold.bind(t, trainable),
            b2: t.leaf(self.b2.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub threshold: ThresholdVars,
    pub b2: Var,
}

/// Cross-attention output `C` for queries `h` against the entries `kb`
/// (a `|E| x d_E` node; any row subset of the knowledge base works).
pub fn cross_attention_var(t: &mut Tape, h: Var, kb: Var, p: &CrossAttnVars) -> Result<Var> {
    let q = t.matmul(h, p.wq)?;
    let k = t.matmul(kb, p.wk)?;
    let v = t.matmul(kb, p.wv)?;
    let b1 = p.threshold.evaluate(t, kb)?;
    attend(t, q, k, v, Gate::Relu, Some(b1), Some(p.b2))
}

/// Cross-attention output `C = ReLU(Q Kᵀ/sqrt(d_k) + B1) V + b2` with
/// `Q = H W_Q`, `K = E W_K`, `V = E W_V`.
pub fn cross_attention(h: &Matrix, kb: &KnowledgeBase, p: &CrossAttnParams) -> Result<Matrix> {
    p.validate(kb)?;
    if h.cols() != p.model_dim() {
        return Err(Error::shape(
            "cross_attention",
            format!("input width {} for model dim {}", h.cols(), p.model_dim()),
        ));
    }
    let mut t = Tape::new();
    let hv = t.constant(h.clone());
    let ev = t.constant(kb.entries().clone());
    let pv = p.bind(&mut t, false);
    let out = cross_attention_var(&mut t, hv, ev, &pv)?;
    Ok(t.value(out).clone())
}

/// One modular block: `H + C(H, E)`.
pub fn modular_block_forward(h: &Matrix, kb: &KnowledgeBase, p: &CrossAttnParams) -> Result<Matrix> {
    let c = cross_attention(h, kb, p)?;
    let out = h.add(&c)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn softmax_attention_examples() {
        let v = m(&[&[2.0, -1.0]]);
        let out = attention_softmax(&m(&[&[0.3], &[-2.0]]), &m(&[&[5.0]]), &v).unwrap();
        assert_eq!(out, m(&[&[2.0, -1.0], &[2.0, -1.0]]));

        let out = attention_softmax(
            &m(&[&[0.7, 1.1]]),
            &m(&[&[1.0, 2.0], &[1.0, 2.0]]),
            &m(&[&[1.0], &[3.0]]),
        )
        .unwrap();
        assert!((out.get(0, 0) - 2.0).abs() < 1e-15);

        // softmax([1, -1]) · [2, 4] = 2w + 4(1-w), w = e/(e + 1/e)
        let out = attention_softmax(&m(&[&[1.0]]), &m(&[&[1.0], &[-1.0]]), &m(&[&[2.0], &[4.0]])).unwrap();
        let e = 1f64.exp();
        let w = e / (e + 1.0 / e);
        let expected = 2.0 * w + 4.0 * (1.0 - w);
        assert!((out.get(0, 0) - expected).abs() < 1e-15);
        assert!((out.get(0, 0) - 2.238_405_844_044_234).abs() < 1e-12);
    }

    #[test]
    fn relu_attention_examples() {
        let out = attention_relu(&m(&[&[2.0]]), &m(&[&[1.0], &[-1.0]]), &m(&[&[3.0], &[5.0]])).unwrap();
        assert_eq!(out, m(&[&[6.0]]));

        let out = attention_relu(
            &m(&[&[1.0, 1.0]]),
            &m(&[&[-1.0, -1.0], &[0.0, -3.0]]),
            &m(&[&[3.0], &[5.0]]),
        )
        .unwrap();
        assert_eq!(out, m(&[&[0.0]]));

        let out = attention_relu(&Matrix::zeros(3, 2), &m(&[&[1.0, 2.0]]), &m(&[&[7.0, 8.0]])).unwrap();
        assert_eq!(out, Matrix::zeros(3, 2));
        assert!(attention_relu(&Matrix::zeros(1, 2), &Matrix::zeros(1, 3), &Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn threshold_attention_examples() {
        let mut rng = Rng::new(4);
        let q = Matrix::randn(3, 4, 1.0, &mut rng);
        let k = Matrix::randn(5, 4, 1.0, &mut rng);
        let v = Matrix::randn(5, 2, 1.0, &mut rng);
        let plain = attention_relu(&q, &k, &v).unwrap();
        let zero_th = attention_relu_threshold(&q, &k, &v, &Matrix::zeros(1, 5)).unwrap();
        assert_eq!(plain, zero_th);

        let out = attention_relu_threshold(&m(&[&[1.0]]), &m(&[&[1.0]]), &m(&[&[9.0]]), &m(&[&[-2.0]])).unwrap();
        assert_eq!(out, m(&[&[0.0]]));

        // Zero similarity, threshold 5: the value row passes scaled by 5.
        let out = attention_relu_threshold(&m(&[&[0.0]]), &m(&[&[1.0]]), &m(&[&[1.5, -2.0]]), &m(&[&[5.0]])).unwrap();
        assert_eq!(out, m(&[&[7.5, -10.0]]));

        let full = Matrix::zeros(3, 5);
        assert_eq!(attention_relu_threshold(&q, &k, &v, &full).unwrap(), plain);
        assert!(attention_relu_threshold(&q, &k, &v, &Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn generalized_attention_examples() {
        let mut rng = Rng::new(5);
        let q = Matrix::randn(3, 4, 1.0, &mut rng);
        let k = Matrix::randn(6, 4, 1.0, &mut rng);
        let v = Matrix::randn(6, 2, 1.0, &mut rng);
        let out = generalized_attention(&q, &k, &v, &Matrix::zeros(1, 6), &Matrix::zeros(1, 2)).unwrap();
        let plain = attention_relu(&q, &k, &v).unwrap();
        for (a, b) in out.data().iter().zip(plain.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let b2 = m(&[&[0.25, -4.0]]);
        let closed = generalized_attention(&q, &k, &v, &Matrix::filled(1, 6, -1e6), &b2).unwrap();
        for r in 0..3 {
            assert_eq!(closed.row(r), b2.row(0));
        }

        // Worked fold example: Q=[[1]], K=[[3],[6]], V=[[4],[8]], thresholds [-4,-5].
        let out = generalized_attention(
            &m(&[&[1.0]]),
            &m(&[&[3.0], &[6.0]]),
            &m(&[&[4.0], &[8.0]]),
            &m(&[&[-4.0, -5.0]]),
            &m(&[&[0.5]]),
        )
        .unwrap();
        assert_eq!(out, m(&[&[8.5]]));
    }

    #[test]
    fn relu_and_softmax_are_distinct_operators() {
        let mut rng = Rng::new(6);
        let q = Matrix::randn(4, 3, 1.0, &mut rng);
        let k = Matrix::randn(5, 3, 1.0, &mut rng);
        let v = Matrix::randn(5, 2, 1.0, &mut rng);
        let a = attention_relu(&q, &k, &v).unwrap();
        let b = attention_softmax(&q, &k, &v).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    fn random_self_attn(rng: &mut Rng) -> SelfAttnParams {
        SelfAttnParams::init(8, 2, 0.5, rng).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = Rng::new(7);
        let p = random_self_attn(&mut rng);
        let h = Matrix::randn(1, 8, 1.0, &mut rng);
        let out = self_attention(&h, &p, true).unwrap();
        let expected = h.matmul(&p.wv).unwrap().matmul(&p.wo).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn causal_outputs_ignore_future_rows() {
        let mut rng = Rng::new(8);
        let p = random_self_attn(&mut rng);
        let h = Matrix::randn(6, 8, 1.0, &mut rng);
        let base = self_attention(&h, &p, true).unwrap();
        for t in 0..6 {
            let mut h2 = h.clone();
            for r in (t + 1)..6 {
                for c in 0..8 {
                    h2.set(r, c, rng.normal() * 3.0);
                }
            }
            let out = self_attention(&h2, &p, true).unwrap();
            for r in 0..=t {
                for (a, b) in out.row(r).iter().zip(base.row(r)) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = Rng::new(9);
        let p = random_self_attn(&mut rng);
        let row = Matrix::randn(1, 8, 1.0, &mut rng);
        let h = Matrix::concat_rows(&[&row, &row]).unwrap();
        let out = self_attention(&h, &p, false).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert!(self_attention(&Matrix::zeros(2, 6), &p, true).is_err());
    }

    #[test]
    fn batched_self_attention_matches_per_sequence() {
        let mut rng = Rng::new(10);
        let p = random_self_attn(&mut rng);
        let a = Matrix::randn(4, 8, 1.0, &mut rng);
        let b = Matrix::randn(4, 8, 1.0, &mut rng);
        let both = Matrix::concat_rows(&[&a, &b]).unwrap();
        let mut t = Tape::new();
        let hv = t.constant(both);
        let pv = p.bind(&mut t, false);
        let out = self_attention_var(&mut t, hv, &pv, 4, true).unwrap();
        let out = t.value(out);
        let oa = self_attention(&a, &p, true).unwrap();
        let ob = self_attention(&b, &p, true).unwrap();
        assert_eq!(out.slice_rows(0, 4).unwrap(), oa);
        assert_eq!(out.slice_rows(4, 8).unwrap(), ob);
    }

    fn worked_params() -> (KnowledgeBase, CrossAttnParams) {
        let kb = KnowledgeBase::new(m(&[&[1.0], &[2.0]]));
        let p = CrossAttnParams {
            wq: m(&[&[1.0]]),
            wk: m(&[&[3.0]]),
            wv: m(&[&[4.0]]),
            threshold: Threshold::Table(m(&[&[-4.0, -5.0]])),
            b2: m(&[&[0.0]]),
        };
        (kb, p)
    }

    #[test]
    fn modular_block_worked_case() {
        let (kb, mut p) = worked_params();
        let out = modular_block_forward(&m(&[&[1.0]]), &kb, &p).unwrap();
        assert_eq!(out, m(&[&[9.0]]));
        p.b2 = m(&[&[0.25]]);
        let out = modular_block_forward(&m(&[&[1.0]]), &kb, &p).unwrap();
        assert_eq!(out, m(&[&[1.0 + 8.0 + 0.25]]));
    }

    #[test]
    fn closed_gate_block_is_identity() {
        let mut rng = Rng::new(11);
        let kb = KnowledgeBase::new(Matrix::randn(7, 3, 1.0, &mut rng));
        let mut p = CrossAttnParams::init(5, 4, 3, 0.3, 0.0, &mut rng);
        p.threshold = Threshold::Table(Matrix::filled(1, 7, -1e9));
        let h = Matrix::randn(4, 5, 1.0, &mut rng);
        assert_eq!(modular_block_forward(&h, &kb, &p).unwrap(), h);
    }

    #[test]
    fn residual_difference_is_cross_output() {
        let mut rng = Rng::new(12);
        let kb = KnowledgeBase::new(Matrix::randn(9, 3, 1.0, &mut rng));
        let mut p = CrossAttnParams::init(5, 4, 3, 0.5, 0.1, &mut rng);
        p.b2 = Matrix::randn(1, 5, 1.0, &mut rng);
        let h = Matrix::randn(4, 5, 1.0, &mut rng);
        let out = modular_block_forward(&h, &kb, &p).unwrap();
        let c = cross_attention(&h, &kb, &p).unwrap();
        assert_eq!(out, h.add(&c).unwrap());
    }

    #[test]
    fn cross_attention_rejects_bad_shapes() {
        let mut rng = Rng::new(13);
        let kb = KnowledgeBase::new(Matrix::randn(9, 3, 1.0, &mut rng));
        let p = CrossAttnParams::init(5, 4, 2, 0.5, 0.1, &mut rng);
        assert!(cross_attention(&Matrix::zeros(2, 5), &kb, &p).is_err());
        let p = CrossAttnParams::init(5, 4, 3, 0.5, 0.1, &mut rng);
        assert!(cross_attention(&Matrix::zeros(2, 4), &kb, &p).is_err());
    }

    #[test]
    fn gated_closed_value_rows_do_not_matter() {
        let mut rng = Rng::new(14);
        for _ in 0..20 {
            let q = Matrix::randn(4, 3, 1.0, &mut rng);
            let k = Matrix::randn(8, 3, 1.0, &mut rng);
            let v = Matrix::randn(8, 2, 1.0, &mut rng);
            let b1 = Matrix::randn(1, 8, 1.0, &mut rng);
            let b2 = Matrix::randn(1, 2, 1.0, &mut rng);
            let base = generalized_attention(&q, &k, &v, &b1, &b2).unwrap();
            let pre = q.matmul(&k.transpose()).unwrap().scale(1.0 / 3f64.sqrt()).unwrap().add_row(&b1).unwrap();
            let mut v2 = v.clone();
            for i in 0..8 {
                if (0..4).all(|r| pre.get(r, i) <= 0.0) {
                    for c in 0..2 {
                        v2.set(i, c, rng.normal() * 1e6);
                    }
                }
            }
            let out = generalized_attention(&q, &k, &v2, &b1, &b2).unwrap();
            assert_eq!(out, base);
        }
    }
}
