//! The shared knowledge base `E`, per-entry thresholds, hard top-k
//! retrieval of a subset `E'`, and the `.kb` file format.

use std::path::Path;

use crate::attention::CrossAttnParams;
use crate::error::{Error, Result};
use crate::format::{self, Dtype, Reader, Writer};
use crate::tensor::{flops, Matrix, Rng, Tape, Var};

/// `|E| x d_E` matrix of knowledge entries. A model holds exactly one and
/// every modular layer reads from it.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    entries: Matrix,
    /// Whether training updates the entries (joint training). When false the
    /// entries are bound as constants and receive no gradient.
    pub trainable: bool,
}

impl KnowledgeBase {
    pub fn new(entries: Matrix) -> Self {
        Self {
            entries,
            trainable: true,
        }
    }

    pub fn init(count: usize, dim: usize, std: f64, rng: &mut Rng) -> Self {
        Self::new(Matrix::randn(count, dim, std, rng))
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Matrix {
        &mut self.entries
    }

    pub fn entry_count(&self) -> usize {
        self.entries.rows()
    }

    pub fn entry_dim(&self) -> usize {
        self.entries.cols()
    }

    /// Knowledge base restricted to the rows named by `subset`.
    pub fn restrict(&self, subset: &RetrievedSubset) -> Result<KnowledgeBase> {
        subset.validate(self.entry_count())?;
        Ok(KnowledgeBase {
            entries: self.entries.gather_rows(&subset.indices)?,
            trainable: self.trainable,
        })
    }
}

/// Per-entry threshold MLP: `out_bias + ReLU(e · hidden + hidden_bias) · out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdNet {
    pub hidden: Matrix,
    pub hidden_bias: Matrix,
    pub out: Matrix,
    /// Stored as a `1 x 1` matrix.
    pub out_bias: Matrix,
}

impl ThresholdNet {
    pub fn init(d_e: usize, std: f64, out_bias: f64, rng: &mut Rng) -> Self {
        Self {
            hidden: Matrix::randn(d_e, d_e, std, rng),
            hidden_bias: Matrix::zeros(1, d_e),
            out: Matrix::randn(d_e, 1, std, rng),
            out_bias: Matrix::filled(1, 1, out_bias),
        }
    }

    pub fn zeros(d_e: usize, out_bias: f64) -> Self {
        Self {
            hidden: Matrix::zeros(d_e, d_e),
            hidden_bias: Matrix::zeros(1, d_e),
            out: Matrix::zeros(d_e, 1),
            out_bias: Matrix::filled(1, 1, out_bias),
        }
    }

    pub fn entry_dim(&self) -> usize {
        self.hidden.rows()
    }

    pub fn param_count(&self) -> usize {
        self.hidden.len() + self.hidden_bias.len() + self.out.len() + self.out_bias.len()
    }

    fn shapes_ok(&self) -> bool {
        let d = self.hidden.rows();
        self.hidden.shape() == (d, d)
            && self.hidden_bias.shape() == (1, d)
            && self.out.shape() == (d, 1)
            && self.out_bias.shape() == (1, 1)
    }
}

/// Source of the per-entry thresholds `B1(E)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Threshold {
    /// Computed from each entry embedding.
    Net(ThresholdNet),
    /// Direct per-entry lookup (`1 x |E|`). Used when an exact threshold
    /// vector must be reproduced, e.g. when extracting a closure from an FFN.
    Table(Matrix),
}

impl Threshold {
    pub fn validate(&self, d_e: usize, count: usize) -> bool {
        match self {
            Threshold::Net(net) => net.shapes_ok() && net.entry_dim() == d_e,
            Threshold::Table(t) => t.shape() == (1, count),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Threshold::Net(net) => net.param_count(),
            Threshold::Table(t) => t.len(),
        }
    }

    /// Threshold vector for `kb`, as a `1 x |E|` row.
    pub fn evaluate(&self, kb: &Matrix) -> Result<Matrix> {
        let mut t = Tape::new();
        let e = t.constant(kb.clone());
        let vars = self.bind(&mut t, false);
        let out = vars.evaluate(&mut t, e)?;
        Ok(t.value(out).clone())
    }

    /// Thresholds restricted to `subset`.
    pub fn restrict(&self, subset: &RetrievedSubset) -> Result<Threshold> {
        Ok(match self {
            Threshold::Net(net) => Threshold::Net(net.clone()),
            Threshold::Table(t) => Threshold::Table(t.gather_cols(&subset.indices)?),
        })
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> ThresholdVars {
        match self {
            Threshold::Net(net) => ThresholdVars::Net {
                hidden: t.leaf(net.hidden.clone(), trainable),
                hidden_bias: t.leaf(net.hidden_bias.clone(), trainable),
                out: t.leaf(net.out.clone(), trainable),
                out_bias: t.leaf(net.out_bias.clone(), trainable),
            },
            Threshold::Table(table) => ThresholdVars::Table(t.leaf(table.clone(), trainable)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ThresholdVars {
    Net {
        hidden: Var,
        hidden_bias: Var,
        out: Var,
        out_bias: Var,
    },
    Table(Var),
}

impl ThresholdVars {
    /// `1 x |E|` thresholds for the entry rows `kb`.
    pub fn evaluate(&self, t: &mut Tape, kb: Var) -> Result<Var> {
        match *self {
            ThresholdVars::Net {
                hidden,
                hidden_bias,
                out,
                out_bias,
            } => {
                let z = t.matmul(kb, hidden)?;
                let z = t.add_row(z, hidden_bias)?;
                let a = t.relu(z);
                let col = t.matmul(a, out)?;
                let col = t.add_row(col, out_bias)?;
                Ok(t.transpose(col))
            }
            ThresholdVars::Table(v) => {
                let (rows, cols) = t.value(v).shape();
                let entries = t.value(kb).rows();
                if rows != 1 || cols != entries {
                    return Err(Error::shape(
                        "threshold",
                        format!("table 1x{cols} for {entries} entries"),
                    ));
                }
                Ok(v)
            }
        }
    }
}

/// Thresholds `B1(E)` produced by `net` for every entry of `kb`, as a
/// `1 x |E|` row.
pub fn threshold_vector(net: &ThresholdNet, kb: &KnowledgeBase) -> Result<Matrix> {
    if !net.shapes_ok() || net.entry_dim() != kb.entry_dim() {
        return Err(Error::shape(
            "threshold_vector",
            format!("net for width {} on entries of width {}", net.entry_dim(), kb.entry_dim()),
        ));
    }
    Threshold::Net(net.clone()).evaluate(kb.entries())
}

/// Ascending, duplicate-free entry indices forming a retrieved subset `E'`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievedSubset {
    pub indices: Vec<usize>,
    pub k: usize,
}

impl RetrievedSubset {
    pub fn all(count: usize) -> Self {
        Self {
            indices: (0..count).collect(),
            k: count,
        }
    }

    /// Sorts and deduplicates `indices`.
    pub fn from_indices(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        let k = indices.len();
        Self { indices, k }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSubset("indices must be strictly ascending".into()));
        }
        if let Some(&last) = self.indices.last() {
            if last >= count {
                return Err(Error::InvalidSubset(format!(
                    "index {last} out of range for {count} entries"
                )));
            }
        }
        Ok(())
    }
}

/// Selection cost charged for top-k over `n` scores: `n * ceil(log2 k)`.
pub fn selection_flops(n: usize, k: usize) -> u64 {
    let log = if k <= 1 { 0 } else { usize::BITS - (k - 1).leading_zeros() };
    n as u64 * log as u64
}

/// Indices of the `k` largest scores, ties going to the lower index,
/// returned in ascending index order.
pub fn topk_retrieve(scores: &Matrix, k: usize) -> Result<RetrievedSubset> {
    use std::cmp::{Ordering, Reverse};
    use std::collections::BinaryHeap;

    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, len: n });
    }
    if scores.rows() != 1 {
        return Err(Error::shape("topk_retrieve", format!("scores must be 1 x n, got {:?}", scores.shape())));
    }

    // Rank: higher score first, then lower index first.
    #[derive(PartialEq)]
    struct Ranked(f64, usize);
    impl Eq for Ranked {}
    impl Ord for Ranked {
        fn cmp(&self, other: &Self) -> Ordering {
            self.0.total_cmp(&other.0).then_with(|| other.1.cmp(&self.1))
        }
    }
    impl PartialOrd for Ranked {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }

    // Min-heap of the best k seen so far.
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
    for (i, &s) in scores.data().iter().enumerate() {
        let cand = Ranked(s, i);
        if heap.len() < k {
            heap.push(Reverse(cand));
        } else if heap.peek().is_some_and(|Reverse(worst)| cand > *worst) {
            heap.pop();
            heap.push(Reverse(cand));
        }
    }
    flops::add(selection_flops(n, k));
    let mut indices: Vec<usize> = heap.into_iter().map(|Reverse(r)| r.1).collect();
    indices.sort_unstable();
    Ok(RetrievedSubset { indices, k })
}

/// Precomputed keys and thresholds for per-sequence retrieval scoring.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    wq: Matrix,
    /// `(E W_K)ᵀ`, `d_k x |E|`.
    keys_t: Matrix,
    thresholds: Matrix,
}

impl RetrievalIndex {
    pub fn build(p: &CrossAttnParams, kb: &KnowledgeBase) -> Result<Self> {
        p.validate(kb)?;
        Ok(Self {
            wq: p.wq.clone(),
            keys_t: kb.entries().matmul(&p.wk)?.transpose(),
            thresholds: p.threshold.evaluate(kb.entries())?,
        })
    }

    /// Scores of every entry against the mean-pooled query of `h`. The
    /// arithmetic mirrors the cross-attention pre-activation, so for a
    /// single-row `h` the result equals that row's pre-activations exactly.
    pub fn scores(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.wq.rows() || h.rows() == 0 {
            return Err(Error::shape(
                "pooled_query_scores",
                format!("input {:?} for model dim {}", h.shape(), self.wq.rows()),
            ));
        }
        flops::add(h.len() as u64);
        let pooled = h.mean_rows();
        let q = pooled.matmul(&self.wq)?;
        let s = q.matmul(&self.keys_t)?;
        let d_k = self.wq.cols() as f64;
        s.scale(1.0 / d_k.sqrt())?.add_row(&self.thresholds)
    }
}

/// Retrieval scores from the mean-pooled query of `h`:
/// `mean(H) W_Q (E W_K)ᵀ / sqrt(d_k) + B1(E)`.
pub fn pooled_query_scores(h: &Matrix, p: &CrossAttnParams, kb: &KnowledgeBase) -> Result<Matrix> {
    RetrievalIndex::build(p, kb)?.scores(h)
}

/// Cross-attention output computed over only the entries in `subset`.
/// Keys, values and thresholds are all restricted, and the value
/// accumulation visits the surviving entries in ascending order. If every
/// entry outside `subset` is gated closed for every query, the result is
/// bitwise equal to the full computation.
pub fn subset_forward(
    h: &Matrix,
    kb: &KnowledgeBase,
    p: &CrossAttnParams,
    subset: &RetrievedSubset,
) -> Result<Matrix> {
    p.validate(kb)?;
    let sub_kb = kb.restrict(subset)?;
    let sub_p = CrossAttnParams {
        threshold: p.threshold.restrict(subset)?,
        ..p.clone()
    };
    crate::attention::cross_attention(h, &sub_kb, &sub_p)
}

/// Pre-activations `Q Kᵀ / sqrt(d_k) + B1` of the full cross-attention.
pub fn preactivations(h: &Matrix, kb: &KnowledgeBase, p: &CrossAttnParams) -> Result<Matrix> {
    p.validate(kb)?;
    let mut t = Tape::new();
    let hv = t.constant(h.clone());
    let e = t.constant(kb.entries().clone());
    let pv = p.bind(&mut t, false);
    let q = t.matmul(hv, pv.wq)?;
    let k = t.matmul(e, pv.wk)?;
    let b1 = pv.threshold.evaluate(&mut t, e)?;
    let kt = t.transpose(k);
    let scores = t.matmul(q, kt)?;
    let d_k = t.value(q).cols() as f64;
    let pre = t.scale(scores, 1.0 / d_k.sqrt())?;
    let pre = t.add_row(pre, b1)?;
    Ok(t.value(pre).clone())
}

/// Entries whose pre-activation is positive for at least one query.
pub fn active_entries(h: &Matrix, kb: &KnowledgeBase, p: &CrossAttnParams) -> Result<RetrievedSubset> {
    let pre = preactivations(h, kb, p)?;
    let indices = (0..pre.cols())
        .filter(|&i| (0..pre.rows()).any(|r| pre.get(r, i) > 0.0))
        .collect();
    Ok(RetrievedSubset::from_indices(indices))
}

const KB_MAGIC: &[u8; 8] = b"MODKB1\0\0";
const KB_VERSION: u32 = 1;

/// Contents of a `.kb` file: the entries plus any per-layer thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct KbFile {
    pub kb: KnowledgeBase,
    pub thresholds: Vec<Threshold>,
}

pub fn kb_to_bytes(kb: &KnowledgeBase, thresholds: &[Threshold], dtype: Dtype) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(KB_MAGIC);
    w.u32(KB_VERSION);
    w.u64(kb.entry_count() as u64);
    w.u64(kb.entry_dim() as u64);
    w.u8(dtype.code());
    w.bytes(&[0u8; 7]);
    w.values(kb.entries(), dtype);
    for (i, th) in thresholds.iter().enumerate() {
        match th {
            Threshold::Net(net) => {
                w.record(&format!("threshold.{i}.hidden"), &net.hidden, dtype);
                w.record(&format!("threshold.{i}.hidden_bias"), &net.hidden_bias, dtype);
                w.record(&format!("threshold.{i}.out"), &net.out, dtype);
                w.record(&format!("threshold.{i}.out_bias"), &net.out_bias, dtype);
            }
            Threshold::Table(t) => w.record(&format!("threshold.{i}.table"), t, dtype),
        }
    }
    w.finish()
}

pub fn kb_from_bytes(bytes: &[u8]) -> Result<KbFile> {
    if bytes.len() < KB_MAGIC.len() || &bytes[..KB_MAGIC.len()] != KB_MAGIC {
        return Err(Error::BadMagic { expected: "MODKB1" });
    }
    let mut r = Reader::new(bytes);
    r.take(8, "magic")?;
    let version = r.u32("version")?;
    if version != KB_VERSION {
        return Err(Error::Version {
            expected: KB_VERSION,
            found: version,
        });
    }
    let body = format::verify_crc(bytes)?;
    let mut r = Reader::new(body);
    r.take(12, "header")?;
    let count = r.dim("entry count")?;
    let dim = r.dim("entry dim")?;
    let dtype = Dtype::from_code(r.u8("dtype")?)?;
    r.take(7, "reserved")?;
    let entries = r.values(count, dim, dtype, "entries")?;

    let mut records = Vec::new();
    while r.remaining() > 0 {
        records.push(r.record(dtype)?);
    }
    let thresholds = parse_thresholds(records, dim, count)?;
    Ok(KbFile {
        kb: KnowledgeBase::new(entries),
        thresholds,
    })
}

fn parse_thresholds(records: Vec<(String, Matrix)>, dim: usize, count: usize) -> Result<Vec<Threshold>> {
    let mut out = Vec::new();
    let mut it = records.into_iter().peekable();
    while let Some((name, m)) = it.next() {
        let i = out.len();
        let prefix = format!("threshold.{i}.");
        let field = name
            .strip_prefix(&prefix)
            .ok_or_else(|| Error::Format(format!("unexpected record {name:?}")))?;
        let th = match field {
            "table" => Threshold::Table(m),
            "hidden" => {
                let mut next = |want: &str| -> Result<Matrix> {
                    match it.next() {
                        Some((n, m)) if n == format!("{prefix}{want}") => Ok(m),
                        _ => Err(Error::Format(format!("missing record {prefix}{want}"))),
                    }
                };
                Threshold::Net(ThresholdNet {
                    hidden: m,
                    hidden_bias: next("hidden_bias")?,
                    out: next("out")?,
                    out_bias: next("out_bias")?,
                })
            }
            _ => return Err(Error::Format(format!("unexpected record {name:?}"))),
        };
        if !th.validate(dim, count) {
            return Err(Error::Format(format!("threshold {i} has the wrong shape")));
        }
        out.push(th);
    }
    Ok(out)
}

pub fn kb_save(path: &Path, kb: &KnowledgeBase, thresholds: &[Threshold], dtype: Dtype) -> Result<()> {
    format::write_atomic(path, &kb_to_bytes(kb, thresholds, dtype))
}

pub fn kb_load(path: &Path) -> Result<KbFile> {
    kb_from_bytes(&std::fs::read(path)?)
}
