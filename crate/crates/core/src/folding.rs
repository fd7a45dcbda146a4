//! Folding cross-attention over a static knowledge base into FFN weights,
//! and the converse: exhibiting any FFN as cross-attention over a one-hot
//! knowledge base.
//!
//! For a fixed `E` the cross-attention output
//! `ReLU(H W_Q (E W_K)ᵀ / sqrt(d_k) + B1(E)) (E W_V) + b2` only depends on
//! `H` through `H W_1` with `W_1 = W_Q (E W_K)ᵀ / sqrt(d_k)`, so it is exactly
//! an FFN `ReLU(H W_1 + b_1) W_2 + b_2` with `b_1 = B1(E)`, `W_2 = E W_V` and
//! inner dimension `|E|`.

use crate::attention::{cross_attention, CrossAttnParams};
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeBase, Threshold, ThresholdNet};
use crate::tensor::{Matrix, Rng, Tape, Var};

/// Two-layer ReLU network `ReLU(H w1 + b1) w2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedFFN {
    /// `d x d_ff`
    pub w1: Matrix,
    /// `1 x d_ff`
    pub b1: Matrix,
    /// `d_ff x d`
    pub w2: Matrix,
    /// `1 x d`
    pub b2: Matrix,
}

impl FoldedFFN {
    pub fn init(d: usize, d_ff: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w1: Matrix::randn(d, d_ff, std, rng),
            b1: Matrix::zeros(1, d_ff),
            w2: Matrix::randn(d_ff, d, std, rng),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn inner_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, f) = self.w1.shape();
        if self.b1.shape() != (1, f) || self.w2.shape() != (f, d) || self.b2.shape() != (1, d) {
            return Err(Error::shape(
                "ffn",
                format!(
                    "w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    self.w1.shape(),
                    self.b1.shape(),
                    self.w2.shape(),
                    self.b2.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> FfnVars {
        FfnVars {
            w1: t.leaf(self.w1.clone(), trainable),
            b1: t.leaf(self.b1.clone(), trainable),
            w2: t.leaf(self.w2.clone(), trainable),
            b2: t.leaf(self.b2.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn ffn_var(t: &mut Tape, h: Var, f: &FfnVars) -> Result<Var> {
    let a = t.matmul(h, f.w1)?;
    let a = t.add_row(a, f.b1)?;
    let a = t.relu(a);
    let o = t.matmul(a, f.w2)?;
    t.add_row(o, f.b2)
}

/// `ReLU(H w1 + b1) w2 + b2`.
pub fn ffn_forward(f: &FoldedFFN, h: &Matrix) -> Result<Matrix> {
    f.validate()?;
    if h.cols() != f.model_dim() {
        return Err(Error::shape(
            "ffn_forward",
            format!("input width {} for model dim {}", h.cols(), f.model_dim()),
        ));
    }
    let mut t = Tape::new();
    let hv = t.constant(h.clone());
    let fv = f.bind(&mut t, false);
    let out = ffn_var(&mut t, hv, &fv)?;
    Ok(t.value(out).clone())
}

/// Precomputes `E W_K`, `E W_V` and `B1(E)` and folds the query projection
/// in, giving an FFN with inner dimension `|E|`.
pub fn fold(p: &CrossAttnParams, kb: &KnowledgeBase) -> Result<FoldedFFN> {
    p.validate(kb)?;
    let e = kb.entries();
    let keys = e.matmul(&p.wk)?;
    let w1 = p
        .wq
        .matmul(&keys.transpose())?
        .scale(1.0 / (p.key_dim() as f64).sqrt())?;
    Ok(FoldedFFN {
        w1,
        b1: p.threshold.evaluate(e)?,
        w2: e.matmul(&p.wv)?,
        b2: p.b2.clone(),
    })
}

/// Cross-attention parameters and a one-hot knowledge base that reproduce
/// `f`: `E = I` (`|E| = d_E = d_k = d_ff`), `W_K = I`,
/// `W_Q = sqrt(d_ff) * w1` (cancelling the attention scale), `W_V = w2`,
/// thresholds looked up directly from `b1`, and `b2` unchanged.
pub fn extract_closure(f: &FoldedFFN) -> (CrossAttnParams, KnowledgeBase) {
    let d_ff = f.inner_dim();
    let s = (d_ff as f64).sqrt();
    let wq = Matrix::from_vec(
        f.w1.rows(),
        f.w1.cols(),
        f.w1.data().iter().map(|x| x * s).collect(),
    )
    .expect("scaled weights stay finite");
    let params = CrossAttnParams {
        wq,
        wk: Matrix::identity(d_ff),
        wv: f.w2.clone(),
        threshold: Threshold::Table(f.b1.clone()),
        b2: f.b2.clone(),
    };
    (params, KnowledgeBase::new(Matrix::identity(d_ff)))
}

/// Outcome of comparing two computation paths over random inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_deviation: f64,
    pub tol: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tol
    }

    fn merge(&mut self, other: &EquivalenceReport) {
        self.trials += other.trials;
        self.max_deviation = self.max_deviation.max(other.max_deviation);
    }
}

/// Compares cross-attention over `kb` with the folded FFN on `trials`
/// random inputs of `rows` positions each.
pub fn verify_fold(
    p: &CrossAttnParams,
    kb: &KnowledgeBase,
    rows: usize,
    trials: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::Config("verify_fold needs at least one trial".into()));
    }
    let folded = fold(p, kb)?;
    let mut max_deviation: f64 = 0.0;
    for _ in 0..trials {
        let h = Matrix::randn(rows, p.model_dim(), 1.0, rng);
        let cross = cross_attention(&h, kb, p)?;
        let ffn = ffn_forward(&folded, &h)?;
        max_deviation = max_deviation.max(cross.max_abs_diff(&ffn));
    }
    Ok(EquivalenceReport {
        trials,
        max_deviation,
        tol,
    })
}

/// Compares `f` with cross-attention over its extracted one-hot knowledge base.
pub fn verify_closure(
    f: &FoldedFFN,
    rows: usize,
    trials: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::Config("verify_closure needs at least one trial".into()));
    }
    f.validate()?;
    let (p, kb) = extract_closure(f);
    let mut max_deviation: f64 = 0.0;
    for _ in 0..trials {
        let h = Matrix::randn(rows, f.model_dim(), 1.0, rng);
        let ffn = ffn_forward(f, &h)?;
        let cross = cross_attention(&h, &kb, &p)?;
        max_deviation = max_deviation.max(ffn.max_abs_diff(&cross));
    }
    Ok(EquivalenceReport {
        trials,
        max_deviation,
        tol,
    })
}

/// Largest elementwise difference between `fold(extract_closure(f))` and `f`.
pub fn round_trip_deviation(f: &FoldedFFN) -> Result<f64> {
    let (p, kb) = extract_closure(f);
    let back = fold(&p, &kb)?;
    Ok([
        back.w1.max_abs_diff(&f.w1),
        back.b1.max_abs_diff(&f.b1),
        back.w2.max_abs_diff(&f.w2),
        back.b2.max_abs_diff(&f.b2),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

/// Shapes for a random fold instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldShape {
    pub d: usize,
    pub d_e: usize,
    pub kb: usize,
    pub d_k: usize,
    pub n: usize,
}

/// Random cross-attention parameters and knowledge base at `shape`, scaled
/// so that roughly half of the gates are open.
pub fn random_instance(shape: FoldShape, rng: &mut Rng) -> (CrossAttnParams, KnowledgeBase) {
    let FoldShape { d, d_e, kb, d_k, .. } = shape;
    let entries = KnowledgeBase::init(kb, d_e, 1.0, rng);
    let net = ThresholdNet {
        hidden: Matrix::randn(d_e, d_e, 1.0 / (d_e as f64).sqrt(), rng),
        hidden_bias: Matrix::randn(1, d_e, 0.1, rng),
        out: Matrix::randn(d_e, 1, 1.0 / (d_e as f64).sqrt(), rng),
        out_bias: Matrix::randn(1, 1, 0.5, rng),
    };
    let p = CrossAttnParams {
        wq: Matrix::randn(d, d_k, 1.0 / (d as f64).sqrt(), rng),
        wk: Matrix::randn(d_e, d_k, 1.0 / (d_e as f64).sqrt(), rng),
        wv: Matrix::randn(d_e, d, 1.0 / (d_e as f64).sqrt(), rng),
        threshold: Threshold::Net(net),
        b2: Matrix::randn(1, d, 0.5, rng),
    };
    (p, entries)
}

/// Random FFN with inner dimension `d_ff` and nonzero biases.
pub fn random_ffn(d: usize, d_ff: usize, rng: &mut Rng) -> FoldedFFN {
    FoldedFFN {
        w1: Matrix::randn(d, d_ff, 1.0 / (d as f64).sqrt(), rng),
        b1: Matrix::randn(1, d_ff, 0.5, rng),
        w2: Matrix::randn(d_ff, d, 1.0 / (d_ff as f64).sqrt(), rng),
        b2: Matrix::randn(1, d, 0.5, rng),
    }
}

/// Runs [`verify_fold`] over several random instances and merges the reports.
pub fn verify_random_folds(
    shape: FoldShape,
    trials: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<EquivalenceReport> {
    let mut total = EquivalenceReport {
        trials: 0,
        max_deviation: 0.0,
        tol,
    };
    for _ in 0..trials {
        let (p, kb) = random_instance(shape, rng);
        total.merge(&verify_fold(&p, &kb, shape.n, 1, tol, rng)?);
    }
    Ok(total)
}

/// Runs [`verify_closure`] over random FFNs and merges the reports; also
/// tracks the fold-of-extract round trip in `round_trip`.
pub fn verify_random_closures(
    d: usize,
    d_ff: usize,
    rows: usize,
    trials: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<(EquivalenceReport, f64)> {
    let mut total = EquivalenceReport {
        trials: 0,
        max_deviation: 0.0,
        tol,
    };
    let mut round_trip: f64 = 0.0;
    for _ in 0..trials {
        let f = random_ffn(d, d_ff, rng);
        total.merge(&verify_closure(&f, rows, 1, tol, rng)?);
        round_trip = round_trip.max(round_trip_deviation(&f)?);
    }
    Ok((total, round_trip))
}
