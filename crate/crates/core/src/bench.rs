//! Cost models and measurements for one mixing sublayer in four forms:
//! a standard FFN, full cross-attention, the folded FFN, and the folded FFN
//! restricted to a top-k retrieved subset of entries.
//!
//! FLOPs count 2 per multiply-add and 1 per element for bias adds, scaling
//! and ReLU. [`flop_model`] sums exactly the primitives the instrumented
//! forward passes execute, so the measured counter must match it.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::folding::{ffn_forward, fold, random_ffn, random_instance, FoldShape, FoldedFFN};
use crate::knowledge::{selection_flops, topk_retrieve, RetrievalIndex};
use crate::tensor::{flops, with_matmul_mode, MatmulMode, Matrix, Rng};

const F64_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Impl {
    StandardFfn,
    CrossAttention,
    Folded,
    FoldedRetrieval,
}

impl Impl {
    pub const ALL: [Impl; 4] = [Impl::StandardFfn, Impl::CrossAttention, Impl::Folded, Impl::FoldedRetrieval];

    pub fn name(self) -> &'static str {
        match self {
            Impl::StandardFfn => "standard_ffn",
            Impl::CrossAttention => "cross_attention",
            Impl::Folded => "folded",
            Impl::FoldedRetrieval => "folded_retrieval",
        }
    }
}

impl fmt::Display for Impl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Impl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Impl::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown implementation {s:?}")))
    }
}

/// One sublayer shape. `d_ff` is used only by the standard FFN; `kb` and
/// `kb_sub` (the retrieved subset size `|E'|`) by the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub d: usize,
    pub d_k: usize,
    pub d_e: usize,
    pub d_ff: usize,
    pub kb: usize,
    pub kb_sub: usize,
}

impl Shape {
    pub fn validate(&self, which: Impl) -> Result<()> {
        let mut fields = vec![("n", self.n), ("d", self.d)];
        match which {
            Impl::StandardFfn => fields.push(("d_ff", self.d_ff)),
            Impl::Folded => fields.push(("kb", self.kb)),
            Impl::CrossAttention => fields.extend([("kb", self.kb), ("d_k", self.d_k), ("d_E", self.d_e)]),
            Impl::FoldedRetrieval => fields.extend([("kb", self.kb), ("d_k", self.d_k), ("kb_sub", self.kb_sub)]),
        }
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{which}: {name} must be positive")));
        }
        if which == Impl::FoldedRetrieval && self.kb_sub > self.kb {
            return Err(Error::KOutOfRange {
                k: self.kb_sub,
                len: self.kb,
            });
        }
        Ok(())
    }
}

/// FLOPs of an FFN pass over `n` rows of width `d` with `inner` hidden
/// units: two products, the hidden bias, ReLU and the output bias.
fn ffn_flops(n: u64, d: u64, inner: u64) -> u64 {
    4 * n * d * inner + 2 * n * inner + n * d
}

/// Retrieval cost `R`: pool the queries (`Nd`), project the pooled query
/// (`2 d d_k`), score it against precomputed keys (`2 d_k |E|`), scale and
/// add thresholds (`2|E|`), then select the top `|E'|` (`|E| ceil(log2 |E'|)`).
pub fn retrieval_flops(s: &Shape) -> u64 {
    let (n, d, d_k, e) = (s.n as u64, s.d as u64, s.d_k as u64, s.kb as u64);
    n * d + 2 * d * d_k + 2 * d_k * e + 2 * e + selection_flops(s.kb, s.kb_sub)
}

pub fn flop_model(which: Impl, s: &Shape) -> Result<u64> {
    s.validate(which)?;
    let (n, d, d_k, d_e, e) = (s.n as u64, s.d as u64, s.d_k as u64, s.d_e as u64, s.kb as u64);
    Ok(match which {
        Impl::StandardFfn => ffn_flops(n, d, s.d_ff as u64),
        Impl::Folded => ffn_flops(n, d, e),
        Impl::FoldedRetrieval => ffn_flops(n, d, s.kb_sub as u64) + retrieval_flops(s),
        Impl::CrossAttention => {
            let keys = 2 * e * d_e * d_k;
            let values = 2 * e * d_e * d;
            // hidden product, bias, ReLU, output product, output bias
            let thresholds = 2 * e * d_e * d_e + 2 * e * d_e + 2 * e * d_e + e;
            let queries = 2 * n * d * d_k;
            // scores, scale, threshold add, ReLU
            let gates = 2 * n * d_k * e + 3 * n * e;
            let output = 2 * n * e * d + n * d;
            keys + values + thresholds + queries + gates + output
        }
    })
}

/// Parameter bytes (64-bit) an implementation holds. For retrieval,
/// `resident` is the active subset and `storage` the full folded weights
/// plus the retrieval index; for the others the two agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemModel {
    pub resident: u64,
    pub storage: u64,
}

fn ffn_bytes(d: u64, inner: u64) -> u64 {
    (d * inner + inner + inner * d + d) * F64_BYTES
}

pub fn mem_model(which: Impl, s: &Shape) -> Result<MemModel> {
    s.validate(which)?;
    let (d, d_k, d_e, e) = (s.d as u64, s.d_k as u64, s.d_e as u64, s.kb as u64);
    let same = |b| MemModel { resident: b, storage: b };
    Ok(match which {
        Impl::StandardFfn => same(ffn_bytes(d, s.d_ff as u64)),
        Impl::Folded => same(ffn_bytes(d, e)),
        Impl::CrossAttention => {
            let threshold_net = d_e * d_e + 2 * d_e + 1;
            same((e * d_e + d * d_k + d_e * d_k + d_e * d + threshold_net + d) * F64_BYTES)
        }
        Impl::FoldedRetrieval => {
            let index = (d * d_k + d_k * e + e) * F64_BYTES;
            MemModel {
                resident: ffn_bytes(d, s.kb_sub as u64),
                storage: ffn_bytes(d, e) + index,
            }
        }
    })
}

/// Bytes a benchmark point needs at once: parameters, the retrieval index
/// and the largest activations.
pub fn working_set_bytes(which: Impl, s: &Shape) -> Result<u64> {
    let mem = mem_model(which, s)?;
    let (n, d, d_k, d_e, e) = (s.n as u64, s.d as u64, s.d_k as u64, s.d_e as u64, s.kb as u64);
    let activations = match which {
        Impl::StandardFfn => 2 * n * s.d_ff as u64 + 2 * n * d,
        Impl::Folded => 2 * n * e + 2 * n * d,
        Impl::FoldedRetrieval => 2 * n * s.kb_sub as u64 + 2 * n * d + 2 * e,
        Impl::CrossAttention => e * (d_k + d + 2 * d_e + 1) + 3 * n * e + 2 * n * d + n * d_k,
    } * F64_BYTES;
    Ok(mem.resident.max(mem.storage) + activations)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n: usize,
    pub d: usize,
    pub d_k: usize,
    pub d_e: usize,
    pub d_ff: usize,
    /// Ascending knowledge-base sizes.
    pub kb_sweep: Vec<usize>,
    /// `|E'| = max(1, round(|E| * ratio))`.
    pub kb_sub_ratio: f64,
    pub reps: usize,
    pub warmup: usize,
    pub impls: Vec<Impl>,
    pub parallel: bool,
    pub mem_budget: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 32,
            d: 64,
            d_k: 16,
            d_e: 48,
            d_ff: 256,
            kb_sweep: vec![256, 512, 1024, 2048],
            kb_sub_ratio: 0.125,
            reps: 5,
            warmup: 1,
            impls: Impl::ALL.to_vec(),
            parallel: false,
            mem_budget: 1 << 30,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::Config(format!("reps must be at least 3, got {}", self.reps)));
        }
        if self.kb_sweep.is_empty() {
            return Err(Error::Config("kb_sweep is empty".into()));
        }
        if self.kb_sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("kb_sweep must be strictly ascending".into()));
        }
        if !(self.kb_sub_ratio > 0.0 && self.kb_sub_ratio <= 1.0) {
            return Err(Error::Config(format!("kb_sub_ratio must be in (0, 1], got {}", self.kb_sub_ratio)));
        }
        if self.impls.is_empty() {
            return Err(Error::Config("no implementations selected".into()));
        }
        Ok(())
    }

    pub fn kb_sub(&self, kb: usize) -> usize {
        ((kb as f64 * self.kb_sub_ratio).round() as usize).clamp(1, kb)
    }

    /// Every shape the sweep visits, in report order. The standard FFN does
    /// not depend on `|E|` and appears once.
    pub fn points(&self) -> Vec<(Impl, Shape)> {
        let mut out = Vec::new();
        for &which in &self.impls {
            let kbs: &[usize] = if which == Impl::StandardFfn { &self.kb_sweep[..1] } else { &self.kb_sweep };
            for &kb in kbs {
                let (kb, kb_sub) = if which == Impl::StandardFfn { (0, 0) } else { (kb, self.kb_sub(kb)) };
                out.push((
                    which,
                    Shape {
                        n: self.n,
                        d: self.d,
                        d_k: self.d_k,
                        d_e: self.d_e,
                        d_ff: self.d_ff,
                        kb,
                        kb_sub,
                    },
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub which: Impl,
    pub parallel: bool,
    pub shape: Shape,
    pub flops_model: u64,
    pub flops_counted: u64,
    pub mem: MemModel,
    pub wall_ns_median: u64,
    pub retrieval_flops: u64,
}

impl BenchRecord {
    pub fn impl_label(&self) -> String {
        if self.parallel {
            format!("{}_parallel", self.which)
        } else {
            self.which.to_string()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    pub const HEADER: &'static str =
        "impl,N,d,d_k,d_ff,kb,kb_sub,flops_model,flops_counted,bytes_model,wall_ns_median,retrieval_flops";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            let s = &r.shape;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.impl_label(),
                s.n,
                s.d,
                s.d_k,
                s.d_ff,
                s.kb,
                s.kb_sub,
                r.flops_model,
                r.flops_counted,
                r.mem.resident,
                r.wall_ns_median,
                r.retrieval_flops
            );
        }
        out
    }

    pub fn of(&self, which: Impl) -> impl Iterator<Item = &BenchRecord> {
        self.records.iter().filter(move |r| r.which == which)
    }
}

/// A prepared benchmark point: everything but the timed pass is built here.
enum Case {
    Ffn(FoldedFFN),
    Cross(crate::attention::CrossAttnParams, crate::knowledge::KnowledgeBase),
    Retrieval(FoldedFFN, RetrievalIndex, usize),
}

fn prepare(which: Impl, s: &Shape, rng: &mut Rng) -> Result<Case> {
    let fold_shape = FoldShape {
        d: s.d,
        d_e: s.d_e,
        kb: s.kb,
        d_k: s.d_k,
        n: s.n,
    };
    Ok(match which {
        Impl::StandardFfn => Case::Ffn(random_ffn(s.d, s.d_ff, rng)),
        Impl::CrossAttention => {
            let (p, kb) = random_instance(fold_shape, rng);
            Case::Cross(p, kb)
        }
        Impl::Folded => {
            let (p, kb) = random_instance(fold_shape, rng);
            Case::Ffn(fold(&p, &kb)?)
        }
        Impl::FoldedRetrieval => {
            let (p, kb) = random_instance(fold_shape, rng);
            Case::Retrieval(fold(&p, &kb)?, RetrievalIndex::build(&p, &kb)?, s.kb_sub)
        }
    })
}

/// Runs one forward pass of the prepared case.
fn run_case(case: &Case, h: &Matrix) -> Result<Matrix> {
    match case {
        Case::Ffn(f) => ffn_forward(f, h),
        Case::Cross(p, kb) => crate::attention::cross_attention(h, kb, p),
        Case::Retrieval(f, index, k) => {
            let subset = topk_retrieve(&index.scores(h)?, *k)?;
            let sub = FoldedFFN {
                w1: f.w1.gather_cols(&subset.indices)?,
                b1: f.b1.gather_cols(&subset.indices)?,
                w2: f.w2.gather_rows(&subset.indices)?,
                b2: f.b2.clone(),
            };
            ffn_forward(&sub, h)
        }
    }
}

/// Measures one point: `warmup` untimed passes, then `reps` timed passes.
/// Every timed pass must charge the same FLOP count.
pub fn bench_point(which: Impl, s: &Shape, cfg: &BenchConfig, rng: &mut Rng) -> Result<BenchRecord> {
    let flops_model = flop_model(which, s)?;
    let needed = working_set_bytes(which, s)?;
    if needed > cfg.mem_budget {
        return Err(Error::MemoryBudget {
            needed,
            budget: cfg.mem_budget,
        });
    }
    let case = prepare(which, s, rng)?;
    let h = Matrix::randn(s.n, s.d, 1.0, rng);
    let mode = if cfg.parallel { MatmulMode::Parallel } else { MatmulMode::Deterministic };
    with_matmul_mode(mode, || {
        for _ in 0..cfg.warmup {
            run_case(&case, &h)?;
        }
        let mut times = Vec::with_capacity(cfg.reps);
        let mut counted = None;
        for _ in 0..cfg.reps {
            let start = Instant::now();
            let (out, c) = flops::measure(|| run_case(&case, &h));
            times.push(start.elapsed().as_nanos() as u64);
            std::hint::black_box(out?);
            match counted {
                None => counted = Some(c),
                Some(prev) if prev != c => {
                    return Err(Error::Config(format!("{which}: FLOP count changed between repetitions ({prev} vs {c})")))
                }
                Some(_) => {}
            }
        }
        times.sort_unstable();
        Ok(BenchRecord {
            which,
            parallel: cfg.parallel,
            shape: *s,
            flops_model,
            flops_counted: counted.unwrap_or(0),
            mem: mem_model(which, s)?,
            wall_ns_median: times[times.len() / 2],
            retrieval_flops: if which == Impl::FoldedRetrieval { retrieval_flops(s) } else { 0 },
        })
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let points = cfg.points();
    // Refuse up front rather than after partial work.
    for (which, s) in &points {
        let needed = working_set_bytes(*which, s)?;
        if needed > cfg.mem_budget {
            return Err(Error::MemoryBudget {
                needed,
                budget: cfg.mem_budget,
            });
        }
    }
    let mut rng = Rng::new(cfg.seed);
    let mut report = BenchReport::default();
    for (which, s) in points {
        report.records.push(bench_point(which, &s, cfg, &mut rng)?);
    }
    Ok(report)
}

/// Least-squares line `y = a + b x`, returning `(a, b, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config(format!(
            "linear fit needs at least two paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("linear fit needs distinct x values".into()));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((a, b, r2))
}

/// The subset size below which retrieval is modelled to beat the full
/// folded pass: `|E'| < |E| (1 - R / (4 N d |E|))`.
pub fn retrieval_pays_off(s: &Shape) -> bool {
    let r = retrieval_flops(s) as f64;
    let full = 4.0 * (s.n * s.d * s.kb) as f64;
    (s.kb_sub as f64) < s.kb as f64 * (1.0 - r / full)
}
