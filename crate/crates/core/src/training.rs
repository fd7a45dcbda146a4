//! Corpus ingestion, Adam, the training loop and finite-difference gradient
//! checks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{BindOptions, Model};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling applied before the moment update.
    pub grad_clip_norm: f64,
    pub corpus_path: Option<PathBuf>,
    pub log_every: usize,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Seeds the window sampler.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            corpus_path: None,
            log_every: 100,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.grad_clip_norm > 0.0) {
            return fail(format!("clip must be positive, got {}", self.grad_clip_norm));
        }
        Ok(())
    }
}

/// Raw training bytes, at least one window long.
#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
}

impl Corpus {
    pub fn new(bytes: Vec<u8>, context_len: usize) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        if bytes.len() < context_len + 1 {
            return Err(Error::Corpus(format!(
                "corpus shorter than context+1 ({} bytes, need {})",
                bytes.len(),
                context_len + 1
            )));
        }
        Ok(Self { bytes })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Uniformly random windows of `window` bytes.
    pub fn sampler(&self, window: usize, seed: u64) -> Result<WindowSampler<'_>> {
        if window == 0 || window > self.bytes.len() {
            return Err(Error::Corpus(format!(
                "window of {window} bytes does not fit a {}-byte corpus",
                self.bytes.len()
            )));
        }
        Ok(WindowSampler {
            bytes: &self.bytes,
            window,
            rng: Rng::new(seed),
        })
    }
}

pub fn ingest_corpus(path: &Path, context_len: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
    Corpus::new(bytes, context_len)
}

pub struct WindowSampler<'a> {
    bytes: &'a [u8],
    window: usize,
    rng: Rng,
}

impl<'a> WindowSampler<'a> {
    pub fn next_window(&mut self) -> &'a [u8] {
        let starts = (self.bytes.len() - self.window + 1) as u64;
        let s = self.rng.below(starts) as usize;
        &self.bytes[s..s + self.window]
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<Vec<usize>> {
        (0..batch)
            .map(|_| self.next_window().iter().map(|&b| b as usize).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            clip: c.grad_clip_norm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Matrix> = shapes.into_iter().map(|(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(model.params().iter().map(|(_, p)| p.shape()))
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::norm_sq).sum::<f64>().sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before scaling.
pub fn clip_gradients(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One Adam update with bias correction, after clipping `grads` in place.
/// Returns the pre-clip gradient norm.
pub fn adam_step(params: &mut [&mut Matrix], grads: &mut [Matrix], state: &mut AdamState, cfg: &AdamConfig) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads.iter()).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), m.shape()),
            ));
        }
    }
    let norm = clip_gradients(grads, cfg.clip);
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,loss_nats_per_byte,grad_norm,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.3}", r.step, r.loss, r.grad_norm, r.wall_ms);
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Trains `model` in place. Each complete interval of `log_every` steps
/// logs one row at its first step, holding the loss of the batch about to
/// be applied; a final row at `step = steps` evaluates a fresh batch
/// without updating. A run therefore logs `steps / log_every + 1` rows. `on_checkpoint`
/// runs every `checkpoint_every` updates.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let context = model.config().context_len;
    if corpus.len() < context + 1 {
        return Err(Error::Corpus(format!(
            "corpus shorter than context+1 ({} bytes, need {})",
            corpus.len(),
            context + 1
        )));
    }
    let mut sampler = corpus.sampler(context + 1, cfg.seed)?;
    let mut state = AdamState::for_model(model);
    let adam = AdamConfig::from(cfg);
    let opts = BindOptions {
        trainable: true,
        ..Default::default()
    };
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok(log);
    }
    let start = Instant::now();
    let batch_grads = |model: &Model, batch: &[Vec<usize>], step: usize| -> Result<(f64, Vec<Matrix>)> {
        let windows: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
        let (loss, grads) = model.batch_loss(&windows, Some(&opts))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        Ok((loss, grads.expect("gradients requested")))
    };
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let (loss, mut grads) = batch_grads(model, &batch, step)?;
        let norm = adam_step(&mut model.params_mut(), &mut grads, &mut state, &adam)?;
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm is {norm}"),
            });
        }
        if step % cfg.log_every == 0 && step + cfg.log_every <= cfg.steps {
            log.rows.push(LogRow {
                step,
                loss,
                grad_norm: norm,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, model)?;
        }
    }
    let batch = sampler.next_batch(cfg.batch_size);
    let (loss, grads) = batch_grads(model, &batch, cfg.steps)?;
    log.rows.push(LogRow {
        step: cfg.steps,
        loss,
        grad_norm: global_norm(&grads),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    });
    Ok(log)
}

/// Coarse grouping of parameters for gradient-check reporting.
pub fn param_family(name: &str) -> &'static str {
    let field = name.rsplit_once('.').map_or(name, |(_, f)| f);
    if name == "tok_emb" || name == "pos_emb" {
        "embeddings"
    } else if name == "head" {
        "head"
    } else if name.starts_with("kb.") {
        "kb_entries"
    } else if name.contains("norm") {
        "layer_norm"
    } else if name.contains(".attn.") {
        "self_attention"
    } else if name.contains(".ffn.") {
        "ffn"
    } else if name.contains(".threshold.") {
        "threshold"
    } else if name.ends_with("cross.b2") {
        "b2"
    } else {
        match field {
            "wq" => "w_q",
            "wk" => "w_k",
            "wv" => "w_v",
            _ => "other",
        }
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub tape: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    /// `|a - b| / max(|a|, |b|)`, or 0 when both are zero.
    pub fn relative_error(&self) -> f64 {
        let scale = self.tape.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.tape - self.numeric).abs() / scale
        }
    }

    /// Whether the element is large enough to be scored.
    pub fn scored(&self) -> bool {
        self.tape.abs() > GRAD_CHECK_FLOOR
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.scored())
            .map(GradCheckEntry::relative_error)
            .fold(0.0, f64::max)
    }

    /// `(family, scored, total, max relative error)` per family, in first-seen order.
    pub fn by_family(&self) -> Vec<(&'static str, usize, usize, f64)> {
        let mut out: Vec<(&'static str, usize, usize, f64)> = Vec::new();
        for e in &self.entries {
            let fam = param_family(&e.name);
            let idx = match out.iter().position(|r| r.0 == fam) {
                Some(i) => i,
                None => {
                    out.push((fam, 0, 0, 0.0));
                    out.len() - 1
                }
            };
            let row = &mut out[idx];
            row.2 += 1;
            if e.scored() {
                row.1 += 1;
                row.3 = row.3.max(e.relative_error());
            }
        }
        out
    }
}

/// Compares tape gradients with central differences on `samples` random
/// elements of every parameter tensor.
pub fn grad_check(model: &Model, windows: &[&[usize]], samples: usize, seed: u64) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(Error::Config("grad_check needs at least one sample".into()));
    }
    let opts = BindOptions {
        trainable: true,
        ..Default::default()
    };
    let (_, grads) = model.batch_loss(windows, Some(&opts))?;
    let grads = grads.expect("gradients requested");
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut rng = Rng::new(seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport::default();
    for (p, name) in names.iter().enumerate() {
        let len = grads[p].len();
        for _ in 0..samples.min(len) {
            let index = rng.below(len as u64) as usize;
            let original = probe.params_mut()[p].data()[index];
            let mut eval = |x: f64| -> Result<f64> {
                probe.params_mut()[p].data_mut()[index] = x;
                Ok(probe.batch_loss(windows, None)?.0)
            };
            let plus = eval(original + GRAD_CHECK_STEP)?;
            let minus = eval(original - GRAD_CHECK_STEP)?;
            probe.params_mut()[p].data_mut()[index] = original;
            report.entries.push(GradCheckEntry {
                name: name.clone(),
                index,
                tape: grads[p].data()[index],
                numeric: (plus - minus) / (2.0 * GRAD_CHECK_STEP),
            });
        }
    }
    Ok(report)
}
