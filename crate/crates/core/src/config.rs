//! Flat `key = value` run configuration.
//!
//! One UTF-8 file, one setting per line, `#` starts a comment. Every key
//! has a default (see [`help_config`]); unknown keys are errors. Later
//! settings override earlier ones, so command-line overrides are applied
//! after the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bench::{BenchConfig, Impl};
use crate::error::{Error, Result};
use crate::format::Dtype;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// `(key, default, description)` for every recognised key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("n", "32", "context length in bytes (N); also the benchmark row count"),
    ("d", "64", "model width"),
    ("d_k", "64", "cross-attention key width"),
    ("d_ff", "256", "FFN inner width (standard architecture)"),
    ("d_E", "64", "knowledge entry width"),
    ("kb", "512", "number of knowledge entries |E|"),
    ("layers", "2", "number of blocks"),
    ("heads", "4", "self-attention heads (must divide d)"),
    ("arch", "standard", "standard | modular"),
    ("norm", "pre", "layer norm placement: none | pre | post"),
    ("seed", "0", "seed for initialisation, sampling and benchmarks"),
    ("dtype", "f64", "checkpoint element type: f64 | f32"),
    ("steps", "2000", "training steps"),
    ("batch_size", "8", "windows per step"),
    ("lr", "0.001", "Adam learning rate"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator epsilon"),
    ("clip", "1.0", "global gradient-norm clip"),
    ("corpus", "", "training corpus path (required by train)"),
    ("log_every", "100", "steps between log rows"),
    ("checkpoint_every", "0", "steps between checkpoints; 0 writes only the final one"),
    ("frozen_kb", "false", "keep knowledge entries fixed during training and gradient checks"),
    ("trials", "100", "random trials for verify"),
    ("tol", "1e-9", "max-abs deviation tolerance for verify"),
    ("prompt", "The ", "generation prompt"),
    ("tokens", "64", "bytes to generate"),
    ("temperature", "1.0", "sampling temperature (> 0)"),
    ("samples", "4", "grad-check elements sampled per parameter tensor"),
    ("kb_sweep", "256,512,1024,2048", "benchmark knowledge-base sizes, ascending"),
    ("kb_sub_ratio", "0.125", "retrieved subset size as a fraction of |E|"),
    ("reps", "5", "timed benchmark repetitions (>= 3)"),
    ("warmup", "1", "untimed benchmark repetitions"),
    ("impl", "all", "benchmark implementations: all or a comma list of standard_ffn, cross_attention, folded, folded_retrieval"),
    ("mem_budget", "1073741824", "benchmark working-set limit in bytes"),
    ("parallel", "false", "use the parallel matmul path in benchmarks"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub dtype: Dtype,
    pub frozen_kb: bool,
    pub trials: usize,
    pub tol: f64,
    pub prompt: String,
    pub tokens: usize,
    pub temperature: f64,
    pub samples: usize,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            dtype: Dtype::F64,
            frozen_kb: false,
            trials: 0,
            tol: 0.0,
            prompt: String::new(),
            tokens: 0,
            temperature: 0.0,
            samples: 0,
        };
        for (key, default, _) in KEYS {
            c.set(key, default).expect("documented defaults parse");
        }
        c
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let b = &mut self.bench;
        match key {
            "n" => {
                m.context_len = parse(key, value)?;
                b.n = m.context_len;
            }
            "d" => {
                m.model_dim = parse(key, value)?;
                b.d = m.model_dim;
            }
            "d_k" => {
                m.key_dim = parse(key, value)?;
                b.d_k = m.key_dim;
            }
            "d_ff" => {
                m.ffn_dim = parse(key, value)?;
                b.d_ff = m.ffn_dim;
            }
            "d_E" => {
                m.kb_entry_dim = parse(key, value)?;
                b.d_e = m.kb_entry_dim;
            }
            "kb" => m.kb_size = parse(key, value)?,
            "layers" => m.layer_count = parse(key, value)?,
            "heads" => m.head_count = parse(key, value)?,
            "arch" => m.architecture = value.parse()?,
            "norm" => m.norm_mode = value.parse()?,
            "seed" => {
                m.seed = parse(key, value)?;
                t.seed = m.seed;
                b.seed = m.seed;
            }
            "dtype" => {
                self.dtype = match value {
                    "f64" => Dtype::F64,
                    "f32" => Dtype::F32,
                    _ => return Err(Error::Config(format!("dtype: expected f64 or f32, got {value:?}"))),
                }
            }
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.learning_rate = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "clip" => t.grad_clip_norm = parse(key, value)?,
            "corpus" => t.corpus_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "log_every" => t.log_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "frozen_kb" => self.frozen_kb = parse_bool(key, value)?,
            "trials" => self.trials = parse(key, value)?,
            "tol" => self.tol = parse(key, value)?,
            "prompt" => self.prompt = value.to_string(),
            "tokens" => self.tokens = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "kb_sweep" => {
                b.kb_sweep = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "kb_sub_ratio" => b.kb_sub_ratio = parse(key, value)?,
            "reps" => b.reps = parse(key, value)?,
            "warmup" => b.warmup = parse(key, value)?,
            "impl" => {
                b.impls = if value == "all" {
                    Impl::ALL.to_vec()
                } else {
                    value.split(',').map(|v| v.trim().parse()).collect::<Result<_>>()?
                }
            }
            "mem_budget" => b.mem_budget = parse(key, value)?,
            "parallel" => b.parallel = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; see the module docs for the syntax.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_str(&text)
    }

    /// Applies `key=value` command-line overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for pair in pairs {
            let pair = pair.as_ref();
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

/// Every key with its default and meaning, one per line.
pub fn help_config() -> String {
    let width = KEYS.iter().map(|(k, d, _)| k.len() + d.len() + 3).max().unwrap_or(0);
    let mut out = String::new();
    for (key, default, doc) in KEYS {
        let lhs = format!("{key} = {default}");
        let _ = writeln!(out, "{lhs:<width$}  # {doc}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, NormMode};

    #[test]
    fn defaults_cover_every_key() {
        let c = RunConfig::default();
        assert_eq!(c.model.context_len, 32);
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.train.corpus_path, None);
        assert_eq!(c.bench.kb_sweep, vec![256, 512, 1024, 2048]);
        assert_eq!(c.tol, 1e-9);
        assert_eq!(c.prompt, "The ");
        let help = help_config();
        for (key, _, _) in KEYS {
            assert!(help.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key}");
        }
    }

    #[test]
    fn file_syntax() {
        let mut c = RunConfig::default();
        c.apply_str("# comment\n\n arch = modular  # trailing\nnorm=none\nkb_sweep = 8, 16\nimpl=folded,folded_retrieval\n")
            .unwrap();
        assert_eq!(c.model.architecture, Architecture::Modular);
        assert_eq!(c.model.norm_mode, NormMode::None);
        assert_eq!(c.bench.kb_sweep, vec![8, 16]);
        assert_eq!(c.bench.impls, vec![Impl::Folded, Impl::FoldedRetrieval]);
    }

    #[test]
    fn errors_name_the_problem() {
        let mut c = RunConfig::default();
        let err = c.apply_str("x = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("\"x\""), "{err}");
        let err = c.apply_str("steps = many").unwrap_err().to_string();
        assert!(err.contains("steps"), "{err}");
        assert!(c.apply_str("no equals sign").is_err());
        assert!(c.apply_overrides(&["d"]).is_err());
        assert!(c.set("arch", "hybrid").is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["d=16", "d_E=12", "kb=32", "d_k=8", "n=10", "d=17"]).unwrap();
        assert_eq!(c.model.model_dim, 17);
        assert_eq!(c.bench.d_e, 12);
        assert_eq!(c.model.kb_size, 32);
        c.apply_overrides(&["corpus="]).unwrap();
        assert_eq!(c.train.corpus_path, None);
    }
}
