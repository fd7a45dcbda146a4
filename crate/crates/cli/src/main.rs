use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modkb::bench::{linear_fit, run_bench, Impl};
use modkb::checkpoint;
use modkb::config::{help_config, RunConfig};
use modkb::folding::{round_trip_deviation, verify_closure, verify_fold, verify_random_closures, verify_random_folds, FoldShape};
use modkb::model::{Architecture, BindOptions, Mixer, Model};
use modkb::tensor::{Matrix, Rng};
use modkb::training::{grad_check, ingest_corpus, train, GRAD_CHECK_FLOOR};
use modkb::Error;

const GRAD_CHECK_TOL: f64 = 1e-4;
const SELF_TEST_PROMPT: &[u8] = b"The lighthouse keeper kept a ledger of every ship.";

/// Modular transformer toolkit: train, convert, verify and benchmark.
#[derive(Parser)]
#[command(name = "modkb", version)]
struct Cli {
    /// Print every configuration key with its default and exit.
    #[arg(long)]
    help_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> modkb::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a byte corpus.
    Train {
        /// Output directory for checkpoints and the training log.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sample bytes from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fold a modular checkpoint into a standard one.
    Fold {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rewrite a standard checkpoint as a modular one with a one-hot knowledge base.
    Unfold {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check fold and closure equivalence on random instances or a checkpoint.
    Verify {
        /// Use random instances shaped by d, d_E, kb, d_k and n.
        #[arg(long, conflicts_with = "checkpoint")]
        random: bool,
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare tape gradients with central differences.
    GradCheck {
        /// Check this checkpoint as-is instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Measure the cost of the four sublayer implementations.
    Bench {
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Describe a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.help_config {
        print!("{}", help_config());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: no command given (see --help)");
        return ExitCode::from(2);
    };
    match run(command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` is a verification failure; errors are usage or input problems.
fn run(command: Command) -> modkb::Result<bool> {
    match command {
        Command::Train { out, common } => cmd_train(&common.load()?, &out),
        Command::Generate { checkpoint, common } => cmd_generate(&common.load()?, &checkpoint),
        Command::Fold { checkpoint, out, common } => cmd_convert(&common.load()?, &checkpoint, &out, Architecture::Modular),
        Command::Unfold { checkpoint, out, common } => cmd_convert(&common.load()?, &checkpoint, &out, Architecture::Standard),
        Command::Verify { random, checkpoint, common } => {
            let cfg = common.load()?;
            match (random, checkpoint) {
                (true, _) => cmd_verify_random(&cfg),
                (false, Some(path)) => cmd_verify_checkpoint(&cfg, &path),
                (false, None) => Err(Error::Config("verify needs --random or --checkpoint".into())),
            }
        }
        Command::GradCheck { checkpoint, common } => cmd_grad_check(&common.load()?, checkpoint.as_deref()),
        Command::Bench { out, common } => cmd_bench(&common.load()?, out.as_deref()),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    }
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> modkb::Result<bool> {
    let corpus_path = cfg
        .train
        .corpus_path
        .as_ref()
        .ok_or_else(|| Error::Config("corpus: no corpus path given (set corpus=<file>)".into()))?;
    let corpus = ingest_corpus(corpus_path, cfg.model.context_len)?;
    let mut model = Model::new(cfg.model.clone())?;
    if let Some(kb) = &mut model.kb {
        kb.trainable = !cfg.frozen_kb;
    }
    std::fs::create_dir_all(out)?;
    println!(
        "training {} model: {} parameters, {} corpus bytes, {} steps",
        model.architecture(),
        model.param_count(),
        corpus.len(),
        cfg.train.steps
    );
    let log = train(&mut model, &corpus, &cfg.train, |step, m| {
        checkpoint::save(m, &out.join(format!("step_{step}.ckpt")), cfg.dtype)
    })?;
    checkpoint::save(&model, &out.join("model.ckpt"), cfg.dtype)?;
    modkb::format::write_atomic(&out.join("train_log.csv"), log.to_csv().as_bytes())?;
    match log.final_loss() {
        Some(loss) => println!("final loss {loss:.4} nats/byte"),
        None => println!("no steps run; wrote initial checkpoint"),
    }
    Ok(true)
}

fn cmd_generate(cfg: &RunConfig, path: &Path) -> modkb::Result<bool> {
    let model = checkpoint::load(path)?;
    let bytes = model.generate(cfg.prompt.as_bytes(), cfg.tokens, cfg.temperature, cfg.model.seed)?;
    println!("{}{}", cfg.prompt, String::from_utf8_lossy(&bytes));
    Ok(true)
}

fn self_test_tokens(context: usize) -> Vec<usize> {
    SELF_TEST_PROMPT.iter().take(context).map(|&b| b as usize).collect()
}

/// Converts `from` into the other architecture and reports per-block and
/// logit deviations on a fixed prompt.
fn cmd_convert(cfg: &RunConfig, path: &Path, out: &Path, from: Architecture) -> modkb::Result<bool> {
    let model = checkpoint::load_as(path, from)?;
    let converted = match from {
        Architecture::Modular => model.fold_to_standard()?,
        Architecture::Standard => model.unfold_to_modular()?,
    };
    let tokens = self_test_tokens(model.config().context_len);
    let (a_states, a_logits) = model.block_outputs(&tokens)?;
    let (b_states, b_logits) = converted.block_outputs(&tokens)?;
    for (l, (a, b)) in a_states.iter().zip(&b_states).enumerate() {
        println!("layer {l}: max deviation {:.3e}", a.max_abs_diff(b));
    }
    println!("logits: max deviation {:.3e}", a_logits.max_abs_diff(&b_logits));
    checkpoint::save(&converted, out, cfg.dtype)?;
    println!("wrote {} checkpoint to {}", converted.architecture(), out.display());
    Ok(true)
}

fn report(label: &str, deviation: f64, tol: f64) -> bool {
    let ok = deviation <= tol;
    println!("{label}: max deviation {deviation:.3e} (tol {tol:e}) {}", if ok { "ok" } else { "FAIL" });
    ok
}

fn cmd_verify_random(cfg: &RunConfig) -> modkb::Result<bool> {
    let m = &cfg.model;
    let shape = FoldShape {
        d: m.model_dim,
        d_e: m.kb_entry_dim,
        kb: m.kb_size,
        d_k: m.key_dim,
        n: m.context_len,
    };
    let mut rng = Rng::new(m.seed);
    let folds = verify_random_folds(shape, cfg.trials, cfg.tol, &mut rng)?;
    let (closures, round_trip) = verify_random_closures(m.model_dim, m.kb_size, m.context_len, cfg.trials, cfg.tol, &mut rng)?;
    println!(
        "shape d={} d_E={} kb={} d_k={} n={}, {} trials",
        shape.d, shape.d_e, shape.kb, shape.d_k, shape.n, cfg.trials
    );
    let a = report("fold", folds.max_deviation, cfg.tol);
    let b = report("closure", closures.max_deviation, cfg.tol);
    let c = report("fold(extract) round trip", round_trip, cfg.tol);
    Ok(a && b && c)
}

fn cmd_verify_checkpoint(cfg: &RunConfig, path: &Path) -> modkb::Result<bool> {
    let model = checkpoint::load(path)?;
    let rows = model.config().context_len;
    let mut rng = Rng::new(cfg.model.seed);
    let mut ok = true;
    for (l, block) in model.blocks.iter().enumerate() {
        match &block.mixer {
            Mixer::Cross(p) => {
                let kb = model.kb.as_ref().expect("modular checkpoint has a knowledge base");
                let r = verify_fold(p, kb, rows, cfg.trials, cfg.tol, &mut rng)?;
                ok &= report(&format!("layer {l} fold"), r.max_deviation, cfg.tol);
                let folded = modkb::folding::fold(p, kb)?;
                let r = verify_closure(&folded, rows, cfg.trials, cfg.tol, &mut rng)?;
                ok &= report(&format!("layer {l} closure"), r.max_deviation, cfg.tol);
            }
            Mixer::Ffn(f) => {
                let r = verify_closure(f, rows, cfg.trials, cfg.tol, &mut rng)?;
                ok &= report(&format!("layer {l} closure"), r.max_deviation, cfg.tol);
                ok &= report(&format!("layer {l} round trip"), round_trip_deviation(f)?, cfg.tol);
            }
        }
    }
    Ok(ok)
}

fn cmd_grad_check(cfg: &RunConfig, path: Option<&Path>) -> modkb::Result<bool> {
    let mut model = match path {
        Some(p) => checkpoint::load(p)?,
        None => {
            let mut m = Model::new(cfg.model.clone())?;
            m.reinit_fan_in(cfg.model.seed);
            m
        }
    };
    if let Some(kb) = &mut model.kb {
        kb.trainable = !cfg.frozen_kb;
    }
    let n = model.config().context_len;
    let window: Vec<usize> = match &cfg.train.corpus_path {
        Some(p) => {
            let corpus = ingest_corpus(p, n)?;
            let mut s = corpus.sampler(n + 1, cfg.model.seed)?;
            s.next_window().iter().map(|&b| b as usize).collect()
        }
        None => {
            let mut rng = Rng::new(cfg.model.seed);
            (0..=n).map(|_| rng.below(256) as usize).collect()
        }
    };
    let checked = grad_check(&model, &[&window], cfg.samples.max(1), cfg.model.seed)?;
    println!("{:<16} {:>7} {:>7} {:>12}", "family", "scored", "sampled", "max_rel_err");
    for (family, scored, total, err) in checked.by_family() {
        println!("{family:<16} {scored:>7} {total:>7} {err:>12.3e}");
    }
    let worst = checked.max_relative_error();
    let mut ok = report("gradient", worst, GRAD_CHECK_TOL);
    if cfg.frozen_kb && model.kb.is_some() {
        let opts = BindOptions {
            trainable: true,
            ..Default::default()
        };
        let (_, grads) = model.batch_loss(&[&window], Some(&opts))?;
        let kb_index = model.params().iter().position(|(n, _)| n == "kb.entries").expect("modular");
        let zero = grads.expect("gradients requested")[kb_index].data().iter().all(|&g| g == 0.0);
        println!("frozen knowledge base gradient exactly zero: {}", if zero { "ok" } else { "FAIL" });
        ok &= zero;
    }
    println!("elements with |g| <= {GRAD_CHECK_FLOOR:e} are not scored");
    Ok(ok)
}

fn cmd_bench(cfg: &RunConfig, out: Option<&Path>) -> modkb::Result<bool> {
    let report = run_bench(&cfg.bench)?;
    let csv = report.to_csv();
    match out {
        Some(p) => modkb::format::write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    let mut ok = true;
    for r in &report.records {
        if r.flops_counted != r.flops_model {
            eprintln!(
                "{} kb={}: counted {} FLOPs, model says {}",
                r.impl_label(),
                r.shape.kb,
                r.flops_counted,
                r.flops_model
            );
            ok = false;
        }
        if r.which == Impl::FoldedRetrieval {
            eprintln!(
                "{} kb={}: resident {} bytes, storage {} bytes",
                r.impl_label(),
                r.shape.kb,
                r.mem.resident,
                r.mem.storage
            );
        }
    }
    let folded: Vec<_> = report.of(Impl::Folded).collect();
    if folded.len() >= 2 {
        let xs: Vec<f64> = folded.iter().map(|r| r.shape.kb as f64).collect();
        let ys: Vec<f64> = folded.iter().map(|r| r.wall_ns_median as f64).collect();
        let (_, slope, r2) = linear_fit(&xs, &ys)?;
        eprintln!("folded wall time vs |E|: {slope:.1} ns per entry, R^2 = {r2:.4}");
    }
    Ok(ok)
}

fn cmd_inspect(path: &Path) -> modkb::Result<bool> {
    let model = checkpoint::load(path)?;
    let c = model.config();
    println!("architecture {}  norm {}  seed {}", c.architecture, c.norm_mode, c.seed);
    println!(
        "vocab {}  context {}  d {}  layers {}  heads {}",
        c.vocab_size, c.context_len, c.model_dim, c.layer_count, c.head_count
    );
    match c.architecture {
        Architecture::Standard => println!("d_ff {}", c.ffn_dim),
        Architecture::Modular => println!("d_k {}  d_E {}  |E| {}", c.key_dim, c.kb_entry_dim, c.kb_size),
    }
    println!("parameters {}", model.param_count());
    for (name, m) in model.params() {
        println!("  {name:<40} {:>5} x {:<5}", m.rows(), m.cols());
    }
    if let Some(kb) = &model.kb {
        let norms: Vec<f64> = (0..kb.entry_count())
            .map(|i| kb.entries().row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = norms.iter().copied().fold(0.0, f64::max);
        println!("knowledge base: {} entries of width {}", kb.entry_count(), kb.entry_dim());
        println!("  entry norm mean {mean:.4}  min {min:.4}  max {max:.4}");
        for (l, block) in model.blocks.iter().enumerate() {
            if let Mixer::Cross(p) = &block.mixer {
                let th = p.threshold.evaluate(kb.entries())?;
                println!("  layer {l} thresholds:");
                print_histogram(&th, 10);
            }
        }
    }
    Ok(true)
}

fn print_histogram(values: &Matrix, bins: usize) {
    let data = values.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in data {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(1).max(1);
    for (i, &n) in counts.iter().enumerate() {
        let start = lo + i as f64 * width;
        let bar = "#".repeat((n * 40).div_ceil(peak));
        println!("    [{start:>10.4}, {:>10.4}) {n:>6} {bar}", start + width);
    }
}
