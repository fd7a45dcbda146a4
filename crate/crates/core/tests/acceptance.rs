//! End-to-end acceptance checks. Runs sequentially and prints one
//! `criterion N: PASS|FAIL` line per check; exits non-zero on any failure.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use modkb::attention::{cross_attention, generalized_attention};
use modkb::bench::{linear_fit, retrieval_pays_off, run_bench, BenchConfig, Impl};
use modkb::checkpoint;
use modkb::error::Error;
use modkb::folding::{random_instance, verify_random_closures, verify_random_folds, FoldShape};
use modkb::format::Dtype;
use modkb::knowledge::{active_entries, kb_from_bytes, kb_to_bytes, preactivations, subset_forward, RetrievedSubset};
use modkb::model::{Architecture, Mixer, Model, ModelConfig, NormMode};
use modkb::tensor::{Matrix, Rng};
use modkb::training::{grad_check, train, Corpus, TrainConfig};

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus_1k.txt");

type Outcome = Result<(bool, String), Error>;

fn corpus(context: usize) -> Corpus {
    Corpus::new(std::fs::read(CORPUS).expect("corpus file"), context).expect("corpus")
}

fn small(arch: Architecture, d: usize) -> ModelConfig {
    ModelConfig {
        context_len: 16,
        model_dim: d,
        key_dim: 16,
        ffn_dim: 2 * d,
        kb_entry_dim: 16,
        kb_size: 48,
        layer_count: 2,
        head_count: 4,
        architecture: arch,
        norm_mode: NormMode::Pre,
        seed: 1,
        ..ModelConfig::default()
    }
}

fn trained(arch: Architecture, steps: usize) -> Result<Model, Error> {
    let mut m = Model::new(small(arch, 32))?;
    let cfg = TrainConfig {
        steps,
        batch_size: 4,
        learning_rate: 3e-3,
        log_every: steps.max(1),
        seed: 2,
        ..TrainConfig::default()
    };
    train(&mut m, &corpus(16), &cfg, |_, _| Ok(()))?;
    Ok(m)
}

fn fold_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let a = verify_random_folds(FoldShape { d: 16, d_e: 12, kb: 32, d_k: 8, n: 10 }, 100, 1e-9, &mut rng)?;
    let b = verify_random_folds(FoldShape { d: 64, d_e: 48, kb: 256, d_k: 16, n: 32 }, 20, 1e-9, &mut rng)?;
    let secs = start.elapsed().as_secs_f64();
    let ok = a.passed() && b.passed() && secs < 10.0;
    Ok((
        ok,
        format!("max deviation {:.2e} (small), {:.2e} (large), {secs:.2}s", a.max_deviation, b.max_deviation),
    ))
}

fn closure_converse() -> Outcome {
    let mut rng = Rng::new(102);
    let (report, round_trip) = verify_random_closures(16, 32, 10, 100, 1e-9, &mut rng)?;
    let ok = report.passed() && round_trip <= 1e-12;
    Ok((ok, format!("closure deviation {:.2e}, round trip {round_trip:.2e}", report.max_deviation)))
}

fn random_prompts(count: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.below(256) as usize).collect())
        .collect()
}

fn max_logit_gap(a: &Model, b: &Model, prompts: &[Vec<usize>]) -> Result<f64, Error> {
    let mut worst: f64 = 0.0;
    for p in prompts {
        worst = worst.max(a.forward(p)?.max_abs_diff(&b.forward(p)?));
    }
    Ok(worst)
}

fn architecture_swap() -> Outcome {
    let prompts = random_prompts(100, 16, 103);
    let standard = trained(Architecture::Standard, 60)?;
    let unfolded = standard.unfold_to_modular()?;
    let gap_unfold = max_logit_gap(&standard, &unfolded, &prompts)?;
    let modular = trained(Architecture::Modular, 60)?;
    let folded = modular.fold_to_standard()?;
    let gap_fold = max_logit_gap(&modular, &folded, &prompts)?;
    let ok = gap_unfold <= 1e-6 && gap_fold <= 1e-6;
    Ok((ok, format!("unfold {gap_unfold:.2e}, fold {gap_fold:.2e} over 100 prompts")))
}

fn gradient_correctness() -> Outcome {
    let c = corpus(16);
    let mut sampler = c.sampler(17, 104)?;
    let windows = sampler.next_batch(2);
    let batch: Vec<&[usize]> = windows.iter().map(Vec::as_slice).collect();
    let mut ok = true;
    let mut detail = Vec::new();
    for arch in [Architecture::Standard, Architecture::Modular] {
        let mut m = Model::new(small(arch, 32))?;
        m.reinit_fan_in(7);
        let report = grad_check(&m, &batch, 4, 105)?;
        let families = report.by_family();
        let unscored = families.iter().filter(|f| f.1 == 0).count();
        let max = report.max_relative_error();
        ok &= max <= 1e-4 && unscored == 0;
        if arch == Architecture::Modular {
            ok &= ["kb_entries", "threshold", "w_q", "w_k", "w_v", "b2"]
                .iter()
                .all(|f| families.iter().any(|row| row.0 == *f));
        }
        detail.push(format!("{arch} max rel {max:.2e} over {} families", families.len()));

        if arch == Architecture::Modular {
            m.kb.as_mut().expect("modular kb").trainable = false;
            let opts = modkb::model::BindOptions { trainable: true, ..Default::default() };
            let (_, grads) = m.batch_loss(&batch, Some(&opts))?;
            let grads = grads.expect("gradients");
            let kb_index = m.params().iter().position(|(n, _)| n == "kb.entries").expect("kb param");
            let zero = grads[kb_index].data().iter().all(|&g| g == 0.0);
            ok &= zero;
            detail.push(format!("frozen kb gradient zero: {zero}"));
        }
    }
    Ok((ok, detail.join(", ")))
}

fn joint_training() -> Outcome {
    let standard = ModelConfig {
        context_len: 32,
        model_dim: 64,
        ffn_dim: 256,
        layer_count: 2,
        head_count: 4,
        architecture: Architecture::Standard,
        ..ModelConfig::default()
    };
    let modular = ModelConfig {
        key_dim: 64,
        kb_entry_dim: 64,
        kb_size: 512,
        architecture: Architecture::Modular,
        ..standard.clone()
    };
    let (ps, pm) = (standard.param_count() as f64, modular.param_count() as f64);
    let mismatch = (ps - pm).abs() / ps;
    let c = corpus(32);
    let cfg = TrainConfig {
        steps: 2000,
        log_every: 100,
        ..TrainConfig::default()
    };
    let ln256 = 256f64.ln();
    let mut ok = mismatch <= 0.02;
    let mut detail = vec![format!("params {ps} vs {pm} ({:.2}%)", 100.0 * mismatch)];
    let start = Instant::now();
    for config in [standard, modular] {
        let arch = config.architecture;
        let mut m = Model::new(config)?;
        let log = train(&mut m, &c, &cfg, |_, _| Ok(()))?;
        let initial = log.rows[0].loss;
        let best = log.rows.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
        let fin = log.final_loss().unwrap_or(f64::NAN);
        ok &= (initial - ln256).abs() <= 0.1 && best <= 1.0;
        detail.push(format!("{arch} initial {initial:.3} final {fin:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 600.0;
    detail.push(format!("{secs:.0}s"));
    Ok((ok, detail.join(", ")))
}

fn cost_trends() -> Outcome {
    let cfg = BenchConfig::default();
    let report = run_bench(&cfg)?;
    let exact = report.records.iter().all(|r| r.flops_counted == r.flops_model);

    let folded: Vec<_> = report.of(Impl::Folded).collect();
    let xs: Vec<f64> = folded.iter().map(|r| r.shape.kb as f64).collect();
    let ys: Vec<f64> = folded.iter().map(|r| r.wall_ns_median as f64).collect();
    let (_, _, r2) = linear_fit(&xs, &ys)?;

    let mut holds = 0;
    let mut cheaper = true;
    for r in report.of(Impl::FoldedRetrieval) {
        if r.shape.kb_sub != r.shape.kb / 8 {
            cheaper = false;
        }
        if retrieval_pays_off(&r.shape) {
            holds += 1;
            let full = folded.iter().find(|f| f.shape.kb == r.shape.kb).expect("matching folded point");
            cheaper &= r.flops_model < full.flops_model;
        }
    }

    let mut rng = Rng::new(106);
    let shape = FoldShape { d: 16, d_e: 12, kb: 32, d_k: 8, n: 10 };
    let mut bitwise = true;
    for _ in 0..50 {
        let (p, kb) = random_instance(shape, &mut rng);
        let h = Matrix::randn(shape.n, shape.d, 1.0, &mut rng);
        let mut indices = active_entries(&h, &kb, &p)?.indices;
        indices.extend((0..3).map(|_| rng.below(shape.kb as u64) as usize));
        let subset = RetrievedSubset::from_indices(indices);
        let sub = subset_forward(&h, &kb, &p, &subset)?;
        let full = cross_attention(&h, &kb, &p)?;
        bitwise &= sub.data().iter().zip(full.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let ok = exact && r2 >= 0.9 && holds > 0 && cheaper && bitwise;
    Ok((
        ok,
        format!(
            "flops exact: {exact}, folded wall R^2 {r2:.3}, retrieval cheaper at {holds}/{} qualifying points: {cheaper}, subset bitwise: {bitwise}",
            cfg.kb_sweep.len()
        ),
    ))
}

fn gate_semantics() -> Outcome {
    let mut rng = Rng::new(107);
    let shape = FoldShape { d: 16, d_e: 12, kb: 32, d_k: 8, n: 10 };
    let mut ok = true;
    let mut perturbed = 0;
    for _ in 0..100 {
        let (p, kb) = random_instance(shape, &mut rng);
        let h = Matrix::randn(shape.n, shape.d, 1.0, &mut rng);
        let pre = preactivations(&h, &kb, &p)?;
        let q = h.matmul(&p.wq)?;
        let k = kb.entries().matmul(&p.wk)?;
        let v = kb.entries().matmul(&p.wv)?;
        let b1 = p.threshold.evaluate(kb.entries())?;
        let base = generalized_attention(&q, &k, &v, &b1, &p.b2)?;
        for r in 0..shape.n {
            let closed: Vec<usize> = (0..shape.kb).filter(|&i| pre.get(r, i) <= 0.0).collect();
            let mut v2 = v.clone();
            for &i in &closed {
                for x in v2.row_mut(i) {
                    *x += 1e3 * rng.normal();
                }
            }
            perturbed += closed.len();
            let qr = q.slice_rows(r, r + 1)?;
            let out = generalized_attention(&qr, &k, &v2, &b1, &p.b2)?;
            ok &= out.row(0).iter().zip(base.row(r)).all(|(a, b)| a - b == 0.0);
        }
    }
    ok &= perturbed > 0;
    Ok((ok, format!("{perturbed} closed (query, entry) value rows perturbed, output change exactly 0: {ok}")))
}

fn record_bytes(model: &Model, prefix: &str) -> usize {
    model
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, m)| 4 + n.len() + 16 + 8 * m.len())
        .sum()
}

fn serialization() -> Outcome {
    let mut m = trained(Architecture::Modular, 5)?;
    let bytes = checkpoint::to_bytes(&m, Dtype::F64);
    let back = checkpoint::from_bytes(&bytes)?;
    let prompt = random_prompts(1, 16, 108).remove(0);
    let logits_same = m.forward(&prompt)?.data().iter().zip(back.forward(&prompt)?.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let ckpt_ok = back == m && checkpoint::to_bytes(&back, Dtype::F64) == bytes && logits_same;

    let thresholds: Vec<_> = m
        .blocks
        .iter()
        .filter_map(|b| match &b.mixer {
            Mixer::Cross(c) => Some(c.threshold.clone()),
            Mixer::Ffn(_) => None,
        })
        .collect();
    let kb = m.kb.take().expect("modular kb");
    let kb_bytes = kb_to_bytes(&kb, &thresholds, Dtype::F64);
    let kb_back = kb_from_bytes(&kb_bytes)?;
    let kb_ok = kb_back.kb.entries() == kb.entries()
        && kb_back.thresholds == thresholds
        && kb_to_bytes(&kb_back.kb, &kb_back.thresholds, Dtype::F64) == kb_bytes;

    let mut crc_ok = true;
    for (buf, is_kb) in [(bytes.clone(), false), (kb_bytes.clone(), true)] {
        for pos in [buf.len() / 2, buf.len() - 1] {
            let mut bad = buf.clone();
            bad[pos] ^= 0x10;
            let res = if is_kb { kb_from_bytes(&bad).map(|_| ()) } else { checkpoint::from_bytes(&bad).map(|_| ()) };
            crc_ok &= matches!(res, Err(Error::Checksum { .. }));
        }
    }

    let sized = |layers: usize| -> Result<(Model, usize), Error> {
        let model = Model::new(ModelConfig { layer_count: layers, ..small(Architecture::Modular, 32) })?;
        let len = checkpoint::to_bytes(&model, Dtype::F64).len();
        Ok((model, len))
    };
    let (_, two) = sized(2)?;
    let (four_model, four) = sized(4)?;
    let expected = record_bytes(&four_model, "blocks.2.") + record_bytes(&four_model, "blocks.3.");
    let kb_once = four_model.params().iter().filter(|(n, _)| n.starts_with("kb.")).count() == 1;
    let delta_ok = four - two == expected && kb_once;

    let ok = ckpt_ok && kb_ok && crc_ok && delta_ok;
    Ok((
        ok,
        format!(
            "checkpoint bitwise: {ckpt_ok}, kb bitwise: {kb_ok}, corruption detected: {crc_ok}, L4-L2 delta {} bytes (per-layer {expected}, kb {} bytes not repeated)",
            four - two,
            8 * small(Architecture::Modular, 32).kb_size * small(Architecture::Modular, 32).kb_entry_dim
        ),
    ))
}

fn main() -> ExitCode {
    assert!(Path::new(CORPUS).exists(), "missing {CORPUS}");
    let criteria: [(usize, fn() -> Outcome); 8] = [
        (1, fold_equivalence),
        (2, closure_converse),
        (3, architecture_swap),
        (4, gradient_correctness),
        (5, joint_training),
        (6, cost_trends),
        (7, gate_semantics),
        (8, serialization),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string()) {
            continue;
        }
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
