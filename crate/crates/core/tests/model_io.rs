use modkb::checkpoint;
use modkb::error::Error;
use modkb::format::Dtype;
use modkb::knowledge::{kb_load, kb_save};
use modkb::model::{Architecture, Mixer, Model, ModelConfig, NormMode};
use modkb::tensor::Rng;
use modkb::training::{train, Corpus, TrainConfig};

fn config(arch: Architecture, norm: NormMode) -> ModelConfig {
    ModelConfig {
        context_len: 8,
        model_dim: 16,
        key_dim: 8,
        ffn_dim: 24,
        kb_entry_dim: 12,
        kb_size: 20,
        layer_count: 2,
        head_count: 2,
        architecture: arch,
        norm_mode: norm,
        seed: 9,
        ..ModelConfig::default()
    }
}

fn corpus() -> Corpus {
    let bytes = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus_1k.txt")).unwrap();
    Corpus::new(bytes, 8).unwrap()
}

#[test]
fn logits_stay_finite_over_random_prompts() {
    let mut rng = Rng::new(1);
    for arch in [Architecture::Standard, Architecture::Modular] {
        for norm in [NormMode::None, NormMode::Pre, NormMode::Post] {
            let m = Model::new(config(arch, norm)).unwrap();
            for _ in 0..1000 / 6 + 1 {
                let len = 1 + rng.below(8) as usize;
                let prompt: Vec<usize> = (0..len).map(|_| rng.below(256) as usize).collect();
                assert!(m.forward(&prompt).unwrap().is_finite());
            }
        }
    }
}

#[test]
fn trained_model_survives_fold_and_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::new(config(Architecture::Modular, NormMode::Post)).unwrap();
    let cfg = TrainConfig {
        steps: 20,
        batch_size: 2,
        learning_rate: 3e-3,
        log_every: 10,
        ..TrainConfig::default()
    };
    let log = train(&mut m, &corpus(), &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(log.rows.len(), 3);

    let path = dir.path().join("m.ckpt");
    checkpoint::save(&m, &path, Dtype::F64).unwrap();
    let loaded = checkpoint::load_as(&path, Architecture::Modular).unwrap();
    assert_eq!(loaded, m);
    assert!(matches!(
        checkpoint::load_as(&path, Architecture::Standard),
        Err(Error::ArchitectureMismatch { .. })
    ));

    let folded = loaded.fold_to_standard().unwrap();
    let prompt: Vec<usize> = b"keeper o".iter().map(|&b| b as usize).collect();
    let gap = m.forward(&prompt).unwrap().max_abs_diff(&folded.forward(&prompt).unwrap());
    assert!(gap <= 1e-6, "{gap}");
    assert_eq!(folded.config().ffn_dim, 20);
}

#[test]
fn knowledge_base_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::new(config(Architecture::Modular, NormMode::Pre)).unwrap();
    let thresholds: Vec<_> = m
        .blocks
        .iter()
        .map(|b| match &b.mixer {
            Mixer::Cross(c) => c.threshold.clone(),
            Mixer::Ffn(_) => unreachable!(),
        })
        .collect();
    let kb = m.kb.as_ref().unwrap();
    let path = dir.path().join("shared.kb");
    kb_save(&path, kb, &thresholds, Dtype::F64).unwrap();
    let back = kb_load(&path).unwrap();
    assert_eq!(back.kb.entries(), kb.entries());
    assert_eq!(back.thresholds, thresholds);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(kb_load(&path), Err(Error::BadMagic { .. })));
}

#[test]
fn generation_is_seeded() {
    let m = Model::new(config(Architecture::Modular, NormMode::Pre)).unwrap();
    let a = m.generate(b"The ", 20, 0.8, 5).unwrap();
    assert_eq!(a, m.generate(b"The ", 20, 0.8, 5).unwrap());
    assert_eq!(a.len(), 20);
    assert!(m.generate(b"", 4, 1.0, 5).is_err());
}
