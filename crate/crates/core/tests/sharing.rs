use modkb::model::{Architecture, BindOptions, Model, ModelConfig, NormMode};
use modkb::tensor::{Matrix, Rng, Tape};

fn config(layers: usize) -> ModelConfig {
    ModelConfig {
        context_len: 6,
        model_dim: 8,
        key_dim: 4,
        kb_entry_dim: 6,
        kb_size: 10,
        layer_count: layers,
        head_count: 2,
        architecture: Architecture::Modular,
        norm_mode: NormMode::Pre,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn windows(seed: u64, count: usize, len: usize) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.below(256) as usize).collect())
        .collect()
}

/// Knowledge-base gradients of each per-layer copy, plus the shared one.
fn kb_gradients(m: &Model, batch: &[&[usize]], muted: Vec<usize>) -> (Vec<Matrix>, Matrix) {
    let inputs: Vec<&[usize]> = batch.iter().map(|w| &w[..w.len() - 1]).collect();
    let targets: Vec<usize> = batch.iter().flat_map(|w| w[1..].iter().copied()).collect();

    let mut t = Tape::new();
    let opts = BindOptions {
        trainable: true,
        mute_cross_layers: muted.clone(),
        kb_per_layer: true,
    };
    let vars = m.bind(&mut t, &opts);
    let logits = m.forward_vars(&mut t, &vars, &inputs).unwrap();
    let loss = t.cross_entropy(logits, &targets).unwrap();
    let grads = t.backward(loss).unwrap();
    let per_layer = vars.kb_layers().iter().map(|&v| grads.get(v)).collect();

    let mut t = Tape::new();
    let opts = BindOptions {
        trainable: true,
        mute_cross_layers: muted,
        kb_per_layer: false,
    };
    let vars = m.bind(&mut t, &opts);
    let logits = m.forward_vars(&mut t, &vars, &inputs).unwrap();
    let loss = t.cross_entropy(logits, &targets).unwrap();
    let grads = t.backward(loss).unwrap();
    (per_layer, grads.get(vars.kb().unwrap()))
}

#[test]
fn shared_gradient_is_the_sum_of_layer_contributions() {
    for layers in [2, 3] {
        let mut m = Model::new(config(layers)).unwrap();
        m.reinit_fan_in(11);
        let ws = windows(5, 3, 7);
        let batch: Vec<&[usize]> = ws.iter().map(Vec::as_slice).collect();
        let (per_layer, shared) = kb_gradients(&m, &batch, Vec::new());
        assert_eq!(per_layer.len(), layers);
        let mut sum = Matrix::zeros(shared.rows(), shared.cols());
        for g in &per_layer {
            assert!(g.max_abs() > 0.0);
            sum = sum.add(g).unwrap();
        }
        let scale = shared.max_abs();
        assert!(sum.max_abs_diff(&shared) <= 1e-12 * scale.max(1.0), "{}", sum.max_abs_diff(&shared));
    }
}

#[test]
fn muted_layer_contributes_nothing() {
    let mut m = Model::new(config(3)).unwrap();
    m.reinit_fan_in(12);
    let ws = windows(6, 2, 7);
    let batch: Vec<&[usize]> = ws.iter().map(Vec::as_slice).collect();
    let (per_layer, shared) = kb_gradients(&m, &batch, vec![1]);
    assert!(per_layer[1].data().iter().all(|&g| g == 0.0));
    assert!(per_layer[0].max_abs() > 0.0 && per_layer[2].max_abs() > 0.0);
    let sum = per_layer[0].add(&per_layer[2]).unwrap();
    assert!(sum.max_abs_diff(&shared) <= 1e-12 * shared.max_abs().max(1.0));
}

#[test]
fn frozen_knowledge_base_has_no_gradient_but_others_do() {
    let mut m = Model::new(config(2)).unwrap();
    m.reinit_fan_in(13);
    m.kb.as_mut().unwrap().trainable = false;
    let ws = windows(7, 2, 7);
    let batch: Vec<&[usize]> = ws.iter().map(Vec::as_slice).collect();
    let opts = BindOptions {
        trainable: true,
        ..Default::default()
    };
    let (_, grads) = m.batch_loss(&batch, Some(&opts)).unwrap();
    let grads = grads.unwrap();
    for ((name, _), g) in m.params().iter().zip(&grads) {
        if name == "kb.entries" {
            assert!(g.data().iter().all(|&x| x == 0.0));
        } else if name.ends_with("wq") {
            assert!(g.max_abs() > 0.0, "{name}");
        }
    }
}
