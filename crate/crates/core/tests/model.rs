use std::path::Path;

use life_core::lm_scorer::{PromptId, WordProb, WordProbSeq};
use life_core::seq_classifier::{
    assemble_feature, grad_check, predict, train, FingerprintFeature, ModelConfig, SeqModel,
    TrainConfig,
};

fn feature(neg_log_probs: &[f64], len: usize) -> FingerprintFeature {
    let seq = WordProbSeq {
        sentence_index: 0,
        words: neg_log_probs
            .iter()
            .map(|&v| WordProb { word: "w".into(), logprob: -v })
            .collect(),
        prompt_id: PromptId::T2,
        backend_id: "test".into(),
    };
    assemble_feature("x", &[seq], len, 0).unwrap()
}

fn small(use_cnn: bool, use_transformer: bool, len: usize) -> ModelConfig {
    ModelConfig {
        feature_len: len,
        conv_channels: 6,
        kernel: 5,
        d_model: 8,
        heads: 2,
        ff_dim: 12,
        layers: 1,
        use_cnn,
        use_transformer,
    }
}

#[test]
fn golden_forward_value() {
    let (model, _) = SeqModel::load(Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/golden_model.json"
    )))
    .unwrap();
    let p = model.forward(&feature(&[1.2, 3.4, 0.5], 8)).unwrap();
    assert!((p - 6.666_324_465_345_462_3e-1).abs() < 1e-10, "{p:.17e}");
}

#[test]
fn gradients_match_finite_differences() {
    for (cnn, trm) in [(true, true), (false, true), (true, false)] {
        for seed in 0..10u64 {
            let model = SeqModel::new(small(cnn, trm, 16), seed).unwrap();
            let vals: Vec<f64> = (0..11).map(|i| ((i * 7 + seed as usize * 3) % 13) as f64 * 0.9).collect();
            let label = (seed % 2) as f64;
            let r = grad_check(&model, &feature(&vals, 16), label, 1e-5).unwrap();
            assert!(
                r.max_rel_error < 1e-4,
                "cnn={cnn} trm={trm} seed={seed}: {} in {}",
                r.max_rel_error,
                r.worst_param
            );
        }
    }
}

/// Two classes separated by feature level: low values are fake.
fn separable(n: usize, len: usize) -> (Vec<FingerprintFeature>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let fake = i % 2 == 0;
        let base = if fake { 1.0 } else { 4.0 };
        let vals: Vec<f64> = (0..(3 + i % 5)).map(|j| base + 0.1 * ((i + j) % 3) as f64).collect();
        xs.push(feature(&vals, len));
        ys.push(if fake { 1.0 } else { 0.0 });
    }
    (xs, ys)
}

#[test]
fn full_batch_training_decreases_loss_on_separable_data() {
    let (xs, ys) = separable(16, 8);
    let mut model = SeqModel::new(small(true, true, 8), 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        weight_decay: 0.0,
        warmup_ratio: 0.1,
        batch_size: 16,
        epochs: 300,
        seed: 0,
    };
    let summary = train(&mut model, &xs, &ys, &cfg).unwrap();
    // Adam steps are not guaranteed to descend, so check the trend over
    // windows of 20 epochs rather than every single step.
    let after_warmup = &summary.epoch_losses[summary.warmup_steps..];
    let means: Vec<f64> = after_warmup
        .chunks(20)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] < w[0], "windowed loss rose from {} to {}", w[0], w[1]);
    }
    assert!(*summary.epoch_losses.last().unwrap() < 1e-2);
    let preds = predict(&model, &xs).unwrap();
    assert!(preds.iter().zip(&ys).all(|(p, &y)| p.fake == (y == 1.0)));
}

#[test]
fn ablated_architectures_train() {
    let (xs, ys) = separable(24, 8);
    for (cnn, trm) in [(false, true), (true, false), (false, false)] {
        let mut model = SeqModel::new(small(cnn, trm, 8), 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 60,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let s = train(&mut model, &xs, &ys, &cfg).unwrap();
        assert!(s.epoch_losses.last().unwrap() < &s.epoch_losses[0], "cnn={cnn} trm={trm}");
    }
}

#[test]
fn training_is_deterministic() {
    let (xs, ys) = separable(12, 8);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 5,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = SeqModel::new(small(true, true, 8), 3).unwrap();
        train(&mut m, &xs, &ys, &cfg).unwrap();
        m.params().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn single_class_training_rejected() {
    let xs = vec![feature(&[1.0], 8), feature(&[2.0], 8)];
    let mut m = SeqModel::new(small(true, true, 8), 0).unwrap();
    assert!(train(&mut m, &xs, &[1.0, 1.0], &TrainConfig::default()).is_err());
}

#[test]
fn head_only_model_is_nearly_exact() {
    let vals: Vec<f64> = (0..9).map(|i| i as f64 * 1.3).collect();
    for seed in 0..5u64 {
        let model = SeqModel::new(small(false, false, 16), seed).unwrap();
        let r = grad_check(&model, &feature(&vals, 16), 1.0, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn larger_difference_step_has_larger_error() {
    let model = SeqModel::new(small(true, true, 16), 3).unwrap();
    let f = feature(&[2.0, 5.5, 0.3, 7.1, 3.3, 1.9, 4.4], 16);
    let g = model.gradient(&f, 1.0).unwrap();
    let i = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
    let err = |eps: f64| {
        let mut m = model.clone();
        let o = m.params()[i];
        m.params_mut()[i] = o + eps;
        let plus = m.loss(&f, 1.0).unwrap();
        m.params_mut()[i] = o - eps;
        let minus = m.loss(&f, 1.0).unwrap();
        ((plus - minus) / (2.0 * eps) - g[i]).abs()
    };
    assert!(err(1e-2) > err(1e-3), "{} vs {}", err(1e-2), err(1e-3));
}
