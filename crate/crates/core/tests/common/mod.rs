#![allow(dead_code)]

use tagmt::corpus::{parse_langs, MonoStore, ParallelStore, Split};
use tagmt::harness::{default_specs, gen_synthetic, ExperimentConfig, GroundTruth, SynthConfig};
use tagmt::model::ModelConfig;
use tagmt::tokenizer::{train_subword, SubwordModel};

pub struct Tiny {
    pub parallel: ParallelStore,
    pub mono: MonoStore,
    pub truth: GroundTruth,
    pub tok: SubwordModel,
    pub config: ExperimentConfig,
}

/// Three small synthetic languages and a model small enough for a few
/// seconds of training.
pub fn tiny() -> Tiny {
    let langs = parse_langs("sy1,sy2,sy3").unwrap();
    let mut specs = default_specs(&langs, 5).unwrap();
    for s in specs.iter_mut() {
        s.concept_vocab_size = 20;
    }
    let synth = SynthConfig {
        n_parallel_per_direction: 24,
        n_dev_per_direction: 4,
        n_test_per_direction: 4,
        n_mono_per_lang: 16,
        min_len: 2,
        max_len: 4,
        seed: 5,
        ..SynthConfig::default()
    };
    let (parallel, mono, truth) = gen_synthetic(&specs, &synth).unwrap();
    let mut texts: Vec<&str> = parallel
        .pairs_in(Split::Train)
        .flat_map(|p| [p.src_text.as_str(), p.tgt_text.as_str()])
        .collect();
    texts.extend(mono.iter().map(|(_, s)| s.text.as_str()));
    let tok = train_subword(texts, 330, &langs).unwrap();
    let config = ExperimentConfig {
        languages: langs,
        epochs: 2,
        batch_size_sentences: 16,
        eval_every_steps: 4,
        monitor_sentences: 2,
        model: ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_positions: 24,
            ..ModelConfig::default()
        },
        ..ExperimentConfig::default()
    };
    Tiny {
        parallel,
        mono,
        truth,
        tok,
        config,
    }
}

/// Worst per-tensor relative error between backprop and central
/// differences for the full translation loss, in 64-bit, on the tiny
/// config (d_model 8, one layer each side, 13 types).
pub fn full_model_grad_error() -> f64 {
    use tagmt::model::{Batch, Model};
    use tagmt_tensor::Tape;

    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        vocab_size: 13,
        max_positions: 8,
        dropout: 0.0,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::init(config, 11).unwrap();
    let batch = Batch::from_vecs(&[
        (vec![5, 6, 7, 12, 1], vec![8, 9, 1]),
        (vec![9, 1], vec![4, 5, 11, 7, 1]),
    ])
    .unwrap();
    let loss_of = |m: &Model<f64>| -> f64 {
        let mut t = Tape::new();
        let l = m.loss(&mut t, &batch, None).unwrap();
        t.value(l).item()
    };
    let mut tape = Tape::new();
    let l = model.loss(&mut tape, &batch, None).unwrap();
    let grads = tape.backward(l, &model.params).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = Model::<f64>::init(model.config.clone(), 11).unwrap();
    for id in model.params.ids() {
        let n = model.params.get(id).numel();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let x = model.params.get(id).data()[i];
            probe.params.get_mut(id).data_mut()[i] = x + h;
            let up = loss_of(&probe);
            probe.params.get_mut(id).data_mut()[i] = x - h;
            let down = loss_of(&probe);
            probe.params.get_mut(id).data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * h));
        }
        let analytic = grads.get(id).data();
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(analytic).max(norm(&numeric)).max(1e-10);
        worst = worst.max(diff / scale);
    }
    worst
}
