//! Rough per-step training cost at the desk-scale configuration.
//! `cargo run --example throughput_probe [f32|f64]`

use std::time::Instant;

use diffnar::diffusion::DiffusionSchedule;
use diffnar::model::{Mode, ModelConfig, TransformerModel};
use diffnar::optim::LrSchedule;
use diffnar::scalar::Scalar;
use diffnar::synthdata::{generate_dataset, DatasetSpec, Vocabulary};
use diffnar::training::{encode_pairs, EncodedPair, Regimen, TrainConfig, Trainer};

fn probe<S: Scalar>(pairs: &[EncodedPair], vocab_size: usize) {
    let mcfg = ModelConfig {
        enc_layers: 4,
        dec_layers: 4,
        transitions: 2,
        d_model: 64,
        heads: 4,
        ffn_dim: 128,
        shared_transitions: false,
        mode: Mode::Nar,
        vocab_size,
        max_len: 64,
    };
    let tcfg = TrainConfig {
        total_steps: 100,
        target_warmup_steps: 0,
        batch_size: 8,
        lr: LrSchedule::InverseSqrt { warmup_steps: 1000, scale: 1.0 },
        seed: 1,
        eval_every: 0,
        checkpoint_every: 0,
        regimen: Regimen::Standard,
    };
    let model = TransformerModel::<S>::new(mcfg, 1).unwrap();
    let mut tr = Trainer::new(model, DiffusionSchedule::simplified(2), tcfg).unwrap();
    let steps = 30;
    let t0 = Instant::now();
    for _ in 0..steps {
        let idxs = tr.sample_batch_indices(pairs.len());
        let batch: Vec<_> = idxs.into_iter().map(|i| pairs[i].clone()).collect();
        tr.train_step(&batch).unwrap();
    }
    println!(
        "{} glancing T=2 batch8: {:.1} ms/step",
        S::DTYPE,
        t0.elapsed().as_secs_f64() * 1000.0 / steps as f64
    );
}

fn main() {
    let mut spec = DatasetSpec::desk_scale(1);
    spec.num_train = 2000;
    spec.num_val = 10;
    spec.num_test = 10;
    let ds = generate_dataset(&spec).unwrap();
    let vocab = Vocabulary::from_spec(&spec);
    let pairs = encode_pairs(&ds.train, &vocab, None).unwrap();
    let prec = std::env::args().nth(1).unwrap_or_else(|| "f64".into());
    if prec == "f32" {
        probe::<f32>(&pairs, vocab.size());
    } else {
        probe::<f64>(&pairs, vocab.size());
    }
}
