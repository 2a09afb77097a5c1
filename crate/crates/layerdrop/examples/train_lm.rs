//! Train a small byte-level LM with layer dropout and watch the metrics.
//!
//!     cargo run --example train_lm

use layerdrop::data::{gen_synthetic, SyntheticTask};
use layerdrop::model::ModelConfig;
use layerdrop::structdrop::GroupScheme;
use layerdrop::train::{train_lm, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ModelConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 2,
        d_ffn: 64,
        vocab_size: 256,
        max_seq_len: 32,
        dropout: 0.0,
        layerdrop_p: 0.3,
        scheme: GroupScheme::Layer,
    };
    let train_cfg = TrainConfig {
        steps: 300,
        warmup_steps: 30,
        batch: 2,
        block_len: 32,
        eval_every: 100,
        seed: 7,
        ..Default::default()
    };

    let corpus = gen_synthetic(SyntheticTask::ZipfBigram, 1 << 15, 99)?;
    let (train, valid, _) = corpus.split_contiguous((0.8, 0.1, 0.1))?;

    let (params, metrics) = train_lm(&model, &train_cfg, &train, &valid)?;

    println!("step  train_loss  valid_ppl  active_layers");
    for row in &metrics.rows {
        println!(
            "{:>4}  {:>10.4}  {:>9.2}  {:>13.2}",
            row.step, row.train_loss, row.valid_ppl, row.active_layers_mean
        );
    }
    println!("trained {} parameters", params.count());
    Ok(())
}
