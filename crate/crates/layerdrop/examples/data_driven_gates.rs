//! Learn per-layer gates on held-out data and keep the layers the gates
//! rank highest. Compares the learned keep-set against the every-other rule.

use layerdrop::data::{gen_synthetic, SyntheticTask};
use layerdrop::eval::perplexity;
use layerdrop::model::ModelConfig;
use layerdrop::prune::{every_other_keep, gate_scores, select_topk_gates, train_gates};
use layerdrop::structdrop::GroupScheme;
use layerdrop::train::{train_lm, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ModelConfig {
        n_layers: 6,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 128,
        max_seq_len: 16,
        dropout: 0.0,
        layerdrop_p: 0.5,
        scheme: GroupScheme::Layer,
    };
    let train_cfg = TrainConfig {
        steps: 200,
        warmup_steps: 20,
        batch: 1,
        block_len: 16,
        eval_every: 100,
        seed: 5,
        ..Default::default()
    };
    let corpus = gen_synthetic(SyntheticTask::Copy, 8000, 5)?;
    let (train, valid, _) = corpus.split_contiguous((0.7, 0.2, 0.1))?;
    let (params, _) = train_lm(&model, &train_cfg, &train, &valid)?;

    let r = 3;
    let target_p = 1.0 - r as f64 / model.n_layers as f64;
    let gates = train_gates(&params, &valid, target_p, 300, 9)?;

    let scores = gate_scores(&params, &gates, &valid)?;
    println!("gate scores per layer:");
    for (i, s) in scores.iter().enumerate() {
        println!("  layer {}  {:>7.4}", i + 1, s);
    }

    let learned = select_topk_gates(&params, &gates, &valid, r)?;
    let spaced = every_other_keep(model.n_layers, target_p)?;
    let ppl_learned = perplexity(&params, &valid, Some(&learned))?;
    let ppl_spaced = perplexity(&params, &valid, Some(&spaced))?;
    println!("gate top-{}:  keep {:?}, ppl {:.3}", r, learned, ppl_learned);
    println!("every-other: keep {:?}, ppl {:.3}", spaced, ppl_spaced);
    Ok(())
}
