//! Train with drop rate 0.5, then cut the model to half depth with the
//! every-other rule and compare perplexities without any finetuning.

use layerdrop::data::{gen_synthetic, SyntheticTask};
use layerdrop::eval::perplexity;
use layerdrop::model::ModelConfig;
use layerdrop::prune::{every_other_keep, prune_model};
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
        layerdrop_p: 0.5,
        scheme: GroupScheme::Layer,
    };
    let train_cfg = TrainConfig {
        steps: 400,
        warmup_steps: 40,
        batch: 2,
        block_len: 32,
        eval_every: 200,
        seed: 3,
        ..Default::default()
    };

    let corpus = gen_synthetic(SyntheticTask::ZipfBigram, 1 << 15, 42)?;
    let (train, valid, _) = corpus.split_contiguous((0.8, 0.1, 0.1))?;
    let (full, _) = train_lm(&model, &train_cfg, &train, &valid)?;

    // drop rate 0.5 means every second layer goes
    let keep = every_other_keep(model.n_layers, 0.5)?;
    let pruned = prune_model(&full, &keep)?;

    let ppl_full = perplexity(&full, &valid, None)?;
    let ppl_pruned = perplexity(&pruned, &valid, None)?;
    println!("keep set      {:?}", keep);
    println!("full depth    {} layers, ppl {:.3}", full.config.n_layers, ppl_full);
    println!("pruned        {} layers, ppl {:.3}", pruned.config.n_layers, ppl_pruned);
    println!(
        "params        {} -> {}",
        full.count(),
        pruned.count()
    );
    Ok(())
}
