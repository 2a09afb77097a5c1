//! Pruned models work without finetuning, but a short finetune at a low
//! learning rate can claw back a little perplexity. Shows before and after.

use layerdrop::data::{gen_synthetic, SyntheticTask};
use layerdrop::eval::perplexity;
use layerdrop::model::ModelConfig;
use layerdrop::prune::every_other_keep;
use layerdrop::structdrop::GroupScheme;
use layerdrop::train::{finetune_pruned, train_lm, TrainConfig};

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
        lr_peak: 3e-4,
        ..Default::default()
    };
    let corpus = gen_synthetic(SyntheticTask::ZipfBigram, 1 << 15, 42)?;
    let (train, valid, _) = corpus.split_contiguous((0.8, 0.1, 0.1))?;
    let (full, _) = train_lm(&model, &train_cfg, &train, &valid)?;

    let keep = every_other_keep(model.n_layers, 0.5)?;
    let pruned = full.keep_layers(&keep)?;
    let before = perplexity(&pruned, &valid, None)?;

    let mut ft_cfg = train_cfg.clone();
    ft_cfg.lr_peak = 5e-5;
    let tuned = finetune_pruned(&full, &keep, &train, 150, &ft_cfg)?;
    let after = perplexity(&tuned, &valid, None)?;

    println!("keep {:?}", keep);
    println!("pruned ppl    {:.3}", before);
    println!("finetuned ppl {:.3} ({} steps)", after, 150);
    Ok(())
}
