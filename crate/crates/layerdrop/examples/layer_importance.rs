//! Rank layers by how much validation perplexity suffers when they are
//! dropped. Each row averages over keep-sets that exclude that layer.

use layerdrop::data::{gen_synthetic, SyntheticTask};
use layerdrop::model::ModelConfig;
use layerdrop::prune::layer_importance_sweep;
use layerdrop::rng::Rng;
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

    // 10 >= C(5, 3), so the sweep enumerates instead of sampling
    let mut rng = Rng::new(2);
    let rows = layer_importance_sweep(&params, &valid, 3, 10, &mut rng)?;

    println!("layer  mean_ppl_when_dropped  sets");
    for row in &rows {
        println!("{:>5}  {:>20.3}  {:>4}", row.layer, row.mean_ppl, row.trials);
    }
    let worst = rows
        .iter()
        .max_by(|a, b| a.mean_ppl.partial_cmp(&b.mean_ppl).unwrap())
        .unwrap();
    println!("most damaging to drop: layer {}", worst.layer);
    Ok(())
}
