//! Train the same model under different drop granularities (whole layers,
//! attention/FFN halves, attention heads) and prune each its own way.

use layerdrop::data::{gen_synthetic, SyntheticTask};
use layerdrop::eval::{scheme_comparison, scheme_soft_checks};
use layerdrop::model::ModelConfig;
use layerdrop::structdrop::GroupScheme;
use layerdrop::train::TrainConfig;

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
        steps: 250,
        warmup_steps: 25,
        batch: 2,
        block_len: 32,
        eval_every: 250,
        seed: 7,
        ..Default::default()
    };
    let corpus = gen_synthetic(SyntheticTask::ZipfBigram, 1 << 15, 21)?;
    let (train, valid, _) = corpus.split_contiguous((0.8, 0.1, 0.1))?;

    let schemes = [GroupScheme::Layer, GroupScheme::SubLayer, GroupScheme::Head];
    let result = scheme_comparison(&schemes, &model, &train_cfg, &train, &valid)?;
    print!("{}", result.to_csv());

    for (what, held) in scheme_soft_checks(&result) {
        println!("{}: {}", what, if held { "held" } else { "did not hold" });
    }
    Ok(())
}
