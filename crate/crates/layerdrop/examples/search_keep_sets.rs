//! Pick the best keep-set by scoring candidates on the validation split.
//! With a budget that covers all C(N, r) subsets the search is exhaustive;
//! smaller budgets fall back to random sampling.

use layerdrop::data::{gen_synthetic, SyntheticTask};
use layerdrop::eval::perplexity;
use layerdrop::model::ModelConfig;
use layerdrop::prune::{binomial, every_other_keep, search_on_valid};
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

    let r = 3;
    let total = binomial(model.n_layers, r);
    println!("searching keep-sets of size {} out of {} layers", r, model.n_layers);

    let mut rng = Rng::new(1);
    let (best, best_ppl) = search_on_valid(&params, &valid, r, 200, &mut rng)?;
    println!("exhaustive ({} candidates): keep {:?}, ppl {:.3}", total, best, best_ppl);

    let spaced = every_other_keep(model.n_layers, 0.5)?;
    let spaced_ppl = perplexity(&params, &valid, Some(&spaced))?;
    println!("every-other rule:           keep {:?}, ppl {:.3}", spaced, spaced_ppl);

    let mut rng = Rng::new(1);
    let (sampled, sampled_ppl) = search_on_valid(&params, &valid, r, 5, &mut rng)?;
    println!("budget 5 (sampled):         keep {:?}, ppl {:.3}", sampled, sampled_ppl);
    Ok(())
}
