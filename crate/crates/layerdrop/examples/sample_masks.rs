//! Draw group masks under each scheme and show what survives. One bit per
//! group; a layer counts as active only when both its halves are kept.

use layerdrop::model::ModelConfig;
use layerdrop::rng::Rng;
use layerdrop::structdrop::{enumerate_groups, sample_mask, DropSpec, GroupScheme};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig {
        n_layers: 6,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 64,
        max_seq_len: 16,
        dropout: 0.0,
        layerdrop_p: 0.0,
        scheme: GroupScheme::Layer,
    };
    let schemes = [
        GroupScheme::Layer,
        GroupScheme::SubLayer,
        GroupScheme::Head,
        GroupScheme::FFNMatrix,
        GroupScheme::WeightLevel,
        GroupScheme::Composite(vec![GroupScheme::Layer, GroupScheme::Head]),
    ];

    let mut rng = Rng::new(12);
    for scheme in &schemes {
        let groups = enumerate_groups(&cfg, scheme)?;
        let spec = DropSpec {
            scheme: scheme.clone(),
            rate: 0.25,
        };
        let mask = sample_mask(&spec, &cfg, &mut rng)?;
        let dropped = mask.bits.iter().filter(|&&b| b == 0).count();
        let live: Vec<usize> = (1..=cfg.n_layers)
            .filter(|&d| !mask.attn_skipped(d - 1) && !mask.ffn_skipped(d - 1))
            .collect();
        println!(
            "{:<12} {:>6} groups, {:>5} dropped, layers fully active: {:?}",
            scheme_label(scheme),
            groups.len(),
            dropped,
            live
        );
    }

    // the seed is recorded on the mask, so a draw can be reproduced exactly
    let spec = DropSpec {
        scheme: GroupScheme::Layer,
        rate: 0.5,
    };
    let mask = sample_mask(&spec, &cfg, &mut rng)?;
    println!("layer mask bits {:?} (seed {})", mask.bits, mask.seed_used);
    Ok(())
}

fn scheme_label(s: &GroupScheme) -> &'static str {
    match s {
        GroupScheme::Layer => "layer",
        GroupScheme::SubLayer => "sublayer",
        GroupScheme::Head => "head",
        GroupScheme::FFNMatrix => "ffn_matrix",
        GroupScheme::WeightLevel => "weight_level",
        GroupScheme::Composite(_) => "composite",
    }
}
