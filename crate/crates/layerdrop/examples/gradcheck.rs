//! Check every analytic gradient in the model against central differences.

use layerdrop::gradcheck::model_grad_check;
use layerdrop::model::ModelConfig;
use layerdrop::structdrop::GroupScheme;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 32,
        max_seq_len: 8,
        dropout: 0.0,
        layerdrop_p: 0.0,
        scheme: GroupScheme::Layer,
    };
    let err = model_grad_check(&cfg, 15, 1e-5)?;
    println!("max relative gradient error: {:.3e}", err);
    if err < 1e-4 {
        println!("ok");
    } else {
        println!("FAILED: expected < 1e-4");
        std::process::exit(1);
    }
    Ok(())
}
