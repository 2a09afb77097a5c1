//! Dropped layers skip their forward and backward work entirely, so
//! training throughput rises with the drop rate. Times a few rates.

use layerdrop::model::ModelConfig;
use layerdrop::structdrop::GroupScheme;
use layerdrop::train::measure_throughput;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ModelConfig {
        n_layers: 8,
        d_model: 32,
        n_heads: 2,
        d_ffn: 64,
        vocab_size: 256,
        max_seq_len: 32,
        dropout: 0.0,
        layerdrop_p: 0.0,
        scheme: GroupScheme::Layer,
    };
    let rates = [0.0, 0.25, 0.5];
    let rows = measure_throughput(&model, &rates, 60)?;

    println!("p     tokens/sec  speedup");
    let base = rows[0].1;
    for (p, tps) in &rows {
        println!("{:<4}  {:>10.0}  {:>6.2}x", p, tps, tps / base);
    }
    Ok(())
}
