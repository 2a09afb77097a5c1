//! Finite-difference validation of backward rules.
//!
//! [`grad_check`] compares the analytic gradient of a scalar-valued function
//! against central differences, coordinate by coordinate. It is the oracle
//! for every backward rule in [`crate::tape`] and, composed over a whole
//! model, for the full training stack.

use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, ModelParams, TapeModel};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One evaluation of the function under test: the scalar loss and the
/// analytic gradient with respect to the probe tensor.
pub type Eval = (f64, Vec<f64>);

/// Max over coordinates of |analytic − numeric| / max(1, |numeric|), with
/// numeric = central difference at step `h`.
///
/// `f` must be deterministic; it is evaluated twice at `x` and a bitwise
/// mismatch (e.g. mask sampling left enabled) is a contract error. `h` is
/// restricted to [1e-6, 1e-4], where central differences are trustworthy
/// in f64.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Eval>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::contract(format!(
            "grad_check step h={} outside [1e-6, 1e-4]",
            h
        )));
    }
    let (loss_a, grad) = f(x)?;
    let (loss_b, grad_b) = f(x)?;
    if loss_a.to_bits() != loss_b.to_bits()
        || grad.len() != grad_b.len()
        || grad
            .iter()
            .zip(&grad_b)
            .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(Error::contract(
            "grad_check requires a deterministic function; got different results \
             on repeated evaluation (is mask sampling still enabled?)",
        ));
    }
    if grad.len() != x.len() {
        return Err(Error::contract(format!(
            "gradient length {} does not match probe tensor length {}",
            grad.len(),
            x.len()
        )));
    }

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let (plus, _) = f(&probe)?;
        probe.values_mut()[i] = orig - h;
        let (minus, _) = f(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (grad[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// [`grad_check`] over every parameter of a freshly initialised model.
///
/// Tokens and next-token targets are drawn from `seed`, the forward pass
/// runs in eval mode (no sampling), and the loss is the usual mean
/// cross-entropy. Returns the max relative error across all coordinates.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, h: f64) -> Result<f64> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let params = ModelParams::init(cfg, &mut rng)?;
    let mut token_rng = rng.derive(1);
    let draw = |r: &mut Rng| r.next_below(cfg.vocab_size as u64) as usize;
    let tokens: Vec<usize> = (0..cfg.max_seq_len).map(|_| draw(&mut token_rng)).collect();
    let targets: Vec<usize> = (0..cfg.max_seq_len).map(|_| draw(&mut token_rng)).collect();
    let flat = params.flatten();
    grad_check(
        |x| {
            let mut p = params.clone();
            p.load_flat(x.values())?;
            p.zero_grads();
            let mut tape = Tape::new();
            let tm = TapeModel::bind(&mut tape, &p, None, Mode::Eval)?;
            let mut r = Rng::new(0);
            let logits = tm.forward(&mut tape, &tokens, Mode::Eval, &mut r)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            tape.backward(loss)?;
            tm.pull_grads(&tape, &mut p);
            Ok((tape.value(loss).values()[0], p.flatten_grads()))
        },
        &flat,
        h,
    )
}
