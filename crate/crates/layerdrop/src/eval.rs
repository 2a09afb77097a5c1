//! Perplexity and the figure-generating sweeps (prune curve, train-rate vs
//! prune-rate grid, scheme comparison).

use crate::data::{make_blocks, Corpus};
use crate::error::{Error, Result};
use crate::model::{forward_lm, ModelConfig, ModelParams};
use crate::prune::depth_keep;
use crate::rng::Rng;
use crate::structdrop::{enumerate_groups, GroupScheme};
use crate::train::{train_lm, TrainConfig};
use std::collections::HashSet;

/// exp(mean token-level cross-entropy) over the corpus in contiguous blocks
/// of the model's maximum sequence length. `keep` prunes to the 1-indexed
/// layer subset first; `None` evaluates the full model.
pub fn perplexity(params: &ModelParams, corpus: &Corpus, keep: Option<&[usize]>) -> Result<f64> {
    let owned;
    let eval_params = match keep {
        Some(k) => {
            owned = params.keep_layers(k)?;
            &owned
        }
        None => params,
    };
    let block_len = eval_params.config.max_seq_len;
    if corpus.len() <= block_len {
        return Err(Error::Corpus(format!(
            "corpus of {} tokens is too short to evaluate at block length {}",
            corpus.len(),
            block_len
        )));
    }
    let mut rng = Rng::new(0); // unused: no shuffle, eval mode
    let mut nll_sum = 0.0;
    let mut n_targets = 0usize;
    for batch in make_blocks(corpus, 1, block_len, &mut rng, false)? {
        let logits = forward_lm(eval_params, &batch.inputs[0], None)?;
        nll_sum += nll_of_rows(&logits, &batch.targets[0])?;
        n_targets += batch.targets[0].len();
    }
    if n_targets == 0 {
        return Err(Error::Corpus("no complete evaluation blocks".into()));
    }
    Ok((nll_sum / n_targets as f64).exp())
}

/// Sum of -log softmax(logits_row)[target] over rows. Same max-shifted
/// formulation as the training loss so eval and train agree bit for bit.
fn nll_of_rows(logits: &crate::tensor::Tensor, targets: &[usize]) -> Result<f64> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if targets.len() != rows {
        return Err(Error::contract(format!(
            "{} logit rows but {} targets",
            rows,
            targets.len()
        )));
    }
    let mut sum = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= cols {
            return Err(Error::Index {
                what: "target token",
                index: t,
                bound: cols,
            });
        }
        let row = &logits.values()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        sum += z.ln() - (row[t] - m);
    }
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Series label, e.g. which curve or which training rate.
    pub experiment: String,
    /// Independent variable(s) for this grid point.
    pub x: String,
    pub ppl: f64,
    pub params_count: usize,
    pub layers_active: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "experiment,x,ppl,params_count,layers_active";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.experiment, r.x, r.ppl, r.params_count, r.layers_active
            ));
        }
        out
    }

    /// One row per grid point: (experiment, x) keys must not repeat.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert((r.experiment.as_str(), r.x.as_str())) {
                return Err(Error::contract(format!(
                    "duplicate sweep key ({}, {})",
                    r.experiment, r.x
                )));
            }
        }
        Ok(())
    }
}

/// The default pruning grid: depths {N, 3N/4, N/2, N/4}, rounded, clamped
/// to at least one layer, deduplicated.
pub fn depth_grid(n: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = [1.0, 0.75, 0.5, 0.25]
        .iter()
        .map(|f| ((n as f64 * f).round() as usize).max(1))
        .collect();
    grid.dedup();
    grid
}

fn check_comparable(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    if a.vocab_size != b.vocab_size || a.d_model != b.d_model {
        return Err(Error::contract(format!(
            "models are not comparable: vocab {} vs {}, d_model {} vs {}",
            a.vocab_size, b.vocab_size, a.d_model, b.d_model
        )));
    }
    Ok(())
}

/// Three curves over the depth grid: a LayerDrop-trained model pruned, a
/// plain baseline pruned, and same-depth models trained from scratch.
pub fn prune_curve(
    params_layerdrop: &ModelParams,
    params_baseline: &ModelParams,
    scratch_models: &[ModelParams],
    valid: &Corpus,
) -> Result<SweepResult> {
    let n = params_layerdrop.config.n_layers;
    check_comparable(&params_layerdrop.config, &params_baseline.config)?;
    if params_baseline.config.n_layers != n {
        return Err(Error::contract(
            "trained models must share depth for a pruning comparison",
        ));
    }
    for s in scratch_models {
        check_comparable(&params_layerdrop.config, &s.config)?;
    }
    let mut result = SweepResult::default();
    for r in depth_grid(n) {
        let keep = depth_keep(n, r)?;
        let scratch = scratch_models
            .iter()
            .find(|m| m.config.n_layers == r)
            .ok_or_else(|| {
                Error::contract(format!("no from-scratch model of depth {r} was provided"))
            })?;
        for (label, ppl, params_count) in [
            (
                "layerdrop_pruned",
                perplexity(params_layerdrop, valid, Some(&keep))?,
                params_layerdrop.config.param_count_at_depth(r),
            ),
            (
                "baseline_pruned",
                perplexity(params_baseline, valid, Some(&keep))?,
                params_baseline.config.param_count_at_depth(r),
            ),
            (
                "from_scratch",
                perplexity(scratch, valid, None)?,
                scratch.config.param_count(),
            ),
        ] {
            result.rows.push(SweepRow {
                experiment: label.into(),
                x: r.to_string(),
                ppl,
                params_count,
                layers_active: r,
            });
        }
    }
    result.validate()?;
    Ok(result)
}

/// Train one model per LayerDrop rate (same seed and steps), then evaluate
/// each at every prune depth.
pub fn drop_vs_prune_grid(
    train_ps: &[f64],
    prune_rs: &[usize],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Corpus,
    valid: &Corpus,
) -> Result<SweepResult> {
    if train_ps.is_empty() || prune_rs.is_empty() {
        return Err(Error::config("grid", "both axes need at least one value"));
    }
    let n = model_cfg.n_layers;
    let mut result = SweepResult::default();
    for &p in train_ps {
        let mut mc = model_cfg.clone();
        mc.layerdrop_p = p;
        let (params, _) = train_lm(&mc, train_cfg, train, valid).map_err(Error::from)?;
        for &r in prune_rs {
            let keep = depth_keep(n, r)?;
            let ppl = perplexity(&params, valid, Some(&keep))?;
            result.rows.push(SweepRow {
                experiment: format!("train_p={p}"),
                x: r.to_string(),
                ppl,
                params_count: mc.param_count_at_depth(r),
                layers_active: r,
            });
        }
    }
    result.validate()?;
    Ok(result)
}

/// Parameters covered by a scheme's groups, as a fraction of what the Layer
/// scheme covers. Group-constrained schemes touch different slices of the
/// model, so matching expected parameter drop means scaling their rates.
pub fn covered_params(cfg: &ModelConfig, scheme: &GroupScheme) -> Result<usize> {
    let groups = enumerate_groups(cfg, scheme)?;
    Ok(groups
        .iter()
        .flat_map(|g| g.iter().map(|c| c.expand(cfg).len()))
        .sum())
}

/// Short stable label for sweep keys.
pub fn scheme_label(scheme: &GroupScheme) -> String {
    match scheme {
        GroupScheme::Layer => "layer".into(),
        GroupScheme::SubLayer => "sublayer".into(),
        GroupScheme::Head => "head".into(),
        GroupScheme::FFNMatrix => "ffn_matrix".into(),
        GroupScheme::WeightLevel => "weight_level".into(),
        GroupScheme::Composite(members) => {
            let inner: Vec<String> = members.iter().map(scheme_label).collect();
            format!("composite[{}]", inner.join("+"))
        }
    }
}

/// The drop rate for `scheme` that matches the Layer scheme's expected
/// parameter drop at rate `p_layer`, capped below 1.
pub fn matched_rate(cfg: &ModelConfig, scheme: &GroupScheme, p_layer: f64) -> Result<f64> {
    let layer_cov = covered_params(cfg, &GroupScheme::Layer)? as f64;
    let cov = covered_params(cfg, scheme)? as f64;
    if cov == 0.0 {
        return Err(Error::contract("scheme covers no parameters"));
    }
    Ok((p_layer * layer_cov / cov).min(0.95))
}

/// Train one model per scheme at matched expected-parameter-drop rates and
/// report each full model's validation perplexity. The reference rate is
/// the config's layerdrop_p under the Layer scheme.
pub fn scheme_comparison(
    schemes: &[GroupScheme],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Corpus,
    valid: &Corpus,
) -> Result<SweepResult> {
    if schemes.is_empty() {
        return Err(Error::config("schemes", "need at least one scheme"));
    }
    if !(model_cfg.layerdrop_p > 0.0) {
        return Err(Error::config(
            "layerdrop_p",
            "scheme comparison needs a positive reference rate",
        ));
    }
    let mut result = SweepResult::default();
    for scheme in schemes {
        let rate = matched_rate(model_cfg, scheme, model_cfg.layerdrop_p)?;
        let mut mc = model_cfg.clone();
        mc.scheme = scheme.clone();
        mc.layerdrop_p = rate;
        let (params, _) = train_lm(&mc, train_cfg, train, valid).map_err(Error::from)?;
        let ppl = perplexity(&params, valid, None)?;
        result.rows.push(SweepRow {
            experiment: "scheme_comparison".into(),
            x: format!("{}@p={rate:.4}", scheme_label(scheme)),
            ppl,
            params_count: mc.param_count(),
            layers_active: mc.n_layers,
        });
    }
    result.validate()?;
    Ok(result)
}

/// Direction-only observations from the scheme comparison. Reported for
/// inspection, never meant to gate tests: at desk scale the training noise
/// easily exceeds the trends themselves.
pub fn scheme_soft_checks(result: &SweepResult) -> Vec<(String, bool)> {
    let find = |prefix: &str| {
        result
            .rows
            .iter()
            .find(|r| r.x.starts_with(&format!("{prefix}@")))
            .map(|r| r.ppl)
    };
    let mut checks = Vec::new();
    if let (Some(layer), Some(sub)) = (find("layer"), find("sublayer")) {
        let band = 0.10 * layer;
        checks.push((
            format!(
                "layer vs sublayer ppl within 10% band: {layer:.3} vs {sub:.3}"
            ),
            (layer - sub).abs() <= band,
        ));
    }
    if let (Some(layer), Some(head)) = (find("layer"), find("head")) {
        checks.push((
            format!("head-only not better than layer: {head:.3} >= {layer:.3}"),
            head >= layer,
        ));
    }
    checks
}
