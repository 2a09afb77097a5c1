//! Training loop with structured layer dropout, Adam, LR scheduling,
//! post-prune finetuning, and throughput measurement.

use crate::data::{make_blocks, Corpus};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{Mode, ModelConfig, ModelParams, TapeModel};
use crate::rng::Rng;
use crate::structdrop::{sample_mask, DropSpec};
use crate::tape::Tape;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub block_len: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// When set, the driver starts from this checkpoint via [`resume_lm`]
    /// instead of a fresh init. The loop itself never reads the path.
    pub init_checkpoint: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 1000,
            batch: 2,
            block_len: 64,
            lr_peak: 3e-4,
            warmup_steps: 100,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: 0.1,
            seed: 0,
            eval_every: 100,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// Defaults sized for a `steps`-step run: warmup is 10% of steps.
    pub fn for_steps(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            warmup_steps: steps / 10,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::config("warmup_steps", "must not exceed steps"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if self.block_len == 0 {
            return Err(Error::config("block_len", "must be positive"));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::config("lr_peak", "must be positive and finite"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub valid_ppl: f64,
    pub tokens_per_sec: f64,
    pub active_layers_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str = "step,train_loss,valid_ppl,tokens_per_sec,active_layers_mean";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.train_loss, r.valid_ppl, r.tokens_per_sec, r.active_layers_mean
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<RunMetrics> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == Self::CSV_HEADER => {}
            other => {
                return Err(Error::contract(format!(
                    "bad metrics header: {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(Error::contract(format!("bad metrics row: {line}")));
            }
            let f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::contract(format!("bad number in metrics row: {s}")))
            };
            rows.push(MetricsRow {
                step: cols[0]
                    .parse()
                    .map_err(|_| Error::contract(format!("bad step in metrics row: {line}")))?,
                train_loss: f(cols[1])?,
                valid_ppl: f(cols[2])?,
                tokens_per_sec: f(cols[3])?,
                active_layers_mean: f(cols[4])?,
            });
        }
        Ok(RunMetrics { rows })
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.rows.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::contract("metric steps must strictly increase"));
            }
        }
        for r in &self.rows {
            let vals = [r.train_loss, r.valid_ppl, r.tokens_per_sec, r.active_layers_mean];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!(
                    "non-finite metrics at step {}",
                    r.step
                )));
            }
        }
        Ok(())
    }
}

/// Training failure that keeps the salvageable state: on divergence the
/// parameters from the most recent validation point come back with the
/// metrics collected so far.
#[derive(Debug)]
pub enum TrainError {
    Diverged {
        step: usize,
        last_good: Box<ModelParams>,
        metrics: RunMetrics,
    },
    Other(Error),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Diverged { step, .. } => {
                write!(f, "training diverged (non-finite loss) at step {step}")
            }
            TrainError::Other(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<Error> for TrainError {
    fn from(e: Error) -> TrainError {
        TrainError::Other(e)
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Error {
        match e {
            TrainError::Diverged { step, .. } => Error::Diverged { step },
            TrainError::Other(e) => e,
        }
    }
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam buffers disagree: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], clip: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Linear warmup from 0 to lr_peak over warmup_steps, then either constant
/// or cosine decay to 0 at cfg.steps.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.lr_peak,
        Schedule::Cosine => {
            let span = cfg.steps.saturating_sub(cfg.warmup_steps) as f64;
            if span == 0.0 {
                return cfg.lr_peak;
            }
            let t = ((step - cfg.warmup_steps) as f64 / span).clamp(0.0, 1.0);
            cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

struct LoopOutput {
    params: ModelParams,
    metrics: RunMetrics,
    timed_tokens: usize,
    timed_secs: f64,
}

/// Shared step loop. LayerDrop masks are sampled only when `use_layerdrop`;
/// metric rows are emitted only when a validation corpus is present. The
/// first `timing_skip` steps are excluded from the throughput timer.
fn run_loop(
    mut params: ModelParams,
    cfg: &TrainConfig,
    train: &Corpus,
    valid: Option<&Corpus>,
    use_layerdrop: bool,
    timing_skip: usize,
) -> TrainResult<LoopOutput> {
    cfg.validate()?;
    let model_cfg = params.config.clone();
    let master = Rng::new(cfg.seed);
    let mut mask_rng = master.derive(1);
    let mut data_rng = master.derive(2);
    let mut drop_rng = master.derive(3);

    let mut flat = params.flatten().values().to_vec();
    let mut adam = AdamState::new(flat.len(), cfg.beta1, cfg.beta2, cfg.adam_eps);

    let mut metrics = RunMetrics::default();
    let mut last_good = params.clone();

    let mut epoch = make_blocks(train, cfg.batch, cfg.block_len, &mut data_rng, true)?;
    let mut window_loss = 0.0;
    let mut window_active = 0.0;
    let mut window_steps = 0usize;
    let mut window_tokens = 0usize;
    let mut window_t0 = Instant::now();

    let mut timed_tokens = 0usize;
    let mut timed_t0: Option<Instant> = None;
    let mut timed_secs = 0.0;

    for step in 1..=cfg.steps {
        if step > timing_skip && timed_t0.is_none() {
            timed_t0 = Some(Instant::now());
        }
        let batch = match epoch.next() {
            Some(b) => b,
            None => {
                epoch = make_blocks(train, cfg.batch, cfg.block_len, &mut data_rng, true)?;
                epoch.next().expect("fresh epoch is nonempty")
            }
        };

        let mask = if use_layerdrop {
            Some(sample_mask(
                &DropSpec {
                    scheme: model_cfg.scheme.clone(),
                    rate: model_cfg.layerdrop_p,
                },
                &model_cfg,
                &mut mask_rng,
            )?)
        } else {
            None
        };
        let active = mask
            .as_ref()
            .map(|m| m.active_full_layers())
            .unwrap_or(model_cfg.n_layers);

        let mut tape = Tape::new();
        let bound = TapeModel::bind(&mut tape, &params, mask.as_ref(), Mode::Train)?;
        let mut combined: Option<crate::tape::Var> = None;
        for (inp, tgt) in batch.inputs.iter().zip(&batch.targets) {
            let logits = bound.forward(&mut tape, inp, Mode::Train, &mut drop_rng)?;
            let ce = tape.cross_entropy(logits, tgt)?;
            combined = Some(match combined {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        let sum = combined.expect("batch is nonempty");
        let loss = tape.mul_const(sum, vec![1.0 / batch.inputs.len() as f64])?;
        let loss_val = tape.value(loss).values()[0];
        if !loss_val.is_finite() {
            return Err(TrainError::Diverged {
                step,
                last_good: Box::new(last_good),
                metrics,
            });
        }
        tape.backward(loss)?;
        bound.pull_grads(&tape, &mut params);
        drop(tape);

        let mut grads = params.flatten_grads();
        clip_global_norm(&mut grads, cfg.grad_clip);
        adam_step(&mut flat, &grads, &mut adam, lr_at(step, cfg))?;
        params.load_flat(&flat)?;
        params.zero_grads();

        let step_tokens = batch.inputs.len() * cfg.block_len;
        window_loss += loss_val;
        window_active += active as f64;
        window_steps += 1;
        window_tokens += step_tokens;
        if timed_t0.is_some() {
            timed_tokens += step_tokens;
        }

        if let Some(valid) = valid {
            if step % cfg.eval_every == 0 || step == cfg.steps {
                let elapsed = window_t0.elapsed().as_secs_f64().max(1e-9);
                if let Some(t0) = timed_t0 {
                    timed_secs += t0.elapsed().as_secs_f64();
                    timed_t0 = None; // paused during validation
                }
                let ppl = perplexity(&params, valid, None)?;
                metrics.rows.push(MetricsRow {
                    step,
                    train_loss: window_loss / window_steps as f64,
                    valid_ppl: ppl,
                    tokens_per_sec: window_tokens as f64 / elapsed,
                    active_layers_mean: window_active / window_steps as f64,
                });
                last_good = params.clone();
                window_loss = 0.0;
                window_active = 0.0;
                window_steps = 0;
                window_tokens = 0;
                if step > timing_skip && step < cfg.steps {
                    timed_t0 = Some(Instant::now());
                }
                window_t0 = Instant::now();
            }
        }
    }
    if let Some(t0) = timed_t0 {
        timed_secs += t0.elapsed().as_secs_f64();
    }
    Ok(LoopOutput {
        params,
        metrics,
        timed_tokens,
        timed_secs,
    })
}

/// Train a model from scratch with LayerDrop at the config's rate.
/// Per step: sample a group mask, forward, cross-entropy, backward, clip the
/// global gradient norm, Adam update under the schedule. Validation runs
/// mask-free every `eval_every` steps.
pub fn train_lm(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Corpus,
    valid: &Corpus,
) -> TrainResult<(ModelParams, RunMetrics)> {
    model_cfg.validate_for_training()?;
    train_cfg.validate()?;
    let mut init_rng = Rng::new(train_cfg.seed).derive(0);
    let params = ModelParams::init(model_cfg, &mut init_rng)?;
    let out = run_loop(params, train_cfg, train, Some(valid), true, 0)?;
    out.metrics.validate()?;
    Ok((out.params, out.metrics))
}

/// Continue training existing parameters without structured drop, tracking
/// validation metrics. This is the finetune path for the experiment driver;
/// the model config inside `params` governs the architecture.
pub fn resume_lm(
    params: ModelParams,
    train_cfg: &TrainConfig,
    train: &Corpus,
    valid: &Corpus,
) -> TrainResult<(ModelParams, RunMetrics)> {
    params.config.validate()?;
    train_cfg.validate()?;
    let out = run_loop(params, train_cfg, train, Some(valid), false, 0)?;
    out.metrics.validate()?;
    Ok((out.params, out.metrics))
}

/// Prune to the 1-indexed keep-set and continue training without LayerDrop.
/// `steps == 0` returns the pruned parameters untouched.
pub fn finetune_pruned(
    params: &ModelParams,
    keep: &[usize],
    train: &Corpus,
    steps: usize,
    base_cfg: &TrainConfig,
) -> TrainResult<ModelParams> {
    let pruned = params.keep_layers(keep)?;
    if steps == 0 {
        return Ok(pruned);
    }
    let cfg = TrainConfig {
        steps,
        warmup_steps: steps / 10,
        ..base_cfg.clone()
    };
    let out = run_loop(pruned, &cfg, train, None, false, 0)?;
    Ok(out.params)
}

/// Wall-clock training throughput at each LayerDrop rate, everything else
/// identical. The first 10% of steps warm up the measurement and are
/// excluded from timing.
pub fn measure_throughput(
    model_cfg: &ModelConfig,
    p_values: &[f64],
    steps: usize,
) -> Result<Vec<(f64, f64)>> {
    model_cfg.validate()?;
    if steps < 10 {
        return Err(Error::config("steps", "need at least 10 steps to measure"));
    }
    let block_len = model_cfg.max_seq_len.min(64);
    let mut corpus_rng = Rng::new(0xbeef);
    let tokens: Vec<usize> = (0..block_len * 64 + 1)
        .map(|_| corpus_rng.next_below(model_cfg.vocab_size as u64) as usize)
        .collect();
    let corpus = Corpus::from_tokens(tokens, crate::data::Split::Train, "throughput probe");

    let cfg = TrainConfig {
        steps,
        batch: 1,
        block_len,
        warmup_steps: steps / 10,
        eval_every: steps + 1,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut rows = Vec::with_capacity(p_values.len());
    for &p in p_values {
        let mut mc = model_cfg.clone();
        mc.layerdrop_p = p;
        mc.validate_for_training()?;
        let params = ModelParams::init(&mc, &mut Rng::new(cfg.seed).derive(0))?;
        let out = run_loop(params, &cfg, &corpus, None, true, steps / 10)
            .map_err(Error::from)?;
        rows.push((p, out.timed_tokens as f64 / out.timed_secs.max(1e-9)));
    }
    Ok(rows)
}
