//! Inference-time layer selection: the Every Other rule, validation search,
//! learned gates, chunk and random baselines, plus physical model shrinking.

use crate::data::{make_blocks, Corpus};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{Mode, ModelConfig, ModelParams, TapeModel};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Half {
    FirstHalf,
    LastHalf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum PruneStrategy {
    EveryOther { p: f64 },
    KeepList { keep: Vec<usize> },
    SearchOnValid { r: usize, budget: usize },
    DataDriven { r: usize },
    Chunk { half: Half },
    RandomK { r: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub strategy: PruneStrategy,
}

/// Keep layers at depths not divisible by k = floor(1/p), 1-indexed.
pub fn every_other_keep(n: usize, p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config("p", "drop rate must lie strictly in (0, 1)"));
    }
    // tolerance so p = 1/k computed in floating point still floors to k
    let k = (1.0 / p + 1e-9).floor() as usize;
    if k < 2 {
        return Err(Error::config(
            "p",
            "floor(1/p) must be at least 2 or every layer would be dropped",
        ));
    }
    Ok((1..=n).filter(|d| d % k != 0).collect())
}

/// p* = 1 - r/N: the training drop rate whose Every Other prune lands on
/// depth r.
pub fn optimal_drop_rate(r: usize, n: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::config("r", "target depth must be at least 1"));
    }
    if r > n {
        return Err(Error::config("r", "target depth cannot exceed the layer count"));
    }
    Ok(1.0 - r as f64 / n as f64)
}

/// Physically shrink the model to the kept layers, in original order.
/// Eval logits match a masked forward of the full model bit for bit.
pub fn prune_model(params: &ModelParams, keep: &[usize]) -> Result<ModelParams> {
    if keep.is_empty() {
        return Err(Error::config("keep", "keep-set must be nonempty"));
    }
    params.keep_layers(keep)
}

/// C(n, r), saturating at u64::MAX.
pub fn binomial(n: usize, r: usize) -> u64 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(r);
    fn rec(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for d in start..=n {
            cur.push(d);
            rec(d + 1, n, r, cur, out);
            cur.pop();
        }
    }
    rec(1, n, r, &mut cur, &mut out);
    out
}

fn sample_subset(n: usize, r: usize, rng: &mut Rng) -> Vec<usize> {
    // partial Fisher-Yates over the depth labels
    let mut pool: Vec<usize> = (1..=n).collect();
    for i in 0..r {
        let j = i + rng.next_below((n - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut keep = pool[..r].to_vec();
    keep.sort_unstable();
    keep
}

/// Evaluate r-layer subsets on the validation corpus: exhaustively when
/// C(N, r) fits in the budget, otherwise over `budget` distinct sampled
/// subsets. Returns the best keep-set and its perplexity; ties go to the
/// lexicographically smallest keep-set.
pub fn search_on_valid(
    params: &ModelParams,
    valid: &Corpus,
    r: usize,
    budget: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, f64)> {
    let n = params.config.n_layers;
    if r == 0 || r > n {
        return Err(Error::config("r", "target depth must lie in [1, N]"));
    }
    if budget == 0 {
        return Err(Error::config("budget", "must be at least 1"));
    }
    let total = binomial(n, r);
    let mut candidates: Vec<Vec<usize>> = if total <= budget as u64 {
        combinations(n, r)
    } else {
        let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(budget);
        while seen.len() < budget {
            seen.insert(sample_subset(n, r, rng));
        }
        seen.into_iter().collect()
    };
    candidates.sort();

    let mut best: Option<(Vec<usize>, f64)> = None;
    for keep in candidates {
        let ppl = perplexity(params, valid, Some(&keep))?;
        let better = match &best {
            None => true,
            Some((_, b)) => ppl < *b,
        };
        if better {
            best = Some((keep, ppl));
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Keep-set of exactly r layers: the Every Other rule whenever its optimal
/// rate lands on r, otherwise evenly spaced depths (the formula cannot
/// reach r < N/2, where floor(1/p) collapses to 1).
pub fn depth_keep(n: usize, r: usize) -> Result<Vec<usize>> {
    if r == 0 || r > n {
        return Err(Error::config("r", "target depth must lie in [1, N]"));
    }
    if r == n {
        return Ok((1..=n).collect());
    }
    let p = 1.0 - r as f64 / n as f64;
    if let Ok(keep) = every_other_keep(n, p) {
        if keep.len() == r {
            return Ok(keep);
        }
    }
    Ok((1..=r).map(|i| ((2 * i - 1) * n).div_ceil(2 * r)).collect())
}

/// Drop the named half, keeping the extra layer when N is odd.
pub fn chunk_keep(n: usize, which: Half) -> Vec<usize> {
    let drop = n / 2;
    match which {
        Half::FirstHalf => (drop + 1..=n).collect(),
        Half::LastHalf => (1..=n - drop).collect(),
    }
}

/// One uniformly sampled r-subset of the depths, sorted.
pub fn random_keep(n: usize, r: usize, seed: u64) -> Result<Vec<usize>> {
    if r == 0 || r > n {
        return Err(Error::config("r", "target depth must lie in [1, N]"));
    }
    Ok(sample_subset(n, r, &mut Rng::new(seed)))
}

const GATE_HIDDEN: usize = 8;

/// Per-layer drop-rate gates: score_d = w2 . tanh(pooled_d w1 + b1) + b2
/// over the mean-pooled layer output, sigmoid(score_d) its keep-probability.
#[derive(Debug, Clone)]
pub struct GateLayer {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct GateParams {
    pub layers: Vec<GateLayer>,
    pub target_p: f64,
}

impl GateParams {
    /// Zero-score initialization: w2 = b2 = 0 makes every layer's score
    /// exactly 0 (uniform softmax) while leaving w2/b2 trainable.
    pub fn init(cfg: &ModelConfig, target_p: f64, seed: u64) -> Result<GateParams> {
        if !(0.0..1.0).contains(&target_p) {
            return Err(Error::config("target_p", "must lie in [0, 1)"));
        }
        let d = cfg.d_model;
        let mut rng = Rng::new(seed).derive(0x6a7e);
        let bound = (6.0 / (d + GATE_HIDDEN) as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| GateLayer {
                w1: Tensor::uniform(vec![d, GATE_HIDDEN], -bound, bound, &mut rng),
                b1: Tensor::zeros(vec![1, GATE_HIDDEN]),
                w2: Tensor::zeros(vec![GATE_HIDDEN, 1]),
                b2: Tensor::zeros(vec![1, 1]),
            })
            .collect();
        Ok(GateParams {
            layers,
            target_p,
        })
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for l in &mut self.layers {
            f(&mut l.w1);
            f(&mut l.b1);
            f(&mut l.w2);
            f(&mut l.b2);
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.w1.values());
            out.extend_from_slice(l.b1.values());
            out.extend_from_slice(l.w2.values());
            out.extend_from_slice(l.b2.values());
        }
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |t| {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len());
    }
}

struct GatedPass {
    logits: Var,
    scores: Vec<Var>,
    keeps: Vec<Var>,
    gate_vars: Vec<[Var; 4]>,
}

/// Forward with every layer's residual branch scaled by its relaxed
/// keep-probability: h <- h + sigmoid(score_d) * (layer_d(h) - h).
fn gated_forward(
    tape: &mut Tape,
    bound: &TapeModel,
    gates: &GateParams,
    tokens: &[usize],
) -> Result<GatedPass> {
    let mut rng = Rng::new(0); // eval mode draws nothing
    let gate_vars: Vec<[Var; 4]> = gates
        .layers
        .iter()
        .map(|l| {
            [
                tape.leaf(&l.w1),
                tape.leaf(&l.b1),
                tape.leaf(&l.w2),
                tape.leaf(&l.b2),
            ]
        })
        .collect();

    let mut h = bound.embed(tape, tokens)?;
    let mut scores = Vec::with_capacity(gates.layers.len());
    let mut keeps = Vec::with_capacity(gates.layers.len());
    for (i, vars) in gate_vars.iter().enumerate() {
        let out = bound.apply_layer(tape, i, h, Mode::Eval, &mut rng)?;
        let pooled = tape.mean_rows(out);
        let pre = tape.matmul(pooled, vars[0])?;
        let pre = tape.add(pre, vars[1])?;
        let hidden = tape.tanh(pre);
        let score = tape.matmul(hidden, vars[2])?;
        let score = tape.add(score, vars[3])?;
        let keep = tape.sigmoid(score);
        let delta = tape.sub(out, h)?;
        let scaled = tape.scale(delta, keep)?;
        h = tape.add(h, scaled)?;
        scores.push(score);
        keeps.push(keep);
    }
    let logits = bound.project_out(tape, h)?;
    Ok(GatedPass {
        logits,
        scores,
        keeps,
        gate_vars,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GateTrainOpts {
    /// Weight of the average-rate penalty term.
    pub lambda: f64,
    pub lr: f64,
    pub block_len: usize,
}

impl Default for GateTrainOpts {
    fn default() -> GateTrainOpts {
        GateTrainOpts {
            lambda: 10.0,
            lr: 1e-2,
            block_len: 64,
        }
    }
}

/// Train the gates on a frozen base model: LM loss through the relaxed
/// forward plus lambda * (mean_d drop_d - target_p)^2 tying the average
/// drop rate to the target.
pub fn train_gates(
    params: &ModelParams,
    train: &Corpus,
    target_p: f64,
    steps: usize,
    seed: u64,
) -> Result<GateParams> {
    train_gates_with(params, train, target_p, steps, seed, &GateTrainOpts::default())
}

pub fn train_gates_with(
    params: &ModelParams,
    train: &Corpus,
    target_p: f64,
    steps: usize,
    seed: u64,
    opts: &GateTrainOpts,
) -> Result<GateParams> {
    params.config.validate()?;
    let mut gates = GateParams::init(&params.config, target_p, seed)?;
    if steps == 0 {
        return Ok(gates);
    }
    let block_len = opts.block_len.min(params.config.max_seq_len);
    let mut data_rng = Rng::new(seed).derive(1);
    let mut epoch = make_blocks(train, 1, block_len, &mut data_rng, true)?;

    let mut flat = gates.flatten();
    let mut adam = crate::train::AdamState::new(flat.len(), 0.9, 0.98, 1e-8);
    let n = params.config.n_layers as f64;

    for step in 1..=steps {
        let batch = match epoch.next() {
            Some(b) => b,
            None => {
                epoch = make_blocks(train, 1, block_len, &mut data_rng, true)?;
                epoch.next().expect("fresh epoch is nonempty")
            }
        };
        let mut tape = Tape::new();
        let bound = TapeModel::bind(&mut tape, params, None, Mode::Eval)?;
        let pass = gated_forward(&mut tape, &bound, &gates, &batch.inputs[0])?;
        let ce = tape.cross_entropy(pass.logits, &batch.targets[0])?;

        // mean_d (1 - keep_d) as a tape expression
        let one = tape.leaf(&Tensor::new(vec![1, 1], vec![1.0]));
        let mut drop_sum: Option<Var> = None;
        for &keep in &pass.keeps {
            let d = tape.sub(one, keep)?;
            drop_sum = Some(match drop_sum {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
        let mean_drop = tape.mul_const(drop_sum.expect("n_layers >= 1"), vec![1.0 / n])?;
        let target = tape.leaf(&Tensor::new(vec![1, 1], vec![target_p]));
        let diff = tape.sub(mean_drop, target)?;
        let sq = tape.mul(diff, diff)?;
        let penalty = tape.mul_const(sq, vec![opts.lambda])?;
        let penalty = tape.sum(penalty); // to scalar shape, matching ce
        let loss = tape.add(ce, penalty)?;

        let loss_val = tape.value(loss).values()[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged { step });
        }
        tape.backward(loss)?;

        let mut grads = Vec::with_capacity(flat.len());
        for vars in &pass.gate_vars {
            for &v in vars {
                grads.extend_from_slice(tape.grad(v));
            }
        }
        crate::train::clip_global_norm(&mut grads, 1.0);
        // cosine decay to 0: Adam's step size, not the penalty weight, sets
        // how tightly the rate constraint is met at the end
        let lr = opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * (step - 1) as f64 / steps as f64).cos());
        crate::train::adam_step(&mut flat, &grads, &mut adam, lr)?;
        gates.load_flat(&flat);
    }
    Ok(gates)
}

/// Mean gate score per layer over the probe corpus, via the gated forward.
pub fn gate_scores(params: &ModelParams, gates: &GateParams, probe: &Corpus) -> Result<Vec<f64>> {
    let n = params.config.n_layers;
    if gates.layers.len() != n {
        return Err(Error::contract(format!(
            "{} gates for a {}-layer model",
            gates.layers.len(),
            n
        )));
    }
    let block_len = params.config.max_seq_len;
    let mut rng = Rng::new(0);
    let mut sums = vec![0.0; n];
    let mut blocks = 0usize;
    for batch in make_blocks(probe, 1, block_len, &mut rng, false)? {
        let mut tape = Tape::new();
        let bound = TapeModel::bind(&mut tape, params, None, Mode::Eval)?;
        let pass = gated_forward(&mut tape, &bound, gates, &batch.inputs[0])?;
        for (d, &s) in pass.scores.iter().enumerate() {
            sums[d] += tape.value(s).values()[0];
        }
        blocks += 1;
    }
    if blocks == 0 {
        return Err(Error::Corpus("probe corpus has no complete blocks".into()));
    }
    Ok(sums.iter().map(|s| s / blocks as f64).collect())
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Keep the r layers with the highest softmax-normalized mean scores over
/// the probe set; ties break toward lower depth. The selection is fixed
/// thereafter and does not depend on later inputs.
pub fn select_topk_gates(
    params: &ModelParams,
    gates: &GateParams,
    probe: &Corpus,
    r: usize,
) -> Result<Vec<usize>> {
    let n = params.config.n_layers;
    if r == 0 || r > n {
        return Err(Error::config("r", "target depth must lie in [1, N]"));
    }
    let scores = gate_scores(params, gates, probe)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("gate scores must be finite"));
    }
    let probs = softmax(&scores);
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::contract(format!(
            "softmax normalization drifted: sum {total}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order[..r].iter().map(|&i| i + 1).collect();
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRow {
    pub layer: usize,
    pub mean_ppl: f64,
    pub trials: usize,
}

/// For each layer n: mean validation perplexity over r-subsets constrained
/// to drop n. Exhausts all C(N-1, r) subsets when trials covers them,
/// otherwise draws `trials` independent subsets.
pub fn layer_importance_sweep(
    params: &ModelParams,
    valid: &Corpus,
    r: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<Vec<ImportanceRow>> {
    let n = params.config.n_layers;
    if r == 0 || r >= n {
        return Err(Error::config("r", "need 1 <= r < N so a layer can be dropped"));
    }
    if trials == 0 {
        return Err(Error::config("trials", "must be at least 1"));
    }
    let exhaustive_count = binomial(n - 1, r);
    let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut rows = Vec::with_capacity(n);
    for dropped in 1..=n {
        let others: Vec<usize> = (1..=n).filter(|&d| d != dropped).collect();
        let subsets: Vec<Vec<usize>> = if trials as u64 >= exhaustive_count {
            combinations(n - 1, r)
                .into_iter()
                .map(|ix| ix.iter().map(|&i| others[i - 1]).collect())
                .collect()
        } else {
            (0..trials)
                .map(|_| {
                    let ix = sample_subset(n - 1, r, rng);
                    ix.iter().map(|&i| others[i - 1]).collect()
                })
                .collect()
        };
        let mut sum = 0.0;
        for keep in &subsets {
            let ppl = match cache.get(keep) {
                Some(&p) => p,
                None => {
                    let p = perplexity(params, valid, Some(keep))?;
                    cache.insert(keep.clone(), p);
                    p
                }
            };
            sum += ppl;
        }
        rows.push(ImportanceRow {
            layer: dropped,
            mean_ppl: sum / subsets.len() as f64,
            trials: subsets.len(),
        });
    }
    Ok(rows)
}

pub fn importance_csv(rows: &[ImportanceRow]) -> String {
    let mut out = String::from("layer,mean_ppl,trials\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.layer, r.mean_ppl, r.trials));
    }
    out
}

/// Everything a strategy might need to produce a keep-set.
pub struct PruneContext<'a> {
    pub valid: Option<&'a Corpus>,
    pub train: Option<&'a Corpus>,
    pub gate_steps: usize,
    pub seed: u64,
}

impl PruneSpec {
    /// Turn the strategy into a concrete keep-set for this model.
    pub fn resolve(&self, params: &ModelParams, ctx: &PruneContext) -> Result<Vec<usize>> {
        let n = params.config.n_layers;
        let need_valid = || {
            ctx.valid
                .ok_or_else(|| Error::config("valid", "strategy needs a validation corpus"))
        };
        match &self.strategy {
            PruneStrategy::EveryOther { p } => every_other_keep(n, *p),
            PruneStrategy::KeepList { keep } => {
                if keep.is_empty() {
                    return Err(Error::config("keep", "keep-set must be nonempty"));
                }
                for w in keep.windows(2) {
                    if w[1] <= w[0] {
                        return Err(Error::config("keep", "indices must strictly increase"));
                    }
                }
                if keep[0] < 1 || *keep.last().unwrap() > n {
                    return Err(Error::config("keep", "indices must lie in [1, N]"));
                }
                Ok(keep.clone())
            }
            PruneStrategy::SearchOnValid { r, budget } => {
                let mut rng = Rng::new(ctx.seed);
                Ok(search_on_valid(params, need_valid()?, *r, *budget, &mut rng)?.0)
            }
            PruneStrategy::DataDriven { r } => {
                let train = ctx
                    .train
                    .ok_or_else(|| Error::config("train", "gate training needs a train corpus"))?;
                let target_p = optimal_drop_rate(*r, n)?;
                let gates = train_gates(params, train, target_p, ctx.gate_steps, ctx.seed)?;
                select_topk_gates(params, &gates, need_valid()?, *r)
            }
            PruneStrategy::Chunk { half } => Ok(chunk_keep(n, *half)),
            PruneStrategy::RandomK { r, seed } => random_keep(n, *r, *seed),
        }
    }
}
