//! Command-line front end.
//!
//! Every invocation gets its own run directory under `--out-dir`, named
//! `<command>-<timestamp>-<seed>`, holding a lockfile, the artifacts, and a
//! `manifest.json` with the fully resolved config. The manifest is written
//! atomically before the run starts and again when it finishes, and can be
//! passed back via `--config` to reproduce the run.
//!
//! Exit codes: 0 ok, 1 runtime failure (divergence, I/O, failed check),
//! 2 config error (the message names the offending key).

use crate::checkpoint;
use crate::data::{Corpus, SyntheticTask};
use crate::error::{Error, Result};
use crate::eval;
use crate::gradcheck;
use crate::model::ModelConfig;
use crate::prune::{self, Half, PruneContext, PruneSpec, PruneStrategy};
use crate::rng::Rng;
use crate::structdrop::GroupScheme;
use crate::train::{self, TrainConfig, TrainError};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const VERSION: &str = concat!("layerdrop-v", env!("CARGO_PKG_VERSION"));

#[derive(Parser)]
#[command(name = "layerdrop", version, about = "LayerDrop training and pruning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, writing a checkpoint and a metrics CSV.
    Train(CommonArgs),
    /// Perplexity of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Cut a checkpoint down to a keep-set chosen by a strategy.
    Prune(PruneArgs),
    /// Multi-run experiment grids (prune curves, scheme comparisons, ...).
    Sweep(CommonArgs),
    /// Tokens/sec at several structured-drop rates.
    Bench(CommonArgs),
    /// Finite-difference check of the full backward pass.
    Gradcheck(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; a manifest.json from an earlier run also works.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. --set model.layerdrop_p=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides train.seed (and the seed recorded in the manifest).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that run directories are created under.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Accepted for interface stability; execution is single-threaded.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate (overrides eval.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to prune (overrides prune.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// every_other | keep_list | search_on_valid | data_driven | chunk | random_k
    #[arg(long)]
    strategy: Option<String>,
    /// Drop rate for every_other.
    #[arg(long)]
    p: Option<f64>,
    /// Target depth for search_on_valid, data_driven, random_k.
    #[arg(long)]
    r: Option<usize>,
    /// Comma-separated 1-indexed keep-set for keep_list.
    #[arg(long, value_delimiter = ',')]
    keep: Option<Vec<usize>>,
    /// first | last, for chunk.
    #[arg(long)]
    half: Option<String>,
    /// Candidate budget for search_on_valid.
    #[arg(long)]
    budget: Option<usize>,
    /// Where to write the pruned checkpoint (default: run dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The whole config tree. Every section has defaults, so a bare command
/// line works; unknown keys are rejected by name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalSection,
    pub prune: PruneSection,
    pub sweep: SweepSection,
    pub bench: BenchSection,
    pub gradcheck: GradcheckSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Byte-level corpus file. Mutually exclusive with `synthetic`.
    pub path: Option<PathBuf>,
    /// Built-in generator: "copy" or "zipf_bigram" (the default source).
    pub synthetic: Option<String>,
    pub size: usize,
    pub gen_seed: u64,
    pub split_fracs: (f64, f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: None,
            size: 1 << 16,
            gen_seed: 1234,
            split_fracs: (0.8, 0.1, 0.1),
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<(Corpus, Corpus, Corpus)> {
        if self.path.is_some() && self.synthetic.is_some() {
            return Err(Error::config(
                "data.path",
                "set either a corpus path or a synthetic task, not both",
            ));
        }
        if let Some(p) = &self.path {
            return crate::data::load_corpus(p, self.split_fracs);
        }
        let task = match self.synthetic.as_deref().unwrap_or("zipf_bigram") {
            "copy" => SyntheticTask::Copy,
            "zipf_bigram" => SyntheticTask::ZipfBigram,
            other => {
                return Err(Error::config(
                    "data.synthetic",
                    format!("unknown task `{}` (copy or zipf_bigram)", other),
                ))
            }
        };
        let corpus = crate::data::gen_synthetic(task, self.size, self.gen_seed)?;
        corpus.split_contiguous(self.split_fracs)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    /// 1-indexed layers to keep during evaluation; None means all.
    pub keep: Option<Vec<usize>>,
    /// "train", "valid" or "test".
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { checkpoint: None, keep: None, split: "valid".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub strategy: Option<String>,
    pub p: Option<f64>,
    pub r: Option<usize>,
    pub keep: Option<Vec<usize>>,
    pub half: Option<String>,
    pub budget: Option<usize>,
    /// Seed for random_k; defaults to the run seed.
    pub rand_seed: Option<u64>,
    /// Gate training steps for data_driven.
    pub gate_steps: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            out: None,
            strategy: None,
            p: None,
            r: None,
            keep: None,
            half: None,
            budget: None,
            rand_seed: None,
            gate_steps: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// prune_curve | drop_vs_prune | scheme_comparison | layer_importance
    pub kind: String,
    /// Checkpoint for layer_importance.
    pub checkpoint: Option<PathBuf>,
    /// Training drop rates for drop_vs_prune.
    pub train_ps: Vec<f64>,
    /// Depths to prune to; defaults to the standard grid.
    pub prune_rs: Option<Vec<usize>>,
    /// Scheme names for scheme_comparison ("layer", "head", "layer+head", ...).
    pub schemes: Vec<String>,
    /// Kept depth for layer_importance; defaults to half the layers.
    pub r: Option<usize>,
    /// Subsets averaged per layer in layer_importance.
    pub trials: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kind: "drop_vs_prune".into(),
            checkpoint: None,
            train_ps: vec![0.0, 0.2, 0.5],
            prune_rs: None,
            schemes: vec!["layer".into(), "sublayer".into(), "head".into()],
            r: None,
            trials: 35,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub p_values: Vec<f64>,
    pub steps: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { p_values: vec![0.0, 0.25, 0.5], steps: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    /// Central-difference step.
    pub h: f64,
    /// Seed for parameter init and the probe sequence.
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { h: 1e-5, seed: 15 }
    }
}

/// What one run records about itself. `config` is the fully resolved tree,
/// so feeding a manifest back through `--config` replays the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub artifacts: Vec<String>,
    pub config: Value,
}

// civil date from days since the epoch; standard era-based calculation
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719468;
    let era = if z >= 0 { z } else { z - 146096 } / 146097;
    let doe = (z - era * 146097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (y + (m <= 2) as i64, m, d)
}

fn split_epoch(secs: u64) -> (i64, u32, u32, u32, u32, u32) {
    let (y, mo, d) = civil_from_days((secs / 86400) as i64);
    let rem = secs % 86400;
    (y, mo, d, (rem / 3600) as u32, (rem % 3600 / 60) as u32, (rem % 60) as u32)
}

fn stamp_compact(secs: u64) -> String {
    let (y, mo, d, h, mi, s) = split_epoch(secs);
    format!("{:04}{:02}{:02}T{:02}{:02}{:02}Z", y, mo, d, h, mi, s)
}

fn stamp_readable(secs: u64) -> String {
    let (y, mo, d, h, mi, s) = split_epoch(secs);
    format!("{:04}-{:02}-{:02}T{:02}:{:02}:{:02}Z", y, mo, d, h, mi, s)
}

fn epoch_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// A freshly created, locked run directory and its manifest.
struct RunDir {
    path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    fn create(out_dir: &Path, command: &str, seed: u64, config: Value) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        let secs = epoch_secs();
        let base = format!("{}-{}-{}", command, stamp_compact(secs), seed);
        let mut name = base.clone();
        let mut n = 2;
        let path = loop {
            let cand = out_dir.join(&name);
            match fs::create_dir(&cand) {
                Ok(()) => break cand,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    name = format!("{}-{}", base, n);
                    n += 1;
                }
                Err(e) => return Err(e.into()),
            }
        };
        // create_new is the ownership claim: a second process in the same
        // dir fails here instead of interleaving writes
        let mut lock = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path.join(".lock"))
            .map_err(|_| {
                Error::contract(format!("run dir {} is already owned", path.display()))
            })?;
        writeln!(lock, "{}", std::process::id())?;
        let manifest = RunManifest {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
            started_at: stamp_readable(secs),
            finished_at: None,
            status: "running".into(),
            artifacts: Vec::new(),
            config,
        };
        let run = Self { path, manifest };
        run.write_manifest()?;
        Ok(run)
    }

    // temp file + rename, so a manifest is never observed half-written
    fn write_manifest(&self) -> Result<()> {
        let tmp = self.path.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)?)?;
        fs::rename(&tmp, self.path.join("manifest.json"))?;
        Ok(())
    }

    /// Register `name` as an artifact and return its path in the run dir.
    fn artifact(&mut self, name: &str) -> PathBuf {
        self.manifest.artifacts.push(name.to_string());
        self.path.join(name)
    }

    /// Record an artifact written outside the run dir (e.g. `prune --out`).
    fn external_artifact(&mut self, path: &Path) {
        self.manifest.artifacts.push(path.display().to_string());
    }

    fn finish(&mut self, status: &str) -> Result<()> {
        self.manifest.finished_at = Some(stamp_readable(epoch_secs()));
        self.manifest.status = status.to_string();
        self.write_manifest()
    }
}

fn finish_run<T>(run: &mut RunDir, res: Result<T>) -> Result<T> {
    match &res {
        Ok(_) => run.finish("ok")?,
        Err(e) => run.finish(&format!("failed: {}", e))?,
    }
    res
}

/// Set `dotted` (e.g. "model.layerdrop_p") to `raw` inside a JSON tree.
/// The value is parsed as JSON when possible and kept as a string otherwise.
fn set_path(root: &mut Value, dotted: &str, raw: &str) -> Result<()> {
    if dotted.is_empty() {
        return Err(Error::config("--set", "empty key"));
    }
    let parsed: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = dotted.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::config(dotted, format!("`{}` is not an object", p))
        })?;
        cur = obj.entry(p.to_string()).or_insert_with(|| json!({}));
    }
    let last = parts[parts.len() - 1];
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::config(dotted, "path ends inside a non-object"))?;
    obj.insert(last.to_string(), parsed);
    Ok(())
}

struct Resolved {
    cfg: RunConfig,
    /// The resolved tree (all defaults applied), as stored in the manifest.
    json: Value,
    /// What the user actually wrote, before defaults.
    raw: Value,
    seed: u64,
}

fn resolve(common: &CommonArgs) -> Result<Resolved> {
    let mut value: Value = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::config("config", format!("cannot read {}: {}", p.display(), e))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config("config", format!("{}: {}", p.display(), e)))?
        }
        None => json!({}),
    };
    // a manifest passed as config replays its resolved run
    let mut manifest_seed = None;
    if value.get("command").is_some() && value.get("config").is_some() {
        manifest_seed = value.get("seed").and_then(Value::as_u64);
        value = value["config"].take();
    }
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item.clone(), "--set expects key=value"))?;
        set_path(&mut value, k, v)?;
    }
    let raw = value.clone();
    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
    if let Some(seed) = common.seed.or(manifest_seed) {
        cfg.train.seed = seed;
    }
    let seed = cfg.train.seed;
    let json = serde_json::to_value(&cfg)?;
    Ok(Resolved { cfg, json, raw, seed })
}

fn note_threads(common: &CommonArgs) {
    if common.threads != 1 {
        eprintln!(
            "--threads {} requested; kernels run single-threaded for bit-reproducibility",
            common.threads
        );
    }
}

pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let argv = std::iter::once("layerdrop".to_string()).chain(args);
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let res = match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Prune(a) => cmd_prune(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match res {
        Ok(()) => 0,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {}", e);
            2
        }
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    }
}

fn cmd_train(a: &CommonArgs) -> Result<()> {
    note_threads(a);
    let r = resolve(a)?;
    // with an init checkpoint the architecture comes from the checkpoint,
    // so the model section is left alone
    let init = match &r.cfg.train.init_checkpoint {
        Some(path) => Some(checkpoint::load(path)?),
        None => {
            r.cfg.model.validate_for_training()?;
            None
        }
    };
    r.cfg.train.validate()?;
    let (train_c, valid_c, _) = r.cfg.data.load()?;
    let mut run = RunDir::create(&a.out_dir, "train", r.seed, r.json)?;
    let outcome = match init {
        Some(params) => train::resume_lm(params, &r.cfg.train, &train_c, &valid_c),
        None => train::train_lm(&r.cfg.model, &r.cfg.train, &train_c, &valid_c),
    };
    match outcome {
        Ok((params, metrics)) => {
            checkpoint::save(&params, &run.artifact("final.ckpt"))?;
            fs::write(run.artifact("metrics.csv"), metrics.to_csv())?;
            run.finish("ok")?;
            if let Some(last) = metrics.rows.last() {
                println!(
                    "step {} train_loss {:.4} valid_ppl {:.4}",
                    last.step, last.train_loss, last.valid_ppl
                );
            }
            println!("run dir: {}", run.path.display());
            Ok(())
        }
        Err(TrainError::Diverged { step, last_good, metrics }) => {
            // keep what we can: the last finite snapshot and the metrics so far
            checkpoint::save(&last_good, &run.artifact("rescue.ckpt"))?;
            fs::write(run.artifact("metrics.csv"), metrics.to_csv())?;
            run.finish(&format!("failed: diverged at step {}", step))?;
            Err(Error::Diverged { step })
        }
        Err(TrainError::Other(e)) => {
            run.finish(&format!("failed: {}", e))?;
            Err(e)
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    note_threads(&a.common);
    let mut r = resolve(&a.common)?;
    if let Some(p) = &a.checkpoint {
        r.cfg.eval.checkpoint = Some(p.clone());
        r.json = serde_json::to_value(&r.cfg)?;
    }
    let ckpt = r.cfg.eval.checkpoint.clone().ok_or_else(|| {
        Error::config("eval.checkpoint", "no checkpoint given (--checkpoint or config)")
    })?;
    let params = checkpoint::load(&ckpt)?;
    let (train_c, valid_c, test_c) = r.cfg.data.load()?;
    let corpus = match r.cfg.eval.split.as_str() {
        "train" => train_c,
        "valid" => valid_c,
        "test" => test_c,
        other => {
            return Err(Error::config(
                "eval.split",
                format!("unknown split `{}` (train, valid or test)", other),
            ))
        }
    };
    let mut run = RunDir::create(&a.common.out_dir, "eval", r.seed, r.json)?;
    let res = (|| {
        let ppl = eval::perplexity(&params, &corpus, r.cfg.eval.keep.as_deref())?;
        let report = json!({
            "checkpoint": ckpt.display().to_string(),
            "split": r.cfg.eval.split,
            "keep": r.cfg.eval.keep,
            "n_layers": params.config.n_layers,
            "ppl": ppl,
        });
        fs::write(run.artifact("eval.json"), serde_json::to_string_pretty(&report)?)?;
        println!("ppl {}", ppl);
        Ok(())
    })();
    finish_run(&mut run, res)
}

fn build_strategy(sec: &crate::cli::PruneSection, run_seed: u64) -> Result<PruneStrategy> {
    let name = sec.strategy.as_deref().ok_or_else(|| {
        Error::config(
            "prune.strategy",
            "missing; one of every_other, keep_list, search_on_valid, data_driven, chunk, random_k",
        )
    })?;
    let need_r = |what: &str| {
        sec.r
            .ok_or_else(|| Error::config("prune.r", format!("{} needs a target depth r", what)))
    };
    Ok(match name {
        "every_other" => PruneStrategy::EveryOther {
            p: sec
                .p
                .ok_or_else(|| Error::config("prune.p", "every_other needs a drop rate p"))?,
        },
        "keep_list" => PruneStrategy::KeepList {
            keep: sec
                .keep
                .clone()
                .ok_or_else(|| Error::config("prune.keep", "keep_list needs a keep-set"))?,
        },
        "search_on_valid" => PruneStrategy::SearchOnValid {
            r: need_r("search_on_valid")?,
            budget: sec.budget.unwrap_or(64),
        },
        "data_driven" => PruneStrategy::DataDriven { r: need_r("data_driven")? },
        "chunk" => {
            let half = match sec.half.as_deref() {
                Some("first") | Some("first_half") => Half::FirstHalf,
                Some("last") | Some("last_half") => Half::LastHalf,
                Some(other) => {
                    return Err(Error::config(
                        "prune.half",
                        format!("unknown half `{}` (first or last)", other),
                    ))
                }
                None => return Err(Error::config("prune.half", "chunk needs first or last")),
            };
            PruneStrategy::Chunk { half }
        }
        "random_k" => PruneStrategy::RandomK {
            r: need_r("random_k")?,
            seed: sec.rand_seed.unwrap_or(run_seed),
        },
        other => {
            return Err(Error::config(
                "prune.strategy",
                format!("unknown strategy `{}`", other),
            ))
        }
    })
}

fn cmd_prune(a: &PruneArgs) -> Result<()> {
    note_threads(&a.common);
    let mut r = resolve(&a.common)?;
    let sec = &mut r.cfg.prune;
    if let Some(v) = &a.checkpoint {
        sec.checkpoint = Some(v.clone());
    }
    if let Some(v) = &a.strategy {
        sec.strategy = Some(v.clone());
    }
    if let Some(v) = a.p {
        sec.p = Some(v);
    }
    if let Some(v) = a.r {
        sec.r = Some(v);
    }
    if let Some(v) = &a.keep {
        sec.keep = Some(v.clone());
    }
    if let Some(v) = &a.half {
        sec.half = Some(v.clone());
    }
    if let Some(v) = a.budget {
        sec.budget = Some(v);
    }
    if let Some(v) = &a.out {
        sec.out = Some(v.clone());
    }
    r.json = serde_json::to_value(&r.cfg)?;

    let ckpt = r.cfg.prune.checkpoint.clone().ok_or_else(|| {
        Error::config("prune.checkpoint", "no checkpoint given (--checkpoint or config)")
    })?;
    let strategy = build_strategy(&r.cfg.prune, r.seed)?;
    let params = checkpoint::load(&ckpt)?;
    // corpora are only materialised for the strategies that look at data
    let needs_data = matches!(
        strategy,
        PruneStrategy::SearchOnValid { .. } | PruneStrategy::DataDriven { .. }
    );
    let corpora = if needs_data { Some(r.cfg.data.load()?) } else { None };

    let mut run = RunDir::create(&a.common.out_dir, "prune", r.seed, r.json.clone())?;
    let out_path = match &r.cfg.prune.out {
        Some(p) => {
            run.external_artifact(p);
            p.clone()
        }
        None => run.artifact("pruned.ckpt"),
    };
    let res = (|| {
        let ctx = PruneContext {
            valid: corpora.as_ref().map(|c| &c.1),
            train: corpora.as_ref().map(|c| &c.0),
            gate_steps: r.cfg.prune.gate_steps,
            seed: r.seed,
        };
        let spec = PruneSpec { strategy: strategy.clone() };
        let keep = spec.resolve(&params, &ctx)?;
        let pruned = prune::prune_model(&params, &keep)?;
        checkpoint::save(&pruned, &out_path)?;
        let report = json!({
            "checkpoint": ckpt.display().to_string(),
            "strategy": spec,
            "keep": keep,
            "depth_before": params.config.n_layers,
            "depth_after": pruned.config.n_layers,
            "params_before": params.count(),
            "params_after": pruned.count(),
        });
        fs::write(run.artifact("keep.json"), serde_json::to_string_pretty(&report)?)?;
        println!("keep {:?} -> {}", keep, out_path.display());
        Ok(())
    })();
    finish_run(&mut run, res)
}

fn parse_scheme(name: &str) -> Result<GroupScheme> {
    let atoms: Vec<&str> = name.split('+').map(str::trim).collect();
    let atom = |s: &str| -> Result<GroupScheme> {
        Ok(match s {
            "layer" => GroupScheme::Layer,
            "sublayer" => GroupScheme::SubLayer,
            "head" => GroupScheme::Head,
            "ffn_matrix" => GroupScheme::FFNMatrix,
            "weight_level" => GroupScheme::WeightLevel,
            other => {
                return Err(Error::config(
                    "sweep.schemes",
                    format!("unknown scheme `{}`", other),
                ))
            }
        })
    };
    if atoms.len() == 1 {
        atom(atoms[0])
    } else {
        Ok(GroupScheme::Composite(
            atoms.into_iter().map(atom).collect::<Result<Vec<_>>>()?,
        ))
    }
}

fn cmd_sweep(a: &CommonArgs) -> Result<()> {
    note_threads(a);
    let r = resolve(a)?;
    let cfg = &r.cfg;
    let kind = cfg.sweep.kind.clone();
    let mut run = RunDir::create(&a.out_dir, "sweep", r.seed, r.json.clone())?;
    let res = (|| {
        let csv_name = match kind.as_str() {
            "prune_curve" => {
                if !(cfg.model.layerdrop_p > 0.0) {
                    return Err(Error::config(
                        "model.layerdrop_p",
                        "prune_curve needs a positive training drop rate",
                    ));
                }
                let (train_c, valid_c, _) = cfg.data.load()?;
                println!("training with structured drop p={}", cfg.model.layerdrop_p);
                let (ld, _) = train::train_lm(&cfg.model, &cfg.train, &train_c, &valid_c)
                    .map_err(Error::from)?;
                let mut base_cfg = cfg.model.clone();
                base_cfg.layerdrop_p = 0.0;
                println!("training baseline p=0");
                let (bl, _) = train::train_lm(&base_cfg, &cfg.train, &train_c, &valid_c)
                    .map_err(Error::from)?;
                let grid = eval::depth_grid(cfg.model.n_layers);
                let mut scratch = Vec::new();
                let seed_rng = Rng::new(cfg.train.seed);
                for &depth in &grid {
                    if depth == cfg.model.n_layers {
                        continue;
                    }
                    println!("training {}-layer model from scratch", depth);
                    let mut sc = base_cfg.clone();
                    sc.n_layers = depth;
                    let mut tc = cfg.train.clone();
                    tc.seed = seed_rng.derive(depth as u64).next_u64();
                    let (m, _) =
                        train::train_lm(&sc, &tc, &train_c, &valid_c).map_err(Error::from)?;
                    scratch.push(m);
                }
                checkpoint::save(&ld, &run.artifact("layerdrop.ckpt"))?;
                checkpoint::save(&bl, &run.artifact("baseline.ckpt"))?;
                let result = eval::prune_curve(&ld, &bl, &scratch, &valid_c)?;
                fs::write(run.artifact("prune_curve.csv"), result.to_csv())?;
                "prune_curve.csv"
            }
            "drop_vs_prune" => {
                let (train_c, valid_c, _) = cfg.data.load()?;
                let rs = cfg
                    .sweep
                    .prune_rs
                    .clone()
                    .unwrap_or_else(|| eval::depth_grid(cfg.model.n_layers));
                let result = eval::drop_vs_prune_grid(
                    &cfg.sweep.train_ps,
                    &rs,
                    &cfg.model,
                    &cfg.train,
                    &train_c,
                    &valid_c,
                )?;
                fs::write(run.artifact("drop_vs_prune.csv"), result.to_csv())?;
                "drop_vs_prune.csv"
            }
            "scheme_comparison" => {
                let (train_c, valid_c, _) = cfg.data.load()?;
                let schemes = cfg
                    .sweep
                    .schemes
                    .iter()
                    .map(|s| parse_scheme(s))
                    .collect::<Result<Vec<_>>>()?;
                let result = eval::scheme_comparison(
                    &schemes,
                    &cfg.model,
                    &cfg.train,
                    &train_c,
                    &valid_c,
                )?;
                for (check, held) in eval::scheme_soft_checks(&result) {
                    println!("note: {}: {}", check, if held { "held" } else { "did not hold" });
                }
                fs::write(run.artifact("scheme_comparison.csv"), result.to_csv())?;
                "scheme_comparison.csv"
            }
            "layer_importance" => {
                let ckpt = cfg.sweep.checkpoint.clone().ok_or_else(|| {
                    Error::config("sweep.checkpoint", "layer_importance needs a checkpoint")
                })?;
                let params = checkpoint::load(&ckpt)?;
                let (_, valid_c, _) = cfg.data.load()?;
                let n = params.config.n_layers;
                let r_depth = cfg.sweep.r.unwrap_or_else(|| (n / 2).max(1));
                let mut rng = Rng::new(r.seed).derive(0x1337);
                let rows = prune::layer_importance_sweep(
                    &params,
                    &valid_c,
                    r_depth,
                    cfg.sweep.trials,
                    &mut rng,
                )?;
                fs::write(run.artifact("importance.csv"), prune::importance_csv(&rows))?;
                "importance.csv"
            }
            other => {
                return Err(Error::config(
                    "sweep.kind",
                    format!(
                        "unknown kind `{}` (prune_curve, drop_vs_prune, scheme_comparison, layer_importance)",
                        other
                    ),
                ))
            }
        };
        println!("wrote {}", run.path.join(csv_name).display());
        Ok(())
    })();
    finish_run(&mut run, res)
}

fn cmd_bench(a: &CommonArgs) -> Result<()> {
    note_threads(a);
    let r = resolve(a)?;
    let mut run = RunDir::create(&a.out_dir, "bench", r.seed, r.json.clone())?;
    let res = (|| {
        let rows =
            train::measure_throughput(&r.cfg.model, &r.cfg.bench.p_values, r.cfg.bench.steps)?;
        let mut csv = String::from("p,tokens_per_sec\n");
        for (p, tps) in &rows {
            println!("p={} {:.1} tokens/sec", p, tps);
            csv.push_str(&format!("{},{}\n", p, tps));
        }
        fs::write(run.artifact("bench.csv"), csv)?;
        let base = rows.iter().find(|(p, _)| *p == 0.0).map(|&(_, t)| t);
        if let (Some(b), Some(&(p, t))) =
            (base, rows.iter().filter(|(p, _)| *p > 0.0).last())
        {
            println!("speedup at p={}: {:.2}x", p, t / b);
        }
        Ok(())
    })();
    finish_run(&mut run, res)
}

fn cmd_gradcheck(a: &CommonArgs) -> Result<()> {
    note_threads(a);
    let mut r = resolve(a)?;
    // small fixed model unless the config explicitly sets one; checking
    // every coordinate of a big model would take minutes for no extra signal
    let model_given = r
        .raw
        .get("model")
        .and_then(Value::as_object)
        .is_some_and(|o| !o.is_empty());
    if !model_given {
        r.cfg.model = ModelConfig {
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
        r.json = serde_json::to_value(&r.cfg)?;
    }
    let mut run = RunDir::create(&a.out_dir, "gradcheck", r.seed, r.json.clone())?;
    let res = (|| {
        let err =
            gradcheck::model_grad_check(&r.cfg.model, r.cfg.gradcheck.seed, r.cfg.gradcheck.h)?;
        println!("max relative gradient error: {:.3e}", err);
        let pass = err < 1e-4;
        let report = json!({
            "h": r.cfg.gradcheck.h,
            "seed": r.cfg.gradcheck.seed,
            "max_rel_err": err,
            "threshold": 1e-4,
            "pass": pass,
        });
        fs::write(run.artifact("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
        if pass {
            println!("ok");
            Ok(())
        } else {
            Err(Error::contract(format!(
                "gradient check failed: {:.3e} >= 1e-4",
                err
            )))
        }
    })();
    finish_run(&mut run, res)
}
