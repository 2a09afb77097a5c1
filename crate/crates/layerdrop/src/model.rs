//! Decoder-only causal transformer built on the tape, with structured-drop
//! gating at every group boundary.
//!
//! The forward pass takes an optional [`GroupMask`]; a fully dropped layer is
//! an exact identity on the hidden state (its tape ops are never emitted, so
//! dropped layers also cost nothing). Dropped heads and FFN blocks contribute
//! exact zeros instead.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::structdrop::{GroupMask, GroupScheme, MatrixKind, Slot};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Standard (unstructured) dropout on sub-layer outputs, train mode only.
    pub dropout: f64,
    /// Structured drop rate applied to `scheme`'s groups during training.
    pub layerdrop_p: f64,
    pub scheme: GroupScheme,
}

/// Desk-scale defaults; partial configs fill in from here.
impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab_size: 256,
            max_seq_len: 64,
            dropout: 0.0,
            layerdrop_p: 0.0,
            scheme: GroupScheme::Layer,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be positive"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be positive"));
        }
        if self.n_heads == 0 {
            return Err(Error::config("n_heads", "must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "d_model",
                format!(
                    "{} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if self.d_ffn == 0 {
            return Err(Error::config("d_ffn", "must be positive"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.layerdrop_p) {
            return Err(Error::config("layerdrop_p", "must be in [0, 1]"));
        }
        self.scheme.validate()?;
        Ok(())
    }

    /// Training additionally requires layerdrop_p < 1: a model that always
    /// drops everything cannot learn.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.layerdrop_p >= 1.0 {
            return Err(Error::config(
                "layerdrop_p",
                "must be < 1 when training",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count:
    /// V·d + L·d + N·(4·d² + 2·d·d_ffn + 4·d) + d·V
    /// (embedding, positional table, per layer the four attention projections
    /// plus the two FFN matrices plus four layer-norm affine vectors, output
    /// projection).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ffn + 4 * d;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + d * self.vocab_size
    }

    /// The same count at a different depth (pruned models).
    pub fn param_count_at_depth(&self, n_layers: usize) -> usize {
        let mut cfg = self.clone();
        cfg.n_layers = n_layers;
        cfg.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    /// Per-head projections, each [d_model × head_dim].
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// Output projection [d_model × d_model]; head h's rows are
    /// [h·head_dim, (h+1)·head_dim).
    pub wo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// Outer FFN matrix [d_model × d_ffn].
    pub ffn_u: Tensor,
    /// Inner FFN matrix [d_ffn × d_model], applied first.
    pub ffn_v: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub pos_table: Tensor,
    pub layers: Vec<LayerParams>,
    pub out_proj: Tensor,
}

fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng).set_requires_grad(true)
}

impl ModelParams {
    /// Deterministic reference init: glorot-uniform draws in a fixed order
    /// (embedding, positional table, layers front to back, output projection),
    /// embeddings additionally scaled by sqrt(d_model), layer-norm affines at
    /// identity.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, dh, dff) = (config.d_model, config.head_dim(), config.d_ffn);
        let v = config.vocab_size;

        let mut embedding = glorot(vec![v, d], v, d, rng);
        let scale = (d as f64).sqrt();
        for x in embedding.values_mut() {
            *x *= scale;
        }
        let pos_table = glorot(vec![config.max_seq_len, d], config.max_seq_len, d, rng);

        let mut layers = Vec::with_capacity(config.n_layers);
        // residual output projections are shrunk with depth so the stack
        // stays near-identity at init; without this the post-norm model
        // stops training somewhere around eight layers
        let res_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for _ in 0..config.n_layers {
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for _ in 0..config.n_heads {
                wq.push(glorot(vec![d, dh], d, dh, rng));
            }
            for _ in 0..config.n_heads {
                wk.push(glorot(vec![d, dh], d, dh, rng));
            }
            for _ in 0..config.n_heads {
                wv.push(glorot(vec![d, dh], d, dh, rng));
            }
            let mut wo = glorot(vec![d, d], d, d, rng);
            for x in wo.values_mut() {
                *x *= res_scale;
            }
            let ffn_u = glorot(vec![d, dff], dff, d, rng);
            let mut ffn_v = glorot(vec![dff, d], d, dff, rng);
            for x in ffn_v.values_mut() {
                *x *= res_scale;
            }
            layers.push(LayerParams {
                wq,
                wk,
                wv,
                wo,
                ln1_gamma: Tensor::full(vec![d], 1.0).set_requires_grad(true),
                ln1_beta: Tensor::zeros(vec![d]).set_requires_grad(true),
                ffn_u,
                ffn_v,
                ln2_gamma: Tensor::full(vec![d], 1.0).set_requires_grad(true),
                ln2_beta: Tensor::zeros(vec![d]).set_requires_grad(true),
            });
        }
        let out_proj = glorot(vec![d, v], d, v, rng);
        Ok(ModelParams {
            config: config.clone(),
            embedding,
            pos_table,
            layers,
            out_proj,
        })
    }

    /// Visit every parameter tensor with a stable name, in a fixed order.
    /// This order defines the checkpoint layout and the flattened vector.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("embedding".into(), &self.embedding);
        f("pos_table".into(), &self.pos_table);
        for (i, l) in self.layers.iter().enumerate() {
            for (h, t) in l.wq.iter().enumerate() {
                f(format!("layer{}.wq{}", i, h), t);
            }
            for (h, t) in l.wk.iter().enumerate() {
                f(format!("layer{}.wk{}", i, h), t);
            }
            for (h, t) in l.wv.iter().enumerate() {
                f(format!("layer{}.wv{}", i, h), t);
            }
            f(format!("layer{}.wo", i), &l.wo);
            f(format!("layer{}.ln1.gamma", i), &l.ln1_gamma);
            f(format!("layer{}.ln1.beta", i), &l.ln1_beta);
            f(format!("layer{}.ffn.u", i), &l.ffn_u);
            f(format!("layer{}.ffn.v", i), &l.ffn_v);
            f(format!("layer{}.ln2.gamma", i), &l.ln2_gamma);
            f(format!("layer{}.ln2.beta", i), &l.ln2_beta);
        }
        f("out_proj".into(), &self.out_proj);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embedding".into(), &mut self.embedding);
        f("pos_table".into(), &mut self.pos_table);
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (h, t) in l.wq.iter_mut().enumerate() {
                f(format!("layer{}.wq{}", i, h), t);
            }
            for (h, t) in l.wk.iter_mut().enumerate() {
                f(format!("layer{}.wk{}", i, h), t);
            }
            for (h, t) in l.wv.iter_mut().enumerate() {
                f(format!("layer{}.wv{}", i, h), t);
            }
            f(format!("layer{}.wo", i), &mut l.wo);
            f(format!("layer{}.ln1.gamma", i), &mut l.ln1_gamma);
            f(format!("layer{}.ln1.beta", i), &mut l.ln1_beta);
            f(format!("layer{}.ffn.u", i), &mut l.ffn_u);
            f(format!("layer{}.ffn.v", i), &mut l.ffn_v);
            f(format!("layer{}.ln2.gamma", i), &mut l.ln2_gamma);
            f(format!("layer{}.ln2.beta", i), &mut l.ln2_beta);
        }
        f("out_proj".into(), &mut self.out_proj);
    }

    /// Number of parameters actually held (should equal the closed form).
    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Parameters concatenated into one flat vector, in visitor order.
    pub fn flatten(&self) -> Tensor {
        let mut vals = Vec::with_capacity(self.count());
        self.visit(&mut |_, t| vals.extend_from_slice(t.values()));
        let n = vals.len();
        Tensor::new(vec![n], vals)
    }

    /// Inverse of [`flatten`]: overwrite every parameter from a flat vector.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::contract(format!(
                "flat vector has {} values, model holds {}",
                flat.len(),
                self.count()
            )));
        }
        let mut off = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// Gradients concatenated in visitor order (zeros where unset).
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut vals = Vec::with_capacity(self.count());
        self.visit(&mut |_, t| match t.grad() {
            Some(g) => vals.extend_from_slice(g),
            None => vals.extend(std::iter::repeat(0.0).take(t.len())),
        });
        vals
    }

    pub fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    /// The tensor a structured-drop slot refers to (used by mask expansion
    /// checks and DropConnect).
    pub fn tensor_for_slot(&self, slot: &Slot) -> &Tensor {
        let l = &self.layers[slot.layer];
        match slot.kind {
            MatrixKind::Wq(h) => &l.wq[h],
            MatrixKind::Wk(h) => &l.wk[h],
            MatrixKind::Wv(h) => &l.wv[h],
            MatrixKind::Wo => &l.wo,
            MatrixKind::LnGamma1 => &l.ln1_gamma,
            MatrixKind::LnBeta1 => &l.ln1_beta,
            MatrixKind::FfnU => &l.ffn_u,
            MatrixKind::FfnV => &l.ffn_v,
            MatrixKind::LnGamma2 => &l.ln2_gamma,
            MatrixKind::LnBeta2 => &l.ln2_beta,
        }
    }

    /// Physically keep only the listed layers (1-indexed, strictly
    /// increasing); everything else is dropped from the parameter list.
    pub fn keep_layers(&self, keep: &[usize]) -> Result<ModelParams> {
        if keep.is_empty() {
            return Err(Error::contract("keep set must be nonempty"));
        }
        for w in keep.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::contract("keep indices must be strictly increasing"));
            }
        }
        for &k in keep {
            if k == 0 || k > self.layers.len() {
                return Err(Error::Index {
                    what: "keep layer",
                    index: k,
                    bound: self.layers.len() + 1,
                });
            }
        }
        let mut cfg = self.config.clone();
        cfg.n_layers = keep.len();
        Ok(ModelParams {
            config: cfg,
            embedding: self.embedding.clone(),
            pos_table: self.pos_table.clone(),
            layers: keep.iter().map(|&k| self.layers[k - 1].clone()).collect(),
            out_proj: self.out_proj.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct AttnVars {
    /// Per-head (wq, wk, wv) vars; None for heads masked to zero.
    heads: Vec<Option<(Var, Var, Var)>>,
    wo: Var,
    ln1: (Var, Var),
}

struct FfnVars {
    /// (u, v) vars; None when the FFN block is masked to zero.
    uv: Option<(Var, Var)>,
    ln2: (Var, Var),
}

struct LayerVars {
    /// None = attention sub-layer skipped (exact identity).
    attn: Option<AttnVars>,
    /// None = FFN sub-layer skipped (exact identity).
    ffn: Option<FfnVars>,
}

/// A model's parameters bound onto one tape for one step. Binding copies only
/// the structures the mask keeps alive, so dropped layers cost nothing.
pub struct TapeModel {
    embedding: Var,
    pos_table: Var,
    out_proj: Var,
    layers: Vec<Option<LayerVars>>,
    /// (visitor index, leaf var) pairs for gradient pull-back.
    bound: Vec<(usize, Var)>,
    n_heads: usize,
    head_dim: usize,
    vocab_size: usize,
    max_seq_len: usize,
    dropout: f64,
}

impl TapeModel {
    pub fn bind(
        tape: &mut Tape,
        params: &ModelParams,
        mask: Option<&GroupMask>,
        mode: Mode,
    ) -> Result<TapeModel> {
        let cfg = &params.config;
        // visitor index for every named tensor, in visitor order
        let mut names = Vec::new();
        params.visit(&mut |name, _| names.push(name));
        let index_of = |name: &str| -> usize {
            names.iter().position(|n| n == name).expect("visitor name")
        };

        let mut bound = Vec::new();
        let mut bind_one = |tape: &mut Tape, name: String, t: &Tensor| -> Var {
            let v = tape.leaf(t);
            bound.push((index_of(&name), v));
            v
        };

        let embedding = bind_one(tape, "embedding".into(), &params.embedding);
        let pos_table = bind_one(tape, "pos_table".into(), &params.pos_table);

        // DropConnect: a WeightLevel mask multiplies the bound leaf by its
        // 0/1 scalar mask; gradient flows through to the leaf.
        let weight_masked = |tape: &mut Tape, v: Var, slot: &Slot| -> Result<Var> {
            if mode == Mode::Train {
                if let Some(m) = mask.and_then(|m| m.weight_mask(slot)) {
                    return tape.mul_const(v, m);
                }
            }
            Ok(v)
        };

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (i, l) in params.layers.iter().enumerate() {
            let attn_skipped = mask.map_or(false, |m| m.attn_skipped(i));
            let ffn_skipped = mask.map_or(false, |m| m.ffn_skipped(i));
            if attn_skipped && ffn_skipped {
                layers.push(None);
                continue;
            }
            let attn = if attn_skipped {
                None
            } else {
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for h in 0..cfg.n_heads {
                    if mask.map_or(true, |m| m.head_active(i, h)) {
                        let q = bind_one(tape, format!("layer{}.wq{}", i, h), &l.wq[h]);
                        let k = bind_one(tape, format!("layer{}.wk{}", i, h), &l.wk[h]);
                        let v = bind_one(tape, format!("layer{}.wv{}", i, h), &l.wv[h]);
                        let q = weight_masked(tape, q, &Slot::new(i, MatrixKind::Wq(h)))?;
                        let k = weight_masked(tape, k, &Slot::new(i, MatrixKind::Wk(h)))?;
                        let v = weight_masked(tape, v, &Slot::new(i, MatrixKind::Wv(h)))?;
                        heads.push(Some((q, k, v)));
                    } else {
                        heads.push(None);
                    }
                }
                let o = bind_one(tape, format!("layer{}.wo", i), &l.wo);
                let wo = weight_masked(tape, o, &Slot::new(i, MatrixKind::Wo))?;
                let ln1 = (
                    bind_one(tape, format!("layer{}.ln1.gamma", i), &l.ln1_gamma),
                    bind_one(tape, format!("layer{}.ln1.beta", i), &l.ln1_beta),
                );
                Some(AttnVars { heads, wo, ln1 })
            };
            let ffn = if ffn_skipped {
                None
            } else {
                let uv = if mask.map_or(false, |m| m.ffn_zeroed(i)) {
                    None
                } else {
                    let u = bind_one(tape, format!("layer{}.ffn.u", i), &l.ffn_u);
                    let v = bind_one(tape, format!("layer{}.ffn.v", i), &l.ffn_v);
                    let u = weight_masked(tape, u, &Slot::new(i, MatrixKind::FfnU))?;
                    let v = weight_masked(tape, v, &Slot::new(i, MatrixKind::FfnV))?;
                    Some((u, v))
                };
                let ln2 = (
                    bind_one(tape, format!("layer{}.ln2.gamma", i), &l.ln2_gamma),
                    bind_one(tape, format!("layer{}.ln2.beta", i), &l.ln2_beta),
                );
                Some(FfnVars { uv, ln2 })
            };
            layers.push(Some(LayerVars { attn, ffn }));
        }
        let out_proj = bind_one(tape, "out_proj".into(), &params.out_proj);
        Ok(TapeModel {
            embedding,
            pos_table,
            out_proj,
            layers,
            bound,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
            vocab_size: cfg.vocab_size,
            max_seq_len: cfg.max_seq_len,
            dropout: cfg.dropout,
        })
    }

    /// Token + positional embedding rows for one sequence.
    pub fn embed(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        if tokens.len() > self.max_seq_len {
            return Err(Error::Index {
                what: "sequence length",
                index: tokens.len(),
                bound: self.max_seq_len + 1,
            });
        }
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(Error::Index {
                    what: "token id",
                    index: t,
                    bound: self.vocab_size,
                });
            }
        }
        let tok = tape.gather_rows(self.embedding, tokens)?;
        let pos_idx: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(self.pos_table, &pos_idx)?;
        tape.add(tok, pos)
    }

    fn dropout_mask(&self, len: usize, mode: Mode, rng: &mut Rng) -> Option<Vec<f64>> {
        if mode == Mode::Train && self.dropout > 0.0 {
            let keep = 1.0 - self.dropout;
            // no 1/(1-p) rescale, mirroring the structured-drop semantics
            Some((0..len).map(|_| if rng.bernoulli(keep) { 1.0 } else { 0.0 }).collect())
        } else {
            None
        }
    }

    /// One full layer (attention sub-layer + AddNorm, FFN sub-layer +
    /// AddNorm), honoring the mask the model was bound with. A skipped
    /// sub-layer passes the hidden state through untouched.
    pub fn apply_layer(
        &self,
        tape: &mut Tape,
        layer: usize,
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let lv = match &self.layers[layer] {
            Some(lv) => lv,
            None => return Ok(x),
        };
        let t = tape.value(x).rows();
        let mut h = x;

        if let Some(attn) = &lv.attn {
            let scale = 1.0 / (self.head_dim as f64).sqrt();
            let limits: Vec<usize> = (1..=t).collect();
            let mut outs = Vec::with_capacity(self.n_heads);
            for hv in &attn.heads {
                match hv {
                    Some((wq, wk, wv)) => {
                        let q = tape.matmul(h, *wq)?;
                        let k = tape.matmul(h, *wk)?;
                        let v = tape.matmul(h, *wv)?;
                        let scores = tape.matmul_nt(q, k)?;
                        let scaled = tape.mul_const(scores, vec![scale])?;
                        let att = tape.softmax_rows_limited(scaled, &limits)?;
                        outs.push(tape.matmul(att, v)?);
                    }
                    None => {
                        // dropped head: exact zero contribution
                        outs.push(tape.leaf(&Tensor::zeros(vec![t, self.head_dim])));
                    }
                }
            }
            let cat = tape.concat_cols(&outs)?;
            let mut proj = tape.matmul(cat, attn.wo)?;
            if let Some(m) = self.dropout_mask(tape.value(proj).len(), mode, rng) {
                proj = tape.mul_const(proj, m)?;
            }
            let sum = tape.add(h, proj)?;
            h = tape.layer_norm(sum, attn.ln1.0, attn.ln1.1, LN_EPS)?;
        }

        if let Some(ffn) = &lv.ffn {
            let mut f = match ffn.uv {
                Some((u, v)) => {
                    let inner = tape.matmul_nt(h, v)?;
                    let act = tape.relu(inner);
                    tape.matmul_nt(act, u)?
                }
                // zeroed FFN block: AddNorm still applies to a zero branch
                None => tape.leaf(&Tensor::zeros(vec![t, tape.value(h).cols()])),
            };
            if let Some(m) = self.dropout_mask(tape.value(f).len(), mode, rng) {
                f = tape.mul_const(f, m)?;
            }
            let sum = tape.add(h, f)?;
            h = tape.layer_norm(sum, ffn.ln2.0, ffn.ln2.1, LN_EPS)?;
        }
        Ok(h)
    }

    pub fn project_out(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        tape.matmul(h, self.out_proj)
    }

    /// Full forward for one sequence: embed, all layers, output projection.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let mut h = self.embed(tape, tokens)?;
        for i in 0..self.layers.len() {
            h = self.apply_layer(tape, i, h, mode, rng)?;
        }
        self.project_out(tape, h)
    }

    /// Accumulate tape gradients back into the parameter tensors.
    pub fn pull_grads(&self, tape: &Tape, params: &mut ModelParams) {
        let mut by_index: Vec<Option<Var>> = vec![None; params.count_tensors()];
        for &(i, v) in &self.bound {
            by_index[i] = Some(v);
        }
        let mut idx = 0;
        params.visit_mut(&mut |_, t| {
            if let Some(v) = by_index[idx] {
                t.accumulate_grad(tape.grad(v));
            }
            idx += 1;
        });
    }
}

impl ModelParams {
    fn count_tensors(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }
}

/// Convenience eval-mode forward on a fresh tape, returning logits values.
pub fn forward_lm(
    params: &ModelParams,
    tokens: &[usize],
    mask: Option<&GroupMask>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = TapeModel::bind(&mut tape, params, mask, Mode::Eval)?;
    let mut rng = Rng::new(0); // eval mode never draws
    let logits = bound.forward(&mut tape, tokens, Mode::Eval, &mut rng)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structdrop::{sample_mask, DropSpec};

    pub(crate) fn tiny_config(n_layers: usize, d_model: usize, n_heads: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_ffn: d_model * 2,
            vocab_size: 16,
            max_seq_len: 8,
            dropout: 0.0,
            layerdrop_p: 0.0,
            scheme: GroupScheme::Layer,
        }
    }

    #[test]
    fn config_rejects_bad_fields() {
        let mut cfg = tiny_config(2, 8, 2);
        cfg.d_model = 9;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));

        let mut cfg = tiny_config(2, 8, 2);
        cfg.layerdrop_p = 1.0;
        assert!(cfg.validate().is_ok());
        assert!(cfg.validate_for_training().is_err());
    }

    #[test]
    fn param_count_formula_matches_constructed() {
        let mut rng = Rng::new(1);
        for seed in 0..10 {
            let mut dims = Rng::new(100 + seed);
            let n_heads = 1 + dims.next_below(4) as usize;
            let d_model = n_heads * (1 + dims.next_below(6) as usize);
            let cfg = ModelConfig {
                n_layers: 1 + dims.next_below(5) as usize,
                d_model,
                n_heads,
                d_ffn: 1 + dims.next_below(20) as usize,
                vocab_size: 2 + dims.next_below(40) as usize,
                max_seq_len: 1 + dims.next_below(16) as usize,
                dropout: 0.0,
                layerdrop_p: 0.0,
                scheme: GroupScheme::Layer,
            };
            let params = ModelParams::init(&cfg, &mut rng).unwrap();
            assert_eq!(params.count(), cfg.param_count(), "config {:?}", cfg);
        }
    }

    #[test]
    fn embed_adds_positional_rows() {
        let cfg = tiny_config(1, 8, 2);
        let mut rng = Rng::new(2);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();

        // zero embeddings and positions -> zero rows
        let zeros = vec![0.0; params.embedding.len()];
        params.embedding.values_mut().copy_from_slice(&zeros);
        let pzeros = vec![0.0; params.pos_table.len()];
        params.pos_table.values_mut().copy_from_slice(&pzeros);
        let mut tape = Tape::new();
        let tm = TapeModel::bind(&mut tape, &params, None, Mode::Eval).unwrap();
        let e = tm.embed(&mut tape, &[3]).unwrap();
        assert!(tape.value(e).values().iter().all(|&v| v == 0.0));

        // same token at two positions differs once positions are nonzero
        let mut rng = Rng::new(3);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let tm = TapeModel::bind(&mut tape, &params, None, Mode::Eval).unwrap();
        let e = tm.embed(&mut tape, &[5, 5]).unwrap();
        let v = tape.value(e);
        let row0: Vec<f64> = (0..8).map(|c| v.at(0, c)).collect();
        let row1: Vec<f64> = (0..8).map(|c| v.at(1, c)).collect();
        assert_ne!(row0, row1);

        // gather matches direct row lookup
        for c in 0..8 {
            let want = params.embedding.at(5, c) + params.pos_table.at(0, c);
            assert_eq!(v.at(0, c), want);
        }
    }

    #[test]
    fn embed_rejects_overlong_and_bad_tokens() {
        let cfg = tiny_config(1, 8, 2);
        let mut rng = Rng::new(4);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let tm = TapeModel::bind(&mut tape, &params, None, Mode::Eval).unwrap();
        let long: Vec<usize> = vec![0; cfg.max_seq_len + 1];
        assert!(tm.embed(&mut tape, &long).is_err());
        assert!(tm.embed(&mut tape, &[16]).is_err());
    }

    // Attention oracle: per-position loop computing soft attention by hand.
    fn attention_oracle(x: &Tensor, l: &LayerParams, n_heads: usize, dh: usize) -> Vec<Vec<f64>> {
        let t = x.rows();
        let d = x.cols();
        let mut out = vec![vec![0.0; d]; t];
        let mut cat = vec![vec![0.0; d]; t];
        for h in 0..n_heads {
            // project
            let proj = |w: &Tensor, r: usize| -> Vec<f64> {
                (0..dh)
                    .map(|c| (0..d).map(|k| x.at(r, k) * w.at(k, c)).sum())
                    .collect()
            };
            for i in 0..t {
                let q: Vec<f64> = proj(&l.wq[h], i);
                let mut scores = Vec::new();
                for j in 0..=i {
                    let k: Vec<f64> = proj(&l.wk[h], j);
                    let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                    scores.push(dot / (dh as f64).sqrt());
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    let v: Vec<f64> = proj(&l.wv[h], j);
                    for c in 0..dh {
                        cat[i][h * dh + c] += e / z * v[c];
                    }
                }
            }
        }
        for i in 0..t {
            for c in 0..d {
                out[i][c] = (0..d).map(|k| cat[i][k] * l.wo.at(k, c)).sum();
            }
        }
        out
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut cfg = tiny_config(1, 6, 1);
        cfg.d_ffn = 4;
        let mut rng = Rng::new(7);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform(vec![3, 6], -1.0, 1.0, &mut rng);

        // isolate the attention sub-layer by comparing pre-AddNorm values:
        // run it manually on the tape with the bound vars
        let mut tape = Tape::new();
        let tm = TapeModel::bind(&mut tape, &params, None, Mode::Eval).unwrap();
        let xv = tape.leaf(&x);
        let attn = tm.layers[0].as_ref().unwrap().attn.as_ref().unwrap();
        let (wq, wk, wv) = attn.heads[0].unwrap();
        let q = tape.matmul(xv, wq).unwrap();
        let k = tape.matmul(xv, wk).unwrap();
        let v = tape.matmul(xv, wv).unwrap();
        let s = tape.matmul_nt(q, k).unwrap();
        let sc = tape.mul_const(s, vec![1.0 / (6.0f64).sqrt()]).unwrap();
        let a = tape.softmax_rows_limited(sc, &[1, 2, 3]).unwrap();
        let o = tape.matmul(a, v).unwrap();
        let proj = tape.matmul(o, attn.wo).unwrap();

        let want = attention_oracle(&x, &params.layers[0], 1, 6);
        for i in 0..3 {
            for c in 0..6 {
                let got = tape.value(proj).at(i, c);
                assert!(
                    (got - want[i][c]).abs() < 1e-10,
                    "({}, {}): {} vs {}",
                    i,
                    c,
                    got,
                    want[i][c]
                );
            }
        }
    }

    #[test]
    fn single_position_attention_is_value_projection() {
        let cfg = tiny_config(1, 4, 1);
        let mut rng = Rng::new(8);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform(vec![1, 4], -1.0, 1.0, &mut rng);
        // with one position the softmax weight matrix is [[1]], so the head
        // output is exactly x·wv, then ·wo
        let xv_wv = crate::tensor::matmul_values(&x, &params.layers[0].wv[0]).unwrap();
        let want = crate::tensor::matmul_values(&xv_wv, &params.layers[0].wo).unwrap();

        let mut tape = Tape::new();
        let tm = TapeModel::bind(&mut tape, &params, None, Mode::Eval).unwrap();
        let xv = tape.leaf(&x);
        let attn = tm.layers[0].as_ref().unwrap().attn.as_ref().unwrap();
        let (wq, wk, wv) = attn.heads[0].unwrap();
        let q = tape.matmul(xv, wq).unwrap();
        let k = tape.matmul(xv, wk).unwrap();
        let v = tape.matmul(xv, wv).unwrap();
        let s = tape.matmul_nt(q, k).unwrap();
        let sc = tape.mul_const(s, vec![0.5]).unwrap();
        let a = tape.softmax_rows_limited(sc, &[1]).unwrap();
        assert_eq!(tape.value(a).values(), &[1.0]);
        let o = tape.matmul(a, v).unwrap();
        let proj = tape.matmul(o, attn.wo).unwrap();
        for c in 0..4 {
            assert!((tape.value(proj).at(0, c) - want.at(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn causality_is_bitwise() {
        let cfg = tiny_config(2, 8, 2);
        let mut rng = Rng::new(9);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let tokens = [1usize, 2, 3, 4, 5];
        let base = forward_lm(&params, &tokens, None).unwrap();
        // perturb the last token; logits at earlier positions must not move
        let perturbed = [1usize, 2, 3, 4, 9];
        let other = forward_lm(&params, &perturbed, None).unwrap();
        for t in 0..4 {
            for c in 0..cfg.vocab_size {
                assert_eq!(
                    base.at(t, c).to_bits(),
                    other.at(t, c).to_bits(),
                    "position {} must be unaffected",
                    t
                );
            }
        }
        assert_ne!(
            base.at(4, 0).to_bits(),
            other.at(4, 0).to_bits(),
            "final position should change"
        );
    }

    #[test]
    fn ffn_row_independence_and_oracle() {
        let cfg = tiny_config(1, 4, 1);
        let mut rng = Rng::new(10);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let l = &params.layers[0];
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);

        let ffn = |x: &Tensor| -> Result<Tensor> {
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let u = tape.leaf(&l.ffn_u);
            let v = tape.leaf(&l.ffn_v);
            let inner = tape.matmul_nt(xv, v)?;
            let act = tape.relu(inner);
            let out = tape.matmul_nt(act, u)?;
            Ok(tape.value(out).clone())
        };
        let base = ffn(&x).unwrap();

        // rowwise oracle
        for r in 0..3 {
            for c in 0..4 {
                let mut acc = 0.0;
                for j in 0..cfg.d_ffn {
                    let mut inner = 0.0;
                    for k in 0..4 {
                        inner += x.at(r, k) * l.ffn_v.at(j, k);
                    }
                    acc += inner.max(0.0) * l.ffn_u.at(c, j);
                }
                assert!((base.at(r, c) - acc).abs() < 1e-12);
            }
        }

        // perturbing row 1 changes only row 1
        let mut x2 = x.clone();
        x2.values_mut()[4] += 0.5;
        let moved = ffn(&x2).unwrap();
        for c in 0..4 {
            assert_eq!(base.at(0, c).to_bits(), moved.at(0, c).to_bits());
            assert_eq!(base.at(2, c).to_bits(), moved.at(2, c).to_bits());
        }
        assert_ne!(base.at(1, 0).to_bits(), moved.at(1, 0).to_bits());

        // zero weights -> zero output
        let mut pz = params.clone();
        let n = pz.layers[0].ffn_u.len();
        pz.layers[0].ffn_u.values_mut().copy_from_slice(&vec![0.0; n]);
        let l0 = &pz.layers[0];
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let u = tape.leaf(&l0.ffn_u);
        let v = tape.leaf(&l0.ffn_v);
        let inner = tape.matmul_nt(xv, v).unwrap();
        let act = tape.relu(inner);
        let out = tape.matmul_nt(act, u).unwrap();
        assert!(tape.value(out).values().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn dropped_layer_is_exact_identity() {
        let cfg = tiny_config(3, 8, 2);
        let mut rng = Rng::new(11);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let mask = GroupMask::keep_layers(&cfg, &[1, 3]).unwrap();

        let mut tape = Tape::new();
        let tm = TapeModel::bind(&mut tape, &params, Some(&mask), Mode::Eval).unwrap();
        let mut r = Rng::new(0);
        let h0 = tm.embed(&mut tape, &[1, 2, 3]).unwrap();
        let h1 = tm.apply_layer(&mut tape, 0, h0, Mode::Eval, &mut r).unwrap();
        let h2 = tm.apply_layer(&mut tape, 1, h1, Mode::Eval, &mut r).unwrap();
        // layer 2 (index 1) is dropped: hidden state var is passed through
        assert_eq!(h1, h2, "dropped layer must be an exact identity");
    }

    #[test]
    fn all_layers_dropped_leaves_projection_of_embeddings() {
        let cfg = tiny_config(2, 8, 2);
        let mut rng = Rng::new(12);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let mask = GroupMask::drop_all_layers(&cfg);
        let tokens = [4usize, 7, 2];
        let got = forward_lm(&params, &tokens, Some(&mask)).unwrap();

        let mut tape = Tape::new();
        let tm = TapeModel::bind(&mut tape, &params, Some(&mask), Mode::Eval).unwrap();
        let e = tm.embed(&mut tape, &tokens).unwrap();
        let p = tm.project_out(&mut tape, e).unwrap();
        assert_eq!(got.values(), tape.value(p).values());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config(2, 8, 2);
        let mut rng = Rng::new(13);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let a = forward_lm(&params, &[1, 2, 3, 4], None).unwrap();
        let b = forward_lm(&params, &[1, 2, 3, 4], None).unwrap();
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn logits_shape_holds_across_random_configs() {
        for seed in 0..20 {
            let mut dims = Rng::new(200 + seed);
            let n_heads = 1 + dims.next_below(3) as usize;
            let d_model = n_heads * (2 + dims.next_below(4) as usize);
            let cfg = ModelConfig {
                n_layers: 1 + dims.next_below(3) as usize,
                d_model,
                n_heads,
                d_ffn: 2 + dims.next_below(12) as usize,
                vocab_size: 4 + dims.next_below(28) as usize,
                max_seq_len: 8,
                dropout: 0.0,
                layerdrop_p: 0.0,
                scheme: GroupScheme::Layer,
            };
            let mut rng = Rng::new(seed);
            let params = ModelParams::init(&cfg, &mut rng).unwrap();
            let t = 1 + (seed as usize % 8);
            let tokens: Vec<usize> = (0..t).map(|i| i % cfg.vocab_size).collect();
            let logits = forward_lm(&params, &tokens, None).unwrap();
            assert_eq!(logits.shape(), &[t, cfg.vocab_size]);
        }
    }

    #[test]
    fn ffn_zeroed_block_still_applies_add_norm() {
        let mut cfg = tiny_config(1, 8, 2);
        cfg.scheme = GroupScheme::FFNMatrix;
        cfg.layerdrop_p = 1.0; // always zero the FFN block
        let mut rng = Rng::new(14);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let spec = DropSpec {
            scheme: GroupScheme::FFNMatrix,
            rate: 1.0,
        };
        let mut mrng = Rng::new(5);
        let mask = sample_mask(&spec, &cfg, &mut mrng).unwrap();

        let tokens = [1usize, 2];
        // expected: attention sub-layer as usual, then layer_norm(h + 0)
        let mut tape = Tape::new();
        let tm = TapeModel::bind(&mut tape, &params, Some(&mask), Mode::Train).unwrap();
        let mut r = Rng::new(0);
        let logits = tm.forward(&mut tape, &tokens, Mode::Train, &mut r).unwrap();

        // reference: run with no mask but FFN weights zeroed manually
        let mut pz = params.clone();
        for l in pz.layers.iter_mut() {
            let n = l.ffn_u.len();
            l.ffn_u.values_mut().copy_from_slice(&vec![0.0; n]);
        }
        let want = forward_lm(&pz, &tokens, None).unwrap();
        let got = tape.value(logits);
        for i in 0..got.len() {
            assert!(
                (got.values()[i] - want.values()[i]).abs() < 1e-12,
                "index {}",
                i
            );
        }
    }

    #[test]
    fn full_model_gradients_pass_finite_differences() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            vocab_size: 16,
            max_seq_len: 4,
            dropout: 0.0,
            layerdrop_p: 0.0,
            scheme: GroupScheme::Layer,
        };
        let mut rng = Rng::new(15);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let tokens = [1usize, 5, 2, 9];
        let targets = [5usize, 2, 9, 0];
        let flat = params.flatten();

        let err = crate::gradcheck::grad_check(
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
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "full model grad check err {}", err);
    }

    #[test]
    fn keep_layers_validates_and_shrinks() {
        let cfg = tiny_config(4, 8, 2);
        let mut rng = Rng::new(16);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        assert!(params.keep_layers(&[]).is_err());
        assert!(params.keep_layers(&[2, 2]).is_err());
        assert!(params.keep_layers(&[0]).is_err());
        assert!(params.keep_layers(&[5]).is_err());
        let pruned = params.keep_layers(&[1, 3]).unwrap();
        assert_eq!(pruned.layers.len(), 2);
        assert_eq!(pruned.config.n_layers, 2);
        assert_eq!(pruned.count(), cfg.param_count_at_depth(2));
    }

    #[test]
    fn flatten_roundtrip_is_exact() {
        let cfg = tiny_config(2, 8, 2);
        let mut rng = Rng::new(17);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let flat = params.flatten();
        let mut other = ModelParams::init(&cfg, &mut Rng::new(999)).unwrap();
        other.load_flat(flat.values()).unwrap();
        let (a, b) = (params.flatten(), other.flatten());
        assert_eq!(
            a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
