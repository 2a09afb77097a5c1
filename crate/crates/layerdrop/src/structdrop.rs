//! Group enumeration and group-constrained mask sampling.
//!
//! A scheme partitions (some of) the model's weights into groups; a mask
//! assigns one Bernoulli bit per group, so every weight in a group shares
//! its fate. Composite schemes sample their members independently and take
//! the AND: a structure is active only if every group covering it is.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupScheme {
    /// One group per full layer (both sub-layers).
    Layer,
    /// Two groups per layer: attention side, FFN side.
    SubLayer,
    /// One group per attention head.
    Head,
    /// One group per layer's FFN matrix pair (U and V together).
    FFNMatrix,
    /// One group per scalar weight in the layers' projection and FFN
    /// matrices (DropConnect). Layer-norm affines are not weight matrices
    /// and are excluded.
    WeightLevel,
    /// Disjoint union of member schemes; activity is the AND over members.
    Composite(Vec<GroupScheme>),
}

impl GroupScheme {
    pub fn validate(&self) -> Result<()> {
        if let GroupScheme::Composite(members) = self {
            if members.is_empty() {
                return Err(Error::config("scheme", "composite needs members"));
            }
            for (i, m) in members.iter().enumerate() {
                match m {
                    GroupScheme::WeightLevel => {
                        return Err(Error::config(
                            "scheme",
                            "WeightLevel cannot appear inside Composite",
                        ));
                    }
                    GroupScheme::Composite(_) => {
                        return Err(Error::config("scheme", "composites do not nest"));
                    }
                    _ => {}
                }
                if members[..i].contains(m) {
                    return Err(Error::config("scheme", "composite members must be distinct"));
                }
            }
        }
        Ok(())
    }

    /// Number of mask bits this scheme uses for the given model shape.
    pub fn group_count(&self, cfg: &ModelConfig) -> usize {
        let n = cfg.n_layers;
        match self {
            GroupScheme::Layer => n,
            GroupScheme::SubLayer => 2 * n,
            GroupScheme::Head => n * cfg.n_heads,
            GroupScheme::FFNMatrix => n,
            GroupScheme::WeightLevel => n * weights_per_layer(cfg),
            GroupScheme::Composite(members) => {
                members.iter().map(|m| m.group_count(cfg)).sum()
            }
        }
    }
}

fn weights_per_layer(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    4 * d * d + 2 * d * cfg.d_ffn
}

/// Identifies one parameter matrix of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub layer: usize,
    pub kind: MatrixKind,
}

impl Slot {
    pub fn new(layer: usize, kind: MatrixKind) -> Self {
        Slot { layer, kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatrixKind {
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Wo,
    LnGamma1,
    LnBeta1,
    FfnU,
    FfnV,
    LnGamma2,
    LnBeta2,
}

/// Row-major dims of the matrix a slot names.
pub fn slot_dims(cfg: &ModelConfig, kind: MatrixKind) -> (usize, usize) {
    let d = cfg.d_model;
    match kind {
        MatrixKind::Wq(_) | MatrixKind::Wk(_) | MatrixKind::Wv(_) => (d, cfg.head_dim()),
        MatrixKind::Wo => (d, d),
        MatrixKind::FfnU => (d, cfg.d_ffn),
        MatrixKind::FfnV => (cfg.d_ffn, d),
        MatrixKind::LnGamma1 | MatrixKind::LnBeta1 | MatrixKind::LnGamma2 | MatrixKind::LnBeta2 => {
            (1, d)
        }
    }
}

/// A region of one slot's matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Span {
    All,
    Rows { lo: usize, hi: usize },
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coverage {
    pub slot: Slot,
    pub span: Span,
}

impl Coverage {
    fn all(layer: usize, kind: MatrixKind) -> Self {
        Coverage {
            slot: Slot::new(layer, kind),
            span: Span::All,
        }
    }

    /// Flat indices of the covered scalars within the slot's matrix.
    pub fn expand(&self, cfg: &ModelConfig) -> Vec<usize> {
        let (rows, cols) = slot_dims(cfg, self.slot.kind);
        match self.span {
            Span::All => (0..rows * cols).collect(),
            Span::Rows { lo, hi } => (lo * cols..hi * cols).collect(),
            Span::Index(i) => vec![i],
        }
    }
}

/// Every matrix belonging to one layer.
fn layer_coverage(cfg: &ModelConfig, d: usize) -> Vec<Coverage> {
    let mut c = attn_coverage(cfg, d);
    c.extend(ffn_side_coverage(d));
    c
}

/// The attention sub-layer's matrices, including its AddNorm affine.
fn attn_coverage(cfg: &ModelConfig, d: usize) -> Vec<Coverage> {
    let mut c = Vec::new();
    for h in 0..cfg.n_heads {
        c.push(Coverage::all(d, MatrixKind::Wq(h)));
        c.push(Coverage::all(d, MatrixKind::Wk(h)));
        c.push(Coverage::all(d, MatrixKind::Wv(h)));
    }
    c.push(Coverage::all(d, MatrixKind::Wo));
    c.push(Coverage::all(d, MatrixKind::LnGamma1));
    c.push(Coverage::all(d, MatrixKind::LnBeta1));
    c
}

fn ffn_side_coverage(d: usize) -> Vec<Coverage> {
    vec![
        Coverage::all(d, MatrixKind::FfnU),
        Coverage::all(d, MatrixKind::FfnV),
        Coverage::all(d, MatrixKind::LnGamma2),
        Coverage::all(d, MatrixKind::LnBeta2),
    ]
}

fn head_coverage(cfg: &ModelConfig, d: usize, h: usize) -> Vec<Coverage> {
    let dh = cfg.head_dim();
    vec![
        Coverage::all(d, MatrixKind::Wq(h)),
        Coverage::all(d, MatrixKind::Wk(h)),
        Coverage::all(d, MatrixKind::Wv(h)),
        // head h's output enters wo through rows [h·dh, (h+1)·dh)
        Coverage {
            slot: Slot::new(d, MatrixKind::Wo),
            span: Span::Rows {
                lo: h * dh,
                hi: (h + 1) * dh,
            },
        },
    ]
}

/// DropConnect slot order within a layer: wq/wk/wv per head, wo, ffn u, ffn v.
fn weight_level_slots(cfg: &ModelConfig, d: usize) -> Vec<Slot> {
    let mut slots = Vec::new();
    for h in 0..cfg.n_heads {
        slots.push(Slot::new(d, MatrixKind::Wq(h)));
        slots.push(Slot::new(d, MatrixKind::Wk(h)));
        slots.push(Slot::new(d, MatrixKind::Wv(h)));
    }
    slots.push(Slot::new(d, MatrixKind::Wo));
    slots.push(Slot::new(d, MatrixKind::FfnU));
    slots.push(Slot::new(d, MatrixKind::FfnV));
    slots
}

/// Group table: group index → covered weight regions. Group indices match
/// mask bit positions, with composite members laid out in member order.
pub fn enumerate_groups(cfg: &ModelConfig, scheme: &GroupScheme) -> Result<Vec<Vec<Coverage>>> {
    cfg.validate()?;
    scheme.validate()?;
    let mut table = Vec::new();
    push_groups(cfg, scheme, &mut table);
    Ok(table)
}

fn push_groups(cfg: &ModelConfig, scheme: &GroupScheme, table: &mut Vec<Vec<Coverage>>) {
    match scheme {
        GroupScheme::Layer => {
            for d in 0..cfg.n_layers {
                table.push(layer_coverage(cfg, d));
            }
        }
        GroupScheme::SubLayer => {
            for d in 0..cfg.n_layers {
                table.push(attn_coverage(cfg, d));
                table.push(ffn_side_coverage(d));
            }
        }
        GroupScheme::Head => {
            for d in 0..cfg.n_layers {
                for h in 0..cfg.n_heads {
                    table.push(head_coverage(cfg, d, h));
                }
            }
        }
        GroupScheme::FFNMatrix => {
            for d in 0..cfg.n_layers {
                table.push(vec![
                    Coverage::all(d, MatrixKind::FfnU),
                    Coverage::all(d, MatrixKind::FfnV),
                ]);
            }
        }
        GroupScheme::WeightLevel => {
            for d in 0..cfg.n_layers {
                for slot in weight_level_slots(cfg, d) {
                    let (r, c) = slot_dims(cfg, slot.kind);
                    for i in 0..r * c {
                        table.push(vec![Coverage {
                            slot,
                            span: Span::Index(i),
                        }]);
                    }
                }
            }
        }
        GroupScheme::Composite(members) => {
            for m in members {
                push_groups(cfg, m, table);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSpec {
    pub scheme: GroupScheme,
    pub rate: f64,
}

/// One sampled (or constructed) group mask. Bits are 1 = active, laid out in
/// group-table order; the model shape is carried so queries can resolve
/// composite offsets and DropConnect slices without a config in hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMask {
    pub scheme: GroupScheme,
    pub bits: Vec<u8>,
    pub seed_used: u64,
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    d_ffn: usize,
}

/// Sample one mask: each group's bit is an independent Bernoulli(1 − rate)
/// draw, in group-index order.
pub fn sample_mask(spec: &DropSpec, cfg: &ModelConfig, rng: &mut Rng) -> Result<GroupMask> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::config("rate", "must be in [0, 1]"));
    }
    spec.scheme.validate()?;
    let n = spec.scheme.group_count(cfg);
    let keep = 1.0 - spec.rate;
    let bits = (0..n)
        .map(|_| if rng.bernoulli(keep) { 1u8 } else { 0u8 })
        .collect();
    Ok(GroupMask {
        scheme: spec.scheme.clone(),
        bits,
        seed_used: rng.seed(),
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        d_model: cfg.d_model,
        d_ffn: cfg.d_ffn,
    })
}

/// Expected number of active groups out of N at drop rate p.
pub fn expected_active(n: usize, p: f64) -> f64 {
    n as f64 * (1.0 - p)
}

/// DropConnect: W ⊙ M with elementwise i.i.d. Bernoulli(1 − p) mask,
/// no rescaling.
pub fn apply_dropconnect(w: &Tensor, p: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("rate", "must be in [0, 1]"));
    }
    let keep = 1.0 - p;
    let mut out = w.clone();
    for v in out.values_mut() {
        if !rng.bernoulli(keep) {
            *v = 0.0;
        }
    }
    Ok(out)
}

impl GroupMask {
    fn dims_cfg(&self) -> ModelConfig {
        // only the shape fields matter for group arithmetic
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            vocab_size: 1,
            max_seq_len: 1,
            dropout: 0.0,
            layerdrop_p: 0.0,
            scheme: GroupScheme::Layer,
        }
    }

    /// Mask that keeps exactly the listed layers (1-indexed) and drops the
    /// rest, in Layer-scheme form. This is how pruning keep-sets are run
    /// through the masked forward path.
    pub fn keep_layers(cfg: &ModelConfig, keep: &[usize]) -> Result<GroupMask> {
        for &k in keep {
            if k == 0 || k > cfg.n_layers {
                return Err(Error::Index {
                    what: "keep layer",
                    index: k,
                    bound: cfg.n_layers + 1,
                });
            }
        }
        let bits = (1..=cfg.n_layers)
            .map(|d| if keep.contains(&d) { 1u8 } else { 0u8 })
            .collect();
        Ok(GroupMask {
            scheme: GroupScheme::Layer,
            bits,
            seed_used: 0,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_model: cfg.d_model,
            d_ffn: cfg.d_ffn,
        })
    }

    pub fn drop_all_layers(cfg: &ModelConfig) -> GroupMask {
        GroupMask::keep_layers(cfg, &[]).expect("empty keep set is valid for a mask")
    }

    /// Member schemes with their bit offsets (self counts as one member when
    /// not composite).
    fn members(&self) -> Vec<(&GroupScheme, usize)> {
        let cfg = self.dims_cfg();
        match &self.scheme {
            GroupScheme::Composite(ms) => {
                let mut out = Vec::new();
                let mut off = 0;
                for m in ms {
                    out.push((m, off));
                    off += m.group_count(&cfg);
                }
                out
            }
            s => vec![(s, 0)],
        }
    }

    /// True when the whole attention sub-layer of layer d is dropped
    /// (identity on the hidden state, AddNorm skipped).
    pub fn attn_skipped(&self, d: usize) -> bool {
        self.members().iter().any(|(m, off)| match m {
            GroupScheme::Layer => self.bits[off + d] == 0,
            GroupScheme::SubLayer => self.bits[off + 2 * d] == 0,
            _ => false,
        })
    }

    /// True when the whole FFN sub-layer of layer d is dropped (identity).
    pub fn ffn_skipped(&self, d: usize) -> bool {
        self.members().iter().any(|(m, off)| match m {
            GroupScheme::Layer => self.bits[off + d] == 0,
            GroupScheme::SubLayer => self.bits[off + 2 * d + 1] == 0,
            _ => false,
        })
    }

    /// Head activity within a live attention sub-layer.
    pub fn head_active(&self, d: usize, h: usize) -> bool {
        self.members().iter().all(|(m, off)| match m {
            GroupScheme::Head => self.bits[off + d * self.n_heads + h] == 1,
            _ => true,
        }) && !self.attn_skipped(d)
    }

    /// True when layer d's FFN matrices are zeroed (AddNorm still applies).
    pub fn ffn_zeroed(&self, d: usize) -> bool {
        self.members().iter().any(|(m, off)| match m {
            GroupScheme::FFNMatrix => self.bits[off + d] == 0,
            _ => false,
        })
    }

    /// DropConnect slice for one slot, as 0.0/1.0 factors, when this mask is
    /// weight-level. Slots outside the weight-level domain get None.
    pub fn weight_mask(&self, slot: &Slot) -> Option<Vec<f64>> {
        if self.scheme != GroupScheme::WeightLevel {
            return None;
        }
        let cfg = self.dims_cfg();
        let per_layer = weights_per_layer(&cfg);
        let mut off = slot.layer * per_layer;
        for s in weight_level_slots(&cfg, slot.layer) {
            let (r, c) = slot_dims(&cfg, s.kind);
            if s.kind == slot.kind {
                return Some(
                    self.bits[off..off + r * c]
                        .iter()
                        .map(|&b| b as f64)
                        .collect(),
                );
            }
            off += r * c;
        }
        None
    }

    /// Layers whose both sub-layers are live (the identity-skip sense used
    /// for the active-layer metric).
    pub fn active_full_layers(&self) -> usize {
        (0..self.n_layers)
            .filter(|&d| !self.attn_skipped(d) && !self.ffn_skipped(d))
            .count()
    }
}
