//! Row/column transformer layer math.
//!
//! One layer, for queries `Z_q` against a flattened sequence `(X, P)`:
//!
//! ```text
//! head_h   = Z_prev[:, h] + softmax(((Z_prev + Z_q) Wq_h)((X + P) Wk_h)ᵀ / √d_m) · X Wv_h
//! Õ        = LN1([head_0; …; head_{n_h−1}] · W^O)
//! O        = LN2(Õ + W2 · relu(W1 · Õ + b1) + b2)
//! ```
//!
//! Each head's residual is the head's own channel slice of `Z_prev`, so the
//! concatenation is `Z_prev + [inc_0; …]`. The grouped/pooled variant sums
//! residual-free increments from both paths and adds `Z_prev` once.
//!
//! The interactive step couples row and column outputs without projections:
//! `Z_r = softmax(O_r O_cᵀ / √d) O_c + O_r` and symmetrically for columns.

use std::sync::Arc;

use crate::error::{DflatError, Result};
use crate::flatten::Orientation;
use crate::params::{ParamId, ParameterStore};
use crate::tape::{RowMix, ScoreKind, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub groups: usize,
    pub pool_window: usize,
    pub group_pool: bool,
    pub ffn_hidden: usize,
}

impl AttentionConfig {
    /// Full attention with `d_m = d / heads` and a `2d` FFN.
    pub fn new(d: usize, heads: usize, layers: usize) -> Self {
        AttentionConfig {
            d,
            heads,
            layers,
            groups: 1,
            pool_window: 1,
            group_pool: false,
            ffn_hidden: 2 * d,
        }
    }

    pub fn with_group_pool(mut self, groups: usize, pool_window: usize) -> Self {
        self.groups = groups;
        self.pool_window = pool_window;
        self.group_pool = true;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(DflatError::config(format!(
                "channels {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_hidden == 0 {
            return Err(DflatError::config("layers and ffn_hidden must be positive"));
        }
        if self.groups == 0 || self.pool_window == 0 {
            return Err(DflatError::config("groups and pool_window must be >= 1"));
        }
        Ok(())
    }

    /// Grouping must split the `lines` source rows (or columns) evenly.
    pub fn validate_grouping(&self, lines: usize, what: &str) -> Result<()> {
        if self.group_pool && !lines.is_multiple_of(self.groups) {
            return Err(DflatError::config(format!(
                "{} groups do not divide {what} extent {lines}",
                self.groups
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HeadIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Parameter handles of one transformer layer.
#[derive(Clone, Debug)]
pub struct LayerIds {
    pub heads: Vec<HeadIds>,
    pub wo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl LayerIds {
    pub fn register(store: &mut ParameterStore, prefix: &str, cfg: &AttentionConfig) -> Result<Self> {
        let (d, dm, f) = (cfg.d, cfg.head_dim(), cfg.ffn_hidden);
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            heads.push(HeadIds {
                wq: store.register_normal(format!("{prefix}.head{h}.wq"), &[d, dm])?,
                wk: store.register_normal(format!("{prefix}.head{h}.wk"), &[d, dm])?,
                wv: store.register_normal(format!("{prefix}.head{h}.wv"), &[d, dm])?,
            });
        }
        Ok(LayerIds {
            heads,
            wo: store.register_normal(format!("{prefix}.wo"), &[cfg.heads * dm, d])?,
            ln1_gain: store.register_ones(format!("{prefix}.ln1.gain"), &[d])?,
            ln1_bias: store.register_zeros(format!("{prefix}.ln1.bias"), &[d])?,
            ffn_w1: store.register_normal(format!("{prefix}.ffn.w1"), &[d, f])?,
            ffn_b1: store.register_zeros(format!("{prefix}.ffn.b1"), &[f])?,
            ffn_w2: store.register_normal(format!("{prefix}.ffn.w2"), &[f, d])?,
            ffn_b2: store.register_zeros(format!("{prefix}.ffn.b2"), &[d])?,
            ln2_gain: store.register_ones(format!("{prefix}.ln2.gain"), &[d])?,
            ln2_bias: store.register_zeros(format!("{prefix}.ln2.bias"), &[d])?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParameterStore) -> LayerVars {
        LayerVars {
            heads: self
                .heads
                .iter()
                .map(|h| HeadVars {
                    wq: tape.param(store, h.wq),
                    wk: tape.param(store, h.wk),
                    wv: tape.param(store, h.wv),
                })
                .collect(),
            wo: tape.param(store, self.wo),
            ln1_gain: tape.param(store, self.ln1_gain),
            ln1_bias: tape.param(store, self.ln1_bias),
            ffn_w1: tape.param(store, self.ffn_w1),
            ffn_b1: tape.param(store, self.ffn_b1),
            ffn_w2: tape.param(store, self.ffn_w2),
            ffn_b2: tape.param(store, self.ffn_b2),
            ln2_gain: tape.param(store, self.ln2_gain),
            ln2_bias: tape.param(store, self.ln2_bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Layer parameters bound onto a tape.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub heads: Vec<HeadVars>,
    pub wo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// A flattened sequence on the tape: raw tokens (values) and tokens plus
/// positional codes (keys), laid out as `lines` runs of `per_line` tokens.
#[derive(Clone, Copy, Debug)]
pub struct SeqVars {
    pub tokens: Var,
    pub keys_in: Var,
    pub lines: usize,
    pub per_line: usize,
}

impl SeqVars {
    pub fn new(tape: &mut Tape, tokens: Var, pos: Var, lines: usize, per_line: usize) -> Result<Self> {
        let n = tape.value(tokens).rows();
        if n != lines * per_line {
            return Err(DflatError::shape("sequence", tape.dims(tokens), &[lines, per_line]));
        }
        let keys_in = tape.add(tokens, pos)?;
        Ok(SeqVars {
            tokens,
            keys_in,
            lines,
            per_line,
        })
    }

    pub fn len(&self) -> usize {
        self.lines * self.per_line
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Labels attention maps recorded on tapped tapes.
#[derive(Clone, Debug)]
pub struct Site {
    pub prefix: String,
    pub layer: usize,
}

impl Site {
    pub fn new(prefix: impl Into<String>, layer: usize) -> Self {
        Site {
            prefix: prefix.into(),
            layer,
        }
    }

    fn label(&self, head: usize, path: &str) -> String {
        format!("{}.layer{}.head{}{}", self.prefix, self.layer, head, path)
    }
}

/// `softmax(q kᵀ / √d_m) · v`, counting every scored pair.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, head_dim: usize) -> Result<(Var, Var)> {
    let raw = tape.matmul_nt(q, k)?;
    let (nq, nk) = (tape.value(raw).rows(), tape.value(raw).cols());
    tape.record_scores(ScoreKind::Transformer, (nq * nk) as u64);
    let scores = tape.scale(raw, 1.0 / (head_dim as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Residual-free increment of one head over the full sequence.
pub fn head_increment(
    tape: &mut Tape,
    query_in: Var,
    seq: &SeqVars,
    head: &HeadVars,
    head_dim: usize,
) -> Result<(Var, Var)> {
    let q = tape.matmul(query_in, head.wq)?;
    let k = tape.matmul(seq.keys_in, head.wk)?;
    let v = tape.matmul(seq.tokens, head.wv)?;
    attend(tape, q, k, v, head_dim)
}

/// One head with its residual: `Z_prev[:, slice] + increment`.
pub fn single_head_attn(
    tape: &mut Tape,
    z_prev: Var,
    seq: &SeqVars,
    z_q: Var,
    head: &HeadVars,
    head_index: usize,
) -> Result<Var> {
    let head_dim = tape.value(head.wq).cols();
    let query_in = tape.add(z_prev, z_q)?;
    let (inc, _) = head_increment(tape, query_in, seq, head, head_dim)?;
    let residual = tape.slice_cols(z_prev, head_index * head_dim, head_dim)?;
    tape.add(residual, inc)
}

fn full_increments(
    tape: &mut Tape,
    query_in: Var,
    seq: &SeqVars,
    layer: &LayerVars,
    head_dim: usize,
    site: Option<&Site>,
) -> Result<Var> {
    let mut incs = Vec::with_capacity(layer.heads.len());
    for (h, head) in layer.heads.iter().enumerate() {
        let (inc, weights) = head_increment(tape, query_in, seq, head, head_dim)?;
        if let Some(site) = site {
            tape.tap(|| site.label(h, ""), weights);
        }
        incs.push(inc);
    }
    tape.concat_cols(&incs)
}

/// `[head_0; …; head_{n_h−1}] · W^O` over the full sequence.
pub fn multi_head_attn(
    tape: &mut Tape,
    z_prev: Var,
    seq: &SeqVars,
    z_q: Var,
    layer: &LayerVars,
    site: Option<&Site>,
) -> Result<Var> {
    let head_dim = tape.value(layer.heads[0].wq).cols();
    let query_in = tape.add(z_prev, z_q)?;
    let incs = full_increments(tape, query_in, seq, layer, head_dim, site)?;
    let heads = tape.add(z_prev, incs)?;
    tape.matmul(heads, layer.wo)
}

/// Group of query `i` among `n_q` queries split into `groups`.
pub fn query_group(i: usize, n_q: usize, groups: usize) -> usize {
    i * groups / n_q
}

/// Contiguous query index range of every group.
fn query_ranges(n_q: usize, groups: usize) -> Vec<(usize, usize)> {
    let mut ranges = vec![(usize::MAX, 0); groups];
    for i in 0..n_q {
        let g = query_group(i, n_q, groups);
        ranges[g].0 = ranges[g].0.min(i);
        ranges[g].1 = i + 1;
    }
    ranges
}

/// Grouped path: query group `g` attends only to feature group `g`, the
/// block of `lines / groups` consecutive source lines. Residual-free.
pub fn grouped_attn(
    tape: &mut Tape,
    z_prev: Var,
    seq: &SeqVars,
    z_q: Var,
    layer: &LayerVars,
    groups: usize,
    site: Option<&Site>,
) -> Result<Var> {
    if groups == 0 || !seq.lines.is_multiple_of(groups) {
        return Err(DflatError::config(format!(
            "{groups} groups do not divide {} source lines",
            seq.lines
        )));
    }
    let n_q = tape.value(z_q).rows();
    if n_q < groups {
        return Err(DflatError::config(format!("{n_q} queries cannot fill {groups} groups")));
    }
    let head_dim = tape.value(layer.heads[0].wq).cols();
    let query_in = tape.add(z_prev, z_q)?;
    let block = seq.lines / groups * seq.per_line;
    let ranges = query_ranges(n_q, groups);
    let mut incs = Vec::with_capacity(layer.heads.len());
    for (h, head) in layer.heads.iter().enumerate() {
        let q = tape.matmul(query_in, head.wq)?;
        let k = tape.matmul(seq.keys_in, head.wk)?;
        let v = tape.matmul(seq.tokens, head.wv)?;
        let mut parts = Vec::with_capacity(groups);
        for (g, &(start, end)) in ranges.iter().enumerate() {
            let qg = tape.slice_rows(q, start, end - start)?;
            let kg = tape.slice_rows(k, g * block, block)?;
            let vg = tape.slice_rows(v, g * block, block)?;
            let (out, weights) = attend(tape, qg, kg, vg, head_dim)?;
            if let Some(site) = site {
                tape.tap(|| site.label(h, &format!(".group{g}")), weights);
            }
            parts.push(out);
        }
        incs.push(tape.concat_rows(&parts)?);
    }
    tape.concat_cols(&incs)
}

/// Window means along each line (trailing partial windows average their
/// actual members) and the matching first-member gather for the codes.
pub fn pooling_maps(lines: usize, per_line: usize, window: usize) -> (RowMix, RowMix) {
    let n_in = lines * per_line;
    let mut means = Vec::new();
    let mut firsts = Vec::new();
    for line in 0..lines {
        for start in (0..per_line).step_by(window) {
            let end = (start + window).min(per_line);
            let weight = 1.0 / (end - start) as f64;
            means.push((start..end).map(|t| (line * per_line + t, weight)).collect());
            firsts.push(vec![(line * per_line + start, 1.0)]);
        }
    }
    (RowMix { n_in, rows: means }, RowMix { n_in, rows: firsts })
}

/// Length of a pooled line: `⌈per_line / window⌉`.
pub fn pooled_len(per_line: usize, window: usize) -> usize {
    per_line.div_ceil(window)
}

/// Pooled path: every query attends to the window-averaged sequence.
/// `pos` is the key code sequence; pooled codes are taken from each window's
/// first member, which equals the line's constant code. Residual-free.
#[allow(clippy::too_many_arguments)]
pub fn pooled_attn(
    tape: &mut Tape,
    z_prev: Var,
    seq: &SeqVars,
    pos: Var,
    z_q: Var,
    layer: &LayerVars,
    window: usize,
    site: Option<&Site>,
) -> Result<Var> {
    if window == 0 {
        return Err(DflatError::config("pool window must be >= 1"));
    }
    let (mean, first) = pooling_maps(seq.lines, seq.per_line, window);
    let pooled_tokens = tape.row_mix(seq.tokens, Arc::new(mean))?;
    let pooled_pos = tape.row_mix(pos, Arc::new(first))?;
    let pooled = SeqVars::new(
        tape,
        pooled_tokens,
        pooled_pos,
        seq.lines,
        pooled_len(seq.per_line, window),
    )?;
    let head_dim = tape.value(layer.heads[0].wq).cols();
    let query_in = tape.add(z_prev, z_q)?;
    let mut incs = Vec::with_capacity(layer.heads.len());
    for (h, head) in layer.heads.iter().enumerate() {
        let (inc, weights) = head_increment(tape, query_in, &pooled, head, head_dim)?;
        if let Some(site) = site {
            tape.tap(|| site.label(h, ".pooled"), weights);
        }
        incs.push(inc);
    }
    tape.concat_cols(&incs)
}

/// `(Z_prev + grouped + pooled) · W^O`.
#[allow(clippy::too_many_arguments)]
pub fn group_pool_attn(
    tape: &mut Tape,
    z_prev: Var,
    seq: &SeqVars,
    pos: Var,
    z_q: Var,
    layer: &LayerVars,
    groups: usize,
    window: usize,
    site: Option<&Site>,
) -> Result<Var> {
    let grouped = grouped_attn(tape, z_prev, seq, z_q, layer, groups, site)?;
    let pooled = pooled_attn(tape, z_prev, seq, pos, z_q, layer, window, site)?;
    let incs = tape.add(grouped, pooled)?;
    let heads = tape.add(z_prev, incs)?;
    tape.matmul(heads, layer.wo)
}

/// `LN2(x + W2 · relu(W1 · x + b1) + b2)`.
pub fn ffn_block(tape: &mut Tape, x: Var, layer: &LayerVars) -> Result<Var> {
    let h = tape.matmul(x, layer.ffn_w1)?;
    let h = tape.add_bias(h, layer.ffn_b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, layer.ffn_w2)?;
    let y = tape.add_bias(y, layer.ffn_b2)?;
    let sum = tape.add(x, y)?;
    tape.layer_norm(sum, layer.ln2_gain, layer.ln2_bias)
}

/// One full layer up to the FFN output `O_l`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    tape: &mut Tape,
    z_prev: Var,
    seq: &SeqVars,
    pos: Var,
    z_q: Var,
    layer: &LayerVars,
    cfg: &AttentionConfig,
    site: Option<&Site>,
) -> Result<Var> {
    let mixed = if cfg.group_pool {
        group_pool_attn(tape, z_prev, seq, pos, z_q, layer, cfg.groups, cfg.pool_window, site)?
    } else {
        multi_head_attn(tape, z_prev, seq, z_q, layer, site)?
    };
    let normed = tape.layer_norm(mixed, layer.ln1_gain, layer.ln1_bias)?;
    ffn_block(tape, normed, layer)
}

/// Row-column interactive step; returns `(Z_r, Z_c)`.
pub fn interactive_attn(tape: &mut Tape, o_r: Var, o_c: Var, site: Option<&Site>) -> Result<(Var, Var)> {
    let d = tape.value(o_r).cols();
    if tape.value(o_c).cols() != d {
        return Err(DflatError::shape("interactive_attn", tape.dims(o_r), tape.dims(o_c)));
    }
    let raw = tape.matmul_nt(o_r, o_c)?;
    let (n_r, n_c) = (tape.value(raw).rows(), tape.value(raw).cols());
    tape.record_scores(ScoreKind::Interactive, (n_r * n_c) as u64);
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let row_weights = tape.softmax_rows(scores);
    if let Some(site) = site {
        tape.tap(|| format!("{}.layer{}", site.prefix, site.layer), row_weights);
    }
    let scores_t = tape.transpose(scores);
    let col_weights = tape.softmax_rows(scores_t);
    let from_cols = tape.matmul(row_weights, o_c)?;
    let z_r = tape.add(from_cols, o_r)?;
    let from_rows = tape.matmul(col_weights, o_r)?;
    let z_c = tape.add(from_rows, o_c)?;
    Ok((z_r, z_c))
}

/// Flattened-token order for an orientation as a row gather.
pub fn flatten_mix(orientation: Orientation, h: usize, w: usize) -> RowMix {
    RowMix::gather(h * w, &orientation.permutation(h, w))
}
