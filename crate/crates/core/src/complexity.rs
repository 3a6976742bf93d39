//! Score-pair and multiply-accumulate accounting for the three decoders.
//!
//! A score pair is one (query, key) dot product. Closed forms are per layer
//! and per head; interactive crossings are reported separately and kept out
//! of the headline transformer figure. [`enumerate_scores`] counts the pairs
//! the real implementation evaluates, as an oracle for [`count_scores`].

use std::fmt;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{pooled_len, AttentionConfig};
use crate::error::{DflatError, Result};
use crate::model::{Decoder, DecoderShape, Variant};
use crate::params::ParameterStore;
use crate::tape::{ScoreKind, Tape};
use crate::tensor::Tensor;

/// Largest `h·w·H·W` that [`enumerate_scores`] will instantiate.
pub const ENUMERATION_LIMIT: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CostVariant {
    Naive,
    FullDflat,
    GroupPoolDflat,
}

impl CostVariant {
    pub const ALL: [CostVariant; 3] = [CostVariant::Naive, CostVariant::FullDflat, CostVariant::GroupPoolDflat];
}

impl fmt::Display for CostVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostVariant::Naive => "naive",
            CostVariant::FullDflat => "full_dflat",
            CostVariant::GroupPoolDflat => "group_pool_dflat",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostParams {
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub groups: usize,
    pub pool_window: usize,
}

impl CostParams {
    /// Single head, single layer, no grouping or pooling.
    pub fn extents(h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        CostParams {
            h,
            w,
            out_h,
            out_w,
            d: 2,
            heads: 1,
            layers: 1,
            groups: 1,
            pool_window: 1,
        }
    }

    fn validate(&self, variant: CostVariant) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.out_h < self.h || self.out_w < self.w {
            return Err(DflatError::config(format!(
                "output {}x{} must cover input {}x{}",
                self.out_h, self.out_w, self.h, self.w
            )));
        }
        if self.heads == 0 || self.layers == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(DflatError::config("heads must divide d and layers must be positive"));
        }
        if self.groups == 0 || self.pool_window == 0 {
            return Err(DflatError::config("groups and pool_window must be >= 1"));
        }
        if variant == CostVariant::GroupPoolDflat && (!self.h.is_multiple_of(self.groups) || !self.w.is_multiple_of(self.groups)) {
            return Err(DflatError::config(format!(
                "{} groups must divide both h={} and w={}",
                self.groups, self.h, self.w
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub variant: CostVariant,
    pub params: CostParams,
    /// Query-key pairs per layer per head.
    pub scores_per_layer: u64,
    /// Transformer pairs over all layers and heads.
    pub scores_total: u64,
    /// Row-column crossings per layer (zero for the dense baseline).
    pub interactive_per_layer: u64,
    /// Attention multiply-accumulates: score dot products plus value
    /// aggregation, over all layers, heads and interactive steps.
    pub mac_count: u64,
    #[serde(serialize_with = "ser_ratio")]
    pub beta_g: Ratio<u64>,
    #[serde(serialize_with = "ser_ratio")]
    pub beta_p: Ratio<u64>,
}

fn ser_ratio<S: serde::Serializer>(r: &Ratio<u64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
}

/// Closed-form counts.
///
/// * naive: `H·W·h·w`
/// * full: `h·w·(H+W)`
/// * group+pool: `β_g·hw·(H+W)` for the grouped path plus
///   `H·h·⌈w/n_w⌉ + W·w·⌈h/n_w⌉` for the pooled path.
pub fn count_scores(variant: CostVariant, p: &CostParams) -> Result<CostReport> {
    p.validate(variant)?;
    let (h, w, hh, ww) = (p.h as u64, p.w as u64, p.out_h as u64, p.out_w as u64);
    let per_layer = match variant {
        CostVariant::Naive => hh * ww * h * w,
        CostVariant::FullDflat => h * w * (hh + ww),
        CostVariant::GroupPoolDflat => {
            let g = p.groups as u64;
            let grouped = h * w / g * (hh + ww);
            let pooled = hh * h * pooled_len(p.w, p.pool_window) as u64 + ww * w * pooled_len(p.h, p.pool_window) as u64;
            grouped + pooled
        }
    };
    let (layers, heads, d) = (p.layers as u64, p.heads as u64, p.d as u64);
    let head_dim = d / heads;
    let scores_total = per_layer * layers * heads;
    let interactive_per_layer = match variant {
        CostVariant::Naive => 0,
        _ => hh * ww,
    };
    let mac_count = scores_total * 2 * head_dim + interactive_per_layer * layers * 3 * d;
    Ok(CostReport {
        variant,
        params: *p,
        scores_per_layer: per_layer,
        scores_total,
        interactive_per_layer,
        mac_count,
        beta_g: Ratio::new(1, p.groups as u64),
        beta_p: Ratio::new(1, p.pool_window as u64),
    })
}

/// Instrumented counts from a real forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Enumerated {
    pub scores_total: u64,
    pub interactive_total: u64,
}

/// Builds the decoder for `variant`, runs one forward pass on a random map
/// and returns every score pair it evaluated.
pub fn enumerate_scores(variant: CostVariant, p: &CostParams) -> Result<Enumerated> {
    p.validate(variant)?;
    let extent = (p.h * p.w * p.out_h * p.out_w) as u64;
    if extent > ENUMERATION_LIMIT {
        return Err(DflatError::Resource(format!(
            "extent product {extent} exceeds {ENUMERATION_LIMIT}"
        )));
    }
    let mut attn = AttentionConfig::new(p.d, p.heads, p.layers);
    attn.ffn_hidden = 2;
    let model_variant = match variant {
        CostVariant::Naive => Variant::Naive,
        CostVariant::FullDflat => Variant::DFlat,
        CostVariant::GroupPoolDflat => {
            attn = attn.with_group_pool(p.groups, p.pool_window);
            Variant::DFlat
        }
    };
    let shape = DecoderShape {
        h: p.h,
        w: p.w,
        out_h: p.out_h,
        out_w: p.out_w,
    };
    let mut store = ParameterStore::new(0);
    let decoder = Decoder::register(&mut store, model_variant, shape, &attn, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(extent);
    let data = (0..p.h * p.w * p.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let s_o = tape.constant(Tensor::new(vec![p.h * p.w, p.d], data)?);
    decoder.decode(&mut tape, &store, s_o)?;
    Ok(Enumerated {
        scores_total: tape.score_count(ScoreKind::Transformer),
        interactive_total: tape.score_count(ScoreKind::Interactive),
    })
}

/// `h=w=4, H=W=16` with quarter groups and windows, followed by `points`
/// random parameter sets small enough to enumerate quickly.
pub fn sweep(points: usize, seed: u64) -> Vec<CostParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![CostParams {
        groups: 4,
        pool_window: 4,
        ..CostParams::extents(4, 4, 16, 16)
    }];
    for _ in 0..points {
        let h = rng.gen_range(1..=6);
        let w = rng.gen_range(1..=6);
        let common: Vec<usize> = (1..=h.min(w)).filter(|g| h % g == 0 && w % g == 0).collect();
        let heads = rng.gen_range(1..=2);
        out.push(CostParams {
            h,
            w,
            out_h: rng.gen_range(h..=3 * h + 3),
            out_w: rng.gen_range(w..=3 * w + 3),
            d: 2 * heads,
            heads,
            layers: rng.gen_range(1..=2),
            groups: common[rng.gen_range(0..common.len())],
            pool_window: rng.gen_range(1..=4),
        });
    }
    out
}

/// Closed form and enumeration side by side.
#[derive(Clone, Debug, Serialize)]
pub struct AuditRow {
    #[serde(flatten)]
    pub report: CostReport,
    pub enumerated_scores: Option<u64>,
    pub enumerated_interactive: Option<u64>,
    pub matches: bool,
}

pub fn audit(variant: CostVariant, p: &CostParams) -> Result<AuditRow> {
    let report = count_scores(variant, p)?;
    let (scores, inter, matches) = match enumerate_scores(variant, p) {
        Ok(e) => (
            Some(e.scores_total),
            Some(e.interactive_total),
            e.scores_total == report.scores_total
                && e.interactive_total == report.interactive_per_layer * p.layers as u64,
        ),
        Err(DflatError::Resource(_)) => (None, None, true),
        Err(e) => return Err(e),
    };
    Ok(AuditRow {
        report,
        enumerated_scores: scores,
        enumerated_interactive: inter,
        matches,
    })
}

/// Fixed-width table of audit rows.
pub fn render_table(rows: &[AuditRow]) -> String {
    let mut out = format!(
        "{:<17} {:>3} {:>3} {:>4} {:>4} {:>3} {:>3} {:>12} {:>12} {:>10} {:>14} {:>6}\n",
        "variant", "h", "w", "H", "W", "n_p", "n_w", "scores/l/h", "enumerated", "interact", "macs", "match"
    );
    for r in rows {
        let p = &r.report.params;
        let enumerated = r.enumerated_scores.map_or_else(|| "-".to_string(), |v| v.to_string());
        out.push_str(&format!(
            "{:<17} {:>3} {:>3} {:>4} {:>4} {:>3} {:>3} {:>12} {:>12} {:>10} {:>14} {:>6}\n",
            r.report.variant.to_string(),
            p.h,
            p.w,
            p.out_h,
            p.out_w,
            p.groups,
            p.pool_window,
            r.report.scores_per_layer,
            enumerated,
            r.report.interactive_per_layer,
            r.report.mac_count,
            if r.matches { "ok" } else { "MISMATCH" }
        ));
    }
    out
}
