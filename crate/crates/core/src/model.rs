//! Full segmentation model: patch encoder, decoder, per-pixel classifier.
//!
//! Three decoders share the encoder and head so they can be trained
//! identically: the row/column query decoder, a dense transformer
//! with one query per output pixel, and plain bilinear upsampling.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::attention::{flatten_mix, interactive_attn, transformer_layer, AttentionConfig, LayerIds, SeqVars, Site};
use crate::error::{DflatError, Result};
use crate::flatten::{align_corners, FeatureMap, Orientation, PositionalCodes};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{RowMix, Tape, Var};
use crate::tensor::Tensor;

/// Largest number of per-pixel queries the dense baseline accepts.
pub const NAIVE_QUERY_LIMIT: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    DFlat,
    Naive,
    Bilinear,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::DFlat => "dflat",
            Variant::Naive => "naive",
            Variant::Bilinear => "bilinear",
        })
    }
}

impl FromStr for Variant {
    type Err = DflatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dflat" => Ok(Variant::DFlat),
            "naive" => Ok(Variant::Naive),
            "bilinear" => Ok(Variant::Bilinear),
            other => Err(DflatError::config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Encoder extent `h×w` and output extent `H×W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderShape {
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl DecoderShape {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.out_h < self.h || self.out_w < self.w {
            return Err(DflatError::config(format!(
                "output {}x{} must cover encoder {}x{}",
                self.out_h, self.out_w, self.h, self.w
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub out_h: usize,
    pub out_w: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub attention: AttentionConfig,
    pub interactive: bool,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 32×32 output, patch 4, d=32, 4 heads, 2 layers, 3 classes.
    pub fn desk_default() -> Self {
        ModelConfig {
            out_h: 32,
            out_w: 32,
            patch: 4,
            in_channels: 3,
            attention: AttentionConfig::new(32, 4, 2),
            interactive: true,
            classes: 3,
            seed: 0,
        }
    }

    /// The 3×3 → 6×6, d=8, two-head, two-layer model used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            out_h: 6,
            out_w: 6,
            patch: 2,
            in_channels: 3,
            attention: AttentionConfig::new(8, 2, 2),
            interactive: true,
            classes: 3,
            seed: 0,
        }
    }

    pub fn enc_h(&self) -> usize {
        self.out_h / self.patch
    }

    pub fn enc_w(&self) -> usize {
        self.out_w / self.patch
    }

    pub fn shape(&self) -> DecoderShape {
        DecoderShape {
            h: self.enc_h(),
            w: self.enc_w(),
            out_h: self.out_h,
            out_w: self.out_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.out_h.is_multiple_of(self.patch) || !self.out_w.is_multiple_of(self.patch) {
            return Err(DflatError::config(format!(
                "patch {} must divide output extent {}x{}",
                self.patch, self.out_h, self.out_w
            )));
        }
        if self.classes < 2 {
            return Err(DflatError::config("need at least 2 classes"));
        }
        if self.in_channels == 0 {
            return Err(DflatError::config("need at least 1 input channel"));
        }
        let d = self.attention.d;
        if d < 2 || !d.is_multiple_of(2) {
            return Err(DflatError::config(format!("channels {d} must be even and >= 2")));
        }
        self.attention.validate()?;
        self.shape().validate()
    }
}

/// Query set and layers of one transformer stack.
#[derive(Clone, Debug)]
pub struct TransformerIds {
    pub queries: ParamId,
    pub layers: Vec<LayerIds>,
}

impl TransformerIds {
    fn register(store: &mut ParameterStore, prefix: &str, query_codes: &Tensor, cfg: &AttentionConfig) -> Result<Self> {
        let mut queries = store.normal(query_codes.dims(), crate::params::INIT_STD);
        queries.add_assign(query_codes);
        let queries = store.register(format!("{prefix}.queries"), queries)?;
        let layers = (0..cfg.layers)
            .map(|l| LayerIds::register(store, &format!("{prefix}.layer{l}"), cfg))
            .collect::<Result<_>>()?;
        Ok(TransformerIds { queries, layers })
    }
}

#[derive(Clone, Debug)]
enum DecoderIds {
    DFlat { row: TransformerIds, col: TransformerIds },
    Naive(TransformerIds),
    Bilinear,
}

/// Decoder outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DecodedVars {
    /// Dense map, `HW×d` in row-major pixel order.
    pub s: Var,
    pub z_r: Option<Var>,
    pub z_c: Option<Var>,
}

/// Any of the three decoders, independent of how `S_o` was produced.
#[derive(Clone, Debug)]
pub struct Decoder {
    variant: Variant,
    shape: DecoderShape,
    attn: AttentionConfig,
    interactive: bool,
    ids: DecoderIds,
    row_codes: PositionalCodes,
    col_codes: PositionalCodes,
    naive_keys: Option<Tensor>,
    col_flatten: Arc<RowMix>,
    compose: Arc<RowMix>,
    bilinear: Arc<RowMix>,
}

impl Decoder {
    pub fn register(
        store: &mut ParameterStore,
        variant: Variant,
        shape: DecoderShape,
        attn: &AttentionConfig,
        interactive: bool,
    ) -> Result<Self> {
        shape.validate()?;
        attn.validate()?;
        let DecoderShape { h, w, out_h, out_w } = shape;
        let d = attn.d;
        if variant == Variant::DFlat {
            attn.validate_grouping(h, "row")?;
            attn.validate_grouping(w, "column")?;
        }
        if variant == Variant::Naive && out_h * out_w > NAIVE_QUERY_LIMIT {
            return Err(DflatError::Resource(format!(
                "dense baseline needs {} queries, limit is {NAIVE_QUERY_LIMIT}",
                out_h * out_w
            )));
        }
        let row_codes = PositionalCodes::build(h, out_h, w, d)?;
        let col_codes = PositionalCodes::build(w, out_w, h, d)?;
        let mut naive_keys = None;
        let ids = match variant {
            Variant::DFlat => DecoderIds::DFlat {
                row: TransformerIds::register(store, "row", &row_codes.query_codes, attn)?,
                col: TransformerIds::register(store, "col", &col_codes.query_codes, attn)?,
            },
            Variant::Naive => {
                let codes = grid_codes(&row_codes.query_codes, &col_codes.query_codes);
                naive_keys = Some(grid_codes(&row_codes.base, &col_codes.base));
                let full = AttentionConfig {
                    group_pool: false,
                    ..attn.clone()
                };
                DecoderIds::Naive(TransformerIds::register(store, "naive", &codes, &full)?)
            }
            Variant::Bilinear => DecoderIds::Bilinear,
        };
        let compose = RowMix {
            n_in: out_h + out_w,
            rows: (0..out_h * out_w)
                .map(|p| vec![(p / out_w, 1.0), (out_h + p % out_w, 1.0)])
                .collect(),
        };
        Ok(Decoder {
            variant,
            shape,
            attn: attn.clone(),
            interactive,
            ids,
            row_codes,
            col_codes,
            naive_keys,
            col_flatten: Arc::new(flatten_mix(Orientation::Column, h, w)),
            compose: Arc::new(compose),
            bilinear: Arc::new(bilinear_mix(h, w, out_h, out_w)),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn shape(&self) -> DecoderShape {
        self.shape
    }

    pub fn row_codes(&self) -> &PositionalCodes {
        &self.row_codes
    }

    pub fn col_codes(&self) -> &PositionalCodes {
        &self.col_codes
    }

    /// Decodes `s_o` (`hw×d`, row-major cells) into an `HW×d` dense map.
    pub fn decode(&self, tape: &mut Tape, store: &ParameterStore, s_o: Var) -> Result<DecodedVars> {
        let DecoderShape { h, w, out_h, out_w } = self.shape;
        let expect = [h * w, self.attn.d];
        if tape.dims(s_o) != expect {
            return Err(DflatError::shape("decode", tape.dims(s_o), &expect));
        }
        match &self.ids {
            DecoderIds::DFlat { row, col } => {
                let pos_r = tape.constant(self.row_codes.key_codes.clone());
                let seq_r = SeqVars::new(tape, s_o, pos_r, h, w)?;
                let tokens_c = tape.row_mix(s_o, self.col_flatten.clone())?;
                let pos_c = tape.constant(self.col_codes.key_codes.clone());
                let seq_c = SeqVars::new(tape, tokens_c, pos_c, w, h)?;
                let zq_r = tape.param(store, row.queries);
                let zq_c = tape.param(store, col.queries);
                let mut z_r = tape.constant(Tensor::zeros(&[out_h, self.attn.d]));
                let mut z_c = tape.constant(Tensor::zeros(&[out_w, self.attn.d]));
                for l in 0..self.attn.layers {
                    let lr = row.layers[l].bind(tape, store);
                    let lc = col.layers[l].bind(tape, store);
                    let site_r = Site::new("row", l);
                    let site_c = Site::new("col", l);
                    let o_r = transformer_layer(tape, z_r, &seq_r, pos_r, zq_r, &lr, &self.attn, Some(&site_r))?;
                    let o_c = transformer_layer(tape, z_c, &seq_c, pos_c, zq_c, &lc, &self.attn, Some(&site_c))?;
                    if self.interactive {
                        (z_r, z_c) = interactive_attn(tape, o_r, o_c, Some(&Site::new("interactive", l)))?;
                    } else {
                        (z_r, z_c) = (o_r, o_c);
                    }
                }
                let both = tape.concat_rows(&[z_r, z_c])?;
                let s = tape.row_mix(both, self.compose.clone())?;
                Ok(DecodedVars {
                    s,
                    z_r: Some(z_r),
                    z_c: Some(z_c),
                })
            }
            DecoderIds::Naive(stack) => {
                let keys = self.naive_keys.clone().expect("naive decoder has key codes");
                let pos = tape.constant(keys);
                let seq = SeqVars::new(tape, s_o, pos, h, w)?;
                let zq = tape.param(store, stack.queries);
                let full = AttentionConfig {
                    group_pool: false,
                    ..self.attn.clone()
                };
                let mut z = tape.constant(Tensor::zeros(&[out_h * out_w, self.attn.d]));
                for (l, layer) in stack.layers.iter().enumerate() {
                    let vars = layer.bind(tape, store);
                    z = transformer_layer(tape, z, &seq, pos, zq, &vars, &full, Some(&Site::new("naive", l)))?;
                }
                Ok(DecodedVars {
                    s: z,
                    z_r: None,
                    z_c: None,
                })
            }
            DecoderIds::Bilinear => Ok(DecodedVars {
                s: tape.row_mix(s_o, self.bilinear.clone())?,
                z_r: None,
                z_c: None,
            }),
        }
    }
}

/// `out[i·m + j] = a[i] + b[j]` for code tables `a` (n×d) and `b` (m×d).
fn grid_codes(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.cols();
    let mut data = Vec::with_capacity(a.rows() * b.rows() * d);
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            data.extend(a.row(i).iter().zip(b.row(j)).map(|(x, y)| x + y));
        }
    }
    Tensor::new(vec![a.rows() * b.rows(), d], data).expect("grid dims")
}

/// Endpoint-aligned bilinear resampling of an `h×w` grid to `H×W`.
pub fn bilinear_mix(h: usize, w: usize, out_h: usize, out_w: usize) -> RowMix {
    let mut rows = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (y0, fy) = align_corners(i, h, out_h);
        for j in 0..out_w {
            let (x0, fx) = align_corners(j, w, out_w);
            let mut terms = Vec::with_capacity(4);
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let weight = wy * wx;
                    if weight != 0.0 {
                        terms.push(((y0 + dy) * w + x0 + dx, weight));
                    }
                }
            }
            rows.push(terms);
        }
    }
    RowMix { n_in: h * w, rows }
}

/// Per-channel bilinear upsampling of a feature map to `H×W×d`.
pub fn bilinear_upsample(map: &FeatureMap, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, d) = (map.height(), map.width(), map.channels());
    if out_h < h || out_w < w {
        return Err(DflatError::config("bilinear_upsample only enlarges"));
    }
    bilinear_mix(h, w, out_h, out_w)
        .apply(&map.as_matrix())?
        .reshape(&[out_h, out_w, d])
}

/// Dense prediction with the decoder state that produced it.
#[derive(Clone, Debug)]
pub struct DenseOutput {
    /// `H×W×d`.
    pub s: Tensor,
    /// `H×W×classes`.
    pub logits: Tensor,
    pub z_r: Option<Tensor>,
    pub z_c: Option<Tensor>,
}

impl DenseOutput {
    /// Argmax class per pixel, row-major.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.dims().last().expect("non-empty dims");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Tape handles of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub s_o: Var,
    pub decoded: DecodedVars,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParameterStore,
    encoder_w: ParamId,
    encoder_b: ParamId,
    decoder: Decoder,
    head_w: ParamId,
    head_b: ParamId,
}

impl Model {
    pub fn new(cfg: ModelConfig, variant: Variant) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new(cfg.seed);
        let d = cfg.attention.d;
        let patch_len = cfg.patch * cfg.patch * cfg.in_channels;
        let encoder_w = store.register_normal("encoder.weight", &[patch_len, d])?;
        let encoder_b = store.register_zeros("encoder.bias", &[d])?;
        let decoder = Decoder::register(&mut store, variant, cfg.shape(), &cfg.attention, cfg.interactive)?;
        let head_w = store.register_normal("head.weight", &[d, cfg.classes])?;
        let head_b = store.register_zeros("head.bias", &[cfg.classes])?;
        Ok(Model {
            cfg,
            store,
            encoder_w,
            encoder_b,
            decoder,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.decoder.variant
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Non-overlapping `patch×patch` blocks as rows of an `hw × p²c` matrix.
    pub fn patches(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        let expect = [c.out_h, c.out_w, c.in_channels];
        if image.dims() != expect {
            return Err(DflatError::config(format!(
                "image dims {:?} do not match configured {:?}",
                image.dims(),
                expect
            )));
        }
        let (p, ch) = (c.patch, c.in_channels);
        let (h, w) = (c.enc_h(), c.enc_w());
        let mut data = Vec::with_capacity(h * w * p * p * ch);
        for bi in 0..h {
            for bj in 0..w {
                for di in 0..p {
                    let y = bi * p + di;
                    let start = (y * c.out_w + bj * p) * ch;
                    data.extend_from_slice(&image.data()[start..start + p * ch]);
                }
            }
        }
        Tensor::new(vec![h * w, p * p * ch], data)
    }

    pub fn encode_vars(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        let patches = tape.constant(self.patches(image)?);
        let wv = tape.param(&self.store, self.encoder_w);
        let bv = tape.param(&self.store, self.encoder_b);
        let proj = tape.matmul(patches, wv)?;
        tape.add_bias(proj, bv)
    }

    /// Shared affine head applied to every pixel of `s` (`HW×d`).
    pub fn classify_vars(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        let wv = tape.param(&self.store, self.head_w);
        let bv = tape.param(&self.store, self.head_b);
        let logits = tape.matmul(s, wv)?;
        tape.add_bias(logits, bv)
    }

    pub fn forward_vars(&self, tape: &mut Tape, image: &Tensor) -> Result<ForwardVars> {
        let s_o = self.encode_vars(tape, image)?;
        self.decode_vars(tape, s_o)
    }

    pub fn decode_vars(&self, tape: &mut Tape, s_o: Var) -> Result<ForwardVars> {
        let decoded = self.decoder.decode(tape, &self.store, s_o)?;
        let logits = self.classify_vars(tape, decoded.s)?;
        Ok(ForwardVars { s_o, decoded, logits })
    }

    /// Mean pixel-wise cross-entropy of one sample on a fresh tape.
    pub fn loss_on(&self, tape: &mut Tape, image: &Tensor, mask: &[usize]) -> Result<Var> {
        let fwd = self.forward_vars(tape, image)?;
        tape.cross_entropy(fwd.logits, mask)
    }

    /// Loss value and parameter gradients for one sample.
    pub fn loss_and_grads(&self, image: &Tensor, mask: &[usize]) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        let mut tape = Tape::new();
        let loss = self.loss_on(&mut tape, image, mask)?;
        let value = tape.value(loss).data()[0];
        Ok((value, tape.gradients(loss)?))
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let v = self.encode_vars(&mut tape, image)?;
        let (h, w, d) = (self.cfg.enc_h(), self.cfg.enc_w(), self.cfg.attention.d);
        FeatureMap::new(tape.value(v).clone().reshape(&[h, w, d])?)
    }

    /// Decoder plus head on a given encoder map.
    pub fn decode(&self, s_o: &FeatureMap) -> Result<DenseOutput> {
        let mut tape = Tape::new();
        let s_o = tape.constant(s_o.as_matrix());
        let fwd = self.decode_vars(&mut tape, s_o)?;
        Ok(self.collect(&tape, &fwd))
    }

    /// Runs the row/column decoder on `s_o`; errors for other variants.
    pub fn dflat_forward(&self, s_o: &FeatureMap) -> Result<DenseOutput> {
        self.require(Variant::DFlat)?;
        self.decode(s_o)
    }

    pub fn naive_dense_forward(&self, s_o: &FeatureMap) -> Result<DenseOutput> {
        self.require(Variant::Naive)?;
        self.decode(s_o)
    }

    pub fn forward(&self, image: &Tensor) -> Result<DenseOutput> {
        let mut tape = Tape::new();
        let fwd = self.forward_vars(&mut tape, image)?;
        Ok(self.collect(&tape, &fwd))
    }

    pub fn predict(&self, image: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(image)?.predictions())
    }

    fn require(&self, variant: Variant) -> Result<()> {
        if self.variant() != variant {
            return Err(DflatError::config(format!(
                "model is {}, operation needs {variant}",
                self.variant()
            )));
        }
        Ok(())
    }

    fn collect(&self, tape: &Tape, fwd: &ForwardVars) -> DenseOutput {
        let (hh, ww, d, k) = (self.cfg.out_h, self.cfg.out_w, self.cfg.attention.d, self.cfg.classes);
        DenseOutput {
            s: tape.value(fwd.decoded.s).clone().reshape(&[hh, ww, d]).expect("HW×d"),
            logits: tape.value(fwd.logits).clone().reshape(&[hh, ww, k]).expect("HW×classes"),
            z_r: fwd.decoded.z_r.map(|v| tape.value(v).clone()),
            z_c: fwd.decoded.z_c.map(|v| tape.value(v).clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, d: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(Tensor::new(vec![h, w, d], data).unwrap()).unwrap()
    }

    #[test]
    fn patch_one_is_per_pixel_projection() {
        let cfg = ModelConfig {
            patch: 1,
            out_h: 4,
            out_w: 3,
            ..ModelConfig::tiny()
        };
        let model = Model::new(cfg, Variant::DFlat).unwrap();
        let image = Tensor::filled(&[4, 3, 3], 0.5);
        let map = model.encode(&image).unwrap();
        assert_eq!((map.height(), map.width()), (4, 3));
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let model = Model::new(ModelConfig::desk_default(), Variant::DFlat).unwrap();
        let image = Tensor::filled(&[32, 32, 3], 0.25);
        let map = model.encode(&image).unwrap();
        let first = map.cell(0, 0).to_vec();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(map.cell(i, j), first.as_slice());
            }
        }
    }

    #[test]
    fn eight_by_eight_patch_four_gives_two_by_two() {
        let cfg = ModelConfig {
            out_h: 8,
            out_w: 8,
            patch: 4,
            ..ModelConfig::tiny()
        };
        let model = Model::new(cfg, Variant::DFlat).unwrap();
        let map = model.encode(&Tensor::zeros(&[8, 8, 3])).unwrap();
        assert_eq!(map.values().dims(), &[2, 2, 8]);
    }

    #[test]
    fn indivisible_extent_is_config_error() {
        let cfg = ModelConfig {
            out_h: 7,
            ..ModelConfig::tiny()
        };
        assert!(matches!(Model::new(cfg, Variant::DFlat), Err(DflatError::Config(_))));
    }

    #[test]
    fn output_extent_and_composition() {
        for (h, w, out_h, out_w) in [(2, 3, 5, 7), (1, 1, 3, 2), (3, 2, 3, 2)] {
            let mut store = ParameterStore::new(1);
            let attn = AttentionConfig::new(4, 2, 1);
            let shape = DecoderShape { h, w, out_h, out_w };
            let dec = Decoder::register(&mut store, Variant::DFlat, shape, &attn, true).unwrap();
            let mut tape = Tape::new();
            let s_o = tape.constant(random_map(h, w, 4, 2).as_matrix());
            let out = dec.decode(&mut tape, &store, s_o).unwrap();
            let s = tape.value(out.s);
            assert_eq!(s.dims(), &[out_h * out_w, 4]);
            let (zr, zc) = (tape.value(out.z_r.unwrap()), tape.value(out.z_c.unwrap()));
            for i in 0..out_h {
                for j in 0..out_w {
                    for k in 0..4 {
                        assert_eq!(s.at(i * out_w + j, k), zr.at(i, k) + zc.at(j, k));
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_examples() {
        let single = random_map(1, 1, 2, 3);
        let up = bilinear_upsample(&single, 4, 5).unwrap();
        for p in 0..20 {
            assert_eq!(&up.data()[p * 2..p * 2 + 2], single.cell(0, 0));
        }
        let m = FeatureMap::new(Tensor::new(vec![2, 2, 2], vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0]).unwrap()).unwrap();
        let up = bilinear_upsample(&m, 3, 3).unwrap();
        assert_eq!(&up.data()[8..10], &[1.0, 1.0]);
        let m = random_map(3, 4, 2, 4);
        assert_eq!(&bilinear_upsample(&m, 3, 4).unwrap(), m.values());
    }

    #[test]
    fn naive_guard_and_score_extent() {
        let mut store = ParameterStore::new(0);
        let attn = AttentionConfig::new(4, 1, 1);
        let big = DecoderShape { h: 1, w: 1, out_h: 300, out_w: 300 };
        assert!(matches!(
            Decoder::register(&mut store, Variant::Naive, big, &attn, false),
            Err(DflatError::Resource(_))
        ));
        let shape = DecoderShape { h: 2, w: 2, out_h: 4, out_w: 4 };
        let dec = Decoder::register(&mut store, Variant::Naive, shape, &attn, false).unwrap();
        let mut tape = Tape::with_taps();
        let s_o = tape.constant(random_map(2, 2, 4, 5).as_matrix());
        dec.decode(&mut tape, &store, s_o).unwrap();
        let tap = &tape.taps()[0];
        assert_eq!(tape.dims(tap.var), &[16, 4]);
    }

    #[test]
    fn classify_constant_head() {
        let mut model = Model::new(ModelConfig::tiny(), Variant::Bilinear).unwrap();
        let id = model.store().id("head.weight").unwrap();
        model.store_mut().value_mut(id).data_mut().fill(0.0);
        let bid = model.store().id("head.bias").unwrap();
        model.store_mut().value_mut(bid).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let out = model.forward(&Tensor::filled(&[6, 6, 3], 0.3)).unwrap();
        assert_eq!(out.logits.dims(), &[6, 6, 3]);
        for px in out.logits.data().chunks(3) {
            assert_eq!(px, &[0.5, -1.0, 2.0]);
        }
        let shifted = out.logits.map(|v| v + 7.0);
        assert_eq!(argmax_rows(&shifted), out.predictions());
    }
}
