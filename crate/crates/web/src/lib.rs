//! WebAssembly bindings for the in-browser demo page in `www/`.
//!
//! Each exported function has a plain-Rust counterpart returning
//! `Result<_, String>` so the logic is testable without a JS host.

use dflat::complexity::{count_scores, CostParams, CostVariant};
use dflat::config::RunConfig;
use dflat::flatten::{interpolate_codes, sinusoid_base};
use dflat::harness::{evaluate, generate_with_noise, held_out_set, train, Task};
use dflat::{Model, Variant};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct CostRow {
    variant: String,
    scores_per_layer: u64,
    interactive_per_layer: u64,
    mac_count: u64,
    beta_g: String,
    beta_p: String,
}

#[allow(clippy::too_many_arguments)]
pub fn cost_rows(
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    groups: usize,
    pool_window: usize,
) -> Result<String, String> {
    let params = CostParams { groups, pool_window, ..CostParams::extents(h, w, out_h, out_w) };
    let mut rows = Vec::new();
    for variant in CostVariant::ALL {
        let r = count_scores(variant, &params).map_err(|e| e.to_string())?;
        rows.push(CostRow {
            variant: variant.to_string(),
            scores_per_layer: r.scores_per_layer,
            interactive_per_layer: r.interactive_per_layer,
            mac_count: r.mac_count,
            beta_g: r.beta_g.to_string(),
            beta_p: r.beta_p.to_string(),
        });
    }
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

/// Single-head, single-layer attention score counts as a JSON array.
#[wasm_bindgen(js_name = costTable)]
pub fn cost_table(h: usize, w: usize, out_h: usize, out_w: usize, groups: usize, pool_window: usize) -> Result<String, JsValue> {
    cost_rows(h, w, out_h, out_w, groups, pool_window).map_err(|e| JsValue::from_str(&e))
}

/// Row-major `target × d` query codes interpolated from `n` base codes.
pub fn query_codes(n: usize, target: usize, d: usize) -> Result<Vec<f64>, String> {
    let base = sinusoid_base(n, d).map_err(|e| e.to_string())?;
    let codes = interpolate_codes(&base, target).map_err(|e| e.to_string())?;
    Ok(codes.data().to_vec())
}

#[wasm_bindgen(js_name = queryCodes)]
pub fn query_codes_js(n: usize, target: usize, d: usize) -> Result<Vec<f64>, JsValue> {
    query_codes(n, target, d).map_err(|e| JsValue::from_str(&e))
}

#[derive(Serialize, Debug)]
pub struct SegmentationDemo {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Row-major RGB in `[0, 1]`.
    pub image: Vec<f64>,
    pub truth: Vec<usize>,
    pub dflat: Vec<usize>,
    pub bilinear: Vec<usize>,
    pub dflat_miou: f64,
    pub bilinear_miou: f64,
}

const MAX_DEMO_STEPS: usize = 2000;

/// Trains the decoder and the bilinear baseline on the same batches, then
/// predicts one fresh sample with both.
pub fn segmentation(task: &str, steps: usize, seed: u64) -> Result<SegmentationDemo, String> {
    let task: Task = task.parse().map_err(|e: dflat::DflatError| e.to_string())?;
    if steps == 0 || steps > MAX_DEMO_STEPS {
        return Err(format!("steps must be in 1..={MAX_DEMO_STEPS}"));
    }
    let mut cfg = RunConfig::default();
    let overrides = [
        format!("task={task}"),
        format!("steps={steps}"),
        format!("eval_every={steps}"),
        format!("seed={seed}"),
    ];
    for o in &overrides {
        cfg.apply_override(o).map_err(|e| e.to_string())?;
    }
    // No threads in the browser.
    cfg.train.parallel = false;
    cfg.validate().map_err(|e| e.to_string())?;
    let m = &cfg.model;
    let sample = generate_with_noise(task, 1, m.out_h, m.out_w, m.classes, cfg.train.noise, seed ^ 0x5eed)
        .map_err(|e| e.to_string())?
        .remove(0);
    let mut predictions = Vec::new();
    let mut scores = Vec::new();
    for variant in [Variant::DFlat, Variant::Bilinear] {
        let mut model = Model::new(cfg.model.clone(), variant).map_err(|e| e.to_string())?;
        train(&mut model, &cfg.train, |_| {}).map_err(|e| e.to_string())?;
        let held = held_out_set(&model, &cfg.train).map_err(|e| e.to_string())?;
        scores.push(evaluate(&model, &held).map_err(|e| e.to_string())?.miou);
        predictions.push(model.predict(&sample.image).map_err(|e| e.to_string())?);
    }
    let bilinear = predictions.pop().unwrap_or_default();
    let dflat = predictions.pop().unwrap_or_default();
    Ok(SegmentationDemo {
        height: m.out_h,
        width: m.out_w,
        classes: m.classes,
        image: sample.image.data().to_vec(),
        truth: sample.mask,
        dflat,
        bilinear,
        dflat_miou: scores[0],
        bilinear_miou: scores[1],
    })
}

#[wasm_bindgen(js_name = trainAndSegment)]
pub fn train_and_segment(task: &str, steps: usize, seed: u64) -> Result<String, JsValue> {
    let demo = segmentation(task, steps, seed).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&demo).map_err(|e| JsValue::from_str(&e.to_string()))
}
