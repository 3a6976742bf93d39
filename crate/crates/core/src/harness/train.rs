//! Minibatch training with SGD or Adam on freshly generated batches.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::data::{generate_with_noise, SyntheticSample, Task, DEFAULT_NOISE};
use super::metrics::Confusion;
use crate::error::{DflatError, Result};
use crate::model::Model;
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Environment variable that forces single-threaded batch evaluation.
pub const DETERMINISTIC_ENV: &str = "DFLAT_DETERMINISTIC";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = DflatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::adam()),
            other => Err(DflatError::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_size: usize,
    pub noise: f64,
    /// Split each batch across threads. Results are reduced in sample order
    /// either way.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Stripes,
            steps: 500,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            seed: 0,
            eval_every: 50,
            eval_size: 16,
            noise: DEFAULT_NOISE,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_size == 0 {
            return Err(DflatError::config("steps, batch_size, eval_every and eval_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DflatError::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(DflatError::config(format!("noise {} must be non-negative", self.noise)));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(DflatError::config("adam needs betas in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }

    fn threaded(&self) -> bool {
        self.parallel && std::env::var(DETERMINISTIC_ENV).map_or(true, |v| v != "1")
    }
}

/// splitmix64 finaliser, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the training batch drawn at `step`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    mix(mix(seed) ^ step as u64)
}

/// Seed of the held-out evaluation set, disjoint from every batch stream.
pub fn held_out_seed(seed: u64) -> u64 {
    mix(seed ^ 0x005e_ed0f_e7a1)
}

pub fn held_out_set(model: &Model, cfg: &TrainConfig) -> Result<Vec<SyntheticSample>> {
    let m = model.config();
    generate_with_noise(cfg.task, cfg.eval_size, m.out_h, m.out_w, m.classes, cfg.noise, held_out_seed(cfg.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub loss: f64,
    pub predictions: Vec<Vec<usize>>,
}

pub fn evaluate(model: &Model, samples: &[SyntheticSample]) -> Result<EvalReport> {
    let classes = model.config().classes;
    let mut conf = Confusion::new(classes);
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.forward(&s.image)?;
        loss += super::metrics::cross_entropy(&out.logits, &s.mask)?;
        let pred = out.predictions();
        conf.add(&pred, &s.mask)?;
        predictions.push(pred);
    }
    Ok(EvalReport {
        miou: conf.mean_iou(),
        per_class: conf.per_class(),
        loss: loss / samples.len().max(1) as f64,
        predictions,
    })
}

type SampleGrads = (f64, Vec<(ParamId, Tensor)>);

fn batch_grads(model: &Model, batch: &[SyntheticSample], threaded: bool) -> Result<Vec<SampleGrads>> {
    let workers = if threaded {
        std::thread::available_parallelism().map_or(1, |n| n.get()).min(batch.len())
    } else {
        1
    };
    if workers <= 1 {
        return batch.iter().map(|s| model.loss_and_grads(&s.image, &s.mask)).collect();
    }
    let chunk = batch.len().div_ceil(workers);
    let parts: Vec<Result<Vec<SampleGrads>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || part.iter().map(|s| model.loss_and_grads(&s.image, &s.mask)).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(DflatError::State("batch worker panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(batch.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

fn apply_update(store: &mut ParameterStore, opt: Optimizer, lr: f64, adam: &mut AdamState) {
    adam.t += 1;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let g = store.grad(id).clone();
        match opt {
            Optimizer::Sgd => {
                for (p, gv) in store.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let k = id.index();
                let c1 = 1.0 - beta1.powi(adam.t);
                let c2 = 1.0 - beta2.powi(adam.t);
                let m = adam.m[k].data_mut();
                let v = adam.v[k].data_mut();
                let p = store.value_mut(id).data_mut();
                for i in 0..p.len() {
                    let gi = g.data()[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Trains `model` in place, calling `on_step` after every step with the
/// batch loss and, every `eval_every` steps and at the last step, the
/// held-out mIoU.
pub fn train(model: &mut Model, cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let held_out = held_out_set(model, cfg)?;
    let m = model.config().clone();
    let threaded = cfg.threaded();
    let mut adam = AdamState {
        m: model.store().ids().map(|id| Tensor::zeros(model.store().value(id).dims())).collect(),
        v: model.store().ids().map(|id| Tensor::zeros(model.store().value(id).dims())).collect(),
        t: 0,
    };
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = generate_with_noise(
            cfg.task,
            cfg.batch_size,
            m.out_h,
            m.out_w,
            m.classes,
            cfg.noise,
            batch_seed(cfg.seed, step),
        )?;
        let results = batch_grads(model, &batch, threaded)?;
        let scale = 1.0 / batch.len() as f64;
        let store = model.store_mut();
        store.zero_grads();
        let mut loss = 0.0;
        for (l, grads) in &results {
            loss += l * scale;
            for (id, g) in grads {
                store.accumulate_grad(*id, &g.map(|v| v * scale));
            }
        }
        if !loss.is_finite() {
            return Err(DflatError::Divergence { step, loss });
        }
        apply_update(store, cfg.optimizer, cfg.learning_rate, &mut adam);
        let miou = if step % cfg.eval_every == 0 || step == cfg.steps {
            Some(evaluate(model, &held_out)?.miou)
        } else {
            None
        };
        let rec = StepRecord { step, loss, miou };
        on_step(&rec);
        history.push(rec);
    }
    Ok(history)
}
