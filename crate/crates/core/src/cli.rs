//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error,
//! 3 file error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::query_group;
use crate::complexity::{audit, render_table, sweep, CostVariant};
use crate::config::RunConfig;
use crate::error::{DflatError, Result};
use crate::gradcheck;
use crate::harness::{self, evaluate, generate_with_noise, held_out_set, train, StepRecord};
use crate::model::{Model, Variant};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// File stem of saved checkpoints inside an output directory.
pub const CHECKPOINT_STEM: &str = "checkpoint";

#[derive(Parser, Debug)]
#[command(name = "dflat", version, about = "Row/column query decoder: checks, cost audits and toy training")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// key=value config file; flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one config key (repeatable), e.g. `--set steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compare backward-pass gradients with central differences.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Audit closed-form attention costs against instrumented counts.
    Flops {
        /// Random sweep points in addition to the fixed 4x4 -> 16x16 point.
        #[arg(long, default_value_t = 24)]
        points: usize,
    },
    /// Train a model and write metrics and a checkpoint.
    Train,
    /// Evaluate a checkpoint on the held-out set and render predictions.
    Eval {
        /// Directory holding checkpoint.manifest/checkpoint.dflt (default: --out).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of held-out predictions to render.
        #[arg(long, default_value_t = 4)]
        render: usize,
    },
    /// Write every attention map of one forward pass as tensor dumps.
    DumpAttn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render generated samples and their masks.
    Render {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &DflatError) -> i32 {
    match e {
        DflatError::Config(_) | DflatError::Resource(_) => EXIT_CONFIG,
        DflatError::Io { .. } | DflatError::Format(_) => EXIT_IO,
        DflatError::Shape { .. } | DflatError::State(_) | DflatError::Divergence { .. } => EXIT_CHECK_FAILED,
    }
}

fn resolve(global: &GlobalArgs, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &global.config {
        let text = fs::read_to_string(path).map_err(|e| DflatError::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = global.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for o in &global.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(global: &GlobalArgs, default: &str) -> Result<PathBuf> {
    let dir = global.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| DflatError::io(&dir, e))?;
    Ok(dir)
}

/// Logs the resolved config and, when there is an output directory, saves it.
fn record_config(cfg: &RunConfig, dir: Option<&Path>) -> Result<()> {
    let text = cfg.render();
    eprint!("# resolved config\n{text}");
    if let Some(dir) = dir {
        harness::write_file(&dir.join("config.txt"), text.as_bytes())?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let g = &cli.global;
    match &cli.command {
        Command::Gradcheck { corrupt_backward } => {
            let cfg = resolve(g, RunConfig::tiny())?;
            let dir = g.out.as_deref().map(|_| out_dir(g, "")).transpose()?;
            record_config(&cfg, dir.as_deref())?;
            cmd_gradcheck(&cfg, *corrupt_backward)
        }
        Command::Flops { points } => {
            let seed = g.seed.unwrap_or(0);
            let dir = g.out.as_deref().map(|_| out_dir(g, "")).transpose()?;
            cmd_flops(*points, seed, dir.as_deref())
        }
        Command::Train => {
            let cfg = resolve(g, RunConfig::default())?;
            let dir = out_dir(g, "dflat-run")?;
            record_config(&cfg, Some(&dir))?;
            cmd_train(&cfg, &dir)
        }
        Command::Eval { checkpoint, render } => {
            let cfg = resolve(g, RunConfig::default())?;
            let dir = out_dir(g, "dflat-run")?;
            record_config(&cfg, Some(&dir))?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| dir.clone());
            cmd_eval(&cfg, &ckpt, &dir, *render)
        }
        Command::DumpAttn { checkpoint } => {
            let cfg = resolve(g, RunConfig::default())?;
            let dir = out_dir(g, "dflat-run")?;
            record_config(&cfg, Some(&dir))?;
            cmd_dump_attn(&cfg, checkpoint.as_deref(), &dir)
        }
        Command::Render { count } => {
            let cfg = resolve(g, RunConfig::default())?;
            let dir = out_dir(g, "dflat-run")?;
            record_config(&cfg, Some(&dir))?;
            cmd_render(&cfg, *count, &dir)
        }
    }
}

fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool) -> Result<i32> {
    let mut model = Model::new(cfg.model.clone(), cfg.variant)?;
    let m = &cfg.model;
    let sample = generate_with_noise(cfg.train.task, 1, m.out_h, m.out_w, m.classes, cfg.train.noise, cfg.train.seed)?
        .remove(0);
    let report = gradcheck::check(&mut model, &sample, corrupt.then_some(0.5))?;
    println!("{:<32} {:>7} {:>12} {:>6}  status", "parameter", "scalars", "worst_rel", "kinks");
    let mut failed = 0;
    for r in &report {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!("{:<32} {:>7} {:>12.3e} {:>6}  {status}", r.name, r.scalars, r.worst_relative, r.kinks);
    }
    println!(
        "{} parameter groups, {} failed (tolerance {:e})",
        report.len(),
        failed,
        gradcheck::TOLERANCE
    );
    Ok(if failed == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_flops(points: usize, seed: u64, dir: Option<&Path>) -> Result<i32> {
    let mut rows = Vec::new();
    for p in sweep(points, seed) {
        for v in CostVariant::ALL {
            rows.push(audit(v, &p)?);
        }
    }
    print!("{}", render_table(&rows));
    if let Some(dir) = dir {
        let mut text = String::new();
        for r in &rows {
            text.push_str(&serde_json::to_string(r).map_err(|e| DflatError::Format(e.to_string()))?);
            text.push('\n');
        }
        harness::write_file(&dir.join("flops.jsonl"), text.as_bytes())?;
    }
    let bad = rows.iter().filter(|r| !r.matches).count();
    println!("{} rows, {} mismatches", rows.len(), bad);
    Ok(if bad == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_train(cfg: &RunConfig, dir: &Path) -> Result<i32> {
    let mut model = Model::new(cfg.model.clone(), cfg.variant)?;
    let path = dir.join("metrics.jsonl");
    let mut file = fs::File::create(&path).map_err(|e| DflatError::io(&path, e))?;
    let mut write_err = None;
    let history = train(&mut model, &cfg.train, |rec: &StepRecord| {
        if let Some(miou) = rec.miou {
            println!("step {:>5}  loss {:.5}  miou {:.4}", rec.step, rec.loss, miou);
        }
        let line = serde_json::to_string(rec).expect("plain record serializes");
        if let Err(e) = writeln!(file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(DflatError::io(&path, e));
    }
    model.store().save(dir, CHECKPOINT_STEM)?;
    let last = history.last().expect("at least one step");
    println!("final held-out miou {:.6}", last.miou.unwrap_or(f64::NAN));
    Ok(EXIT_OK)
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let mut model = Model::new(cfg.model.clone(), cfg.variant)?;
    if let Some(dir) = checkpoint {
        let manifest = dir.join(format!("{CHECKPOINT_STEM}.manifest"));
        if !manifest.is_file() {
            return Err(DflatError::io(
                &manifest,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            ));
        }
        model.store_mut().load(dir, CHECKPOINT_STEM)?;
    }
    Ok(model)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, dir: &Path, render: usize) -> Result<i32> {
    let model = load_model(cfg, Some(checkpoint))?;
    let samples = held_out_set(&model, &cfg.train)?;
    let report = evaluate(&model, &samples)?;
    println!("miou {:.6}", report.miou);
    println!("loss {:.6}", report.loss);
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c} iou {v:.6}"),
            None => println!("class {c} absent"),
        }
    }
    let m = &cfg.model;
    let masks = dir.join("masks");
    fs::create_dir_all(&masks).map_err(|e| DflatError::io(&masks, e))?;
    for (k, (s, pred)) in samples.iter().zip(&report.predictions).take(render).enumerate() {
        harness::write_file(&masks.join(format!("{k:03}_image.ppm")), &harness::image_ppm(&s.image)?)?;
        harness::write_file(
            &masks.join(format!("{k:03}_truth.ppm")),
            &harness::mask_ppm(&s.mask, m.out_h, m.out_w, m.classes)?,
        )?;
        harness::write_file(
            &masks.join(format!("{k:03}_pred.ppm")),
            &harness::mask_ppm(pred, m.out_h, m.out_w, m.classes)?,
        )?;
    }
    Ok(EXIT_OK)
}

/// Every attention map of one forward pass, keyed by site.
///
/// Row and column heads give one `n_q × n_keys` map each. With grouping and
/// pooling the grouped blocks are placed at their query and key positions
/// (zeros elsewhere) and the pooled map is appended as extra columns.
/// Interactive steps give one `H × W` map per layer.
pub fn attention_maps(model: &Model, image: &Tensor) -> Result<BTreeMap<String, Tensor>> {
    let mut tape = Tape::with_taps();
    model.forward_vars(&mut tape, image)?;
    let cfg = model.config();
    let a = &cfg.attention;
    let (h, w) = (cfg.enc_h(), cfg.enc_w());
    let mut out = BTreeMap::new();
    let mut groups: BTreeMap<String, Vec<(usize, &Tensor)>> = BTreeMap::new();
    let mut pooled: BTreeMap<String, &Tensor> = BTreeMap::new();
    for tap in tape.taps() {
        let value = tape.value(tap.var);
        if let Some((base, g)) = tap.label.rsplit_once(".group") {
            let g: usize = g.parse().map_err(|_| DflatError::State(format!("bad tap label {}", tap.label)))?;
            groups.entry(base.to_string()).or_default().push((g, value));
        } else if let Some(base) = tap.label.strip_suffix(".pooled") {
            pooled.insert(base.to_string(), value);
        } else {
            out.insert(tap.label.clone(), value.clone());
        }
    }
    for (base, blocks) in groups {
        let (n_q, lines, per_line) = if base.starts_with("row.") {
            (cfg.out_h, h, w)
        } else {
            (cfg.out_w, w, h)
        };
        let keys = lines * per_line;
        let extra = pooled.get(&base).map_or(0, |p| p.cols());
        let mut data = vec![0.0; n_q * (keys + extra)];
        let lines_per_group = lines / a.groups;
        for (g, block) in blocks {
            let first_q = (0..n_q).find(|&i| query_group(i, n_q, a.groups) == g).unwrap_or(0);
            let first_k = g * lines_per_group * per_line;
            for r in 0..block.rows() {
                let row = (first_q + r) * (keys + extra);
                data[row + first_k..row + first_k + block.cols()].copy_from_slice(block.row(r));
            }
        }
        if let Some(p) = pooled.get(&base) {
            for i in 0..n_q {
                let row = i * (keys + extra) + keys;
                data[row..row + extra].copy_from_slice(p.row(i));
            }
        }
        out.insert(base, Tensor::new(vec![n_q, keys + extra], data)?);
    }
    Ok(out)
}

fn cmd_dump_attn(cfg: &RunConfig, checkpoint: Option<&Path>, dir: &Path) -> Result<i32> {
    if cfg.variant == Variant::Bilinear {
        return Err(DflatError::config("the bilinear baseline has no attention maps"));
    }
    let model = load_model(cfg, checkpoint)?;
    let sample = held_out_set(&model, &cfg.train)?.remove(0);
    let maps = attention_maps(&model, &sample.image)?;
    let attn = dir.join("attn");
    fs::create_dir_all(&attn).map_err(|e| DflatError::io(&attn, e))?;
    for (label, t) in &maps {
        let path = attn.join(format!("{label}.dflt"));
        harness::write_file(&path, &t.to_dump_bytes())?;
        println!("{label} {:?}", t.dims());
    }
    println!("{} attention maps written to {}", maps.len(), attn.display());
    Ok(EXIT_OK)
}

fn cmd_render(cfg: &RunConfig, count: usize, dir: &Path) -> Result<i32> {
    let m = &cfg.model;
    let samples = generate_with_noise(cfg.train.task, count.max(1), m.out_h, m.out_w, m.classes, cfg.train.noise, cfg.train.seed)?;
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| DflatError::io(&samples_dir, e))?;
    for (k, s) in samples.iter().enumerate().take(count) {
        harness::write_file(&samples_dir.join(format!("{k:03}_image.ppm")), &harness::image_ppm(&s.image)?)?;
        harness::write_file(
            &samples_dir.join(format!("{k:03}_mask.ppm")),
            &harness::mask_ppm(&s.mask, m.out_h, m.out_w, m.classes)?,
        )?;
    }
    println!("{} samples written to {}", count, samples_dir.display());
    Ok(EXIT_OK)
}
