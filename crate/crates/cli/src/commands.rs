use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rpe_core::receptive_field::{draw_curve, log_epsilon_grid, DEFAULT_TRF_HORIZON};
use rpe_core::series::LimitKind;
use rpe_core::{
    catalog, classification_configurations, classify, mean_erf, Attention, FieldError, Kernel, KernelName,
    TheoreticalField,
};
use rpe_lm::train::train_with_progress;
use rpe_lm::{eval_ppl, Checkpoint, Corpus, CorpusSpec, EvalMode, LmConfig, PplReport};

use crate::args::{Cli, Command};
use crate::manifest::RunManifest;
use crate::svg::{heatmap, LinePlot, Scale, Series};
use crate::table::CsvTable;
use crate::CliError;

pub const MAX_HEATMAP: usize = 2048;
/// Slack allowed on the windowing bound.
pub const DELTA_SLACK: f64 = 1e-9;
const CURVE_POINTS: usize = 50;

pub fn configure_threads(threads: usize) -> Result<(), CliError> {
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    // a pool built earlier in the process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Writes the artifacts of one command into `cli.out_dir`, recording them relative to `root`.
struct Sink<'a> {
    cli: &'a Cli,
    root: &'a Path,
    manifest: &'a mut RunManifest,
}

impl Sink<'_> {
    fn csv(&mut self, name: &str, table: &CsvTable) -> Result<(), CliError> {
        if self.cli.format.csv() {
            let bytes = table.to_bytes()?;
            self.manifest.emit(self.root, &self.cli.out_dir, name, &bytes)?;
        }
        Ok(())
    }

    fn svg(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        if self.cli.format.svg() {
            self.manifest.emit(self.root, &self.cli.out_dir, name, text.as_bytes())?;
        }
        Ok(())
    }
}

pub fn dispatch(cli: &Cli, root: &Path, manifest: &mut RunManifest) -> Result<(), CliError> {
    let mut sink = Sink { cli, root, manifest };
    match &cli.command {
        Command::Catalog => catalog_cmd(&mut sink),
        Command::Classify { kernels } => classify_cmd(&mut sink, kernels),
        Command::Trf {
            kernels,
            eps_min,
            eps_max,
            points,
            horizon,
            draw_len,
        } => trf_cmd(&mut sink, kernels, (*eps_min, *eps_max, *points), *horizon, *draw_len),
        Command::Erf {
            kernels,
            n,
            dim,
            norm,
            eps_min,
            eps_max,
            points,
        } => erf_cmd(&mut sink, kernels, *n, *dim, *norm, (*eps_min, *eps_max, *points)),
        Command::SimulateDelta {
            kernels,
            n,
            dims,
            norm,
            seeds,
        } => delta_cmd(&mut sink, kernels, *n, dims, *norm, *seeds),
        Command::Heatmap { kernel, size } => heatmap_cmd(&mut sink, kernel, *size),
        Command::Train { config, checkpoint } => train_cmd(&mut sink, config, checkpoint.as_deref()),
        Command::EvalPpl {
            checkpoint,
            lengths,
            mode,
            delta,
            corpus,
        } => eval_cmd(&mut sink, checkpoint, lengths, mode, *delta, corpus.as_deref()),
        Command::Experiment { .. } => Err(CliError::Usage("experiments cannot be nested".into())),
    }
}

fn or_defaults(kernels: &[Kernel], defaults: impl FnOnce() -> Vec<Kernel>) -> Vec<Kernel> {
    if kernels.is_empty() {
        defaults()
    } else {
        kernels.to_vec()
    }
}

fn catalog_note(name: KernelName) -> &'static str {
    match name {
        KernelName::KerpleLog => "requires r > 1",
        KernelName::Sandwich => "convergent when d < 2 ln r / k",
        KernelName::KerplePower => "requires 0 < r <= 2",
        KernelName::WindowMask => "finite support",
        _ => "",
    }
}

/// Rows of the kernel catalog: name, default spec, formula, analytic verdict, note.
pub fn catalog_table() -> CsvTable {
    let mut t = CsvTable::new(&["name", "spec", "formula", "analytic", "note"]);
    for k in catalog::<f64>() {
        let name = k.name();
        t.push(vec![
            name.to_string(),
            k.to_string(),
            name.formula().to_string(),
            rpe_core::analytic_verdict(&k).to_string(),
            catalog_note(name).to_string(),
        ]);
    }
    t
}

fn catalog_cmd(sink: &mut Sink) -> Result<(), CliError> {
    let t = catalog_table();
    for r in &t.rows {
        println!("{:<16} {:<34} {:<48} {:<11} {}", r[0], r[1], r[2], r[3], r[4]);
    }
    sink.manifest.add_kernels(t.rows.iter().map(|r| r[1].clone()));
    sink.csv("catalog.csv", &t)
}

fn limit_kind(k: LimitKind) -> &'static str {
    match k {
        LimitKind::Exact => "exact",
        LimitKind::TailCorrected => "tail_corrected",
        LimitKind::LowerBound => "lower_bound",
    }
}

pub fn classify_table(kernels: &[Kernel]) -> CsvTable {
    let mut t = CsvTable::new(&["kernel", "analytic", "numeric", "consistent", "limit", "limit_kind", "evidence"]);
    for k in kernels {
        let v = classify(k);
        t.push(vec![
            k.to_string(),
            v.analytic.to_string(),
            v.numeric.to_string(),
            v.is_consistent().to_string(),
            v.limit.map(|l| num(l.value)).unwrap_or_default(),
            v.limit.map(|l| limit_kind(l.kind).to_string()).unwrap_or_default(),
            v.evidence_summary(),
        ]);
    }
    t
}

fn classify_cmd(sink: &mut Sink, kernels: &[Kernel]) -> Result<(), CliError> {
    let kernels = or_defaults(kernels, classification_configurations);
    sink.manifest.add_kernels(kernels.iter().map(ToString::to_string));
    let t = classify_table(&kernels);
    for r in &t.rows {
        println!("{:<34} analytic={:<11} numeric={:<12} limit={}", r[0], r[1], r[2], r[4]);
    }
    sink.csv("classify.csv", &t)
}

fn grid((lo, hi, points): (f64, f64, usize)) -> Result<Vec<f64>, CliError> {
    if !(lo > 0.0 && hi < 1.0 && lo <= hi) || points == 0 {
        return Err(CliError::Usage(format!("need 0 < eps-min <= eps-max < 1 and points >= 1, got {lo}, {hi}, {points}")));
    }
    Ok(log_epsilon_grid(lo, hi, points))
}

fn field_error(e: FieldError) -> CliError {
    match e {
        FieldError::Epsilon(_) | FieldError::GridSize => CliError::Usage(e.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

fn curve_rows(t: &mut CsvTable, label: &str, masses: &[f64]) -> Result<Vec<(f64, f64)>, CliError> {
    let c = draw_curve(masses, CURVE_POINTS).map_err(field_error)?;
    let norm = c.normalized();
    let mut pts = Vec::new();
    for ((e, idx), y) in c.epsilons.iter().zip(&c.indices).zip(&norm) {
        t.push(vec![label.to_string(), num(*e), idx.to_string(), num(*y)]);
        pts.push((*e, *y));
    }
    Ok(pts)
}

fn trf_cmd(sink: &mut Sink, kernels: &[Kernel], g: (f64, f64, usize), horizon: usize, draw_len: usize) -> Result<(), CliError> {
    let kernels = or_defaults(kernels, catalog);
    let eps = grid(g)?;
    if draw_len == 0 {
        return Err(CliError::Usage("--draw-len must be positive".into()));
    }
    sink.manifest.add_kernels(kernels.iter().map(ToString::to_string));
    let mut t = CsvTable::new(&["kernel", "epsilon", "trf", "limit"]);
    let mut curves = CsvTable::new(&["kernel", "epsilon", "index", "normalized"]);
    let (mut series, mut curve_series) = (Vec::new(), Vec::new());
    for k in &kernels {
        let label = k.to_string();
        let masses: Vec<f64> = (0..draw_len as u64).map(|i| k.bias(i)).collect();
        curve_series.push(Series {
            label: label.clone(),
            points: curve_rows(&mut curves, &label, &masses)?,
        });
        let field = match TheoreticalField::new(k, horizon) {
            Ok(f) => f,
            Err(FieldError::Divergent(_)) => {
                eprintln!("trf: {label} is not numerically convergent, no field");
                continue;
            }
            Err(e) => return Err(field_error(e)),
        };
        let mut pts = Vec::new();
        for &e in &eps {
            let j = field.trf(e).map_err(field_error)?;
            t.push(vec![label.clone(), num(e), j.to_string(), num(field.limit())]);
            pts.push((e, j as f64));
        }
        println!("{label:<34} trf({:.0e})={}", eps[eps.len() - 1], pts.last().map_or(0.0, |p| p.1));
        series.push(Series { label, points: pts });
    }
    if t.rows.is_empty() && !kernels.is_empty() {
        return Err(CliError::Numerical("no kernel has a finite receptive field".into()));
    }
    sink.csv("trf.csv", &t)?;
    sink.csv("trf_curve.csv", &curves)?;
    let plot = LinePlot {
        title: "Theoretical receptive field".into(),
        x_label: "epsilon".into(),
        y_label: "window size".into(),
        x_scale: Scale::Log10,
        y_scale: Scale::Log10,
        series,
    };
    sink.svg("trf.svg", &plot.render())?;
    let plot = LinePlot {
        title: format!("Bias mass curve over {draw_len} offsets"),
        x_label: "epsilon".into(),
        y_label: "normalized index".into(),
        x_scale: Scale::Linear,
        y_scale: Scale::Linear,
        series: curve_series,
    };
    sink.svg("trf_curve.svg", &plot.render())
}

fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r
}

fn erf_cmd(sink: &mut Sink, kernels: &[Kernel], n: usize, dim: usize, norm: f64, g: (f64, f64, usize)) -> Result<(), CliError> {
    let kernels = or_defaults(kernels, catalog);
    let eps = grid(g)?;
    sink.manifest.add_kernels(kernels.iter().map(ToString::to_string));
    let mut t = CsvTable::new(&["kernel", "epsilon", "mean_erf", "trf"]);
    let mut curves = CsvTable::new(&["kernel", "epsilon", "index", "normalized"]);
    let (mut series, mut curve_series) = (Vec::new(), Vec::new());
    for (idx, k) in kernels.iter().enumerate() {
        let label = k.to_string();
        let attn = Attention::random(n, dim, norm, k.clone(), &mut instance_rng(sink.cli.seed, idx))
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let field = TheoreticalField::new(k, DEFAULT_TRF_HORIZON).ok();
        let mut pts = Vec::new();
        for &e in &eps {
            let m = mean_erf(&attn, e).map_err(field_error)?;
            let trf = field.as_ref().and_then(|f| f.trf(e).ok()).map(|j| j.to_string()).unwrap_or_default();
            t.push(vec![label.clone(), num(e), num(m), trf]);
            pts.push((e, m));
        }
        let logs = attn.row_log_weights(n - 1)?;
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let masses: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        curve_series.push(Series {
            label: label.clone(),
            points: curve_rows(&mut curves, &label, &masses)?,
        });
        series.push(Series { label, points: pts });
    }
    sink.csv("erf.csv", &t)?;
    sink.csv("erf_curve.csv", &curves)?;
    let plot = LinePlot {
        title: format!("Mean empirical receptive field, n={n}, d={dim}"),
        x_label: "epsilon".into(),
        y_label: "window size".into(),
        x_scale: Scale::Log10,
        y_scale: Scale::Log10,
        series,
    };
    sink.svg("erf.svg", &plot.render())?;
    let plot = LinePlot {
        title: format!("Attention mass curve of row {}", n - 1),
        x_label: "epsilon".into(),
        y_label: "normalized index".into(),
        x_scale: Scale::Linear,
        y_scale: Scale::Linear,
        series: curve_series,
    };
    sink.svg("erf_curve.svg", &plot.render())
}

/// Per-window maxima of the windowing error across random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSummary {
    pub kernel: String,
    pub dim: usize,
    pub seeds: u64,
    pub cells: usize,
    pub violations: usize,
    /// Index `j - 1`: max over instances and rows `i >= j - 1` of `delta(i, j)`.
    pub max_delta: Vec<f64>,
    pub max_bound: Vec<f64>,
}

/// Cells, violations and per-window maxima of one instance.
type SeedTally = (usize, usize, Vec<f64>, Vec<f64>);

/// Checks `delta(i, j) <= bound(i, j) + DELTA_SLACK` on every cell of
/// `seeds` random instances seeded `base_seed + s`.
pub fn simulate_delta(kernel: &Kernel, n: usize, dim: usize, norm: f64, seeds: u64, base_seed: u64) -> Result<DeltaSummary, CliError> {
    let per_seed: Vec<Result<SeedTally, CliError>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(s));
            let a = Attention::random(n, dim, norm, kernel.clone(), &mut rng).map_err(|e| CliError::Usage(e.to_string()))?;
            let (mut md, mut mb) = (vec![0.0f64; n], vec![0.0f64; n]);
            let (mut cells, mut bad) = (0, 0);
            for c in a.delta_grid()? {
                cells += 1;
                if c.delta > c.bound + DELTA_SLACK || c.delta.is_nan() {
                    bad += 1;
                }
                md[c.j - 1] = md[c.j - 1].max(c.delta);
                mb[c.j - 1] = mb[c.j - 1].max(c.bound);
            }
            Ok((cells, bad, md, mb))
        })
        .collect();
    let mut out = DeltaSummary {
        kernel: kernel.to_string(),
        dim,
        seeds,
        cells: 0,
        violations: 0,
        max_delta: vec![0.0; n],
        max_bound: vec![0.0; n],
    };
    for r in per_seed {
        let (cells, bad, md, mb) = r?;
        out.cells += cells;
        out.violations += bad;
        for j in 0..n {
            out.max_delta[j] = out.max_delta[j].max(md[j]);
            out.max_bound[j] = out.max_bound[j].max(mb[j]);
        }
    }
    Ok(out)
}

fn delta_cmd(sink: &mut Sink, kernels: &[Kernel], n: usize, dims: &[usize], norm: f64, seeds: u64) -> Result<(), CliError> {
    let kernels = or_defaults(kernels, catalog);
    if n == 0 || dims.is_empty() || dims.contains(&0) || seeds == 0 {
        return Err(CliError::Usage("n, every dimension and seeds must be positive".into()));
    }
    sink.manifest.add_kernels(kernels.iter().map(ToString::to_string));
    for s in 0..seeds {
        sink.manifest.add_seed(sink.cli.seed.wrapping_add(s));
    }
    let mut curve = CsvTable::new(&["kernel", "dim", "j", "max_delta", "max_bound"]);
    let mut summary = CsvTable::new(&["kernel", "dim", "seeds", "cells", "violations"]);
    let mut total_bad = 0;
    for &d in dims {
        let mut series = Vec::new();
        for k in &kernels {
            let s = simulate_delta(k, n, d, norm, seeds, sink.cli.seed)?;
            println!("{:<34} d={d:<3} cells={} violations={}", s.kernel, s.cells, s.violations);
            total_bad += s.violations;
            summary.push(vec![s.kernel.clone(), d.to_string(), seeds.to_string(), s.cells.to_string(), s.violations.to_string()]);
            let mut pts = Vec::new();
            for j in 0..n {
                curve.push(vec![s.kernel.clone(), d.to_string(), (j + 1).to_string(), num(s.max_delta[j]), num(s.max_bound[j])]);
                pts.push(((j + 1) as f64, s.max_delta[j]));
            }
            series.push(Series { label: s.kernel, points: pts });
        }
        let plot = LinePlot {
            title: format!("max windowing error, n={n}, d={d}, {seeds} instances"),
            x_label: "window j".into(),
            y_label: "max_i delta(i, j)".into(),
            x_scale: Scale::Log10,
            y_scale: Scale::Log10,
            series,
        };
        sink.svg(&format!("delta_d{d}.svg"), &plot.render())?;
    }
    sink.csv("delta.csv", &curve)?;
    sink.csv("delta_summary.csv", &summary)?;
    if total_bad > 0 {
        return Err(CliError::Numerical(format!("{total_bad} cells exceed the windowing bound")));
    }
    Ok(())
}

/// `exp(bias(i - j))` divided by its maximum over offsets below `size`.
pub fn heatmap_values(kernel: &Kernel, size: usize) -> Vec<f64> {
    let b: Vec<f64> = (0..size as u64).map(|t| kernel.bias(t)).collect();
    let top = b.iter().copied().fold(0.0, f64::max);
    b.iter().map(|x| if top > 0.0 { x / top } else { 0.0 }).collect()
}

fn heatmap_cmd(sink: &mut Sink, kernel: &Kernel, size: usize) -> Result<(), CliError> {
    if size == 0 || size > MAX_HEATMAP {
        return Err(CliError::Usage(format!("heatmap size must lie in 1..={MAX_HEATMAP}, got {size}")));
    }
    let values = heatmap_values(kernel, size);
    let mut t = CsvTable::new(&["offset", "bias", "normalized"]);
    for (off, v) in values.iter().enumerate() {
        t.push(vec![off.to_string(), num(kernel.bias(off as u64)), num(*v)]);
    }
    sink.csv("heatmap.csv", &t)?;
    let svg = heatmap(&format!("exp(RPE) of {kernel}, {size}x{size}"), size, |i, j| values[i - j]);
    sink.svg(&format!("heatmap_{}.svg", kernel.name()), &svg)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn train_cmd(sink: &mut Sink, config: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let text = read_text(config)?;
    let mut cfg = LmConfig::parse(&text)?;
    if !text.lines().any(|l| l.trim_start().starts_with("seed")) {
        cfg.seed = sink.cli.seed;
    }
    let spec = cfg
        .corpus
        .clone()
        .ok_or_else(|| CliError::Usage("config needs a corpus= line".into()))?;
    let corpus = Corpus::generate(&spec)?;
    sink.manifest.add_kernels([cfg.encoding.to_string()]);
    sink.manifest.seeds = vec![cfg.seed];
    let every = (cfg.steps / 20).max(1);
    let (ck, log) = train_with_progress(&cfg, &corpus, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step:>6} loss {loss:.5}");
        }
    })?;
    eprintln!(
        "trained {} parameters: ppl {:.4} -> {:.4}",
        ck.model.parameter_count(),
        log.initial_loss().exp(),
        log.final_loss().exp()
    );
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sink.cli.out_dir.join("model.ckpt"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let bytes = ck.to_bytes();
    std::fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
    sink.manifest.record(sink.root, &path, &bytes);
    let mut t = CsvTable::new(&["step", "loss"]);
    for (i, l) in log.losses.iter().enumerate() {
        t.push(vec![(i + 1).to_string(), num(*l)]);
    }
    sink.csv("train_log.csv", &t)?;
    let plot = LinePlot {
        title: format!("training loss, {}", cfg.encoding),
        x_label: "step".into(),
        y_label: "loss (nats)".into(),
        x_scale: Scale::Linear,
        y_scale: Scale::Linear,
        series: vec![Series {
            label: cfg.encoding.to_string(),
            points: log.losses.iter().enumerate().map(|(i, l)| ((i + 1) as f64, *l)).collect(),
        }],
    };
    sink.svg("train_loss.svg", &plot.render())
}

pub fn ppl_table(report: &PplReport) -> CsvTable {
    let mut t = CsvTable::new(&["length", "mode", "ppl", "deviation"]);
    for r in &report.rows {
        t.push(vec![r.length.to_string(), r.mode.to_string(), num(r.ppl), num(r.deviation)]);
    }
    t
}

fn eval_cmd(sink: &mut Sink, checkpoint: &Path, lengths: &[usize], mode: &str, delta: f64, corpus: Option<&str>) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let mode: EvalMode = mode.parse()?;
    if !(delta > 0.0) {
        return Err(CliError::Usage(format!("delta must be positive, got {delta}")));
    }
    let spec: CorpusSpec = match corpus {
        Some(s) => s.parse()?,
        None => ck
            .model
            .config()
            .corpus
            .clone()
            .ok_or_else(|| CliError::Usage("checkpoint config has no corpus; pass --corpus".into()))?,
    };
    let corpus = Corpus::generate(&spec)?;
    sink.manifest.add_kernels([ck.model.config().encoding.to_string()]);
    let report = eval_ppl(&ck.model, corpus.held_out(), lengths, mode, delta)?;
    for r in &report.rows {
        println!("n={:<6} {:<16} ppl={:.4} deviation={:.4}", r.length, r.mode, r.ppl, r.deviation);
        eprintln!("n={:<6} {:.3}s", r.length, r.elapsed.as_secs_f64());
    }
    let (lo, hi) = report.tested_range();
    println!("verdict(delta={delta}) = {} over n in [{lo}, {hi}]", report.verdict()?);
    sink.csv("ppl.csv", &ppl_table(&report))?;
    let plot = LinePlot {
        title: format!("held-out ppl, {} ({mode})", report.label),
        x_label: "inference length".into(),
        y_label: "ppl".into(),
        x_scale: Scale::Log10,
        y_scale: Scale::Linear,
        series: vec![Series {
            label: report.label.clone(),
            points: report.rows.iter().map(|r| (r.length as f64, r.ppl)).collect(),
        }],
    };
    sink.svg("ppl.svg", &plot.render())
}
