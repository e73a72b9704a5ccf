//! Experiment commands behind the `darn` binary. Every command writes its
//! numbers as CSV with a fixed 9-significant-digit format, so identical
//! configurations produce identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use darn_core::checkpoint::Checkpoint;
use darn_core::config::{is_numeric_key, RunConfig, KEYS};
use darn_core::corruption::Category;
use darn_core::decoder::Arm;
use darn_core::gradcheck::{self, CaseReport, Fault};
use darn_core::metrics::degradation;
use darn_core::synth::{self, Tag};
use darn_core::trainer::{self, build_data, evaluate, fmt_num, mean_std, Data, Model, RobustnessReport, Trainer};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "DARN_OUT_DIR";

/// Loads `path` (or the defaults) and applies `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override `{o}` is not key=value"))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `out_dir`, unless the environment overrides it.
pub fn out_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.out_dir.clone(),
    }
}

/// Every config key with its default and description, for `--help`.
pub fn keys_help() -> String {
    let d = RunConfig::default();
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (key = default):\n");
    for (k, help) in KEYS {
        let _ = writeln!(s, "  {k:<width$} = {:<14} {help}", d.get(k).expect("known key"));
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ------------------------------------------------------------------- train

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub out_dir: PathBuf,
}

/// Trains with `cfg`, writing `metrics.csv`, `last.ckpt`, `best.ckpt` and the
/// resolved `config.txt` into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dir = out_dir(cfg);
    let mut t = Trainer::new(cfg.clone())?;
    t.attach_output(&dir)
        .with_context(|| format!("preparing output directory {}", dir.display()))?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    t.train()?;
    Ok(TrainOutcome { trainer: t, out_dir: dir })
}

// -------------------------------------------------------------------- eval

/// Model of `cfg` carrying the parameters stored in `checkpoint`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut model = Model::new(cfg)?;
    model.load_params(ckpt.params)?;
    Ok(model)
}

/// Validation metrics of a checkpoint as `eval.csv` text.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    let model = load_model(cfg, checkpoint)?;
    let data = build_data(cfg, &model)?;
    let ev = evaluate(&model, &data.val, data.val_pyramid.as_ref(), &cfg.loss_weights())?;
    let mut s = String::from("metric,class,value\n");
    let _ = writeln!(s, "miou,,{}", fmt_num(ev.miou()));
    for (k, iou) in ev.metrics.per_class_iou.iter().enumerate() {
        let v = iou.map(fmt_num).unwrap_or_else(|| "nan".into());
        let _ = writeln!(s, "iou,{k},{v}");
    }
    for (name, v) in [
        ("loss_total", ev.loss.total),
        ("loss_ce", ev.loss.ce),
        ("loss_dice", ev.loss.dice),
        ("loss_complexity", ev.loss.complexity),
    ] {
        let _ = writeln!(s, "{name},,{}", fmt_num(v));
    }
    if !ev.c.is_empty() {
        let _ = writeln!(s, "mean_c_simple,,{}", fmt_num(ev.mean_c_for(&data.val.tags, Tag::Simple)));
        let _ = writeln!(s, "mean_c_complex,,{}", fmt_num(ev.mean_c_for(&data.val.tags, Tag::Complex)));
    }
    write_file(&out_dir(cfg).join("eval.csv"), &s)?;
    Ok(s)
}

// ------------------------------------------------------------------ ablate

/// One trained arm of the component ladder.
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    /// Best validation mIoU over the run.
    pub miou: f64,
    /// Mean complexity of simple / complex validation samples under the best
    /// parameters; NaN without a complexity head.
    pub c_simple: f64,
    pub c_complex: f64,
    pub grad_norms: Vec<f64>,
    pub best: Model,
    pub data: Arc<Data>,
    pub config: RunConfig,
}

impl ArmRun {
    /// Epoch-averaged gradient norm over the first and the last quarter of training.
    pub fn grad_norm_quarters(&self) -> (f64, f64) {
        let g = &self.grad_norms;
        let q = (g.len() / 4).max(1);
        (mean_std(&g[..q]).0, mean_std(&g[g.len() - q..]).0)
    }
}

fn arm_config(cfg: &RunConfig, arm: Arm, seed: u64) -> RunConfig {
    let (tcp, adm, dcg) = arm.flags();
    RunConfig {
        seed,
        tcp,
        adm,
        dcg,
        ..cfg.clone()
    }
}

/// Trains one arm on shared data.
pub fn run_arm(cfg: &RunConfig, arm: Arm, seed: u64, data: Arc<Data>) -> Result<ArmRun> {
    let acfg = arm_config(cfg, arm, seed);
    let mut t = Trainer::with_data(acfg.clone(), Arc::clone(&data))?;
    t.run_id = format!("{}-s{seed}", arm.slug());
    t.train()?;
    let best = t.best_model();
    let ev = evaluate(&best, &data.val, data.val_pyramid.as_ref(), &acfg.loss_weights())?;
    Ok(ArmRun {
        arm,
        seed,
        miou: t.best_miou,
        c_simple: ev.mean_c_for(&data.val.tags, Tag::Simple),
        c_complex: ev.mean_c_for(&data.val.tags, Tag::Complex),
        grad_norms: t.grad_norms.clone(),
        best,
        data,
        config: acfg,
    })
}

/// Runs the five-arm ladder for every seed; arms of one seed share data.
pub fn ablate(cfg: &RunConfig, seeds: &[u64], mut progress: impl FnMut(&ArmRun)) -> Result<Vec<ArmRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let scfg = RunConfig { seed, ..cfg.clone() };
        let model = Model::new(&scfg)?;
        let data = Arc::new(build_data(&scfg, &model)?);
        for arm in Arm::LADDER {
            let run = run_arm(cfg, arm, seed, Arc::clone(&data))?;
            progress(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Quotes a CSV field that contains a comma or quote.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        fmt_num(v)
    }
}

/// `ablation.csv`: per arm, the mean best validation mIoU over seeds, its
/// gain over the baseline, the spread across seeds and the complexity means.
pub fn ablation_csv(runs: &[ArmRun]) -> String {
    let mut s = String::from(
        "arm,miou,delta_vs_baseline,miou_mean,miou_std,n_seeds,seeds,mean_c_simple,mean_c_complex\n",
    );
    let stats = |arm: Arm| {
        let mine: Vec<&ArmRun> = runs.iter().filter(|r| r.arm == arm).collect();
        let m: Vec<f64> = mine.iter().map(|r| r.miou).collect();
        let cs: Vec<f64> = mine.iter().map(|r| r.c_simple).collect();
        let cc: Vec<f64> = mine.iter().map(|r| r.c_complex).collect();
        let seeds: Vec<String> = mine.iter().map(|r| r.seed.to_string()).collect();
        (mean_std(&m), mean_std(&cs).0, mean_std(&cc).0, seeds)
    };
    let base = stats(Arm::Baseline).0 .0;
    for arm in Arm::LADDER {
        let ((mean, std), cs, cc, seeds) = stats(arm);
        let delta = if arm == Arm::Baseline { 0.0 } else { mean - base };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(arm.label()),
            fmt_num(mean),
            fmt_num(delta),
            fmt_num(mean),
            fmt_num(std),
            seeds.len(),
            seeds.join(" "),
            fmt_opt(cs),
            fmt_opt(cc)
        );
    }
    s
}

pub fn cmd_ablate(cfg: &RunConfig, seeds: &[u64]) -> Result<String> {
    let runs = ablate(cfg, seeds, |r| {
        eprintln!("seed {} {:<28} best val mIoU {:.4}", r.seed, r.arm.label(), r.miou)
    })?;
    let csv = ablation_csv(&runs);
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    write_file(&dir.join("ablation.csv"), &csv)?;
    Ok(csv)
}

// -------------------------------------------------------------- robustness

/// `robustness.csv` rows: clean, 40 corruption cells, FGSM, then per-category
/// and mean corruption error.
pub fn robustness_csv(r: &RobustnessReport) -> String {
    let mut s = String::from("kind,name,severity,miou,degradation\n");
    let _ = writeln!(s, "clean,clean,0,{},{}", fmt_num(r.clean), fmt_num(0.0));
    for (spec, m) in &r.cells {
        let _ = writeln!(
            s,
            "corruption,{},{},{},{}",
            spec.name,
            spec.severity,
            fmt_num(*m),
            fmt_num(degradation(r.clean, *m))
        );
    }
    let _ = writeln!(s, "fgsm,fgsm,0,{},{}", fmt_num(r.fgsm), fmt_num(degradation(r.clean, r.fgsm)));
    for (cat, v) in &r.mce.per_category {
        let _ = writeln!(s, "category,{},,,{}", cat.name(), fmt_num(*v));
    }
    let _ = writeln!(s, "mce,mean,,,{}", fmt_num(r.mce.mean));
    s
}

/// Category names in report order, for parsing summaries back.
pub fn category_from_name(name: &str) -> Option<Category> {
    [Category::Noise, Category::Blur, Category::Digital, Category::Weather]
        .into_iter()
        .find(|c| c.name() == name)
}

pub fn cmd_robustness(cfg: &RunConfig, checkpoint: &Path) -> Result<(String, RobustnessReport)> {
    let model = load_model(cfg, checkpoint)?;
    let data = build_data(cfg, &model)?;
    let report = trainer::robustness(
        &model,
        &data.val,
        &cfg.loss_weights(),
        cfg.seed,
        darn_core::attack::DEFAULT_EPSILON,
    )?;
    let csv = robustness_csv(&report);
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    write_file(&dir.join("robustness.csv"), &csv)?;
    Ok((csv, report))
}

// ------------------------------------------------------------------- sweep

pub struct SweepRow {
    pub value: String,
    pub best_miou: f64,
    pub std_c_final: f64,
    pub wall_seconds: f64,
}

/// One full run per value of `key`, all sharing the seed.
pub fn sweep(cfg: &RunConfig, key: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    if !is_numeric_key(key) {
        bail!("`{key}` is not a numeric config key");
    }
    let mut rows = Vec::new();
    for v in values {
        let mut c = cfg.clone();
        c.set(key, v)?;
        c.validate()?;
        let start = Instant::now();
        let mut t = Trainer::new(c)?;
        t.run_id = format!("{key}={v}");
        t.train()?;
        let std_c_final = t.records.last().map_or(f64::NAN, |r| r.std_c);
        rows.push(SweepRow {
            value: v.clone(),
            best_miou: t.best_miou,
            std_c_final,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("value,best_miou,std_c_final,wall_seconds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.value,
            fmt_num(r.best_miou),
            fmt_num(r.std_c_final),
            fmt_num(r.wall_seconds)
        );
    }
    s
}

pub fn cmd_sweep(cfg: &RunConfig, key: &str, values: &[String]) -> Result<String> {
    let csv = sweep_csv(&sweep(cfg, key, values)?);
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    write_file(&dir.join("sweep.csv"), &csv)?;
    Ok(csv)
}

// --------------------------------------------------------------- gradcheck

/// Runs the finite-difference suite; `fault` names a case whose backward is
/// deliberately scaled.
pub fn cmd_gradcheck(seed: u64, fault: Option<&str>) -> Result<(String, bool)> {
    let fault = match fault {
        Some(name) => {
            let Some(case) = gradcheck::case_names().into_iter().find(|c| *c == name) else {
                bail!("unknown gradcheck case `{name}`");
            };
            Some(Fault { case, factor: 1.5 })
        }
        None => None,
    };
    let reports = gradcheck::run_suite(seed, fault)?;
    Ok((gradcheck_report(&reports), reports.iter().all(CaseReport::passed)))
}

pub fn gradcheck_report(reports: &[CaseReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(
            s,
            "{:<22} max_rel_err {:.3e}  coords {:>6}  {}",
            r.name,
            r.max_rel_error,
            r.coordinates,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    s
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Val,
    All,
}

/// Writes the configured dataset split to a `DSYN` file; returns the sample count.
pub fn cmd_gen_data(cfg: &RunConfig, split: SplitChoice, output: &Path) -> Result<usize> {
    let synth_cfg = cfg.synth_config();
    let (n_train, n_val) = cfg.split_sizes();
    let seed = trainer::dataset_seed(cfg.seed);
    let (start, count) = match split {
        SplitChoice::Train => (0, n_train),
        SplitChoice::Val => (n_train as u64, n_val),
        SplitChoice::All => (0, n_train + n_val),
    };
    let batch = synth::generate(&synth_cfg, seed, start, count)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    synth::write_dsyn(output, &batch, cfg.num_classes)?;
    Ok(count)
}
