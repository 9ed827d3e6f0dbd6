//! Running an experiment into an output directory.
//!
//! A run directory holds `config.toml`, `metrics.jsonl` (one epoch record
//! per line), `timing.jsonl`, `checkpoint.bin`, `report.json` and figures.
//! An `INCOMPLETE` file is present until the run finishes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{load_config, ExperimentConfig};
use super::datasets::{channel_stats, load_dataset};
use super::figures;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, detect_collapse, EvalReport, LandscapeConfig, LandscapeGrid};
use crate::models::{Batch, Classifier};
use crate::trainer::{stream_rng, EpochEval, Method, RunHistory, Trainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";
pub const LANDSCAPE_FILE: &str = "landscape.json";
pub const INCOMPLETE_FILE: &str = "INCOMPLETE";

const MODEL_STREAM: u64 = 3;

/// Controls for [`run_experiment_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.bin` when present.
    pub resume: bool,
    /// Stop (as if interrupted) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

/// Final evaluation of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    /// Whether the averaged weights are the reported model.
    pub reports_ema: bool,
    pub live: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema: Option<EvalReport>,
    /// Overfitting epoch of the reported model's epoch-wise robust accuracy.
    pub collapse_epoch: Option<usize>,
    /// Best epoch of the reported model under the first epoch-wise attack.
    pub best: Option<BestEpoch>,
}

impl FinalReport {
    /// Evaluation of the reported model.
    pub fn reported(&self) -> &EvalReport {
        self.ema.as_ref().filter(|_| self.reports_ema).unwrap_or(&self.live)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub attack: String,
    pub robust_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_acc: Option<f64>,
}

/// Outcome of [`run_experiment_with`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub history: RunHistory,
    /// Absent when the run stopped early.
    pub report: Option<FinalReport>,
}

/// Epoch-wise robust accuracy of the reported model under `attack`.
pub fn reported_series(history: &RunHistory, attack: &str, ema: bool) -> Vec<f64> {
    let s = history.robust_series(attack, ema);
    if ema && !s.is_empty() {
        s
    } else {
        history.robust_series(attack, false)
    }
}

pub fn best_epoch(history: &RunHistory, attack: &str, ema: bool) -> Option<BestEpoch> {
    history
        .records
        .iter()
        .filter_map(|r| {
            let (acc, clean) = if ema && !r.eval.robust_acc_ema.is_empty() {
                (r.eval.robust_acc_ema.get(attack)?, r.eval.clean_acc_ema)
            } else {
                (r.eval.robust_acc.get(attack)?, r.eval.clean_acc)
            };
            Some(BestEpoch {
                epoch: r.epoch,
                attack: attack.to_string(),
                robust_acc: *acc,
                clean_acc: clean,
            })
        })
        .fold(None, |best: Option<BestEpoch>, b| match best {
            Some(x) if x.robust_acc >= b.robust_acc => Some(x),
            _ => Some(b),
        })
}

/// Build the classifier the config describes, initialized from the training seed.
pub fn build_model(config: &ExperimentConfig, train: &Dataset<f32>) -> Result<Classifier<f32>> {
    let mut arch = config.model_for(&train.sample_shape).arch(&train.sample_shape, train.num_classes)?;
    if config.dataset.normalization {
        let (mean, std) = channel_stats(train);
        arch = arch.with_normalization(mean, std);
    }
    Classifier::new(arch, &mut stream_rng(config.train.seed, 0, MODEL_STREAM))
}

/// Epoch-wise evaluation on the evaluation split.
pub fn epoch_eval(
    config: &ExperimentConfig,
    data: &Dataset<f32>,
    epoch: usize,
    live: &Classifier<f32>,
    ema: Option<&Classifier<f32>>,
) -> Result<EpochEval> {
    let mut out = EpochEval::default();
    if !epoch.is_multiple_of(config.eval.every) && epoch != config.train.epochs {
        return Ok(out);
    }
    let seed = config.eval.seed.wrapping_add(epoch as u64);
    for attack in config.eval.epoch_attacks(config.train.epsilon)? {
        let o = eval::run_attack(live, data, &attack, seed, false)?;
        out.clean_acc = Some(o.clean_acc());
        out.robust_acc.insert(attack.name(), o.robust_acc());
        out.attack_success_rate.insert(attack.name(), o.success_rate());
        if let Some(m) = ema {
            let o = eval::run_attack(m, data, &attack, seed, false)?;
            out.clean_acc_ema = Some(o.clean_acc());
            out.robust_acc_ema.insert(attack.name(), o.robust_acc());
        }
    }
    Ok(out)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(format!("appending to {}", path.display()), e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Run with default options.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    run_experiment_with(config, RunOptions::default())
}

/// Train, evaluate and emit every artifact into `config.output_dir`.
pub fn run_experiment_with(config: &ExperimentConfig, options: RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let canonical = config.to_toml_string()?;
    let (train, test) = load_dataset(&config.dataset)?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    let mut trainer = if options.resume && checkpoint.exists() {
        let (trainer, extra) = load_checkpoint::<f32>(&checkpoint)?;
        let stored = extra.as_ref().and_then(|v| v.get("config")).and_then(|v| v.as_str());
        if stored != Some(canonical.as_str()) {
            return Err(Error::config("<config>", "checkpoint was written with a different configuration"));
        }
        trainer
    } else {
        for f in [METRICS_FILE, TIMING_FILE, CHECKPOINT_FILE, REPORT_FILE, LANDSCAPE_FILE] {
            let _ = std::fs::remove_file(dir.join(f));
        }
        Trainer::new(config.train.clone(), build_model(config, &train)?)?
    };
    write(&dir.join(INCOMPLETE_FILE), "running\n")?;
    write(&dir.join(CONFIG_FILE), &canonical)?;
    // metrics always mirror the trainer's history
    let mut metrics = String::new();
    for r in &trainer.history().records {
        metrics.push_str(&to_json(r)?);
        metrics.push('\n');
    }
    write(&dir.join(METRICS_FILE), metrics)?;
    let timing = std::fs::read_to_string(dir.join(TIMING_FILE)).unwrap_or_default();
    let kept: String = timing.lines().take(trainer.epochs_done()).map(|l| format!("{l}\n")).collect();
    write(&dir.join(TIMING_FILE), kept)?;
    let extra = serde_json::json!({ "config": canonical });

    let mut hook = |epoch: usize, live: &Classifier<f32>, ema: Option<&Classifier<f32>>| epoch_eval(config, &test, epoch, live, ema);
    while !trainer.is_finished() {
        if options.stop_after.is_some_and(|k| trainer.epochs_done() >= k) {
            write(&dir.join(INCOMPLETE_FILE), format!("stopped after epoch {}\n", trainer.epochs_done()))?;
            return Ok(RunSummary {
                dir,
                history: trainer.history().clone(),
                report: None,
            });
        }
        let record = match trainer.run_epoch(&train, Some(&mut hook)) {
            Ok(r) => r.clone(),
            Err(e) => {
                write(&dir.join(INCOMPLETE_FILE), format!("failed: {e}\n"))?;
                return Err(e);
            }
        };
        append_line(&dir.join(METRICS_FILE), &to_json(&record)?)?;
        append_line(
            &dir.join(TIMING_FILE),
            &to_json(&serde_json::json!({"epoch": record.epoch, "seconds": record.wallclock_seconds}))?,
        )?;
        log::info!(
            "epoch {} loss {:.4} train clean {:.3} adv {:.3} eval {:?} ema {:?}",
            record.epoch,
            record.loss,
            record.clean_acc,
            record.adv_acc_train,
            record.eval.robust_acc,
            record.eval.robust_acc_ema
        );
        if trainer.epochs_done() % config.checkpoint_every == 0 || trainer.is_finished() {
            save_checkpoint(&trainer, Some(extra.clone()), &checkpoint)?;
        }
    }

    let report = final_report(config, &trainer, &test)?;
    write(&dir.join(REPORT_FILE), serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidInput(e.to_string()))?)?;
    let reported = reported_model(&trainer);
    if config.eval.landscape_samples > 0 {
        let grid = landscape(config, &reported, &test)?;
        write(&dir.join(LANDSCAPE_FILE), to_json(&grid)?)?;
        if config.figures.landscape {
            figures::landscape_figure(&grid, &dir.join("landscape.png"))?;
        }
    }
    emit_figures(&dir, config, trainer.history(), Some(&report))?;
    let _ = std::fs::remove_file(dir.join(INCOMPLETE_FILE));
    Ok(RunSummary {
        dir,
        history: trainer.history().clone(),
        report: Some(report),
    })
}

fn reported_model(trainer: &Trainer<f32>) -> Classifier<f32> {
    trainer.ema_model().unwrap_or_else(|| trainer.model().clone())
}

fn landscape(config: &ExperimentConfig, model: &Classifier<f32>, test: &Dataset<f32>) -> Result<LandscapeGrid> {
    let n = config.eval.landscape_samples.min(test.len());
    let b = test.gather(&(0..n).collect::<Vec<_>>());
    eval::loss_landscape(
        model,
        Batch::new(&b.inputs, &b.labels, &b.ids),
        &LandscapeConfig {
            eta: config.eval.landscape_eta,
            resolution: config.eval.landscape_resolution,
            epsilon: config.train.epsilon,
            seed: config.eval.seed,
        },
    )
}

fn final_report(config: &ExperimentConfig, trainer: &Trainer<f32>, test: &Dataset<f32>) -> Result<FinalReport> {
    let eps = config.train.epsilon;
    let attacks = config.eval.final_attacks(eps)?;
    let sweep = config.eval.sweep_attack(eps)?;
    let seed = config.eval.seed;
    let live = eval::evaluate(trainer.model(), test, &attacks, Some(&sweep), &config.eval.eps_sweep, seed)?;
    let ema = match trainer.ema_model() {
        Some(m) => Some(eval::evaluate(&m, test, &attacks, Some(&sweep), &config.eval.eps_sweep, seed)?),
        None => None,
    };
    let reports_ema = ema.is_some();
    let first = config.eval.attacks.first().cloned().unwrap_or_default();
    let series = reported_series(trainer.history(), &first, reports_ema);
    Ok(FinalReport {
        method: config.train.method,
        seed: config.train.seed,
        epochs: trainer.epochs_done(),
        reports_ema,
        live,
        ema,
        collapse_epoch: detect_collapse(&series, config.eval.rho, config.eval.persistence),
        best: best_epoch(trainer.history(), &first, reports_ema),
    })
}

fn emit_figures(dir: &Path, config: &ExperimentConfig, history: &RunHistory, report: Option<&FinalReport>) -> Result<()> {
    if config.figures.overfitting && !history.records.is_empty() {
        figures::overfitting_figure(history, &dir.join("overfitting.png"))?;
    }
    if let (true, Some(r)) = (config.figures.sweep, report) {
        let mut sweeps = vec![("live".to_string(), r.live.eps_sweep.clone())];
        if let Some(e) = &r.ema {
            sweeps.push(("ema".to_string(), e.eps_sweep.clone()));
        }
        if sweeps.iter().any(|s| !s.1.is_empty()) {
            figures::sweep_figure(&sweeps, &dir.join("sweep.png"))?;
        }
    }
    Ok(())
}

/// Read `metrics.jsonl` of a run directory.
pub fn read_history(dir: &Path) -> Result<RunHistory> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Ingestion {
                path: path.clone(),
                offset: text.lines().take(i).map(|l| l.len() as u64 + 1).sum(),
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunHistory { records })
}

pub fn read_report(dir: &Path) -> Result<FinalReport> {
    let path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

/// Which figure [`plot_run`] regenerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    Overfitting,
    Landscape,
    Sweep,
}

impl std::str::FromStr for FigureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overfitting" => Ok(FigureKind::Overfitting),
            "landscape" => Ok(FigureKind::Landscape),
            "sweep" => Ok(FigureKind::Sweep),
            _ => Err(Error::config("figure", format!("unknown figure {s:?}; expected overfitting, landscape or sweep"))),
        }
    }
}

/// Re-render one figure of a run directory from its stored data; returns the PNG path.
pub fn plot_run(dir: &Path, kind: FigureKind) -> Result<PathBuf> {
    match kind {
        FigureKind::Overfitting => {
            let png = dir.join("overfitting.png");
            figures::overfitting_figure(&read_history(dir)?, &png)?;
            Ok(png)
        }
        FigureKind::Sweep => {
            let r = read_report(dir)?;
            let mut sweeps = vec![("live".to_string(), r.live.eps_sweep.clone())];
            if let Some(e) = &r.ema {
                sweeps.push(("ema".to_string(), e.eps_sweep.clone()));
            }
            let png = dir.join("sweep.png");
            figures::sweep_figure(&sweeps, &png)?;
            Ok(png)
        }
        FigureKind::Landscape => {
            let path = dir.join(LANDSCAPE_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let grid: LandscapeGrid = serde_json::from_str(&text).map_err(|e| Error::InvalidInput(e.to_string()))?;
            let png = dir.join("landscape.png");
            figures::landscape_figure(&grid, &png)?;
            Ok(png)
        }
    }
}

/// One row of [`compare_runs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub runs: usize,
    /// Clean and robust accuracy of the best epoch (epoch-wise attack only).
    pub best_clean: Option<f64>,
    pub best_robust: Option<f64>,
    /// Final-report accuracies keyed by `clean` and attack name.
    pub last: BTreeMap<String, f64>,
    pub collapsed: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Method-by-metric table over finished run directories, averaged over seeds.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<(Vec<CompareRow>, String)> {
    let mut groups: BTreeMap<String, Vec<FinalReport>> = BTreeMap::new();
    for d in dirs {
        let r = read_report(d)?;
        groups.entry(r.method.name().to_string()).or_default().push(r);
    }
    let mut attacks: Vec<String> = groups
        .values()
        .flatten()
        .flat_map(|r| r.reported().robust_acc.keys().cloned())
        .collect();
    attacks.sort_by_key(|a| (a != "fgsm", a.trim_start_matches("pgd").parse::<usize>().unwrap_or(0)));
    attacks.dedup();
    let mut rows = Vec::new();
    for (method, reports) in &groups {
        let best: Vec<&BestEpoch> = reports.iter().filter_map(|r| r.best.as_ref()).collect();
        let mut last = BTreeMap::new();
        last.insert(
            "clean".to_string(),
            mean(&reports.iter().map(|r| r.reported().clean_acc).collect::<Vec<_>>()).unwrap_or(f64::NAN),
        );
        for a in &attacks {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.reported().robust_acc.get(a).copied()).collect();
            if let Some(m) = mean(&v) {
                last.insert(a.clone(), m);
            }
        }
        rows.push(CompareRow {
            method: method.clone(),
            runs: reports.len(),
            best_clean: mean(&best.iter().filter_map(|b| b.clean_acc).collect::<Vec<_>>()),
            best_robust: mean(&best.iter().map(|b| b.robust_acc).collect::<Vec<_>>()),
            last,
            collapsed: reports.iter().filter(|r| r.collapse_epoch.is_some()).count(),
        });
    }
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut table = String::from("| Method | Runs | Checkpoint | Clean |");
    for a in &attacks {
        let _ = write!(table, " {} |", a.to_uppercase().replace("PGD", "PGD-"));
    }
    table.push_str(" Collapsed |\n|---|---|---|---|");
    table.push_str(&"---|".repeat(attacks.len() + 1));
    table.push('\n');
    let first = groups.values().flatten().find_map(|r| r.best.as_ref().map(|b| b.attack.clone()));
    for row in &rows {
        let _ = write!(table, "| {} | {} | Best | {} |", row.method, row.runs, pct(row.best_clean));
        for a in &attacks {
            let v = if Some(a) == first.as_ref() { row.best_robust } else { None };
            let _ = write!(table, " {} |", pct(v));
        }
        let _ = writeln!(table, " {}/{} |", row.collapsed, row.runs);
        let _ = write!(table, "| | | Last | {} |", pct(row.last.get("clean").copied()));
        for a in &attacks {
            let _ = write!(table, " {} |", pct(row.last.get(a).copied()));
        }
        table.push_str(" |\n");
    }
    Ok((rows, table))
}

/// Run the experiment described by a config file.
pub fn run_config_file(path: &Path, seed: Option<u64>, output: Option<PathBuf>, options: RunOptions) -> Result<RunSummary> {
    let mut config = load_config(path)?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    if let Some(o) = output {
        config.output_dir = o;
    }
    run_experiment_with(&config, options)
}

/// Parse `start:stop:step` in units of 1/255 (inclusive), or a comma list of such values.
pub fn parse_eps_sweep(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::config("eps-sweep", format!("expected start:stop:step or a list, got {text:?}"));
    let parts: Vec<&str> = text.split(':').collect();
    let nums = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    match parts.as_slice() {
        [start, stop, step] => {
            let (a, b, h) = (nums(start)?, nums(stop)?, nums(step)?);
            if !(h > 0.0) || b < a {
                return Err(bad());
            }
            let n = ((b - a) / h + 1e-9).floor() as usize;
            Ok((0..=n).map(|i| (a + i as f64 * h) / 255.0).collect())
        }
        [_] => text.split(',').map(|v| nums(v).map(|x| x / 255.0)).collect(),
        _ => Err(bad()),
    }
}

/// Evaluate a checkpoint on the evaluation split of the experiment it was written by.
pub fn evaluate_checkpoint(
    path: &Path,
    attacks: &[String],
    eps_sweep: &[f64],
    seed: u64,
    use_ema: bool,
) -> Result<EvalReport> {
    let (trainer, extra) = load_checkpoint::<f32>(path)?;
    let text = extra
        .as_ref()
        .and_then(|v| v.get("config"))
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Checkpoint("checkpoint does not record its experiment".into()))?;
    let config = ExperimentConfig::from_toml_str(text)?;
    let (_, test) = load_dataset(&config.dataset)?;
    let eps = config.train.epsilon;
    let attacks = attacks
        .iter()
        .map(|a| eval::EvalAttack::parse(a, eps))
        .collect::<Result<Vec<_>>>()?;
    let model = match (use_ema, trainer.ema_model()) {
        (true, Some(m)) => m,
        (true, None) => return Err(Error::config("ema", "checkpoint holds no averaged weights")),
        (false, _) => trainer.model().clone(),
    };
    let sweep_attack = attacks.last().copied();
    eval::evaluate(&model, &test, &attacks, sweep_attack.as_ref().filter(|_| !eps_sweep.is_empty()), eps_sweep, seed)
}
