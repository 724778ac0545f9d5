//! Config-driven experiment commands behind the `edac` binary.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 numeric failure during training, 4 checkpoint error, 5 failed
//! gradient check.

mod config;
mod gradcheck;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use config::{DatasetSection, ExperimentConfig, GradcheckSection, IdxSource, OutputFormat, OutputSection};
pub use gradcheck::{preactivation_margin, run_gradcheck, GradcheckReport, GradcheckRow, GradcheckSettings, GRADCHECK_TOLERANCE};

use crate::attack::AttackConfig;
use crate::data::Dataset;
use crate::diagnostics::{
    compute_heatmap, evaluate_split, label_level_variance, mean_label_variance, overfitting_gap, stepsize_sweep,
    Heatmap, MetricsRecord, OverfittingGap, SplitEval, SweepRow,
};
use crate::error::Error;
use crate::train::{derive_seed, train_run, Checkpoint};

const STREAM_NAMED_EVAL: u64 = 5;
const STREAM_HEATMAP: u64 = 6;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error("numeric failure in epoch {epoch}: {message}")]
    Numeric { epoch: usize, message: String },
    #[error("{0}")]
    Checkpoint(String),
    #[error("gradient check failed: max relative error {max_error:.3e} (tolerance {tolerance:.0e})")]
    Gradcheck { max_error: f64, tolerance: f64 },
    #[error(transparent)]
    Other(Error),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numeric { .. } => 3,
            RunError::Checkpoint(_) => 4,
            RunError::Gradcheck { .. } => 5,
            RunError::Other(_) => 1,
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => RunError::Config(m),
            Error::Format { .. } => RunError::Config(e.to_string()),
            Error::Checkpoint(m) => RunError::Checkpoint(m),
            Error::Numeric(message) => RunError::Numeric { epoch: 0, message },
            other => RunError::Other(other),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Other(Error::Io(e))
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> RunResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &overrides.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> RunResult<Checkpoint> {
    let ckpt = Checkpoint::load(path).map_err(|e| RunError::Checkpoint(format!("{}: {e}", path.display())))?;
    let (have, want) = (ckpt.model.spec(), &cfg.model);
    if have.input_dim != want.input_dim || have.layer_widths != want.layer_widths || have.activation != want.activation {
        return Err(RunError::Checkpoint(format!(
            "{} holds a {}-{:?} {:?} model but the config describes {}-{:?} {:?}",
            path.display(),
            have.input_dim,
            have.layer_widths,
            have.activation,
            want.input_dim,
            want.layer_widths,
            want.activation
        )));
    }
    Ok(ckpt)
}

fn output_dir(cfg: &ExperimentConfig) -> RunResult<PathBuf> {
    fs::create_dir_all(&cfg.output.dir)?;
    Ok(cfg.output.dir.clone())
}

fn write_json(path: &Path, value: &impl Serialize) -> RunResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| RunError::Other(Error::Io(e.into())))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub const HISTORY_HEADER: &str =
    "epoch,method,lr,clean_acc_train,clean_acc_test,robust_acc_train,robust_acc_test,ac_train,ac_test";

/// Training history as CSV. Wall-clock time is left out so that seeded runs
/// produce identical files.
pub fn history_csv(history: &[MetricsRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.method.as_str(),
            r.lr,
            r.clean_acc_train,
            r.clean_acc_test,
            r.robust_acc_train,
            r.robust_acc_test,
            r.ac_train,
            r.ac_test
        );
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelEval {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub certainty: f64,
}

impl From<SplitEval> for ModelEval {
    fn from(e: SplitEval) -> Self {
        ModelEval {
            clean_acc: e.clean_acc,
            robust_acc: e.robust_acc,
            certainty: e.certainty,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BestLastEval {
    pub name: String,
    pub best: ModelEval,
    pub last: ModelEval,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertaintyCurves {
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub method: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best: MetricsRecordView,
    pub last: MetricsRecordView,
    pub overfitting_gap: OverfittingGap,
    pub eval: Vec<BestLastEval>,
    pub ac_curves: CertaintyCurves,
}

/// The reproducible part of a [`MetricsRecord`].
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecordView {
    pub epoch: usize,
    pub clean_acc_train: f64,
    pub clean_acc_test: f64,
    pub robust_acc_train: f64,
    pub robust_acc_test: f64,
    pub ac_train: f64,
    pub ac_test: f64,
}

impl From<&MetricsRecord> for MetricsRecordView {
    fn from(r: &MetricsRecord) -> Self {
        MetricsRecordView {
            epoch: r.epoch,
            clean_acc_train: r.clean_acc_train,
            clean_acc_test: r.clean_acc_test,
            robust_acc_train: r.robust_acc_train,
            robust_acc_test: r.robust_acc_test,
            ac_train: r.ac_train,
            ac_test: r.ac_test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub summary: TrainSummary,
    pub history: Vec<MetricsRecord>,
}

/// The attacks reported by `eval`: the named ones, or the training
/// evaluation attack when none are named.
fn named_attacks(cfg: &ExperimentConfig) -> Vec<(String, AttackConfig)> {
    if cfg.eval.is_empty() {
        vec![("eval_attack".to_string(), cfg.train.eval_attack.clone())]
    } else {
        cfg.eval.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

fn evaluate_named(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoint,
    data: &Dataset,
) -> RunResult<Vec<(String, ModelEval)>> {
    named_attacks(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, (name, attack))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, STREAM_NAMED_EVAL, i as u64));
            let e = evaluate_split(&ckpt.model, data, &attack, &mut rng)?;
            Ok((name, e.into()))
        })
        .collect()
}

pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> RunResult<TrainReport> {
    let cfg = load_config(config_path, overrides)?;
    let (train, test) = cfg.datasets()?;
    let dir = output_dir(&cfg)?;
    let wants_csv = cfg.output.wants(OutputFormat::Csv);

    let outcome = match train_run(&cfg.train, &cfg.model, &train, &test) {
        Ok(o) => o,
        Err(failure) => {
            if wants_csv {
                fs::write(dir.join("history.csv"), history_csv(&failure.history))?;
            }
            if let Some(last) = &failure.last {
                last.save(dir.join("last.ckpt"))?;
            }
            return Err(match failure.source {
                Error::Numeric(message) => RunError::Numeric {
                    epoch: failure.epoch,
                    message,
                },
                other => other.into(),
            });
        }
    };

    outcome.best.save(dir.join("best.ckpt"))?;
    outcome.last.save(dir.join("last.ckpt"))?;
    if wants_csv {
        fs::write(dir.join("history.csv"), history_csv(&outcome.history))?;
    }

    let best_evals = evaluate_named(&cfg, &outcome.best, &test)?;
    let last_evals = evaluate_named(&cfg, &outcome.last, &test)?;
    let eval = best_evals
        .into_iter()
        .zip(last_evals)
        .map(|((name, best), (_, last))| BestLastEval { name, best, last })
        .collect();
    let summary = TrainSummary {
        method: cfg.train.method.as_str().to_string(),
        seed: cfg.train.seed,
        epochs: cfg.train.epochs,
        best_epoch: outcome.best.epoch,
        best: (&outcome.best.metrics).into(),
        last: (&outcome.last.metrics).into(),
        overfitting_gap: overfitting_gap(&outcome.history)?,
        eval,
        ac_curves: CertaintyCurves {
            train: outcome.history.iter().map(|r| r.ac_train).collect(),
            test: outcome.history.iter().map(|r| r.ac_test).collect(),
        },
    };
    if cfg.output.wants(OutputFormat::Json) {
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(TrainReport {
        out_dir: dir,
        summary,
        history: outcome.history,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub name: String,
    pub norm: String,
    pub epsilon: f64,
    pub steps: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub certainty: f64,
}

/// Evaluates a checkpoint on the test split under every named attack.
pub fn cmd_eval(config_path: &Path, checkpoint: &Path, overrides: &Overrides) -> RunResult<Vec<EvalRow>> {
    let cfg = load_config(config_path, overrides)?;
    let ckpt = load_checkpoint(checkpoint, &cfg)?;
    let (_, test) = cfg.datasets()?;
    let attacks = named_attacks(&cfg);
    let rows: Vec<EvalRow> = evaluate_named(&cfg, &ckpt, &test)?
        .into_iter()
        .zip(&attacks)
        .map(|((name, e), (_, a))| EvalRow {
            name,
            norm: format!("{:?}", a.norm).to_lowercase(),
            epsilon: a.epsilon,
            steps: a.steps,
            clean_acc: e.clean_acc,
            robust_acc: e.robust_acc,
            certainty: e.certainty,
        })
        .collect();

    let dir = output_dir(&cfg)?;
    let stem = file_stem(checkpoint);
    if cfg.output.wants(OutputFormat::Csv) {
        let mut s = String::from("name,norm,epsilon,steps,clean_acc,robust_acc,certainty\n");
        for r in &rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.name, r.norm, r.epsilon, r.steps, r.clean_acc, r.robust_acc, r.certainty
            );
        }
        fs::write(dir.join(format!("eval_{stem}.csv")), s)?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        write_json(&dir.join(format!("eval_{stem}.json")), &rows)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = RunError;

    fn from_str(s: &str) -> RunResult<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(RunError::Config(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeatmapReport {
    pub split: String,
    pub matrix: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub label_variance: Vec<f64>,
    pub mean_label_variance: f64,
    /// Classes absent from the split; their rows are all zero.
    pub empty_rows: Vec<usize>,
}

/// Adversarial prediction heatmap of a checkpoint. The train split is
/// attacked with the training attack, the test split with the evaluation
/// attack.
pub fn cmd_heatmap(config_path: &Path, checkpoint: &Path, split: Split, overrides: &Overrides) -> RunResult<HeatmapReport> {
    let cfg = load_config(config_path, overrides)?;
    let ckpt = load_checkpoint(checkpoint, &cfg)?;
    let (train, test) = cfg.datasets()?;
    let (data, attack, index) = match split {
        Split::Train => (&train, &cfg.train.train_attack, 0),
        Split::Test => (&test, &cfg.train.eval_attack, 1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, STREAM_HEATMAP, index));
    let hm = compute_heatmap(&ckpt.model, data, attack, &mut rng)?;
    let report = heatmap_report(&hm, split);

    let dir = output_dir(&cfg)?;
    let stem = file_stem(checkpoint);
    let tag = format!("{stem}_{}", split.as_str());
    if cfg.output.wants(OutputFormat::Csv) {
        fs::write(dir.join(format!("heatmap_{tag}.csv")), hm.to_csv())?;
        let mut s = String::from("class,count,label_variance\n");
        for (k, (v, c)) in report.label_variance.iter().zip(&report.counts).enumerate() {
            let _ = writeln!(s, "{k},{c},{v}");
        }
        fs::write(dir.join(format!("label_variance_{tag}.csv")), s)?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        write_json(&dir.join(format!("heatmap_{tag}.json")), &report)?;
    }
    Ok(report)
}

fn heatmap_report(hm: &Heatmap, split: Split) -> HeatmapReport {
    HeatmapReport {
        split: split.as_str().to_string(),
        matrix: hm.matrix.clone(),
        counts: hm.counts.clone(),
        label_variance: label_level_variance(hm),
        mean_label_variance: mean_label_variance(hm),
        empty_rows: hm.empty_rows(),
    }
}

/// Parses `0,0.1,0.5` or an inclusive range `start:stop:step`.
pub fn parse_etas(text: &str) -> RunResult<Vec<f64>> {
    let bad = |why: String| RunError::Config(format!("invalid --etas `{text}`: {why}"));
    let num = |s: &str| -> RunResult<f64> {
        let v: f64 = s.trim().parse().map_err(|_| bad(format!("`{}` is not a number", s.trim())))?;
        if !v.is_finite() || v < 0.0 {
            return Err(bad(format!("{v} must be finite and non-negative")));
        }
        Ok(v)
    };
    let parts: Vec<&str> = text.split(':').collect();
    let etas = match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step <= 0.0 || stop < start {
                return Err(bad("range needs step > 0 and stop >= start".into()));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect()
        }
        [list] => list.split(',').map(num).collect::<RunResult<Vec<_>>>()?,
        _ => return Err(bad("use a comma list or start:stop:step".into())),
    };
    if etas.is_empty() {
        return Err(bad("no values".into()));
    }
    Ok(etas)
}

pub const SWEEP_HEADER: &str = "eta,ac_train,robust_acc_test,clean_acc_test,failed";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.eta, r.ac_train, r.robust_acc_test, r.clean_acc_test, r.failed
        );
    }
    s
}

/// One extragradient epoch from `checkpoint` per step size.
pub fn cmd_sweep(config_path: &Path, checkpoint: &Path, etas: &[f64], overrides: &Overrides) -> RunResult<Vec<SweepRow>> {
    let cfg = load_config(config_path, overrides)?;
    let ckpt = load_checkpoint(checkpoint, &cfg)?;
    let (train, test) = cfg.datasets()?;
    let rows = stepsize_sweep(&ckpt, &cfg.train, &train, &test, etas)?;
    let dir = output_dir(&cfg)?;
    if cfg.output.wants(OutputFormat::Csv) {
        fs::write(dir.join("sweep.csv"), sweep_csv(&rows))?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        write_json(&dir.join("sweep.json"), &rows)?;
    }
    Ok(rows)
}

/// Finite-difference gradient suite on models shaped like the config's.
/// Returns the report even when it fails; see [`GradcheckReport::passed`].
pub fn cmd_gradcheck(config_path: &Path, overrides: &Overrides, corrupt: bool) -> RunResult<GradcheckReport> {
    let cfg = load_config(config_path, overrides)?;
    let (train, _) = cfg.datasets()?;
    let gc = &cfg.gradcheck;
    let report = run_gradcheck(&GradcheckSettings {
        spec: &cfg.model,
        data: &train,
        attack: &cfg.train.train_attack,
        objective: &cfg.train.objective,
        cases: gc.cases,
        batch_size: gc.batch_size,
        steps: &gc.h,
        seed: cfg.train.seed,
        corrupt,
    })?;
    Ok(report)
}

impl GradcheckReport {
    pub fn ensure_passed(&self) -> RunResult<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(RunError::Gradcheck {
                max_error: self.max_error(),
                tolerance: self.tolerance,
            })
        }
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}
