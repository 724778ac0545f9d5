//! Measurement instruments for robust overfitting.
//!
//! Robust accuracy uses the configured attack as a stand-in for the exact
//! worst case inside the ε-ball, so it is an upper bound on true robustness.

use std::fmt::Write as _;

use rand::RngCore;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attack::{generate_batch, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netcore::{argmax, forward_logits, population_std, ModelState};
use crate::objective::certainty_of;
use crate::train::{epoch_metrics, train_epoch, Checkpoint, Method, OptState, TrainConfig};

/// Rows attacked per chunk during evaluation.
const EVAL_CHUNK: usize = 512;

/// One row of the per-epoch training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub clean_acc_train: f64,
    pub clean_acc_test: f64,
    pub robust_acc_train: f64,
    pub robust_acc_test: f64,
    pub ac_train: f64,
    pub ac_test: f64,
    pub lr: f64,
    pub method: Method,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitEval {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub certainty: f64,
}

/// Clean accuracy, robust accuracy and certainty from a single attack pass.
pub fn evaluate_split(
    model: &ModelState,
    data: &Dataset,
    attack: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<SplitEval> {
    ensure_nonempty(data)?;
    let mut clean = 0usize;
    let mut robust = 0usize;
    let mut certainty = 0.0;
    for (start, idx) in chunks(data.len()) {
        let x = data.inputs.select_rows(&idx)?;
        let labels = &data.labels[start..start + idx.len()];
        let logits = forward_logits(model, &x)?;
        clean += (0..logits.rows()).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
        let adv = generate_batch(model, &x, labels, attack, rng)?;
        let adv_logits = forward_logits(model, &adv.perturbed)?;
        for (i, &y) in labels.iter().enumerate() {
            let row = adv_logits.row(i);
            if argmax(row) == y {
                robust += 1;
            }
            certainty += population_std(row);
        }
    }
    let n = data.len() as f64;
    Ok(SplitEval {
        clean_acc: clean as f64 / n,
        robust_acc: robust as f64 / n,
        certainty: certainty / n,
    })
}

fn chunks(n: usize) -> impl Iterator<Item = (usize, Vec<usize>)> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(move |s| (s, (s..(s + EVAL_CHUNK).min(n)).collect()))
}

fn ensure_nonempty(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::shape("dataset is empty"));
    }
    Ok(())
}

/// Predicted labels for the attacked version of every example, in order.
pub fn adversarial_predictions(
    model: &ModelState,
    data: &Dataset,
    attack: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<Vec<usize>> {
    ensure_nonempty(data)?;
    let mut preds = Vec::with_capacity(data.len());
    for (start, idx) in chunks(data.len()) {
        let x = data.inputs.select_rows(&idx)?;
        let labels = &data.labels[start..start + idx.len()];
        let adv = generate_batch(model, &x, labels, attack, rng)?;
        let logits = forward_logits(model, &adv.perturbed)?;
        preds.extend((0..logits.rows()).map(|i| argmax(logits.row(i))));
    }
    Ok(preds)
}

pub fn clean_accuracy(model: &ModelState, data: &Dataset) -> Result<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    robust_accuracy(model, data, &AttackConfig::none(), &mut rng)
}

/// Fraction of examples whose attacked input is still classified correctly.
pub fn robust_accuracy(
    model: &ModelState,
    data: &Dataset,
    attack: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<f64> {
    let preds = adversarial_predictions(model, data, attack, rng)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Row `j` is the distribution of predicted labels over examples of class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub matrix: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl Heatmap {
    /// Builds the normalised matrix from `(truth, prediction)` pairs. Rows of
    /// absent classes are left at zero and reported by [`Heatmap::empty_rows`].
    pub fn from_pairs(num_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut tally = vec![vec![0usize; num_classes]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (y, p) in pairs {
            if y >= num_classes || p >= num_classes {
                return Err(Error::shape(format!(
                    "class pair ({y}, {p}) out of range for {num_classes} classes"
                )));
            }
            tally[y][p] += 1;
            counts[y] += 1;
        }
        let matrix = tally
            .into_iter()
            .zip(&counts)
            .map(|(row, &c)| {
                row.into_iter()
                    .map(|t| if c > 0 { t as f64 / c as f64 } else { 0.0 })
                    .collect()
            })
            .collect();
        Ok(Heatmap { matrix, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn empty_rows(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&j| self.counts[j] == 0).collect()
    }

    /// `class_0,...,class_{K-1}` header followed by one line per ground-truth class.
    pub fn to_csv(&self) -> String {
        let mut s = class_header(self.num_classes());
        for row in &self.matrix {
            s.push_str(&join(row));
            s.push('\n');
        }
        s
    }
}

pub(crate) fn class_header(k: usize) -> String {
    let names: Vec<String> = (0..k).map(|j| format!("class_{j}")).collect();
    let mut s = names.join(",");
    s.push('\n');
    s
}

pub(crate) fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

pub fn compute_heatmap(
    model: &ModelState,
    data: &Dataset,
    attack: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<Heatmap> {
    let preds = adversarial_predictions(model, data, attack, rng)?;
    Heatmap::from_pairs(
        model.num_classes().max(data.num_classes),
        data.labels.iter().copied().zip(preds),
    )
}

/// Population standard deviation of each heatmap row.
pub fn label_level_variance(heatmap: &Heatmap) -> Vec<f64> {
    heatmap.matrix.iter().map(|row| population_std(row)).collect()
}

/// Mean label-level variance over the classes present in the heatmap.
pub fn mean_label_variance(heatmap: &Heatmap) -> f64 {
    let vars = label_level_variance(heatmap);
    let present: Vec<f64> = vars
        .iter()
        .zip(&heatmap.counts)
        .filter(|(_, &c)| c > 0)
        .map(|(&v, _)| v)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverfittingGap {
    pub best_robust: f64,
    pub last_robust: f64,
    pub best_epoch: usize,
    pub gap: f64,
}

/// Best-minus-last held-out robust accuracy over a training history.
pub fn overfitting_gap(history: &[MetricsRecord]) -> Result<OverfittingGap> {
    let last = history.last().ok_or_else(|| Error::config("empty training history"))?;
    let best = history
        .iter()
        .fold(&history[0], |b, r| if r.robust_acc_test > b.robust_acc_test { r } else { b });
    Ok(OverfittingGap {
        best_robust: best.robust_acc_test,
        last_robust: last.robust_acc_test,
        best_epoch: best.epoch,
        gap: best.robust_acc_test - last.robust_acc_test,
    })
}

/// `AC(last) − AC(best)` on `data`, both attacked with RNGs seeded by `seed`.
pub fn certainty_gap(
    best: &Checkpoint,
    last: &Checkpoint,
    data: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    if best.model.spec() != last.model.spec() {
        return Err(Error::Checkpoint("best and last checkpoints use different model specs".into()));
    }
    let ac = |m: &ModelState| -> Result<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let adv = generate_batch(m, &data.inputs, &data.labels, attack, &mut rng)?;
        Ok(certainty_of(m, &adv)?.mean)
    };
    Ok(ac(&last.model)? - ac(&best.model)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub eta: f64,
    pub ac_train: f64,
    pub robust_acc_test: f64,
    pub clean_acc_test: f64,
    pub failed: bool,
}

/// Continues `start` for exactly one extragradient epoch per η and records
/// training certainty and test robust accuracy of each resulting model.
pub fn stepsize_sweep(
    start: &Checkpoint,
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    etas: &[f64],
) -> Result<Vec<SweepRow>> {
    if etas.is_empty() {
        return Err(Error::config("no step sizes to sweep"));
    }
    if let Some(bad) = etas.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::config(format!("step size {bad} must be finite and >= 0")));
    }
    let epoch = start.epoch + 1;
    let mut rows = Vec::with_capacity(etas.len());
    for &eta in etas {
        let mut cfg = config.clone();
        cfg.method = Method::Edac;
        cfg.edac_eta = eta;
        let mut rng = start.rng_state.restore();
        let opt = OptState {
            momentum: start.optimizer_momentum.clone(),
        };
        let outcome = train_epoch(&start.model, &opt, &mut rng, &cfg, train, epoch)
            .and_then(|(m, _)| epoch_metrics(&m, &cfg, train, test, epoch, 0.0));
        rows.push(match outcome {
            Ok(m) => SweepRow {
                eta,
                ac_train: m.ac_train,
                robust_acc_test: m.robust_acc_test,
                clean_acc_test: m.clean_acc_test,
                failed: false,
            },
            Err(Error::Numeric(_)) => SweepRow {
                eta,
                ac_train: f64::NAN,
                robust_acc_test: f64::NAN,
                clean_acc_test: f64::NAN,
                failed: true,
            },
            Err(e) => return Err(e),
        });
    }
    Ok(rows)
}

/// Number of adjacent increases in `values` (violations of non-increase).
pub fn count_increases(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Index of the first maximum.
pub fn peak_index(values: &[f64]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    Some(argmax(values))
}
