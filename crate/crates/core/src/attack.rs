//! Norm-bounded adversarial examples: ball projection, FGSM and PGD.
//!
//! The ℓ∞ PGD step is `x ← Π(x + α·sgn(∇ₓ CE))`. The ℓ2 step moves by `α`
//! along the ℓ2-normalised gradient. Both project back onto the ε-ball
//! around the clean input and then onto the domain box, if one is set.
//! `sgn(0) = 0`, so coordinates with zero gradient stay put.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{grad_input, sign, unit_f64, ModelState, Tensor};
use crate::objective::cross_entropy_rows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    #[default]
    Pgd,
    Fgsm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub kind: AttackKind,
    pub norm: Norm,
    pub epsilon: f64,
    #[serde(default)]
    pub step_size: f64,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    /// `[lo, hi]` box applied after every projection.
    #[serde(default)]
    pub domain_clamp: Option<[f64; 2]>,
}

impl AttackConfig {
    pub fn pgd(norm: Norm, epsilon: f64, step_size: f64, steps: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            norm,
            epsilon,
            step_size,
            steps,
            random_start: false,
            domain_clamp: None,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            norm: Norm::Linf,
            epsilon,
            step_size: epsilon,
            steps: 1,
            random_start: false,
            domain_clamp: None,
        }
    }

    /// The identity attack.
    pub fn none() -> Self {
        AttackConfig::pgd(Norm::Linf, 0.0, 0.0, 0)
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.domain_clamp = Some([lo, hi]);
        self
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        let uses_step = self.kind == AttackKind::Pgd && self.steps > 0;
        if uses_step && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!(
                "step_size must be positive when steps > 0, got {}",
                self.step_size
            )));
        }
        if self.kind == AttackKind::Fgsm && self.norm != Norm::Linf {
            return Err(Error::config("fgsm is defined for the linf threat model only"));
        }
        if let Some([lo, hi]) = self.domain_clamp {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(Error::config(format!("domain clamp [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    /// Distance under this config's norm.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| x - y);
        match self.norm {
            Norm::Linf => diffs.fold(0.0, |m, d| m.max(d.abs())),
            Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub originals: Tensor,
    pub perturbed: Tensor,
    pub labels: Vec<usize>,
    pub config: AttackConfig,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Projects `x_prime` onto the ε-ball around `center` (row-wise for
/// matrices), then onto the domain box.
pub fn project_ball(x_prime: &Tensor, center: &Tensor, config: &AttackConfig) -> Result<Tensor> {
    if !x_prime.same_shape(center) {
        return Err(Error::shape(format!(
            "projection of {:?} around {:?}",
            x_prime.shape(),
            center.shape()
        )));
    }
    let mut out = x_prime.clone();
    for i in 0..out.rows() {
        project_row(out.row_mut(i), center.row(i), config);
    }
    Ok(out)
}

fn project_row(x: &mut [f64], c: &[f64], config: &AttackConfig) {
    let eps = config.epsilon;
    match config.norm {
        Norm::Linf => {
            for (xi, &ci) in x.iter_mut().zip(c) {
                let (lo, hi) = (ci - eps, ci + eps);
                if *xi > hi {
                    *xi = hi;
                } else if *xi < lo {
                    *xi = lo;
                }
            }
        }
        Norm::L2 => {
            let norm = x
                .iter()
                .zip(c)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if norm > eps {
                let scale = eps / norm;
                for (xi, &ci) in x.iter_mut().zip(c) {
                    *xi = ci + (*xi - ci) * scale;
                }
            }
        }
    }
    clamp_row(x, config);
}

fn clamp_row(x: &mut [f64], config: &AttackConfig) {
    if let Some([lo, hi]) = config.domain_clamp {
        x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

/// Summed cross-entropy input gradient; rows are independent so each row
/// holds its own example's gradient.
fn ce_input_grad(model: &ModelState, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (_, grad) = grad_input(model, x, |g, net, xv| {
        let logits = net.logits(g, xv)?;
        let ce = cross_entropy_rows(g, logits, labels)?;
        Ok(g.sum(ce))
    })?;
    if !grad.is_finite() {
        return Err(Error::numeric("non-finite input gradient during attack"));
    }
    Ok(grad)
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.ndim() {
        1 => x.clone().reshape(vec![1, x.len()]),
        2 => Ok(x.clone()),
        _ => Err(Error::shape(format!("attack input of shape {:?}", x.shape()))),
    }
}

fn check_labels(x: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.len() != x.rows() {
        return Err(Error::shape(format!("{} labels for {} inputs", labels.len(), x.rows())));
    }
    Ok(())
}

/// One signed-gradient step of size ε followed by the domain clamp.
pub fn fgsm(model: &ModelState, x: &Tensor, y: usize, config: &AttackConfig) -> Result<Tensor> {
    let out = fgsm_batch(model, &as_batch(x)?, &[y], config)?;
    out.reshape(x.shape().to_vec())
}

pub fn fgsm_batch(model: &ModelState, x: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<Tensor> {
    config.validate()?;
    if config.norm != Norm::Linf {
        return Err(Error::config("fgsm is defined for the linf threat model only"));
    }
    check_labels(x, labels)?;
    if config.epsilon == 0.0 {
        let mut out = x.clone();
        for i in 0..out.rows() {
            clamp_row(out.row_mut(i), config);
        }
        return Ok(out);
    }
    let grad = ce_input_grad(model, x, labels)?;
    let mut out = x.clone();
    for (v, &g) in out.data_mut().iter_mut().zip(grad.data()) {
        *v += config.epsilon * sign(g);
    }
    for i in 0..out.rows() {
        clamp_row(out.row_mut(i), config);
    }
    Ok(out)
}

/// PGD on a single input vector.
pub fn pgd(
    model: &ModelState,
    x: &Tensor,
    y: usize,
    config: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<Tensor> {
    let out = pgd_batch(model, &as_batch(x)?, &[y], config, rng)?;
    out.reshape(x.shape().to_vec())
}

/// PGD on every row of `x` at once. The random start, when enabled, draws
/// rows in order from `rng`.
pub fn pgd_batch(
    model: &ModelState,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<Tensor> {
    config.validate()?;
    check_labels(x, labels)?;
    let mut cur = x.clone();
    if config.random_start && config.epsilon > 0.0 {
        for i in 0..cur.rows() {
            random_offset(cur.row_mut(i), config, rng);
            project_row(cur.row_mut(i), x.row(i), config);
        }
    }
    if config.epsilon == 0.0 {
        // The ball is a point; every iterate projects back onto x.
        for i in 0..cur.rows() {
            project_row(cur.row_mut(i), x.row(i), config);
        }
        return Ok(cur);
    }
    for _ in 0..config.steps {
        let grad = ce_input_grad(model, &cur, labels)?;
        match config.norm {
            Norm::Linf => {
                for (v, &g) in cur.data_mut().iter_mut().zip(grad.data()) {
                    *v += config.step_size * sign(g);
                }
            }
            Norm::L2 => {
                for i in 0..cur.rows() {
                    let gi = grad.row(i);
                    let norm = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        let scale = config.step_size / norm;
                        for (v, &g) in cur.row_mut(i).iter_mut().zip(gi) {
                            *v += scale * g;
                        }
                    }
                }
            }
        }
        for i in 0..cur.rows() {
            project_row(cur.row_mut(i), x.row(i), config);
        }
    }
    Ok(cur)
}

fn random_offset(row: &mut [f64], config: &AttackConfig, rng: &mut impl RngCore) {
    let eps = config.epsilon;
    match config.norm {
        Norm::Linf => {
            for v in row.iter_mut() {
                *v += eps * (2.0 * unit_f64(rng) - 1.0);
            }
        }
        Norm::L2 => {
            let dir: Vec<f64> = (0..row.len()).map(|_| StandardNormal.sample(rng)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            if norm == 0.0 {
                return;
            }
            let radius = eps * unit_f64(rng).powf(1.0 / row.len() as f64);
            for (v, d) in row.iter_mut().zip(dir) {
                *v += radius * d / norm;
            }
        }
    }
}

/// Runs the configured attack on a whole batch.
pub fn generate_batch(
    model: &ModelState,
    inputs: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<AdversarialBatch> {
    if labels.is_empty() {
        return Err(Error::shape("cannot attack an empty batch"));
    }
    let inputs = as_batch(inputs)?;
    let perturbed = match config.kind {
        AttackKind::Pgd => pgd_batch(model, &inputs, labels, config, rng)?,
        AttackKind::Fgsm => fgsm_batch(model, &inputs, labels, config)?,
    };
    Ok(AdversarialBatch {
        originals: inputs,
        perturbed,
        labels: labels.to_vec(),
        config: config.clone(),
    })
}
