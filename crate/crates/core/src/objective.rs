//! Training losses and the adversarial-certainty functional.
//!
//! Adversarial certainty of a model on a sample set is the mean, over the
//! set, of the population standard deviation of the logits at each example's
//! adversarial input. Its parameter gradient treats the adversarial inputs as
//! constants: they are generated at the current parameters and then frozen.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attack::{generate_batch, AdversarialBatch, AttackConfig};
use crate::error::{Error, Result};
use crate::netcore::{
    forward_logits, grad_params, log_sum_exp, population_std, Graph, ModelState, Network,
    ParamVector, Tensor, Var,
};

pub const DEFAULT_TRADES_BETA: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    AtCe,
    Trades,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveKind {
    #[serde(default)]
    pub kind: LossKind,
    #[serde(default = "default_beta")]
    pub trades_beta: f64,
}

fn default_beta() -> f64 {
    DEFAULT_TRADES_BETA
}

impl Default for ObjectiveKind {
    fn default() -> Self {
        ObjectiveKind::at_ce()
    }
}

impl ObjectiveKind {
    pub fn at_ce() -> Self {
        ObjectiveKind {
            kind: LossKind::AtCe,
            trades_beta: DEFAULT_TRADES_BETA,
        }
    }

    pub fn trades(beta: f64) -> Self {
        ObjectiveKind {
            kind: LossKind::Trades,
            trades_beta: beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.trades_beta.is_finite() && self.trades_beta > 0.0) {
            return Err(Error::config(format!(
                "trades_beta must be finite and > 0, got {}",
                self.trades_beta
            )));
        }
        Ok(())
    }
}

/// Population standard deviation of a logit vector.
pub fn var_functional(u: &[f64]) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::shape("var_functional of an empty vector"));
    }
    Ok(population_std(u))
}

/// `-log softmax(logits)[y]`.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::shape(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[y])
}

/// Per-row cross-entropy node, `[B,K] -> [B]`.
pub fn cross_entropy_rows(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = g.log_softmax(logits);
    let picked = g.pick_rows(logp, labels)?;
    Ok(g.scale(picked, -1.0))
}

/// Per-row `KL(softmax(p_logits) ‖ softmax(q_logits))`, `[B,K] -> [B]`.
pub fn kl_rows(g: &mut Graph, p_logits: Var, q_logits: Var) -> Result<Var> {
    let logp = g.log_softmax(p_logits);
    let logq = g.log_softmax(q_logits);
    let p = g.exp(logp);
    let diff = g.sub(logp, logq)?;
    let terms = g.mul(p, diff)?;
    Ok(g.sum_rows(terms))
}

/// Mean clean cross-entropy plus `beta` times the mean clean-to-adversarial KL.
pub fn trades_graph(
    g: &mut Graph,
    net: &Network,
    clean: &Tensor,
    adv: &Tensor,
    labels: &[usize],
    beta: f64,
) -> Result<Var> {
    if !clean.same_shape(adv) {
        return Err(Error::shape(format!(
            "clean batch {:?} and adversarial batch {:?} differ",
            clean.shape(),
            adv.shape()
        )));
    }
    let xc = g.constant(clean.clone());
    let xa = g.constant(adv.clone());
    let lc = net.logits(g, xc)?;
    let la = net.logits(g, xa)?;
    let ce = cross_entropy_rows(g, lc, labels)?;
    let ce = g.mean(ce);
    let kl = kl_rows(g, lc, la)?;
    let kl = g.mean(kl);
    let kl = g.scale(kl, beta);
    g.add(ce, kl)
}

pub fn trades_loss(
    model: &ModelState,
    clean: &Tensor,
    adv: &Tensor,
    labels: &[usize],
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let net = Network::bind(&mut g, model, false);
    let out = trades_graph(&mut g, &net, clean, adv, labels, beta)?;
    Ok(g.value(out).data()[0])
}

/// Robust loss on an already generated adversarial batch.
pub fn robust_loss_graph(
    g: &mut Graph,
    net: &Network,
    adv: &AdversarialBatch,
    objective: &ObjectiveKind,
) -> Result<Var> {
    match objective.kind {
        LossKind::AtCe => {
            let x = g.constant(adv.perturbed.clone());
            let logits = net.logits(g, x)?;
            let ce = cross_entropy_rows(g, logits, &adv.labels)?;
            Ok(g.mean(ce))
        }
        LossKind::Trades => trades_graph(
            g,
            net,
            &adv.originals,
            &adv.perturbed,
            &adv.labels,
            objective.trades_beta,
        ),
    }
}

pub fn robust_loss(model: &ModelState, adv: &AdversarialBatch, objective: &ObjectiveKind) -> Result<f64> {
    let mut g = Graph::new();
    let net = Network::bind(&mut g, model, false);
    let out = robust_loss_graph(&mut g, &net, adv, objective)?;
    Ok(g.value(out).data()[0])
}

pub fn grad_robust_loss(
    model: &ModelState,
    adv: &AdversarialBatch,
    objective: &ObjectiveKind,
) -> Result<(f64, ParamVector)> {
    grad_params(model, |g, net| robust_loss_graph(g, net, adv, objective))
}

/// Mean logit standard deviation over the rows of `perturbed`.
pub fn certainty_graph(g: &mut Graph, net: &Network, perturbed: &Tensor) -> Result<Var> {
    let x = g.constant(perturbed.clone());
    let logits = net.logits(g, x)?;
    let std = g.row_std(logits);
    Ok(g.mean(std))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertaintyReport {
    pub per_example: Vec<f64>,
    pub mean: f64,
    /// Mean per ground-truth class; 0 for classes absent from the batch.
    pub per_class_mean: Vec<f64>,
    pub per_class_count: Vec<usize>,
}

/// Certainty of `model` on fixed adversarial inputs.
pub fn certainty_of(model: &ModelState, adv: &AdversarialBatch) -> Result<CertaintyReport> {
    let logits = forward_logits(model, &adv.perturbed)?;
    let k = model.num_classes();
    let per_example: Vec<f64> = (0..logits.rows()).map(|i| population_std(logits.row(i))).collect();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&v, &y) in per_example.iter().zip(&adv.labels) {
        if y >= k {
            return Err(Error::shape(format!("label {y} out of range for {k} classes")));
        }
        sums[y] += v;
        counts[y] += 1;
    }
    let per_class_mean = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(CertaintyReport {
        per_example,
        mean,
        per_class_mean,
        per_class_count: counts,
    })
}

/// Attacks the batch with the current model, then measures certainty there.
pub fn adversarial_certainty(
    model: &ModelState,
    inputs: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<CertaintyReport> {
    let adv = generate_batch(model, inputs, labels, attack, rng)?;
    certainty_of(model, &adv)
}

/// Value and parameter gradient of certainty with the adversarial inputs held fixed.
pub fn grad_certainty_frozen(model: &ModelState, perturbed: &Tensor) -> Result<(f64, ParamVector)> {
    grad_params(model, |g, net| certainty_graph(g, net, perturbed))
}

/// Certainty gradient at the current parameters; the attack is run once and
/// not differentiated through.
pub fn grad_adversarial_certainty(
    model: &ModelState,
    inputs: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<ParamVector> {
    let adv = generate_batch(model, inputs, labels, attack, rng)?;
    Ok(grad_certainty_frozen(model, &adv.perturbed)?.1)
}
