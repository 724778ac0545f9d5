//! Finite-difference checks of the three analytic gradients the trainer
//! relies on: parameters of the robust loss, input of the cross-entropy, and
//! parameters of the certainty at frozen adversarial inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attack::{generate_batch, AdversarialBatch, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netcore::{
    finite_diff_grad, forward_logits, grad_input, grad_params, init_model, relative_error, Activation,
    ModelSpec, ModelState, Tensor,
};
use crate::objective::{certainty_graph, certainty_of, cross_entropy_rows, grad_robust_loss, robust_loss, ObjectiveKind};
use crate::train::derive_seed;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Hidden pre-activations closer than this to a ReLU kink make central
/// differences meaningless, so such samples are redrawn.
const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 500;
const STREAM_GRADCHECK: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub h: f64,
    pub params: f64,
    pub input: f64,
    pub certainty: f64,
}

impl GradcheckRow {
    pub fn max(&self) -> f64 {
        self.params.max(self.input).max(self.certainty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: usize,
    pub tolerance: f64,
    /// Worst relative error over all cases, one row per step size.
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(GradcheckRow::max).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max() < self.tolerance)
    }
}

pub struct GradcheckSettings<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub attack: &'a AttackConfig,
    pub objective: &'a ObjectiveKind,
    pub cases: usize,
    pub batch_size: usize,
    pub steps: &'a [f64],
    pub seed: u64,
    /// Perturbs every analytic gradient; used to prove the check can fail.
    pub corrupt: bool,
}

pub fn run_gradcheck(s: &GradcheckSettings) -> Result<GradcheckReport> {
    let mut rows: Vec<GradcheckRow> = s
        .steps
        .iter()
        .map(|&h| GradcheckRow {
            h,
            params: 0.0,
            input: 0.0,
            certainty: 0.0,
        })
        .collect();
    for case in 0..s.cases {
        let mut spec = s.spec.clone();
        spec.init_seed = derive_seed(s.seed, STREAM_GRADCHECK, case as u64);
        let model = init_model(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let adv = kink_free_sample(&model, s, &mut rng)?;
        for row in rows.iter_mut() {
            let e = check_case(&model, &adv, s.objective, row.h, s.corrupt)?;
            row.params = row.params.max(e.params);
            row.input = row.input.max(e.input);
            row.certainty = row.certainty.max(e.certainty);
        }
    }
    Ok(GradcheckReport {
        cases: s.cases,
        tolerance: GRADCHECK_TOLERANCE,
        rows,
    })
}

fn kink_free_sample(model: &ModelState, s: &GradcheckSettings, rng: &mut ChaCha8Rng) -> Result<AdversarialBatch> {
    let n = s.batch_size.min(s.data.len());
    for _ in 0..MAX_REDRAWS {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..s.data.len())).collect();
        let x = s.data.inputs.select_rows(&idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| s.data.labels[i]).collect();
        let adv = generate_batch(model, &x, &labels, s.attack, rng)?;
        if preactivation_margin(model, &adv.originals)? >= KINK_MARGIN
            && preactivation_margin(model, &adv.perturbed)? >= KINK_MARGIN
        {
            return Ok(adv);
        }
    }
    Err(Error::numeric(format!(
        "no sample with every hidden pre-activation at least {KINK_MARGIN} from a kink after {MAX_REDRAWS} draws"
    )))
}

/// Smallest `|z|` over hidden pre-activations (infinite for smooth models).
pub fn preactivation_margin(model: &ModelState, x: &Tensor) -> Result<f64> {
    if model.spec().activation != Activation::Relu {
        return Ok(f64::INFINITY);
    }
    let segs = model.params().segments();
    let layers = segs.len() / 2;
    let mut h = x.clone();
    let mut margin = f64::INFINITY;
    for l in 0..layers - 1 {
        let (w, b) = (&segs[2 * l].tensor, &segs[2 * l + 1].tensor);
        let mut next = Vec::with_capacity(h.rows() * w.rows());
        for i in 0..h.rows() {
            for o in 0..w.rows() {
                let z = b.data()[o] + h.row(i).iter().zip(w.row(o)).map(|(a, b)| a * b).sum::<f64>();
                margin = margin.min(z.abs());
                next.push(z.max(0.0));
            }
        }
        h = Tensor::new(vec![x.rows(), w.rows()], next)?;
    }
    Ok(margin)
}

struct CaseErrors {
    params: f64,
    input: f64,
    certainty: f64,
}

fn check_case(model: &ModelState, adv: &AdversarialBatch, objective: &ObjectiveKind, h: f64, corrupt: bool) -> Result<CaseErrors> {
    let template = model.params();
    let theta = template.flatten();
    let with = |p: &[f64]| -> Result<ModelState> { model.with_params(template.unflatten(p)?) };

    let (_, g) = grad_robust_loss(model, adv, objective)?;
    let analytic = spoil(g.flatten(), corrupt);
    let fd = finite_diff_grad(|p| robust_loss(&with(p)?, adv, objective), &theta, h)?;
    let params = relative_error(&analytic, &fd);

    let labels = &adv.labels;
    let (_, gx) = grad_input(model, &adv.originals, |g, net, x| {
        let logits = net.logits(g, x)?;
        let ce = cross_entropy_rows(g, logits, labels)?;
        Ok(g.sum(ce))
    })?;
    let analytic = spoil(gx.into_data(), corrupt);
    let shape = adv.originals.shape().to_vec();
    let fd = finite_diff_grad(
        |x| {
            let logits = forward_logits(model, &Tensor::new(shape.clone(), x.to_vec())?)?;
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                total += crate::objective::cross_entropy(logits.row(i), y)?;
            }
            Ok(total)
        },
        adv.originals.data(),
        h,
    )?;
    let input = relative_error(&analytic, &fd);

    let (_, gc) = grad_params(model, |g, net| certainty_graph(g, net, &adv.perturbed))?;
    let analytic = spoil(gc.flatten(), corrupt);
    let fd = finite_diff_grad(|p| Ok(certainty_of(&with(p)?, adv)?.mean), &theta, h)?;
    let certainty = relative_error(&analytic, &fd);

    Ok(CaseErrors { params, input, certainty })
}

fn spoil(mut g: Vec<f64>, corrupt: bool) -> Vec<f64> {
    if corrupt {
        if let Some(first) = g.first_mut() {
            *first += 1e-2 * first.abs().max(1.0);
        }
    }
    g
}
