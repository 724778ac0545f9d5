use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::graph::{Graph, Var};
use crate::netcore::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Fully connected classifier: `input_dim -> layer_widths[0] -> ... -> K`.
///
/// Hidden layers use `activation`; the last layer is affine and produces logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.layer_widths.is_empty() {
            return Err(Error::config("layer_widths must name at least the output layer"));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("layer {i} has zero width")));
        }
        if self.num_classes() < 2 {
            return Err(Error::config("the output layer needs at least two classes"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    /// `(fan_in, fan_out)` of each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.layer_widths.len());
        let mut fan_in = self.input_dim;
        for &w in &self.layer_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    /// Half-width of the uniform initialisation interval for a layer.
    pub fn init_bound(fan_in: usize) -> f64 {
        1.0 / (fan_in as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub tensor: Tensor,
}

/// Named parameter tensors in a fixed order (`w0, b0, w1, b1, ...`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(segments: Vec<Segment>) -> Self {
        ParamVector { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [Segment] {
        &mut self.segments
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    name: s.name.clone(),
                    tensor: Tensor::zeros(s.tensor.shape()),
                })
                .collect(),
        }
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.segments.iter().map(|s| s.tensor.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for s in &self.segments {
            out.extend_from_slice(s.tensor.data());
        }
        out
    }

    /// Rebuilds a vector with this one's layout from flat values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.numel(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut segments = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            let n = s.tensor.len();
            segments.push(Segment {
                name: s.name.clone(),
                tensor: Tensor::new(s.tensor.shape().to_vec(), flat[offset..offset + n].to_vec())?,
            });
            offset += n;
        }
        Ok(ParamVector { segments })
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        let same = self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.name == b.name && a.tensor.same_shape(&b.tensor));
        if same {
            Ok(())
        } else {
            Err(Error::shape("parameter vectors have different layouts"))
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.segments.iter_mut().zip(&other.segments) {
            a.tensor.axpy(alpha, &b.tensor)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for s in &mut self.segments {
            s.tensor.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .segments
            .iter()
            .zip(&other.segments)
            .map(|(a, b)| a.tensor.data().iter().zip(b.tensor.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.tensor.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().all(|s| s.tensor.is_finite())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.segments.iter().find(|s| s.name == name).map(|s| &s.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.segments
            .iter_mut()
            .find(|s| s.name == name)
            .map(|s| &mut s.tensor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    spec: ModelSpec,
    params: ParamVector,
}

/// Uniform draw in `[0, 1)` from the top 53 bits of a `u64`.
pub(crate) fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Initialises every weight and bias of layer `l` uniformly in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, drawing from ChaCha8 seeded with
/// `init_seed` in the order `w0` (row-major), `b0`, `w1`, `b1`, ...
pub fn init_model(spec: &ModelSpec) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut segments = Vec::new();
    for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let bound = ModelSpec::init_bound(fan_in);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| bound * (2.0 * unit_f64(&mut rng) - 1.0)).collect()
        };
        let w = Tensor::new(vec![fan_out, fan_in], draw(fan_out * fan_in))?;
        let b = Tensor::new(vec![fan_out], draw(fan_out))?;
        segments.push(Segment {
            name: format!("w{l}"),
            tensor: w,
        });
        segments.push(Segment {
            name: format!("b{l}"),
            tensor: b,
        });
    }
    Ok(ModelState {
        spec: spec.clone(),
        params: ParamVector::new(segments),
    })
}

impl ModelState {
    pub fn from_parts(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        let template = init_layout(&spec);
        params.check_layout(&template)?;
        Ok(ModelState { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Same spec, new parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        params.check_layout(&self.params)?;
        Ok(ModelState {
            spec: self.spec.clone(),
            params,
        })
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }
}

fn init_layout(spec: &ModelSpec) -> ParamVector {
    let mut segments = Vec::new();
    for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        segments.push(Segment {
            name: format!("w{l}"),
            tensor: Tensor::zeros(&[fan_out, fan_in]),
        });
        segments.push(Segment {
            name: format!("b{l}"),
            tensor: Tensor::zeros(&[fan_out]),
        });
    }
    ParamVector::new(segments)
}

/// A model's parameters bound into a [`Graph`].
pub struct Network<'m> {
    model: &'m ModelState,
    params: Vec<Var>,
}

impl<'m> Network<'m> {
    /// Binds parameters as gradient-carrying leaves when `trainable`, else as constants.
    pub fn bind(g: &mut Graph, model: &'m ModelState, trainable: bool) -> Self {
        let params = model
            .params
            .segments()
            .iter()
            .map(|s| {
                if trainable {
                    g.param(s.tensor.clone())
                } else {
                    g.constant(s.tensor.clone())
                }
            })
            .collect();
        Network { model, params }
    }

    pub fn model(&self) -> &ModelState {
        self.model
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Logits for `x` of shape `[n]` or `[B, n]`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xv = g.value(x);
        if xv.ndim() > 2 || xv.cols() != self.model.spec.input_dim {
            return Err(Error::shape(format!(
                "input of shape {:?} for a model with input_dim {}",
                xv.shape(),
                self.model.spec.input_dim
            )));
        }
        let layers = self.params.len() / 2;
        let mut h = x;
        for l in 0..layers {
            h = g.affine(h, self.params[2 * l], self.params[2 * l + 1])?;
            if l + 1 < layers {
                h = match self.model.spec.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        Ok(h)
    }

    /// Collects gradients of the bound parameters into a [`ParamVector`].
    fn collect(&self, grads: &mut crate::netcore::graph::Gradients) -> ParamVector {
        let segments = self
            .model
            .params
            .segments()
            .iter()
            .zip(&self.params)
            .map(|(s, &v)| Segment {
                name: s.name.clone(),
                tensor: grads.take(v).unwrap_or_else(|| Tensor::zeros(s.tensor.shape())),
            })
            .collect();
        ParamVector::new(segments)
    }
}

pub fn forward_logits(model: &ModelState, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let net = Network::bind(&mut g, model, false);
    let xv = g.constant(x.clone());
    let out = net.logits(&mut g, xv)?;
    Ok(g.value(out).clone())
}

/// Argmax of the logits, lowest index on ties.
pub fn predict_label(model: &ModelState, x: &Tensor) -> Result<usize> {
    if x.ndim() != 1 {
        return Err(Error::shape("predict_label takes a single input vector"));
    }
    Ok(argmax(forward_logits(model, x)?.data()))
}

/// Predicted label for each row of `[B, n]`.
pub fn predict_labels(model: &ModelState, x: &Tensor) -> Result<Vec<usize>> {
    let logits = forward_logits(model, x)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

/// Value and parameter gradient of a scalar loss built on the model.
pub fn grad_params<F>(model: &ModelState, loss: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Graph, &Network) -> Result<Var>,
{
    let mut g = Graph::new();
    let net = Network::bind(&mut g, model, true);
    let out = loss(&mut g, &net)?;
    let value = scalar_value(&g, out)?;
    let mut grads = g.backward(out)?;
    Ok((value, net.collect(&mut grads)))
}

/// Value and input gradient of a scalar loss with the parameters held fixed.
pub fn grad_input<F>(model: &ModelState, x: &Tensor, loss: F) -> Result<(f64, Tensor)>
where
    F: FnOnce(&mut Graph, &Network, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let net = Network::bind(&mut g, model, false);
    let xv = g.param(x.clone());
    let out = loss(&mut g, &net, xv)?;
    let value = scalar_value(&g, out)?;
    let mut grads = g.backward(out)?;
    let dx = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value, dx))
}

fn scalar_value(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> ModelSpec {
        ModelSpec {
            input_dim: 2,
            layer_widths: vec![4, 2],
            activation: Activation::Relu,
            init_seed: seed,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_model(&spec(7)).unwrap();
        let b = init_model(&spec(7)).unwrap();
        let c = init_model(&spec(8)).unwrap();
        assert_eq!(a.params().flatten(), b.params().flatten());
        assert_ne!(a.params().flatten(), c.params().flatten());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = init_model(&spec(7)).unwrap();
        // first layer fan-in 2, second layer fan-in 4
        let b0 = 1.0 / 2f64.sqrt();
        let b1 = 0.5;
        for name in ["w0", "b0"] {
            assert!(m.params().get(name).unwrap().data().iter().all(|v| v.abs() <= b0));
        }
        for name in ["w1", "b1"] {
            assert!(m.params().get(name).unwrap().data().iter().all(|v| v.abs() <= b1));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(0);
        s.layer_widths = vec![0, 2];
        assert!(matches!(init_model(&s), Err(Error::Config(_))));
        s.layer_widths = vec![3, 1];
        assert!(init_model(&s).is_err());
        s.input_dim = 0;
        assert!(init_model(&s).is_err());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = init_model(&spec(1)).unwrap();
        assert!(matches!(
            forward_logits(&m, &Tensor::vector(vec![1.0, 2.0, 3.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn flatten_round_trip() {
        let m = init_model(&spec(3)).unwrap();
        let flat = m.params().flatten();
        assert_eq!(m.params().unflatten(&flat).unwrap(), *m.params());
        assert!(m.params().unflatten(&flat[1..]).is_err());
    }
}
