//! Datasets: seeded synthetic mixtures, IDX image files, splits and batches.

mod idx;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::Tensor;

pub use idx::{load_idx_images, parse_idx_images, parse_idx_labels, IdxImages};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub domain_box: Option<[f64; 2]>,
    pub name: String,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        domain_box: Option<[f64; 2]>,
        name: impl Into<String>,
    ) -> Result<Self> {
        if inputs.ndim() != 2 {
            return Err(Error::shape(format!("dataset inputs must be [N, n], got {:?}", inputs.shape())));
        }
        if labels.is_empty() || labels.len() != inputs.rows() {
            return Err(Error::shape(format!(
                "{} labels for {} inputs",
                labels.len(),
                inputs.rows()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::shape(format!("label {y} out of range for {num_classes} classes")));
        }
        if !inputs.is_finite() {
            return Err(Error::numeric("dataset contains non-finite inputs"));
        }
        if let Some([lo, hi]) = domain_box {
            if inputs.data().iter().any(|&v| v < lo || v > hi) {
                return Err(Error::config(format!("inputs fall outside the domain box [{lo}, {hi}]")));
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            domain_box,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::config("empty subset"));
        }
        Ok(Dataset {
            inputs: self.inputs.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain_box: self.domain_box,
            name: self.name.clone(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl GaussianMixture {
    /// The desk-scale benchmark: 4 classes in 16 dimensions, 750 points per class.
    pub fn benchmark(seed: u64) -> Self {
        GaussianMixture {
            num_classes: 4,
            dim: 16,
            per_class: 750,
            class_separation: 3.0,
            noise_std: 1.0,
            seed,
        }
    }
}

/// Class means sit on a regular simplex with pairwise distance
/// `class_separation` (randomly rotated, seeded) when `K <= n`, otherwise on a
/// circle in the first two coordinates with adjacent distance
/// `class_separation`. Points are the mean plus isotropic Gaussian noise and
/// are emitted class-interleaved: `0, 1, ..., K-1, 0, 1, ...`.
pub fn make_gaussian_mixture(cfg: &GaussianMixture) -> Result<Dataset> {
    let GaussianMixture {
        num_classes: k,
        dim: n,
        per_class,
        class_separation,
        noise_std,
        seed,
    } = *cfg;
    if k < 2 || n == 0 || per_class == 0 {
        return Err(Error::config(format!(
            "gaussian mixture needs K >= 2, n >= 1 and per_class >= 1 (got {k}, {n}, {per_class})"
        )));
    }
    if !(class_separation.is_finite() && class_separation >= 0.0 && noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::config("separation and noise_std must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(k, n, class_separation, &mut rng);
    let mut data = Vec::with_capacity(k * per_class * n);
    let mut labels = Vec::with_capacity(k * per_class);
    for _ in 0..per_class {
        for (y, mean) in means.iter().enumerate() {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + noise_std * z);
            }
            labels.push(y);
        }
    }
    let inputs = Tensor::new(vec![k * per_class, n], data)?;
    Dataset::new(inputs, labels, k, None, format!("gaussian_mixture_k{k}_n{n}_s{seed}"))
}

fn class_means(k: usize, n: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if k <= n {
        // Gram-Schmidt on K Gaussian vectors gives K orthonormal directions.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        while basis.len() < k {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let scale = separation / std::f64::consts::SQRT_2;
        basis
            .into_iter()
            .map(|b| b.into_iter().map(|x| x * scale).collect())
            .collect()
    } else {
        let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
        (0..k)
            .map(|j| {
                let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                let mut m = vec![0.0; n];
                m[0] = radius * angle.cos();
                if n > 1 {
                    m[1] = radius * angle.sin();
                }
                m
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    #[serde(default)]
    pub shuffle_seed: u64,
}

/// Stratified, seeded split. Each class contributes
/// `round(count * train_fraction)` examples to the train side, kept within
/// `[1, count - 1]` when the class has at least two examples. Both sides keep
/// the original example order.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::config(format!("train_fraction must lie in (0, 1), got {f}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed);
    let mut in_train = vec![false; dataset.len()];
    for class in 0..dataset.num_classes {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let c = members.len();
        let mut take = (c as f64 * f).round() as usize;
        if c >= 2 {
            take = take.clamp(1, c - 1);
        }
        for &i in &members[..take] {
            in_train[i] = true;
        }
    }
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| in_train[i]).collect();
    let test: Vec<usize> = (0..dataset.len()).filter(|&i| !in_train[i]).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::config(format!(
            "train_fraction {f} leaves an empty side ({} train, {} test)",
            train.len(),
            test.len()
        )));
    }
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Seeded permutation of the dataset cut into contiguous chunks; the last
/// chunk may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            Ok(Batch {
                inputs: dataset.inputs.select_rows(chunk)?,
                labels: chunk.iter().map(|&i| dataset.labels[i]).collect(),
                indices: chunk.to_vec(),
            })
        })
        .collect()
}
