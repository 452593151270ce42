//! Parameter storage, dense layers and the Adam optimizer shared by every trained model.

use std::ops::Index;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    fixed: Vec<bool>,
}

/// Serialized form of one parameter matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Parameters placed on a tape, indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.fixed.push(false);
        ParamId(self.values.len() - 1)
    }

    /// A stored matrix that is saved with the model but never trained.
    pub fn add_fixed(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let id = self.add(name, value);
        self.fixed[id.0] = true;
        id
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn is_fixed(&self, id: ParamId) -> bool {
        self.fixed[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Places every parameter on the tape as a trainable leaf (fixed ones as constants).
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.values
                .iter()
                .zip(&self.fixed)
                .map(|(v, &fixed)| {
                    if fixed {
                        tape.constant(v.clone())
                    } else {
                        tape.param(v.clone())
                    }
                })
                .collect(),
        )
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }

    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Array2<f64>> {
        bound
            .0
            .iter()
            .zip(&self.values)
            .map(|(&v, value)| grads.get_or_zeros(v, value.dim()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| TensorRecord {
                name: name.clone(),
                shape: [v.nrows(), v.ncols()],
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites values from records; names and shapes must match exactly.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                records.len()
            )));
        }
        for ((name, value), rec) in self.names.iter().zip(self.values.iter_mut()).zip(records) {
            if *name != rec.name || [value.nrows(), value.ncols()] != rec.shape {
                return Err(Error::Contract(format!(
                    "tensor mismatch: expected {name} {:?}, found {} {:?}",
                    value.dim(),
                    rec.name,
                    rec.shape
                )));
            }
            *value = Array2::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data.clone())
                .map_err(|e| Error::Contract(e.to_string()))?;
        }
        Ok(())
    }
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let n: f64 = StandardNormal.sample(rng);
        n * std
    })
}

/// Fully connected layer `x W + b` acting on rows.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Glorot-scaled normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            w: params.add(format!("{name}.w"), gaussian(rng, (fan_in, fan_out), std)),
            b: params.add(format!("{name}.b"), Array2::zeros((1, fan_out))),
        }
    }

    pub fn zeros(params: &mut Params, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: params.add(format!("{name}.w"), Array2::zeros((fan_in, fan_out))),
            b: params.add(format!("{name}.b"), Array2::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p[self.w]);
        tape.add_row(y, p[self.b])
    }
}

/// Concatenates each row with its neighbours `-radius..=radius` (zero padded at the edges).
pub fn context_window(tape: &mut Tape, x: Var, radius: usize) -> Var {
    let n = tape.shape(x).0;
    let mut parts = Vec::with_capacity(2 * radius + 1);
    for offset in -(radius as isize)..=(radius as isize) {
        if offset == 0 {
            parts.push(x);
            continue;
        }
        let index = (0..n as isize)
            .map(|i| {
                let j = i + offset;
                (j >= 0 && j < n as isize).then_some(j as usize)
            })
            .collect();
        parts.push(tape.gather(x, index));
    }
    tape.concat_cols(&parts)
}

/// Optimization schedule shared by every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            log_every: 100,
        }
    }
}

/// Per-step losses recorded by a trainer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<usize>,
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn push(&mut self, step: usize, loss: f64) {
        self.steps.push(step);
        self.losses.push(loss);
    }
}

/// Minibatch of `size` entries drawn with replacement from `pool`.
pub fn sample_batch<R: Rng + ?Sized>(pool: &[usize], size: usize, rng: &mut R) -> Vec<usize> {
    (0..size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        let zeros: Vec<_> = params.values().iter().map(|v| Array2::zeros(v.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut Params, grads: &[Array2<f64>]) -> f64 {
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((value, g), (m, v)) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g * clip;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                });
        }
        norm
    }
}
