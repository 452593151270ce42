//! Conditional normalizing flow between mel frames and Gaussian latents.
//!
//! Each step, in the normalizing direction (mel to latent), applies
//! 1. actnorm: `h <- (h + bias) * exp(log_scale)` per channel,
//! 2. channel mixing: `h <- h W` with `W = P L (U + diag(sign * exp(log_diag)))`,
//! 3. affine coupling: one half of the channels is scaled and shifted by a network
//!    of the other half and the frame conditioning, `y_b = x_b * exp(s) + t`.
//!
//! Coupling halves alternate between steps. Log-scales pass through a smooth clamp
//! `5 tanh(s / 5)`, so every step stays invertible for any parameter values. The
//! per-frame structure means a batch of utterances is just their frames stacked.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::features::{FeatureStack, FrameConditioning};
use crate::nn::{gaussian, sample_batch, Adam, Bound, Linear, LossCurve, ParamId, Params, TrainConfig};
use crate::rng::stream;
use crate::syncorpus::{Corpus, MelSpectrogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub steps: usize,
    pub hidden: usize,
    pub log_scale_bound: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            hidden: 64,
            log_scale_bound: 5.0,
        }
    }
}

/// T × D latent sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence(Array2<f64>);

impl LatentSequence {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        ensure!(
            frames.iter().all(|v| v.is_finite()),
            Numeric,
            "latent contains non-finite values"
        );
        Ok(Self(frames))
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.0
    }

    pub fn frame_count(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone)]
struct Coupling {
    hidden0: Linear,
    hidden1: Linear,
    out: Linear,
    /// Channels fed to the network.
    keep: std::ops::Range<usize>,
    /// Channels transformed.
    change: std::ops::Range<usize>,
}

#[derive(Debug, Clone)]
struct FlowStep {
    an_bias: ParamId,
    an_log_scale: ParamId,
    permutation: ParamId,
    lower: ParamId,
    upper: ParamId,
    log_diag: ParamId,
    sign: ParamId,
    coupling: Coupling,
}

/// The flow `f`; [`FlowModel::inverse`] maps mels to latents and
/// [`FlowModel::forward`] maps latents back.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub data_dim: usize,
    pub cond_dim: usize,
    pub params: Params,
    steps: Vec<FlowStep>,
    /// Set once actnorm has seen its data-dependent initialization batch.
    pub actnorm_initialized: bool,
}

fn lower_mask(d: usize) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(i, j)| if i > j { 1.0 } else { 0.0 })
}

fn upper_mask(d: usize) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(i, j)| if i < j { 1.0 } else { 0.0 })
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// `(P, L, U)` with `P L U = q`, `L` unit lower triangular.
fn plu(q: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let d = q.nrows();
    let (p, l, u) = q.clone().lu().unpack();
    let mut pm = DMatrix::<f64>::identity(d, d);
    p.permute_rows(&mut pm);
    // pm * q == l * u, so q == pm^T * l * u.
    (pm.transpose(), l, u)
}

impl FlowModel {
    fn build<R: Rng + ?Sized>(
        config: &FlowConfig,
        data_dim: usize,
        cond_dim: usize,
        random_mixing: bool,
        rng: &mut R,
    ) -> Self {
        let d = data_dim;
        let mut params = Params::new();
        let half = d / 2;
        let mut steps = Vec::with_capacity(config.steps);
        for k in 0..config.steps {
            let name = |part: &str| format!("flow.step{k}.{part}");
            let (perm, lower, upper, sign, log_diag) = if random_mixing {
                    let normal = to_dmatrix(&gaussian(rng, (d, d), 1.0));
                    let q = normal.qr().q();
                    let (p, l, u) = plu(&q);
                    let diag = u.diagonal();
                    (
                        from_dmatrix(&p),
                        from_dmatrix(&l) * lower_mask(d),
                        from_dmatrix(&u) * upper_mask(d),
                        Array2::from_shape_fn((1, d), |(_, j)| diag[j].signum()),
                        Array2::from_shape_fn((1, d), |(_, j)| diag[j].abs().ln()),
                    )
                } else {
                    (
                        Array2::eye(d),
                        Array2::zeros((d, d)),
                        Array2::zeros((d, d)),
                        Array2::ones((1, d)),
                        Array2::zeros((1, d)),
                    )
                };
            let (keep, change) = if k % 2 == 0 {
                (0..half, half..d)
            } else {
                (half..d, 0..half)
            };
            let n_in = keep.len() + cond_dim;
            let n_out = 2 * change.len();
            steps.push(FlowStep {
                an_bias: params.add(name("actnorm.bias"), Array2::zeros((1, d))),
                an_log_scale: params.add(name("actnorm.log_scale"), Array2::zeros((1, d))),
                permutation: params.add_fixed(name("mix.permutation"), perm),
                lower: params.add(name("mix.lower"), lower),
                upper: params.add(name("mix.upper"), upper),
                log_diag: params.add(name("mix.log_diag"), log_diag),
                sign: params.add_fixed(name("mix.sign"), sign),
                coupling: Coupling {
                    hidden0: Linear::new(&mut params, &name("coupling.hidden0"), n_in, config.hidden, rng),
                    hidden1: Linear::new(
                        &mut params,
                        &name("coupling.hidden1"),
                        config.hidden,
                        config.hidden,
                        rng,
                    ),
                    out: Linear::zeros(&mut params, &name("coupling.out"), config.hidden, n_out),
                    keep,
                    change,
                },
            });
        }
        Self {
            config: config.clone(),
            data_dim,
            cond_dim,
            params,
            steps,
            actnorm_initialized: false,
        }
    }

    /// Random orthogonal mixing, zero coupling outputs, unit actnorm.
    pub fn new<R: Rng + ?Sized>(config: &FlowConfig, data_dim: usize, cond_dim: usize, rng: &mut R) -> Self {
        Self::build(config, data_dim, cond_dim, true, rng)
    }

    /// Every step is the identity map: unit actnorm, identity mixing, zero coupling output.
    pub fn identity<R: Rng + ?Sized>(
        config: &FlowConfig,
        data_dim: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(config, data_dim, cond_dim, false, rng)
    }

    /// Adds Gaussian noise to every trainable parameter (used to test generic parameter values).
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            if self.params.is_fixed(id) {
                continue;
            }
            let shape = self.params.get(id).dim();
            let noise = gaussian(rng, shape, std);
            *self.params.get_mut(id) += &noise;
        }
    }

    fn mixing_var(&self, tape: &mut Tape, p: &Bound, step: &FlowStep) -> Var {
        let d = self.data_dim;
        let lmask = tape.constant(lower_mask(d));
        let umask = tape.constant(upper_mask(d));
        let eye = tape.constant(Array2::eye(d));
        let l = tape.mul(p[step.lower], lmask);
        let l = tape.add(l, eye);
        let u = tape.mul(p[step.upper], umask);
        let scale = tape.exp(p[step.log_diag]);
        let signed = tape.mul(scale, p[step.sign]);
        let diag = tape.diag(signed);
        let u = tape.add(u, diag);
        let pl = tape.matmul(p[step.permutation], l);
        tape.matmul(pl, u)
    }

    fn coupling_params(&self, tape: &mut Tape, p: &Bound, c: &Coupling, keep: Var, cond: Var) -> (Var, Var) {
        let nb = c.change.len();
        let inp = tape.concat_cols(&[keep, cond]);
        let h = c.hidden0.forward(tape, p, inp);
        let h = tape.tanh(h);
        let h = c.hidden1.forward(tape, p, h);
        let h = tape.tanh(h);
        let out = c.out.forward(tape, p, h);
        let shift = tape.slice_cols(out, 0, nb);
        let raw = tape.slice_cols(out, nb, 2 * nb);
        let log_scale = tape.soft_clamp(raw, self.config.log_scale_bound);
        (shift, log_scale)
    }

    /// One step in the normalizing direction; returns the output and its log-det.
    fn step_inverse_var(&self, tape: &mut Tape, p: &Bound, step: &FlowStep, h: Var, cond: Var) -> (Var, Var) {
        let t = tape.shape(h).0 as f64;
        let h = tape.add_row(h, p[step.an_bias]);
        let scale = tape.exp(p[step.an_log_scale]);
        let h = tape.mul_row(h, scale);
        let an_sum = tape.sum(p[step.an_log_scale]);
        let mut logdet = tape.scale(an_sum, t);

        let w = self.mixing_var(tape, p, step);
        let h = tape.matmul(h, w);
        let mix_sum = tape.sum(p[step.log_diag]);
        let mix_ld = tape.scale(mix_sum, t);
        logdet = tape.add(logdet, mix_ld);

        let c = &step.coupling;
        if c.change.is_empty() {
            return (h, logdet);
        }
        let keep = tape.slice_cols(h, c.keep.start, c.keep.end);
        let change = tape.slice_cols(h, c.change.start, c.change.end);
        let (shift, log_scale) = self.coupling_params(tape, p, c, keep, cond);
        let e = tape.exp(log_scale);
        let y = tape.mul(change, e);
        let y = tape.add(y, shift);
        let ls_sum = tape.sum(log_scale);
        logdet = tape.add(logdet, ls_sum);
        let parts = if c.keep.start == 0 { [keep, y] } else { [y, keep] };
        (tape.concat_cols(&parts), logdet)
    }

    /// Tape version of [`FlowModel::inverse`]: `(z, log_det)`.
    pub fn inverse_var(&self, tape: &mut Tape, p: &Bound, x: Var, cond: Var) -> (Var, Var) {
        let mut h = x;
        let mut logdet = tape.constant(Array2::zeros((1, 1)));
        for step in &self.steps {
            let (next, ld) = self.step_inverse_var(tape, p, step, h, cond);
            h = next;
            logdet = tape.add(logdet, ld);
        }
        (h, logdet)
    }

    /// Mean negative log-likelihood per dimension, as a `1 × 1` node.
    pub fn nll_var(&self, tape: &mut Tape, p: &Bound, x: Var, cond: Var) -> Var {
        let (t, d) = tape.shape(x);
        let n = (t * d) as f64;
        let (z, logdet) = self.inverse_var(tape, p, x, cond);
        let sq = tape.mul(z, z);
        let energy = tape.sum(sq);
        let energy = tape.scale(energy, 0.5);
        let neg_ld = tape.scale(logdet, -1.0);
        let total = tape.add(energy, neg_ld);
        let total = tape.scale(total, 1.0 / n);
        let constant = tape.constant(Array2::from_elem((1, 1), 0.5 * (2.0 * PI).ln()));
        tape.add(total, constant)
    }

    fn check_shapes(&self, frames: &Array2<f64>, cond: &FrameConditioning) -> Result<()> {
        ensure!(
            frames.ncols() == self.data_dim,
            Contract,
            "expected {} channels, got {}",
            self.data_dim,
            frames.ncols()
        );
        ensure!(
            cond.channels() == self.cond_dim,
            Contract,
            "expected {} conditioning channels, got {}",
            self.cond_dim,
            cond.channels()
        );
        ensure!(
            frames.nrows() == cond.frame_count(),
            Contract,
            "{} frames but conditioning covers {}",
            frames.nrows(),
            cond.frame_count()
        );
        ensure!(
            frames.iter().all(|v| v.is_finite()),
            Numeric,
            "non-finite flow input"
        );
        Ok(())
    }

    /// `z = f^{-1}(x; cond)` and the exact log-determinant of the Jacobian.
    pub fn inverse(&self, x: &MelSpectrogram, cond: &FrameConditioning) -> Result<(LatentSequence, f64)> {
        self.inverse_frames(x.frames(), cond)
    }

    pub fn inverse_frames(&self, x: &Array2<f64>, cond: &FrameConditioning) -> Result<(LatentSequence, f64)> {
        self.check_shapes(x, cond)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(cond.frames().clone());
        let (z, ld) = self.inverse_var(&mut tape, &p, xv, cv);
        let logdet = tape.scalar(ld);
        ensure!(logdet.is_finite(), Numeric, "non-finite log-determinant");
        Ok((LatentSequence::new(tape.value(z).clone())?, logdet))
    }

    /// `x = f(z; cond)`, the exact functional inverse of [`FlowModel::inverse`].
    pub fn forward(&self, z: &LatentSequence, cond: &FrameConditioning) -> Result<MelSpectrogram> {
        self.check_shapes(z.frames(), cond)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let cv = tape.constant(cond.frames().clone());
        let mut h = z.frames().clone();
        for step in self.steps.iter().rev() {
            let c = &step.coupling;
            if !c.change.is_empty() {
                let keep = tape.constant(h.slice(s![.., c.keep.clone()]).to_owned());
                let (shift, log_scale) = self.coupling_params(&mut tape, &p, c, keep, cv);
                let restored = (&h.slice(s![.., c.change.clone()]) - tape.value(shift))
                    * tape.value(log_scale).mapv(|v| (-v).exp());
                h.slice_mut(s![.., c.change.clone()]).assign(&restored);
            }
            let w = self.mixing_var(&mut tape, &p, step);
            let w_inv = to_dmatrix(tape.value(w))
                .try_inverse()
                .ok_or_else(|| Error::Numeric("singular mixing matrix".into()))?;
            h = h.dot(&from_dmatrix(&w_inv));
            let inv_scale = self.params.get(step.an_log_scale).mapv(|v| (-v).exp());
            h = &h * &inv_scale - self.params.get(step.an_bias);
        }
        MelSpectrogram::new(h)
    }

    /// Mean negative log-likelihood per dimension under the standard normal prior.
    pub fn nll(&self, x: &MelSpectrogram, cond: &FrameConditioning) -> Result<f64> {
        self.check_shapes(x.frames(), cond)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.frames().clone());
        let cv = tape.constant(cond.frames().clone());
        let out = self.nll_var(&mut tape, &p, xv, cv);
        Ok(tape.scalar(out))
    }

    /// Data-dependent actnorm initialization: each step's actnorm whitens the
    /// per-channel statistics of the batch as it arrives at that step.
    pub fn initialize_actnorm(&mut self, x: &Array2<f64>, cond: &Array2<f64>) {
        let mut h = x.clone();
        for k in 0..self.steps.len() {
            let (bias_id, ls_id) = (self.steps[k].an_bias, self.steps[k].an_log_scale);
            let mean = h.mean_axis(ndarray::Axis(0)).expect("nonempty batch");
            let std = h.std_axis(ndarray::Axis(0), 0.0);
            for j in 0..self.data_dim {
                self.params.get_mut(bias_id)[[0, j]] = -mean[j];
                self.params.get_mut(ls_id)[[0, j]] = -(std[j].max(1e-6)).ln();
            }
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let hv = tape.constant(h);
            let cv = tape.constant(cond.clone());
            let (out, _) = self.step_inverse_var(&mut tape, &p, &self.steps[k], hv, cv);
            h = tape.value(out).clone();
        }
        self.actnorm_initialized = true;
    }
}

/// Record of a flow training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainLog {
    pub curve: LossCurve,
    /// Mean NLL on the monitor set right after initialization.
    pub initial_nll: f64,
    pub final_nll: f64,
}

/// Stacked frames and conditioning for a set of utterances.
fn batch_vars(
    tape: &mut Tape,
    features: &FeatureStack,
    fp: &Bound,
    corpus: &Corpus,
    batch: &[usize],
) -> Result<(Var, Var)> {
    let mut xs = Vec::with_capacity(batch.len());
    let mut cs = Vec::with_capacity(batch.len());
    for &i in batch {
        let u = &corpus.utterances[i];
        xs.push(tape.constant(u.mel.frames().clone()));
        cs.push(features.conditioning_var(tape, fp, &u.phoneme_seq, u.speaker_id, u.accent_id)?);
    }
    Ok((tape.concat_rows(&xs), tape.concat_rows(&cs)))
}

/// Mean NLL over `indices` with frozen parameters.
pub fn mean_nll(features: &FeatureStack, flow: &FlowModel, corpus: &Corpus, indices: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let fp = features.params.bind_frozen(&mut tape);
    let p = flow.params.bind_frozen(&mut tape);
    let (x, c) = batch_vars(&mut tape, features, &fp, corpus, indices)?;
    let out = flow.nll_var(&mut tape, &p, x, c);
    Ok(tape.scalar(out))
}

/// Jointly trains the flow and the conditioning stack by maximum likelihood on
/// `indices`. `monitor` is scored before and after training.
pub fn train_flow(
    features: &mut FeatureStack,
    flow: &mut FlowModel,
    corpus: &Corpus,
    indices: &[usize],
    monitor: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<FlowTrainLog> {
    ensure!(!indices.is_empty(), Contract, "flow training needs utterances");
    let mut curve = LossCurve::default();
    if config.steps == 0 {
        let nll = mean_nll(features, flow, corpus, monitor)?;
        return Ok(FlowTrainLog {
            curve,
            initial_nll: nll,
            final_nll: nll,
        });
    }
    if !flow.actnorm_initialized {
        let batch = sample_batch(indices, config.batch_size, &mut stream(seed, "flow-batch", 0));
        let mut tape = Tape::new();
        let fp = features.params.bind_frozen(&mut tape);
        let (x, c) = batch_vars(&mut tape, features, &fp, corpus, &batch)?;
        flow.initialize_actnorm(tape.value(x), tape.value(c));
    }
    let initial_nll = mean_nll(features, flow, corpus, monitor)?;
    let mut flow_opt = Adam::new(&flow.params, config.learning_rate);
    let mut feat_opt = Adam::new(&features.params, config.learning_rate);
    for step in 0..config.steps {
        let batch = sample_batch(indices, config.batch_size, &mut stream(seed, "flow-batch", step as u64));
        let mut tape = Tape::new();
        let fp = features.params.bind(&mut tape);
        let p = flow.params.bind(&mut tape);
        let (x, c) = batch_vars(&mut tape, features, &fp, corpus, &batch)?;
        let loss = flow.nll_var(&mut tape, &p, x, c);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "flow NLL became {value} at step {step} (last finite {:?})",
                curve.losses.last()
            )));
        }
        let grads = tape.backward(loss);
        let g_flow = flow.params.collect_grads(&p, &grads);
        let g_feat = features.params.collect_grads(&fp, &grads);
        flow_opt.step(&mut flow.params, &g_flow);
        feat_opt.step(&mut features.params, &g_feat);
        curve.push(step, value);
        if config.log_every > 0 && step % config.log_every == 0 {
            log::info!("flow step {step}: nll {value:.4}");
        }
    }
    if !flow.params.all_finite() || !features.params.all_finite() {
        return Err(Error::Training("flow parameters became non-finite".into()));
    }
    let final_nll = mean_nll(features, flow, corpus, monitor)?;
    Ok(FlowTrainLog {
        curve,
        initial_nll,
        final_nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    fn cond(t: usize, c: usize, seed: u64) -> FrameConditioning {
        FrameConditioning::new(gaussian(&mut seeded(seed), (t, c), 1.0)).unwrap()
    }

    #[test]
    fn identity_flow_is_identity() {
        let flow = FlowModel::identity(&FlowConfig::default(), 16, 5, &mut seeded(0));
        let x = MelSpectrogram::new(gaussian(&mut seeded(1), (10, 16), 1.0)).unwrap();
        let c = cond(10, 5, 2);
        let (z, ld) = flow.inverse(&x, &c).unwrap();
        assert_eq!(z.frames().dim(), (10, 16));
        assert!(z.frames().iter().zip(x.frames()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(ld, 0.0);
        let back = flow.forward(&z, &c).unwrap();
        assert!(back.frames().iter().zip(x.frames()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn identity_flow_nll_is_standard_normal() {
        let flow = FlowModel::identity(&FlowConfig::default(), 2, 3, &mut seeded(0));
        let x = MelSpectrogram::new(array![[0.0, 0.0]]).unwrap();
        let nll = flow.nll(&x, &cond(1, 3, 1)).unwrap();
        assert!((nll - 0.918_938_533_204_672_7).abs() < 1e-12);
        let flow1 = FlowModel::identity(&FlowConfig::default(), 1, 3, &mut seeded(0));
        let x1 = MelSpectrogram::new(array![[1.0]]).unwrap();
        let nll1 = flow1.nll(&x1, &cond(1, 3, 1)).unwrap();
        assert!((nll1 - (0.5 * (2.0 * PI).ln() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn random_flow_roundtrips_both_ways() {
        let mut flow = FlowModel::new(&FlowConfig::default(), 16, 6, &mut seeded(3));
        flow.perturb(&mut seeded(4), 0.1);
        let x = MelSpectrogram::new(gaussian(&mut seeded(5), (12, 16), 1.0)).unwrap();
        let c = cond(12, 6, 6);
        let (z, _) = flow.inverse(&x, &c).unwrap();
        let back = flow.forward(&z, &c).unwrap();
        let err = (back.frames() - x.frames()).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-8, "{err}");
        let z2 = LatentSequence::new(gaussian(&mut seeded(7), (12, 16), 1.0)).unwrap();
        let x2 = flow.forward(&z2, &c).unwrap();
        let (z2b, _) = flow.inverse(&x2, &c).unwrap();
        let err = (z2b.frames() - z2.frames()).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn orthogonal_init_has_unit_determinant() {
        let flow = FlowModel::new(&FlowConfig::default(), 8, 2, &mut seeded(9));
        let x = MelSpectrogram::new(gaussian(&mut seeded(1), (3, 8), 1.0)).unwrap();
        let (_, ld) = flow.inverse(&x, &cond(3, 2, 2)).unwrap();
        assert!(ld.abs() < 1e-9, "{ld}");
    }

    #[test]
    fn shape_errors() {
        let flow = FlowModel::identity(&FlowConfig::default(), 4, 3, &mut seeded(0));
        let x = MelSpectrogram::new(Array2::zeros((5, 4))).unwrap();
        assert!(matches!(flow.inverse(&x, &cond(4, 3, 0)), Err(Error::Contract(_))));
        assert!(matches!(flow.inverse(&x, &cond(5, 2, 0)), Err(Error::Contract(_))));
        let bad = MelSpectrogram::new(Array2::zeros((5, 3))).unwrap();
        assert!(matches!(flow.inverse(&bad, &cond(5, 3, 0)), Err(Error::Contract(_))));
        let mut nan = Array2::zeros((5, 4));
        nan[[0, 0]] = f64::NAN;
        assert!(matches!(
            flow.inverse_frames(&nan, &cond(5, 3, 0)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn actnorm_init_whitens_the_batch() {
        let mut flow = FlowModel::identity(&FlowConfig::default(), 4, 2, &mut seeded(1));
        let x = gaussian(&mut seeded(2), (200, 4), 3.0) + 5.0;
        let c = gaussian(&mut seeded(3), (200, 2), 1.0);
        flow.initialize_actnorm(&x, &c);
        let (z, _) = flow
            .inverse_frames(&x, &FrameConditioning::new(c).unwrap())
            .unwrap();
        let mean = z.frames().mean_axis(ndarray::Axis(0)).unwrap();
        let std = z.frames().std_axis(ndarray::Axis(0), 0.0);
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        assert!(std.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }
}
