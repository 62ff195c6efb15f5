//! Optimization with four defense modes: none, adversarial training,
//! Jacobian regularization, and weighted-Jacobian (AMS) regularization.
//!
//! The regularizers penalize squared Frobenius norms of input-output
//! Jacobians, estimated by random projection: `||J||_F^2 = C * E[||v.J||^2]`
//! over unit-sphere vectors `v`, so one backward pass per projection
//! suffices. The penalty is the squared norm of a recorded input gradient,
//! which the tape can differentiate again for the parameter update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackConfig};
use crate::data::{subset, Dataset};
use crate::ebm;
use crate::error::{Error, Result};
use crate::landscape::GridSpec;
use crate::models::{Model, TracedModel};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Mean negative log-softmax of the true class, computed via logsumexp.
pub fn cross_entropy_var<E: Element>(logits: &Var<E>, labels: &[usize]) -> Result<Var<E>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!(
            "cross entropy expects [B,K] logits, got {s:?}"
        )));
    }
    let lse = logits.logsumexp(1)?;
    let picked = logits.select_classes(labels)?;
    Ok(lse.sub(&picked)?.sum_all().scale(1.0 / labels.len() as f64))
}

/// Value-level convenience over [`cross_entropy_var`].
pub fn cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let l = tape.leaf(logits.clone(), false);
    Ok(cross_entropy_var(&l, labels)?.item()?.as_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    PlainJacobian,
    WeightedJacobian,
}

/// Monte-Carlo estimate of a squared Jacobian Frobenius norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionEstimate {
    pub value: f64,
    pub n_proj: usize,
    pub kind: ProjectionKind,
}

/// One unit vector per batch row, drawn uniformly from the sphere.
fn unit_sphere_rows<E: Element>(b: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let mut data = Vec::with_capacity(b * k);
    for _ in 0..b {
        loop {
            let row: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                data.extend(row.iter().map(|&v| E::from_f64(v / norm)));
                break;
            }
        }
    }
    Tensor::new(vec![b, k], data).expect("projection matrix shape")
}

/// Row-wise softmax as plain values.
fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Tensor<E> {
    let s = logits.shape().to_vec();
    let k = s[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
        let exps: Vec<E> = row.iter().map(|&v| (v - m).exp()).collect();
        let mut z = E::zero();
        for &e in &exps {
            z += e;
        }
        out.extend(exps.iter().map(|&e| e / z));
    }
    Tensor::new(s, out).expect("softmax shape")
}

/// Batch-mean estimated squared Frobenius norm as a differentiable node:
/// `(C / (n_proj * B)) * sum_mu ||d(V_mu . M)/dx||^2` with `M` the logits
/// (plain) or probability-weighted logits. `x` must require grad.
pub(crate) fn penalty_from_logits<E: Element>(
    x: &Var<E>,
    logits: &Var<E>,
    weighted: bool,
    detach_probs: bool,
    projections: &[Tensor<E>],
) -> Result<Var<E>> {
    if projections.is_empty() {
        return Err(Error::Config("penalty needs n_proj >= 1".into()));
    }
    let b = x.shape()[0];
    let k = logits.shape()[1];
    let tape = x.tape().clone();
    let target = if weighted {
        let p = if detach_probs {
            tape.leaf(softmax_rows(&logits.value()), false)
        } else {
            logits.softmax(1)?
        };
        p.mul(logits)?
    } else {
        logits.clone()
    };
    let mut total: Option<Var<E>> = None;
    for v in projections {
        let vv = tape.leaf(v.clone(), false);
        vv.mul(&target)?.sum_all().backward()?;
        let gx = x.grad().ok_or_else(|| {
            Error::Contract("projection penalty needs an input that requires grad".into())
        })?;
        let term = gx.mul(&gx)?.sum_all();
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    let total = total.expect("nonempty projections");
    Ok(total.scale(k as f64 / (projections.len() * b) as f64))
}

/// Random-projection estimate of `||J(x)||_F^2` for a single sample. One
/// backward pass per projection.
pub fn jacobian_frob_estimate<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    n_proj: usize,
    seed: u64,
) -> Result<ProjectionEstimate> {
    estimate_frob(model, x, n_proj, seed, false)
}

/// Random-projection estimate of `||J^w(x)||_F^2`, where `J^w` weights each
/// Jacobian row by the predicted class probability. The probabilities enter
/// the projection as values, which is what makes the estimator unbiased for
/// `||J^w||_F^2`; the training penalty can differentiate through them
/// instead (see [`DefenseConfig`]).
pub fn ams_frob_estimate<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    n_proj: usize,
    seed: u64,
) -> Result<ProjectionEstimate> {
    estimate_frob(model, x, n_proj, seed, true)
}

fn estimate_frob<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    n_proj: usize,
    seed: u64,
    weighted: bool,
) -> Result<ProjectionEstimate> {
    if n_proj == 0 {
        return Err(Error::Config("estimator needs n_proj >= 1".into()));
    }
    let k = model.num_classes();
    let mut bs = vec![1];
    bs.extend_from_slice(x.shape());
    let batched = x.reshaped(&bs)?;
    let probs = if weighted {
        Some(softmax_rows(&model.forward_logits(&batched)?))
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n_proj {
        let mut v = unit_sphere_rows::<E>(1, k, &mut rng);
        if let Some(p) = &probs {
            for (vi, &pi) in v.data_mut().iter_mut().zip(p.data()) {
                *vi *= pi;
            }
        }
        let tape = Tape::new();
        let xv = tape.leaf(batched.clone(), true);
        let z = model.trace(&tape, false).logits(&xv)?;
        let vv = tape.leaf(v, false);
        vv.mul(&z)?.sum_all().backward()?;
        let g = xv.grad_value().unwrap_or_else(|| Tensor::zeros(&bs));
        acc += g.data().iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    Ok(ProjectionEstimate {
        value: k as f64 * acc / n_proj as f64,
        n_proj,
        kind: if weighted {
            ProjectionKind::WeightedJacobian
        } else {
            ProjectionKind::PlainJacobian
        },
    })
}

/// Exact squared Frobenius norm by exhausting the standard basis: one
/// backward pass per class row. The weighted variant scales each row by the
/// predicted class probability.
pub fn jacobian_frob_exact<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    weighted: bool,
) -> Result<f64> {
    let rows = if weighted {
        ebm::weighted_jacobian_rows(model, x)?
    } else {
        ebm::jacobian_rows(model, x)?
    };
    Ok(rows
        .iter()
        .map(|r| r.data().iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum())
}

/// Both sides of the likelihood-gradient upper bound
/// `||d log p/dx||_F^2 <= C ||J^w||_F^2`, computed exactly.
#[derive(Debug, Clone, Serialize)]
pub struct GradientBoundOutcome {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn verify_gradient_bound<E: Element>(model: &Model<E>, x: &Tensor<E>) -> Result<GradientBoundOutcome> {
    let g = ebm::likelihood_gradient(model, x)?;
    let lhs: f64 = g.data().iter().map(|&v| v.as_f64() * v.as_f64()).sum();
    let rhs = model.num_classes() as f64 * jacobian_frob_exact(model, x, true)?;
    Ok(GradientBoundOutcome {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-9) + 1e-15,
    })
}

fn default_n_proj() -> usize {
    1
}

/// Defense applied during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DefenseConfig {
    None,
    AdversarialTraining {
        attack: AttackConfig,
        #[serde(default)]
        mix_clean: bool,
    },
    JacobianReg {
        lambda: f64,
        #[serde(default = "default_n_proj")]
        n_proj: usize,
    },
    AmsReg {
        lambda: f64,
        #[serde(default = "default_n_proj")]
        n_proj: usize,
        /// Treat the probability weights as constants in the penalty
        /// gradient instead of differentiating through them.
        #[serde(default)]
        detach_probs: bool,
    },
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::AdversarialTraining { attack, .. } => attack.validate(),
            DefenseConfig::JacobianReg { lambda, n_proj }
            | DefenseConfig::AmsReg { lambda, n_proj, .. } => {
                if *lambda < 0.0 {
                    return Err(Error::Config(format!(
                        "lambda must be >= 0, got {lambda}"
                    )));
                }
                if *n_proj == 0 {
                    return Err(Error::Config("n_proj must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    fn needs_input_grad(&self) -> bool {
        matches!(
            self,
            DefenseConfig::JacobianReg { .. } | DefenseConfig::AmsReg { .. }
        )
    }
}

fn default_batch_size() -> usize {
    32
}

fn default_lr() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.9
}

fn default_decay_epochs() -> Vec<usize> {
    vec![30, 45]
}

fn default_decay_factor() -> f64 {
    0.1
}

fn default_epochs() -> usize {
    60
}

/// SGD-with-momentum schedule. Defaults are the desk-scale version of the
/// full protocol (60 epochs, ten-fold decays at 30 and 45).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_lr(),
            momentum: default_momentum(),
            lr_decay_epochs: default_decay_epochs(),
            decay_factor: default_decay_factor(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !self.decay_factor.is_finite() || self.decay_factor <= 0.0 {
            return Err(Error::Config("decay_factor must be positive".into()));
        }
        for w in self.lr_decay_epochs.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(
                    "lr_decay_epochs must be strictly increasing".into(),
                ));
            }
        }
        if let (Some(&first), Some(&last)) =
            (self.lr_decay_epochs.first(), self.lr_decay_epochs.last())
        {
            if first < 1 || last > self.epochs {
                return Err(Error::Config(format!(
                    "lr_decay_epochs must lie within [1, {}]",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch flatness probe on a fixed stratified subset of the train set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiProbeConfig {
    pub n_samples: usize,
    pub n_planes: usize,
    pub eps_max: f64,
    pub resolution: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PhiProbeConfig {
    fn grid(&self) -> GridSpec {
        GridSpec::new(self.eps_max, self.resolution)
    }
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub clean_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    pub lr: f64,
}

/// Mini-batch objective: cross-entropy summed over the batch plus
/// `lambda/2` times the batch-averaged estimated squared Jacobian norm.
/// Adversarial training is handled by swapping the batch, not here.
pub fn joint_loss_var<E: Element>(
    traced: &TracedModel<E>,
    x: &Var<E>,
    labels: &[usize],
    defense: &DefenseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var<E>> {
    let logits = traced.logits(x)?;
    let b = labels.len();
    let ce_sum = cross_entropy_var(&logits, labels)?.scale(b as f64);
    let (weighted, lambda, n_proj, detach) = match defense {
        DefenseConfig::None => return Ok(ce_sum),
        DefenseConfig::AdversarialTraining { .. } => {
            return Err(Error::Contract(
                "joint_loss takes a regularizer defense; adversarial training swaps the batch"
                    .into(),
            ))
        }
        DefenseConfig::JacobianReg { lambda, n_proj } => (false, *lambda, *n_proj, false),
        DefenseConfig::AmsReg {
            lambda,
            n_proj,
            detach_probs,
        } => (true, *lambda, *n_proj, *detach_probs),
    };
    if lambda == 0.0 {
        return Ok(ce_sum);
    }
    let k = logits.shape()[1];
    let projections: Vec<Tensor<E>> = (0..n_proj)
        .map(|_| unit_sphere_rows::<E>(b, k, rng))
        .collect();
    let penalty = penalty_from_logits(x, &logits, weighted, detach, &projections)?;
    ce_sum.add(&penalty.scale(lambda / 2.0))
}

/// Value-level joint loss on a batch tensor; projections are drawn from the
/// seed, so the value is deterministic.
pub fn joint_loss<E: Element>(
    model: &Model<E>,
    inputs: &Tensor<E>,
    labels: &[usize],
    defense: &DefenseConfig,
    seed: u64,
) -> Result<f64> {
    defense.validate()?;
    let tape = Tape::new();
    let traced = model.trace(&tape, false);
    let x = tape.leaf(inputs.clone(), defense.needs_input_grad());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(joint_loss_var(&traced, &x, labels, defense, &mut rng)?
        .item()?
        .as_f64())
}

/// Replaces batch rows with attack results against the current parameters.
/// With `mix_clean`, the first half of the batch stays clean.
pub fn adversarial_batch<E: Element>(
    model: &Model<E>,
    inputs: &Tensor<E>,
    labels: &[usize],
    attack: &AttackConfig,
    mix_clean: bool,
    seed: u64,
) -> Result<Tensor<E>> {
    let b = labels.len();
    let per = inputs.numel() / b;
    let sample_shape = inputs.shape()[1..].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..b).map(|_| rng.gen()).collect();
    let first_adv = if mix_clean { b / 2 } else { 0 };
    let rows: Vec<Tensor<E>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let x = Tensor::new(
                sample_shape.clone(),
                inputs.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            if i < first_adv {
                Ok(x)
            } else {
                run_attack(model, &x, labels[i], attack, seeds[i])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(inputs.numel());
    for r in &rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(inputs.shape().to_vec(), data)
}

struct Sgd<E> {
    lr: f64,
    momentum: f64,
    velocity: Vec<Tensor<E>>,
}

impl<E: Element> Sgd<E> {
    fn new(model: &Model<E>, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect(),
        }
    }

    fn step(&mut self, model: &mut Model<E>, grads: &[Tensor<E>]) -> Result<()> {
        let m = E::from_f64(self.momentum);
        let lr = E::from_f64(self.lr);
        for ((param, vel), g) in model
            .params_mut()
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(grads)
        {
            for ((pv, vv), gv) in param
                .tensor
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(g.data())
            {
                *vv = m * *vv + *gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// One adversarial training step with plain SGD: attack the batch against
/// the current parameters, then apply a cross-entropy step. Returns the
/// batch loss (summed cross-entropy). An `eps = 0` attack reduces to a
/// standard training step.
pub fn adversarial_train_step<E: Element>(
    model: &mut Model<E>,
    inputs: &Tensor<E>,
    labels: &[usize],
    attack: &AttackConfig,
    mix_clean: bool,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    attack.validate()?;
    let adv = adversarial_batch(&*model, inputs, labels, attack, mix_clean, seed)?;
    let tape = Tape::new();
    let traced = model.trace(&tape, true);
    let x = tape.leaf(adv, false);
    let logits = traced.logits(&x)?;
    let loss = cross_entropy_var(&logits, labels)?.scale(labels.len() as f64);
    let loss_val = loss.item()?.as_f64();
    loss.backward()?;
    let grads: Vec<Tensor<E>> = traced
        .param_vars()
        .iter()
        .map(|p| {
            p.grad_value()
                .unwrap_or_else(|| Tensor::zeros(&p.shape()))
        })
        .collect();
    Sgd::new(model, lr, 0.0).step(model, &grads)?;
    Ok(loss_val)
}

/// SGD-with-momentum training over shuffled mini-batches. Returns one
/// record per epoch; identical configs and seed give identical runs.
pub fn train<E: Element>(
    model: &mut Model<E>,
    data: &Dataset<E>,
    tcfg: &TrainConfig,
    dcfg: &DefenseConfig,
    probe: Option<&PhiProbeConfig>,
) -> Result<Vec<EpochRecord>> {
    tcfg.validate()?;
    dcfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training needs a nonempty dataset".into()));
    }
    if data.input_shape() != model.input_shape() {
        return Err(Error::Dimension(format!(
            "dataset inputs {:?} do not match model input shape {:?}",
            data.input_shape(),
            model.input_shape()
        )));
    }
    let probe_set = match probe {
        Some(p) => Some(subset(data, p.n_samples.min(data.len()), p.seed)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut sgd = Sgd::new(model, tcfg.learning_rate, tcfg.momentum);
    let mut records = Vec::with_capacity(tcfg.epochs);

    for epoch in 1..=tcfg.epochs {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in idx.chunks(tcfg.batch_size) {
            let (inputs, labels) = data.batch(chunk)?;
            let batch_seed: u64 = rng.gen();
            let inputs = match dcfg {
                DefenseConfig::AdversarialTraining { attack, mix_clean } => {
                    adversarial_batch(&*model, &inputs, &labels, attack, *mix_clean, batch_seed)?
                }
                _ => inputs,
            };
            let tape = Tape::new();
            let traced = model.trace(&tape, true);
            let x = tape.leaf(inputs, dcfg.needs_input_grad());
            let loss = match dcfg {
                DefenseConfig::AdversarialTraining { .. } | DefenseConfig::None => {
                    let logits = traced.logits(&x)?;
                    cross_entropy_var(&logits, &labels)?.scale(labels.len() as f64)
                }
                _ => joint_loss_var(&traced, &x, &labels, dcfg, &mut rng)?,
            };
            let loss_val = loss.item()?.as_f64();
            if !loss_val.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite loss {loss_val}"),
                });
            }
            loss_sum += loss_val;
            loss.backward()?;
            let grads: Vec<Tensor<E>> = traced
                .param_vars()
                .iter()
                .map(|p| {
                    p.grad_value()
                        .unwrap_or_else(|| Tensor::zeros(&p.shape()))
                })
                .collect();
            sgd.step(model, &grads)?;
        }
        if !model.params_finite() {
            return Err(Error::Training {
                epoch,
                message: "non-finite parameters".into(),
            });
        }

        let clean_acc = crate::attacks::clean_accuracy(model, data)?;
        let phi = match (&probe_set, probe) {
            (Some(ps), Some(p)) => {
                Some(ebm::dataset_flatness(model, ps, p.n_planes, &p.grid(), p.seed)?.phi)
            }
            _ => None,
        };
        records.push(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            clean_acc,
            phi,
            lr: sgd.lr,
        });
        if tcfg.lr_decay_epochs.contains(&epoch) {
            sgd.lr *= tcfg.decay_factor;
        }
    }
    Ok(records)
}
