//! Gradient-based l-infinity attacks (FGSM, PGD) and robustness evaluation.
//!
//! Attack gradients run against the model in pure inference mode (no
//! regularizer terms). Projection clips to the eps-ball first, then to the
//! `[0,1]` box; for l-infinity boxes the two commute. `sign(0) = 0`, which
//! makes zero-gradient coordinates fixed points of FGSM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Element, Tape, Tensor};
use crate::training::cross_entropy_var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

/// Declarative description of an l-infinity attack. `eps` and `step_size`
/// are in input units (pixels scaled to `[0,1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub eps: f64,
    pub step_size: f64,
    pub iters: usize,
    #[serde(default)]
    pub random_start: bool,
}

impl AttackConfig {
    pub fn fgsm(eps: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            eps,
            step_size: eps,
            iters: 1,
            random_start: false,
        }
    }

    pub fn pgd(eps: f64, step_size: f64, iters: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            eps,
            step_size,
            iters,
            random_start: false,
        }
    }

    /// Named presets: "pgd-cifar" (8/255, 5 steps of 2/255), "pgd-fmnist"
    /// (25/255, 10 steps of 6.25/255), and "fgsm" which takes its eps from
    /// the caller.
    pub fn preset(name: &str, eps: Option<f64>) -> Result<Self> {
        match name {
            "pgd-cifar" => Ok(AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 5)),
            "pgd-fmnist" => Ok(AttackConfig::pgd(25.0 / 255.0, 6.25 / 255.0, 10)),
            "fgsm" => {
                let eps = eps.ok_or_else(|| {
                    Error::Config("the fgsm preset needs an explicit eps".into())
                })?;
                Ok(AttackConfig::fgsm(eps))
            }
            other => Err(Error::Config(format!("unknown attack preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 {
            return Err(Error::Config(format!("eps must be >= 0, got {}", self.eps)));
        }
        if self.kind == AttackKind::Pgd {
            if self.iters == 0 {
                return Err(Error::Config("pgd needs iters >= 1".into()));
            }
            if !self.step_size.is_finite() || self.step_size <= 0.0 {
                return Err(Error::Config(format!(
                    "pgd needs step_size > 0, got {}",
                    self.step_size
                )));
            }
        }
        Ok(())
    }
}

fn sign<E: Element>(v: E) -> E {
    if v > E::zero() {
        E::one()
    } else if v < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

/// Gradient of the cross-entropy loss w.r.t. a single input.
pub(crate) fn ce_input_gradient<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    y: usize,
) -> Result<Tensor<E>> {
    let tape = Tape::new();
    let mut bs = vec![1];
    bs.extend_from_slice(x.shape());
    let xv = tape.leaf(x.reshaped(&bs)?, true);
    let logits = model.trace(&tape, false).logits(&xv)?;
    cross_entropy_var(&logits, &[y])?.backward()?;
    let g = xv
        .grad_value()
        .unwrap_or_else(|| Tensor::zeros(&bs))
        .reshaped(x.shape())?;
    if !g.all_finite() {
        return Err(Error::Numeric("non-finite attack gradient".into()));
    }
    Ok(g)
}

fn clamp_ball<E: Element>(origin: E, v: E, eps: E) -> E {
    let lo = origin - eps;
    let hi = origin + eps;
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn clamp_box<E: Element>(v: E) -> E {
    if v < E::zero() {
        E::zero()
    } else if v > E::one() {
        E::one()
    } else {
        v
    }
}

/// Projects onto the eps-ball around `origin` intersected with `[0,1]`,
/// then walks at most a couple of ulps toward the origin so that the
/// recomputed difference satisfies the budget exactly.
pub(crate) fn project_linf_box<E: Element>(
    origin: &Tensor<E>,
    raw: &Tensor<E>,
    eps: f64,
) -> Tensor<E> {
    let eps_e = E::from_f64(eps);
    let mut out = raw.clone();
    for (o, v) in origin.data().iter().zip(out.data_mut()) {
        let mut w = clamp_box(clamp_ball(*o, *v, eps_e));
        while (w - *o).abs() > eps_e {
            w = w.next_toward(*o);
        }
        *v = w;
    }
    out
}

/// Single-step sign attack: `clip(x + eps * sign(grad))`.
pub fn fgsm<E: Element>(model: &Model<E>, x: &Tensor<E>, y: usize, eps: f64) -> Result<Tensor<E>> {
    if eps < 0.0 {
        return Err(Error::Config(format!("eps must be >= 0, got {eps}")));
    }
    let g = ce_input_gradient(model, x, y)?;
    let step = g.map(sign);
    let raw = x.axpy(eps, &step)?;
    Ok(project_linf_box(x, &raw, eps))
}

/// Iterated signed-gradient ascent with projection after every step. The
/// seed is only consulted for the random start.
pub fn pgd<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    y: usize,
    config: &AttackConfig,
    seed: u64,
) -> Result<Tensor<E>> {
    if config.kind != AttackKind::Pgd {
        return Err(Error::Contract("pgd called with a non-pgd config".into()));
    }
    config.validate()?;
    let mut cur = if config.random_start && config.eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Tensor::<E>::rand_uniform(x.shape(), -config.eps, config.eps, &mut rng);
        project_linf_box(x, &x.axpy(1.0, &u)?, config.eps)
    } else {
        x.clone()
    };
    for _ in 0..config.iters {
        let g = ce_input_gradient(model, &cur, y)?;
        let step = g.map(sign);
        let raw = cur.axpy(config.step_size, &step)?;
        cur = project_linf_box(x, &raw, config.eps);
    }
    Ok(cur)
}

/// Runs whichever attack the config describes.
pub fn run_attack<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    y: usize,
    config: &AttackConfig,
    seed: u64,
) -> Result<Tensor<E>> {
    match config.kind {
        AttackKind::Fgsm => fgsm(model, x, y, config.eps),
        AttackKind::Pgd => pgd(model, x, y, config, seed),
    }
}

/// Fraction of samples still classified correctly without any attack.
pub fn clean_accuracy<E: Element>(model: &Model<E>, dataset: &Dataset<E>) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("accuracy needs a nonempty dataset".into()));
    }
    let correct: usize = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            Ok(usize::from(
                model.predict_single(dataset.input(i))? == dataset.label(i),
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fraction of samples whose post-attack prediction still matches the true
/// label. `eps = 0` reduces to clean accuracy exactly.
pub fn adversarial_accuracy<E: Element>(
    model: &Model<E>,
    dataset: &Dataset<E>,
    config: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("accuracy needs a nonempty dataset".into()));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..dataset.len()).map(|_| rng.gen()).collect();
    let correct: usize = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let adv = run_attack(model, dataset.input(i), dataset.label(i), config, seeds[i])?;
            Ok(usize::from(model.predict_single(&adv)? == dataset.label(i)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / dataset.len() as f64)
}
