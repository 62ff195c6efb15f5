//! Energy-based reading of a classifier: unnormalized marginal
//! log-likelihood, relative likelihood, the approximate mass score, and the
//! phi/Phi flatness metrics.
//!
//! The normalizing constant of the underlying density depends only on the
//! parameters, so it cancels in every relative quantity computed here; all
//! "log-likelihood" values are unnormalized (logsumexp of the logits).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{GridSpec, LandscapePlane};
use crate::models::Model;
use crate::tensor::{Element, Tape, Tensor};

/// Unnormalized marginal log-likelihood of one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LikelihoodValue {
    pub value: f64,
    pub sample_id: Option<usize>,
}

/// logsumexp over the K logits of a single sample.
pub fn log_likelihood<E: Element>(model: &Model<E>, x: &Tensor<E>) -> Result<LikelihoodValue> {
    let logits = model.logits_single(x)?;
    let tape = Tape::new();
    let v = tape.leaf(logits, false).logsumexp(0)?.item()?.as_f64();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite log-likelihood {v}")));
    }
    Ok(LikelihoodValue {
        value: v,
        sample_id: None,
    })
}

/// Relative log-likelihood of `x_prime` w.r.t. `x`; the normalizer cancels,
/// so this is exactly `log p(x') - log p(x)`.
pub fn relative_log_likelihood<E: Element>(
    model: &Model<E>,
    x_prime: &Tensor<E>,
    x: &Tensor<E>,
) -> Result<f64> {
    Ok(log_likelihood(model, x_prime)?.value - log_likelihood(model, x)?.value)
}

/// Gradient of the unnormalized log-likelihood w.r.t. the input, computed by
/// differentiating logsumexp of the logits.
pub fn likelihood_gradient<E: Element>(model: &Model<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let tape = Tape::new();
    let mut bs = vec![1];
    bs.extend_from_slice(x.shape());
    let xv = tape.leaf(x.reshaped(&bs)?, true);
    let logits = model.trace(&tape, false).logits(&xv)?;
    logits.logsumexp(1)?.sum_all().backward()?;
    let g = xv
        .grad_value()
        .unwrap_or_else(|| Tensor::zeros(&bs))
        .reshaped(x.shape())?;
    if !g.all_finite() {
        return Err(Error::Numeric("non-finite likelihood gradient".into()));
    }
    Ok(g)
}

/// Rows of the input-output Jacobian: one backward pass per class.
pub fn jacobian_rows<E: Element>(model: &Model<E>, x: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
    let k = model.num_classes();
    let mut bs = vec![1];
    bs.extend_from_slice(x.shape());
    let mut rows = Vec::with_capacity(k);
    for y in 0..k {
        let tape = Tape::new();
        let xv = tape.leaf(x.reshaped(&bs)?, true);
        let logits = model.trace(&tape, false).logits(&xv)?;
        logits.select_classes(&[y])?.sum_all().backward()?;
        rows.push(
            xv.grad_value()
                .unwrap_or_else(|| Tensor::zeros(&bs))
                .reshaped(x.shape())?,
        );
    }
    Ok(rows)
}

/// Softmax of a logit vector, as plain f64 values.
pub fn softmax_values<E: Element>(logits: &Tensor<E>) -> Vec<f64> {
    let vals = logits.to_f64_vec();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Rows of the probability-weighted Jacobian: row y is `p(y|x) * d f_y/dx`
/// with the probabilities entering as values.
pub fn weighted_jacobian_rows<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
) -> Result<Vec<Tensor<E>>> {
    let probs = softmax_values(&model.logits_single(x)?);
    let rows = jacobian_rows(model, x)?;
    Ok(rows
        .into_iter()
        .zip(probs)
        .map(|(row, p)| row.map(|v| v * E::from_f64(p)))
        .collect())
}

/// The likelihood gradient assembled as the probability-weighted sum of
/// Jacobian rows. Analytically identical to [`likelihood_gradient`]; both
/// routes are kept and cross-checked.
pub fn likelihood_gradient_weighted<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
) -> Result<Tensor<E>> {
    let rows = weighted_jacobian_rows(model, x)?;
    let mut acc = Tensor::zeros(x.shape());
    for row in rows {
        acc = acc.axpy(1.0, &row)?;
    }
    Ok(acc)
}

/// Approximate mass score: the negated Frobenius norm of the likelihood
/// gradient. Zero only when the gradient vanishes identically.
pub fn ams_score<E: Element>(model: &Model<E>, x: &Tensor<E>) -> Result<f64> {
    Ok(-likelihood_gradient(model, x)?.frob_norm())
}

/// Per-sample flatness: the mean approximate mass score over every sampled
/// neighborhood point across `n_planes` random plane pairs. The mean runs
/// over all points, so the value does not depend on grid resolution.
pub fn phi_flatness<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    n_planes: usize,
    grid: &GridSpec,
    seed: u64,
) -> Result<f64> {
    if n_planes == 0 {
        return Err(Error::Config("phi needs n_planes >= 1".into()));
    }
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..n_planes {
        let plane_seed: u64 = rng.gen();
        let plane = LandscapePlane::random(x.clone(), grid.clone(), plane_seed)?;
        for (e1, e2) in plane.eps_grid() {
            let point = plane.point(e1, e2)?;
            total += ams_score(model, &point)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("empty flatness grid".into()));
    }
    Ok(total / count as f64)
}

/// Flatness of a whole dataset with full sampling provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub schema_version: u32,
    pub phi_per_sample: Vec<f64>,
    #[serde(rename = "Phi")]
    pub phi: f64,
    pub n_planes: usize,
    pub grid: GridSpec,
    pub seed: u64,
    pub sample_count: usize,
    pub model_checksum: String,
}

/// Mean per-sample flatness over a dataset. Per-sample work runs in
/// parallel; sub-seeds are drawn up front in index order, so the result is
/// deterministic regardless of scheduling.
pub fn dataset_flatness<E: Element>(
    model: &Model<E>,
    samples: &crate::data::Dataset<E>,
    n_planes: usize,
    grid: &GridSpec,
    seed: u64,
) -> Result<FlatnessReport> {
    if samples.is_empty() {
        return Err(Error::Input("flatness needs a nonempty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sub_seeds: Vec<u64> = (0..samples.len()).map(|_| rng.gen()).collect();
    let phi_per_sample: Vec<f64> = (0..samples.len())
        .into_par_iter()
        .map(|i| phi_flatness(model, samples.input(i), n_planes, grid, sub_seeds[i]))
        .collect::<Result<Vec<_>>>()?;
    let phi = phi_per_sample.iter().sum::<f64>() / phi_per_sample.len() as f64;
    Ok(FlatnessReport {
        schema_version: crate::SCHEMA_VERSION,
        phi,
        sample_count: phi_per_sample.len(),
        phi_per_sample,
        n_planes,
        grid: grid.clone(),
        seed,
        model_checksum: model.checksum(),
    })
}
