//! Perturbation planes around a sample, relative-likelihood surfaces, and
//! clean-vs-perturbed likelihood histograms.
//!
//! Plane points are deliberately not clipped to the input domain: clipping
//! would fold the plane and destroy its geometry. Attacks clip; landscapes
//! do not.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ebm;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Element, Tensor};

/// Symmetric epsilon grid: `(2*resolution+1)^2` points over
/// `[-eps_max, eps_max]^2`, always containing `(0,0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub eps_max: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(eps_max: f64, resolution: usize) -> Self {
        GridSpec { eps_max, resolution }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eps_max.is_finite() || self.eps_max <= 0.0 {
            return Err(Error::Config(format!(
                "eps_max must be positive, got {}",
                self.eps_max
            )));
        }
        Ok(())
    }

    /// Axis values `(k - resolution) * eps_max / resolution`; exactly `[0]`
    /// when the resolution is 0.
    pub fn eps_values(&self) -> Vec<f64> {
        if self.resolution == 0 {
            return vec![0.0];
        }
        let r = self.resolution as i64;
        let step = self.eps_max / self.resolution as f64;
        (-r..=r).map(|k| k as f64 * step).collect()
    }

    pub fn side(&self) -> usize {
        2 * self.resolution + 1
    }

    pub fn num_points(&self) -> usize {
        self.side() * self.side()
    }
}

/// Draws a signed (+/-1) direction and a second signed draw orthogonalized
/// against it (Gram-Schmidt) and rescaled to the first one's norm.
pub fn sample_direction_pair<E: Element>(
    dim: usize,
    seed: u64,
) -> Result<(Tensor<E>, Tensor<E>)> {
    if dim < 2 {
        return Err(Error::Config(format!(
            "direction pairs need dim >= 2, got {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Tensor::<E>::rand_rademacher(&[dim], &mut rng);
    let d_perp = orthogonal_companion(&d, &mut rng)?;
    Ok((d, d_perp))
}

/// Second plane direction: a fresh signed draw orthogonalized against `d`
/// and rescaled to `||d||`. Degenerate draws are retried; a zero `d` yields
/// the zero vector (the plane collapses to the center point).
pub(crate) fn orthogonal_companion<E: Element>(
    d: &Tensor<E>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<E>> {
    let d_norm = d.frob_norm();
    if d_norm == 0.0 {
        return Ok(Tensor::zeros(d.shape()));
    }
    let dd = d.dot(d)?;
    for _ in 0..100 {
        let raw = Tensor::<E>::rand_rademacher(d.shape(), rng);
        let coef = raw.dot(d)? / dd;
        let resid = raw.axpy(-coef, d)?;
        let resid_norm = resid.frob_norm();
        if resid_norm > 1e-9 * raw.frob_norm() {
            let scale = E::from_f64(d_norm / resid_norm);
            return Ok(resid.map(|v| v * scale));
        }
    }
    Err(Error::Numeric(
        "could not draw a direction independent of d after 100 tries".into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    Random,
    Fgsm,
}

/// A 2-D perturbation plane around a center sample.
#[derive(Debug, Clone)]
pub struct LandscapePlane<E> {
    center: Tensor<E>,
    d: Tensor<E>,
    d_perp: Tensor<E>,
    grid: GridSpec,
    kind: DirectionKind,
    /// Set when an FGSM direction vanished (zero gradient).
    pub zero_direction: bool,
}

impl<E: Element> LandscapePlane<E> {
    /// Plane from explicit directions; validates shape, orthogonality and
    /// norm invariants.
    pub fn new(
        center: Tensor<E>,
        d: Tensor<E>,
        d_perp: Tensor<E>,
        grid: GridSpec,
        kind: DirectionKind,
    ) -> Result<Self> {
        grid.validate()?;
        if d.shape() != center.shape() || d_perp.shape() != center.shape() {
            return Err(Error::Dimension(format!(
                "direction shapes {:?}/{:?} do not match center {:?}",
                d.shape(),
                d_perp.shape(),
                center.shape()
            )));
        }
        let (nd, np) = (d.frob_norm(), d_perp.frob_norm());
        let zero_direction = nd == 0.0;
        if !zero_direction {
            let dot = d.dot(&d_perp)?.abs();
            if dot > 1e-6 * nd * np {
                return Err(Error::Contract(format!(
                    "plane directions not orthogonal: dot {dot}"
                )));
            }
            if (nd - np).abs() > 1e-6 * nd {
                return Err(Error::Contract(format!(
                    "direction norms differ: {nd} vs {np}"
                )));
            }
        }
        Ok(LandscapePlane {
            center,
            d,
            d_perp,
            grid,
            kind,
            zero_direction,
        })
    }

    /// Random signed-vector plane.
    pub fn random(center: Tensor<E>, grid: GridSpec, seed: u64) -> Result<Self> {
        let dim = center.numel();
        let (d, d_perp) = sample_direction_pair::<E>(dim, seed)?;
        LandscapePlane::new(
            center.clone(),
            d.reshaped(center.shape())?,
            d_perp.reshaped(center.shape())?,
            grid,
            DirectionKind::Random,
        )
    }

    /// Plane spanned by the FGSM attack direction and a random orthogonal
    /// companion. A zero attack gradient is flagged, not an error.
    pub fn fgsm(
        model: &Model<E>,
        center: Tensor<E>,
        label: usize,
        grid: GridSpec,
        seed: u64,
    ) -> Result<Self> {
        if label >= model.num_classes() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                model.num_classes()
            )));
        }
        grid.validate()?;
        let g = crate::attacks::ce_input_gradient(model, &center, label)?;
        let d = g.map(|v| {
            if v > E::zero() {
                E::one()
            } else if v < E::zero() {
                -E::one()
            } else {
                E::zero()
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_perp = orthogonal_companion(&d, &mut rng)?;
        LandscapePlane::new(center, d, d_perp, grid, DirectionKind::Fgsm)
    }

    pub fn center(&self) -> &Tensor<E> {
        &self.center
    }

    pub fn d(&self) -> &Tensor<E> {
        &self.d
    }

    pub fn d_perp(&self) -> &Tensor<E> {
        &self.d_perp
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn kind(&self) -> DirectionKind {
        self.kind
    }

    /// All `(eps1, eps2)` pairs in row-major order.
    pub fn eps_grid(&self) -> Vec<(f64, f64)> {
        let eps = self.grid.eps_values();
        let mut out = Vec::with_capacity(eps.len() * eps.len());
        for &e1 in &eps {
            for &e2 in &eps {
                out.push((e1, e2));
            }
        }
        out
    }

    /// `center + eps1 * d + eps2 * d_perp`, unclipped.
    pub fn point(&self, eps1: f64, eps2: f64) -> Result<Tensor<E>> {
        self.center.axpy(eps1, &self.d)?.axpy(eps2, &self.d_perp)
    }
}

/// Relative log-likelihood sampled over a plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandscapeSurface {
    pub eps: Vec<f64>,
    /// Row-major `side x side` values; `values[i*side+j]` pairs
    /// `eps1=eps[i]` with `eps2=eps[j]`.
    pub values: Vec<f64>,
    pub direction_kind: DirectionKind,
    pub zero_direction: bool,
}

impl LandscapeSurface {
    pub fn side(&self) -> usize {
        self.eps.len()
    }

    pub fn center_value(&self) -> f64 {
        let r = self.side() / 2;
        self.values[r * self.side() + r]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// The slice through the center along axis 0 (varying eps1, eps2 = 0)
    /// or axis 1 (varying eps2, eps1 = 0).
    pub fn center_slice(&self, axis: usize) -> Vec<f64> {
        let n = self.side();
        let r = n / 2;
        (0..n)
            .map(|k| {
                if axis == 0 {
                    self.values[k * n + r]
                } else {
                    self.values[r * n + k]
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps1,eps2,delta_logp\n");
        let n = self.side();
        for i in 0..n {
            for j in 0..n {
                out.push_str(&format!(
                    "{},{},{}\n",
                    self.eps[i],
                    self.eps[j],
                    self.values[i * n + j]
                ));
            }
        }
        out
    }

    /// Binary PPM (P6) heatmap; values map linearly onto a viridis-style
    /// palette, uniform surfaces render in a single mid color.
    pub fn to_ppm(&self) -> Vec<u8> {
        const ANCHORS: [(f64, [f64; 3]); 5] = [
            (0.00, [68.0, 1.0, 84.0]),
            (0.25, [59.0, 82.0, 139.0]),
            (0.50, [33.0, 145.0, 140.0]),
            (0.75, [94.0, 201.0, 98.0]),
            (1.00, [253.0, 231.0, 37.0]),
        ];
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let n = self.side();
        let mut out = format!("P6\n{n} {n}\n255\n").into_bytes();
        for &v in &self.values {
            let t = if span > 0.0 { (v - lo) / span } else { 0.5 };
            let mut rgb = ANCHORS[ANCHORS.len() - 1].1;
            for w in ANCHORS.windows(2) {
                let (t0, c0) = w[0];
                let (t1, c1) = w[1];
                if t <= t1 {
                    let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
                    rgb = [
                        c0[0] + f * (c1[0] - c0[0]),
                        c0[1] + f * (c1[1] - c0[1]),
                        c0[2] + f * (c1[2] - c0[2]),
                    ];
                    break;
                }
            }
            for c in rgb {
                out.push(c.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

/// Samples the relative likelihood over every grid point of a plane. Grid
/// cells are evaluated in parallel and assembled by position.
pub fn surface<E: Element>(model: &Model<E>, plane: &LandscapePlane<E>) -> Result<LandscapeSurface> {
    let base = ebm::log_likelihood(model, plane.center())?.value;
    let pairs = plane.eps_grid();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(e1, e2)| {
            let point = plane.point(e1, e2)?;
            Ok(ebm::log_likelihood(model, &point)?.value - base)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeSurface {
        eps: plane.grid().eps_values(),
        values,
        direction_kind: plane.kind(),
        zero_direction: plane.zero_direction,
    })
}

/// Unnormalized log-likelihoods of clean samples and uniformly perturbed
/// copies, binned over shared edges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LikelihoodHistogram {
    pub eps: f64,
    pub bin_edges: Vec<f64>,
    pub clean_values: Vec<f64>,
    pub perturbed_values: Vec<f64>,
    pub clean_counts: Vec<usize>,
    pub perturbed_counts: Vec<usize>,
}

impl LikelihoodHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,clean_count,perturbed_count\n");
        for i in 0..self.clean_counts.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                self.clean_counts[i],
                self.perturbed_counts[i]
            ));
        }
        out
    }
}

fn bin_counts(values: &[f64], lo: f64, width: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let mut b = if width > 0.0 {
            ((v - lo) / width) as usize
        } else {
            0
        };
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1;
    }
    counts
}

/// For each sample, the likelihood of `x` and of `x + u` with `u` uniform on
/// the l-infinity ball of radius `eps` (unclipped, like the planes).
pub fn likelihood_histogram<E: Element>(
    model: &Model<E>,
    dataset: &Dataset<E>,
    eps: f64,
    bins: usize,
    seed: u64,
) -> Result<LikelihoodHistogram> {
    if eps < 0.0 {
        return Err(Error::Config(format!("eps must be >= 0, got {eps}")));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs bins >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Input("histogram needs a nonempty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturbed_inputs: Vec<Tensor<E>> = (0..dataset.len())
        .map(|i| {
            let x = dataset.input(i);
            if eps == 0.0 {
                Ok(x.clone())
            } else {
                let u = Tensor::<E>::rand_uniform(x.shape(), -eps, eps, &mut rng);
                x.axpy(1.0, &u)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let clean_values: Vec<f64> = (0..dataset.len())
        .into_par_iter()
        .map(|i| Ok(ebm::log_likelihood(model, dataset.input(i))?.value))
        .collect::<Result<Vec<_>>>()?;
    let perturbed_values: Vec<f64> = perturbed_inputs
        .par_iter()
        .map(|x| Ok(ebm::log_likelihood(model, x)?.value))
        .collect::<Result<Vec<_>>>()?;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in clean_values.iter().chain(&perturbed_values) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    Ok(LikelihoodHistogram {
        eps,
        clean_counts: bin_counts(&clean_values, lo, width, bins),
        perturbed_counts: bin_counts(&perturbed_values, lo, width, bins),
        bin_edges,
        clean_values,
        perturbed_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchitectureConfig;

    fn rand_model(seed: u64) -> Model<f64> {
        Model::build(&ArchitectureConfig::mlp(6, vec![8], 3), seed).unwrap()
    }

    fn zero_model() -> Model<f64> {
        let mut m = rand_model(0);
        for p in m.params_mut() {
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        m
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn direction_pair_invariants() {
        for seed in 0..50 {
            let (d, dp) = sample_direction_pair::<f64>(784, seed).unwrap();
            assert!(d.data().iter().all(|&v| v == 1.0 || v == -1.0));
            let dot = d.dot(&dp).unwrap().abs();
            assert!(dot <= 1e-6 * d.frob_norm() * dp.frob_norm(), "seed {seed}");
            assert!((d.frob_norm() - dp.frob_norm()).abs() < 1e-6 * d.frob_norm());
        }
    }

    #[test]
    fn companion_of_orthogonal_draw_keeps_signs() {
        // In dim 2, [1,1] vs [1,-1] are already orthogonal; Gram-Schmidt
        // leaves the draw unchanged up to rescaling to ||d|| = sqrt(2).
        let d = Tensor::<f64>::new(vec![2], vec![1.0, 1.0]).unwrap();
        let raw = Tensor::<f64>::new(vec![2], vec![1.0, -1.0]).unwrap();
        let coef = raw.dot(&d).unwrap() / d.dot(&d).unwrap();
        assert_eq!(coef, 0.0);
        let resid = raw.axpy(-coef, &d).unwrap();
        assert_eq!(resid.data(), raw.data());
        let scale = d.frob_norm() / resid.frob_norm();
        assert!((scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dim_one_is_config_error() {
        assert!(matches!(
            sample_direction_pair::<f64>(1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grid_resolution_one_has_nine_points_including_center() {
        let g = GridSpec::new(8.0 / 255.0, 1);
        assert_eq!(g.num_points(), 9);
        let eps = g.eps_values();
        assert_eq!(eps.len(), 3);
        assert_eq!(eps[1], 0.0);
        assert_eq!(eps[2], 8.0 / 255.0);
    }

    #[test]
    fn plane_corner_matches_formula() {
        let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(1));
        let grid = GridSpec::new(0.1, 2);
        let plane = LandscapePlane::random(x.clone(), grid, 3).unwrap();
        let corner = plane.point(0.1, 0.1).unwrap();
        for i in 0..6 {
            let expect = x.data()[i] + 0.1 * plane.d().data()[i] + 0.1 * plane.d_perp().data()[i];
            assert_eq!(corner.data()[i], expect);
        }
    }

    #[test]
    fn surface_of_constant_model_is_zero() {
        let m = zero_model();
        let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(2));
        let plane = LandscapePlane::random(x, GridSpec::new(0.05, 2), 9).unwrap();
        let s = surface(&m, &plane).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn surface_center_is_exactly_zero() {
        for seed in 0..5 {
            let m = rand_model(seed);
            let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(seed + 20));
            let plane = LandscapePlane::random(x, GridSpec::new(8.0 / 255.0, 2), seed).unwrap();
            let s = surface(&m, &plane).unwrap();
            assert_eq!(s.center_value(), 0.0);
        }
    }

    #[test]
    fn surface_matches_closed_form_on_linear_model() {
        let m = Model::<f64>::build(&ArchitectureConfig::mlp(4, vec![], 3), 31).unwrap();
        let x = Tensor::<f64>::rand_uniform(&[4], 0.0, 1.0, &mut rng(3));
        let plane = LandscapePlane::random(x.clone(), GridSpec::new(0.1, 1), 5).unwrap();
        let s = surface(&m, &plane).unwrap();
        let lse = |pt: &Tensor<f64>| {
            let logits = m.logits_single(pt).unwrap().to_f64_vec();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
        };
        let base = lse(&x);
        for (idx, (e1, e2)) in plane.eps_grid().into_iter().enumerate() {
            let expect = lse(&plane.point(e1, e2).unwrap()) - base;
            assert!((s.values[idx] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn surface_invariant_to_uniform_logit_shift() {
        let m = rand_model(4);
        let mut shifted = m.clone();
        let n = shifted.params().len();
        let bias = &mut shifted.params_mut()[n - 1];
        bias.tensor = bias.tensor.map(|v| v + 11.25);

        let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(4));
        let plane = LandscapePlane::random(x, GridSpec::new(0.05, 2), 17).unwrap();
        let a = surface(&m, &plane).unwrap();
        let b = surface(&shifted, &plane).unwrap();
        for (va, vb) in a.values.iter().zip(&b.values) {
            assert!((va - vb).abs() < 1e-9);
        }
    }

    #[test]
    fn surface_regeneration_is_bitwise() {
        let m = rand_model(6);
        let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(5));
        let p1 = LandscapePlane::random(x.clone(), GridSpec::new(0.05, 3), 21).unwrap();
        let p2 = LandscapePlane::random(x, GridSpec::new(0.05, 3), 21).unwrap();
        let s1 = surface(&m, &p1).unwrap();
        let s2 = surface(&m, &p2).unwrap();
        assert_eq!(s1.values, s2.values);
    }

    #[test]
    fn fgsm_plane_on_constant_model_is_flat_and_flagged() {
        let m = zero_model();
        let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(6));
        let plane = LandscapePlane::fgsm(&m, x, 0, GridSpec::new(0.05, 1), 1).unwrap();
        assert!(plane.zero_direction);
        assert!(plane.d().data().iter().all(|&v| v == 0.0));
        let s = surface(&m, &plane).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
        assert!(s.zero_direction);
    }

    #[test]
    fn fgsm_plane_orthogonality_holds() {
        let m = rand_model(9);
        let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(7));
        let plane = LandscapePlane::fgsm(&m, x, 1, GridSpec::new(0.05, 1), 2).unwrap();
        assert_eq!(plane.kind(), DirectionKind::Fgsm);
        let dot = plane.d().dot(plane.d_perp()).unwrap().abs();
        assert!(dot <= 1e-6 * plane.d().frob_norm() * plane.d_perp().frob_norm());
    }

    #[test]
    fn histogram_eps_zero_is_identical_series() {
        let m = rand_model(11);
        let ds = crate::data::synthetic_blobs::<f64>(10, 3, 6, 4.0, 1).unwrap();
        let h = likelihood_histogram(&m, &ds, 0.0, 8, 3).unwrap();
        assert_eq!(h.clean_values, h.perturbed_values);
        assert_eq!(h.clean_counts, h.perturbed_counts);
        let total: usize = h.clean_counts.iter().sum();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn histogram_constant_model_concentrates_at_ln_k() {
        let m = zero_model();
        let ds = crate::data::synthetic_blobs::<f64>(5, 3, 6, 4.0, 2).unwrap();
        let h = likelihood_histogram(&m, &ds, 0.02, 4, 5).unwrap();
        let lnk = 3.0f64.ln();
        for v in h.clean_values.iter().chain(&h.perturbed_values) {
            assert!((v - lnk).abs() < 1e-12);
        }
    }

    #[test]
    fn ppm_of_uniform_surface_is_single_color() {
        let s = LandscapeSurface {
            eps: vec![-0.1, 0.0, 0.1],
            values: vec![0.0; 9],
            direction_kind: DirectionKind::Random,
            zero_direction: false,
        };
        let ppm = s.to_ppm();
        let header_end = ppm.iter().filter(|&&b| b == b'\n').count();
        assert!(header_end >= 3);
        let body = &ppm[ppm.len() - 27..];
        let first = (body[0], body[1], body[2]);
        for px in body.chunks(3) {
            assert_eq!((px[0], px[1], px[2]), first);
        }
    }
}
