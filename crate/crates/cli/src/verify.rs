//! Built-in verification battery behind `flatscape verify`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flatscape::attacks::{fgsm, pgd, AttackConfig};
use flatscape::ebm::{likelihood_gradient, likelihood_gradient_weighted};
use flatscape::landscape::{sample_direction_pair, surface, GridSpec, LandscapePlane};
use flatscape::models::{ArchitectureConfig, Model};
use flatscape::tensor::{finite_diff_check, Tensor};
use flatscape::training::{
    jacobian_frob_estimate, jacobian_frob_exact, verify_gradient_bound, ams_frob_estimate,
};
use flatscape::Result;

pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mlp(input: usize, hidden: Vec<usize>, k: usize, seed: u64) -> Result<Model<f64>> {
    Model::build(&ArchitectureConfig::mlp(input, hidden, k), seed)
}

fn check_gradients() -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for seed in 0..20u64 {
        let mut r = rng(seed + 1);
        let x = Tensor::<f64>::rand_uniform(&[3, 4], -1.0, 1.0, &mut r);
        for build in [0usize, 1, 2, 3] {
            let err = finite_diff_check(
                |_, xv| match build {
                    0 => Ok(xv.mul(xv)?.sum_all()),
                    1 => Ok(xv.logsumexp(1)?.sum_all()),
                    2 => {
                        let s = xv.softmax(1)?;
                        Ok(s.mul(&s)?.sum_all())
                    }
                    _ => flatscape::training::cross_entropy_var(xv, &[1, 3, 0]),
                },
                &x,
                1e-5,
            )?;
            worst = worst.max(err);
            cases += 1;
        }
        let model = mlp(6, vec![5], 3, seed)?;
        let xm = Tensor::<f64>::rand_uniform(&[1, 6], 0.05, 0.95, &mut r);
        let err = finite_diff_check(
            |tape, xv| {
                let traced = model.trace(tape, false);
                Ok(traced.logits(xv)?.logsumexp(1)?.sum_all())
            },
            &xm,
            1e-5,
        )?;
        worst = worst.max(err);
        cases += 1;
    }
    Ok(CheckOutcome {
        name: "gradient finite-difference checks",
        pass: worst < 1e-4,
        detail: format!("{cases} cases, worst relative error {worst:.3e}"),
    })
}

fn check_dual_path() -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let cases = 100;
    for seed in 0..cases {
        let k = 2 + (seed as usize % 4);
        let model = mlp(6, vec![7], k, seed)?;
        let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(seed + 300));
        let a = likelihood_gradient(&model, &x)?;
        let b = likelihood_gradient_weighted(&model, &x)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(CheckOutcome {
        name: "likelihood-gradient dual-path identity",
        pass: worst < 1e-8,
        detail: format!("{cases} cases, max abs diff {worst:.3e}"),
    })
}

fn check_gradient_bound(cases: usize, inject_fault: bool) -> Result<CheckOutcome> {
    let mut held = 0usize;
    for seed in 0..cases as u64 {
        let k = 1 + (seed as usize % 5);
        let model = mlp(5, vec![6], k, seed)?;
        let x = Tensor::<f64>::rand_uniform(&[5], 0.0, 1.0, &mut rng(seed + 900));
        let out = verify_gradient_bound(&model, &x)?;
        let holds = if inject_fault { !out.holds } else { out.holds };
        if holds {
            held += 1;
        }
    }
    Ok(CheckOutcome {
        name: "likelihood-gradient upper bound",
        pass: held == cases,
        detail: format!("{held}/{cases} cases hold"),
    })
}

fn check_estimators() -> Result<CheckOutcome> {
    let model = mlp(5, vec![], 3, 41)?;
    let x = Tensor::<f64>::rand_uniform(&[5], 0.0, 1.0, &mut rng(5));
    let w = &model.params()[0].tensor;
    let closed: f64 = w.data().iter().map(|v| v * v).sum();

    let basis = jacobian_frob_exact(&model, &x, false)?;
    let basis_ok = (basis - closed).abs() <= 1e-10 * closed.max(1.0);

    let est = jacobian_frob_estimate(&model, &x, 10_000, 7)?;
    let plain_rel = (est.value - closed).abs() / closed;

    let weighted_closed = jacobian_frob_exact(&model, &x, true)?;
    let west = ams_frob_estimate(&model, &x, 10_000, 9)?;
    let weighted_rel = (west.value - weighted_closed).abs() / weighted_closed.max(1e-12);

    Ok(CheckOutcome {
        name: "projection estimator fidelity",
        pass: basis_ok && plain_rel < 0.05 && weighted_rel < 0.05,
        detail: format!(
            "basis exact {basis_ok}, plain rel {plain_rel:.4}, weighted rel {weighted_rel:.4} at n_proj=10000"
        ),
    })
}

fn check_attacks() -> Result<CheckOutcome> {
    let model = mlp(4, vec![6], 3, 11)?;
    let cfg = AttackConfig::pgd(25.0 / 255.0, 6.25 / 255.0, 10);
    let mut violations = 0usize;
    let runs = 2000u64;
    for seed in 0..runs {
        let x = Tensor::<f64>::rand_uniform(&[4], 0.0, 1.0, &mut rng(seed));
        let adv = pgd(&model, &x, (seed % 3) as usize, &cfg, seed)?;
        for (a, o) in adv.data().iter().zip(x.data()) {
            if (a - o).abs() > cfg.eps || !(0.0..=1.0).contains(a) {
                violations += 1;
            }
        }
    }
    let mut equiv = true;
    for seed in 0..50u64 {
        let x = Tensor::<f64>::rand_uniform(&[4], 0.0, 1.0, &mut rng(seed + 5000));
        let one_step = AttackConfig::pgd(0.05, 0.08, 1);
        if pgd(&model, &x, 1, &one_step, 0)? != fgsm(&model, &x, 1, 0.05)? {
            equiv = false;
        }
    }
    Ok(CheckOutcome {
        name: "attack budget/box invariants",
        pass: violations == 0 && equiv,
        detail: format!(
            "{runs} pgd runs, {violations} violations; 1-step pgd == fgsm bitwise: {equiv}"
        ),
    })
}

fn check_landscape() -> Result<CheckOutcome> {
    let mut plane_ok = true;
    for seed in 0..1000u64 {
        let (d, dp) = sample_direction_pair::<f64>(64, seed)?;
        let dot = d.dot(&dp)?.abs();
        if dot > 1e-6 * d.frob_norm() * dp.frob_norm()
            || (d.frob_norm() - dp.frob_norm()).abs() > 1e-6 * d.frob_norm()
        {
            plane_ok = false;
        }
    }
    let mut center_ok = true;
    let mut shift_ok = true;
    for seed in 0..10u64 {
        let model = mlp(6, vec![7], 3, seed)?;
        let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(seed + 70));
        let plane = LandscapePlane::random(x, GridSpec::new(8.0 / 255.0, 2), seed)?;
        let surf = surface(&model, &plane)?;
        if surf.center_value() != 0.0 {
            center_ok = false;
        }
        let mut shifted = model.clone();
        let n = shifted.params().len();
        let bias = &mut shifted.params_mut()[n - 1];
        bias.tensor = bias.tensor.map(|v| v + 19.0);
        let surf2 = surface(&shifted, &plane)?;
        for (a, b) in surf.values.iter().zip(&surf2.values) {
            if (a - b).abs() > 1e-9 {
                shift_ok = false;
            }
        }
    }
    Ok(CheckOutcome {
        name: "landscape plane/surface invariants",
        pass: plane_ok && center_ok && shift_ok,
        detail: format!(
            "1000 plane seeds ok: {plane_ok}; center zero: {center_ok}; logit-shift invariance: {shift_ok}"
        ),
    })
}

/// Runs the battery, printing one line per check. Returns true when all
/// checks pass.
pub fn run_battery(bound_cases: usize, inject_fault: bool) -> Result<bool> {
    let checks: Vec<CheckOutcome> = vec![
        check_gradients()?,
        check_dual_path()?,
        check_gradient_bound(bound_cases, inject_fault)?,
        check_estimators()?,
        check_attacks()?,
        check_landscape()?,
    ];
    let mut all = true;
    for c in &checks {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {} — {}", c.name, c.detail);
        all &= c.pass;
    }
    println!(
        "{} of {} checks passed",
        checks.iter().filter(|c| c.pass).count(),
        checks.len()
    );
    Ok(all)
}
