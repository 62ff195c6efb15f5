//! Acceptance suite: one test per release criterion. Each prints a PASS
//! line with its measured numbers (visible with `--nocapture`); the cargo
//! per-test status lines double as the pass/fail table.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flatscape::attacks::{adversarial_accuracy, clean_accuracy, fgsm, pgd, AttackConfig};
use flatscape::data::{load_idx, subset, synthetic_blobs, write_idx, Dataset};
use flatscape::ebm::{dataset_flatness, likelihood_gradient, likelihood_gradient_weighted};
use flatscape::landscape::{sample_direction_pair, surface, GridSpec, LandscapePlane};
use flatscape::models::{
    load_checkpoint, save_checkpoint, AnyModel, ArchitectureConfig, Model,
};
use flatscape::stats::{spearman, variance};
use flatscape::tensor::{finite_diff_check, Tape, Tensor};
use flatscape::training::{
    jacobian_frob_estimate, jacobian_frob_exact, joint_loss, joint_loss_var, train,
    verify_gradient_bound, ams_frob_estimate, DefenseConfig, TrainConfig,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mlp(input: usize, hidden: Vec<usize>, k: usize, seed: u64) -> Model<f64> {
    Model::build(&ArchitectureConfig::mlp(input, hidden, k), seed).unwrap()
}

// --- shared zoo of trained toy models -------------------------------------

struct Zoo {
    test: Dataset<f64>,
    probe30: Dataset<f64>,
    probe12: Dataset<f64>,
    none: Model<f64>,
    at: Model<f64>,
    jac: Model<f64>,
    ams: Model<f64>,
    ams_mid: Model<f64>,
    ams_strong: Model<f64>,
    ams_max: Model<f64>,
}

const EVAL_EPS: f64 = 25.0 / 255.0;

fn eval_attack() -> AttackConfig {
    AttackConfig::preset("pgd-fmnist", None).unwrap()
}

fn zoo() -> &'static Zoo {
    static ZOO: OnceLock<Zoo> = OnceLock::new();
    ZOO.get_or_init(|| {
        let train_set = synthetic_blobs::<f64>(100, 3, 16, 3.0, 1).unwrap();
        let test = synthetic_blobs::<f64>(40, 3, 16, 3.0, 2).unwrap();
        let probe30 = subset(&test, 30, 5).unwrap();
        let probe12 = subset(&test, 12, 5).unwrap();
        let arch = ArchitectureConfig::mlp(16, vec![32], 3);
        let tcfg = TrainConfig {
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.002,
            lr_decay_epochs: vec![40, 50],
            momentum: 0.9,
            decay_factor: 0.1,
            seed: 11,
        };
        let fit = |defense: DefenseConfig| {
            let mut model = Model::<f64>::build(&arch, 11).unwrap();
            train(&mut model, &train_set, &tcfg, &defense, None).unwrap();
            model
        };
        let ams = |lambda: f64| DefenseConfig::AmsReg {
            lambda,
            n_proj: 1,
            detach_probs: false,
        };
        Zoo {
            none: fit(DefenseConfig::None),
            at: fit(DefenseConfig::AdversarialTraining {
                attack: AttackConfig::pgd(EVAL_EPS, 6.25 / 255.0, 10),
                mix_clean: false,
            }),
            jac: fit(DefenseConfig::JacobianReg {
                lambda: 0.005,
                n_proj: 1,
            }),
            ams: fit(ams(0.02)),
            ams_mid: fit(ams(0.05)),
            ams_strong: fit(ams(0.1)),
            ams_max: fit(ams(1.0)),
            test,
            probe30,
            probe12,
        }
    })
}

fn phi_of(model: &Model<f64>, probe: &Dataset<f64>) -> f64 {
    let grid = GridSpec::new(EVAL_EPS, 3);
    dataset_flatness(model, probe, 2, &grid, 9).unwrap().phi
}

// --- criterion 1: gradient correctness -------------------------------------

#[test]
fn criterion_gradient_correctness() {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut worst = 0.0f64;
    let mut cases = 0usize;

    // Elementwise, matrix, reduction, broadcast, indexing, and shape ops.
    for seed in 0..100u64 {
        let mut r = rng(seed * 31 + 1);
        let x = Tensor::<f64>::rand_uniform(&[3, 4], -1.5, 1.5, &mut r)
            .map(|v| if v.abs() < 2e-2 { v + 4e-2 } else { v });
        for op in 0..12usize {
            let err = finite_diff_check(
                |tape, xv| match op {
                    0 => {
                        let c = tape.leaf(Tensor::filled(&[3, 4], 0.6), false);
                        Ok(xv.add(&c)?.mul(xv)?.sum_all())
                    }
                    1 => {
                        let c = tape.leaf(Tensor::filled(&[3, 4], 0.3), false);
                        Ok(xv.sub(&c)?.mul(xv)?.sum_all())
                    }
                    2 => Ok(xv.mul(xv)?.mul(xv)?.sum_all()),
                    3 => Ok(xv.scale(-1.7).exp().sum_all()),
                    4 => Ok(xv.relu().mul(xv)?.sum_all()),
                    5 => {
                        let w = tape.leaf(
                            Tensor::new(vec![4, 2], (0..8).map(|i| 0.25 * i as f64 - 1.0).collect())?,
                            false,
                        );
                        let y = xv.matmul(&w)?;
                        Ok(y.mul(&y)?.sum_all())
                    }
                    6 => {
                        let y = xv.t()?;
                        Ok(y.mul(&y)?.logsumexp(0)?.sum_all())
                    }
                    7 => {
                        let s = xv.sum_axis(1)?;
                        Ok(s.mul(&s)?.sum_all())
                    }
                    8 => {
                        let e = xv.logsumexp(0)?.expand_axis(0, 2)?;
                        Ok(e.mul(&e)?.sum_all())
                    }
                    9 => Ok(xv.logsumexp(1)?.sum_all()),
                    10 => {
                        let s = xv.softmax(1)?;
                        Ok(s.mul(&s)?.sum_all())
                    }
                    _ => Ok(xv.select_classes(&[1, 0, 3])?.sum_all()),
                },
                &x,
                H,
            )
            .unwrap();
            worst = worst.max(err);
            cases += 1;
        }
    }

    // conv2d (input and kernel routes) plus maxpool.
    for seed in 0..100u64 {
        let mut r = rng(seed * 17 + 3);
        let x = Tensor::<f64>::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
        let k0 = Tensor::<f64>::rand_uniform(&[2, 2, 2, 2], -1.0, 1.0, &mut r);
        let err = finite_diff_check(
            |tape, xv| {
                let k = tape.leaf(k0.clone(), false);
                let y = xv.conv2d(&k, 1, 1)?;
                Ok(y.mul(&y)?.sum_all())
            },
            &x,
            H,
        )
        .unwrap();
        worst = worst.max(err);
        let err = finite_diff_check(
            |tape, kv| {
                let xc = tape.leaf(x.clone(), false);
                let y = xc.conv2d(kv, 1, 0)?;
                Ok(y.mul(&y)?.sum_all())
            },
            &k0,
            H,
        )
        .unwrap();
        worst = worst.max(err);
        let xp = x.map(|v| if v.abs() < 2e-2 { v + 4e-2 } else { v });
        let err = finite_diff_check(
            |_, xv| {
                let y = xv.maxpool2()?;
                Ok(y.mul(&y)?.sum_all())
            },
            &xp,
            H,
        )
        .unwrap();
        worst = worst.max(err);
        cases += 3;
    }
    assert!(worst < TOL, "op gradients: worst relative error {worst}");

    // Composite joint loss w.r.t. parameters (fixed projections via seed).
    let arch = ArchitectureConfig::mlp(3, vec![4], 2);
    let mut worst_joint = 0.0f64;
    let ds = synthetic_blobs::<f64>(3, 2, 3, 4.0, 19).unwrap();
    let (inputs, labels) = ds.batch(&[0, 1, 2, 3, 4]).unwrap();
    for seed in 0..5u64 {
        let model = Model::<f64>::build(&arch, 100 + seed).unwrap();
        let defense = DefenseConfig::AmsReg {
            lambda: 0.8,
            n_proj: 2,
            detach_probs: false,
        };
        let tape = Tape::new();
        let traced = model.trace(&tape, true);
        let x = tape.leaf(inputs.clone(), true);
        let mut r = rng(seed + 700);
        let loss = joint_loss_var(&traced, &x, &labels, &defense, &mut r).unwrap();
        loss.backward().unwrap();
        let analytic: Vec<Tensor<f64>> = traced
            .param_vars()
            .iter()
            .map(|p| p.grad_value().unwrap_or_else(|| Tensor::zeros(&p.shape())))
            .collect();
        for (pi, a_param) in analytic.iter().enumerate() {
            for j in 0..model.params()[pi].tensor.numel() {
                let base = model.params()[pi].tensor.data()[j];
                let mut plus = model.clone();
                plus.params_mut()[pi].tensor.data_mut()[j] = base + H;
                let mut minus = model.clone();
                minus.params_mut()[pi].tensor.data_mut()[j] = base - H;
                let fp = joint_loss(&plus, &inputs, &labels, &defense, seed + 700).unwrap();
                let fm = joint_loss(&minus, &inputs, &labels, &defense, seed + 700).unwrap();
                let central = (fp - fm) / (2.0 * H);
                let a = a_param.data()[j];
                let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
                worst_joint = worst_joint.max(rel);
                cases += 1;
            }
        }
    }
    assert!(worst_joint < TOL, "joint loss gradient: worst {worst_joint}");
    println!(
        "[PASS] gradient correctness: {cases} checks, worst op error {worst:.2e}, worst joint-loss error {worst_joint:.2e}"
    );
}

// --- criterion 2: dual-path likelihood gradient ----------------------------

#[test]
fn criterion_dual_path_identity() {
    let mut worst = 0.0f64;
    for seed in 0..80u64 {
        let k = 2 + (seed as usize % 5);
        let model = mlp(6, vec![7], k, seed);
        let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(seed + 1000));
        let a = likelihood_gradient(&model, &x).unwrap();
        let b = likelihood_gradient_weighted(&model, &x).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    for seed in 0..20u64 {
        let arch = ArchitectureConfig::lenet_small([1, 8, 8], 3);
        let model = Model::<f64>::build(&arch, seed).unwrap();
        let x = Tensor::<f64>::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut rng(seed + 2000));
        let a = likelihood_gradient(&model, &x).unwrap();
        let b = likelihood_gradient_weighted(&model, &x).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    assert!(worst < 1e-8, "dual-path max abs diff {worst}");
    println!("[PASS] dual-path identity: 100 model/input pairs, max abs diff {worst:.2e}");
}

// --- criterion 3: likelihood-gradient norm bound ----------------------------

#[test]
fn criterion_gradient_norm_bound() {
    let mut held = 0usize;
    let cases = 1000usize;
    for seed in 0..cases as u64 {
        let k = 1 + (seed as usize % 6);
        let model = mlp(5, vec![6], k, seed);
        let x = Tensor::<f64>::rand_uniform(&[5], 0.0, 1.0, &mut rng(seed + 3000));
        let out = verify_gradient_bound(&model, &x).unwrap();
        assert!(
            out.holds,
            "seed {seed}: lhs {} > rhs {}",
            out.lhs, out.rhs
        );
        if k == 1 {
            assert!(
                (out.lhs - out.rhs).abs() <= 1e-9 * out.rhs.max(1e-12),
                "K=1 should be tight: lhs {} rhs {}",
                out.lhs,
                out.rhs
            );
        }
        held += 1;
    }
    println!("[PASS] gradient-norm bound: {held}/{cases} cases hold, equality at K=1");
}

// --- criterion 4: estimator fidelity ----------------------------------------

#[test]
fn criterion_estimator_fidelity() {
    let model = mlp(5, vec![], 3, 41);
    let x = Tensor::<f64>::rand_uniform(&[5], 0.0, 1.0, &mut rng(5));
    let w = &model.params()[0].tensor;
    let closed: f64 = w.data().iter().map(|v| v * v).sum();

    let basis = jacobian_frob_exact(&model, &x, false).unwrap();
    assert!(
        (basis - closed).abs() <= 1e-10 * closed,
        "basis-exhaustive mismatch: {basis} vs {closed}"
    );

    let est = jacobian_frob_estimate(&model, &x, 10_000, 7).unwrap();
    let plain_rel = (est.value - closed).abs() / closed;
    assert!(plain_rel < 0.05, "plain estimator relative error {plain_rel}");

    let weighted_closed = jacobian_frob_exact(&model, &x, true).unwrap();
    let west = ams_frob_estimate(&model, &x, 10_000, 9).unwrap();
    let weighted_rel = (west.value - weighted_closed).abs() / weighted_closed;
    assert!(
        weighted_rel < 0.05,
        "weighted estimator relative error {weighted_rel}"
    );
    println!(
        "[PASS] estimator fidelity: basis exact, plain rel {plain_rel:.4}, weighted rel {weighted_rel:.4} at n_proj=10^4"
    );
}

// --- criterion 5: attack invariants -----------------------------------------

#[test]
fn criterion_attack_invariants() {
    let model = mlp(4, vec![6], 3, 11);
    let cfg = AttackConfig::pgd(EVAL_EPS, 6.25 / 255.0, 10);
    let runs = 10_000u64;
    for seed in 0..runs {
        let x = Tensor::<f64>::rand_uniform(&[4], 0.0, 1.0, &mut rng(seed));
        let with_start = AttackConfig {
            random_start: seed % 4 == 0,
            ..cfg.clone()
        };
        let adv = pgd(&model, &x, (seed % 3) as usize, &with_start, seed).unwrap();
        for (a, o) in adv.data().iter().zip(x.data()) {
            assert!((a - o).abs() <= cfg.eps, "budget violated at seed {seed}");
            assert!((0.0..=1.0).contains(a), "box violated at seed {seed}");
        }
    }

    for seed in 0..100u64 {
        let x = Tensor::<f64>::rand_uniform(&[4], 0.0, 1.0, &mut rng(seed + 90_000));
        let one_step = AttackConfig::pgd(0.05, 0.08, 1);
        assert_eq!(
            pgd(&model, &x, 1, &one_step, 0).unwrap(),
            fgsm(&model, &x, 1, 0.05).unwrap(),
            "1-step pgd with step >= eps must equal fgsm bitwise"
        );
    }

    let z = zoo();
    let accs: Vec<f64> = [0.0, EVAL_EPS / 2.0, EVAL_EPS, 2.0 * EVAL_EPS]
        .iter()
        .map(|&e| {
            let cfg = AttackConfig::pgd(e, (e / 4.0).max(1e-3), 10);
            adversarial_accuracy(&z.none, &z.test, &cfg, 3).unwrap()
        })
        .collect();
    for w in accs.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-12,
            "adversarial accuracy not non-increasing: {accs:?}"
        );
    }
    println!(
        "[PASS] attack invariants: {runs} pgd runs within budget/box, 1-step==fgsm bitwise, eps sweep {accs:?} non-increasing"
    );
}

// --- criterion 6: landscape invariants ---------------------------------------

#[test]
fn criterion_landscape_invariants() {
    for seed in 0..1000u64 {
        let (d, dp) = sample_direction_pair::<f64>(128, seed).unwrap();
        let dot = d.dot(&dp).unwrap().abs();
        assert!(
            dot <= 1e-6 * d.frob_norm() * dp.frob_norm(),
            "orthogonality failed at seed {seed}"
        );
        assert!(
            (d.frob_norm() - dp.frob_norm()).abs() <= 1e-6 * d.frob_norm(),
            "norm match failed at seed {seed}"
        );
    }

    let mut max_shift_diff = 0.0f64;
    for seed in 0..20u64 {
        let model = mlp(6, vec![7], 3, seed);
        let x = Tensor::<f64>::rand_uniform(&[6], 0.0, 1.0, &mut rng(seed + 50));
        let plane = LandscapePlane::random(x, GridSpec::new(8.0 / 255.0, 2), seed).unwrap();
        let surf = surface(&model, &plane).unwrap();
        assert_eq!(surf.center_value(), 0.0, "center not exactly zero");

        let mut shifted = model.clone();
        let n = shifted.params().len();
        let bias = &mut shifted.params_mut()[n - 1];
        bias.tensor = bias.tensor.map(|v| v + 23.0);
        let surf2 = surface(&shifted, &plane).unwrap();
        for (a, b) in surf.values.iter().zip(&surf2.values) {
            max_shift_diff = max_shift_diff.max((a - b).abs());
        }
    }
    assert!(
        max_shift_diff < 1e-9,
        "logit-shift invariance violated: {max_shift_diff}"
    );
    println!(
        "[PASS] landscape invariants: 1000 plane seeds, exact centers, shift invariance diff {max_shift_diff:.2e}"
    );
}

// --- criterion 7: paper trends at toy scale ----------------------------------

#[test]
fn criterion_trend_reproduction() {
    let z = zoo();
    let attack = eval_attack();

    let clean_none = clean_accuracy(&z.none, &z.test).unwrap();
    let pgd_none = adversarial_accuracy(&z.none, &z.test, &attack, 3).unwrap();
    let pgd_at = adversarial_accuracy(&z.at, &z.test, &attack, 3).unwrap();
    let pgd_jac = adversarial_accuracy(&z.jac, &z.test, &attack, 3).unwrap();
    let pgd_ams = adversarial_accuracy(&z.ams, &z.test, &attack, 3).unwrap();

    // (a) undefended PGD accuracy far below clean accuracy.
    assert!(
        clean_none - pgd_none >= 0.30,
        "(a) gap too small: clean {clean_none}, pgd {pgd_none}"
    );

    // (b) flatness ordering: AMS > Jacobian, every defense > none.
    let phi_none = phi_of(&z.none, &z.probe30);
    let phi_at = phi_of(&z.at, &z.probe30);
    let phi_jac = phi_of(&z.jac, &z.probe30);
    let phi_ams = phi_of(&z.ams, &z.probe30);
    assert!(phi_ams > phi_jac, "(b) Phi: ams {phi_ams} <= jac {phi_jac}");
    for (name, phi) in [("at", phi_at), ("jac", phi_jac), ("ams", phi_ams)] {
        assert!(phi > phi_none, "(b) Phi({name}) {phi} <= Phi(none) {phi_none}");
    }

    // (c) robustness ordering: AT > regularizers > none.
    for (name, p) in [("jac", pgd_jac), ("ams", pgd_ams)] {
        assert!(pgd_at > p, "(c) pgd(at) {pgd_at} <= pgd({name}) {p}");
        assert!(p > pgd_none, "(c) pgd({name}) {p} <= pgd(none) {pgd_none}");
    }

    // (d) positive Spearman correlation between Phi and PGD accuracy over a
    // 4-point regularization-strength sweep (lambda = 0 is the undefended
    // model), plus monotone Phi in lambda.
    let sweep = [&z.none, &z.ams, &z.ams_mid, &z.ams_strong];
    let phis: Vec<f64> = sweep.iter().map(|m| phi_of(m, &z.probe30)).collect();
    let accs: Vec<f64> = sweep
        .iter()
        .map(|m| adversarial_accuracy(*m, &z.test, &attack, 3).unwrap())
        .collect();
    let rho = spearman(&phis, &accs);
    assert!(rho > 0.0, "(d) Spearman {rho} not positive: {phis:?} vs {accs:?}");

    let phi_max = phi_of(&z.ams_max, &z.probe30);
    let lambda_phis = [phi_none, phis[3], phi_max]; // lambda 0, 0.1, 1.0
    for w in lambda_phis.windows(2) {
        assert!(
            w[1] >= w[0],
            "Phi not non-decreasing in lambda: {lambda_phis:?}"
        );
    }

    // Defended models keep clean and randomly perturbed likelihoods closer
    // together than the undefended model does.
    let w1_of = |m: &Model<f64>| {
        let h = flatscape::landscape::likelihood_histogram(m, &z.probe30, EVAL_EPS, 20, 13)
            .unwrap();
        flatscape::stats::wasserstein1(&h.clean_values, &h.perturbed_values)
    };
    let (w1_none, w1_at, w1_ams) = (w1_of(&z.none), w1_of(&z.at), w1_of(&z.ams));
    assert!(
        w1_at < w1_none && w1_ams < w1_none,
        "defended histograms should align better: none {w1_none}, at {w1_at}, ams {w1_ams}"
    );

    println!(
        "[PASS] trends: (a) clean {clean_none:.3} vs pgd {pgd_none:.3}; (b) Phi none {phi_none:.2} < at {phi_at:.2}, jac {phi_jac:.2} < ams {phi_ams:.2}; (c) pgd at {pgd_at:.3} > jac {pgd_jac:.3}/ams {pgd_ams:.3} > none {pgd_none:.3}; (d) spearman {rho:.2}, Phi monotone in lambda {lambda_phis:?}; histogram W1 none {w1_none:.3} > at {w1_at:.3}/ams {w1_ams:.3}"
    );
}

// --- criterion 8: FGSM-direction anisotropy ---------------------------------

#[test]
fn criterion_fgsm_direction_trend() {
    let z = zoo();
    let grid = GridSpec::new(EVAL_EPS, 5);
    let mut var_fgsm = [0.0f64; 2];
    let mut var_rand = [0.0f64; 2];
    for (mi, model) in [&z.at, &z.ams].iter().enumerate() {
        for i in 0..z.probe12.len() {
            let x = z.probe12.input(i).clone();
            let fp = LandscapePlane::fgsm(
                model,
                x.clone(),
                z.probe12.label(i),
                grid.clone(),
                7 + i as u64,
            )
            .unwrap();
            var_fgsm[mi] += variance(&surface(model, &fp).unwrap().center_slice(0));
            let rp = LandscapePlane::random(x, grid.clone(), 7 + i as u64).unwrap();
            var_rand[mi] += variance(&surface(model, &rp).unwrap().center_slice(0));
        }
    }
    let n = z.probe12.len() as f64;
    let (at_f, ams_f) = (var_fgsm[0] / n, var_fgsm[1] / n);
    let (at_r, ams_r) = (var_rand[0] / n, var_rand[1] / n);
    assert!(
        at_f < ams_f,
        "AT should be flatter along the FGSM direction: at {at_f} vs ams {ams_f}"
    );
    assert!(
        ams_r <= at_r,
        "AMS should be at least as flat along random directions: ams {ams_r} vs at {at_r}"
    );
    println!(
        "[PASS] fgsm-direction trend: fgsm-dir variance at {at_f:.4} < ams {ams_f:.4}; random-dir ams {ams_r:.4} <= at {at_r:.4}"
    );
}

// --- criterion 9: command reproducibility ------------------------------------

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flatscape"))
}

fn write_train_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("train.toml");
    std::fs::write(
        &path,
        r#"
precision = "standard"
data = "blobs:n=30,classes=3,dim=8,sep=5,seed=1"

[arch]
preset = "mlp"
input_shape = [8]
num_classes = 3
hidden_dims = [12]

[train]
epochs = 6
batch_size = 16
learning_rate = 0.003
lr_decay_epochs = [4]
seed = 7

[defense]
mode = "ams_reg"
lambda = 0.05
n_proj = 1
"#,
    )
    .unwrap();
    path
}

#[test]
fn criterion_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_config(dir.path());
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let read = |run: &str, name: &str| std::fs::read(dir.path().join(run).join(name)).unwrap();
    assert_eq!(read("a", "model.ckpt"), read("b", "model.ckpt"));
    assert_eq!(read("a", "metrics.jsonl"), read("b", "metrics.jsonl"));

    let data = "blobs:n=30,classes=3,dim=8,sep=5,seed=1";
    for run in ["l1", "l2"] {
        let status = bin()
            .args(["landscape", "--ckpt"])
            .arg(dir.path().join("a/model.ckpt"))
            .args(["--data", data, "--index", "2", "--kind", "fgsm"])
            .args(["--resolution", "4", "--seed", "3", "--out"])
            .arg(dir.path().join(run))
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(read("l1", "surface.csv"), read("l2", "surface.csv"));
    assert_eq!(read("l1", "surface.ppm"), read("l2", "surface.ppm"));

    for run in ["f1", "f2"] {
        let status = bin()
            .args(["flatness", "--ckpt"])
            .arg(dir.path().join("a/model.ckpt"))
            .args(["--data", data, "--planes", "2", "--resolution", "2"])
            .args(["--max-samples", "9", "--seed", "5", "--out"])
            .arg(dir.path().join(run))
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(read("f1", "flatness.json"), read("f2", "flatness.json"));
    println!("[PASS] reproducibility: train/landscape/flatness reruns are byte-identical");
}

// --- criterion 10: format round-trips ----------------------------------------

#[test]
fn criterion_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();

    // IDX: synthesize, load, re-write; bytes must match.
    let mut img = Vec::new();
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    img.extend_from_slice(&3u32.to_be_bytes());
    img.extend_from_slice(&4u32.to_be_bytes());
    img.extend_from_slice(&4u32.to_be_bytes());
    let mut r = rng(9);
    for _ in 0..48 {
        img.push(r.gen::<u8>());
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lab.extend_from_slice(&3u32.to_be_bytes());
    lab.extend_from_slice(&[1, 0, 2]);
    let ip = dir.path().join("t-images-idx3-ubyte");
    let lp = dir.path().join("t-labels-idx1-ubyte");
    std::fs::write(&ip, &img).unwrap();
    std::fs::write(&lp, &lab).unwrap();
    let ds = load_idx::<f32>(&ip, &lp).unwrap();
    let ip2 = dir.path().join("rt-images-idx3-ubyte");
    let lp2 = dir.path().join("rt-labels-idx1-ubyte");
    write_idx(&ds, &ip2, &lp2).unwrap();
    assert_eq!(img, std::fs::read(&ip2).unwrap());
    assert_eq!(lab, std::fs::read(&lp2).unwrap());

    // Checkpoint: save, load, save again; bytes must match.
    for seed in 0..3u64 {
        let model = mlp(7, vec![5], 4, seed);
        let p1 = dir.path().join(format!("m{seed}.ckpt"));
        save_checkpoint(&model, &p1).unwrap();
        let loaded = match load_checkpoint(&p1).unwrap() {
            AnyModel::F64(m) => m,
            _ => panic!("expected f64 checkpoint"),
        };
        let p2 = dir.path().join(format!("m{seed}-rt.ckpt"));
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.checksum(), model.checksum());
    }
    println!("[PASS] format round-trips: IDX and checkpoint round-trips are bitwise exact");
}
