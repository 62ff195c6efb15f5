//! Implementations of the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use flatscape::attacks::{adversarial_accuracy, clean_accuracy, AttackConfig};
use flatscape::data::{parse_spec, subset, Dataset};
use flatscape::ebm::dataset_flatness;
use flatscape::landscape::{surface, GridSpec, LandscapePlane};
use flatscape::models::{load_checkpoint, save_checkpoint, AnyModel, Model};
use flatscape::tensor::Element;
use flatscape::training::train;
use flatscape::{Error, Result};

use crate::config::TrainFileConfig;
use crate::manifest::RunManifest;

pub fn resolve_out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os("FLATSCAPE_OUT_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn config_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(format!("config encode: {e}")))
}

// --- train ------------------------------------------------------------

pub fn cmd_train(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = TrainFileConfig::load(config_path)?;
    match cfg.precision.as_str() {
        "high" => run_train::<f64>(&cfg, out),
        _ => run_train::<f32>(&cfg, out),
    }
}

fn run_train<E: Element>(cfg: &TrainFileConfig, out: &Path) -> Result<()> {
    let data: Dataset<E> = parse_spec(&cfg.data)?;
    let mut model = Model::<E>::build(&cfg.arch, cfg.train.seed)?;
    let records = train(
        &mut model,
        &data,
        &cfg.train,
        &cfg.defense,
        cfg.phi_probe.as_ref(),
    )?;

    std::fs::create_dir_all(out)?;
    save_checkpoint(&model, &out.join("model.ckpt"))?;

    let mut metrics = Vec::new();
    for r in &records {
        metrics.extend_from_slice(
            serde_json::to_string(r)
                .map_err(|e| Error::Format(format!("metrics encode: {e}")))?
                .as_bytes(),
        );
        metrics.push(b'\n');
    }

    let mut manifest = RunManifest::new("train", config_value(cfg)?, cfg.train.seed);
    manifest.model_checksum = Some(model.checksum());
    manifest.record_existing(out, "model.ckpt")?;
    manifest.write_output(out, "metrics.jsonl", &metrics)?;
    manifest.finalize(out)?;

    if let Some(last) = records.last() {
        println!(
            "trained {} epochs: loss {:.6}, clean accuracy {:.4}",
            records.len(),
            last.loss,
            last.clean_acc
        );
    } else {
        println!("trained 0 epochs: model saved unchanged");
    }
    Ok(())
}

// --- eval -------------------------------------------------------------

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    clean_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    adv_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<AttackConfig>,
    n_samples: usize,
    seed: u64,
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: String,
    pub attack: Option<String>,
    pub eps: Option<f64>,
    pub step_size: Option<f64>,
    pub iters: Option<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn attack_from_args(
    name: &str,
    eps: Option<f64>,
    step_size: Option<f64>,
    iters: Option<usize>,
) -> Result<AttackConfig> {
    if name == "pgd" {
        let eps = eps.ok_or_else(|| Error::Config("custom pgd needs --eps".into()))?;
        let step = step_size.ok_or_else(|| Error::Config("custom pgd needs --step-size".into()))?;
        let cfg = AttackConfig::pgd(eps, step, iters.unwrap_or(10));
        cfg.validate()?;
        return Ok(cfg);
    }
    AttackConfig::preset(name, eps)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let attack = match &args.attack {
        Some(name) => Some(attack_from_args(name, args.eps, args.step_size, args.iters)?),
        None => None,
    };
    let report = match load_checkpoint(&args.ckpt)? {
        AnyModel::F32(m) => eval_model(&m, &args.data, attack.as_ref(), args.seed)?,
        AnyModel::F64(m) => eval_model(&m, &args.data, attack.as_ref(), args.seed)?,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report encode: {e}")))?;
    println!("{json}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        let mut manifest = RunManifest::new(
            "eval",
            json!({
                "ckpt": args.ckpt.display().to_string(),
                "data": args.data,
                "attack": attack,
            }),
            args.seed,
        );
        manifest.write_output(out, "eval.json", json.as_bytes())?;
        manifest.finalize(out)?;
    }
    Ok(())
}

fn eval_model<E: Element>(
    model: &Model<E>,
    data_spec: &str,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<EvalReport> {
    let data: Dataset<E> = parse_spec(data_spec)?;
    let clean = clean_accuracy(model, &data)?;
    let adv = match attack {
        Some(cfg) => Some(adversarial_accuracy(model, &data, cfg, seed)?),
        None => None,
    };
    Ok(EvalReport {
        schema_version: flatscape::SCHEMA_VERSION,
        clean_acc: clean,
        adv_acc: adv,
        config: attack.cloned(),
        n_samples: data.len(),
        seed,
    })
}

// --- landscape ---------------------------------------------------------

pub struct LandscapeArgs {
    pub ckpt: PathBuf,
    pub data: String,
    pub index: usize,
    pub fgsm: bool,
    pub eps_max: f64,
    pub resolution: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_landscape(args: &LandscapeArgs) -> Result<()> {
    match load_checkpoint(&args.ckpt)? {
        AnyModel::F32(m) => run_landscape(&m, args),
        AnyModel::F64(m) => run_landscape(&m, args),
    }
}

fn run_landscape<E: Element>(model: &Model<E>, args: &LandscapeArgs) -> Result<()> {
    let data: Dataset<E> = parse_spec(&args.data)?;
    if args.index >= data.len() {
        return Err(Error::Input(format!(
            "sample index {} out of range for {} samples",
            args.index,
            data.len()
        )));
    }
    let x = data.input(args.index).clone();
    let label = data.label(args.index);
    let grid = GridSpec::new(args.eps_max, args.resolution);
    let plane = if args.fgsm {
        LandscapePlane::fgsm(model, x, label, grid, args.seed)?
    } else {
        LandscapePlane::random(x, grid, args.seed)?
    };
    let surf = surface(model, &plane)?;
    if surf.center_value() != 0.0 {
        return Err(Error::Numeric(format!(
            "surface center is {}, expected exactly 0",
            surf.center_value()
        )));
    }

    std::fs::create_dir_all(&args.out)?;
    let (min, max) = surf.min_max();
    let mut manifest = RunManifest::new(
        "landscape",
        json!({
            "ckpt": args.ckpt.display().to_string(),
            "data": args.data,
            "index": args.index,
            "direction_kind": surf.direction_kind,
            "label": if args.fgsm { Some(label) } else { None },
            "zero_direction": surf.zero_direction,
            "eps_max": args.eps_max,
            "resolution": args.resolution,
            "value_min": min,
            "value_max": max,
        }),
        args.seed,
    );
    manifest.model_checksum = Some(model.checksum());
    manifest.write_output(&args.out, "surface.csv", surf.to_csv().as_bytes())?;
    manifest.write_output(&args.out, "surface.ppm", &surf.to_ppm())?;
    manifest.finalize(&args.out)?;
    println!(
        "landscape over {}x{} grid: min {min:.6}, max {max:.6}",
        surf.side(),
        surf.side()
    );
    Ok(())
}

// --- flatness ----------------------------------------------------------

pub struct FlatnessArgs {
    pub ckpt: PathBuf,
    pub data: String,
    pub planes: usize,
    pub eps_max: f64,
    pub resolution: usize,
    pub max_samples: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_flatness(args: &FlatnessArgs) -> Result<()> {
    match load_checkpoint(&args.ckpt)? {
        AnyModel::F32(m) => run_flatness(&m, args),
        AnyModel::F64(m) => run_flatness(&m, args),
    }
}

fn run_flatness<E: Element>(model: &Model<E>, args: &FlatnessArgs) -> Result<()> {
    let mut data: Dataset<E> = parse_spec(&args.data)?;
    if let Some(n) = args.max_samples {
        if n < data.len() {
            data = subset(&data, n, args.seed)?;
        }
    }
    let grid = GridSpec::new(args.eps_max, args.resolution);
    let report = dataset_flatness(model, &data, args.planes, &grid, args.seed)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report encode: {e}")))?;

    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new(
        "flatness",
        json!({
            "ckpt": args.ckpt.display().to_string(),
            "data": args.data,
            "planes": args.planes,
            "eps_max": args.eps_max,
            "resolution": args.resolution,
            "max_samples": args.max_samples,
        }),
        args.seed,
    );
    manifest.model_checksum = Some(model.checksum());
    manifest.write_output(&args.out, "flatness.json", json.as_bytes())?;
    manifest.finalize(&args.out)?;
    println!(
        "flatness over {} samples: Phi = {:.6}",
        report.sample_count, report.phi
    );
    Ok(())
}

// --- histogram ---------------------------------------------------------

pub struct HistogramArgs {
    pub ckpt: PathBuf,
    pub data: String,
    pub eps: f64,
    pub bins: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_histogram(args: &HistogramArgs) -> Result<()> {
    match load_checkpoint(&args.ckpt)? {
        AnyModel::F32(m) => run_histogram(&m, args),
        AnyModel::F64(m) => run_histogram(&m, args),
    }
}

fn run_histogram<E: Element>(model: &Model<E>, args: &HistogramArgs) -> Result<()> {
    let data: Dataset<E> = parse_spec(&args.data)?;
    let hist = flatscape::landscape::likelihood_histogram(model, &data, args.eps, args.bins, args.seed)?;

    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new(
        "histogram",
        json!({
            "ckpt": args.ckpt.display().to_string(),
            "data": args.data,
            "eps": args.eps,
            "bins": args.bins,
        }),
        args.seed,
    );
    manifest.model_checksum = Some(model.checksum());
    manifest.write_output(&args.out, "histogram.csv", hist.to_csv().as_bytes())?;
    manifest.finalize(&args.out)?;
    let w = flatscape::stats::wasserstein1(&hist.clean_values, &hist.perturbed_values);
    println!(
        "histogram over {} samples at eps {}: clean-vs-perturbed W1 = {w:.6}",
        hist.clean_values.len(),
        args.eps
    );
    Ok(())
}
