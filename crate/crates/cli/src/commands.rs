use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::anyhow;
use sbcit_core::augment::augment_variants;
use sbcit_core::checkpoint::{load_model, save_checkpoint};
use sbcit_core::config::RunConfig;
use sbcit_core::data::{
    generate_synthetic, load_image_dataset, read_image, split_dataset, split_manifest, write_pgm, Dataset, GrayImage,
    SyntheticSpec,
};
use sbcit_core::gradsuite::{run_module, run_suite, suite_config, ModuleCheck};
use sbcit_core::metrics::{evaluate, feature_projection};
use sbcit_core::model::{describe_model, Model};
use sbcit_core::train::{evaluate_loss, fit, log_csv, FitOptions, LOG_HEADER};
use sbcit_core::Error;

use crate::{ConfigArgs, DataArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_IO: u8 = 3;

/// An error together with the process exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code,
            error: error.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_USAGE,
            Error::Io { .. } | Error::Format { .. } | Error::Checkpoint { .. } | Error::Data(_) => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        Failure::new(code, e)
    }
}

type Outcome = Result<(), Failure>;

fn write_file(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::new(EXIT_IO, anyhow!("{}: {e}", path.display())))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let base = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::new(EXIT_IO, anyhow!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| Failure::new(EXIT_USAGE, anyhow!("{}: {e}", path.display())))?
        }
        None => RunConfig::miniature(),
    };
    Ok(base.with_assignments(&args.set)?)
}

/// Loads the directory dataset or generates the synthetic one, and checks it
/// against the configured class count.
fn load_data(cfg: &RunConfig, data: &DataArgs) -> Result<Dataset, Failure> {
    if cfg.in_channels != 1 {
        return Err(Failure::new(
            EXIT_USAGE,
            anyhow!("image loading produces single-channel inputs, but in_channels = {}", cfg.in_channels),
        ));
    }
    let ds = match &data.data {
        Some(dir) => load_image_dataset(dir, cfg.input_size, cfg.class_names.as_deref())?,
        None => generate_synthetic(SyntheticSpec {
            classes: cfg.num_classes,
            per_class: cfg.synthetic_per_class,
            size: cfg.input_size,
            seed: cfg.seed,
        })?,
    };
    if ds.skipped > 0 {
        log::warn!("skipped {} unreadable files", ds.skipped);
    }
    if ds.num_classes() != cfg.num_classes {
        return Err(Failure::new(
            EXIT_USAGE,
            anyhow!(
                "dataset has {} classes ({}) but the configuration expects {}",
                ds.num_classes(),
                ds.class_names.join(", "),
                cfg.num_classes
            ),
        ));
    }
    Ok(ds)
}

/// Images to score: a whole directory, or the test split of the synthetic
/// dataset so that a synthetic model is scored on data it never saw.
fn scoring_set(cfg: &RunConfig, data: &DataArgs) -> Result<Dataset, Failure> {
    let ds = load_data(cfg, data)?;
    if data.synthetic {
        let splits = split_dataset(&ds, &cfg.split())?;
        Ok(ds.subset(&splits.test))
    } else {
        Ok(ds)
    }
}

pub fn train(
    config: &ConfigArgs,
    data: &DataArgs,
    seed: Option<u64>,
    out: Option<&Path>,
    log_path: Option<&Path>,
    manifest: Option<&Path>,
) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let ds = load_data(&cfg, data)?;
    let splits = split_dataset(&ds, &cfg.split())?;
    if let Some(path) = manifest {
        write_file(path, &split_manifest(&ds, &splits))?;
    }
    let (train_set, val_set, test_set) = (ds.subset(&splits.train), ds.subset(&splits.val), ds.subset(&splits.test));
    log::info!(
        "{} training, {} validation and {} test images",
        train_set.len(),
        val_set.len(),
        test_set.len()
    );

    let mut model = Model::new(cfg.model(), cfg.seed)?;
    let stdout = std::io::stdout();
    let print_row = |row: &str| {
        let mut lock = stdout.lock();
        let _ = writeln!(lock, "{row}");
        let _ = lock.flush();
    };
    print_row(LOG_HEADER);
    let mut on_epoch = |e: &sbcit_core::train::EpochLog| print_row(&e.csv_row());
    let start = Instant::now();
    let outcome = fit(
        &mut model,
        &train_set,
        &val_set,
        FitOptions {
            schedule: cfg.schedule(),
            augment: cfg.augment_ranges(),
            seed: cfg.seed,
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    log::info!("training took {:.1} s", start.elapsed().as_secs_f64());
    if let Some(path) = log_path {
        write_file(path, &log_csv(&outcome.log))?;
    }

    let best = Model::from_params(cfg.model(), outcome.best)?;
    if let Some(epoch) = outcome.best_epoch {
        let (loss, acc) = evaluate_loss(&best, &test_set, 64)?;
        eprintln!(
            "best epoch {epoch}: validation accuracy {:.4}, test accuracy {acc:.4}, test loss {loss:.4}",
            outcome.best_val_acc.unwrap_or(0.0)
        );
    }
    if let Some(path) = out {
        save_checkpoint(&best.params, path)?;
    }
    Ok(())
}

pub fn eval(
    config: &ConfigArgs,
    ckpt: &Path,
    data: &DataArgs,
    seed: Option<u64>,
    report_path: &Path,
    curves_path: Option<&Path>,
    min_accuracy: Option<f64>,
) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let model = load_model(ckpt, cfg.model())?;
    let ds = scoring_set(&cfg, data)?;
    let pred = model.predict(&ds.images()?, 64)?;
    let scores: Vec<f64> = pred.probabilities.data().iter().map(|&p| p as f64).collect();
    let report = evaluate(&ds.labels(), &scores, &ds.class_names)?;
    write_file(report_path, &report.to_json())?;
    if let Some(path) = curves_path {
        write_file(path, &report.curves_csv())?;
    }

    let m = &report.metrics;
    println!("samples      {}", report.samples);
    println!("accuracy     {:.4} ± {:.4}", m.overall_accuracy, report.ci_half_width);
    println!("sensitivity  {:.4}", m.macro_sensitivity);
    println!("precision    {:.4}", m.macro_precision);
    println!("specificity  {:.4}", m.macro_specificity);
    println!("f1           {:.4}", m.macro_f1);
    let auc = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!("roc_auc      {}", auc(report.roc_auc));
    println!("pr_auc       {}", auc(report.pr_auc));

    if let Some(min) = min_accuracy {
        if m.overall_accuracy < min {
            return Err(Failure::new(
                EXIT_VALIDATION,
                anyhow!("accuracy {:.4} is below the required {min}", m.overall_accuracy),
            ));
        }
    }
    Ok(())
}

pub fn describe(config: &ConfigArgs, json: bool) -> Outcome {
    let cfg = load_config(config)?;
    let report = describe_model(&cfg.model())?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("{report}");
    }
    Ok(())
}

fn print_check(c: &ModuleCheck) {
    let worst = c
        .report
        .worst
        .as_ref()
        .map(|w| format!("input {} coord {}: analytic {:.6e}, numeric {:.6e}", w.input, w.coord, w.analytic, w.numeric))
        .unwrap_or_default();
    println!(
        "{:<20} {:>7} {:>12.3e} {:>9.0e} {:>7.2}s  {}  {worst}",
        c.module,
        c.report.checked,
        c.report.max_rel_error,
        c.report.rel_tol,
        c.seconds,
        if c.passed() { "PASS" } else { "FAIL" },
    );
}

pub fn gradcheck(module: Option<&str>) -> Outcome {
    let cfg = suite_config();
    println!("{:<20} {:>7} {:>12} {:>9} {:>8}  result", "module", "coords", "max_rel_err", "tolerance", "time");
    let checks = match module {
        Some(name) => vec![run_module(name, &cfg).map_err(|e| match e {
            Error::Config(_) => Failure::new(EXIT_USAGE, e),
            other => other.into(),
        })?],
        None => run_suite(&cfg)?,
    };
    checks.iter().for_each(print_check);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.module.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_VALIDATION, anyhow!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn augment(config: &ConfigArgs, input: &Path, out: &Path, count: usize, seed: u64) -> Outcome {
    let cfg = load_config(config)?;
    let image = read_image(input)?.to_tensor();
    let variants = augment_variants(&image, &cfg.augment_bounds(), count, seed)?;
    fs::create_dir_all(out).map_err(|e| Failure::new(EXIT_IO, anyhow!("{}: {e}", out.display())))?;
    let mut table = String::from("file,rotation_deg,shear_deg,scale,translate_x,translate_y,reflect_x,reflect_y\n");
    for (i, (p, t)) in variants.iter().enumerate() {
        let name = format!("aug_{i:04}.pgm");
        write_pgm(&out.join(&name), &GrayImage::from_tensor(t)?)?;
        table.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            p.rotation_deg, p.shear_deg, p.scale, p.translate_px.0, p.translate_px.1, p.reflect_x, p.reflect_y
        ));
    }
    write_file(&out.join("params.csv"), &table)?;
    println!("wrote {count} images to {}", out.display());
    Ok(())
}

pub fn project(config: &ConfigArgs, ckpt: &Path, data: &DataArgs, seed: Option<u64>, out: &Path) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let model = load_model(ckpt, cfg.model())?;
    let ds = scoring_set(&cfg, data)?;
    let pred = model.predict(&ds.images()?, 64)?;
    let d = pred.penultimate.shape()[1];
    let features: Vec<f64> = pred.penultimate.data().iter().map(|&v| v as f64).collect();
    let projection = feature_projection(&features, d, &ds.labels())?;
    write_file(out, &projection.to_csv())?;
    println!(
        "explained variance: pc1 {:.4}, pc2 {:.4}",
        projection.explained[0], projection.explained[1]
    );
    Ok(())
}
