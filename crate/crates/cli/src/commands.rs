use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use calib_core::calibrators::{fit_histogram_binning, Uncalibrated};
use calib_core::io::{self, DatasetFile, DatasetFormat, FittedOn, SpecDocument};
use calib_core::metrics::ece;
use calib_core::numeric::output_magnitude;
use calib_core::optimizer::{
    default_rho_grid, fit_rho_norm, fit_temperature, fit_vector, FitConfig,
};
use calib_core::report::{evaluate, render_svg, CalibrationReport};
use calib_core::synth::{generate, SynthConfig};
use calib_core::verify::{run_verification, Family, VerifyOptions};
use calib_core::{Calibrator, CalibratorSpec, LogitDataset, ObjectiveConfig, ObjectiveKind};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{
    CompareArgs, CompareMethod, EvalArgs, FitArgs, FitOptions, Method, SplitArgs, SynthArgs,
    VerifyArgs,
};
use crate::UsageError;

fn load(path: &Path) -> Result<LogitDataset> {
    Ok(io::load_dataset(&DatasetFile::new(path))?)
}

/// Same token serde_json writes, so text and JSON outputs agree digit for digit.
fn num(x: f64) -> String {
    serde_json::to_string(&x).unwrap_or_else(|_| x.to_string())
}

pub fn synth(a: &SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        sample_count: a.n,
        class_count: a.m,
        dirichlet_concentration: a.concentration,
        overconfidence_scale: a.scale,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    if a.bins == 0 {
        return Err(UsageError("--bins must be >= 1".into()).into());
    }
    let ds = generate(&cfg)?;
    io::save_dataset(&ds, &a.out, DatasetFormat::from_path(&a.out))?;
    let probs = Uncalibrated.calibrate_dataset(&ds)?;
    println!(
        "wrote {} rows x {} classes to {}",
        ds.len(),
        ds.class_count(),
        a.out.display()
    );
    println!(
        "uncalibrated ECE: {}",
        num(ece(&probs, ds.labels(), a.bins)?)
    );
    println!("output magnitude: {}", num(output_magnitude(&ds)));
    Ok(ExitCode::SUCCESS)
}

pub fn split(a: &SplitArgs) -> Result<ExitCode> {
    let ds = load(&a.data)?;
    let (val, test) = io::split(&ds, a.fraction, a.seed)?;
    io::save_dataset(&val, &a.val_out, DatasetFormat::from_path(&a.val_out))?;
    io::save_dataset(&test, &a.test_out, DatasetFormat::from_path(&a.test_out))?;
    println!(
        "validation: {} rows -> {}\ntest: {} rows -> {}",
        val.len(),
        a.val_out.display(),
        test.len(),
        a.test_out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fittable {
    RhoNorm,
    Temperature,
    Vector,
    Histogram,
}

impl Fittable {
    fn name(self) -> &'static str {
        match self {
            Fittable::RhoNorm => "rho_norm",
            Fittable::Temperature => "temperature",
            Fittable::Vector => "vector",
            Fittable::Histogram => "histogram",
        }
    }
}

impl From<Method> for Fittable {
    fn from(m: Method) -> Self {
        match m {
            Method::RhoNorm => Fittable::RhoNorm,
            Method::Temperature => Fittable::Temperature,
            Method::Vector => Fittable::Vector,
            Method::Histogram => Fittable::Histogram,
        }
    }
}

/// Objective a method will minimize. With `strict`, an `--objective` the
/// method cannot honour is a usage error; otherwise it is ignored for that
/// method.
fn objective_for(
    method: Fittable,
    o: &FitOptions,
    strict: bool,
) -> Result<Option<ObjectiveConfig>> {
    let base = ObjectiveConfig {
        kappa: o.kappa,
        alpha: o.alpha,
        kind: ObjectiveKind::SceKl,
    };
    let obj = match (method, o.objective) {
        (Fittable::Histogram, Some(k)) if strict => {
            return Err(UsageError(format!(
                "histogram binning takes no objective (got --objective {k})"
            ))
            .into())
        }
        (Fittable::Histogram, _) => None,
        (Fittable::Temperature, Some(k)) if strict && k != ObjectiveKind::Nll => {
            return Err(UsageError(format!(
                "temperature scaling is fitted by nll (got --objective {k})"
            ))
            .into())
        }
        (Fittable::Temperature, _) => Some(ObjectiveConfig {
            kind: ObjectiveKind::Nll,
            ..base
        }),
        (_, k) => Some(ObjectiveConfig {
            kind: k.unwrap_or(ObjectiveKind::SceKl),
            ..base
        }),
    };
    if let Some(obj) = &obj {
        obj.validate().map_err(|e| UsageError(e.to_string()))?;
    }
    Ok(obj)
}

fn fit_config(o: &FitOptions) -> Result<FitConfig> {
    let d = FitConfig::default();
    let cfg = FitConfig {
        learning_rate: o.lr,
        max_iterations: o.iters,
        batch_size: o.batch,
        seed: o.seed,
        rho_grid: o.rho_grid.clone().unwrap_or_else(default_rho_grid),
        eval_bins: o.bins,
        gradient_mode: o.gradient.into(),
        init_gamma_raw: o.init_gamma_raw.unwrap_or(d.init_gamma_raw),
        init_beta_raw: o.init_beta_raw.unwrap_or(d.init_beta_raw),
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

struct Fitted {
    spec: CalibratorSpec,
    /// Method-specific fit diagnostics, such as the per-ρ trace.
    details: Value,
}

fn run_fit(
    method: Fittable,
    data: &LogitDataset,
    cfg: &FitConfig,
    obj: Option<&ObjectiveConfig>,
) -> Result<Fitted> {
    let default_obj = ObjectiveConfig::default();
    let obj = obj.unwrap_or(&default_obj);
    Ok(match method {
        Fittable::RhoNorm => {
            let r = fit_rho_norm(data, cfg, obj)?;
            Fitted {
                spec: r.best_params.clone(),
                details: json!({
                    "best_validation_ece": r.best_validation_ece,
                    "iterations_run": r.iterations_run,
                    "trace": r.per_rho_trace,
                }),
            }
        }
        Fittable::Temperature => Fitted {
            spec: CalibratorSpec::Temperature(fit_temperature(data, cfg)?),
            details: Value::Null,
        },
        Fittable::Vector => Fitted {
            spec: CalibratorSpec::Vector(fit_vector(data, cfg, obj)?),
            details: Value::Null,
        },
        Fittable::Histogram => Fitted {
            spec: CalibratorSpec::Histogram(fit_histogram_binning(data, cfg.eval_bins)?),
            details: Value::Null,
        },
    })
}

fn run_config(method: &str, cfg: &FitConfig, obj: Option<&ObjectiveConfig>) -> Value {
    json!({
        "method": method,
        "bins": cfg.eval_bins,
        "objective": obj,
        "optimizer": cfg,
    })
}

fn default_report_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "spec".into());
    out.with_file_name(format!("{stem}.fit.json"))
}

fn print_metrics(r: &CalibrationReport) {
    let m = &r.metrics;
    println!("ECE: {}", num(m.ece));
    println!("MCE: {}", num(m.mce));
    println!("AdaECE: {}", num(m.ada_ece));
    println!("NLL: {}", num(m.nll));
    println!("accuracy: {}", num(m.accuracy));
    println!("KL to uncalibrated: {}", num(m.kl_to_uncalibrated));
    println!("output magnitude: {}", num(m.output_magnitude));
}

pub fn fit(a: &FitArgs) -> Result<ExitCode> {
    let method = Fittable::from(a.method);
    let obj = objective_for(method, &a.opts, true)?;
    let cfg = fit_config(&a.opts)?;
    let data = load(&a.data)?;
    let fitted = run_fit(method, &data, &cfg, obj.as_ref())
        .with_context(|| format!("fitting {} on {}", method.name(), a.data.display()))?;

    let doc = SpecDocument {
        spec: fitted.spec,
        fitted_on: FittedOn {
            n: data.len(),
            m: data.class_count(),
            seed: cfg.seed,
        },
    };
    io::save_spec(&doc, &a.out)?;

    let spec_json = doc.to_json();
    let mut report = evaluate(
        method.name(),
        spec_json["params"].clone(),
        &doc.spec,
        &data,
        cfg.eval_bins,
        run_config(method.name(), &cfg, obj.as_ref()),
    )?;
    report.extras = json!({ "fitted_on": doc.fitted_on, "fit": fitted.details });
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| default_report_path(&a.out));
    io::save_report(&report, &report_path)?;

    println!(
        "fitted {} on {} rows -> {}",
        method.name(),
        data.len(),
        a.out.display()
    );
    println!("params: {}", spec_json["params"]);
    println!("fit report -> {}", report_path.display());
    println!("on fitting data:");
    print_metrics(&report);
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    if a.bins == 0 {
        return Err(UsageError("--bins must be >= 1".into()).into());
    }
    let doc = io::load_spec_document(&a.spec)?;
    let data = load(&a.data)?;
    let m = data.class_count();
    if doc.fitted_on.m != m {
        bail!(
            "class-count mismatch: spec {} was fitted on m = {} classes but {} has m = {}",
            a.spec.display(),
            doc.fitted_on.m,
            a.data.display(),
            m
        );
    }
    if let Some(k) = doc.spec.class_count() {
        if k != m {
            bail!(
                "class-count mismatch: {} parameters cover {} classes but {} has m = {}",
                doc.spec.method_name(),
                k,
                a.data.display(),
                m
            );
        }
    }
    let params = doc.to_json()["params"].clone();
    let mut report = evaluate(
        doc.spec.method_name(),
        params,
        &doc.spec,
        &data,
        a.bins,
        json!({ "bins": a.bins }),
    )?;
    report.extras = json!({ "fitted_on": doc.fitted_on });
    if let Some(path) = &a.report {
        io::save_report(&report, path)?;
    }
    if let Some(path) = &a.svg {
        let title = format!(
            "{} reliability (ECE {:.4})",
            doc.spec.method_name(),
            report.metrics.ece
        );
        render_svg(&report.reliability, &title, path)?;
    }
    println!("{} on {} rows:", doc.spec.method_name(), data.len());
    print_metrics(&report);
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct CompareCell {
    method: &'static str,
    ece: Option<f64>,
    mce: Option<f64>,
    ada_ece: Option<f64>,
    params: Value,
    error: Option<String>,
}

const COMPARE_METRICS: [&str; 3] = ["ece", "mce", "ada_ece"];

impl CompareCell {
    fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "ece" => self.ece,
            "mce" => self.mce,
            _ => self.ada_ece,
        }
    }
}

fn compare_name(m: CompareMethod) -> &'static str {
    match m {
        CompareMethod::Uncalibrated => "uncalibrated",
        CompareMethod::Temperature => "temperature",
        CompareMethod::RhoNorm => "rho_norm",
        CompareMethod::Vector => "vector",
        CompareMethod::Histogram => "histogram",
    }
}

fn compare_one(
    method: CompareMethod,
    val: &LogitDataset,
    test: &LogitDataset,
    o: &FitOptions,
    cfg: &FitConfig,
) -> CompareCell {
    let name = compare_name(method);
    let outcome = (|| -> Result<(Value, CalibrationReport)> {
        let (spec, params): (Box<dyn Calibrator>, Value) = match method {
            CompareMethod::Uncalibrated => (Box::new(Uncalibrated), Value::Null),
            other => {
                let f = match other {
                    CompareMethod::Temperature => Fittable::Temperature,
                    CompareMethod::RhoNorm => Fittable::RhoNorm,
                    CompareMethod::Vector => Fittable::Vector,
                    _ => Fittable::Histogram,
                };
                let obj = objective_for(f, o, false)?;
                let fitted = run_fit(f, val, cfg, obj.as_ref())?;
                let doc = SpecDocument {
                    spec: fitted.spec,
                    fitted_on: FittedOn {
                        n: val.len(),
                        m: val.class_count(),
                        seed: cfg.seed,
                    },
                };
                let params = doc.to_json()["params"].clone();
                (Box::new(doc.spec), params)
            }
        };
        let report = evaluate(
            name,
            params.clone(),
            spec.as_ref(),
            test,
            cfg.eval_bins,
            Value::Null,
        )?;
        Ok((params, report))
    })();
    match outcome {
        Ok((params, r)) => CompareCell {
            method: name,
            ece: Some(r.metrics.ece),
            mce: Some(r.metrics.mce),
            ada_ece: Some(r.metrics.ada_ece),
            params,
            error: None,
        },
        Err(e) => CompareCell {
            method: name,
            ece: None,
            mce: None,
            ada_ece: None,
            params: Value::Null,
            error: Some(format!("{e:#}")),
        },
    }
}

pub fn compare(a: &CompareArgs) -> Result<ExitCode> {
    if a.methods.is_empty() {
        return Err(UsageError("--methods needs at least one method".into()).into());
    }
    let cfg = fit_config(&a.opts)?;
    // Surfaces bad --alpha/--kappa before any fitting starts.
    objective_for(Fittable::RhoNorm, &a.opts, false)?;
    let (val, test) = match (&a.data, &a.val, &a.test) {
        (Some(d), _, _) => io::split(&load(d)?, a.val_fraction, a.split_seed)?,
        (None, Some(v), Some(t)) => (load(v)?, load(t)?),
        _ => return Err(UsageError("give --data or both --val and --test".into()).into()),
    };
    if val.class_count() != test.class_count() {
        bail!(
            "class-count mismatch: validation has m = {} but test has m = {}",
            val.class_count(),
            test.class_count()
        );
    }

    let mut seen = Vec::new();
    let methods: Vec<CompareMethod> = a
        .methods
        .iter()
        .copied()
        .filter(|m| {
            let fresh = !seen.contains(m);
            seen.push(*m);
            fresh
        })
        .collect();
    let cells: Vec<CompareCell> = methods
        .iter()
        .map(|&m| compare_one(m, &val, &test, &a.opts, &cfg))
        .collect();

    // Lowest value per metric; ties mark every tied method.
    let mut best = serde_json::Map::new();
    for metric in COMPARE_METRICS {
        let low = cells
            .iter()
            .filter_map(|c| c.metric(metric))
            .fold(f64::INFINITY, f64::min);
        let winners: Vec<&str> = cells
            .iter()
            .filter(|c| c.metric(metric) == Some(low))
            .map(|c| c.method)
            .collect();
        best.insert(metric.to_string(), json!(winners));
    }

    let is_best = |metric: &str, method: &str| {
        best[metric]
            .as_array()
            .is_some_and(|w| w.iter().any(|x| x == method))
    };
    let cell_text = |c: &CompareCell, metric: &str| match (c.metric(metric), &c.error) {
        (Some(v), _) if is_best(metric, c.method) => format!("{}*", num(v)),
        (Some(v), _) => num(v),
        (None, _) => "error".to_string(),
    };

    let mut rows: Vec<Vec<String>> = vec![std::iter::once("metric".to_string())
        .chain(cells.iter().map(|c| c.method.to_string()))
        .collect()];
    for metric in COMPARE_METRICS {
        rows.push(
            std::iter::once(metric.to_string())
                .chain(cells.iter().map(|c| cell_text(c, metric)))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    println!(
        "validation {} rows, test {} rows, m = {}",
        val.len(),
        test.len(),
        test.class_count()
    );
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}"))
            .collect();
        println!("{}", line.join("  ").trim_end());
    }
    println!("* best per metric");
    for c in cells.iter().filter(|c| c.error.is_some()) {
        println!(
            "{}: error: {}",
            c.method,
            c.error.as_deref().unwrap_or_default()
        );
    }

    if let Some(path) = &a.json {
        let objective = objective_for(Fittable::RhoNorm, &a.opts, false)?;
        let doc = json!({
            "config": {
                "validation_rows": val.len(),
                "test_rows": test.len(),
                "class_count": test.class_count(),
                "val_fraction": a.data.as_ref().map(|_| a.val_fraction),
                "split_seed": a.data.as_ref().map(|_| a.split_seed),
                "objective": objective,
                "optimizer": cfg,
            },
            "metrics": COMPARE_METRICS,
            "methods": cells,
            "best": best,
        });
        io::save_json(&doc, path)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn verify(a: &VerifyArgs) -> Result<ExitCode> {
    let d = VerifyOptions::default();
    let opts = VerifyOptions {
        trials: a.trials,
        seed: a.seed,
        bound_ms: a.bound_m.clone().unwrap_or(d.bound_ms),
        rhos: a.rho.clone().unwrap_or(d.rhos),
        gammas: a.gamma.clone().unwrap_or(d.gammas),
        order_ms: a.order_m.clone().unwrap_or(d.order_ms),
        families: a.family.clone().unwrap_or(d.families),
        negative: a.negative,
    };
    if opts.bound_ms.iter().chain(&opts.order_ms).any(|&m| m < 2) {
        return Err(UsageError("class counts must be >= 2".into()).into());
    }
    if let Some(g) = opts.gammas.iter().find(|g| g.is_nan() || **g <= 0.0 || g.is_infinite()) {
        return Err(UsageError(format!("gamma must be positive, got {g}")).into());
    }
    let report = run_verification(&opts);

    for b in &report.confidence_bounds {
        let head = format!("bounds m={} rho={} gamma={}", b.m, num(b.rho), num(b.gamma));
        if b.supported {
            println!(
                "{head}: [{}, {}] violations={} extreme-point gap={}",
                b.lower.map_or("-".into(), num),
                b.upper.map_or("-".into(), num),
                b.violations,
                b.extreme_point_gap.map_or("-".into(), num),
            );
        } else {
            println!("{head}: {}", b.note.as_deref().unwrap_or("unsupported"));
        }
    }
    for o in &report.order_preservation {
        let verdict = match (o.expect_violations, o.passed()) {
            (false, true) => "ok",
            (false, false) => "FAILED",
            (true, true) => "ok (violation expected and found)",
            (true, false) => "FAILED (expected a violation)",
        };
        println!(
            "order {} m={} trials={}: violations={} {verdict}",
            o.family.as_str(),
            o.m,
            o.trials,
            o.violations
        );
    }
    if opts.families.contains(&Family::Vector) || opts.negative {
        println!(
            "vector scaling is not order-preserving; its checks pass when a violation is found"
        );
    }
    if let Some(path) = &a.report {
        io::save_json(&report, path)?;
    }
    if report.passed {
        println!("PASSED");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAILED");
        Ok(ExitCode::from(1))
    }
}
