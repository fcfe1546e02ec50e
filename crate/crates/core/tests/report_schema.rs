//! Serialized reports must match `docs/report.schema.json`.
//!
//! The validator covers the keywords the schema uses: `type`, `required`,
//! `properties`, `additionalProperties: false`, `items`, `minimum`,
//! `maximum` and local `$ref`.

use std::path::PathBuf;

use calib_core::calibrators::Uncalibrated;
use calib_core::io::save_report;
use calib_core::optimizer::{fit_temperature, FitConfig};
use calib_core::report::evaluate;
use calib_core::synth::{generate, SynthConfig};
use serde_json::{json, Value};

fn schema() -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/report.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn resolve<'a>(root: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let pointer = r.strip_prefix('#').expect("local refs only");
            root.pointer(pointer)
                .unwrap_or_else(|| panic!("dangling $ref {r}"))
        }
        None => node,
    }
}

fn type_ok(ty: &str, v: &Value) -> bool {
    match ty {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        other => panic!("unsupported type keyword {other}"),
    }
}

fn check(root: &Value, node: &Value, v: &Value, at: &str, errors: &mut Vec<String>) {
    let node = resolve(root, node);
    if let Some(ty) = node.get("type").and_then(Value::as_str) {
        if !type_ok(ty, v) {
            errors.push(format!("{at}: expected {ty}, got {v}"));
            return;
        }
    }
    if let (Some(min), Some(x)) = (node.get("minimum").and_then(Value::as_f64), v.as_f64()) {
        if x < min {
            errors.push(format!("{at}: {x} < minimum {min}"));
        }
    }
    if let (Some(max), Some(x)) = (node.get("maximum").and_then(Value::as_f64), v.as_f64()) {
        if x > max {
            errors.push(format!("{at}: {x} > maximum {max}"));
        }
    }
    if let Some(obj) = v.as_object() {
        let props = node.get("properties").and_then(Value::as_object);
        for req in node
            .get("required")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            let key = req.as_str().unwrap();
            if !obj.contains_key(key) {
                errors.push(format!("{at}: missing required '{key}'"));
            }
        }
        for (key, child) in obj {
            match props.and_then(|p| p.get(key)) {
                Some(sub) => check(root, sub, child, &format!("{at}.{key}"), errors),
                None if node.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    errors.push(format!("{at}: unexpected property '{key}'"))
                }
                None => {}
            }
        }
    }
    if let (Some(items), Some(arr)) = (node.get("items"), v.as_array()) {
        for (i, child) in arr.iter().enumerate() {
            check(root, items, child, &format!("{at}[{i}]"), errors);
        }
    }
}

fn violations(v: &Value) -> Vec<String> {
    let root = schema();
    let mut errors = Vec::new();
    check(&root, &root, v, "$", &mut errors);
    errors
}

fn sample_report_json(extras: Value) -> Value {
    let ds = generate(&SynthConfig {
        sample_count: 2000,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let ts = fit_temperature(&ds, &FitConfig::default()).unwrap();
    let mut r = evaluate(
        "temperature",
        json!({"temperature": ts.temperature}),
        &ts,
        &ds,
        10,
        json!({"bins": 10}),
    )
    .unwrap();
    r.extras = extras;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    save_report(&r, &path).unwrap();
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn written_report_conforms() {
    let v = sample_report_json(json!({"fitted_on": {"n": 2000, "m": 10, "seed": 0}}));
    assert_eq!(violations(&v), Vec::<String>::new());
}

#[test]
fn report_without_extras_conforms() {
    let v = sample_report_json(Value::Null);
    assert!(v.get("extras").is_none());
    assert!(violations(&v).is_empty());
}

#[test]
fn uncalibrated_report_conforms() {
    let ds = generate(&SynthConfig {
        sample_count: 500,
        class_count: 3,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let r = evaluate(
        "uncalibrated",
        Value::Null,
        &Uncalibrated,
        &ds,
        15,
        Value::Null,
    )
    .unwrap();
    assert!(violations(&serde_json::to_value(&r).unwrap()).is_empty());
}

#[test]
fn validator_rejects_broken_reports() {
    let good = sample_report_json(Value::Null);

    let mut missing = good.clone();
    missing.as_object_mut().unwrap().remove("metrics");
    assert!(violations(&missing).iter().any(|e| e.contains("metrics")));

    let mut negative = good.clone();
    negative["metrics"]["ece"] = json!(-0.1);
    assert!(violations(&negative).iter().any(|e| e.contains("minimum")));

    let mut fractional = good.clone();
    fractional["bins"][0]["count"] = json!(1.5);
    assert!(violations(&fractional)
        .iter()
        .any(|e| e.contains("integer")));

    let mut extra = good;
    extra["metrics"]["bogus"] = json!(1);
    assert!(violations(&extra).iter().any(|e| e.contains("bogus")));
}
