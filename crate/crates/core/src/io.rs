//! Datasets on disk, deterministic splits, and spec/report files.
//!
//! Logit CSV is `z_0,…,z_{m-1},label` with an optional header; JSONL holds
//! one `{"logits": [...], "label": k}` object per line. Spec files wrap a
//! [`CalibratorSpec`] as `{"method", "params", "fitted_on", "version"}`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibrators::{
    CalibratorSpec, HistogramBins, RhoNormParams, TemperatureParams, VectorParams,
};
use crate::error::{CalibError, Result};
use crate::numeric::LogitDataset;
use crate::report::CalibrationReport;

pub const SPEC_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Jsonl,
}

impl DatasetFormat {
    /// `.jsonl` / `.ndjson` are JSONL, anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext)
                if ext.eq_ignore_ascii_case("jsonl") || ext.eq_ignore_ascii_case("ndjson") =>
            {
                DatasetFormat::Jsonl
            }
            _ => DatasetFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub path: PathBuf,
    pub format: DatasetFormat,
    /// Declared class count; inferred from the first row when `None`.
    pub class_count: Option<usize>,
}

impl DatasetFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let format = DatasetFormat::from_path(&path);
        Self {
            path,
            format,
            class_count: None,
        }
    }
}

/// Accumulates rows and enforces the shape rules with line numbers.
struct RowSink<'a> {
    path: &'a Path,
    width: Option<usize>,
    logits: Vec<f64>,
    labels: Vec<usize>,
}

impl<'a> RowSink<'a> {
    fn err(&self, line: u64, message: impl Into<String>) -> CalibError {
        CalibError::Parse {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn push(&mut self, line: u64, logits: &[f64], label: f64) -> Result<()> {
        let m = *self.width.get_or_insert(logits.len());
        if logits.len() != m {
            return Err(self.err(
                line,
                format!("row has {} logits, expected {m}", logits.len()),
            ));
        }
        if m < 2 {
            return Err(self.err(line, format!("need at least 2 classes, got {m}")));
        }
        if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
            return Err(self.err(line, format!("non-finite logit {v}")));
        }
        if !(label >= 0.0) || label.fract() != 0.0 || label > usize::MAX as f64 {
            return Err(self.err(line, format!("label {label} is not a non-negative integer")));
        }
        let label = label as usize;
        if label >= m {
            return Err(self.err(line, format!("label {label} out of range for {m} classes")));
        }
        self.logits.extend_from_slice(logits);
        self.labels.push(label);
        Ok(())
    }

    fn finish(self) -> Result<LogitDataset> {
        let Some(m) = self.width else {
            return Err(CalibError::InvalidInput(format!(
                "{} contains no data rows",
                self.path.display()
            )));
        };
        let n = self.labels.len();
        let logits = ndarray::Array2::from_shape_vec((n, m), self.logits)
            .map_err(|e| CalibError::InvalidInput(e.to_string()))?;
        LogitDataset::new(logits, self.labels)
    }
}

fn load_csv(file: &DatasetFile, sink: &mut RowSink<'_>) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(&file.path)
        .map_err(|e| csv_error(&file.path, e))?;
    let mut first = true;
    let mut cells = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&file.path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        cells.clear();
        let mut bad = None;
        for cell in record.iter() {
            match cell.parse::<f64>() {
                Ok(v) => cells.push(v),
                Err(_) => {
                    bad = Some(cell.to_string());
                    break;
                }
            }
        }
        let was_first = std::mem::replace(&mut first, false);
        if let Some(cell) = bad {
            if was_first {
                // Header line.
                continue;
            }
            return Err(sink.err(line, format!("non-numeric cell '{cell}'")));
        }
        if cells.len() < 2 {
            return Err(sink.err(line, "row needs logits and a label"));
        }
        let (label, logits) = cells.split_last().expect("len checked");
        sink.push(line, logits, *label)?;
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> CalibError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CalibError::io(path, source),
        other => CalibError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

#[derive(Deserialize)]
struct JsonRow {
    logits: Vec<f64>,
    label: f64,
}

fn load_jsonl(file: &DatasetFile, sink: &mut RowSink<'_>) -> Result<()> {
    let text = fs::read_to_string(&file.path).map_err(|e| CalibError::io(&file.path, e))?;
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(raw)
            .map_err(|e| sink.err(line, format!("invalid JSON row: {e}")))?;
        sink.push(line, &row.logits, row.label)?;
    }
    Ok(())
}

/// Loads a dataset, preserving row order. Shape and label errors carry the
/// 1-based line number of the offending row.
pub fn load_dataset(file: &DatasetFile) -> Result<LogitDataset> {
    let mut sink = RowSink {
        path: &file.path,
        width: file.class_count,
        logits: Vec::new(),
        labels: Vec::new(),
    };
    match file.format {
        DatasetFormat::Csv => load_csv(file, &mut sink)?,
        DatasetFormat::Jsonl => load_jsonl(file, &mut sink)?,
    }
    sink.finish()
}

/// Writes a dataset; floats use the shortest representation that parses
/// back to the same `f64`.
pub fn save_dataset(ds: &LogitDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| CalibError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let m = ds.class_count();
    let io_err = |e| CalibError::io(path, e);
    match format {
        DatasetFormat::Csv => {
            let header: Vec<String> = (0..m).map(|j| format!("z_{j}")).collect();
            writeln!(w, "{},label", header.join(",")).map_err(io_err)?;
            for i in 0..ds.len() {
                for v in ds.row_slice(i) {
                    write!(w, "{v},").map_err(io_err)?;
                }
                writeln!(w, "{}", ds.labels()[i]).map_err(io_err)?;
            }
        }
        DatasetFormat::Jsonl => {
            for i in 0..ds.len() {
                let row = json!({"logits": ds.row_slice(i), "label": ds.labels()[i]});
                writeln!(w, "{row}").map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Seeded shuffle, then the first `⌊fraction·N⌋` rows become the validation
/// side and the rest the test side.
pub fn split(
    ds: &LogitDataset,
    validation_fraction: f64,
    seed: u64,
) -> Result<(LogitDataset, LogitDataset)> {
    let n = ds.len();
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(CalibError::InvalidParameter(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    let n_val = (validation_fraction * n as f64).floor() as usize;
    if n_val == 0 || n_val >= n {
        return Err(CalibError::InvalidParameter(format!(
            "fraction {validation_fraction} of {n} rows leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((ds.select(&order[..n_val])?, ds.select(&order[n_val..])?))
}

/// Where a calibrator was fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FittedOn {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecDocument {
    pub spec: CalibratorSpec,
    pub fitted_on: FittedOn,
}

impl SpecDocument {
    pub fn to_json(&self) -> Value {
        let params = match &self.spec {
            CalibratorSpec::RhoNorm(p) => serde_json::to_value(p),
            CalibratorSpec::Temperature(p) => serde_json::to_value(p),
            CalibratorSpec::Vector(p) => serde_json::to_value(p),
            CalibratorSpec::Histogram(p) => serde_json::to_value(p),
        }
        .expect("parameter structs serialize");
        json!({
            "method": self.spec.method_name(),
            "params": params,
            "fitted_on": self.fitted_on,
            "version": SPEC_VERSION,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| CalibError::Schema("spec must be a JSON object".into()))?;
        match obj.get("version").and_then(Value::as_u64) {
            Some(SPEC_VERSION) => {}
            other => {
                return Err(CalibError::Schema(format!(
                    "unsupported spec version {other:?}, expected {SPEC_VERSION}"
                )))
            }
        }
        let method = obj
            .get("method")
            .and_then(Value::as_str)
            .ok_or_else(|| CalibError::Schema("missing string field 'method'".into()))?;
        let params = obj
            .get("params")
            .cloned()
            .ok_or_else(|| CalibError::Schema("missing field 'params'".into()))?;
        let bad = |e: serde_json::Error| CalibError::Schema(format!("{method} params: {e}"));
        let spec = match method {
            "rho_norm" => CalibratorSpec::RhoNorm(
                serde_json::from_value::<RhoNormParams>(params).map_err(bad)?,
            ),
            "temperature" => CalibratorSpec::Temperature(
                serde_json::from_value::<TemperatureParams>(params).map_err(bad)?,
            ),
            "vector" => {
                CalibratorSpec::Vector(serde_json::from_value::<VectorParams>(params).map_err(bad)?)
            }
            "histogram" => CalibratorSpec::Histogram(
                serde_json::from_value::<HistogramBins>(params).map_err(bad)?,
            ),
            other => {
                return Err(CalibError::Schema(format!(
                    "unknown method '{other}' (expected rho_norm, temperature, vector or histogram)"
                )))
            }
        };
        spec.validate()
            .map_err(|e| CalibError::Schema(format!("{method} params: {e}")))?;
        let fitted_on = obj
            .get("fitted_on")
            .cloned()
            .ok_or_else(|| CalibError::Schema("missing field 'fitted_on'".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| CalibError::Schema(format!("fitted_on: {e}")))
            })?;
        Ok(Self { spec, fitted_on })
    }
}

fn write_json(value: &Value, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| CalibError::io(path, e))
}

pub fn save_spec(doc: &SpecDocument, path: &Path) -> Result<()> {
    write_json(&doc.to_json(), path)
}

pub fn load_spec_document(path: &Path) -> Result<SpecDocument> {
    let text = fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CalibError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    SpecDocument::from_json(&value)
}

pub fn load_spec(path: &Path) -> Result<CalibratorSpec> {
    Ok(load_spec_document(path)?.spec)
}

pub fn save_report(report: &CalibrationReport, path: &Path) -> Result<()> {
    let value = serde_json::to_value(report)
        .map_err(|e| CalibError::Schema(format!("report serialization: {e}")))?;
    write_json(&value, path)
}

/// Writes any serializable value as pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let value = serde_json::to_value(value)
        .map_err(|e| CalibError::Schema(format!("serialization: {e}")))?;
    write_json(&value, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrators::Calibrator;
    use crate::synth::{generate, SynthConfig};
    use proptest::prelude::*;
    use tempfile::TempDir;

    fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn csv_basic_and_header() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "a.csv", "z_0,z_1,label\n1.0,2.0,0\r\n-0.5,3,1\n");
        let ds = load_dataset(&DatasetFile::new(&p)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.row_slice(0), &[1.0, 2.0]);
        assert_eq!(ds.labels(), &[0, 1]);
        let p = write(&dir, "b.csv", "1.0,2.0,0\n");
        let ds = load_dataset(&DatasetFile::new(&p)).unwrap();
        assert_eq!(ds.row_slice(0), &[1.0, 2.0]);
    }

    fn parse_line(result: Result<LogitDataset>) -> u64 {
        match result {
            Err(CalibError::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "range.csv", "z_0,z_1,label\n1.0,2.0,0\n1.0,2.0,5\n");
        assert_eq!(parse_line(load_dataset(&DatasetFile::new(&p))), 3);
        let p = write(&dir, "ragged.csv", "1.0,2.0,0\n1.0,2.0,3.0,1\n");
        assert_eq!(parse_line(load_dataset(&DatasetFile::new(&p))), 2);
        let p = write(&dir, "text.csv", "1.0,2.0,0\n1.0,abc,1\n");
        assert_eq!(parse_line(load_dataset(&DatasetFile::new(&p))), 2);
        let p = write(&dir, "frac.csv", "1.0,2.0,0.5\n");
        assert_eq!(parse_line(load_dataset(&DatasetFile::new(&p))), 1);
        let declared = DatasetFile {
            class_count: Some(3),
            ..DatasetFile::new(write(&dir, "decl.csv", "1.0,2.0,0\n"))
        };
        assert_eq!(parse_line(load_dataset(&declared)), 1);
    }

    #[test]
    fn jsonl_matches_csv() {
        let dir = TempDir::new().unwrap();
        let c = write(
            &dir,
            "a.csv",
            "z_0,z_1,z_2,label\n1.5,-2,0.25,2\n0,0,1e-3,0\n",
        );
        let j = write(
            &dir,
            "a.jsonl",
            "{\"logits\": [1.5, -2, 0.25], \"label\": 2}\n\n{\"logits\": [0, 0, 0.001], \"label\": 0}\n",
        );
        assert_eq!(
            load_dataset(&DatasetFile::new(&c)).unwrap(),
            load_dataset(&DatasetFile::new(&j)).unwrap()
        );
        let bad = write(
            &dir,
            "bad.jsonl",
            "{\"logits\": [1, 2], \"label\": 0}\n{\"logits\": [1]}\n",
        );
        assert_eq!(parse_line(load_dataset(&DatasetFile::new(&bad))), 2);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let ds = generate(&SynthConfig {
            sample_count: 300,
            class_count: 4,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = TempDir::new().unwrap();
        for format in [DatasetFormat::Csv, DatasetFormat::Jsonl] {
            let ext = if format == DatasetFormat::Csv {
                "csv"
            } else {
                "jsonl"
            };
            let p = dir.path().join(format!("d.{ext}"));
            save_dataset(&ds, &p, format).unwrap();
            assert_eq!(load_dataset(&DatasetFile::new(&p)).unwrap(), ds);
        }
    }

    fn numbered(n: usize) -> LogitDataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 0.0]).collect();
        LogitDataset::from_rows(&rows, vec![0; n]).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = numbered(10);
        let (v, t) = split(&ds, 0.5, 1).unwrap();
        assert_eq!((v.len(), t.len()), (5, 5));
        let (v2, t2) = split(&ds, 0.5, 1).unwrap();
        assert_eq!((v, t), (v2, t2));
        let (v, t) = split(&ds, 0.999, 1).unwrap();
        assert_eq!((v.len(), t.len()), (9, 1));
        assert!(split(&ds, 0.05, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
        assert!(split(&numbered(1), 0.5, 1).is_err());
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let ds = numbered(37);
        let (v, t) = split(&ds, 0.3, 9).unwrap();
        let mut seen: Vec<usize> = (0..v.len())
            .map(|i| v.row_slice(i)[0] as usize)
            .chain((0..t.len()).map(|i| t.row_slice(i)[0] as usize))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
    }

    fn all_specs() -> Vec<CalibratorSpec> {
        vec![
            CalibratorSpec::RhoNorm(
                RhoNormParams::new(1.75, 0.123_456_789_012_345_67, -0.987_654_321).unwrap(),
            ),
            CalibratorSpec::Temperature(TemperatureParams::new(2.345_678_901_234_567_8).unwrap()),
            CalibratorSpec::Vector(VectorParams {
                weights: vec![1.1, 0.1 + 0.2, -3e-300],
                biases: vec![0.0, -1.0 / 3.0, 7.0],
            }),
            CalibratorSpec::Histogram(HistogramBins {
                edges: vec![0.0, 0.5, 1.0],
                bin_values: vec![0.3, 0.9],
            }),
        ]
    }

    #[test]
    fn spec_round_trip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let probe = generate(&SynthConfig {
            sample_count: 50,
            class_count: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        for spec in all_specs() {
            let doc = SpecDocument {
                spec: spec.clone(),
                fitted_on: FittedOn {
                    n: 50,
                    m: 3,
                    seed: 1,
                },
            };
            let p = dir.path().join("spec.json");
            save_spec(&doc, &p).unwrap();
            let back = load_spec_document(&p).unwrap();
            assert_eq!(back, doc);
            let a = spec.calibrate_dataset(&probe).unwrap();
            let b = back.spec.calibrate_dataset(&probe).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn spec_errors_are_descriptive() {
        let v = json!({"method": "platt", "params": {}, "fitted_on": {"n": 1, "m": 2, "seed": 0}, "version": 1});
        let err = SpecDocument::from_json(&v).unwrap_err().to_string();
        assert!(err.contains("platt"), "{err}");
        let v = json!({"method": "temperature", "params": {"temperature": -1.0}, "fitted_on": {"n": 1, "m": 2, "seed": 0}, "version": 1});
        assert!(matches!(
            SpecDocument::from_json(&v),
            Err(CalibError::Schema(_))
        ));
        let v = json!({"method": "temperature", "params": {"temperature": 1.0}, "fitted_on": {"n": 1, "m": 2, "seed": 0}, "version": 2});
        assert!(SpecDocument::from_json(&v)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let v = json!({"method": "rho_norm", "params": {"rho": 2.0}, "fitted_on": {"n": 1, "m": 2, "seed": 0}, "version": 1});
        assert!(SpecDocument::from_json(&v)
            .unwrap_err()
            .to_string()
            .contains("rho_norm"));
    }

    proptest! {
        #[test]
        fn rho_spec_json_round_trip(rho in 1.0..3.0f64, g in -10.0..10.0f64, b in -10.0..10.0f64, n in 1usize..1000, seed in any::<u64>()) {
            let doc = SpecDocument {
                spec: CalibratorSpec::RhoNorm(RhoNormParams::new(rho, g, b).unwrap()),
                fitted_on: FittedOn { n, m: 4, seed },
            };
            let text = serde_json::to_string(&doc.to_json()).unwrap();
            let back = SpecDocument::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
            prop_assert_eq!(back, doc);
        }
    }
}
