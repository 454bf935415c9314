//! Aggregation of run artifacts into tables and charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use crate::svg::{bar_chart, line_chart, Bar, Series};

/// Artifact file names recognized inside run directories.
pub const ABLATION_FILE: &str = "ablation.json";
pub const BIAS_FILE: &str = "bias.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

/// Parsed artifacts, each tagged with the file it came from.
#[derive(Default)]
pub struct Collection {
    pub ablations: Vec<(PathBuf, Value)>,
    pub bias: Vec<(PathBuf, Value)>,
    pub sweeps: Vec<(PathBuf, Value)>,
    pub runs: Vec<(PathBuf, Value)>,
}

impl Collection {
    pub fn is_empty(&self) -> bool {
        self.ablations.is_empty()
            && self.bias.is_empty()
            && self.sweeps.is_empty()
            && self.runs.is_empty()
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Every recognized artifact under `roots`, searched two directory levels
/// deep, in sorted path order.
pub fn collect(roots: &[PathBuf]) -> Result<Collection> {
    let mut files = Vec::new();
    for root in roots {
        if root.is_file() {
            files.push(root.clone());
            continue;
        }
        walk(root, 2, &mut files)?;
    }
    files.sort();
    files.dedup();
    let mut c = Collection::default();
    for f in files {
        let slot = match f.file_name().and_then(|n| n.to_str()) {
            Some(ABLATION_FILE) => &mut c.ablations,
            Some(BIAS_FILE) => &mut c.bias,
            Some(SWEEP_FILE) => &mut c.sweeps,
            Some(REPORT_FILE) => &mut c.runs,
            _ => continue,
        };
        let v = read_json(&f)?;
        slot.push((f, v));
    }
    Ok(c)
}

fn walk(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for e in entries {
        let p = e?.path();
        if p.is_dir() {
            if depth > 0 {
                walk(&p, depth - 1, out)?;
            }
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn num(v: &Value) -> String {
    v.as_f64().map(|x| x.to_string()).unwrap_or_default()
}

fn text(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    };
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn ablation_rows(c: &Collection) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (_, t) in &c.ablations {
        let datasets = t["datasets"].as_array().cloned().unwrap_or_default();
        for row in t["rows"].as_array().into_iter().flatten() {
            for (i, rep) in row["reports"].as_array().into_iter().flatten().enumerate() {
                rows.push(vec![
                    text(datasets.get(i).unwrap_or(&Value::Null)),
                    text(&row["label"]),
                    text(&row["method"]),
                    text(&row["vie"]),
                    text(&row["cect"]),
                    num(&rep["auc"]["mean"]),
                    num(&rep["auc"]["std"]),
                    num(&rep["nll"]["mean"]),
                    num(&rep["nll"]["std"]),
                    num(&rep["mean_bias"]["mean"]),
                    num(&rep["mean_bias"]["std"]),
                ]);
            }
        }
    }
    rows
}

fn bias_rows(c: &Collection, key: &str, metric: &str) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (_, b) in &c.bias {
        for e in b[key].as_array().into_iter().flatten() {
            rows.push(vec![
                text(&b["dataset"]),
                text(&e["label"]),
                text(&e["method"]),
                num(&e[metric]["mean"]),
                num(&e[metric]["std"]),
            ]);
        }
    }
    rows
}

fn sweep_rows(c: &Collection) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (_, g) in &c.sweeps {
        for cell in g["cells"].as_array().into_iter().flatten() {
            rows.push(vec![
                text(&g["dataset"]),
                num(&cell["lambda_i"]),
                text(&cell["transfer_layers"]),
                num(&cell["auc"]["mean"]),
                num(&cell["auc"]["std"]),
            ]);
        }
    }
    rows
}

fn run_rows(c: &Collection) -> Vec<Vec<String>> {
    c.runs
        .iter()
        .map(|(path, r)| {
            vec![
                text(&Value::String(path.display().to_string())),
                text(&r["method"]),
                text(&r["dataset"]),
                text(&r["seed"]),
                text(&r["epoch"]),
                num(&r["auc"]),
                num(&r["nll"]),
                num(&r["mean_bias"]),
                num(&r["teacher_nonclick_logloss"]),
                num(&r["ctr_auc"]),
            ]
        })
        .collect()
}

/// Writes the requested outputs into `out`; returns the files written.
pub fn emit(c: &Collection, out: &Path, format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files: Vec<(String, String)> = Vec::new();
    match format {
        Format::Csv => {
            if !c.ablations.is_empty() {
                let header = [
                    "dataset",
                    "label",
                    "method",
                    "vie",
                    "cect",
                    "auc_mean",
                    "auc_std",
                    "nll_mean",
                    "nll_std",
                    "mean_bias_mean",
                    "mean_bias_std",
                ];
                files.push(("ablation.csv".into(), table(&header, &ablation_rows(c))));
            }
            if !c.bias.is_empty() {
                let teachers = bias_rows(c, "teachers", "nonclick_logloss");
                let students = bias_rows(c, "students", "mean_bias");
                files.push((
                    "bias_teachers.csv".into(),
                    table(
                        &[
                            "dataset",
                            "label",
                            "method",
                            "nonclick_logloss_mean",
                            "nonclick_logloss_std",
                        ],
                        &teachers,
                    ),
                ));
                files.push((
                    "bias_students.csv".into(),
                    table(
                        &[
                            "dataset",
                            "label",
                            "method",
                            "mean_bias_mean",
                            "mean_bias_std",
                        ],
                        &students,
                    ),
                ));
            }
            if !c.sweeps.is_empty() {
                let header = [
                    "dataset",
                    "lambda_i",
                    "transfer_layers",
                    "auc_mean",
                    "auc_std",
                ];
                files.push(("sweep.csv".into(), table(&header, &sweep_rows(c))));
            }
            if !c.runs.is_empty() {
                let header = [
                    "source",
                    "method",
                    "dataset",
                    "seed",
                    "epoch",
                    "auc",
                    "nll",
                    "mean_bias",
                    "teacher_nonclick_logloss",
                    "ctr_auc",
                ];
                files.push(("runs.csv".into(), table(&header, &run_rows(c))));
            }
        }
        Format::Json => {
            let strip =
                |v: &[(PathBuf, Value)]| v.iter().map(|(_, x)| x.clone()).collect::<Vec<_>>();
            let summary = json!({
                "ablation": strip(&c.ablations),
                "bias": strip(&c.bias),
                "sweep": strip(&c.sweeps),
                "runs": strip(&c.runs),
            });
            files.push((
                "summary.json".into(),
                serde_json::to_string_pretty(&summary)? + "\n",
            ));
        }
        Format::Svg => files.extend(charts(c)),
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let p = out.join(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        written.push(p);
    }
    Ok(written)
}

fn suffix(i: usize, n: usize) -> String {
    if n > 1 {
        format!("_{}", i + 1)
    } else {
        String::new()
    }
}

fn bars(entries: &Value, metric: &str) -> Vec<Bar> {
    entries
        .as_array()
        .into_iter()
        .flatten()
        .map(|e| Bar {
            label: e["label"].as_str().unwrap_or("?").to_string(),
            value: e[metric]["mean"].as_f64().unwrap_or(f64::NAN),
            spread: e[metric]["std"].as_f64(),
        })
        .collect()
}

fn charts(c: &Collection) -> Vec<(String, String)> {
    let mut files = Vec::new();
    for (i, (_, b)) in c.bias.iter().enumerate() {
        let sfx = suffix(i, c.bias.len());
        let ds = b["dataset"].as_str().unwrap_or("");
        files.push((
            format!("teacher_logloss{sfx}.svg"),
            bar_chart(
                &format!("Teacher log loss on non-clicked impressions ({ds})"),
                "log loss",
                &bars(&b["teachers"], "nonclick_logloss"),
            ),
        ));
        files.push((
            format!("mean_bias{sfx}.svg"),
            bar_chart(
                &format!("Student mean bias ({ds})"),
                "mean |bias|",
                &bars(&b["students"], "mean_bias"),
            ),
        ));
    }
    for (i, (_, g)) in c.sweeps.iter().enumerate() {
        let sfx = suffix(i, c.sweeps.len());
        let cells = g["cells"].as_array().cloned().unwrap_or_default();
        let series: Vec<Series> = g["layer_counts"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(Value::as_u64)
            .map(|k| Series {
                label: format!("K = {k}"),
                points: cells
                    .iter()
                    .filter(|cell| cell["transfer_layers"].as_u64() == Some(k))
                    .map(|cell| {
                        (
                            cell["lambda_i"].as_f64().unwrap_or(f64::NAN),
                            cell["auc"]["mean"].as_f64().unwrap_or(f64::NAN),
                        )
                    })
                    .collect(),
            })
            .collect();
        let ds = g["dataset"].as_str().unwrap_or("");
        files.push((
            format!("sweep{sfx}.svg"),
            line_chart(
                &format!("AUC against VIE ratio ({ds})"),
                "lambda_i",
                "AUC",
                &series,
            ),
        ));
    }
    for (i, (_, t)) in c.ablations.iter().enumerate() {
        let sfx = suffix(i, c.ablations.len());
        let datasets = t["datasets"].as_array().cloned().unwrap_or_default();
        for (d, name) in datasets.iter().enumerate() {
            let name = name.as_str().unwrap_or("");
            let bars: Vec<Bar> = t["rows"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|row| Bar {
                    label: row["label"].as_str().unwrap_or("?").to_string(),
                    value: row["reports"][d]["auc"]["mean"]
                        .as_f64()
                        .unwrap_or(f64::NAN),
                    spread: row["reports"][d]["auc"]["std"].as_f64(),
                })
                .collect();
            let mut file = format!("ablation{sfx}");
            if datasets.len() > 1 {
                let safe: String = name
                    .chars()
                    .map(|ch| {
                        if ch.is_ascii_alphanumeric() || ch == '-' {
                            ch
                        } else {
                            '_'
                        }
                    })
                    .collect();
                let _ = write!(file, "_{safe}");
            }
            file.push_str(".svg");
            files.push((
                file,
                bar_chart(&format!("Ablation AUC ({name})"), "AUC", &bars),
            ));
        }
    }
    files
}
