//! Ablation, teacher-bias and sensitivity studies.
//!
//! Each study is a set of multi-seed runs. Runs are memoized in a
//! [`RunCache`] keyed by dataset and configuration, so studies that share
//! configurations (the ablation's full-EVI row and the bias study's EVI
//! student, say) train them once.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::Dataset;

use super::{
    compare, run_multi_seed, Comparison, Method, MultiSeedReport, Summary, TrainConfig, TrainError,
};

/// A named train/eval pair.
#[derive(Clone, Copy)]
pub struct StudyDataset<'a> {
    pub name: &'a str,
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
}

/// Memoized multi-seed results.
#[derive(Default)]
pub struct RunCache {
    runs: BTreeMap<String, MultiSeedReport>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Runs (or recalls) `cfg` over `seeds` on `ds`.
    pub fn get(
        &mut self,
        ds: StudyDataset<'_>,
        cfg: &TrainConfig,
        seeds: &[u64],
    ) -> Result<MultiSeedReport, TrainError> {
        let mut keyed = cfg.clone();
        keyed.seed = 0;
        let key = format!("{}|{:?}|{}", ds.name, seeds, keyed.to_kv());
        if let Some(r) = self.runs.get(&key) {
            return Ok(r.clone());
        }
        let report = run_multi_seed(ds.train, (ds.name, ds.eval), cfg, seeds, |_, _| Ok(()))?;
        self.runs.insert(key, report.clone());
        Ok(report)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub method: String,
    pub vie: bool,
    pub cect: bool,
    /// One multi-seed report per dataset, in table column order.
    pub reports: Vec<MultiSeedReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub datasets: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// The three ablation rows: no VIE and no conditioned teacher, no VIE, full EVI.
pub fn run_ablation(
    datasets: &[StudyDataset<'_>],
    cfg: &TrainConfig,
    seeds: &[u64],
    cache: &mut RunCache,
) -> Result<AblationTable, TrainError> {
    let variants = [
        ("EVI w/o VIE CECT", Method::EviNoVieCect, false, false),
        ("EVI w/o VIE", Method::EviNoVie, false, true),
        ("EVI", Method::Evi, true, true),
    ];
    let mut rows = Vec::with_capacity(3);
    for (label, method, vie, cect) in variants {
        let run_cfg = TrainConfig {
            method,
            ..cfg.clone()
        };
        let reports = datasets
            .iter()
            .map(|&ds| cache.get(ds, &run_cfg, seeds))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(AblationRow {
            label: label.to_string(),
            method: method.name().to_string(),
            vie,
            cect,
            reports,
        });
    }
    Ok(AblationTable {
        datasets: datasets.iter().map(|d| d.name.to_string()).collect(),
        rows,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TeacherEntry {
    pub label: String,
    pub method: String,
    pub nonclick_logloss: Summary,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudentEntry {
    pub label: String,
    pub method: String,
    pub mean_bias: Summary,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BiasStudy {
    pub dataset: String,
    pub teachers: Vec<TeacherEntry>,
    pub students: Vec<StudentEntry>,
    /// Conditional teacher against the naive click-space teacher, on non-click log loss.
    pub teacher_comparison: Comparison,
}

/// Teacher non-click log loss for the click-space (DDPO-style), entire-space
/// and conditional teachers, and student mean bias for DDPO, EVI w/o VIE and
/// EVI. Needs oracle labels on the eval set.
pub fn run_bias_study(
    ds: StudyDataset<'_>,
    cfg: &TrainConfig,
    seeds: &[u64],
    cache: &mut RunCache,
) -> Result<BiasStudy, TrainError> {
    if !ds.eval.has_oracle() {
        return Err(TrainError::Config(
            "bias study needs counterfactual oracle labels on the eval set".into(),
        ));
    }
    let mut run = |method: Method| {
        let c = TrainConfig {
            method,
            ..cfg.clone()
        };
        cache.get(ds, &c, seeds)
    };
    let ddpo = run(Method::Ddpo)?;
    let entire = run(Method::EntireDistill)?;
    let no_vie = run(Method::EviNoVie)?;
    let evi = run(Method::Evi)?;

    let teacher = |label: &str, r: &MultiSeedReport| {
        let per_seed = r.values(|m| m.teacher_nonclick_logloss.unwrap_or(f64::NAN));
        TeacherEntry {
            label: label.to_string(),
            method: r.method.clone(),
            nonclick_logloss: Summary::of(&per_seed),
            per_seed,
        }
    };
    let student = |label: &str, r: &MultiSeedReport| {
        let per_seed = r.values(|m| m.mean_bias);
        StudentEntry {
            label: label.to_string(),
            method: r.method.clone(),
            mean_bias: Summary::of(&per_seed),
            per_seed,
        }
    };
    let teacher_comparison = compare(&evi, &ddpo, "teacher_nonclick_logloss", |m| {
        m.teacher_nonclick_logloss.unwrap_or(f64::NAN)
    })?;
    Ok(BiasStudy {
        dataset: ds.name.to_string(),
        teachers: vec![
            teacher("click-space teacher (DDPO)", &ddpo),
            teacher("entire-space teacher", &entire),
            teacher("conditional teacher (EVI)", &evi),
        ],
        students: vec![
            student("DDPO", &ddpo),
            student("EVI w/o VIE", &no_vie),
            student("EVI", &evi),
        ],
        teacher_comparison,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepCell {
    pub lambda_i: f64,
    pub transfer_layers: usize,
    pub auc: Summary,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepGrid {
    pub dataset: String,
    pub vie_ratios: Vec<f64>,
    pub layer_counts: Vec<usize>,
    /// Row-major over `vie_ratios × layer_counts`.
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, lambda_i: f64, layers: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.lambda_i == lambda_i && c.transfer_layers == layers)
    }
}

/// Full-EVI AUC over the grid `vie_ratios × layer_counts`.
pub fn run_sweep(
    ds: StudyDataset<'_>,
    cfg: &TrainConfig,
    vie_ratios: &[f64],
    layer_counts: &[usize],
    seeds: &[u64],
    cache: &mut RunCache,
) -> Result<SweepGrid, TrainError> {
    if let Some(k) = layer_counts.iter().find(|k| !(1..=3).contains(*k)) {
        return Err(TrainError::Config(format!(
            "transfer layer count must be 1, 2 or 3, got {k}"
        )));
    }
    if let Some(r) = vie_ratios.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(TrainError::Config(format!(
            "VIE ratio must be finite and >= 0, got {r}"
        )));
    }
    let mut cells = Vec::with_capacity(vie_ratios.len() * layer_counts.len());
    for &lambda_i in vie_ratios {
        for &k in layer_counts {
            let mut c = TrainConfig {
                method: Method::Evi,
                transfer_layers: k,
                ..cfg.clone()
            };
            c.loss_weights.lambda_i = lambda_i;
            let r = cache.get(ds, &c, seeds)?;
            let per_seed = r.values(|m| m.auc);
            cells.push(SweepCell {
                lambda_i,
                transfer_layers: k,
                auc: Summary::of(&per_seed),
                per_seed,
            });
        }
    }
    Ok(SweepGrid {
        dataset: ds.name.to_string(),
        vie_ratios: vie_ratios.to_vec(),
        layer_counts: layer_counts.to_vec(),
        cells,
    })
}
