//! Optimization and the experiment drivers.

mod adam;
mod config;
mod studies;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{Method, TeacherTraining, TrainConfig, CONFIG_KEYS, DESK_BATCH_SIZE};
pub use studies::{
    run_ablation, run_bias_study, run_sweep, AblationRow, AblationTable, BiasStudy, RunCache,
    StudentEntry, StudyDataset, SweepCell, SweepGrid, TeacherEntry,
};

use serde::Serialize;
use thiserror::Error;

use crate::data::{batches, DataError, Dataset};
use crate::diffcore::{DiffError, Var};
use crate::losses::{self, LossError, LossParts};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::model::{pseudo_labels, EviModel, Forward, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("train and eval datasets have different schemas")]
    SchemaMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Prediction block size used for evaluation.
const EVAL_CHUNK: usize = 4096;

/// Architecture implied by a dataset schema and a training config.
pub fn model_config_for(cardinalities: &[usize], cfg: &TrainConfig) -> ModelConfig {
    let mut mc = ModelConfig::new(cardinalities.to_vec());
    mc.transfer_layers = cfg.transfer_layers;
    mc.teacher = cfg.method.teacher_input();
    mc.imputation = cfg.method.uses_imputation();
    mc
}

/// Loss graph for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchObjective {
    pub total: Var,
    pub parts: LossParts,
    /// Error-imputation loss (DR only), added with weight `λ_r`.
    pub imputation: Option<Var>,
    /// False when the batch had no click for the teacher to learn from.
    pub teacher_signal: bool,
}

/// Builds the method's objective on top of a forward pass.
pub fn batch_objective(
    model: &EviModel,
    fwd: &mut Forward,
    o: &[f64],
    r: &[f64],
    cfg: &TrainConfig,
) -> Result<BatchObjective, TrainError> {
    let method = cfg.method;
    let w = method.effective_weights(&cfg.loss_weights);
    let vie_terms = if w.lambda_i > 0.0 {
        Some(model.variational_terms(fwd)?)
    } else {
        None
    };
    let out = fwd.out.clone();
    let g = &mut fwd.graph;
    let mut parts = LossParts::default();
    let mut imputation = None;
    let mut teacher_signal = true;

    if w.lambda_c > 0.0 {
        parts.ctr = Some(losses::loss_ctr(g, out.p_ctr, o)?);
    }
    if w.lambda_t > 0.0 {
        parts.cvr_teacher = match method.teacher_training() {
            TeacherTraining::Conditional | TeacherTraining::ClickSpace => {
                let t = losses::loss_cvr_teacher(g, out.p_cvr_teacher, o, r)?;
                teacher_signal = t.has_signal;
                Some(t.loss)
            }
            TeacherTraining::EntireSpace => {
                let joint: Vec<f64> = o.iter().zip(r).map(|(a, b)| a * b).collect();
                Some(losses::mean_bce(g, out.p_cvr_teacher, &joint)?)
            }
            TeacherTraining::None => None,
        };
    }
    if w.lambda_r > 0.0 {
        let clip = cfg.propensity_clip;
        let (s, prop) = (out.p_cvr_student, out.p_ctr_detached);
        parts.cvr = Some(match method {
            Method::Evi | Method::EviNoVie | Method::EviNoVieCect => {
                let star = pseudo_labels(g, &out);
                losses::loss_cvr_evi(g, s, o, r, star, prop, clip)?
            }
            Method::Ddpo => {
                let star = pseudo_labels(g, &out);
                losses::loss_cvr_ddpo(g, s, o, r, star, prop, clip)?
            }
            Method::EntireDistill => {
                let star = pseudo_labels(g, &out);
                losses::loss_cvr_distill_entire(g, s, o, r, star)?
            }
            Method::Naive => losses::loss_cvr_naive(g, s, o, r)?,
            Method::Ipw => losses::loss_cvr_ipw(g, s, o, r, prop, Some(clip))?,
            Method::Dr => {
                let (dr, imp) =
                    losses::loss_cvr_dr(g, s, out.p_imputation, o, r, prop, Some(clip))?;
                imputation = Some(imp);
                dr
            }
            Method::Esmm => unreachable!("ESMM has no direct CVR term"),
        });
    }
    if let Some(terms) = &vie_terms {
        parts.vie = Some(losses::loss_vie(g, &out.teacher_taps, terms)?);
    }
    if w.lambda_g > 0.0 {
        parts.ctcvr = Some(losses::loss_ctcvr(g, out.p_ctr, out.p_cvr_student, o, r)?);
    }
    let mut total = losses::loss_total(g, &parts, &w)?;
    if let Some(imp) = imputation {
        let scaled = g.scale(imp, w.lambda_r);
        total = g.add(total, scaled)?;
    }
    Ok(BatchObjective {
        total,
        parts,
        imputation,
        teacher_signal,
    })
}

/// Per-epoch training log; loss means are over batches, `None` for inactive terms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub loss_total: f64,
    pub loss_ctr: Option<f64>,
    pub loss_cvr_teacher: Option<f64>,
    pub loss_cvr: Option<f64>,
    pub loss_vie: Option<f64>,
    pub loss_ctcvr: Option<f64>,
    pub loss_imputation: Option<f64>,
    /// Batches without any click (no teacher signal).
    pub teacherless_batches: usize,
    pub metrics: Option<MetricsReport>,
}

pub struct TrainOutcome {
    pub model: EviModel,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    /// The most recent evaluation, if any.
    pub fn final_report(&self) -> Option<&MetricsReport> {
        self.history.iter().rev().find_map(|h| h.metrics.as_ref())
    }
}

#[derive(Default)]
struct Running {
    n: usize,
    sums: [f64; 7],
    seen: [bool; 7],
}

impl Running {
    fn push(&mut self, vals: [Option<f64>; 7]) {
        self.n += 1;
        for (i, v) in vals.into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v;
                self.seen[i] = true;
            }
        }
    }

    fn mean(&self, i: usize) -> Option<f64> {
        self.seen[i].then(|| self.sums[i] / self.n.max(1) as f64)
    }
}

/// Evaluates `model` on `dataset`.
pub fn evaluate(
    model: &EviModel,
    dataset: &Dataset,
    method: &str,
    dataset_name: &str,
    seed: u64,
    epoch: usize,
) -> Result<MetricsReport, TrainError> {
    if dataset.schema().cardinalities() != model.config().cardinalities.as_slice() {
        return Err(TrainError::SchemaMismatch);
    }
    let feats: Vec<&[u32]> = dataset
        .records()
        .iter()
        .map(|r| r.features.as_slice())
        .collect();
    let preds = model.predict(&feats, EVAL_CHUNK)?;
    Ok(MetricsReport::from_predictions(
        method,
        dataset_name,
        seed,
        epoch,
        dataset,
        &preds,
    )?)
}

/// Trains one model: seeded per-epoch shuffles, method-specific objective,
/// Adam, and evaluation on `eval` every `eval_every` epochs and after the last.
pub fn train(
    train_set: &Dataset,
    eval: Option<(&str, &Dataset)>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if let Some((_, e)) = eval {
        if e.schema() != train_set.schema() {
            return Err(TrainError::SchemaMismatch);
        }
    }
    let mc = model_config_for(train_set.schema().cardinalities(), cfg);
    let mut model = EviModel::new(mc, cfg.seed)?;
    model.set_output_priors(
        train_set.click_rate(),
        train_set.conversion_rate_given_click(),
    );
    let mut state = AdamState::new(model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let recs = train_set.records();

    for epoch in 1..=cfg.epochs {
        let mut run = Running::default();
        let mut teacherless = 0;
        let blocks = batches(recs.len(), cfg.batch_size, cfg.seed, epoch as u64);
        for (b, idx) in blocks.iter().enumerate() {
            let feats: Vec<&[u32]> = idx.iter().map(|&i| recs[i].features.as_slice()).collect();
            let o: Vec<f64> = idx.iter().map(|&i| recs[i].click_f64()).collect();
            let r: Vec<f64> = idx.iter().map(|&i| recs[i].conversion_f64()).collect();
            let mut fwd = model.forward(&feats)?;
            let obj = batch_objective(&model, &mut fwd, &o, &r, cfg)?;
            let value = |v: Option<Var>| v.map(|v| fwd.graph.value(v).item());
            let total = fwd.graph.value(obj.total).item();
            if !total.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b });
            }
            run.push([
                Some(total),
                value(obj.parts.ctr),
                value(obj.parts.cvr_teacher),
                value(obj.parts.cvr),
                value(obj.parts.vie),
                value(obj.parts.ctcvr),
                value(obj.imputation),
            ]);
            if !obj.teacher_signal {
                teacherless += 1;
            }
            if !fwd.graph.requires_grad(obj.total) {
                continue;
            }
            fwd.graph
                .backward(obj.total)
                .map_err(|e| TrainError::Model(e.into()))?;
            let grads = fwd.param_grads();
            adam_step(model.params_mut(), &grads, &mut state, &cfg.adam)?;
        }

        let evaluate_now = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let metrics = match eval {
            Some((name, data)) if evaluate_now => Some(evaluate(
                &model,
                data,
                cfg.method.name(),
                name,
                cfg.seed,
                epoch,
            )?),
            _ => None,
        };
        let log = EpochLog {
            epoch,
            batches: blocks.len(),
            loss_total: run.mean(0).unwrap_or(0.0),
            loss_ctr: run.mean(1),
            loss_cvr_teacher: run.mean(2),
            loss_cvr: run.mean(3),
            loss_vie: run.mean(4),
            loss_ctcvr: run.mean(5),
            loss_imputation: run.mean(6),
            teacherless_batches: teacherless,
            metrics,
        };
        log::info!(
            "{} seed {} epoch {epoch}: loss {:.5}{}",
            cfg.method,
            cfg.seed,
            log.loss_total,
            log.metrics
                .as_ref()
                .map(|m| format!(" auc {:.4} nll {:.4} bias {:.4}", m.auc, m.nll, m.mean_bias))
                .unwrap_or_default()
        );
        history.push(log);
    }
    Ok(TrainOutcome { model, history })
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let (mean, var) = metrics::mean_var(values);
        Summary {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Final reports of one method over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiSeedReport {
    pub method: String,
    pub dataset: String,
    /// Sorted by seed, so aggregates do not depend on the order seeds were given.
    pub runs: Vec<MetricsReport>,
    pub auc: Summary,
    pub nll: Summary,
    pub mean_bias: Summary,
    pub teacher_nonclick_logloss: Option<Summary>,
}

impl MultiSeedReport {
    pub fn from_runs(mut runs: Vec<MetricsReport>) -> Self {
        runs.sort_by_key(|r| r.seed);
        let col = |f: &dyn Fn(&MetricsReport) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        let teacher: Option<Vec<f64>> = runs.iter().map(|r| r.teacher_nonclick_logloss).collect();
        MultiSeedReport {
            method: runs.first().map(|r| r.method.clone()).unwrap_or_default(),
            dataset: runs.first().map(|r| r.dataset.clone()).unwrap_or_default(),
            auc: Summary::of(&col(&|r| r.auc)),
            nll: Summary::of(&col(&|r| r.nll)),
            mean_bias: Summary::of(&col(&|r| r.mean_bias)),
            teacher_nonclick_logloss: teacher.map(|t| Summary::of(&t)),
            runs,
        }
    }

    pub fn values(&self, f: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
        self.runs.iter().map(f).collect()
    }
}

/// Welch comparison of one metric between two multi-seed reports. The test
/// statistics are absent when either side has fewer than two seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: Option<f64>,
    pub p_value: Option<f64>,
}

pub fn compare(
    a: &MultiSeedReport,
    b: &MultiSeedReport,
    metric: &str,
    f: impl Fn(&MetricsReport) -> f64,
) -> Result<Comparison, TrainError> {
    let (va, vb) = (a.values(&f), b.values(&f));
    let (t, p_value) = if va.len() < 2 || vb.len() < 2 {
        (None, None)
    } else {
        let (t, p) = metrics::welch_t_test(&va, &vb)?;
        (Some(t), Some(p))
    };
    Ok(Comparison {
        a: a.method.clone(),
        b: b.method.clone(),
        metric: metric.to_string(),
        mean_a: metrics::mean_var(&va).0,
        mean_b: metrics::mean_var(&vb).0,
        t,
        p_value,
    })
}

/// Trains one model per seed and aggregates the final evaluations.
/// `on_run` sees every finished run (e.g. to write checkpoints).
pub fn run_multi_seed(
    train_set: &Dataset,
    eval: (&str, &Dataset),
    cfg_base: &TrainConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(&TrainConfig, &TrainOutcome) -> Result<(), TrainError>,
) -> Result<MultiSeedReport, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("at least one seed is required".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..cfg_base.clone()
        };
        let outcome = train(train_set, Some(eval), &cfg)?;
        on_run(&cfg, &outcome)?;
        let report = match outcome.final_report() {
            Some(r) => r.clone(),
            None => evaluate(&outcome.model, eval.1, cfg.method.name(), eval.0, seed, 0)?,
        };
        runs.push(report);
    }
    Ok(MultiSeedReport::from_runs(runs))
}
