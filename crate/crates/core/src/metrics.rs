//! Evaluation: AUC, log loss, teacher non-click log loss, CVR mean bias and
//! Welch's t-test across seeds.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::data::Dataset;
use crate::diffcore::bce_scalar;
use crate::model::Predictions;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{0} scores for {1} labels")]
    Misaligned(usize, usize),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("t-test needs at least two values per sample")]
    TooFewSamples,
}

/// Area under the ROC curve: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, via sorted ranks.
///
/// The statistic is accumulated as an integer count of half pairs, so the
/// result is exactly `count / (2·P·N)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Misaligned(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum of positives; tied blocks share the mean rank.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1; doubled mean rank = i + j + 2.
        let doubled_mean = (i + j + 2) as u128;
        let pos_in_block = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled_mean * pos_in_block;
        i = j + 1;
    }
    let p = positives as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * negatives as u128) as f64)
}

/// Mean clamped binary cross-entropy.
pub fn nll(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Misaligned(scores.len(), labels.len()));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_scalar(p, f64::from(u8::from(y))))
        .sum();
    Ok(total / scores.len().max(1) as f64)
}

/// Which impressions a CVR metric was computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScope {
    /// All impressions, against counterfactual conversion outcomes.
    EntireSpace,
    /// Clicked impressions only, against observed conversions.
    ClickSpace,
}

impl EvalScope {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalScope::EntireSpace => "entire_space",
            EvalScope::ClickSpace => "click_space",
        }
    }
}

pub struct ScopedPairs {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub scope: EvalScope,
}

/// CVR evaluation pairs: the entire space against `oracle_conv_all` when the
/// dataset carries oracle labels, otherwise the click space.
pub fn cvr_evaluation_scope(dataset: &Dataset, predictions: &[f64]) -> ScopedPairs {
    if dataset.has_oracle() {
        ScopedPairs {
            scores: predictions.to_vec(),
            labels: dataset
                .records()
                .iter()
                .map(|r| r.oracle.as_ref().is_some_and(|o| o.conversion_all))
                .collect(),
            scope: EvalScope::EntireSpace,
        }
    } else {
        click_space_pairs(dataset, predictions)
    }
}

/// Clicked impressions against observed conversions.
pub fn click_space_pairs(dataset: &Dataset, predictions: &[f64]) -> ScopedPairs {
    let (scores, labels) = dataset
        .records()
        .iter()
        .zip(predictions)
        .filter(|(r, _)| r.click)
        .map(|(r, &p)| (p, r.conversion))
        .unzip();
    ScopedPairs {
        scores,
        labels,
        scope: EvalScope::ClickSpace,
    }
}

/// Teacher log loss on unclicked impressions against counterfactual outcomes.
/// `None` without oracle labels.
pub fn teacher_nonclick_logloss(p_teacher: &[f64], dataset: &Dataset) -> Option<f64> {
    if !dataset.has_oracle() {
        return None;
    }
    let (mut total, mut n) = (0.0, 0usize);
    for (r, &p) in dataset.records().iter().zip(p_teacher) {
        if !r.click {
            let y = f64::from(u8::from(r.oracle?.conversion_all));
            total += bce_scalar(p, y);
            n += 1;
        }
    }
    Some(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanBias {
    /// `mean(prediction) - mean(reference)`.
    pub signed: f64,
    /// True when the reference is the empirical click-space conversion rate
    /// rather than oracle conversion probabilities.
    pub proxy: bool,
}

impl MeanBias {
    pub fn value(&self) -> f64 {
        self.signed.abs()
    }
}

/// Difference between the average predicted CVR and the average true
/// conversion probability over the entire space (oracle data), or between the
/// click-space averages of prediction and observed conversion otherwise.
pub fn mean_bias(p_cvr: &[f64], dataset: &Dataset) -> MeanBias {
    let recs = dataset.records();
    if dataset.has_oracle() {
        let n = recs.len() as f64;
        let pred = p_cvr.iter().sum::<f64>() / n;
        let truth = recs
            .iter()
            .map(|r| r.oracle.map_or(0.0, |o| o.cvr))
            .sum::<f64>()
            / n;
        MeanBias {
            signed: pred - truth,
            proxy: false,
        }
    } else {
        let (mut sp, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (r, &p) in recs.iter().zip(p_cvr) {
            if r.click {
                sp += p;
                sy += r.conversion_f64();
                n += 1;
            }
        }
        MeanBias {
            signed: (sp - sy) / n as f64,
            proxy: true,
        }
    }
}

/// Welch's unequal-variance t-test; returns `(t, two-sided p)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64), MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::TooFewSamples);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            (0.0, 1.0)
        } else {
            ((ma - mb).signum() * f64::INFINITY, 0.0)
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).expect("positive degrees of freedom");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok((t, p))
}

/// Mean and unbiased sample variance.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

/// One evaluation of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub epoch: usize,
    /// CVR AUC on `scope`.
    pub auc: f64,
    /// CVR log loss on `scope`.
    pub nll: f64,
    pub scope: EvalScope,
    pub n_eval: usize,
    /// CVR metrics restricted to the click space; always emitted.
    pub auc_click_space: Option<f64>,
    pub nll_click_space: f64,
    pub mean_bias: f64,
    pub mean_bias_signed: f64,
    pub mean_bias_is_proxy: bool,
    pub teacher_nonclick_logloss: Option<f64>,
    pub ctr_auc: Option<f64>,
}

impl MetricsReport {
    /// Evaluates model predictions on `dataset`.
    pub fn from_predictions(
        method: &str,
        dataset_name: &str,
        seed: u64,
        epoch: usize,
        dataset: &Dataset,
        preds: &Predictions,
    ) -> Result<Self, MetricsError> {
        let scoped = cvr_evaluation_scope(dataset, &preds.cvr_student);
        let click = click_space_pairs(dataset, &preds.cvr_student);
        let clicks: Vec<bool> = dataset.records().iter().map(|r| r.click).collect();
        let bias = mean_bias(&preds.cvr_student, dataset);
        Ok(MetricsReport {
            method: method.to_string(),
            dataset: dataset_name.to_string(),
            seed,
            epoch,
            auc: auc(&scoped.scores, &scoped.labels)?,
            nll: nll(&scoped.scores, &scoped.labels)?,
            scope: scoped.scope,
            n_eval: scoped.scores.len(),
            auc_click_space: auc(&click.scores, &click.labels).ok(),
            nll_click_space: nll(&click.scores, &click.labels)?,
            mean_bias: bias.value(),
            mean_bias_signed: bias.signed,
            mean_bias_is_proxy: bias.proxy,
            teacher_nonclick_logloss: teacher_nonclick_logloss(&preds.cvr_teacher, dataset),
            ctr_auc: auc(&preds.ctr, &clicks).ok(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(auc(&[0.3; 4], &[false, true, false, true]).unwrap(), 0.5);
        let a = auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(a, 0.75);
    }

    #[test]
    fn auc_single_class_rejected() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(MetricsError::SingleClass { .. })
        ));
    }

    #[test]
    fn nll_examples() {
        assert!((nll(&[0.5, 0.5], &[true, false]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let v = nll(&[0.9, 0.2], &[true, false]).unwrap();
        assert!((v - 0.16425).abs() < 1e-5);
        assert!(nll(&[1.0, 0.0], &[true, false]).unwrap() < 1.1e-7);
    }

    #[test]
    fn welch_examples() {
        let (t, p) = welch_t_test(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!((t, p), (0.0, 1.0));
        let (t, _) = welch_t_test(&[0.1, 0.2, 0.3], &[0.4, 0.5, 0.6]).unwrap();
        assert!((t + 3.674).abs() < 1e-3);
        let (t, p) = welch_t_test(&[1.0; 5], &[2.0; 5]).unwrap();
        assert!(t.is_infinite() && t < 0.0);
        assert_eq!(p, 0.0);
        assert_eq!(welch_t_test(&[1.0; 5], &[1.0; 5]).unwrap(), (0.0, 1.0));
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }
}
