//! Training objectives, written against [`Graph`] so every term is differentiable.
//!
//! Labels enter as plain slices (`o` clicks, `r` observed conversions) and
//! become constants. Click propensities are always read as values, so they
//! never carry gradient into the CTR tower. All means use the batch size as
//! `|D|`.

use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("batch misaligned: {0}")]
    Misaligned(String),
    #[error("doubly robust loss needs the imputation tower")]
    MissingImputation,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Trade-off weights of the five terms of the full objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_t: f64,
    pub lambda_r: f64,
    pub lambda_i: f64,
    pub lambda_g: f64,
}

impl LossWeights {
    pub fn new(c: f64, t: f64, r: f64, i: f64, g: f64) -> Result<Self, LossError> {
        let w = LossWeights {
            lambda_c: c,
            lambda_t: t,
            lambda_r: r,
            lambda_i: i,
            lambda_g: g,
        };
        if w.as_array().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LossError::Config(format!(
                "weights must be finite and >= 0: {w:?}"
            )));
        }
        Ok(w)
    }

    /// Weights tuned for Ali-CCP.
    pub fn ali_ccp() -> Self {
        LossWeights {
            lambda_c: 1.0,
            lambda_t: 0.2,
            lambda_r: 2.0,
            lambda_i: 0.2,
            lambda_g: 0.1,
        }
    }

    /// Weights used for the AliExpress and industrial datasets.
    pub fn aliexpress() -> Self {
        LossWeights {
            lambda_c: 0.2,
            lambda_t: 0.2,
            lambda_r: 2.0,
            lambda_i: 0.2,
            lambda_g: 0.2,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.lambda_c,
            self.lambda_t,
            self.lambda_r,
            self.lambda_i,
            self.lambda_g,
        ]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::ali_ccp()
    }
}

/// Clips click propensities into `[ε, 1-ε]` before they divide a loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropensityClip {
    epsilon: f64,
}

impl PropensityClip {
    pub fn new(epsilon: f64) -> Result<Self, LossError> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(LossError::Config(format!(
                "propensity clip must lie in (0, 0.5), got {epsilon}"
            )));
        }
        Ok(PropensityClip { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn apply(&self, p: f64) -> f64 {
        p.clamp(self.epsilon, 1.0 - self.epsilon)
    }
}

impl Default for PropensityClip {
    fn default() -> Self {
        PropensityClip { epsilon: 0.05 }
    }
}

/// Individual objective terms computed on one batch; absent terms are inactive.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub ctr: Option<Var>,
    pub cvr_teacher: Option<Var>,
    pub cvr: Option<Var>,
    pub vie: Option<Var>,
    pub ctcvr: Option<Var>,
}

fn check_len(g: &Graph, p: Var, n: usize, what: &str) -> Result<(), LossError> {
    let len = g.value(p).len();
    if len != n {
        return Err(LossError::Misaligned(format!(
            "{what}: {n} labels for {len} predictions"
        )));
    }
    Ok(())
}

/// Constant tensor of `values` shaped like `like`.
fn constant_like(g: &mut Graph, like: Var, values: Vec<f64>) -> Result<Var, LossError> {
    let shape = g.value(like).shape().to_vec();
    Ok(g.constant(Tensor::new(shape, values)?))
}

/// `Σ weights ⊙ x / denom`.
fn weighted_sum(g: &mut Graph, x: Var, weights: Vec<f64>, denom: f64) -> Result<Var, LossError> {
    let w = constant_like(g, x, weights)?;
    let wx = g.mul(x, w)?;
    let s = g.sum(wx);
    Ok(g.scale(s, 1.0 / denom))
}

/// Elementwise BCE against constant targets.
fn bce_to(g: &mut Graph, p: Var, targets: &[f64]) -> Result<Var, LossError> {
    check_len(g, p, targets.len(), "bce")?;
    let y = constant_like(g, p, targets.to_vec())?;
    Ok(g.bce(p, y)?)
}

fn propensities(g: &Graph, p_ctr: Var, clip: Option<PropensityClip>) -> Vec<f64> {
    g.value(p_ctr)
        .values()
        .iter()
        .map(|&p| clip.map_or(p, |c| c.apply(p)))
        .collect()
}

/// Mean BCE of click predictions over the whole batch.
pub fn loss_ctr(g: &mut Graph, p_ctr: Var, o: &[f64]) -> Result<Var, LossError> {
    mean_bce(g, p_ctr, o)
}

/// Mean BCE between `o·r` and `p_ctr·p_cvr`.
pub fn loss_ctcvr(
    g: &mut Graph,
    p_ctr: Var,
    p_cvr: Var,
    o: &[f64],
    r: &[f64],
) -> Result<Var, LossError> {
    check_len(g, p_cvr, o.len(), "ctcvr")?;
    let joint = g.mul(p_ctr, p_cvr)?;
    let target: Vec<f64> = o.iter().zip(r).map(|(a, b)| a * b).collect();
    let e = bce_to(g, joint, &target)?;
    Ok(g.mean(e))
}

/// Teacher loss over the click space.
#[derive(Clone, Copy, Debug)]
pub struct TeacherLoss {
    pub loss: Var,
    /// False when the batch holds no click, in which case `loss` is a constant 0.
    pub has_signal: bool,
}

/// Mean BCE of the teacher on clicked samples only; unclicked samples have no
/// observed conversion.
pub fn loss_cvr_teacher(
    g: &mut Graph,
    p_teacher: Var,
    o: &[f64],
    r: &[f64],
) -> Result<TeacherLoss, LossError> {
    let clicks = o.iter().filter(|&&v| v > 0.0).count();
    if clicks == 0 {
        check_len(g, p_teacher, o.len(), "teacher")?;
        return Ok(TeacherLoss {
            loss: g.constant(Tensor::scalar(0.0)),
            has_signal: false,
        });
    }
    let e = bce_to(g, p_teacher, r)?;
    let loss = weighted_sum(g, e, o.to_vec(), clicks as f64)?;
    Ok(TeacherLoss {
        loss,
        has_signal: true,
    })
}

/// Entire-space student loss: clicked samples weighted by `1/(2ô)` against
/// `r`, unclicked ones by `1/(2(1-ô))` against the pseudo labels `r*`.
pub fn loss_cvr_evi(
    g: &mut Graph,
    p_cvr: Var,
    o: &[f64],
    r: &[f64],
    r_star: Var,
    p_ctr_detached: Var,
    clip: PropensityClip,
) -> Result<Var, LossError> {
    propensity_split_loss(g, p_cvr, o, r, r_star, p_ctr_detached, Some(clip), 0.5)
}

/// Same shape as [`loss_cvr_evi`] without the ½ factors; `r_star` comes from
/// an unconditioned click-space teacher.
pub fn loss_cvr_ddpo(
    g: &mut Graph,
    p_cvr: Var,
    o: &[f64],
    r: &[f64],
    r_star_naive: Var,
    p_ctr_detached: Var,
    clip: PropensityClip,
) -> Result<Var, LossError> {
    propensity_split_loss(
        g,
        p_cvr,
        o,
        r,
        r_star_naive,
        p_ctr_detached,
        Some(clip),
        1.0,
    )
}

/// [`loss_cvr_evi`] with raw, unclipped propensities. Only meaningful when the
/// propensities are bounded away from 0 and 1, e.g. oracle values.
pub fn loss_cvr_evi_unclipped(
    g: &mut Graph,
    p_cvr: Var,
    o: &[f64],
    r: &[f64],
    r_star: Var,
    p_ctr: Var,
) -> Result<Var, LossError> {
    propensity_split_loss(g, p_cvr, o, r, r_star, p_ctr, None, 0.5)
}

#[allow(clippy::too_many_arguments)]
fn propensity_split_loss(
    g: &mut Graph,
    p_cvr: Var,
    o: &[f64],
    r: &[f64],
    r_star: Var,
    p_ctr: Var,
    clip: Option<PropensityClip>,
    factor: f64,
) -> Result<Var, LossError> {
    let n = o.len();
    check_len(g, p_cvr, n, "cvr")?;
    check_len(g, r_star, n, "pseudo labels")?;
    check_len(g, p_ctr, n, "propensity")?;
    let prop = propensities(g, p_ctr, clip);
    // Pseudo labels are targets only.
    let star: Vec<f64> = g.value(r_star).values().to_vec();
    // On clicked rows the target is r, elsewhere r*.
    let targets: Vec<f64> = o
        .iter()
        .zip(r)
        .zip(&star)
        .map(|((&oi, &ri), &si)| if oi > 0.0 { ri } else { si })
        .collect();
    let weights: Vec<f64> = o
        .iter()
        .zip(&prop)
        .map(|(&oi, &pi)| factor * (oi / pi + (1.0 - oi) / (1.0 - pi)))
        .collect();
    let e = bce_to(g, p_cvr, &targets)?;
    weighted_sum(g, e, weights, n as f64)
}

/// Mean BCE against constant (possibly soft) targets.
pub fn mean_bce(g: &mut Graph, p: Var, targets: &[f64]) -> Result<Var, LossError> {
    let e = bce_to(g, p, targets)?;
    Ok(g.mean(e))
}

/// Ideal entire-space loss against fully observed conversion outcomes.
pub fn loss_ideal(g: &mut Graph, p_cvr: Var, r_full: &[f64]) -> Result<Var, LossError> {
    mean_bce(g, p_cvr, r_full)
}

/// Click-space loss averaged over the entire batch: `(1/|D|) Σ o·δ(r, r̂)`.
pub fn loss_cvr_naive(g: &mut Graph, p_cvr: Var, o: &[f64], r: &[f64]) -> Result<Var, LossError> {
    let e = bce_to(g, p_cvr, r)?;
    weighted_sum(g, e, o.to_vec(), o.len() as f64)
}

/// Inverse-propensity-weighted click-space loss `(1/|D|) Σ o·δ(r, r̂)/ô`.
pub fn loss_cvr_ipw(
    g: &mut Graph,
    p_cvr: Var,
    o: &[f64],
    r: &[f64],
    p_ctr_detached: Var,
    clip: Option<PropensityClip>,
) -> Result<Var, LossError> {
    check_len(g, p_ctr_detached, o.len(), "propensity")?;
    let prop = propensities(g, p_ctr_detached, clip);
    let e = bce_to(g, p_cvr, r)?;
    let weights = o.iter().zip(&prop).map(|(oi, pi)| oi / pi).collect();
    weighted_sum(g, e, weights, o.len() as f64)
}

/// Doubly robust pair `(dr_loss, imputation_loss)`.
///
/// `dr_loss = (1/|D|) Σ ê + o(e - ê)/ô` trains the CVR tower with `ê` held fixed;
/// `imputation_loss = (1/|D|) Σ o(e - ê)²/ô` trains the imputation tower with `e` held fixed.
pub fn loss_cvr_dr(
    g: &mut Graph,
    p_cvr: Var,
    p_imputation: Option<Var>,
    o: &[f64],
    r: &[f64],
    p_ctr_detached: Var,
    clip: Option<PropensityClip>,
) -> Result<(Var, Var), LossError> {
    let imputed = p_imputation.ok_or(LossError::MissingImputation)?;
    let n = o.len();
    check_len(g, imputed, n, "imputation")?;
    check_len(g, p_ctr_detached, n, "propensity")?;
    let prop = propensities(g, p_ctr_detached, clip);
    let w: Vec<f64> = o.iter().zip(&prop).map(|(oi, pi)| oi / pi).collect();

    let e = bce_to(g, p_cvr, r)?;
    let imputed_fixed = g.detach(imputed);
    let resid = g.sub(e, imputed_fixed)?;
    let wc = constant_like(g, resid, w.clone())?;
    let corr = g.mul(resid, wc)?;
    let per = g.add(imputed_fixed, corr)?;
    let dr = g.mean(per);

    let e_fixed = g.detach(e);
    let resid2 = g.sub(e_fixed, imputed)?;
    let sq = g.square(resid2);
    let imp = weighted_sum(g, sq, w, n as f64)?;
    Ok((dr, imp))
}

/// Unweighted entire-space distillation `(1/|D|) Σ o·δ(r, r̂) + (1-o)·δ(r*, r̂)`.
pub fn loss_cvr_distill_entire(
    g: &mut Graph,
    p_cvr: Var,
    o: &[f64],
    r: &[f64],
    r_star: Var,
) -> Result<Var, LossError> {
    let n = o.len();
    check_len(g, r_star, n, "pseudo labels")?;
    let star = g.value(r_star).values().to_vec();
    let targets: Vec<f64> = o
        .iter()
        .zip(r)
        .zip(&star)
        .map(|((&oi, &ri), &si)| if oi > 0.0 { ri } else { si })
        .collect();
    let e = bce_to(g, p_cvr, &targets)?;
    Ok(g.mean(e))
}

/// Gaussian variational loss between teacher and student hidden layers.
///
/// Per pair: `Σ_n log σ_n + (t_n - μ_n(s))² / (2σ_n²)` summed over dimensions and
/// averaged over the batch; pairs are summed. Teacher activations are detached.
pub fn loss_vie(
    g: &mut Graph,
    teacher_taps: &[Var],
    terms: &[(Var, Var)],
) -> Result<Var, LossError> {
    if teacher_taps.len() != terms.len() || terms.is_empty() {
        return Err(LossError::Misaligned(format!(
            "{} teacher taps for {} variational heads",
            teacher_taps.len(),
            terms.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&t, &(mu, sigma)) in teacher_taps.iter().zip(terms) {
        let rows = g.value(t).rows_cols().0 as f64;
        let target = g.detach(t);
        let diff = g.sub(target, mu)?;
        let z = g.div_row(diff, sigma)?;
        let sq = g.square(z);
        let s = g.sum(sq);
        let quad = g.scale(s, 0.5 / rows);
        let log_sigma = g.ln(sigma);
        let logs = g.sum(log_sigma);
        let pair = g.add(logs, quad)?;
        total = Some(match total {
            None => pair,
            Some(acc) => g.add(acc, pair)?,
        });
    }
    Ok(total.unwrap())
}

/// `λ_c L_CTR + λ_t L_CVR-T + λ_r L_CVR + λ_i L_VIE + λ_g L_CTCVR` over the active parts.
pub fn loss_total(g: &mut Graph, parts: &LossParts, w: &LossWeights) -> Result<Var, LossError> {
    let weighted = [
        (parts.ctr, w.lambda_c),
        (parts.cvr_teacher, w.lambda_t),
        (parts.cvr, w.lambda_r),
        (parts.vie, w.lambda_i),
        (parts.ctcvr, w.lambda_g),
    ];
    let mut total = g.constant(Tensor::scalar(0.0));
    for (part, lambda) in weighted {
        if let Some(p) = part {
            let scaled = g.scale(p, lambda);
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}
