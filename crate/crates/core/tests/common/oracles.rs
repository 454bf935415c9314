//! Independent reference implementations.

use evi::data::Dataset;
use evi::diffcore::{Graph, Tensor};
use evi::losses::{self, PropensityClip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` by enumerating every positive/negative pair.
/// The count is kept in half-pair units so the division matches a rank-based
/// computation bit for bit.
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut halves: u128 = 0;
    let (mut pos, mut neg) = (0u128, 0u128);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                halves += 2;
            } else if scores[i] == scores[j] {
                halves += 1;
            }
        }
    }
    halves as f64 / (2 * pos * neg) as f64
}

/// A random AUC instance with both classes and deliberate ties: scores are
/// drawn from a small grid.
pub fn auc_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(1..=20);
    loop {
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let rate = rng.random_range(0.05..0.95);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(rate)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

/// Worst `|rank AUC - brute force AUC|` over `instances` random draws.
pub fn auc_equivalence(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|_| {
            let (s, l) = auc_instance(&mut rng);
            (evi::metrics::auc(&s, &l).unwrap() - brute_force_auc(&s, &l)).abs()
        })
        .fold(0.0, f64::max)
}

/// Columns of one batch drawn from an oracle dataset.
pub struct OracleBatch {
    pub o: Vec<f64>,
    pub r: Vec<f64>,
    pub r_all: Vec<f64>,
    pub ctr: Vec<f64>,
}

pub fn oracle_batch(d: &Dataset, indices: &[usize]) -> OracleBatch {
    let recs = d.records();
    let pick = |f: &dyn Fn(usize) -> f64| indices.iter().map(|&i| f(i)).collect::<Vec<_>>();
    OracleBatch {
        o: pick(&|i| recs[i].click_f64()),
        r: pick(&|i| recs[i].conversion_f64()),
        r_all: pick(&|i| f64::from(u8::from(recs[i].oracle.unwrap().conversion_all))),
        ctr: pick(&|i| recs[i].oracle.unwrap().ctr),
    }
}

/// One line per algebraic identity: `(name, worst deviation, tolerance)`.
pub fn algebraic_identities(
    d: &Dataset,
    batches: usize,
    seed: u64,
) -> Vec<(&'static str, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = PropensityClip::default();
    let mut worst = [0.0f64; 4];
    for _ in 0..batches {
        let m = rng.random_range(1..=512);
        let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..d.len())).collect();
        let b = oracle_batch(d, &idx);
        let preds: Vec<f64> = (0..m).map(|_| rng.random_range(0.001..0.999)).collect();

        let mut g = Graph::new();
        let p = g.param(Tensor::column(preds.clone()));
        let star = g.constant(Tensor::column(b.r_all.clone()));
        let half = g.constant(Tensor::column(vec![0.5; m]));
        let evi = losses::loss_cvr_evi(&mut g, p, &b.o, &b.r, star, half, clip).unwrap();
        let ideal = losses::loss_ideal(&mut g, p, &b.r_all).unwrap();
        worst[0] = worst[0].max((g.value(evi).item() - g.value(ideal).item()).abs());

        let prop = g.constant(Tensor::column(b.ctr.clone()));
        let soft = g.constant(Tensor::column(
            (0..m).map(|_| rng.random::<f64>()).collect(),
        ));
        let e = losses::loss_cvr_evi(&mut g, p, &b.o, &b.r, soft, prop, clip).unwrap();
        let dd = losses::loss_cvr_ddpo(&mut g, p, &b.o, &b.r, soft, prop, clip).unwrap();
        worst[1] = worst[1].max((g.value(dd).item() - 2.0 * g.value(e).item()).abs());

        let ones = g.constant(Tensor::column(vec![1.0; m]));
        let ipw = losses::loss_cvr_ipw(&mut g, p, &b.o, &b.r, ones, None).unwrap();
        let naive = losses::loss_cvr_naive(&mut g, p, &b.o, &b.r).unwrap();
        worst[2] = worst[2].max((g.value(ipw).item() - g.value(naive).item()).abs());

        let width = rng.random_range(1..=16);
        let s_vals: Vec<f64> = (0..m * width)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let mu = g.param(Tensor::matrix(m, width, s_vals.clone()));
        let t = g.constant(Tensor::matrix(m, width, s_vals));
        let sigma = g.constant(Tensor::vector(vec![1.0; width]));
        let vie = losses::loss_vie(&mut g, &[t], &[(mu, sigma)]).unwrap();
        worst[3] = worst[3].max(g.value(vie).item().abs());
    }
    vec![
        ("evi(ô=0.5, r*=oracle) == ideal", worst[0], 1e-10),
        ("ddpo == 2 x evi", worst[1], 1e-10),
        ("ipw(ô=1) == naive", worst[2], 1e-10),
        ("vie(σ=1, t=μ) == 0", worst[3], 1e-10),
    ]
}
