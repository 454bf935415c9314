use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Dataset, FieldSchema, ImpressionRecord, OracleLabels};
use crate::diffcore::sigmoid_scalar;

/// Latent dimensions that drive only one of the two outcomes.
const PRIVATE_DIM: usize = 2;

/// Parameters of the synthetic click/conversion world.
///
/// Every category of every field owns a latent vector; an impression's
/// latent state is the sum over its fields. The first `confounder_dim`
/// coordinates are shared by the click and conversion logits (scaled by the
/// two strengths), the remaining ones are private to each outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_records: usize,
    pub n_fields: usize,
    pub cardinalities: Vec<usize>,
    pub confounder_dim: usize,
    pub confounder_strength_ctr: f64,
    pub confounder_strength_cvr: f64,
    pub base_ctr_logit_shift: f64,
    pub base_cvr_logit_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// 100k impressions over 8 fields of 50 categories; CTR ≈ 4%,
    /// conversion given click ≈ 2%.
    fn default() -> Self {
        SyntheticConfig {
            n_records: 100_000,
            n_fields: 8,
            cardinalities: vec![50; 8],
            confounder_dim: 4,
            confounder_strength_ctr: 1.2,
            confounder_strength_cvr: 1.2,
            base_ctr_logit_shift: -4.03,
            base_cvr_logit_shift: -5.64,
            seed: 2024,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_records == 0 || self.n_fields == 0 || self.confounder_dim == 0 {
            return Err(DataError::Config(
                "n_records, n_fields and confounder_dim must be positive".into(),
            ));
        }
        if self.cardinalities.len() != self.n_fields || self.cardinalities.contains(&0) {
            return Err(DataError::Config(format!(
                "need {} positive cardinalities, got {:?}",
                self.n_fields, self.cardinalities
            )));
        }
        let finite = [
            self.confounder_strength_ctr,
            self.confounder_strength_cvr,
            self.base_ctr_logit_shift,
            self.base_cvr_logit_shift,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(DataError::Config(
                "strengths and shifts must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn schema(&self) -> FieldSchema {
        FieldSchema {
            cardinalities: self.cardinalities.clone(),
        }
    }
}

/// The fixed latent structure drawn from a config's seed.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    cfg: SyntheticConfig,
    /// `latents[field][category]`, length `confounder_dim + 2·PRIVATE_DIM`.
    latents: Vec<Vec<Vec<f64>>>,
    shared_dir: Vec<f64>,
    ctr_dir: Vec<f64>,
    cvr_dir: Vec<f64>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SyntheticWorld {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self, DataError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let dim = cfg.confounder_dim + 2 * PRIVATE_DIM;
        // Per-coordinate variance 1/n_fields makes each summed latent coordinate ~ N(0, 1).
        let normal = Normal::new(0.0, (1.0 / cfg.n_fields as f64).sqrt()).unwrap();
        let latents = cfg
            .cardinalities
            .iter()
            .map(|&card| {
                (0..card)
                    .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
                    .collect()
            })
            .collect();
        let shared_dir = unit_vector(&mut rng, cfg.confounder_dim);
        let ctr_dir = unit_vector(&mut rng, PRIVATE_DIM);
        let cvr_dir = unit_vector(&mut rng, PRIVATE_DIM);
        Ok(SyntheticWorld {
            cfg: cfg.clone(),
            latents,
            shared_dir,
            ctr_dir,
            cvr_dir,
        })
    }

    /// Click and conversion logits without the base shifts.
    pub fn raw_logits(&self, features: &[u32]) -> (f64, f64) {
        let dim = self.cfg.confounder_dim + 2 * PRIVATE_DIM;
        let mut z = vec![0.0; dim];
        for (field, &cat) in features.iter().enumerate() {
            for (acc, v) in z.iter_mut().zip(&self.latents[field][cat as usize]) {
                *acc += v;
            }
        }
        let k = self.cfg.confounder_dim;
        let confounder = dot(&z[..k], &self.shared_dir);
        let ctr_private = dot(&z[k..k + PRIVATE_DIM], &self.ctr_dir);
        let cvr_private = dot(&z[k + PRIVATE_DIM..], &self.cvr_dir);
        (
            self.cfg.confounder_strength_ctr * confounder + ctr_private,
            self.cfg.confounder_strength_cvr * confounder + cvr_private,
        )
    }

    /// True click and conversion probabilities of an impression.
    pub fn probabilities(&self, features: &[u32]) -> (f64, f64) {
        let (lo, lr) = self.raw_logits(features);
        (
            sigmoid_scalar(lo + self.cfg.base_ctr_logit_shift),
            sigmoid_scalar(lr + self.cfg.base_cvr_logit_shift),
        )
    }

    fn draw_features(&self, rng: &mut ChaCha8Rng) -> Vec<u32> {
        self.cfg
            .cardinalities
            .iter()
            .map(|&c| rng.random_range(0..c as u32))
            .collect()
    }
}

/// Draws an impression log with oracle labels. A pure function of `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    SyntheticWorld::new(cfg)?.sample(cfg.n_records, 1)
}

/// An independent log of `n` impressions from the same world as
/// [`generate_synthetic`], for held-out evaluation.
pub fn generate_holdout(cfg: &SyntheticConfig, n: usize) -> Result<Dataset, DataError> {
    SyntheticWorld::new(cfg)?.sample(n, 2)
}

impl SyntheticWorld {
    /// `n` impressions drawn on RNG stream `stream` of the world seed.
    pub fn sample(&self, n: usize, stream: u64) -> Result<Dataset, DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        let records = (0..n)
            .map(|_| {
                let features = self.draw_features(&mut rng);
                let (ctr, cvr) = self.probabilities(&features);
                let click = rng.random::<f64>() < ctr;
                let conversion_all = rng.random::<f64>() < cvr;
                ImpressionRecord {
                    features,
                    click,
                    conversion: click && conversion_all,
                    oracle: Some(OracleLabels {
                        ctr,
                        cvr,
                        conversion_all,
                    }),
                }
            })
            .collect();
        Dataset::new(self.cfg.schema(), records)
    }
}

/// Finds logit shifts giving the requested marginal CTR and conversion rate
/// given click, by bisection over a Monte-Carlo sample of the world.
pub fn calibrate_shifts(
    cfg: &SyntheticConfig,
    target_ctr: f64,
    target_cvr_given_click: f64,
) -> Result<(f64, f64), DataError> {
    for (name, v) in [("ctr", target_ctr), ("cvr", target_cvr_given_click)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(DataError::Config(format!(
                "target {name} must lie in (0, 1), got {v}"
            )));
        }
    }
    let world = SyntheticWorld::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let draws: Vec<(f64, f64)> = (0..100_000)
        .map(|_| world.raw_logits(&world.draw_features(&mut rng)))
        .collect();

    let ctr_shift = bisect(|s| {
        draws
            .iter()
            .map(|&(lo, _)| sigmoid_scalar(lo + s))
            .sum::<f64>()
            / draws.len() as f64
            - target_ctr
    });
    let weights: Vec<f64> = draws
        .iter()
        .map(|&(lo, _)| sigmoid_scalar(lo + ctr_shift))
        .collect();
    let total: f64 = weights.iter().sum();
    let cvr_shift = bisect(|s| {
        draws
            .iter()
            .zip(&weights)
            .map(|(&(_, lr), w)| w * sigmoid_scalar(lr + s))
            .sum::<f64>()
            / total
            - target_cvr_given_click
    });
    Ok((ctr_shift, cvr_shift))
}

/// Root of an increasing function on [-40, 40].
fn bisect(f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
