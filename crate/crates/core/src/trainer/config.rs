use std::fmt;
use std::str::FromStr;

use crate::losses::{LossWeights, PropensityClip};
use crate::model::TeacherInput;

use super::{AdamConfig, TrainError};

/// Training recipe: which loss terms are active and how the teacher is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Full objective: conditioned teacher, propensity-weighted distillation, VIE, CTCVR.
    Evi,
    /// Full objective without the variational term.
    EviNoVie,
    /// No variational term and an unconditioned click-space teacher.
    EviNoVieCect,
    /// CTR plus click-space CVR loss.
    Naive,
    /// CTR plus CTCVR.
    Esmm,
    /// CTR plus inverse-propensity-weighted CVR loss.
    Ipw,
    /// CTR plus doubly robust CVR loss with an error-imputation tower.
    Dr,
    /// Click-space teacher, propensity-weighted distillation without the ½ factors.
    Ddpo,
    /// Entire-space teacher, unweighted distillation.
    EntireDistill,
}

/// How the CVR teacher is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherTraining {
    /// No teacher loss.
    None,
    /// Click-space BCE on the propensity-conditioned teacher.
    Conditional,
    /// Click-space BCE on a plain teacher.
    ClickSpace,
    /// BCE against `o·r` over all impressions on a plain teacher.
    EntireSpace,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Evi,
        Method::EviNoVie,
        Method::EviNoVieCect,
        Method::Naive,
        Method::Esmm,
        Method::Ipw,
        Method::Dr,
        Method::Ddpo,
        Method::EntireDistill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Evi => "evi",
            Method::EviNoVie => "evi-no-vie",
            Method::EviNoVieCect => "evi-no-vie-cect",
            Method::Naive => "naive",
            Method::Esmm => "esmm",
            Method::Ipw => "ipw",
            Method::Dr => "dr",
            Method::Ddpo => "ddpo",
            Method::EntireDistill => "entire-distill",
        }
    }

    pub fn teacher_training(self) -> TeacherTraining {
        match self {
            Method::Evi | Method::EviNoVie => TeacherTraining::Conditional,
            Method::EviNoVieCect | Method::Ddpo => TeacherTraining::ClickSpace,
            Method::EntireDistill => TeacherTraining::EntireSpace,
            Method::Naive | Method::Esmm | Method::Ipw | Method::Dr => TeacherTraining::None,
        }
    }

    pub fn teacher_input(self) -> TeacherInput {
        match self.teacher_training() {
            TeacherTraining::Conditional => TeacherInput::Conditioned,
            _ => TeacherInput::Plain,
        }
    }

    pub fn uses_imputation(self) -> bool {
        self == Method::Dr
    }

    /// Loss weights with the terms this method does not use set to zero.
    pub fn effective_weights(self, w: &LossWeights) -> LossWeights {
        let mut e = *w;
        match self {
            Method::Evi => {}
            Method::EviNoVie | Method::EviNoVieCect => e.lambda_i = 0.0,
            Method::Naive | Method::Ipw | Method::Dr => {
                e.lambda_t = 0.0;
                e.lambda_i = 0.0;
                e.lambda_g = 0.0;
            }
            Method::Esmm => {
                e.lambda_t = 0.0;
                e.lambda_r = 0.0;
                e.lambda_i = 0.0;
            }
            Method::Ddpo | Method::EntireDistill => {
                e.lambda_i = 0.0;
                e.lambda_g = 0.0;
            }
        }
        e
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                TrainError::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub propensity_clip: PropensityClip,
    pub transfer_layers: usize,
    pub seed: u64,
    /// Evaluate every this many epochs; the final epoch is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Evi,
            loss_weights: LossWeights::ali_ccp(),
            adam: AdamConfig::default(),
            batch_size: 8000,
            epochs: 5,
            propensity_clip: PropensityClip::default(),
            transfer_layers: 3,
            seed: 1,
            eval_every: 1,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in serialization order.
pub const CONFIG_KEYS: [&str; 17] = [
    "method",
    "lambda_c",
    "lambda_t",
    "lambda_r",
    "lambda_i",
    "lambda_g",
    "learning_rate",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_epsilon",
    "batch_size",
    "epochs",
    "propensity_clip",
    "transfer_layers",
    "seed",
    "eval_every",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .trim()
        .parse()
        .map_err(|_| TrainError::Config(format!("bad value {value:?} for {key}")))
}

/// Mini-batch size of [`TrainConfig::desk`].
pub const DESK_BATCH_SIZE: usize = 256;

impl TrainConfig {
    /// Defaults scaled to logs of about 10⁵ impressions: the default batch of
    /// 8000 gives only a dozen optimizer steps per epoch at that size.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: DESK_BATCH_SIZE,
            ..TrainConfig::default()
        }
    }

    /// Named trade-off presets: `ali-ccp` and `aliexpress`.
    pub fn with_preset(mut self, preset: &str) -> Result<Self, TrainError> {
        self.loss_weights = match preset {
            "ali-ccp" => LossWeights::ali_ccp(),
            "aliexpress" => LossWeights::aliexpress(),
            other => {
                return Err(TrainError::Config(format!(
                    "unknown preset {other:?}; expected ali-ccp or aliexpress"
                )))
            }
        };
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        LossWeights::new(
            self.loss_weights.lambda_c,
            self.loss_weights.lambda_t,
            self.loss_weights.lambda_r,
            self.loss_weights.lambda_i,
            self.loss_weights.lambda_g,
        )
        .map_err(|e| TrainError::Config(e.to_string()))?;
        let a = &self.adam;
        if !(a.learning_rate >= 0.0 && a.learning_rate.is_finite()) {
            return Err(TrainError::Config(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if !(a.weight_decay >= 0.0 && a.weight_decay.is_finite()) {
            return Err(TrainError::Config(
                "weight_decay must be finite and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(TrainError::Config("betas must lie in [0, 1)".into()));
        }
        if a.epsilon <= 0.0 {
            return Err(TrainError::Config("adam_epsilon must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(TrainError::Config(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        if !(1..=3).contains(&self.transfer_layers) {
            return Err(TrainError::Config(format!(
                "transfer_layers must be 1, 2 or 3, got {}",
                self.transfer_layers
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let w = &mut self.loss_weights;
        match key {
            "method" => self.method = value.trim().parse()?,
            "lambda_c" => w.lambda_c = parse(key, value)?,
            "lambda_t" => w.lambda_t = parse(key, value)?,
            "lambda_r" => w.lambda_r = parse(key, value)?,
            "lambda_i" => w.lambda_i = parse(key, value)?,
            "lambda_g" => w.lambda_g = parse(key, value)?,
            "learning_rate" => self.adam.learning_rate = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_epsilon" => self.adam.epsilon = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "propensity_clip" => {
                self.propensity_clip = PropensityClip::new(parse(key, value)?)
                    .map_err(|e| TrainError::Config(e.to_string()))?
            }
            "transfer_layers" => self.transfer_layers = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            other => return Err(TrainError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Flat `key=value` text, one pair per line, in [`CONFIG_KEYS`] order.
    pub fn to_kv(&self) -> String {
        let w = &self.loss_weights;
        let a = &self.adam;
        let values = [
            self.method.name().to_string(),
            w.lambda_c.to_string(),
            w.lambda_t.to_string(),
            w.lambda_r.to_string(),
            w.lambda_i.to_string(),
            w.lambda_g.to_string(),
            a.learning_rate.to_string(),
            a.weight_decay.to_string(),
            a.beta1.to_string(),
            a.beta2.to_string(),
            a.epsilon.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.propensity_clip.epsilon().to_string(),
            self.transfer_layers.to_string(),
            self.seed.to_string(),
            self.eval_every.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#` comments are skipped.
    pub fn apply_kv(mut self, text: &str) -> Result<Self, TrainError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(self)
    }
}
