//! Impression logs: the synthetic missing-not-at-random generator, the
//! columnar text format, seeded splits and mini-batching.
//!
//! Every impression passes through the funnel impression → click → conversion,
//! so a stored conversion is only ever 1 on a clicked record. On synthetic
//! data the generator also keeps the counterfactual conversion outcome of
//! unclicked records, which is what makes entire-space losses measurable.

mod io;
mod synthetic;

pub use io::{load_log, load_log_inferred, write_log};
pub use synthetic::{
    calibrate_shifts, generate_holdout, generate_synthetic, SyntheticConfig, SyntheticWorld,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error(
        "row {row}: conversion=1 on an unclicked impression violates the click→conversion funnel"
    )]
    Funnel { row: usize },
    #[error("header mismatch: {0}")]
    Header(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Number of categorical fields and the category count of each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSchema {
    cardinalities: Vec<usize>,
}

impl FieldSchema {
    pub fn new(cardinalities: Vec<usize>) -> Result<Self, DataError> {
        if cardinalities.is_empty() || cardinalities.contains(&0) {
            return Err(DataError::Config(
                "schema needs at least one field and non-zero cardinalities".into(),
            ));
        }
        Ok(FieldSchema { cardinalities })
    }

    pub fn num_fields(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }
}

/// Ground truth available only for synthetic logs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleLabels {
    pub ctr: f64,
    pub cvr: f64,
    /// Conversion outcome had the impression been clicked.
    pub conversion_all: bool,
}

/// One user–item impression. `features[f]` is the category of field `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpressionRecord {
    pub features: Vec<u32>,
    pub click: bool,
    pub conversion: bool,
    pub oracle: Option<OracleLabels>,
}

impl ImpressionRecord {
    pub fn click_f64(&self) -> f64 {
        f64::from(u8::from(self.click))
    }

    pub fn conversion_f64(&self) -> f64 {
        f64::from(u8::from(self.conversion))
    }
}

/// An immutable, validated impression log.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: FieldSchema,
    records: Vec<ImpressionRecord>,
    has_oracle: bool,
}

impl Dataset {
    /// Validates the funnel, schema bounds, oracle consistency, and that both
    /// the click and non-click spaces are non-empty.
    pub fn new(schema: FieldSchema, records: Vec<ImpressionRecord>) -> Result<Self, DataError> {
        let has_oracle = records.first().is_some_and(|r| r.oracle.is_some());
        for (row, r) in records.iter().enumerate() {
            if r.features.len() != schema.num_fields() {
                return Err(DataError::Schema(format!(
                    "record {row} has {} fields, schema has {}",
                    r.features.len(),
                    schema.num_fields()
                )));
            }
            for (f, (&c, &card)) in r.features.iter().zip(schema.cardinalities()).enumerate() {
                if c as usize >= card {
                    return Err(DataError::Schema(format!(
                        "record {row} field {f}: category {c} >= cardinality {card}"
                    )));
                }
            }
            if r.conversion && !r.click {
                return Err(DataError::Funnel { row });
            }
            if r.oracle.is_some() != has_oracle {
                return Err(DataError::Schema(format!(
                    "record {row}: oracle fields must be present on all records or none"
                )));
            }
        }
        let clicks = records.iter().filter(|r| r.click).count();
        if clicks == 0 || clicks == records.len() {
            return Err(DataError::Degenerate(format!(
                "{clicks} clicks out of {} records; both click and non-click spaces must be non-empty",
                records.len()
            )));
        }
        Ok(Dataset {
            schema,
            records,
            has_oracle,
        })
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn records(&self) -> &[ImpressionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_oracle(&self) -> bool {
        self.has_oracle
    }

    pub fn click_rate(&self) -> f64 {
        self.records.iter().filter(|r| r.click).count() as f64 / self.len() as f64
    }

    /// Conversion rate on the click space.
    pub fn conversion_rate_given_click(&self) -> f64 {
        let clicked: Vec<_> = self.records.iter().filter(|r| r.click).collect();
        clicked.iter().filter(|r| r.conversion).count() as f64 / clicked.len() as f64
    }

    /// `mean(true_cvr | click) - mean(true_cvr | no click)`; `None` without oracle.
    pub fn mnar_gap(&self) -> Option<f64> {
        if !self.has_oracle {
            return None;
        }
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
        for r in &self.records {
            let cvr = r.oracle.as_ref()?.cvr;
            if r.click {
                s1 += cvr;
                n1 += 1;
            } else {
                s0 += cvr;
                n0 += 1;
            }
        }
        Some(s1 / n1 as f64 - s0 / n0 as f64)
    }

    /// Copies the records at `indices` into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Dataset::new(self.schema.clone(), records)
    }
}

/// Seeded shuffle split into `(train, test)` with `round(n·fraction)` training records.
pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (d.len() as f64 * train_fraction).round() as usize;
    let (a, b) = order.split_at(cut);
    let train = d.subset(a)?;
    let test = d.subset(b)?;
    Ok((train, test))
}

/// Record-index blocks for one epoch: a permutation seeded by `(seed, epoch)`
/// cut into blocks of `batch_size` (the last may be short).
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(click: bool, conversion: bool) -> ImpressionRecord {
        ImpressionRecord {
            features: vec![0, 1],
            click,
            conversion,
            oracle: None,
        }
    }

    fn schema() -> FieldSchema {
        FieldSchema::new(vec![2, 2]).unwrap()
    }

    #[test]
    fn funnel_violation_rejected() {
        let err = Dataset::new(schema(), vec![rec(true, false), rec(false, true)]).unwrap_err();
        assert!(matches!(err, DataError::Funnel { row: 1 }));
    }

    #[test]
    fn single_space_rejected() {
        let err = Dataset::new(schema(), vec![rec(true, false), rec(true, true)]).unwrap_err();
        assert!(matches!(err, DataError::Degenerate(_)));
    }

    #[test]
    fn category_out_of_range_rejected() {
        let mut r = rec(true, false);
        r.features[1] = 2;
        let err = Dataset::new(schema(), vec![r, rec(false, false)]).unwrap_err();
        assert!(matches!(err, DataError::Schema(_)));
    }

    #[test]
    fn batches_cover_once() {
        let b = batches(10, 4, 3, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batches(10, 4, 3, 0));
    }

    #[test]
    fn epochs_reshuffle() {
        let a = batches(1000, 1000, 9, 0).concat();
        let b = batches(1000, 1000, 9, 1).concat();
        assert_ne!(a, b);
    }

    #[test]
    fn split_sizes_and_partition() {
        let records: Vec<_> = (0..1000).map(|i| rec(i % 3 == 0, i % 9 == 0)).collect();
        let d = Dataset::new(schema(), records).unwrap();
        let (tr, te) = split(&d, 0.8, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (800, 200));
        let (tr2, _) = split(&d, 0.8, 5).unwrap();
        assert_eq!(tr, tr2);
        assert!(split(&d, 1.0, 5).is_err());
    }
}
