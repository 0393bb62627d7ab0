//! Statistical comparison of a synthetic dataset against a real one.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{EhrDataset, PatientRecord};
use crate::error::{Error, Result};

pub const RN_CAP: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Visit,
    Patient,
}

/// Relative frequency of each disease over visits or over patients.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyVector {
    pub level: Level,
    pub values: Vec<f64>,
    /// Number of visits or patients the counts are divided by.
    pub basis: usize,
}

impl FrequencyVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn frequency(ds: &EhrDataset, level: Level) -> Result<FrequencyVector> {
    frequency_of(ds.patients(), ds.num_diseases(), level)
}

/// Frequencies over raw records with `d` diseases. A patient counts once per
/// disease at patient level however many visits contain it.
pub fn frequency_of(patients: &[PatientRecord], d: usize, level: Level) -> Result<FrequencyVector> {
    if patients.is_empty() {
        return Err(Error::Dataset("frequencies of an empty dataset".into()));
    }
    let mut counts = vec![0u64; d];
    let mut basis = 0usize;
    let mut seen = vec![usize::MAX; d];
    for (p, rec) in patients.iter().enumerate() {
        for visit in &rec.visits {
            for &i in visit {
                match level {
                    Level::Visit => counts[i] += 1,
                    Level::Patient if seen[i] != p => {
                        seen[i] = p;
                        counts[i] += 1;
                    }
                    Level::Patient => {}
                }
            }
        }
        basis += match level {
            Level::Visit => rec.len(),
            Level::Patient => 1,
        };
    }
    if basis == 0 {
        return Err(Error::Dataset("frequencies over zero visits".into()));
    }
    Ok(FrequencyVector {
        level,
        values: counts.iter().map(|c| *c as f64 / basis as f64).collect(),
        basis,
    })
}

/// Number of distinct diseases appearing anywhere.
pub fn generated_types(ds: &EhrDataset) -> usize {
    ds.supported_diseases().len()
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            what: "disease count",
            left: p.len(),
            left_src: "first frequency vector",
            right: q.len(),
            right_src: "second frequency vector",
        });
    }
    Ok(())
}

fn check_levels(p: &FrequencyVector, q: &FrequencyVector) -> Result<()> {
    if p.level != q.level {
        return Err(Error::Config("frequency vectors of different levels".into()));
    }
    Ok(())
}

/// Jensen-Shannon divergence in bits between the two vectors after each is
/// scaled to sum to one.
pub fn jsd_values(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if sp <= 0.0 || sq <= 0.0 {
        return Err(Error::Config("divergence of an all-zero frequency vector".into()));
    }
    let kl_half = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        total += kl_half(a, m) + kl_half(b, m);
    }
    Ok((0.5 * total).max(0.0))
}

pub fn jsd(p: &FrequencyVector, q: &FrequencyVector) -> Result<f64> {
    check_levels(p, q)?;
    jsd_values(&p.values, &q.values)
}

/// `(1/d) Σ 2|p − q| / (p + q)` on raw frequencies; coordinates with
/// `p + q = 0` contribute nothing.
pub fn normalized_distance_values(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    if p.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| if a + b > 0.0 { 2.0 * (a - b).abs() / (a + b) } else { 0.0 })
        .sum();
    Ok(sum / p.len() as f64)
}

pub fn normalized_distance(p: &FrequencyVector, q: &FrequencyVector) -> Result<f64> {
    check_levels(p, q)?;
    normalized_distance_values(&p.values, &q.values)
}

/// Samples needed to cover every real disease, or the cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequiredNumber {
    Count(u64),
    Cap,
}

impl Serialize for RequiredNumber {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Count(n) => s.serialize_u64(*n),
            Self::Cap => s.serialize_str("cap"),
        }
    }
}

impl<'de> Deserialize<'de> for RequiredNumber {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Marker(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(Self::Count(n)),
            Raw::Marker(m) if m == "cap" => Ok(Self::Cap),
            Raw::Marker(m) => Err(serde::de::Error::custom(format!("expected integer or \"cap\", got {m:?}"))),
        }
    }
}

/// Tracks which of a set of required diseases have been seen.
struct Coverage {
    needed: Vec<bool>,
    missing: usize,
}

impl Coverage {
    fn new(real: &EhrDataset) -> Self {
        let needed: Vec<bool> = (0..real.num_diseases())
            .map(|i| !real.patients_with(i).is_empty())
            .collect();
        let missing = needed.iter().filter(|n| **n).count();
        Self { needed, missing }
    }

    fn observe(&mut self, rec: &PatientRecord) {
        for &i in rec.visits.iter().flatten() {
            if let Some(slot) = self.needed.get_mut(i) {
                if *slot {
                    *slot = false;
                    self.missing -= 1;
                }
            }
        }
    }

    fn done(&self) -> bool {
        self.missing == 0
    }
}

/// Pulls batches from `next_batch` until every disease present in `real`
/// has been generated. The count is a multiple of `batch` (the last batch
/// may be cut to stop exactly at `cap`).
pub fn required_number(
    real: &EhrDataset,
    batch: usize,
    cap: u64,
    mut next_batch: impl FnMut(usize) -> Result<Vec<PatientRecord>>,
) -> Result<RequiredNumber> {
    if batch == 0 || (batch as u64) > cap {
        return Err(Error::Config(format!("batch {batch} must be positive and at most the cap {cap}")));
    }
    let mut cov = Coverage::new(real);
    let mut total = 0u64;
    while !cov.done() {
        if total >= cap {
            return Ok(RequiredNumber::Cap);
        }
        let n = (batch as u64).min(cap - total) as usize;
        for rec in &next_batch(n)? {
            cov.observe(rec);
        }
        total += n as u64;
    }
    Ok(RequiredNumber::Count(total))
}

/// Patients of a fixed synthetic dataset, in file order, needed to cover the
/// real diseases, rounded up to a multiple of `batch`.
pub fn required_number_in(real: &EhrDataset, synthetic: &[PatientRecord], batch: usize) -> Result<RequiredNumber> {
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut cov = Coverage::new(real);
    for (k, rec) in synthetic.iter().enumerate() {
        cov.observe(rec);
        if cov.done() {
            let n = (k + 1).div_ceil(batch) * batch;
            return Ok(RequiredNumber::Count(n as u64));
        }
    }
    Ok(if cov.done() {
        RequiredNumber::Count(0)
    } else {
        RequiredNumber::Cap
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub gt: usize,
    pub jsd_v: f64,
    pub jsd_p: f64,
    pub nd_v: f64,
    pub nd_p: f64,
    pub rn: RequiredNumber,
}

/// The five distribution statistics plus a required number computed
/// elsewhere.
pub fn compare(real: &EhrDataset, synthetic: &EhrDataset, rn: RequiredNumber) -> Result<EvalReport> {
    if real.num_diseases() != synthetic.num_diseases() {
        return Err(Error::DimensionMismatch {
            what: "vocabulary size",
            left: real.num_diseases(),
            left_src: "real data",
            right: synthetic.num_diseases(),
            right_src: "synthetic data",
        });
    }
    let rv = frequency(real, Level::Visit)?;
    let rp = frequency(real, Level::Patient)?;
    let sv = frequency(synthetic, Level::Visit)?;
    let sp = frequency(synthetic, Level::Patient)?;
    Ok(EvalReport {
        gt: generated_types(synthetic),
        jsd_v: jsd(&rv, &sv)?,
        jsd_p: jsd(&rp, &sp)?,
        nd_v: normalized_distance(&rv, &sv)?,
        nd_p: normalized_distance(&rp, &sp)?,
        rn,
    })
}

/// Generates `|real|` patients for the distribution statistics, then keeps
/// drawing from `rn_source` batches until coverage or the cap.
pub fn evaluate(
    real: &EhrDataset,
    mut eval_source: impl FnMut(usize) -> Result<Vec<PatientRecord>>,
    rn_source: impl FnMut(usize) -> Result<Vec<PatientRecord>>,
    rn_batch: usize,
    cap: u64,
) -> Result<(EvalReport, EhrDataset)> {
    let synthetic = EhrDataset::new(real.vocab().clone(), eval_source(real.len())?)?;
    let rn = required_number(real, rn_batch, cap, rn_source)?;
    Ok((compare(real, &synthetic, rn)?, synthetic))
}
