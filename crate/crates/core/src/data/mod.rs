//! Visit sequences, datasets and the sampling views the trainer needs.

mod io;
mod toy;

pub use io::{load_dataset, load_patients_file, save_dataset, PATIENTS_FILE, PATIENTS_GZ_FILE, VOCAB_FILE};
pub use toy::{generate_toy_corpus, oracle_frequencies, OracleFrequencies, ToyProcessSpec};

use std::collections::HashMap;

use ehr_autodiff::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered disease codes; a code's position is its index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    codes: Vec<String>,
}

impl Vocabulary {
    pub fn new(codes: Vec<String>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Dataset("vocabulary is empty".into()));
        }
        let mut seen = HashMap::with_capacity(codes.len());
        for (i, c) in codes.iter().enumerate() {
            if let Some(j) = seen.insert(c.as_str(), i) {
                return Err(Error::Dataset(format!("code {c:?} appears at indices {j} and {i}")));
            }
        }
        Ok(Self { codes })
    }

    /// Codes `D000`, `D001`, ...
    pub fn numbered(d: usize) -> Self {
        let width = d.saturating_sub(1).to_string().len().max(3);
        Self {
            codes: (0..d).map(|i| format!("D{i:0width$}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn code(&self, index: usize) -> Option<&str> {
        self.codes.get(index).map(String::as_str)
    }
}

/// One patient's visits, each a set of disease indices in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Vec<usize>>,
}

impl PatientRecord {
    /// Sorts and de-duplicates each visit.
    pub fn new(patient_id: impl Into<String>, mut visits: Vec<Vec<usize>>) -> Self {
        for v in &mut visits {
            v.sort_unstable();
            v.dedup();
        }
        Self {
            patient_id: patient_id.into(),
            visits,
        }
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn contains(&self, disease: usize) -> bool {
        self.visits.iter().any(|v| v.binary_search(&disease).is_ok())
    }
}

/// Vocabulary plus patients, with a disease → patients index.
#[derive(Clone, Debug, PartialEq)]
pub struct EhrDataset {
    vocab: Vocabulary,
    patients: Vec<PatientRecord>,
    index: Vec<Vec<usize>>,
}

impl EhrDataset {
    pub fn new(vocab: Vocabulary, patients: Vec<PatientRecord>) -> Result<Self> {
        let d = vocab.len();
        let mut index = vec![Vec::new(); d];
        for (p, rec) in patients.iter().enumerate() {
            if rec.visits.is_empty() {
                return Err(Error::Dataset(format!("patient {:?} has no visits", rec.patient_id)));
            }
            let mut present = Vec::new();
            for visit in &rec.visits {
                if !visit.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::Dataset(format!(
                        "patient {:?}: visit indices must be strictly ascending",
                        rec.patient_id
                    )));
                }
                for &i in visit {
                    if i >= d {
                        return Err(Error::Dataset(format!(
                            "patient {:?}: disease index {i} out of range for {d} codes",
                            rec.patient_id
                        )));
                    }
                    present.push(i);
                }
            }
            present.sort_unstable();
            present.dedup();
            for i in present {
                index[i].push(p);
            }
        }
        Ok(Self {
            vocab,
            patients,
            index,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_diseases(&self) -> usize {
        self.vocab.len()
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn num_visits(&self) -> usize {
        self.patients.iter().map(PatientRecord::len).sum()
    }

    /// Patients containing `disease` in any visit.
    pub fn patients_with(&self, disease: usize) -> &[usize] {
        self.index.get(disease).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Diseases that occur in at least one patient.
    pub fn supported_diseases(&self) -> Vec<usize> {
        (0..self.num_diseases())
            .filter(|i| !self.index[*i].is_empty())
            .collect()
    }

    pub fn max_len(&self) -> usize {
        self.patients.iter().map(PatientRecord::len).max().unwrap_or(0)
    }

    /// Mean number of diseases per visit.
    pub fn mean_visit_size(&self) -> f64 {
        let visits = self.num_visits();
        if visits == 0 {
            return 0.0;
        }
        let codes: usize = self
            .patients
            .iter()
            .flat_map(|p| p.visits.iter().map(Vec::len))
            .sum();
        codes as f64 / visits as f64
    }

    /// `n` records drawn uniformly with replacement from the patients
    /// containing `target`.
    pub fn conditional_batch<R: Rng + ?Sized>(
        &self,
        target: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<&PatientRecord>> {
        if target >= self.num_diseases() {
            return Err(Error::Config(format!(
                "target {target} out of range for {} diseases",
                self.num_diseases()
            )));
        }
        let pool = &self.index[target];
        if pool.is_empty() {
            return Err(Error::NoSupport(target));
        }
        Ok((0..n)
            .map(|_| &self.patients[pool[rng.random_range(0..pool.len())]])
            .collect())
    }

    pub fn length_histogram(&self) -> Result<LengthHistogram> {
        LengthHistogram::from_lengths(self.patients.iter().map(PatientRecord::len))
    }
}

/// Empirical distribution of sequence lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthHistogram {
    lengths: Vec<usize>,
    probs: Vec<f64>,
}

impl LengthHistogram {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut counts = std::collections::BTreeMap::new();
        let mut total = 0usize;
        for l in lengths {
            *counts.entry(l).or_insert(0usize) += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::Dataset("length histogram of an empty dataset".into()));
        }
        let (lengths, probs) = counts
            .into_iter()
            .map(|(l, c)| (l, c as f64 / total as f64))
            .unzip();
        Ok(Self { lengths, probs })
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, length: usize) -> f64 {
        self.lengths
            .binary_search(&length)
            .map(|i| self.probs[i])
            .unwrap_or(0.0)
    }

    pub fn max_len(&self) -> usize {
        *self.lengths.last().expect("histogram is nonempty")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sample_where(rng, |_| true)
            .expect("unrestricted histogram always has mass")
    }

    /// Draws from the histogram restricted to lengths accepted by `keep`.
    pub fn sample_where<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        keep: impl Fn(usize) -> bool,
    ) -> Option<usize> {
        let weights: Vec<f64> = self
            .lengths
            .iter()
            .zip(&self.probs)
            .map(|(l, p)| if keep(*l) { *p } else { 0.0 })
            .collect();
        sample_categorical(&weights, rng).map(|i| self.lengths[i])
    }
}

/// Index of a draw proportional to `weights`; `None` when all are zero.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(i);
        if u < acc {
            return Some(i);
        }
    }
    last
}

/// For every length `T` and disease `i`, the patients of length ≥ `T` whose
/// first `T` visits contain `i`. Training batches share one length, so real
/// sequences are cut to their first `T` visits.
#[derive(Clone, Debug)]
pub struct PrefixIndex {
    by_len: Vec<Vec<Vec<usize>>>,
}

impl PrefixIndex {
    pub fn new(ds: &EhrDataset) -> Self {
        let d = ds.num_diseases();
        let max_len = ds.max_len();
        let mut by_len = vec![vec![Vec::new(); d]; max_len];
        let mut first = vec![usize::MAX; d];
        for (p, rec) in ds.patients().iter().enumerate() {
            first.iter_mut().for_each(|f| *f = usize::MAX);
            for (t, visit) in rec.visits.iter().enumerate() {
                for &i in visit {
                    first[i] = first[i].min(t);
                }
            }
            for (i, &f) in first.iter().enumerate() {
                if f == usize::MAX {
                    continue;
                }
                for len in f + 1..=rec.len() {
                    by_len[len - 1][i].push(p);
                }
            }
        }
        Self { by_len }
    }

    pub fn pool(&self, target: usize, len: usize) -> &[usize] {
        if len == 0 || len > self.by_len.len() {
            return &[];
        }
        self.by_len[len - 1].get(target).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Batch length for `target`: the length histogram restricted to lengths
    /// at which some patient contains the target within its prefix.
    pub fn sample_length<R: Rng + ?Sized>(
        &self,
        target: usize,
        hist: &LengthHistogram,
        rng: &mut R,
    ) -> Result<usize> {
        hist.sample_where(rng, |l| !self.pool(target, l).is_empty())
            .ok_or(Error::NoSupport(target))
    }

    /// Patient indices drawn uniformly with replacement from `pool(target, len)`.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        target: usize,
        len: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let pool = self.pool(target, len);
        if pool.is_empty() {
            return Err(Error::NoSupport(target));
        }
        Ok((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect())
    }
}

/// Multi-hot encoding of the first `len` visits of each record: `len`
/// tensors of shape (records, d).
pub fn multi_hot_steps<F: Real>(records: &[&PatientRecord], len: usize, d: usize) -> Vec<Tensor<F>> {
    (0..len)
        .map(|t| {
            let mut m = Tensor::zeros(&[records.len(), d]);
            for (b, rec) in records.iter().enumerate() {
                if let Some(visit) = rec.visits.get(t) {
                    for &i in visit {
                        m.set2(b, i, F::one());
                    }
                }
            }
            m
        })
        .collect()
}
