//! Target-disease samplers, selected by name.

use rand::Rng;

use crate::data::{sample_categorical, EhrDataset};
use crate::error::{Error, Result};
use crate::metrics::{frequency, Level};
use crate::rng::StreamRng;

/// Draws the conditioning disease for one training iteration.
pub trait TargetSampler {
    fn name(&self) -> &'static str;
    fn sample(&self, rng: &mut StreamRng) -> usize;
}

/// Uniform over diseases that occur in at least one patient.
pub struct UniformTargets {
    support: Vec<usize>,
}

impl TargetSampler for UniformTargets {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn sample(&self, rng: &mut StreamRng) -> usize {
        self.support[rng.random_range(0..self.support.len())]
    }
}

/// Proportional to visit-level frequency.
pub struct EmpiricalTargets {
    weights: Vec<f64>,
}

impl TargetSampler for EmpiricalTargets {
    fn name(&self) -> &'static str {
        "empirical"
    }

    fn sample(&self, rng: &mut StreamRng) -> usize {
        sample_categorical(&self.weights, rng).expect("weights have mass")
    }
}

type Constructor = fn(&EhrDataset) -> Result<Box<dyn TargetSampler>>;

fn uniform(ds: &EhrDataset) -> Result<Box<dyn TargetSampler>> {
    let support = ds.supported_diseases();
    if support.is_empty() {
        return Err(Error::Dataset("no disease occurs in the data".into()));
    }
    Ok(Box::new(UniformTargets { support }))
}

fn empirical(ds: &EhrDataset) -> Result<Box<dyn TargetSampler>> {
    let weights = frequency(ds, Level::Visit)?.values;
    if weights.iter().all(|w| *w <= 0.0) {
        return Err(Error::Dataset("no disease occurs in the data".into()));
    }
    Ok(Box::new(EmpiricalTargets { weights }))
}

const REGISTRY: &[(&str, Constructor)] = &[("uniform", uniform), ("empirical", empirical)];

pub fn sampler_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn target_sampler(name: &str, ds: &EhrDataset) -> Result<Box<dyn TargetSampler>> {
    let (_, ctor) = REGISTRY.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        Error::Config(format!(
            "unknown target distribution {name:?}; expected one of {:?}",
            sampler_names()
        ))
    })?;
    ctor(ds)
}
