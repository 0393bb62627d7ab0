//! Alternating critic and generator optimization.

mod history;
mod state;
mod steps;
mod target;

pub use history::{HistoryRecord, TrainHistory, HISTORY_HEADER};
pub use state::{read_pretrain, write_pretrain, GanModel, TrainState};
pub use steps::{
    critic_loss, critic_step, generator_loss, generator_step, gradient_penalty, interpolate, interpolate_pair,
    CriticInputs, CriticLoss, CriticStepStats, StepRngs, TrainData,
};
pub use target::{sampler_names, target_sampler, EmpiricalTargets, TargetSampler, UniformTargets};

pub use crate::optim::{adam_step, AdamConfig, AdamState};

use ehr_autodiff::Real;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{SynthesisRngs, Synthesizer};
use crate::pretrain::PretrainState;
use crate::rng::{streams, RngStreams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    /// Multiplier applied to both rates every `decay_every` iterations.
    pub decay: f64,
    pub decay_every: u64,
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub hidden: usize,
    pub seed: u64,
    /// Critic sees temporal features next to each visit.
    pub hidden_critic: bool,
    /// Generator calibrates with the conditional matrix.
    pub condition: bool,
    /// Registered target sampler name.
    pub target_dist: String,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300_000,
            batch_size: 256,
            g_lr: 1e-4,
            d_lr: 1e-5,
            decay: 0.1,
            decay_every: 100_000,
            n_critic: 1,
            lambda_gp: 10.0,
            beta1: 0.5,
            beta2: 0.9,
            hidden: 256,
            seed: 0,
            hidden_critic: true,
            condition: true,
            target_dist: "uniform".into(),
            checkpoint_every: 10_000,
            log_every: 100,
            probe_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.hidden == 0 || self.n_critic == 0 {
            return bad("batch size, hidden size and n_critic must be positive");
        }
        if self.decay_every == 0 || self.checkpoint_every == 0 || self.log_every == 0 || self.probe_size == 0 {
            return bad("decay, checkpoint and logging intervals and the probe size must be positive");
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.g_lr) || !positive(self.d_lr) || !positive(self.decay) {
            return bad("learning rates and decay must be positive");
        }
        if !(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite()) {
            return bad("gradient penalty weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("momentum coefficients must lie in [0, 1)");
        }
        if !sampler_names().contains(&self.target_dist.as_str()) {
            return Err(Error::Config(format!(
                "unknown target distribution {:?}; expected one of {:?}",
                self.target_dist,
                sampler_names()
            )));
        }
        Ok(())
    }

    /// Rate in effect for the iteration after `completed` iterations.
    pub fn rate_at(&self, base: f64, completed: u64) -> f64 {
        base * self.decay.powi((completed / self.decay_every) as i32)
    }
}

/// Hooks called by [`train`]; both default to doing nothing.
pub trait TrainObserver<F> {
    fn on_log(&mut self, _record: &HistoryRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState<F>, _history: &TrainHistory) -> Result<()> {
        Ok(())
    }
}

impl<F> TrainObserver<F> for () {}

pub struct TrainOutcome<F> {
    pub state: TrainState<F>,
    pub history: TrainHistory,
}

/// Streams for a generation pass of the logging probe at `iteration`.
pub fn probe_rngs(rngs: &RngStreams, iteration: u64) -> SynthesisRngs<crate::rng::StreamRng> {
    let sub = |part: &str| rngs.substream(&format!("{}.{part}", streams::PROBE), iteration);
    SynthesisRngs {
        noise: sub("noise"),
        target: sub("target"),
        length: sub("length"),
        bernoulli: sub("bernoulli"),
    }
}

fn probe<F: Real>(
    state: &TrainState<F>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    rngs: &RngStreams,
    iteration: u64,
) -> Result<(usize, f64)> {
    let mut syn = Synthesizer::new(
        &state.model.generator,
        &data.lengths,
        &data.support,
        state.model.condition,
        probe_rngs(rngs, iteration),
    )?;
    let patients = syn.next_batch(cfg.probe_size)?;
    let mut seen = vec![false; data.ds.num_diseases()];
    let (mut codes, mut visits) = (0usize, 0usize);
    for v in patients.iter().flat_map(|p| &p.visits) {
        visits += 1;
        codes += v.len();
        v.iter().for_each(|i| seen[*i] = true);
    }
    Ok((seen.iter().filter(|s| **s).count(), codes as f64 / visits.max(1) as f64))
}

/// Runs `cfg.iterations` rounds of: draw a target and a batch length, take
/// `n_critic` critic steps, then one generator step.
pub fn train<F: Real>(
    ds: &crate::data::EhrDataset,
    cfg: &TrainConfig,
    pre: &PretrainState<F>,
    observer: &mut dyn TrainObserver<F>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if !pre.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let d = ds.num_diseases();
    let pp = pre.params();
    if pp.num_diseases() != d {
        return Err(Error::DimensionMismatch {
            what: "disease count",
            left: pp.num_diseases(),
            left_src: "pre-trained model",
            right: d,
            right_src: "dataset",
        });
    }
    if pp.hidden_dim() != cfg.hidden {
        return Err(Error::DimensionMismatch {
            what: "hidden size",
            left: pp.hidden_dim(),
            left_src: "pre-trained model",
            right: cfg.hidden,
            right_src: "training configuration",
        });
    }
    let data = TrainData::new(ds)?;
    let sampler = target_sampler(&cfg.target_dist, ds)?;
    let rngs = RngStreams::new(cfg.seed);
    let model = GanModel::init(d, cfg.hidden, cfg.hidden_critic, cfg.condition, &mut rngs.stream(streams::INIT));
    let mut state = TrainState::new(model);
    let mut step_rngs = StepRngs {
        target: rngs.stream(streams::TARGET),
        noise: rngs.stream(streams::NOISE),
        bernoulli: rngs.stream(streams::BERNOULLI),
        epsilon: rngs.stream(streams::EPSILON),
        shuffle: rngs.stream(streams::SHUFFLE),
    };
    let mut history = TrainHistory::new();

    while state.iteration < cfg.iterations {
        let done = state.iteration;
        let d_adam = AdamConfig::new(cfg.rate_at(cfg.d_lr, done), cfg.beta1, cfg.beta2);
        let g_adam = AdamConfig::new(cfg.rate_at(cfg.g_lr, done), cfg.beta1, cfg.beta2);
        let target = sampler.sample(&mut step_rngs.target);
        let len = data.prefix.sample_length(target, &data.lengths, &mut step_rngs.target)?;
        let mut stats = None;
        for _ in 0..cfg.n_critic {
            stats = Some(critic_step(
                &mut state.model,
                &mut state.critic_opt,
                pre,
                &data,
                target,
                len,
                cfg.batch_size,
                cfg.lambda_gp,
                &d_adam,
                &mut step_rngs,
            )?);
        }
        let stats = stats.expect("n_critic ≥ 1");
        let gen_loss = generator_step(
            &mut state.model,
            &mut state.gen_opt,
            target,
            len,
            cfg.batch_size,
            &g_adam,
            &mut step_rngs.noise,
        )?;
        if !(stats.loss.is_finite() && gen_loss.is_finite()) {
            return Err(Error::Computation(format!(
                "training diverged at iteration {}: critic loss {}, generator loss {gen_loss}",
                done + 1,
                stats.loss
            )));
        }
        state.iteration += 1;
        let it = state.iteration;
        if it % cfg.log_every == 0 {
            let (types, per_visit) = probe(&state, &data, cfg, &rngs, it)?;
            let rec = HistoryRecord {
                iteration: it,
                critic_loss: stats.loss,
                gen_loss,
                wasserstein: stats.wasserstein,
                gen_disease_types: types,
                avg_diseases_per_visit: per_visit,
            };
            observer.on_log(&rec)?;
            history.push(rec)?;
        }
        if it % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(&state, &history)?;
        }
    }
    Ok(TrainOutcome { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_corpus, ToyProcessSpec};
    use crate::pretrain::{PretrainParams, PretrainState};
    use rand::SeedableRng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 20,
            batch_size: 16,
            hidden: 8,
            log_every: 5,
            checkpoint_every: 10,
            probe_size: 32,
            seed: 11,
            g_lr: 1e-3,
            d_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn frozen(d: usize, s: usize) -> PretrainState<f32> {
        let mut rng = crate::rng::StreamRng::seed_from_u64(0);
        PretrainState::frozen(PretrainParams::init(d, s, &mut rng)).unwrap()
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.iterations, c.batch_size, c.n_critic, c.hidden), (300_000, 256, 1, 256));
        assert_eq!((c.g_lr, c.d_lr, c.decay, c.decay_every), (1e-4, 1e-5, 0.1, 100_000));
        assert_eq!((c.lambda_gp, c.beta1, c.beta2), (10.0, 0.5, 0.9));
        assert_eq!(c.rate_at(1e-4, 99_999), 1e-4);
        assert!((c.rate_at(1e-4, 100_000) - 1e-5).abs() < 1e-20);
        c.validate().unwrap();
        let bad = TrainConfig {
            target_dist: "zipf".into(),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let ds = generate_toy_corpus(&ToyProcessSpec::canonical(), 50).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..small_cfg()
        };
        let out = train(&ds, &cfg, &frozen(30, 8), &mut ()).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.state.iteration, 0);
    }

    #[test]
    fn short_run_is_deterministic_and_logs() {
        let ds = generate_toy_corpus(&ToyProcessSpec::canonical(), 120).unwrap();
        struct Count(usize, usize);
        impl TrainObserver<f32> for Count {
            fn on_log(&mut self, _: &HistoryRecord) -> Result<()> {
                self.0 += 1;
                Ok(())
            }
            fn on_checkpoint(&mut self, _: &TrainState<f32>, _: &TrainHistory) -> Result<()> {
                self.1 += 1;
                Ok(())
            }
        }
        let mut obs = Count(0, 0);
        let a = train(&ds, &small_cfg(), &frozen(30, 8), &mut obs).unwrap();
        assert_eq!((obs.0, obs.1), (4, 2));
        let b = train(&ds, &small_cfg(), &frozen(30, 8), &mut ()).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.history, b.history);
        let its: Vec<u64> = a.history.records().iter().map(|r| r.iteration).collect();
        assert_eq!(its, [5, 10, 15, 20]);
    }

    #[test]
    fn rejects_unfrozen_or_mismatched_pretraining() {
        let ds = generate_toy_corpus(&ToyProcessSpec::canonical(), 30).unwrap();
        let open = PretrainState::new(PretrainParams::<f32>::zeros(30, 8)).unwrap();
        assert!(matches!(train(&ds, &small_cfg(), &open, &mut ()), Err(Error::NotFrozen)));
        assert!(matches!(
            train(&ds, &small_cfg(), &frozen(30, 6), &mut ()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
