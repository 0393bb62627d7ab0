//! Losses and single optimization steps of the adversarial game.

use ehr_autodiff::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::critic::BoundCritic;
use crate::data::{multi_hot_steps, LengthHistogram, PrefixIndex, EhrDataset};
use crate::error::{Error, Result};
use crate::generator::{sample_discrete, sample_noise, BoundGenerator};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::pretrain::PretrainState;
use crate::rng::StreamRng;

use super::GanModel;

/// Row-wise convex combination: row k is `eps[k]·a + (1 − eps[k])·b`.
pub fn interpolate<F: Real>(a: &Tensor<F>, b: &Tensor<F>, eps: &[F]) -> Result<Tensor<F>> {
    if a.shape() != b.shape() || a.rank() != 2 || a.shape()[0] != eps.len() {
        return Err(Error::Config(format!(
            "interpolation needs equal (rows, w) inputs and one weight per row; got {:?}, {:?} and {} weights",
            a.shape(),
            b.shape(),
            eps.len()
        )));
    }
    let w = a.shape()[1];
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(k, (x, y))| {
            let e = eps[k / w];
            e * *x + (F::one() - e) * *y
        })
        .collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

/// Interpolated visits and features sharing one weight per sample.
pub fn interpolate_pair<F: Real>(
    x: &Tensor<F>,
    x_fake: &Tensor<F>,
    h: &Tensor<F>,
    h_fake: &Tensor<F>,
    eps: &[F],
) -> Result<(Tensor<F>, Tensor<F>)> {
    Ok((interpolate(x, x_fake, eps)?, interpolate(h, h_fake, eps)?))
}

/// `λ · mean_k (‖∇ D(x̂_k, Ĥ_k)‖₂ − 1)²`, where the gradient is taken with
/// respect to all visit and feature entries of sample k jointly. The result
/// stays differentiable in the critic parameters.
pub fn gradient_penalty<F: Real>(
    g: &mut Graph<F>,
    critic: &BoundCritic,
    x_hat: &[Var],
    h_hat: &[Var],
    lambda: f64,
) -> Result<Var> {
    let scores = critic.score(g, x_hat, h_hat)?;
    let total = g.sum(scores)?;
    let wrt: Vec<Var> = if critic.uses_hidden {
        x_hat.iter().chain(h_hat).copied().collect()
    } else {
        x_hat.to_vec()
    };
    let grads = g.grads_as_nodes(total, &wrt)?;
    let joint = g.concat(&grads, 1)?;
    let norms = g.l2_norm_rows(joint)?;
    let dev = g.add_scalar(norms, -1.0)?;
    let sq = g.square(dev)?;
    let mean = g.mean(sq)?;
    Ok(g.scale(mean, lambda)?)
}

/// Graph nodes of the critic objective.
#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    pub loss: Var,
    pub real_mean: Var,
    pub fake_mean: Var,
    pub penalty: Var,
}

/// Tensors entering one critic update, each a list over visits.
pub struct CriticInputs<'a, F> {
    pub real_x: &'a [Tensor<F>],
    pub real_h: &'a [Tensor<F>],
    pub fake_x: &'a [Tensor<F>],
    pub fake_h: &'a [Tensor<F>],
    pub eps: &'a [F],
}

/// `mean D(x̃, H̃) − mean D(x, H) + penalty(x̂, Ĥ)`. Feature lists may be
/// empty when the critic does not use them.
pub fn critic_loss<F: Real>(
    g: &mut Graph<F>,
    critic: &BoundCritic,
    inputs: &CriticInputs<'_, F>,
    lambda: f64,
) -> Result<CriticLoss> {
    let consts = |g: &mut Graph<F>, ts: &[Tensor<F>]| ts.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>();
    let rx = consts(g, inputs.real_x);
    let rh = consts(g, inputs.real_h);
    let fx = consts(g, inputs.fake_x);
    let fh = consts(g, inputs.fake_h);
    let d_real = critic.score(g, &rx, &rh)?;
    let d_fake = critic.score(g, &fx, &fh)?;
    let real_mean = g.mean(d_real)?;
    let fake_mean = g.mean(d_fake)?;

    let mut x_hat = Vec::with_capacity(rx.len());
    for (a, b) in inputs.real_x.iter().zip(inputs.fake_x) {
        x_hat.push(g.leaf(interpolate(a, b, inputs.eps)?, true));
    }
    let mut h_hat = Vec::with_capacity(rh.len());
    if critic.uses_hidden {
        for (a, b) in inputs.real_h.iter().zip(inputs.fake_h) {
            h_hat.push(g.leaf(interpolate(a, b, inputs.eps)?, true));
        }
    }
    let penalty = gradient_penalty(g, critic, &x_hat, &h_hat, lambda)?;
    let w = g.sub(fake_mean, real_mean)?;
    let loss = g.add(w, penalty)?;
    Ok(CriticLoss {
        loss,
        real_mean,
        fake_mean,
        penalty,
    })
}

/// `−mean D(P̃, H̃)`: calibrated probabilities, not samples, feed the critic.
pub fn generator_loss<F: Real>(
    g: &mut Graph<F>,
    generator: &BoundGenerator,
    critic: &BoundCritic,
    z: Var,
    targets: &[usize],
    len: usize,
    condition: bool,
) -> Result<Var> {
    let out = generator.forward(g, z, targets, len, condition)?;
    let hs = if critic.uses_hidden { out.hidden.clone() } else { Vec::new() };
    let scores = critic.score(g, &out.calibrated, &hs)?;
    let mean = g.mean(scores)?;
    Ok(g.neg(mean)?)
}

/// The real data views the steps draw from.
pub struct TrainData<'a> {
    pub ds: &'a EhrDataset,
    pub prefix: PrefixIndex,
    pub lengths: LengthHistogram,
    pub support: Vec<usize>,
}

impl<'a> TrainData<'a> {
    pub fn new(ds: &'a EhrDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Dataset("training data is empty".into()));
        }
        let support = ds.supported_diseases();
        if support.is_empty() {
            return Err(Error::Dataset("no disease occurs in the training data".into()));
        }
        Ok(Self {
            ds,
            prefix: PrefixIndex::new(ds),
            lengths: ds.length_histogram()?,
            support,
        })
    }

    /// Multi-hot visits of `n` patients containing `target` within their
    /// first `len` visits, cut to those visits.
    pub fn real_batch<F: Real>(&self, target: usize, len: usize, n: usize, rng: &mut StreamRng) -> Result<Vec<Tensor<F>>> {
        let idx = self.prefix.batch(target, len, n, rng)?;
        let recs: Vec<_> = idx.iter().map(|p| &self.ds.patients()[*p]).collect();
        Ok(multi_hot_steps(&recs, len, self.ds.num_diseases()))
    }
}

/// Random streams of the training loop.
pub struct StepRngs {
    pub target: StreamRng,
    pub noise: StreamRng,
    pub bernoulli: StreamRng,
    pub epsilon: StreamRng,
    pub shuffle: StreamRng,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStepStats {
    pub loss: f64,
    /// `mean D(real) − mean D(fake)`.
    pub wasserstein: f64,
}

fn scalar<F: Real>(g: &Graph<F>, v: Var) -> f64 {
    g.value(v).item().and_then(|x| x.to_f64()).unwrap_or(f64::NAN)
}

fn apply_grads<F: Real>(
    g: &mut Graph<F>,
    loss: Var,
    vars: &[Var],
    mut params: Vec<&mut Tensor<F>>,
    opt: &mut AdamState<F>,
    adam: &AdamConfig,
) -> Result<()> {
    let grads = g.backward(loss)?;
    let grads: Vec<Tensor<F>> = vars.iter().map(|v| grads.get_or_zeros(*v, g.shape(*v))).collect();
    adam_step(&mut params, &grads, opt, adam)
}

/// One critic update for `target` on a batch of sequences of length `len`.
/// Only critic parameters change.
#[allow(clippy::too_many_arguments)]
pub fn critic_step<F: Real>(
    model: &mut GanModel<F>,
    opt: &mut AdamState<F>,
    pre: &PretrainState<F>,
    data: &TrainData<'_>,
    target: usize,
    len: usize,
    batch: usize,
    lambda: f64,
    adam: &AdamConfig,
    rngs: &mut StepRngs,
) -> Result<CriticStepStats> {
    let real_x: Vec<Tensor<F>> = data.real_batch(target, len, batch, &mut rngs.shuffle)?;
    let real_h = if model.critic.uses_hidden {
        pre.features_batch(&real_x)?
    } else {
        Vec::new()
    };

    let s = model.hidden_dim();
    let targets = vec![target; batch];
    let (fake_x, fake_h) = {
        let mut g = Graph::new();
        let gen = model.generator.bind(&mut g, false);
        let z = g.constant(sample_noise(batch, s, &mut rngs.noise));
        let out = gen.forward(&mut g, z, &targets, len, model.condition)?;
        let fx: Vec<Tensor<F>> = out
            .calibrated
            .iter()
            .map(|p| sample_discrete(g.value(*p), &mut rngs.bernoulli))
            .collect();
        let fh: Vec<Tensor<F>> = if model.critic.uses_hidden {
            out.hidden.iter().map(|h| g.value(*h).clone()).collect()
        } else {
            Vec::new()
        };
        (fx, fh)
    };
    let eps: Vec<F> = (0..batch).map(|_| F::lit(rngs.epsilon.random::<f64>())).collect();

    let mut g = Graph::new();
    let critic = model.critic.bind(&mut g, true);
    let inputs = CriticInputs {
        real_x: &real_x,
        real_h: &real_h,
        fake_x: &fake_x,
        fake_h: &fake_h,
        eps: &eps,
    };
    let parts = critic_loss(&mut g, &critic, &inputs, lambda)?;
    let stats = CriticStepStats {
        loss: scalar(&g, parts.loss),
        wasserstein: scalar(&g, parts.real_mean) - scalar(&g, parts.fake_mean),
    };
    apply_grads(&mut g, parts.loss, &critic.vars(), model.critic.tensors_mut(), opt, adam)?;
    Ok(stats)
}

/// One generator update; only generator parameters change.
#[allow(clippy::too_many_arguments)]
pub fn generator_step<F: Real>(
    model: &mut GanModel<F>,
    opt: &mut AdamState<F>,
    target: usize,
    len: usize,
    batch: usize,
    adam: &AdamConfig,
    noise: &mut StreamRng,
) -> Result<f64> {
    let mut g = Graph::new();
    let gen = model.generator.bind(&mut g, true);
    let critic = model.critic.bind(&mut g, false);
    let z = g.constant(sample_noise(batch, model.hidden_dim(), noise));
    let targets = vec![target; batch];
    let loss = generator_loss(&mut g, &gen, &critic, z, &targets, len, model.condition)?;
    let value = scalar(&g, loss);
    apply_grads(&mut g, loss, &gen.vars(), model.generator.tensors_mut(), opt, adam)?;
    Ok(value)
}
