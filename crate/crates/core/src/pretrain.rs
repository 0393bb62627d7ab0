//! Next-visit pre-training of the GRU that supplies temporal features for
//! real sequences. After training the state is frozen and only then serves
//! features.

use ehr_autodiff::{Graph, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EhrDataset;
use crate::error::{Error, Result};
use crate::nn::{BoundGru, BoundLinear, GruCellParams, LinearParams};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{streams, RngStreams};

pub const PRETRAIN_EPOCHS: usize = 200;
pub const PRETRAIN_LR: f64 = 1e-3;
pub const PRETRAIN_BATCH: usize = 256;

/// Probability floor applied to both `ŷ` and `1 − ŷ` inside logarithms.
pub const BCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainParams<F> {
    /// input d, hidden s.
    pub gru: GruCellParams<F>,
    /// (d, s), no bias.
    pub decode: LinearParams<F>,
}

#[derive(Clone, Debug)]
pub struct BoundPretrain {
    pub gru: BoundGru,
    pub decode: BoundLinear,
}

impl<F: Real> PretrainParams<F> {
    pub fn init<R: Rng + ?Sized>(d: usize, s: usize, rng: &mut R) -> Self {
        Self {
            gru: GruCellParams::init(d, s, rng),
            decode: LinearParams::init(d, s, false, rng),
        }
    }

    pub fn zeros(d: usize, s: usize) -> Self {
        Self {
            gru: GruCellParams::zeros(d, s),
            decode: LinearParams::zeros(d, s, false),
        }
    }

    pub fn num_diseases(&self) -> usize {
        self.gru.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.gru.validate()?;
        if self.decode.in_dim() != self.hidden_dim() || self.decode.out_dim() != self.num_diseases() {
            return Err(Error::DimensionMismatch {
                what: "pre-training decoder width",
                left: self.decode.in_dim(),
                left_src: "decoder",
                right: self.hidden_dim(),
                right_src: "gru",
            });
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundPretrain {
        BoundPretrain {
            gru: self.gru.bind(g, trainable),
            decode: self.decode.bind(g, trainable),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        let mut out = self.gru.named(&format!("{prefix}.gru"));
        out.extend(self.decode.named(&format!("{prefix}.decode")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = self.gru.tensors_mut();
        out.extend(self.decode.tensors_mut());
        out
    }
}

impl BoundPretrain {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.gru.vars();
        out.extend(self.decode.vars());
        out
    }

    /// States after each visit, starting from the zero state.
    pub fn features<F: Real>(&self, g: &mut Graph<F>, xs: &[Var]) -> Result<Vec<Var>> {
        let mut hs: Vec<Var> = Vec::with_capacity(xs.len());
        for x in xs {
            let h = self.gru.step(g, *x, hs.last().copied())?;
            hs.push(h);
        }
        Ok(hs)
    }

    /// σ(W′ h) for each given state.
    pub fn predict<F: Real>(&self, g: &mut Graph<F>, hs: &[Var]) -> Result<Vec<Var>> {
        hs.iter()
            .map(|h| {
                let logits = self.decode.forward(g, *h)?;
                Ok(g.sigmoid(logits)?)
            })
            .collect()
    }
}

/// Elementwise `y ln ŷ + (1 − y) ln(1 − ŷ)`, both logarithms floored.
pub fn log_likelihood<F: Real>(g: &mut Graph<F>, yhat: Var, y: Var) -> Result<Var> {
    let ln_p = g.ln(yhat)?;
    let miss = g.rsub_scalar(1.0, yhat)?;
    let ln_q = g.ln(miss)?;
    let not_y = g.rsub_scalar(1.0, y)?;
    let a = g.mul(y, ln_p)?;
    let b = g.mul(not_y, ln_q)?;
    Ok(g.add(a, b)?)
}

/// Pre-trained parameters plus the freeze flag. Parameters cannot be
/// modified once frozen, and features are only served from a frozen state.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState<F> {
    params: PretrainParams<F>,
    frozen: bool,
}

impl<F: Real> PretrainState<F> {
    pub fn new(params: PretrainParams<F>) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            frozen: false,
        })
    }

    pub fn frozen(params: PretrainParams<F>) -> Result<Self> {
        Ok(Self::new(params)?.freeze())
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> &PretrainParams<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut PretrainParams<F>> {
        if self.frozen {
            return Err(Error::Config("pre-trained parameters are frozen".into()));
        }
        Ok(&mut self.params)
    }

    /// Features (batch, s) per visit for visits of shape (batch, d).
    pub fn features_batch(&self, xs: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        if !self.frozen {
            return Err(Error::NotFrozen);
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let xs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let hs = b.features(&mut g, &xs)?;
        Ok(hs.iter().map(|h| g.value(*h).clone()).collect())
    }
}

fn rows_to_columns<F: Real>(g: &Graph<F>, vars: &[Var], width: usize) -> Tensor<F> {
    let mut m = Tensor::zeros(&[width, vars.len()]);
    for (j, v) in vars.iter().enumerate() {
        for (i, x) in g.value(*v).data().iter().enumerate() {
            m.set2(i, j, *x);
        }
    }
    m
}

/// States H (s, T) and next-visit predictions ŷ (d, T − 1) for one
/// sequence `x` of shape (d, T).
pub fn next_visit_forward<F: Real>(params: &PretrainParams<F>, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    let d = params.num_diseases();
    if x.rank() != 2 || x.shape()[0] != d {
        return Err(Error::Config(format!("visits must be ({d}, T), got {:?}", x.shape())));
    }
    let t = x.shape()[1];
    if t == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let xs: Vec<Var> = (0..t)
        .map(|j| g.constant(Tensor::from_fn(&[1, d], |i| x.at2(i, j))))
        .collect();
    let hs = b.features(&mut g, &xs)?;
    let preds = b.predict(&mut g, &hs[..t - 1])?;
    Ok((
        rows_to_columns(&g, &hs, params.hidden_dim()),
        rows_to_columns(&g, &preds, d),
    ))
}

/// Summed binary cross-entropy `−Σ [y ln ŷ + (1 − y) ln(1 − ŷ)]`.
pub fn pretrain_loss<F: Real>(yhat: &Tensor<F>, y: &Tensor<F>) -> Result<F> {
    if yhat.shape() != y.shape() {
        return Err(Error::Config(format!(
            "prediction shape {:?} differs from label shape {:?}",
            yhat.shape(),
            y.shape()
        )));
    }
    let floor = F::lit(BCE_FLOOR);
    let one = F::one();
    Ok(-yhat
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, t)| *t * p.max(floor).ln() + (one - *t) * (one - *p).max(floor).ln())
        .sum::<F>())
}

/// Features of one sequence (d, T) as (s, T); requires a frozen state.
pub fn temporal_features<F: Real>(state: &PretrainState<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    if !state.is_frozen() {
        return Err(Error::NotFrozen);
    }
    Ok(next_visit_forward(state.params(), x)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
}

impl PretrainConfig {
    pub fn new(hidden: usize) -> Self {
        Self {
            epochs: PRETRAIN_EPOCHS,
            lr: PRETRAIN_LR,
            batch_size: PRETRAIN_BATCH,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("epochs, batch size and hidden size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Frozen state and mean loss per label visit for every epoch.
#[derive(Clone, Debug)]
pub struct PretrainOutcome<F> {
    pub state: PretrainState<F>,
    pub epoch_losses: Vec<f64>,
}

/// Trains on every patient with at least two visits. Batches are padded to
/// their longest member and padded labels are masked out; the loss is
/// averaged over label visits.
pub fn pretrain<F: Real>(ds: &EhrDataset, cfg: &PretrainConfig, rngs: &RngStreams) -> Result<PretrainOutcome<F>> {
    cfg.validate()?;
    let d = ds.num_diseases();
    let mut eligible: Vec<usize> = (0..ds.len()).filter(|p| ds.patients()[*p].len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Dataset("pre-training needs a patient with at least two visits".into()));
    }
    let mut init_rng = rngs.substream(streams::INIT, 1);
    let mut shuffle_rng = rngs.substream(streams::SHUFFLE, 1);
    let mut params = PretrainParams::<F>::init(d, cfg.hidden, &mut init_rng);
    let adam = AdamConfig::new(cfg.lr, 0.9, 0.999);
    let mut opt = AdamState::for_params(&params.tensors_mut());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        eligible.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut labels = 0usize;
        for chunk in eligible.chunks(cfg.batch_size) {
            let recs: Vec<_> = chunk.iter().map(|p| &ds.patients()[*p]).collect();
            let max_len = recs.iter().map(|r| r.len()).max().expect("nonempty chunk");
            let xs = crate::data::multi_hot_steps::<F>(&recs, max_len, d);
            let count: usize = recs.iter().map(|r| r.len() - 1).sum();

            let mut g = Graph::new();
            let b = params.bind(&mut g, true);
            let inputs: Vec<Var> = xs[..max_len - 1].iter().map(|x| g.constant(x.clone())).collect();
            let hs = b.features(&mut g, &inputs)?;
            let preds = b.predict(&mut g, &hs)?;
            let mut terms = Vec::with_capacity(preds.len());
            for (t, yhat) in preds.iter().enumerate() {
                let y = g.constant(xs[t + 1].clone());
                let mask = Tensor::from_fn(&[recs.len(), 1], |k| {
                    if recs[k].len() > t + 1 {
                        F::one()
                    } else {
                        F::zero()
                    }
                });
                let mask = g.constant(mask);
                let ll = log_likelihood(&mut g, *yhat, y)?;
                let ll = g.mul(ll, mask)?;
                terms.push(g.sum(ll)?);
            }
            let mut ll = terms[0];
            for t in &terms[1..] {
                ll = g.add(ll, *t)?;
            }
            let loss = g.scale(ll, -1.0 / count as f64)?;
            total += g.value(loss).item().expect("scalar").to_f64().unwrap_or(f64::NAN) * count as f64;
            labels += count;

            let vars = b.vars();
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor<F>> = vars
                .iter()
                .map(|v| grads.get_or_zeros(*v, g.shape(*v)))
                .collect();
            adam_step(&mut params.tensors_mut(), &grads, &mut opt, &adam)?;
        }
        epoch_losses.push(total / labels as f64);
    }
    Ok(PretrainOutcome {
        state: PretrainState::frozen(params)?,
        epoch_losses,
    })
}
