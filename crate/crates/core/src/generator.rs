//! The sequence generator: one noise vector is decoded into first-visit
//! disease probabilities, a GRU rolls the sequence forward, and a softmax
//! attention over visits spreads one unit of extra probability for the
//! target disease across the sequence.

use ehr_autodiff::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::data::{sample_categorical, LengthHistogram, PatientRecord};
use crate::error::{Error, Result};
use crate::nn::{BoundGru, BoundLinear, GruCellParams, LinearParams};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<F> {
    /// (d, s), no bias: hidden state → visit logits.
    pub decode: LinearParams<F>,
    /// input d, hidden s.
    pub gru: GruCellParams<F>,
    /// (1, d), no bias: visit → attention logit.
    pub attention: LinearParams<F>,
}

#[derive(Clone, Debug)]
pub struct BoundGenerator {
    pub decode: BoundLinear,
    pub gru: BoundGru,
    pub attention: BoundLinear,
}

/// Graph nodes of a batched forward pass. Every per-visit entry is
/// (batch, d) or (batch, s); `scores` is (batch, T).
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub raw: Vec<Var>,
    pub calibrated: Vec<Var>,
    pub hidden: Vec<Var>,
    pub scores: Var,
}

/// One generated sequence, columns indexed by visit.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutput<F> {
    /// Calibrated probabilities, (d, T).
    pub probabilities: Tensor<F>,
    /// GRU states, (s, T); column t is the state after consuming visit t.
    pub hidden: Tensor<F>,
    /// Probabilities before calibration, (d, T).
    pub raw: Tensor<F>,
    /// Attention over visits, (T).
    pub scores: Tensor<F>,
}

impl<F: Real> GeneratorParams<F> {
    pub fn init<R: Rng + ?Sized>(d: usize, s: usize, rng: &mut R) -> Self {
        Self {
            decode: LinearParams::init(d, s, false, rng),
            gru: GruCellParams::init(d, s, rng),
            attention: LinearParams::init(1, d, false, rng),
        }
    }

    pub fn zeros(d: usize, s: usize) -> Self {
        Self {
            decode: LinearParams::zeros(d, s, false),
            gru: GruCellParams::zeros(d, s),
            attention: LinearParams::zeros(1, d, false),
        }
    }

    pub fn num_diseases(&self) -> usize {
        self.decode.out_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.decode.in_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, s) = (self.num_diseases(), self.hidden_dim());
        self.gru.validate()?;
        let checks = [
            ("hidden size", self.gru.hidden_dim(), "gru", s, "decoder"),
            ("disease count", self.gru.input_dim(), "gru", d, "decoder"),
            ("disease count", self.attention.in_dim(), "attention", d, "decoder"),
            ("attention width", self.attention.out_dim(), "attention", 1, "definition"),
        ];
        for (what, left, left_src, right, right_src) in checks {
            if left != right {
                return Err(Error::DimensionMismatch {
                    what,
                    left,
                    left_src,
                    right,
                    right_src,
                });
            }
        }
        if self.decode.bias.is_some() || self.attention.bias.is_some() {
            return Err(Error::Config("decoder and attention carry no bias".into()));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            decode: self.decode.bind(g, trainable),
            gru: self.gru.bind(g, trainable),
            attention: self.attention.bind(g, trainable),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        let mut out = self.decode.named(&format!("{prefix}.decode"));
        out.extend(self.gru.named(&format!("{prefix}.gru")));
        out.extend(self.attention.named(&format!("{prefix}.attn")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = self.decode.tensors_mut();
        out.extend(self.gru.tensors_mut());
        out.extend(self.attention.tensors_mut());
        out
    }
}

impl BoundGenerator {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.decode.vars();
        out.extend(self.gru.vars());
        out.extend(self.attention.vars());
        out
    }

    /// Decoded probabilities σ(W h) for a (batch, s) input.
    pub fn decode<F: Real>(&self, g: &mut Graph<F>, h: Var) -> Result<Var> {
        let logits = self.decode.forward(g, h)?;
        Ok(g.sigmoid(logits)?)
    }

    /// Raw probabilities and GRU states for `len` visits from noise (batch, s).
    pub fn unroll<F: Real>(&self, g: &mut Graph<F>, z: Var, len: usize) -> Result<(Vec<Var>, Vec<Var>)> {
        if len == 0 {
            return Err(Error::Config("sequence length must be at least 1".into()));
        }
        let mut raw = Vec::with_capacity(len);
        let mut hidden: Vec<Var> = Vec::with_capacity(len);
        raw.push(self.decode(g, z)?);
        for t in 0..len {
            let h = self.gru.step(g, raw[t], hidden.last().copied())?;
            hidden.push(h);
            if t + 1 < len {
                raw.push(self.decode(g, h)?);
            }
        }
        Ok((raw, hidden))
    }

    /// Softmax over visits of the attention logits, (batch, T).
    pub fn attention_scores<F: Real>(&self, g: &mut Graph<F>, raw: &[Var]) -> Result<Var> {
        let logits = raw
            .iter()
            .map(|p| self.attention.forward(g, *p))
            .collect::<Result<Vec<_>>>()?;
        let logits = g.concat(&logits, 1)?;
        Ok(g.softmax(logits, 1)?)
    }

    /// Full forward pass for one target per batch row. With `condition`
    /// off the calibrated probabilities are the raw ones.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        z: Var,
        targets: &[usize],
        len: usize,
        condition: bool,
    ) -> Result<GeneratorVars> {
        let batch = g.shape(z)[0];
        if targets.len() != batch {
            return Err(Error::DimensionMismatch {
                what: "batch size",
                left: targets.len(),
                left_src: "targets",
                right: batch,
                right_src: "noise",
            });
        }
        let (raw, hidden) = self.unroll(g, z, len)?;
        let scores = self.attention_scores(g, &raw)?;
        let calibrated = if condition {
            let d = g.shape(raw[0])[1];
            let onehot = g.constant(one_hot(targets, d)?);
            let mut out = Vec::with_capacity(len);
            for (t, p) in raw.iter().enumerate() {
                let col = g.slice(scores, 1, t, 1)?;
                let c = g.mul(onehot, col)?;
                let sum = g.add(*p, c)?;
                out.push(g.min_const(sum, 1.0)?);
            }
            out
        } else {
            raw.clone()
        };
        Ok(GeneratorVars {
            raw,
            calibrated,
            hidden,
            scores,
        })
    }
}

/// (rows, d) matrix with a single 1 per row at the row's target.
pub fn one_hot<F: Real>(targets: &[usize], d: usize) -> Result<Tensor<F>> {
    let mut m = Tensor::zeros(&[targets.len(), d]);
    for (b, &t) in targets.iter().enumerate() {
        if t >= d {
            return Err(Error::Config(format!("target {t} out of range for {d} diseases")));
        }
        m.set2(b, t, F::one());
    }
    Ok(m)
}

fn column<F: Real>(v: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(v.clone().reshaped(&[1, v.len()])?)
}

/// Stacks (1, w) rows into a (w, T) matrix.
fn columns<F: Real>(g: &Graph<F>, vars: &[Var]) -> Tensor<F> {
    let w = g.shape(vars[0])[1];
    let t = vars.len();
    let mut m = Tensor::zeros(&[w, t]);
    for (j, v) in vars.iter().enumerate() {
        for (i, x) in g.value(*v).data().iter().enumerate() {
            m.set2(i, j, *x);
        }
    }
    m
}

fn check_noise<F: Real>(params: &GeneratorParams<F>, z: &Tensor<F>) -> Result<()> {
    if z.len() != params.hidden_dim() {
        return Err(Error::DimensionMismatch {
            what: "noise length",
            left: z.len(),
            left_src: "noise",
            right: params.hidden_dim(),
            right_src: "generator",
        });
    }
    Ok(())
}

/// σ(W z) for one noise vector of length s.
pub fn decode_noise<F: Real>(params: &GeneratorParams<F>, z: &Tensor<F>) -> Result<Tensor<F>> {
    check_noise(params, z)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let zv = g.constant(column(z)?);
    let p = b.decode(&mut g, zv)?;
    Ok(g.value(p).clone().reshaped(&[params.num_diseases()])?)
}

/// Raw probabilities (d, T) and hidden states (s, T) for one sequence.
pub fn unroll<F: Real>(params: &GeneratorParams<F>, z: &Tensor<F>, len: usize) -> Result<(Tensor<F>, Tensor<F>)> {
    check_noise(params, z)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let zv = g.constant(column(z)?);
    let (raw, hidden) = b.unroll(&mut g, zv, len)?;
    Ok((columns(&g, &raw), columns(&g, &hidden)))
}

/// Softmax over visits of `W_v P_t` for probabilities of shape (d, T).
pub fn attention_scores<F: Real>(params: &GeneratorParams<F>, probs: &Tensor<F>) -> Result<Tensor<F>> {
    let d = params.num_diseases();
    if probs.rank() != 2 || probs.shape()[0] != d || probs.shape()[1] == 0 {
        return Err(Error::Config(format!(
            "probabilities must be ({d}, T) with T ≥ 1, got {:?}",
            probs.shape()
        )));
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let t = probs.shape()[1];
    let cols = (0..t)
        .map(|j| g.constant(Tensor::from_fn(&[1, d], |i| probs.at2(i, j))))
        .collect::<Vec<_>>();
    let s = b.attention_scores(&mut g, &cols)?;
    Ok(g.value(s).clone().reshaped(&[t])?)
}

/// (d, T) matrix that is zero except row `target`, which holds `scores`.
pub fn conditional_matrix<F: Real>(scores: &Tensor<F>, target: usize, d: usize) -> Result<Tensor<F>> {
    if target >= d {
        return Err(Error::Config(format!("target {target} out of range for {d} diseases")));
    }
    let t = scores.len();
    let mut c = Tensor::zeros(&[d, t]);
    for (j, s) in scores.data().iter().enumerate() {
        c.set2(target, j, *s);
    }
    Ok(c)
}

/// Elementwise min(1, P + c).
pub fn calibrate<F: Real>(probs: &Tensor<F>, cond: &Tensor<F>) -> Result<Tensor<F>> {
    if probs.shape() != cond.shape() {
        return Err(Error::Config(format!(
            "calibration shapes differ: {:?} vs {:?}",
            probs.shape(),
            cond.shape()
        )));
    }
    let data = probs
        .data()
        .iter()
        .zip(cond.data())
        .map(|(p, c)| (*p + *c).min(F::one()))
        .collect();
    Ok(Tensor::new(probs.shape().to_vec(), data)?)
}

/// One sequence for `target` of length `len`.
pub fn generate<F: Real>(
    params: &GeneratorParams<F>,
    z: &Tensor<F>,
    target: usize,
    len: usize,
    condition: bool,
) -> Result<GenerationOutput<F>> {
    let (raw, hidden) = unroll(params, z, len)?;
    let scores = attention_scores(params, &raw)?;
    let probabilities = if condition {
        let c = conditional_matrix(&scores, target, params.num_diseases())?;
        calibrate(&raw, &c)?
    } else {
        if target >= params.num_diseases() {
            return Err(Error::Config(format!("target {target} out of range")));
        }
        raw.clone()
    };
    Ok(GenerationOutput {
        probabilities,
        hidden,
        raw,
        scores,
    })
}

/// Independent Bernoulli draw per entry.
pub fn sample_discrete<F: Real, R: Rng + ?Sized>(probs: &Tensor<F>, rng: &mut R) -> Tensor<F> {
    let data = probs
        .data()
        .iter()
        .map(|p| {
            if rng.random::<f64>() < p.to_f64().unwrap_or(0.0) {
                F::one()
            } else {
                F::zero()
            }
        })
        .collect();
    Tensor::new(probs.shape().to_vec(), data).expect("same shape")
}

/// Noise of shape (rows, s), uniform on [0, 1).
///
/// The decoder has no bias, so noise symmetric about zero would pin the
/// mean first-visit probability of every disease at 1/2: σ(a) + σ(−a) = 1.
/// Non-negative noise lets the weights set the first visit's marginals.
pub fn sample_noise<F: Real, R: Rng + ?Sized>(rows: usize, s: usize, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(&[rows, s], |_| F::lit(rng.random::<f64>()))
}

/// Calibrated probabilities (batch, d) per visit for a batch of noise rows
/// and targets, all of length `len`.
pub fn generate_batch<F: Real>(
    params: &GeneratorParams<F>,
    z: Tensor<F>,
    targets: &[usize],
    len: usize,
    condition: bool,
) -> Result<Vec<Tensor<F>>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let zv = g.constant(z);
    let out = b.forward(&mut g, zv, targets, len, condition)?;
    Ok(out.calibrated.iter().map(|v| g.value(*v).clone()).collect())
}

/// Random streams consumed by [`Synthesizer`].
pub struct SynthesisRngs<R> {
    pub noise: R,
    pub target: R,
    pub length: R,
    pub bernoulli: R,
}

/// Draws synthetic patients: per patient a length from the real histogram,
/// a target uniform over `support`, one noise vector, then Bernoulli visits.
pub struct Synthesizer<'a, F, R> {
    params: &'a GeneratorParams<F>,
    lengths: &'a LengthHistogram,
    support: &'a [usize],
    condition: bool,
    rngs: SynthesisRngs<R>,
    produced: usize,
}

impl<'a, F: Real, R: Rng> Synthesizer<'a, F, R> {
    pub fn new(
        params: &'a GeneratorParams<F>,
        lengths: &'a LengthHistogram,
        support: &'a [usize],
        condition: bool,
        rngs: SynthesisRngs<R>,
    ) -> Result<Self> {
        params.validate()?;
        if support.is_empty() {
            return Err(Error::Dataset("no disease has support to condition on".into()));
        }
        Ok(Self {
            params,
            lengths,
            support,
            condition,
            rngs,
            produced: 0,
        })
    }

    pub fn produced(&self) -> usize {
        self.produced
    }

    /// The next `n` patients, in draw order.
    pub fn next_batch(&mut self, n: usize) -> Result<Vec<PatientRecord>> {
        let s = self.params.hidden_dim();
        let lens: Vec<usize> = (0..n).map(|_| self.lengths.sample(&mut self.rngs.length)).collect();
        let weights = vec![1.0; self.support.len()];
        let targets: Vec<usize> = (0..n)
            .map(|_| self.support[sample_categorical(&weights, &mut self.rngs.target).expect("nonempty")])
            .collect();
        let noise: Tensor<F> = sample_noise(n, s, &mut self.rngs.noise);

        let mut visits: Vec<Vec<Vec<usize>>> = vec![Vec::new(); n];
        for &len in self.lengths.lengths() {
            let rows: Vec<usize> = (0..n).filter(|i| lens[*i] == len).collect();
            if rows.is_empty() {
                continue;
            }
            let z = Tensor::from_fn(&[rows.len(), s], |k| noise.at2(rows[k / s], k % s));
            let tg: Vec<usize> = rows.iter().map(|i| targets[*i]).collect();
            let probs = generate_batch(self.params, z, &tg, len, self.condition)?;
            for p in &probs {
                let x = sample_discrete(p, &mut self.rngs.bernoulli);
                for (k, &row) in rows.iter().enumerate() {
                    let visit = x.row(k).iter().enumerate().filter(|(_, v)| **v > F::zero()).map(|(i, _)| i).collect();
                    visits[row].push(visit);
                }
            }
        }
        let start = self.produced;
        self.produced += n;
        Ok(visits
            .into_iter()
            .enumerate()
            .map(|(k, v)| PatientRecord::new(format!("S{:07}", start + k), v))
            .collect())
    }
}
