//! Sequence critic: an MLP scores each visit, concatenated with its temporal
//! feature, and the per-visit scores are averaged.

use ehr_autodiff::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BoundMlp, MlpParams};

pub const CRITIC_HIDDEN_UNITS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams<F> {
    pub mlp: MlpParams<F>,
    /// Visit vectors are concatenated with temporal features when set.
    pub uses_hidden: bool,
}

#[derive(Clone, Debug)]
pub struct BoundCritic {
    pub mlp: BoundMlp,
    pub uses_hidden: bool,
}

impl<F: Real> CriticParams<F> {
    /// MLP of widths (d + s, 64, 1), or (d, 64, 1) without temporal features.
    pub fn init<R: Rng + ?Sized>(d: usize, s: usize, uses_hidden: bool, rng: &mut R) -> Self {
        let input = if uses_hidden { d + s } else { d };
        Self {
            mlp: MlpParams::init(&[input, CRITIC_HIDDEN_UNITS, 1], rng),
            uses_hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    /// Checks the MLP against `d` diseases and hidden size `s`.
    pub fn validate(&self, d: usize, s: usize) -> Result<()> {
        self.mlp.validate()?;
        let want = if self.uses_hidden { d + s } else { d };
        if self.input_dim() != want {
            return Err(Error::DimensionMismatch {
                what: "critic input width",
                left: self.input_dim(),
                left_src: "critic",
                right: want,
                right_src: "data and hidden size",
            });
        }
        if self.mlp.out_dim() != 1 {
            return Err(Error::Config("critic output must be scalar".into()));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundCritic {
        BoundCritic {
            mlp: self.mlp.bind(g, trainable),
            uses_hidden: self.uses_hidden,
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        self.mlp.named(&format!("{prefix}.mlp"))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.mlp.tensors_mut()
    }
}

impl BoundCritic {
    pub fn vars(&self) -> Vec<Var> {
        self.mlp.vars()
    }

    /// Per-sample scores, shape (batch, 1), for visits `xs[t]` of shape
    /// (batch, d) and features `hs[t]` of shape (batch, s). All visits go
    /// through the MLP in one stacked pass.
    pub fn score<F: Real>(&self, g: &mut Graph<F>, xs: &[Var], hs: &[Var]) -> Result<Var> {
        let len = xs.len();
        if len == 0 {
            return Err(Error::Config("critic needs at least one visit".into()));
        }
        if self.uses_hidden && hs.len() != len {
            return Err(Error::DimensionMismatch {
                what: "visit count",
                left: xs.len(),
                left_src: "visits",
                right: hs.len(),
                right_src: "temporal features",
            });
        }
        let batch = g.shape(xs[0])[0];
        let inputs = if self.uses_hidden {
            xs.iter()
                .zip(hs)
                .map(|(x, h)| g.concat(&[*x, *h], 1))
                .collect::<std::result::Result<Vec<_>, _>>()?
        } else {
            xs.to_vec()
        };
        let stacked = g.concat(&inputs, 0)?;
        let per_visit = self.mlp.forward(g, stacked)?;
        let per_visit = g.reshape(per_visit, &[len, batch])?;
        let total = g.sum_axis(per_visit, 0)?;
        let mean = g.scale(total, 1.0 / len as f64)?;
        Ok(g.reshape(mean, &[batch, 1])?)
    }
}

fn columns_as_rows<F: Real>(g: &mut Graph<F>, m: &Tensor<F>) -> Vec<Var> {
    let (w, t) = (m.shape()[0], m.shape()[1]);
    (0..t)
        .map(|j| g.constant(Tensor::from_fn(&[1, w], |i| m.at2(i, j))))
        .collect()
}

/// Score of one sequence: visits `x` (d, T) and features `h` (s, T), the
/// latter ignored when the critic does not use temporal features.
pub fn score<F: Real>(params: &CriticParams<F>, x: &Tensor<F>, h: &Tensor<F>) -> Result<F> {
    if x.rank() != 2 || h.rank() != 2 {
        return Err(Error::Config("critic inputs must be (width, T) matrices".into()));
    }
    if params.uses_hidden && x.shape()[1] != h.shape()[1] {
        return Err(Error::DimensionMismatch {
            what: "visit count",
            left: x.shape()[1],
            left_src: "visits",
            right: h.shape()[1],
            right_src: "temporal features",
        });
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let xs = columns_as_rows(&mut g, x);
    let hs = if params.uses_hidden {
        columns_as_rows(&mut g, h)
    } else {
        Vec::new()
    };
    let r = b.score(&mut g, &xs, &hs)?;
    Ok(g.value(r).data()[0])
}
