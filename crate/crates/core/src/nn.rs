//! Linear maps, the GRU cell and the critic MLP, evaluated on a [`Graph`].
//!
//! Every block works on row batches: an input of shape (batch, in) produces
//! (batch, out). Parameters are plain tensors; `bind` registers them on a
//! graph either as trainable leaves or as constants.

use ehr_autodiff::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Uniform Glorot draw for a weight of shape (fan_out, fan_in).
pub fn glorot_uniform<F: Real, R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_out, fan_in], |_| F::lit(rng.random_range(-bound..=bound)))
}

/// `weight` is (out, in); `bias` is (out) when present.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<F> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl<F: Real> LinearParams<F> {
    pub fn init<R: Rng + ?Sized>(out: usize, inp: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(out, inp, rng),
            bias: bias.then(|| Tensor::zeros(&[out])),
        }
    }

    pub fn zeros(out: usize, inp: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[out, inp]),
            bias: bias.then(|| Tensor::zeros(&[out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: g.leaf(self.weight.clone(), trainable),
            bias: self.bias.as_ref().map(|b| g.leaf(b.clone(), trainable)),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![(format!("{prefix}.w"), &self.weight)];
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.b"), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }

    /// `weight · x (+ bias)` for a single input vector.
    pub fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = row(&mut g, x)?;
        let y = p.forward(&mut g, x)?;
        Ok(g.value(y).clone().reshaped(&[self.out_dim()])?)
    }
}

impl BoundLinear {
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let y = g.matmul_t(x, self.weight, false, true)?;
        match self.bias {
            Some(b) => Ok(g.add(y, b)?),
            None => Ok(y),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

fn row<F: Real>(g: &mut Graph<F>, x: &Tensor<F>) -> Result<Var> {
    let x = x.clone().reshaped(&[1, x.len()])?;
    Ok(g.constant(x))
}

/// GRU cell parameters with gate blocks stacked in the order update (z),
/// reset (r), candidate (n).
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)
/// r = σ(W_r x + U_r h + b_r)
/// n = tanh(W_n x + r ∘ (U_n h) + b_n)
/// h' = (1 − z) ∘ n + z ∘ h
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruCellParams<F> {
    /// (3s, in)
    pub w_ih: Tensor<F>,
    /// (3s, s)
    pub w_hh: Tensor<F>,
    /// (3s)
    pub bias: Tensor<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl<F: Real> GruCellParams<F> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_ih: glorot_uniform(3 * hidden, input, rng),
            w_hh: glorot_uniform(3 * hidden, hidden, rng),
            bias: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[3 * hidden, input]),
            w_hh: Tensor::zeros(&[3 * hidden, hidden]),
            bias: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.hidden_dim();
        let ok = self.w_hh.shape() == [3 * s, s]
            && self.w_ih.rank() == 2
            && self.w_ih.shape()[0] == 3 * s
            && self.bias.shape() == [3 * s];
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "inconsistent GRU blocks: w_ih {:?}, w_hh {:?}, bias {:?}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.bias.shape()
            )))
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundGru {
        BoundGru {
            w_ih: g.leaf(self.w_ih.clone(), trainable),
            w_hh: g.leaf(self.w_hh.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
            hidden: self.hidden_dim(),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        vec![
            (format!("{prefix}.w_ih"), &self.w_ih),
            (format!("{prefix}.w_hh"), &self.w_hh),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }

    /// One step for a single input vector and previous state.
    pub fn apply(&self, x: &Tensor<F>, h_prev: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = row(&mut g, x)?;
        let hv = row(&mut g, h_prev)?;
        let h = p.step(&mut g, xv, Some(hv))?;
        Ok(g.value(h).clone().reshaped(&[self.hidden_dim()])?)
    }
}

impl BoundGru {
    /// `h_prev = None` stands for the all-zero state.
    pub fn step<F: Real>(&self, g: &mut Graph<F>, x: Var, h_prev: Option<Var>) -> Result<Var> {
        let s = self.hidden;
        let gi = g.matmul_t(x, self.w_ih, false, true)?;
        let gi = g.add(gi, self.bias)?;
        let gi_z = g.slice(gi, 1, 0, s)?;
        let gi_r = g.slice(gi, 1, s, s)?;
        let gi_n = g.slice(gi, 1, 2 * s, s)?;
        let Some(h) = h_prev else {
            // U h vanishes: z = σ(gi_z), n = tanh(gi_n), h' = (1 − z) n.
            let z = g.sigmoid(gi_z)?;
            let n = g.tanh(gi_n)?;
            let zn = g.mul(z, n)?;
            return Ok(g.sub(n, zn)?);
        };
        let gh = g.matmul_t(h, self.w_hh, false, true)?;
        let gh_z = g.slice(gh, 1, 0, s)?;
        let gh_r = g.slice(gh, 1, s, s)?;
        let gh_n = g.slice(gh, 1, 2 * s, s)?;
        let z = g.add(gi_z, gh_z)?;
        let z = g.sigmoid(z)?;
        let r = g.add(gi_r, gh_r)?;
        let r = g.sigmoid(r)?;
        let rn = g.mul(r, gh_n)?;
        let n = g.add(gi_n, rn)?;
        let n = g.tanh(n)?;
        // n + z ∘ (h − n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        Ok(g.add(n, zd)?)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w_ih, self.w_hh, self.bias]
    }
}

/// Affine layers with a rectifier between consecutive layers; the last layer
/// is affine only.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<F> {
    pub layers: Vec<LinearParams<F>>,
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

impl<F: Real> MlpParams<F> {
    /// `widths = [in, hidden.., out]`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        Self {
            layers: widths
                .windows(2)
                .map(|w| LinearParams::init(w[1], w[0], true, rng))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Config(format!(
                    "MLP layer widths do not chain: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named(&format!("{prefix}.{i}")))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.validate()?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = row(&mut g, x)?;
        let y = p.forward(&mut g, xv)?;
        Ok(g.value(y).clone().reshaped(&[self.out_dim()])?)
    }
}

impl BoundMlp {
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn linear_examples() {
        let id = LinearParams {
            weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: None,
        };
        assert_eq!(id.apply(&t(&[1.0, 2.0])).unwrap(), t(&[1.0, 2.0]));

        let bias_only = LinearParams {
            weight: Tensor::zeros(&[1, 2]),
            bias: Some(t(&[3.0])),
        };
        assert_eq!(bias_only.apply(&t(&[5.0, -7.0])).unwrap(), t(&[3.0]));

        let w = LinearParams {
            weight: Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, -1.0]).unwrap(),
            bias: None,
        };
        assert_eq!(w.apply(&t(&[2.0, 3.0])).unwrap(), t(&[5.0, -1.0]));
        assert!(w.apply(&t(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn gru_zero_parameters() {
        let p = GruCellParams::<f64>::zeros(3, 2);
        let h = p.apply(&t(&[1.0, 0.0, 1.0]), &t(&[0.0, 0.0])).unwrap();
        assert_eq!(h, t(&[0.0, 0.0]));
        let h = p.apply(&t(&[1.0, 0.0, 1.0]), &t(&[0.4, -0.8])).unwrap();
        assert_eq!(h, t(&[0.2, -0.4]));
    }

    #[test]
    fn gru_rejects_bad_dims() {
        let p = GruCellParams::<f64>::zeros(3, 2);
        assert!(p.apply(&t(&[1.0, 0.0]), &t(&[0.0, 0.0])).is_err());
        assert!(p.apply(&t(&[1.0, 0.0, 0.0]), &t(&[0.0])).is_err());
    }

    #[test]
    fn mlp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let single = MlpParams::<f64>::init(&[3, 2], &mut rng);
        let x = t(&[0.5, -1.0, 2.0]);
        assert_eq!(single.apply(&x).unwrap(), single.layers[0].apply(&x).unwrap());

        let mut deep = MlpParams::<f64>::init(&[3, 4, 1], &mut rng);
        deep.layers[1].weight = Tensor::zeros(&[1, 4]);
        assert_eq!(deep.apply(&x).unwrap(), t(&[0.0]));

        // [[1, -1], [2, 1]] x + [0, -1] -> relu -> [1, 2] . h + 0.5
        let hand = MlpParams {
            layers: vec![
                LinearParams {
                    weight: Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 1.0]).unwrap(),
                    bias: Some(t(&[0.0, -1.0])),
                },
                LinearParams {
                    weight: Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
                    bias: Some(t(&[0.5])),
                },
            ],
        };
        // x = [1, 3]: pre = [-2, 4] -> relu [0, 4] -> 0 + 8 + 0.5
        assert_eq!(hand.apply(&t(&[1.0, 3.0])).unwrap(), t(&[8.5]));
        let broken = MlpParams {
            layers: vec![hand.layers[0].clone(), LinearParams::zeros(1, 3, true)],
        };
        assert!(broken.apply(&t(&[1.0, 3.0])).is_err());
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let a = MlpParams::<f32>::init(&[5, 4, 1], &mut ChaCha8Rng::seed_from_u64(9));
        let b = MlpParams::<f32>::init(&[5, 4, 1], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        for l in &a.layers {
            assert!(l.bias.as_ref().unwrap().data().iter().all(|x| *x == 0.0));
        }
        let g = GruCellParams::<f32>::init(4, 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(g.bias.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn glorot_draws_are_centered_and_bounded() {
        let w: Tensor<f64> = glorot_uniform(200, 500, &mut ChaCha8Rng::seed_from_u64(3));
        let bound = (6.0f64 / 700.0).sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= bound));
        let n = w.len() as f64;
        let mean = w.sum_all() / n;
        // uniform on [-b, b] has variance b^2 / 3
        let se = (bound * bound / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    }
}
