use ehr_autodiff::{Real, Tensor};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::critic::CriticParams;
use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::nn::{GruCellParams, LinearParams, MlpParams};
use crate::optim::AdamState;
use crate::pretrain::{PretrainParams, PretrainState};

/// Generator and critic parameters plus the conditioning toggle they were
/// trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct GanModel<F> {
    pub generator: GeneratorParams<F>,
    pub critic: CriticParams<F>,
    pub condition: bool,
}

impl<F: Real> GanModel<F> {
    pub fn init<R: Rng + ?Sized>(d: usize, s: usize, hidden_critic: bool, condition: bool, rng: &mut R) -> Self {
        let generator = GeneratorParams::init(d, s, rng);
        let critic = CriticParams::init(d, s, hidden_critic, rng);
        Self {
            generator,
            critic,
            condition,
        }
    }

    pub fn num_diseases(&self) -> usize {
        self.generator.num_diseases()
    }

    pub fn hidden_dim(&self) -> usize {
        self.generator.hidden_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.critic.validate(self.num_diseases(), self.hidden_dim())
    }

    pub fn write(&self, ck: &mut Checkpoint) {
        for (name, t) in self.generator.named("gen").into_iter().chain(self.critic.named("critic")) {
            ck.put(name, t);
        }
        ck.put_meta("meta.condition", f64::from(u8::from(self.condition)));
        ck.put_meta("meta.hidden_critic", f64::from(u8::from(self.critic.uses_hidden)));
    }

    pub fn read(ck: &Checkpoint) -> Result<Self> {
        let decode = ck.get::<F>("gen.decode.w")?;
        if decode.rank() != 2 {
            return Err(Error::Checkpoint("gen.decode.w must be a matrix".into()));
        }
        let (d, s) = (decode.shape()[0], decode.shape()[1]);
        let generator = GeneratorParams {
            decode: LinearParams {
                weight: decode,
                bias: None,
            },
            gru: read_gru(ck, "gen.gru", d, s)?,
            attention: LinearParams {
                weight: ck.get_shaped("gen.attn.w", &[1, d])?,
                bias: None,
            },
        };
        let uses_hidden = flag(ck, "meta.hidden_critic")?;
        let mut layers = Vec::new();
        while ck.contains(&format!("critic.mlp.{}.w", layers.len())) {
            let i = layers.len();
            let weight = ck.get::<F>(&format!("critic.mlp.{i}.w"))?;
            let out = weight.shape().first().copied().unwrap_or(0);
            let bias = ck.get_shaped(&format!("critic.mlp.{i}.b"), &[out])?;
            layers.push(LinearParams {
                weight,
                bias: Some(bias),
            });
        }
        let model = Self {
            generator,
            critic: CriticParams {
                mlp: MlpParams { layers },
                uses_hidden,
            },
            condition: flag(ck, "meta.condition")?,
        };
        model.validate()?;
        Ok(model)
    }
}

fn flag(ck: &Checkpoint, name: &str) -> Result<bool> {
    match ck.meta(name)? {
        v if v == 0.0 => Ok(false),
        v if v == 1.0 => Ok(true),
        v => Err(Error::Checkpoint(format!("{name:?} must be 0 or 1, found {v}"))),
    }
}

fn read_gru<F: Real>(ck: &Checkpoint, prefix: &str, input: usize, s: usize) -> Result<GruCellParams<F>> {
    Ok(GruCellParams {
        w_ih: ck.get_shaped(&format!("{prefix}.w_ih"), &[3 * s, input])?,
        w_hh: ck.get_shaped(&format!("{prefix}.w_hh"), &[3 * s, s])?,
        bias: ck.get_shaped(&format!("{prefix}.bias"), &[3 * s])?,
    })
}

pub fn write_pretrain<F: Real>(pre: &PretrainState<F>, ck: &mut Checkpoint) {
    for (name, t) in pre.params().named("pre") {
        ck.put(name, t);
    }
    ck.put_meta("meta.pre.frozen", f64::from(u8::from(pre.is_frozen())));
}

pub fn read_pretrain<F: Real>(ck: &Checkpoint) -> Result<PretrainState<F>> {
    let decode = ck.get::<F>("pre.decode.w")?;
    if decode.rank() != 2 {
        return Err(Error::Checkpoint("pre.decode.w must be a matrix".into()));
    }
    let (d, s) = (decode.shape()[0], decode.shape()[1]);
    let params = PretrainParams {
        gru: read_gru(ck, "pre.gru", d, s)?,
        decode: LinearParams {
            weight: decode,
            bias: None,
        },
    };
    let state = PretrainState::new(params)?;
    Ok(if flag(ck, "meta.pre.frozen")? { state.freeze() } else { state })
}

fn write_adam<F: Real>(prefix: &str, opt: &AdamState<F>, ck: &mut Checkpoint) {
    for (k, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        ck.put(format!("{prefix}.m.{k}"), m);
        ck.put(format!("{prefix}.v.{k}"), v);
    }
    ck.put_meta(format!("{prefix}.step"), opt.step as f64);
}

fn read_adam<F: Real>(prefix: &str, shapes: &[Vec<usize>], ck: &Checkpoint) -> Result<AdamState<F>> {
    let mut m = Vec::with_capacity(shapes.len());
    let mut v = Vec::with_capacity(shapes.len());
    for (k, shape) in shapes.iter().enumerate() {
        m.push(ck.get_shaped::<F>(&format!("{prefix}.m.{k}"), shape)?);
        v.push(ck.get_shaped::<F>(&format!("{prefix}.v.{k}"), shape)?);
    }
    Ok(AdamState {
        m,
        v,
        step: ck.meta(&format!("{prefix}.step"))? as u64,
    })
}

/// Everything the training loop mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F> {
    pub model: GanModel<F>,
    pub gen_opt: AdamState<F>,
    pub critic_opt: AdamState<F>,
    pub iteration: u64,
}

impl<F: Real> TrainState<F> {
    pub fn new(mut model: GanModel<F>) -> Self {
        let gen_opt = AdamState::for_params(&model.generator.tensors_mut());
        let critic_opt = AdamState::for_params(&model.critic.tensors_mut());
        Self {
            model,
            gen_opt,
            critic_opt,
            iteration: 0,
        }
    }

    /// Full checkpoint: model, optimizer moments, and the frozen
    /// pre-trained feature extractor.
    pub fn to_checkpoint(&self, pre: &PretrainState<F>) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.model.write(&mut ck);
        write_pretrain(pre, &mut ck);
        write_adam("opt.gen", &self.gen_opt, &mut ck);
        write_adam("opt.critic", &self.critic_opt, &mut ck);
        ck.put_meta("meta.iteration", self.iteration as f64);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = GanModel::<F>::read(ck)?;
        let shapes = |ts: Vec<&mut Tensor<F>>| ts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        let gen_shapes = shapes(model.generator.tensors_mut());
        let critic_shapes = shapes(model.critic.tensors_mut());
        Ok(Self {
            gen_opt: read_adam("opt.gen", &gen_shapes, ck)?,
            critic_opt: read_adam("opt.critic", &critic_shapes, ck)?,
            iteration: ck.meta("meta.iteration")? as u64,
            model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = GanModel::<f32>::init(7, 5, true, false, &mut rng);
        let mut st = TrainState::new(model);
        st.iteration = 42;
        st.gen_opt.step = 42;
        st.critic_opt.m[1].data_mut()[0] = 0.5;
        let pre = PretrainState::frozen(PretrainParams::<f32>::init(7, 5, &mut rng)).unwrap();
        let ck = st.to_checkpoint(&pre);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(TrainState::<f32>::from_checkpoint(&back).unwrap(), st);
        assert_eq!(read_pretrain::<f32>(&back).unwrap(), pre);
        for name in ["gen.decode.w", "gen.gru.w_ih", "gen.attn.w", "critic.mlp.0.w", "pre.gru.bias", "pre.decode.w", "opt.gen.m.0"] {
            assert!(back.contains(name), "{name}");
        }
    }

    #[test]
    fn ablated_critic_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = GanModel::<f64>::init(4, 3, false, true, &mut rng);
        let mut ck = Checkpoint::new();
        model.write(&mut ck);
        let back = GanModel::<f64>::read(&ck).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.critic.input_dim(), 4);
    }
}
