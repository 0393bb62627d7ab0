//! End to end on a small toy corpus: pre-train, train, checkpoint, draw
//! and evaluate through the public API.

use ehr_synth::checkpoint::Checkpoint;
use ehr_synth::data::{generate_toy_corpus, EhrDataset, ToyProcessSpec};
use ehr_synth::generator::{SynthesisRngs, Synthesizer};
use ehr_synth::metrics::{compare, evaluate, required_number_in, RequiredNumber};
use ehr_synth::pretrain::{pretrain, PretrainConfig, PretrainState};
use ehr_synth::rng::{RngStreams, StreamRng};
use ehr_synth::trainer::{
    read_pretrain, train, write_pretrain, GanModel, HistoryRecord, TrainConfig, TrainHistory, TrainObserver,
    TrainOutcome, TrainState,
};
use ehr_synth::Result;
use rand::SeedableRng;

const HIDDEN: usize = 8;

fn corpus() -> EhrDataset {
    generate_toy_corpus(&ToyProcessSpec::canonical(), 300).unwrap()
}

fn pretrained(ds: &EhrDataset) -> PretrainState<f32> {
    let mut cfg = PretrainConfig::new(HIDDEN);
    cfg.epochs = 2;
    cfg.batch_size = 64;
    pretrain::<f32>(ds, &cfg, &RngStreams::new(4)).unwrap().state
}

fn config(condition: bool) -> TrainConfig {
    TrainConfig {
        iterations: 30,
        batch_size: 16,
        hidden: HIDDEN,
        log_every: 10,
        checkpoint_every: 15,
        probe_size: 16,
        condition,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct Recorder {
    logs: Vec<u64>,
    checkpoints: Vec<u64>,
}

impl TrainObserver<f32> for Recorder {
    fn on_log(&mut self, record: &HistoryRecord) -> Result<()> {
        self.logs.push(record.iteration);
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState<f32>, _history: &TrainHistory) -> Result<()> {
        self.checkpoints.push(state.iteration);
        Ok(())
    }
}

fn rngs(seed: u64) -> SynthesisRngs<StreamRng> {
    let s = |k| StreamRng::seed_from_u64(seed * 4 + k);
    SynthesisRngs {
        noise: s(0),
        target: s(1),
        length: s(2),
        bernoulli: s(3),
    }
}

fn run(ds: &EhrDataset, pre: &PretrainState<f32>, condition: bool) -> (TrainOutcome<f32>, Recorder) {
    let mut rec = Recorder::default();
    let out = train(ds, &config(condition), pre, &mut rec).unwrap();
    (out, rec)
}

#[test]
fn training_is_reproducible_and_reports_on_schedule() {
    let ds = corpus();
    let pre = pretrained(&ds);
    let (a, rec) = run(&ds, &pre, true);
    let (b, _) = run(&ds, &pre, true);
    assert_eq!(a.state, b.state);
    assert_eq!(a.history.to_csv().unwrap(), b.history.to_csv().unwrap());
    assert_eq!(rec.logs, vec![10, 20, 30]);
    assert_eq!(rec.checkpoints, vec![15, 30]);
    assert_eq!(a.state.iteration, 30);
    for r in a.history.records() {
        assert!(r.critic_loss.is_finite() && r.gen_loss.is_finite());
        assert!(r.gen_disease_types <= ds.num_diseases());
    }
}

#[test]
fn the_ablation_toggle_changes_the_run() {
    let ds = corpus();
    let pre = pretrained(&ds);
    let (with, _) = run(&ds, &pre, true);
    let (without, _) = run(&ds, &pre, false);
    assert!(with.state.model.condition && !without.state.model.condition);
    assert_ne!(with.state.model.generator, without.state.model.generator);
}

#[test]
fn checkpoints_restore_the_full_training_state() {
    let ds = corpus();
    let pre = pretrained(&ds);
    let (out, _) = run(&ds, &pre, true);
    let bytes = out.state.to_checkpoint(&pre).to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(TrainState::<f32>::from_checkpoint(&ck).unwrap(), out.state);
    assert_eq!(read_pretrain::<f32>(&ck).unwrap(), pre);
    assert_eq!(GanModel::<f32>::read(&ck).unwrap(), out.state.model);

    let mut only_pre = Checkpoint::new();
    write_pretrain(&pre, &mut only_pre);
    let back = read_pretrain::<f32>(&Checkpoint::from_bytes(&only_pre.to_bytes()).unwrap()).unwrap();
    assert!(back.is_frozen());
    assert_eq!(back, pre);
}

#[test]
fn drawn_patients_are_valid_and_evaluate_within_range() {
    let ds = corpus();
    let pre = pretrained(&ds);
    let (out, _) = run(&ds, &pre, true);
    let model = &out.state.model;
    let hist = ds.length_histogram().unwrap();
    let support = ds.supported_diseases();
    let mut eval = Synthesizer::new(&model.generator, &hist, &support, true, rngs(1)).unwrap();
    let mut rn = Synthesizer::new(&model.generator, &hist, &support, true, rngs(2)).unwrap();
    let (report, synthetic) = evaluate(&ds, |n| eval.next_batch(n), |n| rn.next_batch(n), 1, 100_000).unwrap();

    assert_eq!(synthetic.len(), ds.len());
    for p in synthetic.patients() {
        assert!(hist.prob(p.len()) > 0.0, "length {} never occurs in the real data", p.len());
        assert!(p.visits.iter().flatten().all(|i| *i < ds.num_diseases()));
    }
    assert!(report.gt <= ds.num_diseases());
    assert!((0.0..=1.0).contains(&report.jsd_v) && (0.0..=1.0).contains(&report.jsd_p));
    assert!((0.0..=2.0).contains(&report.nd_v) && (0.0..=2.0).contains(&report.nd_p));

    let self_report = compare(&ds, &ds, required_number_in(&ds, ds.patients(), 1).unwrap()).unwrap();
    assert_eq!((self_report.jsd_v, self_report.nd_v, self_report.jsd_p, self_report.nd_p), (0.0, 0.0, 0.0, 0.0));
    assert!(matches!(self_report.rn, RequiredNumber::Count(n) if n as usize <= ds.len()));
}
