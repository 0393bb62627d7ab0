use std::collections::VecDeque;
use std::path::Path;

use ehr_synth::checkpoint::{is_checkpoint, Checkpoint};
use ehr_synth::data::{
    generate_toy_corpus, load_dataset, load_patients_file, oracle_frequencies, save_dataset, EhrDataset, PatientRecord,
    ToyProcessSpec,
};
use ehr_synth::generator::{SynthesisRngs, Synthesizer};
use ehr_synth::metrics::{compare, evaluate as evaluate_model, required_number_in, EvalReport};
use ehr_synth::pretrain::{pretrain as run_pretrain, PretrainConfig, PretrainState};
use ehr_synth::rng::{RngStreams, StreamRng};
use ehr_synth::trainer::{
    read_pretrain, train as run_train, write_pretrain, GanModel, HistoryRecord, TrainHistory,
    TrainObserver, TrainState,
};
use ehr_synth::Error;
use serde::Serialize;

use crate::manifest::{in_dir, sibling, RunManifest};
use crate::{EvaluateArgs, Failure, GenerateArgs, MakeToyArgs, PretrainArgs, TrainArgs};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ORACLE_FILE: &str = "oracle.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const FINAL_CHECKPOINT: &str = "final.mtgn";

/// Patients drawn per generator call. Fixed so that output does not depend
/// on how a request is split.
const GENERATE_CHUNK: usize = 1024;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

pub fn make_toy(a: &MakeToyArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| Failure::Input(format!("{}: {e}", a.spec.display())))?;
    let mut spec: ToyProcessSpec =
        serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", a.spec.display())))?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;

    #[derive(Serialize)]
    struct Config<'a> {
        spec: &'a ToyProcessSpec,
        patients: usize,
        gzip: bool,
    }
    let config = Config {
        spec: &spec,
        patients: a.patients,
        gzip: a.gzip,
    };
    let manifest_path = in_dir(&a.out_dir, MANIFEST_FILE)?;
    let mut manifest = RunManifest::new("make-toy", spec.seed, &config)?;
    manifest.add_input(&a.spec)?;
    manifest.write(&manifest_path)?;

    let ds = generate_toy_corpus(&spec, a.patients)?;
    save_dataset(&ds, &a.out_dir, a.gzip)?;
    write_json(&a.out_dir.join(ORACLE_FILE), &oracle_frequencies(&spec)?)?;
    manifest.finish(&manifest_path)
}

pub fn pretrain(a: &PretrainArgs) -> Result<(), Failure> {
    if a.epochs == 0 {
        return Err(Failure::Input(
            "--epochs must be at least 1: the feature extractor is frozen only after training".into(),
        ));
    }
    let cfg = PretrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
        hidden: a.hidden,
    };
    cfg.validate()?;
    let ds = load_dataset(&a.data_dir)?;
    if let Some(parent) = a.out_checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Input(format!("{}: {e}", parent.display())))?;
    }
    let manifest_path = sibling(&a.out_checkpoint, "manifest.json");
    let mut manifest = RunManifest::new("pretrain", a.seed, &cfg)?;
    manifest.add_dataset(&a.data_dir)?;
    manifest.write(&manifest_path)?;

    let out = run_pretrain::<f32>(&ds, &cfg, &RngStreams::new(a.seed))?;
    let mut ck = Checkpoint::new();
    write_pretrain(&out.state, &mut ck);
    ck.save(&a.out_checkpoint)?;

    let mut csv = String::from("epoch,loss\n");
    for (i, l) in out.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    let loss_path = sibling(&a.out_checkpoint, "loss.csv");
    std::fs::write(&loss_path, csv).map_err(|e| Failure::Input(format!("{}: {e}", loss_path.display())))?;
    manifest.finish(&manifest_path)
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:07}.mtgn")
}

struct ArtifactWriter<'a> {
    out_dir: &'a Path,
    pre: &'a PretrainState<f32>,
    quiet: bool,
}

impl TrainObserver<f32> for ArtifactWriter<'_> {
    fn on_log(&mut self, r: &HistoryRecord) -> ehr_synth::Result<()> {
        if !self.quiet {
            eprintln!(
                "iter {:>7}  critic {:>10.4}  gen {:>10.4}  w-dist {:>9.4}  types {:>4}  per-visit {:.3}",
                r.iteration, r.critic_loss, r.gen_loss, r.wasserstein, r.gen_disease_types, r.avg_diseases_per_visit
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState<f32>, history: &TrainHistory) -> ehr_synth::Result<()> {
        state.to_checkpoint(self.pre).save(&self.out_dir.join(checkpoint_name(state.iteration)))?;
        history.save(&self.out_dir.join(HISTORY_FILE))
    }
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = a.config();
    cfg.validate()?;
    let ds = load_dataset(&a.data_dir)?;
    let pre = read_pretrain::<f32>(&Checkpoint::load(&a.pretrain_checkpoint)?)?;

    let manifest_path = in_dir(&a.out_dir, MANIFEST_FILE)?;
    let mut manifest = RunManifest::new("train", a.seed, &cfg)?;
    manifest.add_dataset(&a.data_dir)?;
    manifest.add_input(&a.pretrain_checkpoint)?;
    manifest.write(&manifest_path)?;

    let mut writer = ArtifactWriter {
        out_dir: &a.out_dir,
        pre: &pre,
        quiet: a.quiet,
    };
    let out = run_train(&ds, &cfg, &pre, &mut writer)?;
    out.state.to_checkpoint(&pre).save(&a.out_dir.join(FINAL_CHECKPOINT))?;
    out.history.save(&a.out_dir.join(HISTORY_FILE))?;
    manifest.finish(&manifest_path)
}

fn synthesis_rngs(rngs: &RngStreams, purpose: &str) -> SynthesisRngs<StreamRng> {
    let s = |part: &str| rngs.stream(&format!("{purpose}.{part}"));
    SynthesisRngs {
        noise: s("noise"),
        target: s("target"),
        length: s("length"),
        bernoulli: s("bernoulli"),
    }
}

fn load_model(path: &Path, ds: &EhrDataset) -> Result<GanModel<f32>, Failure> {
    let model = GanModel::<f32>::read(&Checkpoint::load(path)?)?;
    if model.num_diseases() != ds.num_diseases() {
        return Err(Error::DimensionMismatch {
            what: "disease count",
            left: model.num_diseases(),
            left_src: "checkpoint",
            right: ds.num_diseases(),
            right_src: "vocabulary",
        }
        .into());
    }
    Ok(model)
}

/// Draws `n` patients in fixed-size chunks.
fn draw(syn: &mut Synthesizer<'_, f32, StreamRng>, n: usize) -> ehr_synth::Result<Vec<PatientRecord>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        out.extend(syn.next_batch(GENERATE_CHUNK.min(n - out.len()))?);
    }
    Ok(out)
}

pub fn generate(a: &GenerateArgs) -> Result<(), Failure> {
    let ds = load_dataset(&a.data_dir)?;
    let model = load_model(&a.checkpoint, &ds)?;

    #[derive(Serialize)]
    struct Config {
        patients: usize,
        gzip: bool,
        condition: bool,
    }
    let manifest_path = in_dir(&a.out, MANIFEST_FILE)?;
    let config = Config {
        patients: a.patients,
        gzip: a.gzip,
        condition: model.condition,
    };
    let mut manifest = RunManifest::new("generate", a.seed, &config)?;
    manifest.add_input(&a.checkpoint)?;
    manifest.add_dataset(&a.data_dir)?;
    manifest.write(&manifest_path)?;

    let lengths = ds.length_histogram()?;
    let support = ds.supported_diseases();
    let rngs = RngStreams::new(a.seed);
    let mut syn = Synthesizer::new(
        &model.generator,
        &lengths,
        &support,
        model.condition,
        synthesis_rngs(&rngs, "generate"),
    )?;
    let patients = draw(&mut syn, a.patients)?;
    save_dataset(&EhrDataset::new(ds.vocab().clone(), patients)?, &a.out, a.gzip)?;
    manifest.finish(&manifest_path)
}

fn load_synthetic(path: &Path, real: &EhrDataset) -> Result<EhrDataset, Failure> {
    if path.is_dir() {
        let syn = load_dataset(path)?;
        if syn.num_diseases() == real.num_diseases() {
            if let Some(i) = (0..real.num_diseases()).find(|i| syn.vocab().code(*i) != real.vocab().code(*i)) {
                return Err(Failure::Input(format!(
                    "vocabularies differ at index {i}: {:?} in real data, {:?} in synthetic data",
                    real.vocab().code(i).unwrap_or_default(),
                    syn.vocab().code(i).unwrap_or_default()
                )));
            }
        }
        return Ok(syn);
    }
    let patients = load_patients_file(path, real.num_diseases())?;
    Ok(EhrDataset::new(real.vocab().clone(), patients)?)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let real = load_dataset(&a.real_dir)?;
    let from_checkpoint = is_checkpoint(&a.synthetic);

    #[derive(Serialize)]
    struct Config {
        rn_cap: u64,
        rn_batch: usize,
        from_checkpoint: bool,
    }
    let manifest_path = sibling(&a.out_report, "manifest.json");
    if let Some(parent) = a.out_report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Input(format!("{}: {e}", parent.display())))?;
    }
    let config = Config {
        rn_cap: a.rn_cap,
        rn_batch: a.rn_batch,
        from_checkpoint,
    };
    let mut manifest = RunManifest::new("evaluate", a.seed, &config)?;
    manifest.add_dataset(&a.real_dir)?;
    if a.synthetic.is_dir() {
        manifest.add_dataset(&a.synthetic)?;
    } else {
        manifest.add_input(&a.synthetic)?;
    }

    let report: EvalReport = if from_checkpoint {
        let model = load_model(&a.synthetic, &real)?;
        manifest.write(&manifest_path)?;
        let lengths = real.length_histogram()?;
        let support = real.supported_diseases();
        let rngs = RngStreams::new(a.seed);
        let new = |purpose| {
            Synthesizer::new(&model.generator, &lengths, &support, model.condition, synthesis_rngs(&rngs, purpose))
        };
        let (mut eval_syn, mut rn_syn) = (new("evaluate")?, new("required")?);
        // generate in fixed chunks, hand out whatever granularity RN counts in
        let mut pending = VecDeque::new();
        let rn_source = |n: usize| {
            while pending.len() < n {
                pending.extend(rn_syn.next_batch(GENERATE_CHUNK)?);
            }
            Ok(pending.drain(..n).collect())
        };
        evaluate_model(&real, |n| draw(&mut eval_syn, n), rn_source, a.rn_batch, a.rn_cap)?.0
    } else {
        let syn = load_synthetic(&a.synthetic, &real)?;
        manifest.write(&manifest_path)?;
        let rn = required_number_in(&real, syn.patients(), a.rn_batch)?;
        compare(&real, &syn, rn)?
    };
    write_json(&a.out_report, &report)?;
    manifest.finish(&manifest_path)
}
