use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sdctc::benchmark::BenchmarkConfig;
use sdctc::check::{run_suite, CheckReport, Suite};
use sdctc::decode::{decode_features, decoded_record, DecodeConfig, HypothesisFile, HYPOTHESIS_FILE_VERSION};
use sdctc::eval::{attention_dump, lda_projection, LdaClass, ScoreReport};
use sdctc::model::{
    decoder_forward, encoder_forward, run_training, speaker_mode, Checkpoint, DataSource, MetricsRow, ModelConfig,
    Parameters, SpeakerMode, StagePlan, TrainConfig, METRICS_HEADER,
};
use sdctc::sot::serialize;
use sdctc::synth::{make_dataset, parse_jsonl, write_jsonl, MixtureSample, SynthConfig, SynthParams};
use sdctc::Transcript;

use crate::error::{CliError, CliResult};
use crate::manifest::{file_name, sibling_manifest, write_output, RunManifest};
use crate::{CheckArgs, DecodeArgs, InspectArgs, ScoreArgs, SynthArgs, TrainArgs};

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Unreadable { path: path.into(), source })
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = read_input(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> CliResult<Vec<MixtureSample>> {
    let bytes = read_input(path)?;
    parse_jsonl(bytes.as_slice()).map_err(|source| CliError::Input { path: path.into(), source })
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, Parameters)> {
    let bytes = read_input(path)?;
    let input = |source: sdctc::Error| CliError::Input { path: path.into(), source };
    let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| input(e.into()))?;
    let params = ckpt.params().map_err(input)?;
    Ok((ckpt, params))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Unwritable { path: dir.into(), source: e.into() })
}

fn pretty_json(value: &impl Serialize) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(sdctc::Error::from)?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthRun {
    synth: SynthParams,
    n: usize,
    p_two: f64,
    seed: u64,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self { synth: SynthParams::default(), n: 100, p_two: 0.5, seed: 0 }
    }
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let mut run: SynthRun = load_config(args.config.as_deref())?;
    run.n = args.n.unwrap_or(run.n);
    run.p_two = args.p_two.unwrap_or(run.p_two);
    run.seed = args.seed.unwrap_or(run.seed);
    if !(0.0..=1.0).contains(&run.p_two) {
        return Err(CliError::Usage(format!("--p-two must lie in [0, 1], got {}", run.p_two)));
    }
    let config = SynthConfig::from_params(run.synth.clone())?;
    let samples = make_dataset(&config, run.n, run.p_two, run.seed, 0)?;
    let mut bytes = Vec::new();
    write_jsonl(&mut bytes, &samples)?;
    write_output(&args.out, &bytes)?;

    let mut manifest = RunManifest::new("synth", args.config.as_deref(), Some(run.seed), &args.out, &run)?;
    manifest.add(&file_name(&args.out), &bytes);
    manifest.write(&sibling_manifest(&args.out))?;
    eprintln!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRun {
    /// Defaults to the benchmark model; must match `--init` when both are given.
    model: Option<ModelConfig>,
    train: TrainConfig,
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut run: TrainRun = load_config(args.config.as_deref())?;
    let mut config = run.train.clone();
    config.stage = args.stage;
    config.epochs = args.epochs.unwrap_or(config.epochs);
    config.seed = args.seed.unwrap_or(config.seed);
    config.ctc_weight = args.ctc_weight.unwrap_or(config.ctc_weight);
    config.learning_rate = args.learning_rate.unwrap_or(config.learning_rate);
    config.validate()?;
    if args.stage == 2 && args.init.is_none() {
        return Err(CliError::Usage("stage 2 requires --init with a stage-1 checkpoint".into()));
    }

    let (model, init, history) = match &args.init {
        Some(path) => {
            let (ckpt, params) = load_checkpoint(path)?;
            if let Some(m) = &run.model {
                if *m != ckpt.model {
                    return Err(sdctc::Error::Shape("config model does not match the --init checkpoint".into()).into());
                }
            }
            (ckpt.model.clone(), Some((params, ckpt.stage)), ckpt.train)
        }
        None => (run.model.clone().unwrap_or_else(|| BenchmarkConfig::default().model), None, Vec::new()),
    };
    run.model = Some(model.clone());
    run.train = config.clone();

    let data = load_dataset(&args.data)?;
    let valid = args.valid.as_deref().map(load_dataset).transpose()?;
    let plan = StagePlan { config, data: DataSource::Fixed(data) };
    let mut rows: Vec<MetricsRow> = Vec::new();
    let trained = run_training(&model, init, &[plan], valid.as_deref(), |row| {
        eprintln!(
            "stage {} epoch {}: total {:.5} sot {:.5} sdctc {:.5}",
            row.stage, row.epoch, row.total, row.l_sot, row.l_sdctc
        );
        rows.push(row.clone());
        Ok(())
    })?;

    create_dir(&args.out)?;
    let configs = history.into_iter().chain(trained.configs.iter().cloned()).collect();
    let ckpt = Checkpoint::new(&model, &trained.params, trained.stage, configs)?;
    let ckpt_bytes = serde_json::to_vec(&ckpt).map_err(sdctc::Error::from)?;
    write_output(&args.out.join("checkpoint.json"), &ckpt_bytes)?;
    let mut metrics = format!("{METRICS_HEADER}\n");
    for row in &rows {
        metrics.push_str(&row.csv_line());
        metrics.push('\n');
    }
    write_output(&args.out.join("metrics.csv"), metrics.as_bytes())?;

    let mut manifest = RunManifest::new("train", args.config.as_deref(), Some(run.train.seed), &args.out, &run)?;
    manifest.add("checkpoint.json", &ckpt_bytes);
    manifest.add("metrics.csv", metrics.as_bytes());
    manifest.write(&args.out.join("manifest.json"))
}

pub fn decode(args: &DecodeArgs) -> CliResult<()> {
    let mut config: DecodeConfig = load_config(args.config.as_deref())?;
    config.beam_width = args.beam.unwrap_or(config.beam_width);
    config.weight = args.rescore_weight.unwrap_or(config.weight);
    config.max_output_length = args.max_output_length.unwrap_or(config.max_output_length);
    config.validate()?;

    let (ckpt, params) = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let vocab = ckpt.model.vocab();
    let speakers = speaker_mode(ckpt.stage);
    if speakers == SpeakerMode::Degenerate && data.iter().any(|s| s.speakers() > 1) {
        eprintln!("warning: stage-1 checkpoint decoding multi-speaker data");
    }
    let samples = data
        .iter()
        .enumerate()
        .map(|(id, s)| {
            let d = decode_features(&params, &ckpt.model, &s.features, speakers, args.mode, &config)?;
            Ok(decoded_record(id, &d, &vocab))
        })
        .collect::<sdctc::Result<Vec<_>>>()?;
    let file = HypothesisFile { version: HYPOTHESIS_FILE_VERSION, mode: args.mode, config, vocab, samples };
    let bytes = pretty_json(&file)?;
    write_output(&args.out, &bytes)?;

    let effective = serde_json::json!({
        "mode": args.mode,
        "decode": config,
        "checkpoint": args.checkpoint.display().to_string(),
        "data": args.data.display().to_string(),
    });
    let mut manifest = RunManifest::new("decode", args.config.as_deref(), None, &args.out, effective)?;
    manifest.add(&file_name(&args.out), &bytes);
    manifest.write(&sibling_manifest(&args.out))
}

/// Transcripts by sample id from a hypothesis file or a dataset.
fn load_transcripts(path: &Path) -> CliResult<BTreeMap<usize, Vec<Transcript>>> {
    let bytes = read_input(path)?;
    let input = |source: sdctc::Error| CliError::Input { path: path.into(), source };
    if let Ok(file) = serde_json::from_slice::<HypothesisFile>(&bytes) {
        file.check_version().map_err(input)?;
        return Ok(file.transcripts().map_err(input)?.into_iter().collect());
    }
    let data = parse_jsonl(bytes.as_slice()).map_err(input)?;
    Ok(data.into_iter().map(|s| s.transcripts).enumerate().collect())
}

pub fn score(args: &ScoreArgs) -> CliResult<()> {
    let refs = load_transcripts(&args.refs)?;
    let hyps = load_transcripts(&args.hyps)?;
    if !refs.keys().eq(hyps.keys()) {
        return Err(sdctc::Error::Mismatch(format!(
            "reference and hypothesis sample ids differ ({} vs {} samples)",
            refs.len(),
            hyps.len()
        ))
        .into());
    }
    let report = ScoreReport::score(refs.iter().map(|(&id, r)| (id, r.as_slice(), hyps[&id].as_slice())))?;

    create_dir(&args.out)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let json = pretty_json(&report)?;
    write_output(&args.out.join("scores.csv"), &csv)?;
    write_output(&args.out.join("score.json"), &json)?;

    let effective = serde_json::json!({
        "refs": args.refs.display().to_string(),
        "hyps": args.hyps.display().to_string(),
    });
    let mut manifest = RunManifest::new("score", None, None, &args.out, effective)?;
    manifest.add("scores.csv", &csv);
    manifest.add("score.json", &json);
    manifest.write(&args.out.join("manifest.json"))?;
    println!("cpWER {:.4} ({} edits / {} tokens)", report.cpwer, report.edits, report.ref_len);
    Ok(())
}

/// Frame class for the pooled LDA: frames next to the second speaker's onset
/// count as speaker-change frames, otherwise frames with exactly one active
/// speaker among the first two are labelled by that speaker.
fn frame_class(sample: &MixtureSample, t: usize) -> Option<LdaClass> {
    if let Some(&onset) = sample.onsets.get(1) {
        if t + 1 >= onset && t <= onset {
            return Some(LdaClass::SpeakerChange);
        }
    }
    match sample.frame_speakers[t].as_slice() {
        [1] => Some(LdaClass::Speaker1),
        [2] => Some(LdaClass::Speaker2),
        _ => None,
    }
}

pub fn inspect(args: &InspectArgs) -> CliResult<()> {
    let (ckpt, params) = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let model = &ckpt.model;
    let vocab = model.vocab();
    create_dir(&args.out)?;

    let mut manifest = RunManifest::new("inspect", None, None, &args.out, serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "data": args.data.display().to_string(),
    }))?;
    let mut pooled: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut origin = Vec::new();
    for (id, sample) in data.iter().enumerate() {
        let enc = encoder_forward(&params, model, &sample.features, speaker_mode(ckpt.stage))?;
        let target = serialize(&sample.transcripts, &vocab)?;
        let dec = decoder_forward(&params, model, enc.hidden(), &target)?;
        let mut csv = Vec::new();
        attention_dump(&dec.attention, &mut csv)?;
        let name = format!("attention_{id}.csv");
        write_output(&args.out.join(&name), &csv)?;
        manifest.add(&name, &csv);

        for (t, row) in enc.hidden().rows().into_iter().enumerate() {
            if let Some(class) = frame_class(sample, t) {
                pooled.extend(row.iter());
                labels.push(class as usize);
                origin.push((id, t, class));
            }
        }
    }

    let frames = Array2::from_shape_vec((labels.len(), model.hidden_dim), pooled).map_err(|e| sdctc::Error::Shape(e.to_string()))?;
    let lda = lda_projection(frames.view(), &labels)?;
    let mut csv = String::from("sample,frame,label,x,y\n");
    for ((id, t, class), xy) in origin.iter().zip(lda.coordinates.rows()) {
        let label = match class {
            LdaClass::Speaker1 => "speaker1",
            LdaClass::Speaker2 => "speaker2",
            LdaClass::SpeakerChange => "sc",
        };
        csv.push_str(&format!("{id},{t},{label},{},{}\n", xy[0], xy[1]));
    }
    write_output(&args.out.join("lda.csv"), csv.as_bytes())?;
    manifest.add("lda.csv", csv.as_bytes());
    manifest.write(&args.out.join("manifest.json"))
}

pub fn check(args: &CheckArgs) -> CliResult<()> {
    let suites = match args.suite {
        Some(s) => vec![s],
        None => Suite::ALL.to_vec(),
    };
    let mut reports: Vec<CheckReport> = Vec::new();
    for suite in suites {
        let report = run_suite(suite)?;
        for case in &report.cases {
            let status = if case.passed { "PASS" } else { "FAIL" };
            println!("{status} {}/{}: {}", report.suite, case.name, case.detail);
        }
        reports.push(report);
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        let json = pretty_json(&reports)?;
        write_output(&out.join("check.json"), &json)?;
        let effective = serde_json::json!({ "suites": reports.iter().map(|r| r.suite.clone()).collect::<Vec<_>>() });
        let mut manifest = RunManifest::new("check", None, None, out, effective)?;
        manifest.add("check.json", &json);
        manifest.write(&out.join("manifest.json"))?;
    }
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.suite.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}
