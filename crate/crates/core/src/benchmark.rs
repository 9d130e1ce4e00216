//! Scaled-down comparison of SOT-only against SOT with SD-CTC on synthetic
//! two-speaker mixtures, with matched seeds.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode::{beam_search, ctc_greedy, rescore, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{limit_speakers, ScoreReport, MAX_CPWER_SPEAKERS};
use crate::io::write_atomic;
use crate::model::{
    ctc_token_accuracy, encoder_forward, run_training, DataSource, MetricsRow, ModelConfig, Parameters, SpeakerMode,
    StagePlan, TrainConfig, METRICS_HEADER,
};
use crate::synth::{gen_single, make_dataset, sample_rng, MixtureSample, SynthConfig, SynthParams, UtterancePool};
use crate::vocab::Transcript;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub synth: SynthParams,
    /// Model shape; the seed is replaced by each pair's seed.
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    /// Stage-2 settings shared by both systems except for the CTC weight.
    pub stage2: TrainConfig,
    pub baseline_weight: f64,
    pub proposed_weight: f64,
    /// Single-speaker utterances; stage 2 mixes them afresh each epoch.
    pub pool_size: usize,
    pub p_two: f64,
    pub test_size: usize,
    /// Held-out single-speaker utterances for the stage-1 accuracy check.
    pub heldout_size: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub decode: DecodeConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let synth = SynthParams { noise_sigma: 0.7, ..SynthParams::default() };
        Self {
            model: ModelConfig {
                feature_dim: synth.feature_dim,
                context_window: 2,
                position_dim: 8,
                encoder_layers: 2,
                hidden_dim: 64,
                embed_dim: 16,
                decoder_dim: 64,
                vocab_size: synth.vocab_size,
                speakers: 2,
                seed: 0,
            },
            synth,
            stage1: TrainConfig { stage: 1, epochs: 10, learning_rate: 3e-3, ..TrainConfig::default() },
            stage2: TrainConfig { stage: 2, epochs: 30, learning_rate: 3e-3, ..TrainConfig::default() },
            baseline_weight: 0.0,
            proposed_weight: 0.3,
            pool_size: 4000,
            p_two: 0.5,
            test_size: 500,
            heldout_size: 500,
            data_seed: 1000,
            seeds: vec![1, 2, 3, 4, 5],
            decode: DecodeConfig { max_output_length: 16, ..DecodeConfig::default() },
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.decode.validate()?;
        if self.stage1.stage != 1 || self.stage2.stage != 2 {
            return Err(Error::InvalidArgument("benchmark stages must be 1 then 2".into()));
        }
        if self.model.feature_dim != self.synth.feature_dim || self.model.vocab_size != self.synth.vocab_size {
            return Err(Error::Mismatch("model and synthesizer disagree on feature or vocabulary size".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// cpWER of every system for one seed pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub seed: u64,
    pub stage1_accuracy: f64,
    pub baseline_aed: f64,
    pub proposed_aed: f64,
    pub proposed_rescored: f64,
    pub proposed_ctc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub pairs: Vec<PairResult>,
}

impl BenchmarkReport {
    /// Pairs where the proposed system (with rescoring) is no worse than the baseline.
    pub fn proposed_wins(&self) -> usize {
        self.pairs.iter().filter(|p| p.proposed_rescored <= p.baseline_aed).count()
    }

    /// Pairs where rescoring is no worse than decoder-only inference.
    pub fn rescoring_wins(&self) -> usize {
        self.pairs.iter().filter(|p| p.proposed_rescored <= p.proposed_aed).count()
    }

    pub fn mean(&self, f: impl Fn(&PairResult) -> f64) -> f64 {
        self.pairs.iter().map(f).sum::<f64>() / self.pairs.len().max(1) as f64
    }
}

/// Shared data of a benchmark run.
pub struct BenchmarkData {
    pub synth: SynthConfig,
    pub pool: UtterancePool,
    pub test: Vec<MixtureSample>,
    pub heldout: Vec<MixtureSample>,
}

impl BenchmarkData {
    pub fn generate(config: &BenchmarkConfig) -> Result<Self> {
        let synth = SynthConfig::from_params(config.synth.clone())?;
        let pool = UtterancePool::generate(&synth, config.pool_size, config.data_seed);
        let test = make_dataset(&synth, config.test_size, 1.0, config.data_seed + 1, 0)?;
        let heldout = (0..config.heldout_size)
            .map(|i| gen_single(&synth, &mut sample_rng(config.data_seed + 2, 0, i as u64)))
            .collect();
        Ok(Self { synth, pool, test, heldout })
    }
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

struct Decodes {
    aed: Vec<Vec<Transcript>>,
    rescored: Vec<Vec<Transcript>>,
    ctc: Vec<Vec<Transcript>>,
}

fn decode_test(params: &Parameters, model: &ModelConfig, test: &[MixtureSample], decode: &DecodeConfig) -> Result<Decodes> {
    let vocab = model.vocab();
    let mut out = Decodes { aed: Vec::new(), rescored: Vec::new(), ctc: Vec::new() };
    for s in test {
        let enc = encoder_forward(params, model, &s.features, SpeakerMode::Predicted)?;
        let hyps = beam_search(params, model, enc.hidden(), decode)?;
        let (best, _) = rescore(&hyps, &enc.ps, &enc.pv, &vocab, decode)?;
        out.aed.push(limit_speakers(hyps[0].segments(&vocab), MAX_CPWER_SPEAKERS));
        out.rescored.push(limit_speakers(best.segments(&vocab), MAX_CPWER_SPEAKERS));
        out.ctc.push(ctc_greedy(&enc.ps, &enc.pv));
    }
    Ok(out)
}

fn score(test: &[MixtureSample], hyps: &[Vec<Transcript>]) -> Result<ScoreReport> {
    ScoreReport::score(
        test.iter()
            .zip(hyps)
            .enumerate()
            .map(|(i, (s, h))| (i, s.transcripts.as_slice(), h.as_slice())),
    )
}

fn write_report(dir: &Path, name: &str, report: &ScoreReport) -> Result<()> {
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_atomic(&dir.join(format!("{name}_scores.csv")), &csv)?;
    write_atomic(&dir.join(format!("{name}_score.json")), report.aggregate_json()?.as_bytes())
}

/// Trains and evaluates one matched pair.
pub fn run_pair(config: &BenchmarkConfig, data: &BenchmarkData, seed: u64, out_dir: Option<&Path>) -> Result<PairResult> {
    let start = Instant::now();
    let model = ModelConfig { seed, ..config.model.clone() };
    let quiet = |_: &MetricsRow| Ok(());

    let stage1 = StagePlan {
        config: TrainConfig { seed, ..config.stage1.clone() },
        data: DataSource::Fixed(data.pool.singles()),
    };
    let pre = run_training(&model, None, &[stage1], None, quiet)?;
    let stage1_accuracy = ctc_token_accuracy(&pre.params, &model, &data.heldout)?;

    let stage2 = |weight: f64| StagePlan {
        config: TrainConfig { seed, ctc_weight: weight, ..config.stage2.clone() },
        data: DataSource::Pool {
            pool: data.pool.clone(),
            synth: Box::new(data.synth.clone()),
            p_two: config.p_two,
            seed,
        },
    };
    let baseline = run_training(&model, Some((pre.params.clone(), 1)), &[stage2(config.baseline_weight)], None, quiet)?;
    let proposed = run_training(&model, Some((pre.params.clone(), 1)), &[stage2(config.proposed_weight)], None, quiet)?;

    let base = decode_test(&baseline.params, &model, &data.test, &config.decode)?;
    let prop = decode_test(&proposed.params, &model, &data.test, &config.decode)?;
    let reports = [
        ("baseline_aed", score(&data.test, &base.aed)?),
        ("proposed_aed", score(&data.test, &prop.aed)?),
        ("proposed_aed+sdctc", score(&data.test, &prop.rescored)?),
        ("proposed_ctc", score(&data.test, &prop.ctc)?),
    ];

    if let Some(root) = out_dir {
        let dir = root.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("stage1_metrics.csv"), metrics_csv(&pre.history).as_bytes())?;
        write_atomic(&dir.join("baseline_metrics.csv"), metrics_csv(&baseline.history).as_bytes())?;
        write_atomic(&dir.join("proposed_metrics.csv"), metrics_csv(&proposed.history).as_bytes())?;
        for (name, report) in &reports {
            write_report(&dir, name, report)?;
        }
    }
    Ok(PairResult {
        seed,
        stage1_accuracy,
        baseline_aed: reports[0].1.cpwer,
        proposed_aed: reports[1].1.cpwer,
        proposed_rescored: reports[2].1.cpwer,
        proposed_ctc: reports[3].1.cpwer,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every seed pair, writing metric files under `out_dir` when given.
///
/// `progress` is called after each pair.
pub fn run_benchmark(
    config: &BenchmarkConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&PairResult),
) -> Result<BenchmarkReport> {
    config.validate()?;
    let data = BenchmarkData::generate(config)?;
    let mut pairs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let pair = run_pair(config, &data, seed, out_dir)?;
        progress(&pair);
        pairs.push(pair);
    }
    let report = BenchmarkReport { pairs };
    if let Some(root) = out_dir {
        let mut table = String::from("seed,stage1_accuracy,baseline_aed,proposed_aed,proposed_aed+sdctc,proposed_ctc\n");
        for p in &report.pairs {
            table.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.seed, p.stage1_accuracy, p.baseline_aed, p.proposed_aed, p.proposed_rescored, p.proposed_ctc
            ));
        }
        write_atomic(&root.join("summary.csv"), table.as_bytes())?;
    }
    Ok(report)
}
