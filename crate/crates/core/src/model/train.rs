//! Multi-task objective, Adam updates with stage-dependent freezing, and
//! the two-stage training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::decoder::{decoder_backward, decoder_forward};
use super::encoder::{encoder_backward, encoder_forward, SpeakerMode};
use super::params::{ModelConfig, ParamGroup, Parameters};
use crate::ctc::{ctc_loss, min_frames};
use crate::decode::{decode_features, ctc_greedy, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::eval::{edit_distance, ScoreReport};
use crate::grid::{to_log_domain, ProbabilityGrid, PROB_FLOOR};
use crate::sdctc::{sd_ctc_grad, sd_ctc_loss};
use crate::sot::serialize;
use crate::synth::{sample_rng, MixtureSample, SynthConfig, UtterancePool};

/// Largest accepted gap between the degenerate SD-CTC term and plain CTC.
pub const REDUCTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    /// Weight λ of the SD-CTC term.
    pub ctc_weight: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs between metric rows.
    pub val_interval: usize,
    pub val_beam: usize,
    pub max_output_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            ctc_weight: 0.3,
            learning_rate: 2e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            grad_clip: 5.0,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            val_interval: 1,
            val_beam: 1,
            max_output_length: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::InvalidArgument(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        let non_negative = [self.ctc_weight, self.grad_clip, self.epsilon];
        if non_negative.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument("ctc_weight, grad_clip and epsilon must be finite and >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.val_interval == 0 || self.val_beam == 0 || self.max_output_length == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, val_interval, val_beam and max_output_length must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Group held fixed in this stage.
    pub fn frozen_group(&self) -> ParamGroup {
        if self.stage == 1 {
            ParamGroup::SpeakerHead
        } else {
            ParamGroup::TokenHead
        }
    }

    pub fn speaker_mode(&self) -> SpeakerMode {
        speaker_mode(self.stage)
    }
}

pub fn speaker_mode(stage: u8) -> SpeakerMode {
    if stage == 1 {
        SpeakerMode::Degenerate
    } else {
        SpeakerMode::Predicted
    }
}

/// Batch-averaged losses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub l_sot: f64,
    /// Mean over samples with a feasible CTC target; 0 when there are none.
    pub l_sdctc: f64,
    /// `l_sot + λ · l_sdctc`.
    pub total: f64,
    pub samples: usize,
    /// Samples left out of the SD-CTC term.
    pub skipped: usize,
}

/// Every transcript fits the frame count under CTC's repeat rule.
pub fn ctc_feasible(sample: &MixtureSample) -> bool {
    sample.transcripts.iter().all(|t| min_frames(t.tokens()) <= sample.frames())
}

fn check_batch(model: &ModelConfig, batch: &[MixtureSample], stage: u8) -> Result<()> {
    for (i, s) in batch.iter().enumerate() {
        if stage == 1 && s.speakers() != 1 {
            return Err(Error::Mismatch(format!(
                "stage 1 trains on single-speaker data; sample {i} has {} speakers",
                s.speakers()
            )));
        }
        if s.speakers() > model.speakers {
            return Err(Error::TooManySpeakers { got: s.speakers(), max: model.speakers });
        }
        if s.features.dim() != model.feature_dim {
            return Err(Error::Shape(format!(
                "sample {i} has feature dim {}, model expects {}",
                s.features.dim(),
                model.feature_dim
            )));
        }
    }
    Ok(())
}

/// Losses of one sample and, when `grads` is given, accumulation of
/// `sot_scale · ∇L_SOT + sd_scale · ∇L_SD-CTC`.
fn sample_pass(
    params: &Parameters,
    model: &ModelConfig,
    sample: &MixtureSample,
    stage: u8,
    sot_scale: f64,
    sd_scale: f64,
    grads: Option<&mut Parameters>,
) -> Result<(f64, Option<f64>)> {
    let vocab = model.vocab();
    let enc = encoder_forward(params, model, &sample.features, speaker_mode(stage))?;
    let target = serialize(&sample.transcripts, &vocab)?;
    let dec = decoder_forward(params, model, enc.hidden(), &target)?;
    let feasible = ctc_feasible(sample);
    let backprop_sd = feasible && sd_scale > 0.0 && grads.is_some();

    let (sd_loss, sd_grads) = if !feasible {
        (None, None)
    } else if backprop_sd {
        let g = sd_ctc_grad(&enc.ps, &enc.pv, &sample.transcripts)?;
        (Some(g.loss.total), Some(g))
    } else {
        (Some(sd_ctc_loss(&enc.ps, &enc.pv, &sample.transcripts)?.total), None)
    };

    if stage == 1 {
        if let Some(sd) = sd_loss {
            let log_v = to_log_domain(enc.pv.probs(), PROB_FLOOR)?;
            let (plain, _) = ctc_loss(log_v.view(), sample.transcripts[0].tokens())?;
            if (sd - plain).abs() > REDUCTION_TOL {
                return Err(Error::Mismatch(format!(
                    "degenerate SD-CTC ({sd}) differs from CTC ({plain}) in stage 1"
                )));
            }
        }
    }

    if let Some(grads) = grads {
        let d_hidden = decoder_backward(params, enc.hidden(), &dec, sot_scale, grads);
        let d_token = sd_grads.as_ref().map(|g| &g.token_logits * sd_scale);
        // in stage 1 the speaker posterior is a constant
        let d_speaker = sd_grads
            .as_ref()
            .filter(|_| stage == 2)
            .map(|g| &g.speaker_logits * sd_scale);
        encoder_backward(
            params,
            &enc,
            d_hidden,
            d_token.as_ref().map(|a| a.view()),
            d_speaker.as_ref().map(|a| a.view()),
            grads,
        );
    }
    Ok((dec.loss, sd_loss))
}

fn run_batch(
    params: &Parameters,
    model: &ModelConfig,
    batch: &[MixtureSample],
    config: &TrainConfig,
    mut grads: Option<&mut Parameters>,
) -> Result<BatchMetrics> {
    config.validate()?;
    check_batch(model, batch, config.stage)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len();
    let feasible = batch.iter().filter(|s| ctc_feasible(s)).count();
    let sot_scale = 1.0 / n as f64;
    let sd_scale = if feasible == 0 { 0.0 } else { config.ctc_weight / feasible as f64 };
    let (mut sot_sum, mut sd_sum) = (0.0, 0.0);
    for sample in batch {
        let (sot, sd) = sample_pass(params, model, sample, config.stage, sot_scale, sd_scale, grads.as_deref_mut())?;
        sot_sum += sot;
        sd_sum += sd.unwrap_or(0.0);
    }
    let l_sot = sot_sum / n as f64;
    let l_sdctc = if feasible == 0 { 0.0 } else { sd_sum / feasible as f64 };
    Ok(BatchMetrics {
        l_sot,
        l_sdctc,
        total: l_sot + config.ctc_weight * l_sdctc,
        samples: n,
        skipped: n - feasible,
    })
}

/// Forward-only batch objective.
pub fn batch_loss(params: &Parameters, model: &ModelConfig, batch: &[MixtureSample], config: &TrainConfig) -> Result<BatchMetrics> {
    run_batch(params, model, batch, config, None)
}

/// Batch objective and its gradient w.r.t. every parameter.
pub fn batch_gradient(
    params: &Parameters,
    model: &ModelConfig,
    batch: &[MixtureSample],
    config: &TrainConfig,
) -> Result<(BatchMetrics, Parameters)> {
    let mut grads = params.zeros_like();
    let metrics = run_batch(params, model, batch, config, Some(&mut grads))?;
    Ok((metrics, grads))
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn learning_rate(&self, config: &TrainConfig) -> f64 {
        if config.warmup_steps == 0 {
            config.learning_rate
        } else {
            config.learning_rate * (self.step as f64 / config.warmup_steps as f64).min(1.0)
        }
    }

    /// One bias-corrected Adam step; tensors in `frozen` are left untouched.
    pub fn update(&mut self, params: &mut Parameters, grads: &Parameters, config: &TrainConfig, frozen: ParamGroup) {
        self.step += 1;
        let lr = self.learning_rate(config);
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let g_all = grads.tensors();
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(g_all.iter());
        for ((((group, mut p), (_, mut m)), (_, mut v)), (_, _, g)) in tensors {
            if group == frozen {
                continue;
            }
            let p = p.as_slice_mut().expect("standard layout");
            let m = m.as_slice_mut().expect("standard layout");
            let v = v.as_slice_mut().expect("standard layout");
            let g = g.as_slice().expect("standard layout");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + config.epsilon);
            }
        }
    }
}

fn clip_gradients(grads: &mut Parameters, frozen: ParamGroup, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .tensors()
        .iter()
        .filter(|(_, g, _)| *g != frozen)
        .flat_map(|(_, _, t)| t.iter().map(|x| x * x).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.for_each_mut(|_, t| t.iter_mut().for_each(|x| *x *= scale));
    }
}

/// Computes the batch gradient and applies one optimizer step.
pub fn train_step(
    params: &mut Parameters,
    optimizer: &mut AdamState,
    model: &ModelConfig,
    batch: &[MixtureSample],
    config: &TrainConfig,
) -> Result<BatchMetrics> {
    let (metrics, mut grads) = batch_gradient(params, model, batch, config)?;
    let frozen = config.frozen_group();
    clip_gradients(&mut grads, frozen, config.grad_clip);
    optimizer.update(params, &grads, config, frozen);
    Ok(metrics)
}

/// Training data of one stage.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// The same samples every epoch, reshuffled.
    Fixed(Vec<MixtureSample>),
    /// Fresh mixtures drawn from an utterance pool each epoch.
    Pool {
        pool: UtterancePool,
        synth: Box<SynthConfig>,
        p_two: f64,
        seed: u64,
    },
}

impl DataSource {
    pub fn epoch(&self, epoch: u64) -> Result<Vec<MixtureSample>> {
        match self {
            DataSource::Fixed(samples) => Ok(samples.clone()),
            DataSource::Pool { pool, synth, p_two, seed } => pool.mixed_epoch(synth, *p_two, *seed, epoch),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StagePlan {
    pub config: TrainConfig,
    pub data: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: u8,
    pub l_sot: f64,
    pub l_sdctc: f64,
    pub total: f64,
    pub val_cpwer: Option<f64>,
    pub skipped: usize,
}

pub const METRICS_HEADER: &str = "epoch,stage,l_sot,l_sdctc,total,val_cpwer,skipped";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let mut s = String::new();
        let val = self.val_cpwer.map(|v| v.to_string()).unwrap_or_default();
        write!(
            s,
            "{},{},{},{},{},{},{}",
            self.epoch, self.stage, self.l_sot, self.l_sdctc, self.total, val, self.skipped
        )
        .expect("writing to a String");
        s
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: Parameters,
    pub stage: u8,
    pub configs: Vec<TrainConfig>,
    pub history: Vec<MetricsRow>,
}

/// Corpus cpWER of attention-decoder output on `samples`.
pub fn validation_cpwer(
    params: &Parameters,
    model: &ModelConfig,
    samples: &[MixtureSample],
    stage: u8,
    decode: &DecodeConfig,
) -> Result<f64> {
    let mut decoded = Vec::with_capacity(samples.len());
    for s in samples {
        decoded.push(decode_features(params, model, &s.features, speaker_mode(stage), DecodeMode::Aed, decode)?.transcripts);
    }
    let report = ScoreReport::score(
        samples
            .iter()
            .zip(&decoded)
            .enumerate()
            .map(|(i, (s, d))| (i, s.transcripts.as_slice(), d.as_slice())),
    )?;
    Ok(report.cpwer)
}

/// `1 - edits / reference tokens` of first-speaker greedy CTC output with a
/// degenerate speaker posterior.
pub fn ctc_token_accuracy(params: &Parameters, model: &ModelConfig, samples: &[MixtureSample]) -> Result<f64> {
    let (mut edits, mut total) = (0usize, 0usize);
    for s in samples {
        let enc = encoder_forward(params, model, &s.features, SpeakerMode::Degenerate)?;
        let hyp = &ctc_greedy(&enc.ps, &enc.pv)[0];
        for (i, r) in s.transcripts.iter().enumerate() {
            let h = if i == 0 { hyp.tokens() } else { &[] };
            edits += edit_distance(r.tokens(), h);
            total += r.len();
        }
    }
    Ok(1.0 - edits as f64 / total.max(1) as f64)
}

fn check_schedule(init_stage: Option<u8>, schedule: &[StagePlan]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::InvalidArgument("empty training schedule".into()));
    }
    let mut prev = init_stage;
    for plan in schedule {
        plan.config.validate()?;
        let ok = match plan.config.stage {
            1 => prev.is_none() || prev == Some(1),
            _ => prev == Some(1),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "stage {} cannot follow {}",
                plan.config.stage,
                prev.map_or("an untrained model".to_string(), |s| format!("stage {s}"))
            )));
        }
        prev = Some(plan.config.stage);
    }
    Ok(())
}

/// Runs each stage of `schedule` in order, calling `log` with one row per
/// validation interval.
pub fn run_training(
    model: &ModelConfig,
    init: Option<(Parameters, u8)>,
    schedule: &[StagePlan],
    validation: Option<&[MixtureSample]>,
    mut log: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainedModel> {
    model.validate()?;
    check_schedule(init.as_ref().map(|(_, s)| *s), schedule)?;
    let mut params = match init {
        Some((p, _)) => {
            p.check_shapes(model)?;
            p
        }
        None => Parameters::init(model)?,
    };
    let mut history = Vec::new();
    let mut stage = 0;
    for plan in schedule {
        let cfg = &plan.config;
        stage = cfg.stage;
        let mut optimizer = AdamState::new(&params);
        let (mut sot, mut sd, mut n, mut feasible, mut skipped) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for epoch in 1..=cfg.epochs {
            let mut data = plan.data.epoch(epoch as u64)?;
            data.shuffle(&mut sample_rng(cfg.seed, epoch as u64, u64::from(cfg.stage)));
            for batch in data.chunks(cfg.batch_size) {
                let m = train_step(&mut params, &mut optimizer, model, batch, cfg)?;
                sot += m.l_sot * m.samples as f64;
                sd += m.l_sdctc * (m.samples - m.skipped) as f64;
                n += m.samples;
                feasible += m.samples - m.skipped;
                skipped += m.skipped;
            }
            if epoch % cfg.val_interval == 0 || epoch == cfg.epochs {
                let val_cpwer = match validation {
                    Some(v) if !v.is_empty() => {
                        let decode = DecodeConfig {
                            beam_width: cfg.val_beam,
                            max_output_length: cfg.max_output_length,
                            ..DecodeConfig::default()
                        };
                        Some(validation_cpwer(&params, model, v, cfg.stage, &decode)?)
                    }
                    _ => None,
                };
                let l_sot = sot / n.max(1) as f64;
                let l_sdctc = if feasible == 0 { 0.0 } else { sd / feasible as f64 };
                let row = MetricsRow {
                    epoch,
                    stage: cfg.stage,
                    l_sot,
                    l_sdctc,
                    total: l_sot + cfg.ctc_weight * l_sdctc,
                    val_cpwer,
                    skipped,
                };
                log(&row)?;
                history.push(row);
                (sot, sd, n, feasible, skipped) = (0.0, 0.0, 0, 0, 0);
            }
        }
    }
    Ok(TrainedModel {
        params,
        stage,
        configs: schedule.iter().map(|p| p.config.clone()).collect(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FeatureSequence;
    use crate::model::params::tests::tiny;
    use crate::synth::{gen_single, make_dataset, SynthParams};
    use crate::vocab::Transcript;
    use ndarray::Array2;

    fn sample(frames: usize, transcripts: Vec<Vec<usize>>, seed: usize) -> MixtureSample {
        let features = Array2::from_shape_fn((frames, 3), |(t, j)| ((t * 3 + j * 5 + seed) as f64 * 0.53).sin());
        MixtureSample {
            features: FeatureSequence::new(features).unwrap(),
            onsets: vec![0; transcripts.len()],
            frame_speakers: vec![vec![1]; frames],
            transcripts: transcripts.into_iter().map(Transcript::new).collect(),
        }
    }

    fn stage_config(stage: u8, lambda: f64) -> TrainConfig {
        TrainConfig { stage, ctc_weight: lambda, warmup_steps: 0, ..Default::default() }
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn finite_difference_check(batch: &[MixtureSample], config: &TrainConfig) {
        let model = tiny();
        let params = Parameters::init(&model).unwrap();
        let (metrics, grads) = batch_gradient(&params, &model, batch, config).unwrap();
        assert!((metrics.total - (metrics.l_sot + config.ctc_weight * metrics.l_sdctc)).abs() < 1e-12);
        let analytic = grads.flat();
        let h = 1e-5;
        let shifted = |i: usize, delta: f64| {
            let mut p = params.clone();
            let mut j = 0;
            p.for_each_mut(|_, t| {
                for x in t.iter_mut() {
                    if j == i {
                        *x += delta;
                    }
                    j += 1;
                }
            });
            batch_loss(&p, &model, batch, config).unwrap().total
        };
        for (i, &g) in analytic.iter().enumerate() {
            let numeric = (shifted(i, h) - shifted(i, -h)) / (2.0 * h);
            if g.abs() > 1e-8 {
                assert!(relative_error(g, numeric) < 1e-4, "coordinate {i}: analytic {g} numeric {numeric}");
            } else {
                assert!(numeric.abs() < 1e-6, "coordinate {i}: analytic {g} numeric {numeric}");
            }
        }
    }

    #[test]
    fn stage_one_gradient_matches_finite_differences() {
        let batch = vec![sample(6, vec![vec![0, 1]], 0), sample(5, vec![vec![2, 2]], 1)];
        finite_difference_check(&batch, &stage_config(1, 0.3));
    }

    #[test]
    fn stage_two_gradient_matches_finite_differences() {
        let batch = vec![sample(7, vec![vec![0, 1], vec![2]], 2), sample(6, vec![vec![1]], 3)];
        finite_difference_check(&batch, &stage_config(2, 0.3));
    }

    #[test]
    fn infeasible_targets_are_skipped() {
        let model = tiny();
        let params = Parameters::init(&model).unwrap();
        let batch = vec![sample(3, vec![vec![0, 0, 0]], 0), sample(6, vec![vec![1, 2]], 1)];
        let m = batch_loss(&params, &model, &batch, &stage_config(1, 0.3)).unwrap();
        assert_eq!((m.samples, m.skipped), (2, 1));
        assert!(m.l_sdctc.is_finite());
    }

    #[test]
    fn stage_one_rejects_mixtures() {
        let model = tiny();
        let params = Parameters::init(&model).unwrap();
        let batch = vec![sample(6, vec![vec![0], vec![1]], 0)];
        assert!(matches!(
            batch_loss(&params, &model, &batch, &stage_config(1, 0.3)),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn frozen_groups_are_bit_identical() {
        let model = tiny();
        let batch = vec![sample(7, vec![vec![0, 1], vec![2]], 2), sample(6, vec![vec![1]], 3)];
        let single = vec![sample(6, vec![vec![0, 1]], 0)];
        for (stage, data, frozen) in [(1, &single, ParamGroup::SpeakerHead), (2, &batch, ParamGroup::TokenHead)] {
            let mut params = Parameters::init(&model).unwrap();
            let before = params.clone();
            let mut opt = AdamState::new(&params);
            let cfg = stage_config(stage, 0.3);
            for _ in 0..3 {
                train_step(&mut params, &mut opt, &model, data, &cfg).unwrap();
            }
            let bits = |p: &Parameters, g| p.group_values(g).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&before, frozen), bits(&params, frozen));
            assert_ne!(bits(&before, ParamGroup::Encoder), bits(&params, ParamGroup::Encoder));
        }
    }

    #[test]
    fn zero_weight_matches_sot_only_update() {
        let model = tiny();
        let batch = vec![sample(7, vec![vec![0, 1], vec![2]], 2), sample(6, vec![vec![1]], 3)];
        let cfg = stage_config(2, 0.0);
        let mut params = Parameters::init(&model).unwrap();
        let mut opt = AdamState::new(&params);
        train_step(&mut params, &mut opt, &model, &batch, &cfg).unwrap();

        // reference: decoder-only gradient, no CTC branch at all
        let mut reference = Parameters::init(&model).unwrap();
        let mut grads = reference.zeros_like();
        for s in &batch {
            let enc = encoder_forward(&reference, &model, &s.features, SpeakerMode::Predicted).unwrap();
            let target = serialize(&s.transcripts, &model.vocab()).unwrap();
            let dec = decoder_forward(&reference, &model, enc.hidden(), &target).unwrap();
            let dh = decoder_backward(&reference, enc.hidden(), &dec, 0.5, &mut grads);
            encoder_backward(&reference, &enc, dh, None, None, &mut grads);
        }
        clip_gradients(&mut grads, ParamGroup::TokenHead, cfg.grad_clip);
        AdamState::new(&reference).update(&mut reference, &grads, &cfg, ParamGroup::TokenHead);
        assert_eq!(params, reference);
    }

    #[test]
    fn adam_warmup_scales_the_rate() {
        let params = Parameters::init(&tiny()).unwrap();
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig { warmup_steps: 4, learning_rate: 1.0, ..Default::default() };
        opt.step = 1;
        assert_eq!(opt.learning_rate(&cfg), 0.25);
        opt.step = 10;
        assert_eq!(opt.learning_rate(&cfg), 1.0);
    }

    #[test]
    fn schedule_order_is_enforced() {
        let plan = |stage| StagePlan { config: stage_config(stage, 0.3), data: DataSource::Fixed(vec![]) };
        assert!(check_schedule(None, &[plan(1), plan(2)]).is_ok());
        assert!(check_schedule(None, &[plan(2), plan(1)]).is_err());
        assert!(check_schedule(None, &[plan(2)]).is_err());
        assert!(check_schedule(Some(1), &[plan(2)]).is_ok());
        assert!(check_schedule(Some(2), &[plan(2)]).is_err());
        assert!(check_schedule(None, &[]).is_err());
        assert!(TrainConfig { stage: 3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { ctc_weight: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_logs_each_interval() {
        let synth = SynthConfig::from_params(SynthParams { feature_dim: 3, vocab_size: 3, ..Default::default() }).unwrap();
        let mut rng = sample_rng(1, 0, 0);
        let singles: Vec<_> = (0..8).map(|_| gen_single(&synth, &mut rng)).collect();
        let mixed = make_dataset(&synth, 8, 0.5, 2, 0).unwrap();
        let schedule = vec![
            StagePlan {
                config: TrainConfig { epochs: 2, batch_size: 4, ..stage_config(1, 0.3) },
                data: DataSource::Fixed(singles.clone()),
            },
            StagePlan {
                config: TrainConfig { epochs: 3, batch_size: 4, val_interval: 2, ..stage_config(2, 0.3) },
                data: DataSource::Fixed(mixed.clone()),
            },
        ];
        let run = || {
            let mut lines = Vec::new();
            let trained = run_training(&tiny(), None, &schedule, Some(&mixed[..2]), |r| {
                lines.push(r.csv_line());
                Ok(())
            })
            .unwrap();
            (trained, lines)
        };
        let (a, lines_a) = run();
        let (b, lines_b) = run();
        assert_eq!(a.params, b.params);
        assert_eq!(lines_a, lines_b);
        // stage 1: epochs 1, 2; stage 2: epoch 2 and the final epoch 3
        assert_eq!(a.history.iter().map(|r| (r.stage, r.epoch)).collect::<Vec<_>>(), vec![(1, 1), (1, 2), (2, 2), (2, 3)]);
        assert!(a.history.iter().all(|r| r.val_cpwer.is_some()));
        assert_eq!(a.stage, 2);
        let acc = ctc_token_accuracy(&a.params, &tiny(), &singles).unwrap();
        assert!(acc <= 1.0);
    }
}
