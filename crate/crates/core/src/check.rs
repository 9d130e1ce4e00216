//! Self-contained property suites with fixed seeds, exposed through the CLI.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_bruteforce, ctc_logit_grad, ctc_loss};
use crate::error::{Error, Result};
use crate::eval::cpwer;
use crate::grid::{softmax_rows, FeatureSequence, to_log_domain, validate_grid, ProbabilityGrid, SpeakerPosteriorGrid, TokenPosteriorGrid, PROB_FLOOR};
use crate::model::{batch_gradient, batch_loss, ModelConfig, Parameters, TrainConfig};
use crate::sdctc::{sd_ctc_grad, sd_ctc_loss, speaker_token_grid};
use crate::sot::{deserialize, serialize};
use crate::synth::{sample_rng, MixtureSample};
use crate::vocab::{Transcript, Vocabulary};

pub const ORACLE_TOL: f64 = 1e-10;
pub const REDUCTION_TOL: f64 = 1e-12;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Coordinates with smaller analytic gradients are not compared.
pub const GRAD_MIN_MAGNITUDE: f64 = 1e-8;

const CTC_VECTORS: &str = include_str!("../data/ctc_vectors.json");
const SDCTC_VECTORS: &str = include_str!("../data/sdctc_vectors.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    CtcOracle,
    SdCtcOracle,
    Grad,
    Invariants,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::CtcOracle, Suite::SdCtcOracle, Suite::Grad, Suite::Invariants];

    pub fn name(self) -> &'static str {
        match self {
            Suite::CtcOracle => "ctc-oracle",
            Suite::SdCtcOracle => "sdctc-oracle",
            Suite::Grad => "grad",
            Suite::Invariants => "invariants",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite `{s}`")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckCase {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub suite: String,
    pub cases: Vec<CheckCase>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.cases.push(CheckCase { name: name.into(), passed, detail });
    }
}

/// A shipped CTC conformance case; `likelihood` comes from path enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtcVector {
    pub probs: Vec<Vec<f64>>,
    pub target: Vec<usize>,
    pub likelihood: f64,
}

/// A shipped SD-CTC conformance case; `loss` is the negative log of the
/// per-speaker enumerated likelihoods, summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdCtcVector {
    pub ps: Vec<Vec<f64>>,
    pub pv: Vec<Vec<f64>>,
    pub transcripts: Vec<Vec<usize>>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorFile<T> {
    pub version: u32,
    pub cases: Vec<T>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), cols), rows.iter().flatten().copied().collect())
        .map_err(|e| Error::Shape(e.to_string()))
}

pub fn rows(m: ArrayView2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Random row-stochastic `frames x classes` grid from standard-normal logits.
pub fn random_grid<R: Rng>(frames: usize, classes: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    let logits = Array2::from_shape_fn((frames, classes), |_| scale * normal(rng));
    softmax_rows(logits.view())
}

pub fn random_target<R: Rng>(max_len: usize, vocab: usize, rng: &mut R) -> Vec<usize> {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Random CTC instance within the given bounds.
pub fn random_ctc_case<R: Rng>(max_frames: usize, max_vocab: usize, max_target: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
    let frames = rng.random_range(1..=max_frames);
    let vocab = rng.random_range(1..=max_vocab);
    let target = random_target(max_target, vocab, rng);
    (random_grid(frames, vocab + 1, 1.5, rng), target)
}

/// Random two-speaker SD-CTC instance within the given bounds.
pub fn random_sdctc_case<R: Rng>(
    max_frames: usize,
    max_vocab: usize,
    max_target: usize,
    rng: &mut R,
) -> (SpeakerPosteriorGrid, TokenPosteriorGrid, Vec<Transcript>) {
    let frames = rng.random_range(1..=max_frames);
    let vocab = rng.random_range(1..=max_vocab);
    let ps = SpeakerPosteriorGrid::new(random_grid(frames, 2, 1.5, rng)).expect("softmax rows");
    let pv = TokenPosteriorGrid::new(random_grid(frames, vocab + 1, 1.5, rng)).expect("softmax rows");
    let speakers = rng.random_range(0..=2);
    let transcripts = (0..speakers).map(|_| Transcript::new(random_target(max_target, vocab, rng))).collect();
    (ps, pv, transcripts)
}

pub fn ctc_vectors() -> Result<VectorFile<CtcVector>> {
    Ok(serde_json::from_str(CTC_VECTORS)?)
}

pub fn sdctc_vectors() -> Result<VectorFile<SdCtcVector>> {
    Ok(serde_json::from_str(SDCTC_VECTORS)?)
}

/// Enumerated SD-CTC loss: per-speaker grids scored by path enumeration.
pub fn sdctc_bruteforce(ps: &SpeakerPosteriorGrid, pv: &TokenPosteriorGrid, transcripts: &[Transcript]) -> Result<f64> {
    let mut loss = 0.0;
    for m in 0..ps.speakers() {
        let grid = speaker_token_grid(ps, pv, m)?;
        let target = transcripts.get(m).map_or(&[][..], |t| t.tokens());
        loss -= ctc_bruteforce(grid.probs(), target)?.ln();
    }
    Ok(loss)
}

pub fn run_suite(suite: Suite) -> Result<CheckReport> {
    let mut report = CheckReport { suite: suite.name().into(), cases: Vec::new() };
    match suite {
        Suite::CtcOracle => ctc_oracle(&mut report)?,
        Suite::SdCtcOracle => sdctc_oracle(&mut report)?,
        Suite::Grad => grad(&mut report)?,
        Suite::Invariants => invariants(&mut report)?,
    }
    Ok(report)
}

fn ctc_oracle(report: &mut CheckReport) -> Result<()> {
    let vectors = ctc_vectors()?;
    let mut worst: f64 = 0.0;
    for case in &vectors.cases {
        let probs = matrix(&case.probs)?;
        let (loss, _) = ctc_loss(to_log_domain(probs.view(), PROB_FLOOR)?.view(), &case.target)?;
        worst = worst.max(((-loss).exp() - case.likelihood).abs());
    }
    report.push(
        "shipped vectors",
        worst <= ORACLE_TOL,
        format!("{} cases, max |exp(-loss) - p| = {worst:.3e}", vectors.cases.len()),
    );

    let mut rng = sample_rng(11, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (probs, target) = random_ctc_case(6, 3, 3, &mut rng);
        let (loss, _) = ctc_loss(to_log_domain(probs.view(), PROB_FLOOR)?.view(), &target)?;
        worst = worst.max(((-loss).exp() - ctc_bruteforce(probs.view(), &target)?).abs());
    }
    report.push("random instances", worst <= ORACLE_TOL, format!("200 cases, max abs error {worst:.3e}"));
    Ok(())
}

fn sdctc_oracle(report: &mut CheckReport) -> Result<()> {
    let vectors = sdctc_vectors()?;
    let mut worst: f64 = 0.0;
    for case in &vectors.cases {
        let ps = SpeakerPosteriorGrid::new(matrix(&case.ps)?)?;
        let pv = TokenPosteriorGrid::new(matrix(&case.pv)?)?;
        let ts: Vec<Transcript> = case.transcripts.iter().cloned().map(Transcript::new).collect();
        worst = worst.max((sd_ctc_loss(&ps, &pv, &ts)?.total - case.loss).abs());
    }
    report.push(
        "shipped vectors",
        worst <= ORACLE_TOL,
        format!("{} cases, max |loss - oracle| = {worst:.3e}", vectors.cases.len()),
    );

    let mut rng = sample_rng(12, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (ps, pv, ts) = random_sdctc_case(5, 2, 2, &mut rng);
        let got = sd_ctc_loss(&ps, &pv, &ts)?.total;
        let want = sdctc_bruteforce(&ps, &pv, &ts)?;
        if got.is_finite() || want.is_finite() {
            worst = worst.max((got - want).abs());
        }
    }
    report.push("random instances", worst <= ORACLE_TOL, format!("100 cases, max abs error {worst:.3e}"));
    Ok(())
}

/// Worst relative error between `analytic` and central differences of `f`
/// over coordinates whose analytic magnitude exceeds the threshold.
pub fn finite_difference_error(analytic: &[f64], x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * step);
        if analytic[i].abs() > GRAD_MIN_MAGNITUDE {
            worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()));
        }
    }
    worst
}

/// Tiny model used by the gradient suite.
pub fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        context_window: 1,
        position_dim: 2,
        encoder_layers: 2,
        hidden_dim: 5,
        embed_dim: 3,
        decoder_dim: 4,
        vocab_size: 3,
        speakers: 2,
        seed,
    }
}

/// Random mini-batch for `tiny_model`: stage 1 gets single-speaker samples.
pub fn tiny_batch<R: Rng>(stage: u8, rng: &mut R) -> Vec<MixtureSample> {
    (0..2)
        .map(|_| {
            let frames = rng.random_range(5..=8);
            let speakers = if stage == 1 { 1 } else { rng.random_range(1..=2) };
            let transcripts: Vec<Transcript> = (0..speakers)
                .map(|_| Transcript::new((0..rng.random_range(1..=2)).map(|_| rng.random_range(0..3)).collect()))
                .collect();
            let features = Array2::from_shape_fn((frames, 3), |_| normal(rng));
            MixtureSample {
                features: FeatureSequence::new(features).expect("finite features"),
                onsets: vec![0; speakers],
                frame_speakers: vec![(1..=speakers).collect(); frames],
                transcripts,
            }
        })
        .collect()
}

/// Worst relative finite-difference error of the full-model objective.
pub fn model_gradient_error(seed: u64, stage: u8) -> Result<f64> {
    let model = tiny_model(seed);
    let params = Parameters::init(&model)?;
    let batch = tiny_batch(stage, &mut sample_rng(seed, 1, u64::from(stage)));
    let config = TrainConfig { stage, ..TrainConfig::default() };
    let (_, grads) = batch_gradient(&params, &model, &batch, &config)?;
    let x = params.flat();
    let mut failure = None;
    let worst = finite_difference_error(&grads.flat(), &x, 1e-5, |values| {
        let mut p = params.clone();
        let mut i = 0;
        p.for_each_mut(|_, t| {
            for v in t.iter_mut() {
                *v = values[i];
                i += 1;
            }
        });
        match batch_loss(&p, &model, &batch, &config) {
            Ok(m) => m.total,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}

/// Worst relative finite-difference error of SD-CTC logit gradients.
pub fn sdctc_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = sample_rng(seed, 2, 0);
    let frames = rng.random_range(3..=7);
    let vocab = rng.random_range(1..=3);
    let zs = Array2::from_shape_fn((frames, 2), |_| normal(&mut rng));
    let zv = Array2::from_shape_fn((frames, vocab + 1), |_| normal(&mut rng));
    let transcripts: Vec<Transcript> = (0..2)
        .map(|_| Transcript::new(random_target(2, vocab, &mut rng)))
        .collect();
    let loss = |zs: ArrayView2<f64>, zv: ArrayView2<f64>| -> f64 {
        let ps = SpeakerPosteriorGrid::from_logits(zs).expect("finite logits");
        let pv = TokenPosteriorGrid::from_logits(zv).expect("finite logits");
        sd_ctc_loss(&ps, &pv, &transcripts).expect("valid instance").total
    };
    let g = sd_ctc_grad(
        &SpeakerPosteriorGrid::from_logits(zs.view())?,
        &TokenPosteriorGrid::from_logits(zv.view())?,
        &transcripts,
    )?;
    let err_s = finite_difference_error(g.speaker_logits.as_slice().expect("contiguous"), zs.as_slice().expect("contiguous"), 1e-6, |x| {
        loss(ArrayView2::from_shape(zs.raw_dim(), x).expect("shape"), zv.view())
    });
    let err_v = finite_difference_error(g.token_logits.as_slice().expect("contiguous"), zv.as_slice().expect("contiguous"), 1e-6, |x| {
        loss(zs.view(), ArrayView2::from_shape(zv.raw_dim(), x).expect("shape"))
    });
    Ok(err_s.max(err_v))
}

fn ctc_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = sample_rng(seed, 3, 0);
    let (frames, vocab) = (rng.random_range(2..=8), rng.random_range(1..=4));
    let z = Array2::from_shape_fn((frames, vocab + 1), |_| normal(&mut rng));
    let target = random_target(3.min(frames), vocab, &mut rng);
    let grad = match ctc_logit_grad(z.view(), &target) {
        Ok((_, grad)) => grad,
        Err(Error::InfiniteLoss) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    Ok(finite_difference_error(grad.as_slice().expect("contiguous"), z.as_slice().expect("contiguous"), 1e-6, |x| {
        ctc_logit_grad(ArrayView2::from_shape(z.raw_dim(), x).expect("shape"), &target).expect("valid").0
    }))
}

fn grad(report: &mut CheckReport) -> Result<()> {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        worst = worst.max(ctc_gradient_error(seed)?);
    }
    report.push("ctc logits", worst < GRAD_REL_TOL, format!("50 cases, max rel error {worst:.3e}"));
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        worst = worst.max(sdctc_gradient_error(seed)?);
    }
    report.push("sdctc logits", worst < GRAD_REL_TOL, format!("100 cases, max rel error {worst:.3e}"));
    for stage in [1, 2] {
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            worst = worst.max(model_gradient_error(seed, stage)?);
        }
        report.push(
            &format!("model stage {stage}"),
            worst < GRAD_REL_TOL,
            format!("10 cases, max rel error {worst:.3e}"),
        );
    }
    Ok(())
}

fn invariants(report: &mut CheckReport) -> Result<()> {
    let mut rng = sample_rng(13, 0, 0);

    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let (s, b): (f64, f64) = (rng.random(), rng.random());
        worst = worst.max(((s * b + 1.0 - s) - (b + (1.0 - s) * (1.0 - b))).abs());
    }
    report.push("blank identity", worst <= REDUCTION_TOL, format!("1e5 pairs, max gap {worst:.3e}"));

    let mut worst: f64 = 0.0;
    let mut stochastic = true;
    for _ in 0..1000 {
        let frames = rng.random_range(1..=8);
        let vocab = rng.random_range(1..=5);
        let speakers = rng.random_range(1..=3);
        let ps = SpeakerPosteriorGrid::new(random_grid(frames, speakers, 2.0, &mut rng))?;
        let pv = TokenPosteriorGrid::new(random_grid(frames, vocab + 1, 2.0, &mut rng))?;
        let mut marginal = Array2::<f64>::zeros((frames, vocab));
        for m in 0..speakers {
            let g = speaker_token_grid(&ps, &pv, m)?;
            stochastic &= validate_grid(g.probs()).passed();
            marginal += &g.probs().slice(ndarray::s![.., ..vocab]);
        }
        let diff = &marginal - &pv.probs().slice(ndarray::s![.., ..vocab]);
        worst = worst.max(diff.iter().fold(0.0_f64, |a, d| a.max(d.abs())));
    }
    report.push(
        "speaker grids",
        stochastic && worst <= 1e-9,
        format!("1000 grids, rows stochastic: {stochastic}, max marginal gap {worst:.3e}"),
    );

    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (probs, target) = random_ctc_case(8, 4, 3, &mut rng);
        let pv = TokenPosteriorGrid::new(probs)?;
        let ps = SpeakerPosteriorGrid::degenerate(pv.frames(), 1)?;
        let sd = sd_ctc_loss(&ps, &pv, &[Transcript::new(target.clone())])?.total;
        let (plain, _) = ctc_loss(to_log_domain(pv.probs(), PROB_FLOOR)?.view(), &target)?;
        if sd.is_finite() || plain.is_finite() {
            worst = worst.max((sd - plain).abs());
        }
    }
    report.push("single-speaker reduction", worst <= REDUCTION_TOL, format!("100 cases, max gap {worst:.3e}"));

    let vocab = Vocabulary::with_size(4)?;
    let mut round_trip = true;
    let mut permuted = true;
    for _ in 0..200 {
        let n = rng.random_range(1..=3);
        let ts: Vec<Transcript> = (0..n)
            .map(|_| Transcript::new((0..rng.random_range(1..=4)).map(|_| rng.random_range(0..4)).collect()))
            .collect();
        round_trip &= deserialize(serialize(&ts, &vocab)?.tokens(), &vocab) == ts;
        let mut shuffled = ts.clone();
        shuffled.rotate_left(rng.random_range(0..n));
        permuted &= cpwer(&ts, &shuffled)?.edits == 0;
    }
    report.push("sot round trip", round_trip, "200 cases".into());
    report.push("cpwer permutation identity", permuted, "200 cases".into());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_vectors_agree_with_enumeration() {
        for case in ctc_vectors().unwrap().cases {
            let probs = matrix(&case.probs).unwrap();
            assert!((ctc_bruteforce(probs.view(), &case.target).unwrap() - case.likelihood).abs() < 1e-15);
        }
        for case in sdctc_vectors().unwrap().cases {
            let ps = SpeakerPosteriorGrid::new(matrix(&case.ps).unwrap()).unwrap();
            let pv = TokenPosteriorGrid::new(matrix(&case.pv).unwrap()).unwrap();
            let ts: Vec<Transcript> = case.transcripts.into_iter().map(Transcript::new).collect();
            assert!((sdctc_bruteforce(&ps, &pv, &ts).unwrap() - case.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn every_suite_passes() {
        for suite in Suite::ALL {
            let report = run_suite(suite).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("grad".parse::<Suite>().unwrap(), Suite::Grad);
        assert!("bogus".parse::<Suite>().is_err());
    }
}
