//! Synthetic single-speaker utterances and on-the-fly overlapped mixtures.
//!
//! A frame of token `k` spoken with voice `v` is
//! `gain[v] ⊙ prototype[k] + offset[v] + N(0, σ²I)`. Mixtures add the frames
//! of two utterances, the second shifted by a delay.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureSequence;
use crate::vocab::Transcript;

pub const DATASET_VERSION: u32 = 1;

/// Scalar knobs of the generator; the prototype and voice matrices are
/// drawn from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_token: [usize; 2],
    pub transcript_len: [usize; 2],
    /// Silent frames inserted between consecutive tokens.
    pub gap_frames: [usize; 2],
    /// Disallow equal neighbouring tokens within a transcript.
    pub distinct_neighbors: bool,
    pub voices: usize,
    pub prototype_scale: f64,
    pub offset_scale: f64,
    /// Spread of the per-voice elementwise gains around 1.
    pub gain_sigma: f64,
    pub noise_sigma: f64,
    /// Delay as a fraction of the first utterance's length.
    pub delay_range: [f64; 2],
    pub max_speakers: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            vocab_size: 12,
            feature_dim: 16,
            frames_per_token: [2, 4],
            transcript_len: [2, 5],
            gap_frames: [0, 0],
            distinct_neighbors: true,
            voices: 8,
            prototype_scale: 1.0,
            offset_scale: 0.5,
            gain_sigma: 0.3,
            noise_sigma: 0.3,
            delay_range: [0.2, 0.8],
            max_speakers: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub params: SynthParams,
    /// `|V| x D`.
    pub prototypes: Vec<Vec<f64>>,
    pub voice_offsets: Vec<Vec<f64>>,
    pub voice_gains: Vec<Vec<f64>>,
}

impl SynthConfig {
    pub fn from_params(params: SynthParams) -> Result<Self> {
        validate_params(&params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let d = params.feature_dim;
        let draw = |scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| scale * unit.sample(rng)).collect()
        };
        let prototypes = (0..params.vocab_size)
            .map(|_| draw(params.prototype_scale, &mut rng))
            .collect();
        let voice_offsets = (0..params.voices)
            .map(|_| draw(params.offset_scale, &mut rng))
            .collect();
        let voice_gains = (0..params.voices)
            .map(|_| draw(params.gain_sigma, &mut rng).into_iter().map(|g| 1.0 + g).collect())
            .collect();
        let config = Self { params, prototypes, voice_offsets, voice_gains };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        validate_params(p)?;
        let shape_ok = |m: &[Vec<f64>], rows: usize| m.len() == rows && m.iter().all(|r| r.len() == p.feature_dim);
        if !shape_ok(&self.prototypes, p.vocab_size)
            || !shape_ok(&self.voice_offsets, p.voices)
            || !shape_ok(&self.voice_gains, p.voices)
        {
            return Err(Error::Shape("synth matrices disagree with vocab_size/voices/feature_dim".into()));
        }
        for (i, a) in self.prototypes.iter().enumerate() {
            if self.prototypes[..i].contains(a) {
                return Err(Error::InvalidArgument(format!("prototype {i} duplicates an earlier one")));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.params.feature_dim
    }
}

fn validate_params(p: &SynthParams) -> Result<()> {
    let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
    if p.vocab_size == 0 || p.feature_dim == 0 || p.voices == 0 {
        return bad("vocab_size, feature_dim and voices must be positive");
    }
    if p.distinct_neighbors && p.vocab_size < 2 && p.transcript_len[1] > 1 {
        return bad("distinct_neighbors needs at least two tokens");
    }
    if p.frames_per_token[0] == 0 || p.frames_per_token[1] < p.frames_per_token[0] {
        return bad("frames_per_token must satisfy 1 <= r_min <= r_max");
    }
    if p.transcript_len[0] == 0 || p.transcript_len[1] < p.transcript_len[0] {
        return bad("transcript_len must satisfy 1 <= min <= max");
    }
    if p.gap_frames[1] < p.gap_frames[0] {
        return bad("gap_frames must satisfy min <= max");
    }
    let [lo, hi] = p.delay_range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || hi < lo {
        return bad("delay_range must lie within [0, 1]");
    }
    if p.noise_sigma.is_nan() || p.noise_sigma < 0.0 {
        return bad("noise_sigma must be non-negative");
    }
    if p.max_speakers == 0 || p.max_speakers > 2 {
        return bad("max_speakers must be 1 or 2");
    }
    Ok(())
}

/// Features with onset-ordered transcripts and diagnostic per-frame activity.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub features: FeatureSequence,
    pub transcripts: Vec<Transcript>,
    pub onsets: Vec<usize>,
    /// 1-based indices of the speakers active at each frame.
    pub frame_speakers: Vec<Vec<usize>>,
}

impl MixtureSample {
    pub fn speakers(&self) -> usize {
        self.transcripts.len()
    }

    pub fn frames(&self) -> usize {
        self.features.len()
    }
}

/// A single-speaker sample together with the voice that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub sample: MixtureSample,
    pub voice: usize,
}

/// Independent generator stream for sample `index` of `epoch`.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed ^ 0x5d_c7c1);
    h = splitmix64(h ^ epoch);
    h = splitmix64(h ^ index);
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn noise(config: &SynthConfig) -> Option<Normal<f64>> {
    (config.params.noise_sigma > 0.0).then(|| Normal::new(0.0, config.params.noise_sigma).expect("sigma >= 0"))
}

/// Draws a transcript of the configured length range.
pub fn draw_transcript<R: Rng>(config: &SynthConfig, rng: &mut R) -> Transcript {
    let p = &config.params;
    let len = rng.random_range(p.transcript_len[0]..=p.transcript_len[1]);
    let mut tokens: Vec<usize> = Vec::with_capacity(len);
    while tokens.len() < len {
        let t = rng.random_range(0..p.vocab_size);
        if p.distinct_neighbors && tokens.last() == Some(&t) {
            continue;
        }
        tokens.push(t);
    }
    Transcript::new(tokens)
}

/// Renders `transcript` with `voice`.
pub fn render_utterance<R: Rng>(
    config: &SynthConfig,
    transcript: &Transcript,
    voice: usize,
    rng: &mut R,
) -> Result<Utterance> {
    transcript.validate(config.params.vocab_size)?;
    if transcript.is_empty() {
        return Err(Error::InvalidArgument("cannot render an empty transcript".into()));
    }
    let p = &config.params;
    let noise = noise(config);
    let gain = &config.voice_gains[voice];
    let offset = &config.voice_offsets[voice];
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, &tok) in transcript.tokens().iter().enumerate() {
        if i > 0 {
            let gap = rng.random_range(p.gap_frames[0]..=p.gap_frames[1]);
            for _ in 0..gap {
                rows.push((0..p.feature_dim).map(|_| noise.map_or(0.0, |n| n.sample(rng))).collect());
            }
        }
        let repeat = rng.random_range(p.frames_per_token[0]..=p.frames_per_token[1]);
        for _ in 0..repeat {
            let row = (0..p.feature_dim)
                .map(|j| {
                    gain[j] * config.prototypes[tok][j] + offset[j] + noise.map_or(0.0, |n| n.sample(rng))
                })
                .collect();
            rows.push(row);
        }
    }
    let frames = rows.len();
    Ok(Utterance {
        sample: MixtureSample {
            features: FeatureSequence::from_rows(&rows)?,
            transcripts: vec![transcript.clone()],
            onsets: vec![0],
            frame_speakers: vec![vec![1]; frames],
        },
        voice,
    })
}

pub fn gen_utterance<R: Rng>(config: &SynthConfig, rng: &mut R) -> Utterance {
    let transcript = draw_transcript(config, rng);
    let voice = rng.random_range(0..config.params.voices);
    render_utterance(config, &transcript, voice, rng).expect("drawn transcripts are valid")
}

/// One random single-speaker sample.
pub fn gen_single<R: Rng>(config: &SynthConfig, rng: &mut R) -> MixtureSample {
    gen_utterance(config, rng).sample
}

/// Adds `b`, shifted by `delay` frames, onto `a`.
pub fn mix(a: &MixtureSample, b: &MixtureSample, delay: usize) -> Result<MixtureSample> {
    if a.speakers() != 1 || b.speakers() != 1 {
        return Err(Error::InvalidArgument("mix expects two single-speaker samples".into()));
    }
    if a.features.dim() != b.features.dim() {
        return Err(Error::Shape("feature dimensions differ".into()));
    }
    let (ta, tb) = (a.frames(), b.frames());
    let total = ta.max(delay + tb);
    let mut x = Array2::zeros((total, a.features.dim()));
    x.slice_mut(s![..ta, ..]).assign(&a.features.frames());
    {
        let mut tail = x.slice_mut(s![delay..delay + tb, ..]);
        tail += &b.features.frames();
    }
    let frame_speakers = (0..total)
        .map(|t| {
            let mut active = Vec::with_capacity(2);
            if t < ta {
                active.push(1);
            }
            if t >= delay && t < delay + tb {
                active.push(2);
            }
            active
        })
        .collect();
    Ok(MixtureSample {
        features: FeatureSequence::new(x)?,
        transcripts: vec![a.transcripts[0].clone(), b.transcripts[0].clone()],
        onsets: vec![0, delay],
        frame_speakers,
    })
}

/// Delay drawn uniformly from the configured fraction of `first_len`.
pub fn draw_delay<R: Rng>(config: &SynthConfig, first_len: usize, rng: &mut R) -> usize {
    let [lo, hi] = config.params.delay_range;
    let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    (frac * first_len as f64).round() as usize
}

fn draw_partner<R: Rng>(config: &SynthConfig, voice: usize, rng: &mut R) -> Utterance {
    loop {
        let u = gen_utterance(config, rng);
        if u.voice != voice || config.params.voices == 1 {
            return u;
        }
    }
}

/// Generates `n` samples, each two-speaker with probability `p_two`.
///
/// Sample `i` depends only on `(seed, epoch, i)`.
pub fn make_dataset(config: &SynthConfig, n: usize, p_two: f64, seed: u64, epoch: u64) -> Result<Vec<MixtureSample>> {
    check_probability(p_two)?;
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, epoch, i as u64);
            let first = gen_utterance(config, &mut rng);
            if config.params.max_speakers >= 2 && rng.random_bool(p_two) {
                let second = draw_partner(config, first.voice, &mut rng);
                let delay = draw_delay(config, first.sample.frames(), &mut rng);
                mix(&first.sample, &second.sample, delay)
            } else {
                Ok(first.sample)
            }
        })
        .collect()
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// A fixed set of single-speaker utterances mixed afresh every epoch.
#[derive(Debug, Clone)]
pub struct UtterancePool {
    pub utterances: Vec<Utterance>,
}

impl UtterancePool {
    pub fn generate(config: &SynthConfig, n: usize, seed: u64) -> Self {
        let utterances = (0..n)
            .map(|i| gen_utterance(config, &mut sample_rng(seed, u64::MAX, i as u64)))
            .collect();
        Self { utterances }
    }

    pub fn singles(&self) -> Vec<MixtureSample> {
        self.utterances.iter().map(|u| u.sample.clone()).collect()
    }

    /// Each utterance is kept alone or mixed with a random partner of a
    /// different voice; the pairing depends on `(seed, epoch)`.
    pub fn mixed_epoch(&self, config: &SynthConfig, p_two: f64, seed: u64, epoch: u64) -> Result<Vec<MixtureSample>> {
        check_probability(p_two)?;
        let n = self.utterances.len();
        self.utterances
            .iter()
            .enumerate()
            .map(|(i, first)| {
                let mut rng = sample_rng(seed, epoch, i as u64);
                if n < 2 || !rng.random_bool(p_two) {
                    return Ok(first.sample.clone());
                }
                let mut partner = None;
                for _ in 0..64 {
                    let j = rng.random_range(0..n);
                    if j != i && self.utterances[j].voice != first.voice {
                        partner = Some(j);
                        break;
                    }
                }
                match partner {
                    Some(j) => {
                        let delay = draw_delay(config, first.sample.frames(), &mut rng);
                        mix(&first.sample, &self.utterances[j].sample, delay)
                    }
                    None => Ok(first.sample.clone()),
                }
            })
            .collect()
    }
}

/// One line of the JSON Lines dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub version: u32,
    pub features: Vec<Vec<f64>>,
    pub transcripts: Vec<Vec<usize>>,
    pub onsets: Vec<usize>,
    pub frame_speakers: Vec<Vec<usize>>,
}

impl From<&MixtureSample> for SampleRecord {
    fn from(s: &MixtureSample) -> Self {
        Self {
            version: DATASET_VERSION,
            features: s.features.to_rows(),
            transcripts: s.transcripts.iter().map(|t| t.0.clone()).collect(),
            onsets: s.onsets.clone(),
            frame_speakers: s.frame_speakers.clone(),
        }
    }
}

impl TryFrom<SampleRecord> for MixtureSample {
    type Error = Error;

    fn try_from(r: SampleRecord) -> Result<Self> {
        if r.version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion(r.version));
        }
        let features = FeatureSequence::from_rows(&r.features)?;
        if r.frame_speakers.len() != features.len() || r.onsets.len() != r.transcripts.len() {
            return Err(Error::Shape("record fields disagree on frame or speaker counts".into()));
        }
        Ok(Self {
            features,
            transcripts: r.transcripts.into_iter().map(Transcript::new).collect(),
            onsets: r.onsets,
            frame_speakers: r.frame_speakers,
        })
    }
}

pub fn write_jsonl<W: Write>(out: W, samples: &[MixtureSample]) -> Result<()> {
    let mut out = BufWriter::new(out);
    for s in samples {
        serde_json::to_writer(&mut out, &SampleRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MixtureSample>> {
    let file = std::fs::File::open(path)?;
    parse_jsonl(BufReader::new(file))
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<MixtureSample>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)?;
        out.push(MixtureSample::try_from(record)?);
    }
    Ok(out)
}
