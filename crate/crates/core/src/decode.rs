//! Greedy CTC decoding, attention-decoder beam search and SD-CTC rescoring.

use std::str::FromStr;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ctc::collapse;
use crate::error::{Error, Result};
use crate::eval::{limit_speakers, MAX_CPWER_SPEAKERS};
use crate::grid::{FeatureSequence, ProbabilityGrid, SpeakerPosteriorGrid, TokenPosteriorGrid};
use crate::model::decoder::{decoder_step, DecoderState};
use crate::model::{encoder_forward, ModelConfig, Parameters, SpeakerMode};
use crate::sdctc::sd_ctc_score;
use crate::sot::{deserialize, SotSequence};
use crate::vocab::{Transcript, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub weight: f64,
    pub max_output_length: usize,
    pub rescore: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 16,
            weight: 0.3,
            max_output_length: 64,
            rescore: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::InvalidArgument("beam width must be at least 1".into()));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("rescoring weight {} must be finite and >= 0", self.weight)));
        }
        if self.max_output_length == 0 {
            return Err(Error::InvalidArgument("max_output_length must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    #[serde(rename = "aed")]
    Aed,
    #[serde(rename = "aed+sdctc")]
    AedSdCtc,
    #[serde(rename = "ctc")]
    Ctc,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Aed => "aed",
            DecodeMode::AedSdCtc => "aed+sdctc",
            DecodeMode::Ctc => "ctc",
        }
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aed" => Ok(DecodeMode::Aed),
            "aed+sdctc" => Ok(DecodeMode::AedSdCtc),
            "ctc" => Ok(DecodeMode::Ctc),
            other => Err(Error::InvalidArgument(format!("unknown decode mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: SotSequence,
    pub decoder_logprob: f64,
    pub sdctc_logprob: Option<f64>,
    pub combined_score: f64,
}

impl Hypothesis {
    pub fn segments(&self, vocab: &Vocabulary) -> Vec<Transcript> {
        deserialize(self.tokens.tokens(), vocab)
    }
}

/// Per-frame argmax speaker and token; each speaker stream is collapsed
/// independently, with frames owned by other speakers counted as blanks.
pub fn ctc_greedy(ps: &SpeakerPosteriorGrid, pv: &TokenPosteriorGrid) -> Vec<Transcript> {
    let blank = pv.blank();
    let m = ps.speakers();
    let mut streams = vec![Vec::with_capacity(ps.frames()); m];
    for (s_row, v_row) in ps.probs().rows().into_iter().zip(pv.probs().rows()) {
        let speaker = first_argmax(s_row.iter().copied());
        let token = first_argmax(v_row.iter().copied());
        for (i, stream) in streams.iter_mut().enumerate() {
            stream.push(if i == speaker { token } else { blank });
        }
    }
    streams.iter().map(|s| collapse(s, blank)).collect()
}

fn first_argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Source of next-class log-probabilities for [`beam_search_with`].
pub trait StepScorer {
    type State: Clone;

    fn initial(&self) -> Self::State;
    /// Consumes `prev` and returns the new state with log-probabilities over
    /// decoder classes.
    fn step(&self, state: &Self::State, prev: usize) -> (Self::State, Array1<f64>);
}

/// The trained attention decoder attending over fixed encoder output.
pub struct AttentionScorer<'a> {
    pub params: &'a Parameters,
    pub config: &'a ModelConfig,
    pub hidden: ArrayView2<'a, f64>,
}

impl StepScorer for AttentionScorer<'_> {
    type State = DecoderState;

    fn initial(&self) -> DecoderState {
        DecoderState::initial(self.config, self.hidden)
    }

    fn step(&self, state: &DecoderState, prev: usize) -> (DecoderState, Array1<f64>) {
        let (next, cache) = decoder_step(self.params, self.hidden, state, prev);
        (next, cache.log_probs)
    }
}

struct Beam<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
}

/// Length-synchronous beam search; scores are unnormalized sums of step
/// log-probabilities.
pub fn beam_search_with<S: StepScorer>(scorer: &S, vocab: &Vocabulary, config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let k = config.beam_width;
    let eos = vocab.eos_id();
    let mut active = vec![Beam { tokens: Vec::new(), score: 0.0, state: scorer.initial() }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();

    for len in 1..=config.max_output_length {
        let mut candidates = Vec::with_capacity(active.len() * vocab.decoder_classes());
        let mut next_states = Vec::with_capacity(active.len());
        for (b, beam) in active.iter().enumerate() {
            let prev = beam.tokens.last().copied().unwrap_or(vocab.sos_id());
            let (state, log_probs) = scorer.step(&beam.state, prev);
            next_states.push(state);
            for (class, &lp) in log_probs.iter().enumerate() {
                candidates.push((beam.score + lp, b, class));
            }
        }
        // stable: ties keep parent rank then class order
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0));
        candidates.truncate(k);
        let mut next = Vec::with_capacity(k);
        for (score, b, class) in candidates {
            let token = vocab.decoder_token(class);
            let mut tokens = active[b].tokens.clone();
            tokens.push(token);
            if token == eos || len == config.max_output_length {
                finished.push((tokens, score));
            } else {
                next.push(Beam { tokens, score, state: next_states[b].clone() });
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
        finished.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        // scores only decrease, so a full set of finished hypotheses that
        // beats every live beam is final
        if finished.len() >= k && finished[k - 1].1 >= active[0].score {
            break;
        }
    }
    finished.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    finished.truncate(k);
    Ok(finished
        .into_iter()
        .map(|(tokens, score)| Hypothesis {
            tokens: SotSequence(tokens),
            decoder_logprob: score,
            sdctc_logprob: None,
            combined_score: score,
        })
        .collect())
}

pub fn beam_search(
    params: &Parameters,
    model: &ModelConfig,
    hidden: ArrayView2<f64>,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    if hidden.ncols() != model.hidden_dim {
        return Err(Error::Shape("encoder output width does not match hidden_dim".into()));
    }
    let scorer = AttentionScorer { params, config: model, hidden };
    beam_search_with(&scorer, &model.vocab(), config)
}

/// Adds the weighted SD-CTC log-likelihood to every hypothesis and re-sorts.
///
/// Ties keep the incoming (decoder) order. A zero weight leaves the
/// combined score equal to the decoder score even when the SD-CTC term is
/// `-inf`.
pub fn rescore(
    hypotheses: &[Hypothesis],
    ps: &SpeakerPosteriorGrid,
    pv: &TokenPosteriorGrid,
    vocab: &Vocabulary,
    config: &DecodeConfig,
) -> Result<(Hypothesis, Vec<Hypothesis>)> {
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("nothing to rescore".into()));
    }
    let mut out = Vec::with_capacity(hypotheses.len());
    for h in hypotheses {
        let sd = sd_ctc_score(ps, pv, h.tokens.tokens(), vocab)?;
        let combined = if config.weight == 0.0 { h.decoder_logprob } else { h.decoder_logprob + config.weight * sd };
        out.push(Hypothesis {
            sdctc_logprob: Some(sd),
            combined_score: combined,
            ..h.clone()
        });
    }
    out.sort_by(|x, y| y.combined_score.total_cmp(&x.combined_score));
    Ok((out[0].clone(), out))
}

/// Decoding output for one sample.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub transcripts: Vec<Transcript>,
    pub hypotheses: Vec<Hypothesis>,
}

/// Runs the encoder and the selected decoding mode on one feature sequence.
pub fn decode_features(
    params: &Parameters,
    model: &ModelConfig,
    features: &FeatureSequence,
    speaker_mode: SpeakerMode,
    mode: DecodeMode,
    config: &DecodeConfig,
) -> Result<Decoded> {
    let enc = encoder_forward(params, model, features, speaker_mode)?;
    let vocab = model.vocab();
    match mode {
        DecodeMode::Ctc => Ok(Decoded {
            transcripts: ctc_greedy(&enc.ps, &enc.pv),
            hypotheses: Vec::new(),
        }),
        DecodeMode::Aed | DecodeMode::AedSdCtc => {
            let mut hyps = beam_search(params, model, enc.hidden(), config)?;
            if mode == DecodeMode::AedSdCtc && config.rescore {
                hyps = rescore(&hyps, &enc.ps, &enc.pv, &vocab, config)?.1;
            }
            Ok(Decoded {
                transcripts: limit_speakers(hyps[0].segments(&vocab), MAX_CPWER_SPEAKERS),
                hypotheses: hyps,
            })
        }
    }
}

/// Serialized hypothesis with token names; non-finite scores are written as
/// the strings `"-inf"`, `"inf"` or `"nan"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub tokens: Vec<String>,
    #[serde(with = "score")]
    pub decoder_logprob: f64,
    #[serde(with = "opt_score")]
    pub sdctc_logprob: Option<f64>,
    #[serde(with = "score")]
    pub combined_score: f64,
}

impl HypothesisRecord {
    pub fn from_hypothesis(h: &Hypothesis, vocab: &Vocabulary) -> Self {
        Self {
            tokens: h.tokens.tokens().iter().map(|&t| vocab.name(t).to_string()).collect(),
            decoder_logprob: h.decoder_logprob,
            sdctc_logprob: h.sdctc_logprob,
            combined_score: h.combined_score,
        }
    }

    pub fn to_hypothesis(&self, vocab: &Vocabulary) -> Result<Hypothesis> {
        let tokens = self
            .tokens
            .iter()
            .map(|n| vocab.id(n).ok_or_else(|| Error::InvalidArgument(format!("unknown token `{n}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Hypothesis {
            tokens: SotSequence(tokens),
            decoder_logprob: self.decoder_logprob,
            sdctc_logprob: self.sdctc_logprob,
            combined_score: self.combined_score,
        })
    }
}

mod score {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "-inf" => Ok(f64::NEG_INFINITY),
                "inf" => Ok(f64::INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("invalid score `{other}`"))),
            },
        }
    }
}

mod opt_score {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::score")] f64);

    pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        x.map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

pub const HYPOTHESIS_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedRecord {
    pub id: usize,
    /// Best hypothesis split into speaker transcripts, as token names.
    pub transcripts: Vec<Vec<String>>,
    pub hypotheses: Vec<HypothesisRecord>,
}

/// Top-level hypothesis dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisFile {
    pub version: u32,
    pub mode: DecodeMode,
    pub config: DecodeConfig,
    pub vocab: Vocabulary,
    pub samples: Vec<DecodedRecord>,
}

impl HypothesisFile {
    pub fn check_version(&self) -> Result<()> {
        if self.version != HYPOTHESIS_FILE_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        Ok(())
    }

    /// Best-hypothesis transcripts by sample id.
    pub fn transcripts(&self) -> Result<Vec<(usize, Vec<Transcript>)>> {
        let vocab = &self.vocab;
        self.samples
            .iter()
            .map(|s| {
                let ts = s
                    .transcripts
                    .iter()
                    .map(|seg| {
                        seg.iter()
                            .map(|n| vocab.id(n).ok_or_else(|| Error::InvalidArgument(format!("unknown token `{n}`"))))
                            .collect::<Result<Vec<_>>>()
                            .map(Transcript::new)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((s.id, ts))
            })
            .collect()
    }
}

pub fn decoded_record(id: usize, decoded: &Decoded, vocab: &Vocabulary) -> DecodedRecord {
    DecodedRecord {
        id,
        transcripts: decoded
            .transcripts
            .iter()
            .map(|t| t.tokens().iter().map(|&k| vocab.name(k).to_string()).collect())
            .collect(),
        hypotheses: decoded.hypotheses.iter().map(|h| HypothesisRecord::from_hypothesis(h, vocab)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::decoder::greedy_decode;
    use crate::model::params::tests::tiny;
    use crate::grid::softmax_rows;
    use ndarray::Array2;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Log-probabilities looked up by the emitted prefix, uniform elsewhere.
    struct TableScorer {
        classes: usize,
        table: HashMap<Vec<usize>, Vec<f64>>,
    }

    impl StepScorer for TableScorer {
        type State = Vec<usize>;

        fn initial(&self) -> Vec<usize> {
            Vec::new()
        }

        fn step(&self, state: &Vec<usize>, prev: usize) -> (Vec<usize>, Array1<f64>) {
            // state holds <sos> followed by the emitted tokens
            let mut seen = state.clone();
            seen.push(prev);
            let probs = self
                .table
                .get(&seen[1..])
                .cloned()
                .unwrap_or_else(|| vec![1.0 / self.classes as f64; self.classes]);
            (seen, Array1::from(probs).mapv(f64::ln))
        }
    }

    fn ps_from<R: AsRef<[f64]>>(rows: &[R]) -> SpeakerPosteriorGrid {
        let m = rows[0].as_ref().len();
        SpeakerPosteriorGrid::new(Array2::from_shape_fn((rows.len(), m), |(t, j)| rows[t].as_ref()[j])).unwrap()
    }

    fn pv_from<R: AsRef<[f64]>>(rows: &[R]) -> TokenPosteriorGrid {
        let m = rows[0].as_ref().len();
        TokenPosteriorGrid::new(Array2::from_shape_fn((rows.len(), m), |(t, j)| rows[t].as_ref()[j])).unwrap()
    }

    #[test]
    fn greedy_single_speaker() {
        // V = {a, b}, blank = 2; path a a <b> b
        let ps = SpeakerPosteriorGrid::degenerate(4, 1).unwrap();
        let pv = pv_from(&[&[0.8, 0.1, 0.1], &[0.7, 0.1, 0.2], &[0.1, 0.1, 0.8], &[0.1, 0.6, 0.3]]);
        assert_eq!(ctc_greedy(&ps, &pv), vec![Transcript::new(vec![0, 1])]);
    }

    #[test]
    fn greedy_blank_streams_are_empty() {
        let ps = ps_from(&[&[0.9, 0.1], &[0.1, 0.9], &[0.9, 0.1], &[0.1, 0.9]]);
        let pv = pv_from(&[&[0.1, 0.1, 0.8]; 4]);
        assert_eq!(ctc_greedy(&ps, &pv), vec![Transcript::empty(), Transcript::empty()]);
    }

    #[test]
    fn greedy_six_frame_instance() {
        // argmax speakers: 1 1 2 1 2 2
        // argmax tokens:   a a b <b> b a
        // speaker 1 stream: a a <b> <b> <b> <b> -> a
        // speaker 2 stream: <b> <b> b <b> b a -> b b a
        let ps = ps_from(&[&[0.6, 0.4], &[0.7, 0.3], &[0.2, 0.8], &[0.9, 0.1], &[0.3, 0.7], &[0.4, 0.6]]);
        let pv = pv_from(&[
            &[0.5, 0.3, 0.2],
            &[0.6, 0.1, 0.3],
            &[0.1, 0.8, 0.1],
            &[0.2, 0.2, 0.6],
            &[0.3, 0.4, 0.3],
            &[0.5, 0.2, 0.3],
        ]);
        assert_eq!(ctc_greedy(&ps, &pv), vec![Transcript::new(vec![0]), Transcript::new(vec![1, 1, 0])]);
    }

    proptest! {
        #[test]
        fn greedy_with_one_speaker_is_standard_greedy(logits in prop::collection::vec(-3.0f64..3.0, 4 * 12)) {
            let z = Array2::from_shape_vec((12, 4), logits).unwrap();
            let pv = TokenPosteriorGrid::new(softmax_rows(z.view())).unwrap();
            let ps = SpeakerPosteriorGrid::degenerate(12, 1).unwrap();
            let path: Vec<usize> = pv.probs().rows().into_iter().map(|r| first_argmax(r.iter().copied())).collect();
            prop_assert_eq!(ctc_greedy(&ps, &pv), vec![collapse(&path, 3)]);
        }
    }

    fn trained_like(seed: u64) -> (Parameters, ModelConfig, Array2<f64>) {
        let mut config = tiny();
        config.seed = seed;
        let mut params = Parameters::init(&config).unwrap();
        params.output.weight.mapv_inplace(|w| 3.0 * w);
        let hidden = Array2::from_shape_fn((7, config.hidden_dim), |(t, j)| ((t * 5 + j * 3 + seed as usize) as f64 * 0.41).sin());
        (params, config, hidden)
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..20 {
            let (params, config, hidden) = trained_like(seed);
            let cfg = DecodeConfig { beam_width: 1, max_output_length: 10, ..Default::default() };
            let hyps = beam_search(&params, &config, hidden.view(), &cfg).unwrap();
            assert_eq!(hyps.len(), 1);
            assert_eq!(hyps[0].tokens.tokens(), greedy_decode(&params, &config, hidden.view(), 10).as_slice());
        }
    }

    #[test]
    fn hypotheses_terminate_properly() {
        for seed in 0..10 {
            let (params, config, hidden) = trained_like(seed);
            let cfg = DecodeConfig { beam_width: 4, max_output_length: 6, ..Default::default() };
            let hyps = beam_search(&params, &config, hidden.view(), &cfg).unwrap();
            assert_eq!(hyps.len(), 4);
            let eos = config.vocab().eos_id();
            for h in &hyps {
                assert!(h.tokens.tokens().last() == Some(&eos) || h.tokens.len() == 6);
            }
            assert!(hyps.windows(2).all(|w| w[0].decoder_logprob >= w[1].decoder_logprob));
        }
    }

    #[test]
    fn beam_is_monotone_in_width() {
        for seed in 0..20 {
            let (params, config, hidden) = trained_like(seed);
            let mut last = f64::NEG_INFINITY;
            for k in [1, 2, 4, 8, 16] {
                let cfg = DecodeConfig { beam_width: k, max_output_length: 8, ..Default::default() };
                let best = beam_search(&params, &config, hidden.view(), &cfg).unwrap()[0].decoder_logprob;
                assert!(best >= last - 1e-12, "seed {seed} width {k}: {best} < {last}");
                last = best;
            }
        }
    }

    #[test]
    fn two_step_beam_matches_enumeration() {
        // vocab size 1: classes {a, <sc>, <eos>}; max length 2
        let vocab = Vocabulary::with_size(1).unwrap();
        let mut table = HashMap::new();
        table.insert(vec![], vec![0.5, 0.2, 0.3]);
        table.insert(vec![0], vec![0.1, 0.3, 0.6]);
        table.insert(vec![vocab.sc_id()], vec![0.9, 0.05, 0.05]);
        let scorer = TableScorer { classes: 3, table };
        let cfg = DecodeConfig { beam_width: 2, max_output_length: 2, ..Default::default() };
        let hyps = beam_search_with(&scorer, &vocab, &cfg).unwrap();

        // step 1 keeps {a: 0.5, <eos>: 0.3}; <eos> finishes.
        // step 2 expands a: a a 0.05, a <sc> 0.15, a <eos> 0.30 -> keep top two.
        let (a, sc, eos) = (0, vocab.sc_id(), vocab.eos_id());
        let mut expected = vec![
            (vec![eos], 0.3f64.ln()),
            (vec![a, eos], (0.5f64 * 0.6).ln()),
            (vec![a, sc], (0.5f64 * 0.3).ln()),
        ];
        expected.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        expected.truncate(2);
        assert_eq!(hyps.len(), 2);
        for (h, (tokens, score)) in hyps.iter().zip(&expected) {
            assert_eq!(h.tokens.tokens(), tokens.as_slice());
            assert!((h.decoder_logprob - score).abs() < 1e-12);
        }
    }

    fn hyp(tokens: Vec<usize>, score: f64) -> Hypothesis {
        Hypothesis { tokens: SotSequence(tokens), decoder_logprob: score, sdctc_logprob: None, combined_score: score }
    }

    #[test]
    fn rescoring_arithmetic_and_pruning() {
        let vocab = Vocabulary::with_size(2).unwrap();
        let (sc, eos) = (vocab.sc_id(), vocab.eos_id());
        let ps = ps_from(&[&[0.9, 0.1]; 6]);
        let pv = pv_from(&[&[0.4, 0.4, 0.2]; 6]);
        let three = hyp(vec![0, sc, 1, sc, 0, eos], -0.5);
        let two = hyp(vec![0, sc, 1, eos], -1.0);
        let cfg = DecodeConfig::default();
        let (best, list) = rescore(&[three.clone(), two.clone()], &ps, &pv, &vocab, &cfg).unwrap();
        assert_eq!(best.tokens, two.tokens);
        assert_eq!(list[1].sdctc_logprob, Some(f64::NEG_INFINITY));
        for h in &list {
            let sd = h.sdctc_logprob.unwrap();
            let expected = h.decoder_logprob + cfg.weight * sd;
            assert!(h.combined_score == expected || (h.combined_score.is_infinite() && expected.is_infinite()));
        }
        let sd = list[0].sdctc_logprob.unwrap();
        assert_eq!(list[0].combined_score, -1.0 + 0.3 * sd);
        assert!((-1.0 + 0.3 * -2.0f64 - (-1.6)).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_keeps_decoder_ranking() {
        let vocab = Vocabulary::with_size(2).unwrap();
        let (sc, eos) = (vocab.sc_id(), vocab.eos_id());
        let ps = ps_from(&[&[0.6, 0.4]; 5]);
        let pv = pv_from(&[&[0.3, 0.3, 0.4]; 5]);
        let hyps = vec![
            hyp(vec![0, sc, 1, sc, 0, eos], -0.2),
            hyp(vec![1, eos], -0.7),
            hyp(vec![0, sc, 1, eos], -0.7),
            hyp(vec![0, 0, 0, 0, 0, 0, eos], -2.0),
        ];
        let cfg = DecodeConfig { weight: 0.0, ..Default::default() };
        let (_, list) = rescore(&hyps, &ps, &pv, &vocab, &cfg).unwrap();
        let order: Vec<_> = list.iter().map(|h| h.tokens.clone()).collect();
        let original: Vec<_> = hyps.iter().map(|h| h.tokens.clone()).collect();
        assert_eq!(order, original);
    }

    #[test]
    fn rescoring_is_a_permutation() {
        let vocab = Vocabulary::with_size(2).unwrap();
        let ps = ps_from(&[&[0.5, 0.5]; 4]);
        let pv = pv_from(&[&[0.2, 0.5, 0.3]; 4]);
        let hyps: Vec<_> = (0..5).map(|i| hyp(vec![i % 2, vocab.sc_id(), 1 - i % 2, vocab.eos_id()], -(i as f64))).collect();
        let (_, list) = rescore(&hyps, &ps, &pv, &vocab, &DecodeConfig::default()).unwrap();
        let mut a: Vec<_> = hyps.iter().map(|h| (h.tokens.clone(), h.decoder_logprob.to_bits())).collect();
        let mut b: Vec<_> = list.iter().map(|h| (h.tokens.clone(), h.decoder_logprob.to_bits())).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(rescore(&[], &ps, &pv, &vocab, &DecodeConfig::default()).is_err());
    }

    #[test]
    fn record_round_trip_keeps_infinities() {
        let vocab = Vocabulary::with_size(2).unwrap();
        let h = Hypothesis {
            tokens: SotSequence(vec![0, vocab.sc_id(), 1, vocab.eos_id()]),
            decoder_logprob: -1.25,
            sdctc_logprob: Some(f64::NEG_INFINITY),
            combined_score: f64::NEG_INFINITY,
        };
        let rec = HypothesisRecord::from_hypothesis(&h, &vocab);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"-inf\""));
        let back: HypothesisRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_hypothesis(&vocab).unwrap(), h);
        assert_eq!(rec.tokens, vec!["a", "<sc>", "b", "<eos>"]);
    }

    #[test]
    fn config_and_mode_parsing() {
        let d = DecodeConfig::default();
        assert_eq!((d.beam_width, d.weight), (16, 0.3));
        assert!(DecodeConfig { beam_width: 0, ..d }.validate().is_err());
        assert!(DecodeConfig { weight: -0.1, ..d }.validate().is_err());
        assert_eq!("aed+sdctc".parse::<DecodeMode>().unwrap(), DecodeMode::AedSdCtc);
        assert!("beam".parse::<DecodeMode>().is_err());
    }
}
