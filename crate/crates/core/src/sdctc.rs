//! Speaker-distinguishable CTC.
//!
//! For every speaker slot `σ` the token posteriors are reweighted by the
//! speaker posterior, giving a per-speaker emission grid whose last column is
//! the speaker-specific blank `<¬s>`:
//!
//! ```text
//! P(σ, ρ | x_t)   = P_s(σ | x_t) · P_v(ρ | x_t)                ρ ∈ V
//! P(σ, <¬s> | x_t) = P_s(σ | x_t) · P_v(<b> | x_t) + 1 − P_s(σ | x_t)
//! ```
//!
//! Each grid is scored by the ordinary CTC lattice against that speaker's
//! transcript and the per-speaker losses are summed.

use ndarray::{Array2, ArrayView2};

use crate::ctc::{ctc_grad, ctc_loss};
use crate::error::{Error, Result};
use crate::grid::{
    log_softmax_backward, to_log_domain, LossBreakdown, ProbabilityGrid, SpeakerPosteriorGrid,
    TokenPosteriorGrid, PROB_FLOOR,
};
use crate::sot::deserialize;
use crate::vocab::{Transcript, Vocabulary};

/// Emission grid of one speaker slot over `V ∪ {<¬s>}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTokenGrid {
    pub speaker: usize,
    probs: Array2<f64>,
    log_probs: Array2<f64>,
}

impl SpeakerTokenGrid {
    pub fn log_probs(&self) -> ArrayView2<'_, f64> {
        self.log_probs.view()
    }
}

impl ProbabilityGrid for SpeakerTokenGrid {
    fn probs(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }
}

fn check_frames(ps: &SpeakerPosteriorGrid, pv: &TokenPosteriorGrid) -> Result<()> {
    if ps.frames() != pv.frames() {
        return Err(Error::Shape(format!(
            "speaker grid has {} frames, token grid has {}",
            ps.frames(),
            pv.frames()
        )));
    }
    Ok(())
}

/// Builds the emission grid for speaker slot `speaker` (0-based).
pub fn speaker_token_grid(
    ps: &SpeakerPosteriorGrid,
    pv: &TokenPosteriorGrid,
    speaker: usize,
) -> Result<SpeakerTokenGrid> {
    check_frames(ps, pv)?;
    if speaker >= ps.speakers() {
        return Err(Error::InvalidArgument(format!(
            "speaker index {speaker} outside inventory of {}",
            ps.speakers()
        )));
    }
    let blank = pv.blank();
    let s = ps.probs().column(speaker).to_owned();
    let mut probs = pv.probs().to_owned();
    for (mut row, &s) in probs.rows_mut().into_iter().zip(s.iter()) {
        let pb = row[blank];
        row.mapv_inplace(|p| s * p);
        row[blank] = s * pb + (1.0 - s);
    }
    let log_probs = to_log_domain(probs.view(), PROB_FLOOR)?;
    Ok(SpeakerTokenGrid { speaker, probs, log_probs })
}

fn target_for(transcripts: &[Transcript], speaker: usize) -> &[usize] {
    transcripts.get(speaker).map_or(&[], |t| t.tokens())
}

fn check_transcripts(ps: &SpeakerPosteriorGrid, transcripts: &[Transcript]) -> Result<()> {
    if transcripts.len() > ps.speakers() {
        return Err(Error::TooManySpeakers {
            got: transcripts.len(),
            max: ps.speakers(),
        });
    }
    Ok(())
}

/// Per-speaker and total SD-CTC loss.
///
/// Transcript `i` is scored against speaker slot `i`; slots without a
/// transcript are scored against the empty sequence.
pub fn sd_ctc_loss(
    ps: &SpeakerPosteriorGrid,
    pv: &TokenPosteriorGrid,
    transcripts: &[Transcript],
) -> Result<LossBreakdown> {
    check_frames(ps, pv)?;
    check_transcripts(ps, transcripts)?;
    let per_speaker = (0..ps.speakers())
        .map(|m| {
            let grid = speaker_token_grid(ps, pv, m)?;
            Ok(ctc_loss(grid.log_probs(), target_for(transcripts, m))?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::from_per_speaker(per_speaker))
}

/// Gradients of the total SD-CTC loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SdCtcGradients {
    pub loss: LossBreakdown,
    /// `∂L/∂ln P_s`, `T x M`.
    pub speaker_log_probs: Array2<f64>,
    /// `∂L/∂ln P_v`, `T x (|V|+1)`.
    pub token_log_probs: Array2<f64>,
    /// `∂L/∂z` for the speaker-head logits.
    pub speaker_logits: Array2<f64>,
    /// `∂L/∂z` for the token-head logits.
    pub token_logits: Array2<f64>,
}

/// Chain rule from each speaker lattice back through the grid construction
/// and both softmaxes. Speakers are accumulated in slot order.
pub fn sd_ctc_grad(
    ps: &SpeakerPosteriorGrid,
    pv: &TokenPosteriorGrid,
    transcripts: &[Transcript],
) -> Result<SdCtcGradients> {
    check_frames(ps, pv)?;
    check_transcripts(ps, transcripts)?;
    let (frames, classes) = pv.probs().dim();
    let blank = classes - 1;
    let speakers = ps.speakers();
    let s_probs = ps.probs();
    let v_probs = pv.probs();

    let mut g_log_s = Array2::zeros((frames, speakers));
    let mut g_log_v = Array2::zeros((frames, classes));
    let mut per_speaker = Vec::with_capacity(speakers);

    for m in 0..speakers {
        let grid = speaker_token_grid(ps, pv, m)?;
        let target = target_for(transcripts, m);
        let (loss, lattice) = ctc_loss(grid.log_probs(), target)?;
        if !loss.is_finite() {
            return Err(Error::InfiniteLoss);
        }
        per_speaker.push(loss);
        // g[t, k] = ∂L_m / ∂ln q_m[t, k]
        let g = ctc_grad(grid.log_probs(), target, &lattice)?;
        let q = grid.probs();
        for t in 0..frames {
            let s = s_probs[[t, m]];
            let mut acc_s = 0.0;
            for k in 0..blank {
                if q[[t, k]] < PROB_FLOOR {
                    continue;
                }
                // ln q = ln s + ln v
                acc_s += g[[t, k]];
                g_log_v[[t, k]] += g[[t, k]];
            }
            let qb = q[[t, blank]];
            if qb >= PROB_FLOOR {
                let vb = v_probs[[t, blank]];
                acc_s += g[[t, blank]] * s * (vb - 1.0) / qb;
                g_log_v[[t, blank]] += g[[t, blank]] * s * vb / qb;
            }
            g_log_s[[t, m]] = acc_s;
        }
    }

    let speaker_logits = log_softmax_backward(s_probs, g_log_s.view());
    let token_logits = log_softmax_backward(v_probs, g_log_v.view());
    Ok(SdCtcGradients {
        loss: LossBreakdown::from_per_speaker(per_speaker),
        speaker_log_probs: g_log_s,
        token_log_probs: g_log_v,
        speaker_logits,
        token_logits,
    })
}

/// SD-CTC log-likelihood of a serialized hypothesis.
///
/// `-inf` when the hypothesis splits into more segments than speaker slots,
/// contains a non-vocabulary token inside a segment, or is infeasible.
pub fn sd_ctc_score(
    ps: &SpeakerPosteriorGrid,
    pv: &TokenPosteriorGrid,
    hypothesis: &[usize],
    vocab: &Vocabulary,
) -> Result<f64> {
    check_frames(ps, pv)?;
    let segments = deserialize(hypothesis, vocab);
    if segments.len() > ps.speakers() {
        return Ok(f64::NEG_INFINITY);
    }
    if segments.iter().any(|s| s.validate(vocab.len()).is_err()) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(-sd_ctc_loss(ps, pv, &segments)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{ctc_bruteforce, ctc_logit_grad};
    use crate::grid::softmax_rows;
    use ndarray::array;

    fn uniform_pv(frames: usize) -> TokenPosteriorGrid {
        TokenPosteriorGrid::new(Array2::from_elem((frames, 3), 1.0 / 3.0)).unwrap()
    }

    fn constant_ps(frames: usize, row: &[f64]) -> SpeakerPosteriorGrid {
        let probs = Array2::from_shape_fn((frames, row.len()), |(_, m)| row[m]);
        SpeakerPosteriorGrid::new(probs).unwrap()
    }

    #[test]
    fn grid_row_matches_hand_evaluation() {
        let ps = constant_ps(1, &[0.8, 0.2]);
        let pv = TokenPosteriorGrid::new(array![[0.3, 0.2, 0.5]]).unwrap();
        let g = speaker_token_grid(&ps, &pv, 0).unwrap();
        let row = g.probs().row(0).to_owned();
        assert!((row[0] - 0.24).abs() < 1e-15);
        assert!((row[1] - 0.16).abs() < 1e-15);
        assert!((row[2] - 0.6).abs() < 1e-15);
        assert!((row.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn certain_and_absent_speaker_rows() {
        let pv = TokenPosteriorGrid::new(array![[0.3, 0.2, 0.5]]).unwrap();
        let ps = constant_ps(1, &[1.0, 0.0]);
        let present = speaker_token_grid(&ps, &pv, 0).unwrap();
        assert_eq!(present.probs(), pv.probs());
        let absent = speaker_token_grid(&ps, &pv, 1).unwrap();
        assert_eq!(absent.probs().row(0).to_vec(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn grid_errors() {
        let ps = constant_ps(2, &[0.5, 0.5]);
        let pv = uniform_pv(3);
        assert!(matches!(speaker_token_grid(&ps, &pv, 0), Err(Error::Shape(_))));
        let pv = uniform_pv(2);
        assert!(speaker_token_grid(&ps, &pv, 2).is_err());
        let three = vec![Transcript::empty(); 3];
        assert!(matches!(
            sd_ctc_loss(&ps, &pv, &three),
            Err(Error::TooManySpeakers { got: 3, max: 2 })
        ));
    }

    #[test]
    fn two_speaker_constant_instance_matches_enumeration() {
        let ps = constant_ps(2, &[0.8, 0.2]);
        let pv = uniform_pv(2);
        let transcripts = [Transcript::new(vec![0]), Transcript::new(vec![1])];
        // Hand-evaluated grids: s1 row = {a: 0.8/3, b: 0.8/3, <¬s>: 0.8/3 + 0.2},
        // s2 row = {a: 0.2/3, b: 0.2/3, <¬s>: 0.2/3 + 0.8}.
        let oracle: f64 = [(0.8, 0usize), (0.2, 1usize)]
            .iter()
            .map(|&(s, tok)| {
                let row = [s / 3.0, s / 3.0, s / 3.0 + (1.0 - s)];
                let p = Array2::from_shape_fn((2, 3), |(_, k)| row[k]);
                -ctc_bruteforce(p.view(), &[tok]).unwrap().ln()
            })
            .sum();
        let loss = sd_ctc_loss(&ps, &pv, &transcripts).unwrap();
        assert!((loss.total - oracle).abs() < 1e-12);
        assert!((loss.total - loss.per_speaker.iter().sum::<f64>()).abs() < 1e-12);

        let vocab = Vocabulary::with_size(2).unwrap();
        let sot = [0, vocab.sc_id(), 1, vocab.eos_id()];
        let score = sd_ctc_score(&ps, &pv, &sot, &vocab).unwrap();
        assert!((score + oracle).abs() < 1e-12);
    }

    #[test]
    fn score_penalizes_speaker_overflow() {
        let vocab = Vocabulary::with_size(2).unwrap();
        let ps = constant_ps(6, &[0.5, 0.5]);
        let pv = uniform_pv(6);
        let hyp = [0, vocab.sc_id(), 1, vocab.sc_id(), 0, vocab.eos_id()];
        assert_eq!(sd_ctc_score(&ps, &pv, &hyp, &vocab).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn single_speaker_score_is_negative_ctc_loss() {
        let vocab = Vocabulary::with_size(2).unwrap();
        let pv = TokenPosteriorGrid::new(array![[0.6, 0.1, 0.3], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8]]).unwrap();
        let ps = SpeakerPosteriorGrid::degenerate(3, 1).unwrap();
        let score = sd_ctc_score(&ps, &pv, &[0, 1, vocab.eos_id()], &vocab).unwrap();
        let (loss, _) = ctc_loss(pv.log_probs(), &[0, 1]).unwrap();
        assert!((score + loss).abs() < 1e-12);
    }

    #[test]
    fn degenerate_speaker_gradient_reduces_to_ctc() {
        let logits = array![[0.3, -1.0, 0.5], [1.2, 0.1, -0.4], [0.0, 0.7, 0.2], [-0.5, 0.3, 0.9]];
        let pv = TokenPosteriorGrid::from_logits(logits.view()).unwrap();
        let ps = SpeakerPosteriorGrid::degenerate(4, 1).unwrap();
        let target = Transcript::new(vec![0, 1]);
        let sd = sd_ctc_grad(&ps, &pv, std::slice::from_ref(&target)).unwrap();
        let (loss, reference) = ctc_logit_grad(logits.view(), target.tokens()).unwrap();
        assert!((sd.loss.total - loss).abs() < 1e-12);
        for (a, b) in sd.token_logits.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(sd.speaker_logits.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn perfect_blank_prediction_has_zero_gradient() {
        let mut probs = Array2::zeros((4, 3));
        probs.column_mut(2).fill(1.0);
        let pv = TokenPosteriorGrid::new(probs).unwrap();
        let ps = SpeakerPosteriorGrid::new(softmax_rows(Array2::from_shape_fn((4, 2), |(_, m)| [0.2, 0.1][m]).view())).unwrap();
        let g = sd_ctc_grad(&ps, &pv, &[Transcript::empty(), Transcript::empty()]).unwrap();
        assert_eq!(g.loss.total, 0.0);
        assert!(g.speaker_logits.iter().all(|&x| x.abs() < 1e-15));
        assert!(g.token_logits.iter().all(|&x| x.abs() < 1e-15));
    }
}
