//! Scoring (WER, cpWER), run comparison, and diagnostic dumps.

mod lda;
mod report;

pub use lda::{lda_projection, LdaClass, LdaProjection};
pub use report::{
    attention_dump, compare_runs, read_matrix_csv, write_matrix_csv, Comparison, ComparisonRow, SampleScore,
    ScoreReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Transcript;

/// Largest padded speaker count accepted by [`cpwer`].
pub const MAX_CPWER_SPEAKERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub edits: usize,
    pub ref_len: usize,
}

/// Levenshtein distance between token sequences.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

pub fn wer(reference: &Transcript, hypothesis: &Transcript) -> WerCounts {
    WerCounts {
        edits: edit_distance(reference.tokens(), hypothesis.tokens()),
        ref_len: reference.len(),
    }
}

/// Minimum-permutation score of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpWer {
    pub edits: usize,
    pub ref_len: usize,
    /// `permutation[i]` is the hypothesis index paired with reference `i`
    /// (indices past the original list lengths are padding).
    pub permutation: Vec<usize>,
}

impl CpWer {
    pub fn rate(&self) -> f64 {
        self.edits as f64 / self.ref_len.max(1) as f64
    }
}

/// Concatenated minimum-permutation edit count between per-speaker
/// references and hypotheses. The shorter list is padded with empty
/// transcripts.
///
/// Empty transcripts are equivalent to padding, so the search runs over the
/// non-empty ones only; more than [`MAX_CPWER_SPEAKERS`] of those on either
/// side is rejected.
pub fn cpwer(references: &[Transcript], hypotheses: &[Transcript]) -> Result<CpWer> {
    let keep = |xs: &[Transcript]| -> Vec<usize> { (0..xs.len()).filter(|&i| !xs[i].is_empty()).collect() };
    let (r_idx, h_idx) = (keep(references), keep(hypotheses));
    let n = r_idx.len().max(h_idx.len());
    if n > MAX_CPWER_SPEAKERS {
        return Err(Error::InvalidArgument(format!(
            "{n} non-empty transcripts exceeds the cpWER permutation limit of {MAX_CPWER_SPEAKERS}"
        )));
    }
    fn at<'a>(xs: &'a [Transcript], idx: &[usize], i: usize) -> &'a [usize] {
        idx.get(i).map_or(&[], |&k| xs[k].tokens())
    }
    let mut cost = vec![vec![0usize; n]; n];
    for (i, row) in cost.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = edit_distance(at(references, &r_idx, i), at(hypotheses, &h_idx, j));
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (usize::MAX, perm.clone());
    // lexicographic enumeration keeps the first minimum deterministic
    loop {
        let total: usize = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if total < best.0 {
            best = (total, perm.clone());
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(CpWer {
        edits: if n == 0 { 0 } else { best.0 },
        ref_len: references.iter().map(Transcript::len).sum(),
        permutation: expand_permutation(references, hypotheses, &r_idx, &h_idx, &best.1),
    })
}

/// Lifts an assignment between non-empty transcripts to the padded lists,
/// pairing the leftover slots in index order.
fn expand_permutation(
    references: &[Transcript],
    hypotheses: &[Transcript],
    r_idx: &[usize],
    h_idx: &[usize],
    perm: &[usize],
) -> Vec<usize> {
    let full = references.len().max(hypotheses.len());
    let mut out = vec![usize::MAX; full];
    let mut used = vec![false; full];
    for (i, &j) in perm.iter().enumerate() {
        if let (Some(&r), Some(&h)) = (r_idx.get(i), h_idx.get(j)) {
            out[r] = h;
            used[h] = true;
        }
    }
    let mut remaining: Vec<usize> = (0..full).filter(|&h| !used[h]).collect();
    remaining.reverse();
    for slot in out.iter_mut() {
        if *slot == usize::MAX {
            *slot = remaining.pop().expect("as many free hypotheses as free references");
        }
    }
    out
}

/// Drops empty segments and folds everything past the first `max` non-empty
/// segments into the last kept one, so decoded output always fits [`cpwer`].
pub fn limit_speakers(segments: Vec<Transcript>, max: usize) -> Vec<Transcript> {
    let mut out: Vec<Transcript> = segments.into_iter().filter(|t| !t.is_empty()).collect();
    if max > 0 && out.len() > max {
        let tail: Vec<usize> = out.drain(max..).flat_map(|t| t.0).collect();
        out[max - 1].0.extend(tail);
    }
    out
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let Some(i) = (0..p.len() - 1).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..p.len()).rev().find(|&j| p[j] > p[i]).expect("successor exists");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(xs: &[usize]) -> Transcript {
        Transcript::new(xs.to_vec())
    }

    #[test]
    fn wer_examples() {
        let (a, b, c, d, x) = (0, 1, 2, 3, 9);
        assert_eq!(wer(&t(&[a, b, c]), &t(&[a, b, c])).edits, 0);
        assert_eq!(wer(&t(&[a, b]), &t(&[])), WerCounts { edits: 2, ref_len: 2 });
        assert_eq!(wer(&t(&[a, b, c, d]), &t(&[a, x, c])).edits, 2);
    }

    #[test]
    fn cpwer_examples() {
        let swap = cpwer(&[t(&[0, 1, 2]), t(&[3, 4])], &[t(&[3, 4]), t(&[0, 1, 2])]).unwrap();
        assert_eq!(swap.edits, 0);
        assert_eq!(swap.permutation, vec![1, 0]);

        let one_sub = cpwer(&[t(&[0, 1]), t(&[2, 3])], &[t(&[0, 1]), t(&[2, 9])]).unwrap();
        assert_eq!((one_sub.edits, one_sub.ref_len), (1, 4));
        assert!((one_sub.rate() - 0.25).abs() < 1e-15);

        let padded = cpwer(&[t(&[0])], &[t(&[0]), t(&[1])]).unwrap();
        assert_eq!((padded.edits, padded.ref_len), (1, 1));
        assert_eq!(padded.permutation, vec![0, 1]);

        let too_many = vec![t(&[0]); 9];
        assert!(cpwer(&too_many, &[]).is_err());
        let mut sparse = vec![t(&[]); 20];
        sparse[7] = t(&[1]);
        let score = cpwer(&[t(&[0]), t(&[1])], &sparse).unwrap();
        assert_eq!(score.edits, 1);
        assert_eq!(score.permutation[1], 7);
        assert_eq!(cpwer(&[], &[]).unwrap().edits, 0);
    }

    #[test]
    fn limiting_speakers_folds_the_tail() {
        let segs = vec![t(&[0]), t(&[]), t(&[1]), t(&[2]), t(&[3])];
        assert_eq!(limit_speakers(segs.clone(), 2), vec![t(&[0]), t(&[1, 2, 3])]);
        assert_eq!(limit_speakers(segs, 8).len(), 4);
    }

    #[test]
    fn permutations_are_exhaustive() {
        let mut p = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 24);
    }

    fn transcripts() -> impl Strategy<Value = Vec<Transcript>> {
        prop::collection::vec(prop::collection::vec(0usize..4, 0..5).prop_map(Transcript::new), 0..4)
    }

    proptest! {
        #[test]
        fn cpwer_never_exceeds_identity(refs in transcripts(), hyps in transcripts()) {
            let score = cpwer(&refs, &hyps).unwrap();
            let n = refs.len().max(hyps.len());
            let empty = Transcript::empty();
            let identity: usize = (0..n)
                .map(|i| edit_distance(refs.get(i).unwrap_or(&empty).tokens(), hyps.get(i).unwrap_or(&empty).tokens()))
                .sum();
            prop_assert!(score.edits <= identity);
        }

        #[test]
        fn permutation_realizes_the_score(refs in transcripts(), hyps in transcripts()) {
            let score = cpwer(&refs, &hyps).unwrap();
            let n = refs.len().max(hyps.len());
            let mut sorted = score.permutation.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            let empty = Transcript::empty();
            let realized: usize = score
                .permutation
                .iter()
                .enumerate()
                .map(|(i, &j)| edit_distance(refs.get(i).unwrap_or(&empty).tokens(), hyps.get(j).unwrap_or(&empty).tokens()))
                .sum();
            prop_assert_eq!(realized, score.edits);
        }

        #[test]
        fn cpwer_of_a_permutation_is_zero(refs in transcripts(), rot in 0usize..4) {
            let mut hyps = refs.clone();
            if !hyps.is_empty() {
                let k = rot % hyps.len();
                hyps.rotate_left(k);
            }
            prop_assert_eq!(cpwer(&refs, &hyps).unwrap().edits, 0);
        }

        #[test]
        fn edit_distance_is_symmetric(a in prop::collection::vec(0usize..4, 0..8), b in prop::collection::vec(0usize..4, 0..8)) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        }
    }
}
