//! Serialized output training targets: per-speaker transcripts in onset
//! order, separated by `<sc>` and terminated by a single `<eos>`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Transcript, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SotSequence(pub Vec<usize>);

impl SotSequence {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks the target-side invariants: one trailing `<eos>`, non-empty
    /// segments, and only regular tokens between separators.
    pub fn validate_target(&self, vocab: &Vocabulary) -> Result<()> {
        let Some((&last, body)) = self.0.split_last() else {
            return Err(Error::InvalidArgument("empty SOT sequence".into()));
        };
        if last != vocab.eos_id() {
            return Err(Error::InvalidArgument("SOT target must end with <eos>".into()));
        }
        let mut segment_len = 0;
        for &tok in body {
            if tok == vocab.sc_id() {
                if segment_len == 0 {
                    return Err(Error::InvalidArgument("empty segment in SOT target".into()));
                }
                segment_len = 0;
            } else if vocab.is_regular(tok) {
                segment_len += 1;
            } else {
                return Err(Error::TokenOutOfRange { token: tok, limit: vocab.len() });
            }
        }
        if segment_len == 0 {
            return Err(Error::InvalidArgument("empty segment in SOT target".into()));
        }
        Ok(())
    }
}

/// Joins onset-ordered transcripts with `<sc>` and appends `<eos>`.
pub fn serialize(transcripts: &[Transcript], vocab: &Vocabulary) -> Result<SotSequence> {
    if transcripts.is_empty() {
        return Err(Error::InvalidArgument("cannot serialize zero transcripts".into()));
    }
    let mut out = Vec::with_capacity(transcripts.iter().map(|t| t.len() + 1).sum());
    for (i, t) in transcripts.iter().enumerate() {
        if t.is_empty() {
            return Err(Error::InvalidArgument(format!("transcript {i} is empty")));
        }
        t.validate(vocab.len())?;
        if i > 0 {
            out.push(vocab.sc_id());
        }
        out.extend_from_slice(t.tokens());
    }
    out.push(vocab.eos_id());
    Ok(SotSequence(out))
}

/// Splits a (possibly malformed) hypothesis on `<sc>`.
///
/// Everything from the first `<eos>` on is dropped; empty segments are kept.
pub fn deserialize(seq: &[usize], vocab: &Vocabulary) -> Vec<Transcript> {
    let end = seq.iter().position(|&t| t == vocab.eos_id()).unwrap_or(seq.len());
    seq[..end]
        .split(|&t| t == vocab.sc_id())
        .map(Transcript::from)
        .collect()
}

/// Human-readable rendering, e.g. `a b <sc> c`.
pub fn render(seq: &[usize], vocab: &Vocabulary) -> String {
    deserialize(seq, vocab)
        .iter()
        .map(|seg| render_transcript(seg, vocab))
        .collect::<Vec<_>>()
        .join(" <sc> ")
}

pub fn render_transcript(t: &Transcript, vocab: &Vocabulary) -> String {
    t.tokens().iter().map(|&k| vocab.name(k)).collect::<Vec<_>>().join(" ")
}
