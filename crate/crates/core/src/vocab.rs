use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token inventory shared by the CTC heads and the attention decoder.
///
/// Regular tokens occupy ids `0..n`. The CTC blank is `n`, followed by the
/// speaker-change marker, end-of-sequence and start-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("vocabulary must hold at least one token".into()));
        }
        for (i, t) in tokens.iter().enumerate() {
            if tokens[..i].contains(t) {
                return Err(Error::InvalidArgument(format!("duplicate token name {t:?}")));
            }
            if t.starts_with('<') {
                return Err(Error::InvalidArgument(format!("token name {t:?} collides with special tokens")));
            }
        }
        Ok(Self { tokens })
    }

    /// Letters `a`, `b`, ... for small sizes, `t0`, `t1`, ... otherwise.
    pub fn with_size(n: usize) -> Result<Self> {
        let tokens = if n <= 26 {
            (0..n).map(|i| ((b'a' + i as u8) as char).to_string()).collect()
        } else {
            (0..n).map(|i| format!("t{i}")).collect()
        };
        Self::new(tokens)
    }

    /// Number of regular tokens, |V|.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        self.len()
    }

    pub fn sc_id(&self) -> usize {
        self.len() + 1
    }

    pub fn eos_id(&self) -> usize {
        self.len() + 2
    }

    pub fn sos_id(&self) -> usize {
        self.len() + 3
    }

    /// Columns of a CTC emission grid: |V| + 1.
    pub fn ctc_classes(&self) -> usize {
        self.len() + 1
    }

    /// Output classes of the attention decoder: V, `<sc>`, `<eos>`.
    pub fn decoder_classes(&self) -> usize {
        self.len() + 2
    }

    /// Rows of the decoder input embedding (every id up to `<sos>`).
    pub fn embedding_rows(&self) -> usize {
        self.len() + 4
    }

    pub fn is_regular(&self, id: usize) -> bool {
        id < self.len()
    }

    /// Decoder output class for a token id, if the decoder can emit it.
    pub fn decoder_class(&self, id: usize) -> Option<usize> {
        if id < self.len() {
            Some(id)
        } else if id == self.sc_id() {
            Some(self.len())
        } else if id == self.eos_id() {
            Some(self.len() + 1)
        } else {
            None
        }
    }

    pub fn decoder_token(&self, class: usize) -> usize {
        if class < self.len() {
            class
        } else if class == self.len() {
            self.sc_id()
        } else {
            self.eos_id()
        }
    }

    pub fn name(&self, id: usize) -> &str {
        if id < self.len() {
            &self.tokens[id]
        } else if id == self.blank_id() {
            "<b>"
        } else if id == self.sc_id() {
            "<sc>"
        } else if id == self.eos_id() {
            "<eos>"
        } else if id == self.sos_id() {
            "<sos>"
        } else {
            "<unk>"
        }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        match name {
            "<b>" => Some(self.blank_id()),
            "<sc>" => Some(self.sc_id()),
            "<eos>" => Some(self.eos_id()),
            "<sos>" => Some(self.sos_id()),
            _ => self.tokens.iter().position(|t| t == name),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A single speaker's token sequence over V.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript(pub Vec<usize>);

impl Transcript {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks every element is a regular token of `vocab_size`.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab_size) {
            Some(&token) => Err(Error::TokenOutOfRange { token, limit: vocab_size }),
            None => Ok(()),
        }
    }
}

impl From<Vec<usize>> for Transcript {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl From<&[usize]> for Transcript {
    fn from(v: &[usize]) -> Self {
        Self(v.to_vec())
    }
}

/// Speaker slots `s_1..s_M`, ordered by first appearance within a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerInventory {
    max_speakers: usize,
}

impl SpeakerInventory {
    pub fn new(max_speakers: usize) -> Result<Self> {
        if max_speakers == 0 {
            return Err(Error::InvalidArgument("speaker inventory needs M >= 1".into()));
        }
        Ok(Self { max_speakers })
    }

    pub fn len(&self) -> usize {
        self.max_speakers
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Human-readable label, 1-based: `s1`, `s2`, ...
    pub fn label(&self, index: usize) -> String {
        format!("s{}", index + 1)
    }

    pub fn contains(&self, index: usize) -> bool {
        index < self.max_speakers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_ids_follow_regular_tokens() {
        let v = Vocabulary::with_size(3).unwrap();
        assert_eq!(v.blank_id(), 3);
        assert_eq!(v.sc_id(), 4);
        assert_eq!(v.eos_id(), 5);
        assert_eq!(v.sos_id(), 6);
        let ids = [v.blank_id(), v.sc_id(), v.eos_id(), v.sos_id()];
        for (i, a) in ids.iter().enumerate() {
            assert!(!v.is_regular(*a));
            for b in &ids[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(v.name(1), "b");
        assert_eq!(v.id("<sc>"), Some(4));
    }

    #[test]
    fn decoder_classes_round_trip() {
        let v = Vocabulary::with_size(5).unwrap();
        for id in (0..5).chain([v.sc_id(), v.eos_id()]) {
            let c = v.decoder_class(id).unwrap();
            assert!(c < v.decoder_classes());
            assert_eq!(v.decoder_token(c), id);
        }
        assert_eq!(v.decoder_class(v.blank_id()), None);
        assert_eq!(v.decoder_class(v.sos_id()), None);
    }

    #[test]
    fn rejects_empty_and_duplicate_vocabularies() {
        assert!(Vocabulary::new(vec![]).is_err());
        assert!(Vocabulary::new(vec!["x".into(), "x".into()]).is_err());
        assert!(Vocabulary::new(vec!["<b>".into()]).is_err());
        assert!(SpeakerInventory::new(0).is_err());
    }

    #[test]
    fn transcript_validation() {
        assert!(Transcript::new(vec![0, 2]).validate(3).is_ok());
        assert!(matches!(
            Transcript::new(vec![3]).validate(3),
            Err(Error::TokenOutOfRange { token: 3, .. })
        ));
        assert!(Transcript::empty().validate(1).is_ok());
    }
}
