use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Shapes of the toy encoder/decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Frames of symmetric context concatenated around each frame.
    pub context_window: usize,
    /// Width of the sinusoidal frame-position features (even).
    pub position_dim: usize,
    pub encoder_layers: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub decoder_dim: usize,
    pub vocab_size: usize,
    pub speakers: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.feature_dim,
            self.encoder_layers,
            self.hidden_dim,
            self.embed_dim,
            self.decoder_dim,
            self.vocab_size,
            self.speakers,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must all be >= 1".into()));
        }
        if !self.position_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("position_dim must be even".into()));
        }
        Ok(())
    }

    /// Width of one featurized encoder input row.
    pub fn input_dim(&self) -> usize {
        (2 * self.context_window + 2) * self.feature_dim + self.position_dim
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::with_size(self.vocab_size).expect("vocab_size validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn uniform<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let s = 1.0 / (inp as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((out, inp), |_| rng.random_range(-s..s)),
            bias: Array1::from_shape_fn(out, |_| rng.random_range(-s..s)),
        }
    }
}

/// Which training stage may update a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    TokenHead,
    SpeakerHead,
    Decoder,
}

/// All trainable tensors. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub encoder: Vec<Affine>,
    pub token_head: Affine,
    pub speaker_head: Affine,
    /// One row per token id up to `<sos>`.
    pub embedding: Array2<f64>,
    /// Recurrent cell over `[embed(prev); context; state]`.
    pub cell: Affine,
    /// Maps the decoder state to an attention query over encoder frames.
    pub attention: Array2<f64>,
    /// Output affine over `[state; context]`.
    pub output: Affine,
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        let vocab = config.vocab();
        let (d, dd, e) = (config.hidden_dim, config.decoder_dim, config.embed_dim);
        let encoder = (0..config.encoder_layers)
            .map(|l| Affine::zeros(d, if l == 0 { config.input_dim() } else { d }))
            .collect();
        Self {
            encoder,
            token_head: Affine::zeros(vocab.ctc_classes(), d),
            speaker_head: Affine::zeros(config.speakers, d),
            embedding: Array2::zeros((vocab.embedding_rows(), e)),
            cell: Affine::zeros(dd, e + d + dd),
            attention: Array2::zeros((d, dd)),
            output: Affine::zeros(vocab.decoder_classes(), dd + d),
        }
    }

    /// Uniform(-s, s) with `s = 1/sqrt(fan_in)`; embeddings count as a
    /// one-hot affine (fan-in 1).
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vocab = config.vocab();
        let (d, dd, e) = (config.hidden_dim, config.decoder_dim, config.embed_dim);
        let encoder = (0..config.encoder_layers)
            .map(|l| Affine::uniform(d, if l == 0 { config.input_dim() } else { d }, &mut rng))
            .collect();
        let token_head = Affine::uniform(vocab.ctc_classes(), d, &mut rng);
        let speaker_head = Affine::uniform(config.speakers, d, &mut rng);
        let embedding = Array2::from_shape_fn((vocab.embedding_rows(), e), |_| rng.random_range(-1.0..1.0));
        let cell = Affine::uniform(dd, e + d + dd, &mut rng);
        let s = 1.0 / (dd as f64).sqrt();
        let attention = Array2::from_shape_fn((d, dd), |_| rng.random_range(-s..s));
        let output = Affine::uniform(vocab.decoder_classes(), dd + d, &mut rng);
        Ok(Self {
            encoder,
            token_head,
            speaker_head,
            embedding,
            cell,
            attention,
            output,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.fill(0.0));
        z
    }

    /// Every tensor with its name and group, in the fixed checkpoint order.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, ArrayViewD<'_, f64>)> {
        use ParamGroup::*;
        let mut out = Vec::new();
        for (l, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{l}.weight"), Encoder, layer.weight.view().into_dyn()));
            out.push((format!("encoder.{l}.bias"), Encoder, layer.bias.view().into_dyn()));
        }
        out.push(("token_head.weight".into(), TokenHead, self.token_head.weight.view().into_dyn()));
        out.push(("token_head.bias".into(), TokenHead, self.token_head.bias.view().into_dyn()));
        out.push(("speaker_head.weight".into(), SpeakerHead, self.speaker_head.weight.view().into_dyn()));
        out.push(("speaker_head.bias".into(), SpeakerHead, self.speaker_head.bias.view().into_dyn()));
        out.push(("embedding".into(), Decoder, self.embedding.view().into_dyn()));
        out.push(("cell.weight".into(), Decoder, self.cell.weight.view().into_dyn()));
        out.push(("cell.bias".into(), Decoder, self.cell.bias.view().into_dyn()));
        out.push(("attention".into(), Decoder, self.attention.view().into_dyn()));
        out.push(("output.weight".into(), Decoder, self.output.weight.view().into_dyn()));
        out.push(("output.bias".into(), Decoder, self.output.bias.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`Parameters::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, ArrayViewMutD<'_, f64>)> {
        use ParamGroup::*;
        let mut out = Vec::new();
        for layer in self.encoder.iter_mut() {
            out.push((Encoder, layer.weight.view_mut().into_dyn()));
            out.push((Encoder, layer.bias.view_mut().into_dyn()));
        }
        out.push((TokenHead, self.token_head.weight.view_mut().into_dyn()));
        out.push((TokenHead, self.token_head.bias.view_mut().into_dyn()));
        out.push((SpeakerHead, self.speaker_head.weight.view_mut().into_dyn()));
        out.push((SpeakerHead, self.speaker_head.bias.view_mut().into_dyn()));
        out.push((Decoder, self.embedding.view_mut().into_dyn()));
        out.push((Decoder, self.cell.weight.view_mut().into_dyn()));
        out.push((Decoder, self.cell.bias.view_mut().into_dyn()));
        out.push((Decoder, self.attention.view_mut().into_dyn()));
        out.push((Decoder, self.output.weight.view_mut().into_dyn()));
        out.push((Decoder, self.output.bias.view_mut().into_dyn()));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(ParamGroup, &mut [f64])) {
        for (g, mut t) in self.tensors_mut() {
            f(g, t.as_slice_mut().expect("standard layout"));
        }
    }

    /// Flattened values of every tensor, in checkpoint order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, _, t)| t.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds `scale * other` elementwise.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        let src = other.flat();
        let mut i = 0;
        self.for_each_mut(|_, dst| {
            for x in dst.iter_mut() {
                *x += scale * src[i];
                i += 1;
            }
        });
    }

    /// Tensor values of one group, concatenated in checkpoint order.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        self.tensors()
            .iter()
            .filter(|(_, g, _)| *g == group)
            .flat_map(|(_, _, t)| t.iter().copied())
            .collect()
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let shapes = |p: &Parameters| -> Vec<(String, Vec<usize>)> {
            p.tensors().into_iter().map(|(n, _, t)| (n, t.shape().to_vec())).collect()
        };
        let want = shapes(&Parameters::zeros(config));
        let got = shapes(self);
        if want != got {
            return Err(Error::Shape("parameter shapes do not match the model config".into()));
        }
        Ok(())
    }
}
