//! Framewise encoder with token and speaker heads.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::grid::{FeatureSequence, SpeakerPosteriorGrid, TokenPosteriorGrid};

/// Which speaker posterior the SD-CTC branch sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeakerMode {
    /// Softmax of the speaker head.
    Predicted,
    /// `P_s(s_1 | x_t) = 1` everywhere; the speaker head is bypassed.
    Degenerate,
}

/// Input rows: the `2w+1` neighbouring frames (zero padded), the running
/// mean of frames `0..=t`, and sinusoidal position features.
pub fn featurize(config: &ModelConfig, features: &FeatureSequence) -> Result<Array2<f64>> {
    if features.dim() != config.feature_dim {
        return Err(Error::Shape(format!(
            "feature dim {} does not match model feature_dim {}",
            features.dim(),
            config.feature_dim
        )));
    }
    let x = features.frames();
    let (frames, d) = x.dim();
    let w = config.context_window as isize;
    let mut out = Array2::zeros((frames, config.input_dim()));
    let mut running = ndarray::Array1::<f64>::zeros(d);
    for t in 0..frames {
        let mut row = out.row_mut(t);
        for (slot, offset) in (-w..=w).enumerate() {
            let src = t as isize + offset;
            if src >= 0 && (src as usize) < frames {
                row.slice_mut(s![slot * d..(slot + 1) * d]).assign(&x.row(src as usize));
            }
        }
        running += &x.row(t);
        let base = (2 * config.context_window + 1) * d;
        row.slice_mut(s![base..base + d]).assign(&(&running / (t + 1) as f64));
        let base = base + d;
        for i in 0..config.position_dim / 2 {
            let omega = 0.25f64.powi(i as i32);
            row[base + 2 * i] = (t as f64 * omega).sin();
            row[base + 2 * i + 1] = (t as f64 * omega).cos();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub input: Array2<f64>,
    /// Activations after each encoder layer; the last is `H`.
    pub layers: Vec<Array2<f64>>,
    pub token_logits: Array2<f64>,
    pub speaker_logits: Array2<f64>,
    pub pv: TokenPosteriorGrid,
    pub ps: SpeakerPosteriorGrid,
}

impl EncoderOutput {
    pub fn hidden(&self) -> ArrayView2<'_, f64> {
        self.layers.last().expect("at least one layer").view()
    }
}

fn affine_rows(x: ArrayView2<f64>, layer: &super::params::Affine) -> Array2<f64> {
    let mut out = x.dot(&layer.weight.t());
    out += &layer.bias;
    out
}

pub fn encoder_forward(
    params: &Parameters,
    config: &ModelConfig,
    features: &FeatureSequence,
    mode: SpeakerMode,
) -> Result<EncoderOutput> {
    let input = featurize(config, features)?;
    let mut layers: Vec<Array2<f64>> = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let prev = layers.last().map_or(input.view(), |a| a.view());
        let mut a = affine_rows(prev, layer);
        a.mapv_inplace(f64::tanh);
        layers.push(a);
    }
    let h = layers.last().expect("encoder has layers").view();
    let token_logits = affine_rows(h, &params.token_head);
    let speaker_logits = affine_rows(h, &params.speaker_head);
    let pv = TokenPosteriorGrid::from_logits(token_logits.view())?;
    let ps = match mode {
        SpeakerMode::Predicted => SpeakerPosteriorGrid::from_logits(speaker_logits.view())?,
        SpeakerMode::Degenerate => SpeakerPosteriorGrid::degenerate(features.len(), config.speakers)?,
    };
    Ok(EncoderOutput {
        input,
        layers,
        token_logits,
        speaker_logits,
        pv,
        ps,
    })
}

/// Accumulates encoder and head gradients into `grads`.
///
/// `d_hidden` is the gradient arriving at `H` from the decoder; head logit
/// gradients may be absent.
pub fn encoder_backward(
    params: &Parameters,
    out: &EncoderOutput,
    mut d_hidden: Array2<f64>,
    d_token_logits: Option<ArrayView2<f64>>,
    d_speaker_logits: Option<ArrayView2<f64>>,
    grads: &mut Parameters,
) {
    let h = out.hidden();
    if let Some(dz) = d_token_logits {
        grads.token_head.weight += &dz.t().dot(&h);
        grads.token_head.bias += &dz.sum_axis(Axis(0));
        d_hidden += &dz.dot(&params.token_head.weight);
    }
    if let Some(dz) = d_speaker_logits {
        grads.speaker_head.weight += &dz.t().dot(&h);
        grads.speaker_head.bias += &dz.sum_axis(Axis(0));
        d_hidden += &dz.dot(&params.speaker_head.weight);
    }
    let mut d_act = d_hidden;
    for l in (0..params.encoder.len()).rev() {
        let act = &out.layers[l];
        let d_pre = &d_act * &act.mapv(|a| 1.0 - a * a);
        let prev = if l == 0 { out.input.view() } else { out.layers[l - 1].view() };
        grads.encoder[l].weight += &d_pre.t().dot(&prev);
        grads.encoder[l].bias += &d_pre.sum_axis(Axis(0));
        if l > 0 {
            d_act = d_pre.dot(&params.encoder[l].weight);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ProbabilityGrid;
    use crate::model::params::tests::tiny;

    fn features(frames: usize, d: usize) -> FeatureSequence {
        FeatureSequence::new(Array2::from_shape_fn((frames, d), |(t, j)| (t as f64 * 0.3 - j as f64 * 0.7).sin())).unwrap()
    }

    #[test]
    fn zero_parameters_give_uniform_posteriors() {
        let c = tiny();
        let p = Parameters::zeros(&c);
        let out = encoder_forward(&p, &c, &features(5, 3), SpeakerMode::Predicted).unwrap();
        assert!(out.pv.probs().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(out.ps.probs().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn degenerate_mode_pins_first_speaker() {
        let c = tiny();
        let p = Parameters::init(&c).unwrap();
        let out = encoder_forward(&p, &c, &features(7, 3), SpeakerMode::Degenerate).unwrap();
        assert!(out.ps.probs().column(0).iter().all(|&x| x == 1.0));
        assert_eq!(out.hidden().nrows(), 7);
        assert_eq!(out.pv.frames(), 7);
        assert_eq!(out.ps.frames(), 7);
    }

    #[test]
    fn featurize_layout() {
        let c = tiny();
        let f = features(4, 3);
        let u = featurize(&c, &f).unwrap();
        assert_eq!(u.dim(), (4, c.input_dim()));
        // left neighbour of frame 0 is zero padding, centre is the frame itself
        assert!(u.row(0).slice(s![0..3]).iter().all(|&x| x == 0.0));
        assert_eq!(u.row(2).slice(s![3..6]), f.frames().row(2));
        let mean = (&f.frames().row(0) + &f.frames().row(1)) / 2.0;
        assert_eq!(u.row(1).slice(s![9..12]), mean);
        assert!(featurize(&c, &features(4, 2)).is_err());
    }
}
