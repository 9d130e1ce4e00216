//! Single-layer attention decoder over encoder frames.
//!
//! The state starts at zero with the context set to the mean of the encoder
//! frames. One step, given the previous token `y`, context `c` and state `h`:
//!
//! ```text
//! h' = tanh(W [embed(y); c; h] + b)
//! α  = softmax(H · (A h'))        attention over the T encoder frames
//! c' = Hᵀ α
//! z  = O [h'; c'] + o             logits over V ∪ {<sc>, <eos>}
//! ```

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::grid::softmax;
use crate::sot::SotSequence;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Array1<f64>,
    pub ctx: Array1<f64>,
}

impl DecoderState {
    /// Zero state with the uniform-attention context (the frame mean of `H`).
    pub fn initial(config: &ModelConfig, hidden: ArrayView2<f64>) -> Self {
        Self {
            h: Array1::zeros(config.decoder_dim),
            ctx: hidden
                .mean_axis(Axis(0))
                .unwrap_or_else(|| Array1::zeros(config.hidden_dim)),
        }
    }
}

/// Everything a step needs for backpropagation.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub prev_token: usize,
    pub input: Array1<f64>,
    pub h: Array1<f64>,
    pub query: Array1<f64>,
    pub attention: Array1<f64>,
    pub ctx: Array1<f64>,
    pub probs: Array1<f64>,
    pub log_probs: Array1<f64>,
}

/// Advances the decoder by one token.
pub fn decoder_step(
    params: &Parameters,
    hidden: ArrayView2<f64>,
    state: &DecoderState,
    prev_token: usize,
) -> (DecoderState, StepCache) {
    let input = concatenate![Axis(0), params.embedding.row(prev_token), state.ctx.view(), state.h.view()];
    let mut h = params.cell.weight.dot(&input);
    h += &params.cell.bias;
    h.mapv_inplace(f64::tanh);
    let query = params.attention.dot(&h);
    let attention = softmax(hidden.dot(&query).view());
    let ctx = hidden.t().dot(&attention);
    let mut logits = params.output.weight.slice(s![.., ..h.len()]).dot(&h);
    logits += &params.output.weight.slice(s![.., h.len()..]).dot(&ctx);
    logits += &params.output.bias;
    let probs = softmax(logits.view());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let log_probs = logits.mapv(|z| z - lse);
    let next = DecoderState { h: h.clone(), ctx: ctx.clone() };
    (
        next,
        StepCache {
            prev_token,
            input,
            h,
            query,
            attention,
            ctx,
            probs,
            log_probs,
        },
    )
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Mean token cross-entropy over all target positions.
    pub loss: f64,
    /// `steps x T`; row `i` is the attention used to predict target `i`.
    pub attention: Array2<f64>,
    pub steps: Vec<StepCache>,
    /// Decoder output classes of the targets.
    pub targets: Vec<usize>,
}

fn target_classes(vocab: &Vocabulary, target: &SotSequence) -> Result<Vec<usize>> {
    if target.tokens().last() != Some(&vocab.eos_id()) {
        return Err(Error::InvalidArgument("decoder target must end with <eos>".into()));
    }
    target
        .tokens()
        .iter()
        .map(|&t| {
            vocab
                .decoder_class(t)
                .ok_or(Error::TokenOutOfRange { token: t, limit: vocab.len() })
        })
        .collect()
}

/// Teacher-forced pass over `target`, starting from `<sos>`.
pub fn decoder_forward(
    params: &Parameters,
    config: &ModelConfig,
    hidden: ArrayView2<f64>,
    target: &SotSequence,
) -> Result<DecoderOutput> {
    let vocab = config.vocab();
    let targets = target_classes(&vocab, target)?;
    if hidden.ncols() != config.hidden_dim {
        return Err(Error::Shape("encoder output width does not match hidden_dim".into()));
    }
    let mut state = DecoderState::initial(config, hidden);
    let mut prev = vocab.sos_id();
    let mut steps = Vec::with_capacity(targets.len());
    let mut total = 0.0;
    for (&class, &token) in targets.iter().zip(target.tokens()) {
        let (next, cache) = decoder_step(params, hidden, &state, prev);
        total -= cache.log_probs[class];
        steps.push(cache);
        state = next;
        prev = token;
    }
    let mut attention = Array2::zeros((steps.len(), hidden.nrows()));
    for (mut row, step) in attention.rows_mut().into_iter().zip(&steps) {
        row.assign(&step.attention);
    }
    Ok(DecoderOutput {
        loss: total / targets.len() as f64,
        attention,
        steps,
        targets,
    })
}

fn add_outer(dst: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in dst.rows_mut().into_iter().zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

/// Backpropagates `scale * loss` through the decoder, accumulating into
/// `grads` and returning the gradient w.r.t. the encoder output `H`.
pub fn decoder_backward(
    params: &Parameters,
    hidden: ArrayView2<f64>,
    out: &DecoderOutput,
    scale: f64,
    grads: &mut Parameters,
) -> Array2<f64> {
    let n = out.steps.len() as f64;
    let e = params.embedding.ncols();
    let d = hidden.ncols();
    let dd = params.cell.weight.nrows();
    let mut d_hidden = Array2::zeros(hidden.raw_dim());
    let mut dh_next = Array1::<f64>::zeros(dd);
    let mut dc_next = Array1::<f64>::zeros(d);
    for (step, &class) in out.steps.iter().zip(&out.targets).rev() {
        let mut dz = step.probs.clone();
        dz[class] -= 1.0;
        dz *= scale / n;
        let hc = concatenate![Axis(0), step.h.view(), step.ctx.view()];
        add_outer(&mut grads.output.weight, dz.view(), hc.view());
        grads.output.bias += &dz;
        let dhc = params.output.weight.t().dot(&dz);
        let mut dh = &dhc.slice(s![..dd]) + &dh_next;
        let dc = &dhc.slice(s![dd..]) + &dc_next;

        // c = Hᵀ α
        for (mut row, &a) in d_hidden.rows_mut().into_iter().zip(step.attention.iter()) {
            row.scaled_add(a, &dc);
        }
        let d_alpha = hidden.dot(&dc);
        let dot = step.attention.dot(&d_alpha);
        let d_scores = &step.attention * &d_alpha.mapv(|x| x - dot);
        // scores = H q
        add_outer(&mut d_hidden, d_scores.view(), step.query.view());
        let dq = hidden.t().dot(&d_scores);
        // q = A h
        add_outer(&mut grads.attention, dq.view(), step.h.view());
        dh += &params.attention.t().dot(&dq);

        let da = &dh * &step.h.mapv(|h| 1.0 - h * h);
        add_outer(&mut grads.cell.weight, da.view(), step.input.view());
        grads.cell.bias += &da;
        let dx = params.cell.weight.t().dot(&da);
        grads
            .embedding
            .row_mut(step.prev_token)
            .scaled_add(1.0, &dx.slice(s![..e]));
        dc_next = dx.slice(s![e..e + d]).to_owned();
        dh_next = dx.slice(s![e + d..]).to_owned();
    }
    // initial context is the mean of the rows of H
    let frames = hidden.nrows() as f64;
    for mut row in d_hidden.rows_mut() {
        row.scaled_add(1.0 / frames, &dc_next);
    }
    d_hidden
}

/// Highest-probability continuation at every step, up to `max_len` tokens.
pub fn greedy_decode(params: &Parameters, config: &ModelConfig, hidden: ArrayView2<f64>, max_len: usize) -> Vec<usize> {
    let vocab = config.vocab();
    let mut state = DecoderState::initial(config, hidden);
    let mut prev = vocab.sos_id();
    let mut out = Vec::new();
    while out.len() < max_len {
        let (next, cache) = decoder_step(params, hidden, &state, prev);
        let class = argmax(cache.log_probs.view());
        let token = vocab.decoder_token(class);
        out.push(token);
        if token == vocab.eos_id() {
            break;
        }
        state = next;
        prev = token;
    }
    out
}

pub(crate) fn argmax(xs: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::tests::tiny;

    fn hidden(frames: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((frames, d), |(t, j)| ((t * 7 + j * 3) as f64 * 0.37).sin())
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let c = tiny();
        let p = Parameters::zeros(&c);
        let vocab = c.vocab();
        let h = hidden(6, c.hidden_dim);
        let out = decoder_forward(&p, &c, h.view(), &SotSequence(vec![vocab.eos_id()])).unwrap();
        assert!((out.loss - (vocab.decoder_classes() as f64).ln()).abs() < 1e-12);
        assert_eq!(out.attention.dim(), (1, 6));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let c = tiny();
        let p = Parameters::init(&c).unwrap();
        let v = c.vocab();
        let target = SotSequence(vec![0, 1, v.sc_id(), 2, v.eos_id()]);
        let out = decoder_forward(&p, &c, hidden(9, c.hidden_dim).view(), &target).unwrap();
        assert_eq!(out.attention.nrows(), target.len());
        for row in out.attention.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_targets() {
        let c = tiny();
        let p = Parameters::init(&c).unwrap();
        let v = c.vocab();
        let h = hidden(4, c.hidden_dim);
        assert!(decoder_forward(&p, &c, h.view(), &SotSequence(vec![0, 1])).is_err());
        assert!(decoder_forward(&p, &c, h.view(), &SotSequence(vec![v.blank_id(), v.eos_id()])).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = tiny();
        let p = Parameters::init(&c).unwrap();
        let v = c.vocab();
        let h = hidden(5, c.hidden_dim);
        let target = SotSequence(vec![2, v.sc_id(), 0, v.eos_id()]);
        let out = decoder_forward(&p, &c, h.view(), &target).unwrap();
        let mut grads = p.zeros_like();
        let dh = decoder_backward(&p, h.view(), &out, 1.0, &mut grads);

        let loss_at = |p: &Parameters, h: &Array2<f64>| decoder_forward(p, &c, h.view(), &target).unwrap().loss;
        let eps = 1e-5;
        let analytic = grads.flat();
        for (i, &a) in analytic.iter().enumerate() {
            let bump = |delta: f64| {
                let mut q = p.clone();
                let mut k = 0;
                q.for_each_mut(|_, v| {
                    for x in v.iter_mut() {
                        if k == i {
                            *x += delta;
                        }
                        k += 1;
                    }
                });
                loss_at(&q, &h)
            };
            let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            assert!((a - numeric).abs() / scale < 1e-4, "param {i}: {a} vs {numeric}");
        }
        for idx in [(0, 0), (2, 3), (4, 1)] {
            let mut hp = h.clone();
            hp[idx] += eps;
            let mut hm = h.clone();
            hm[idx] -= eps;
            let numeric = (loss_at(&p, &hp) - loss_at(&p, &hm)) / (2.0 * eps);
            assert!((dh[idx] - numeric).abs() < 1e-8, "H{idx:?}: {} vs {numeric}", dh[idx]);
        }
    }
}
