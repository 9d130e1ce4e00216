//! Standard CTC: forward-backward loss, analytic gradients, and an
//! exhaustive path-enumeration oracle.
//!
//! Emission grids are `T x C` with the blank in the last column.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::{log_add, log_softmax_backward, softmax_rows};
use crate::vocab::Transcript;

/// Largest number of paths [`ctc_bruteforce`] will enumerate.
pub const MAX_ENUMERATED_PATHS: f64 = 1e7;

/// Forward and backward variables of one CTC lattice, in the log domain.
///
/// `beta[t][u]` includes the emission at `t`, so
/// `alpha[t][u] + beta[t][u] - emission(t, u)` is the log-mass of all paths
/// passing through `(t, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    /// Blank-interleaved target: `blank, y1, blank, y2, ..., blank`.
    pub extended: Vec<usize>,
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
    pub log_likelihood: f64,
}

impl Lattice {
    /// Total log-likelihood recovered from the occupancies at frame `t`.
    pub fn log_likelihood_at(&self, emissions: ArrayView2<f64>, t: usize) -> f64 {
        let terms: Vec<f64> = self
            .extended
            .iter()
            .enumerate()
            .map(|(u, &k)| self.alpha[[t, u]] + self.beta[[t, u]] - emissions[[t, k]])
            .map(|x| if x.is_nan() { f64::NEG_INFINITY } else { x })
            .collect();
        crate::grid::log_sum_exp(&terms)
    }
}

/// Interleaves blanks around and between the target tokens.
pub fn extend_target(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

/// Fewest frames that can emit `target`: one per token plus a separating
/// blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_inputs(emissions: ArrayView2<f64>, target: &[usize]) -> Result<usize> {
    let (frames, classes) = emissions.dim();
    if frames == 0 || classes < 2 {
        return Err(Error::Shape(format!(
            "emission grid must be T>=1 by C>=2, got {frames}x{classes}"
        )));
    }
    let blank = classes - 1;
    if let Some(&token) = target.iter().find(|&&y| y >= blank) {
        return Err(Error::TokenOutOfRange { token, limit: blank });
    }
    Ok(blank)
}

/// Negative log-likelihood of `target` under log-domain `emissions`.
///
/// Returns `+inf` (with an all `-inf` lattice tail) when no alignment fits
/// in `T` frames.
pub fn ctc_loss(emissions: ArrayView2<f64>, target: &[usize]) -> Result<(f64, Lattice)> {
    let blank = check_inputs(emissions, target)?;
    let frames = emissions.nrows();
    let ext = extend_target(target, blank);
    let states = ext.len();
    let skip = |u: usize| u >= 2 && ext[u] != blank && ext[u] != ext[u - 2];

    let mut alpha = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    alpha[[0, 0]] = emissions[[0, blank]];
    if states > 1 {
        alpha[[0, 1]] = emissions[[0, ext[1]]];
    }
    for t in 1..frames {
        for u in 0..states {
            let mut acc = alpha[[t - 1, u]];
            if u >= 1 {
                acc = log_add(acc, alpha[[t - 1, u - 1]]);
            }
            if skip(u) {
                acc = log_add(acc, alpha[[t - 1, u - 2]]);
            }
            if acc > f64::NEG_INFINITY {
                alpha[[t, u]] = acc + emissions[[t, ext[u]]];
            }
        }
    }

    let mut beta = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    let last = frames - 1;
    beta[[last, states - 1]] = emissions[[last, ext[states - 1]]];
    if states > 1 {
        beta[[last, states - 2]] = emissions[[last, ext[states - 2]]];
    }
    for t in (0..last).rev() {
        for u in 0..states {
            let mut acc = beta[[t + 1, u]];
            if u + 1 < states {
                acc = log_add(acc, beta[[t + 1, u + 1]]);
            }
            if u + 2 < states && skip(u + 2) {
                acc = log_add(acc, beta[[t + 1, u + 2]]);
            }
            if acc > f64::NEG_INFINITY {
                beta[[t, u]] = acc + emissions[[t, ext[u]]];
            }
        }
    }

    let mut log_likelihood = alpha[[last, states - 1]];
    if states > 1 {
        log_likelihood = log_add(log_likelihood, alpha[[last, states - 2]]);
    }
    let loss = if log_likelihood == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        -log_likelihood
    };
    Ok((
        loss,
        Lattice {
            extended: ext,
            alpha,
            beta,
            log_likelihood,
        },
    ))
}

/// Gradient of the CTC loss w.r.t. each emission log-probability.
///
/// Cell `(t, k)` receives minus the posterior occupancy of label `k` at `t`.
pub fn ctc_grad(emissions: ArrayView2<f64>, target: &[usize], lattice: &Lattice) -> Result<Array2<f64>> {
    let blank = check_inputs(emissions, target)?;
    if lattice.extended != extend_target(target, blank) || lattice.alpha.dim() != (emissions.nrows(), lattice.extended.len()) {
        return Err(Error::Shape("lattice does not belong to these inputs".into()));
    }
    if !lattice.log_likelihood.is_finite() {
        return Err(Error::InfiniteLoss);
    }
    let mut grad = Array2::zeros(emissions.raw_dim());
    for t in 0..emissions.nrows() {
        for (u, &k) in lattice.extended.iter().enumerate() {
            let a = lattice.alpha[[t, u]];
            let b = lattice.beta[[t, u]];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            grad[[t, k]] -= (a + b - emissions[[t, k]] - lattice.log_likelihood).exp();
        }
    }
    Ok(grad)
}

/// CTC loss and its gradient w.r.t. the softmax inputs `logits`.
pub fn ctc_logit_grad(logits: ArrayView2<f64>, target: &[usize]) -> Result<(f64, Array2<f64>)> {
    let log_probs = log_softmax_rows(logits);
    let (loss, lattice) = ctc_loss(log_probs.view(), target)?;
    let g = ctc_grad(log_probs.view(), target, &lattice)?;
    let probs = softmax_rows(logits);
    Ok((loss, log_softmax_backward(probs.view(), g.view())))
}

pub(crate) fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|z| z - lse);
    }
    out
}

/// Removes adjacent duplicates, then blanks.
pub fn collapse(path: &[usize], blank: usize) -> Transcript {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if prev != Some(p) && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    Transcript::new(out)
}

/// Probability of `target` by summing every frame-label path whose collapse
/// equals it. `probs` is in the probability domain.
pub fn ctc_bruteforce(probs: ArrayView2<f64>, target: &[usize]) -> Result<f64> {
    let (frames, classes) = probs.dim();
    let blank = check_inputs(probs, target)?;
    let paths = (classes as f64).powi(frames as i32);
    if paths > MAX_ENUMERATED_PATHS {
        return Err(Error::TooLarge { paths });
    }
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse(&path, blank).tokens() == target {
            total += path.iter().enumerate().map(|(t, &k)| probs[[t, k]]).product::<f64>();
        }
        // odometer increment
        let mut t = frames;
        loop {
            if t == 0 {
                return Ok(total);
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ln(g: Array2<f64>) -> Array2<f64> {
        g.mapv(f64::ln)
    }

    #[test]
    fn two_frame_single_token() {
        let e = ln(Array2::from_elem((2, 2), 0.5));
        let (loss, _) = ctc_loss(e.view(), &[0]).unwrap();
        assert!((loss - 0.287682072451781).abs() < 1e-12);
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let p = array![[0.2, 0.3, 0.5], [0.6, 0.1, 0.3], [0.25, 0.25, 0.5]];
        let (loss, _) = ctc_loss(ln(p.clone()).view(), &[]).unwrap();
        let expected = -(0.5f64.ln() + 0.3f64.ln() + 0.5f64.ln());
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_token_needs_three_frames() {
        let e = ln(Array2::from_elem((2, 2), 0.5));
        let (loss, lattice) = ctc_loss(e.view(), &[0, 0]).unwrap();
        assert_eq!(loss, f64::INFINITY);
        assert!(matches!(ctc_grad(e.view(), &[0, 0], &lattice), Err(Error::InfiniteLoss)));
        let e3 = ln(Array2::from_elem((3, 2), 0.5));
        assert!(ctc_loss(e3.view(), &[0, 0]).unwrap().0.is_finite());
    }

    #[test]
    fn out_of_range_token_rejected() {
        let e = ln(Array2::from_elem((2, 3), 1.0 / 3.0));
        assert!(matches!(ctc_loss(e.view(), &[2]), Err(Error::TokenOutOfRange { token: 2, .. })));
    }

    #[test]
    fn single_certain_frame_gradient() {
        let e = array![[0.0, f64::NEG_INFINITY]];
        let (loss, lattice) = ctc_loss(e.view(), &[0]).unwrap();
        assert_eq!(loss, 0.0);
        let g = ctc_grad(e.view(), &[0], &lattice).unwrap();
        assert_eq!(g, array![[-1.0, 0.0]]);
    }

    #[test]
    fn uniform_grid_empty_target_gradient() {
        let e = ln(Array2::from_elem((4, 3), 1.0 / 3.0));
        let (_, lattice) = ctc_loss(e.view(), &[]).unwrap();
        let g = ctc_grad(e.view(), &[], &lattice).unwrap();
        for t in 0..4 {
            assert!((g[[t, 2]] + 1.0).abs() < 1e-12);
            assert_eq!(g[[t, 0]], 0.0);
            assert_eq!(g[[t, 1]], 0.0);
        }
    }

    #[test]
    fn bruteforce_examples() {
        let p = Array2::from_elem((2, 2), 0.5);
        assert!((ctc_bruteforce(p.view(), &[0]).unwrap() - 0.75).abs() < 1e-15);
        let p1 = array![[0.3, 0.7]];
        assert!((ctc_bruteforce(p1.view(), &[0]).unwrap() - 0.3).abs() < 1e-15);
        let p3 = Array2::from_elem((3, 3), 1.0 / 3.0);
        let brute = ctc_bruteforce(p3.view(), &[0, 1]).unwrap();
        let (loss, _) = ctc_loss(ln(p3).view(), &[0, 1]).unwrap();
        assert!(((-loss).exp() - brute).abs() < 1e-10);
        let big = Array2::from_elem((15, 4), 0.25);
        assert!(matches!(ctc_bruteforce(big.view(), &[0]), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn collapse_examples() {
        let (a, b, blank) = (0, 1, 2);
        assert_eq!(collapse(&[a, a, blank, a], blank).tokens(), &[a, a]);
        assert!(collapse(&[blank, blank], blank).is_empty());
        assert_eq!(collapse(&[a, blank, b, b], blank).tokens(), &[a, b]);
    }

    fn random_log_grid(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Array2<f64> {
        let logits = Array2::from_shape_fn((t, c), |_| rng.random_range(-3.0..3.0));
        log_softmax_rows(logits.view())
    }

    proptest! {
        #[test]
        fn lattice_identity_holds_every_frame(
            t in 1usize..10, v in 1usize..4, l in 0usize..4, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_log_grid(&mut rng, t, v + 1);
            let target: Vec<usize> = (0..l).map(|_| rng.random_range(0..v)).collect();
            let (loss, lattice) = ctc_loss(e.view(), &target).unwrap();
            prop_assume!(loss.is_finite());
            for frame in 0..t {
                let ll = lattice.log_likelihood_at(e.view(), frame);
                prop_assert!((ll - lattice.log_likelihood).abs() < 1e-6);
            }
        }

        #[test]
        fn feasibility_matches_minimum_length(
            t in 1usize..7, l in 0usize..5, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_log_grid(&mut rng, t, 3);
            let target: Vec<usize> = (0..l).map(|_| rng.random_range(0..2)).collect();
            let (loss, _) = ctc_loss(e.view(), &target).unwrap();
            prop_assert_eq!(loss.is_finite(), t >= min_frames(&target));
        }
    }
}
