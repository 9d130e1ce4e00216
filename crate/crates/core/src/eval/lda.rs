use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Frame classes used by the encoder diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LdaClass {
    Speaker1 = 0,
    Speaker2 = 1,
    SpeakerChange = 2,
}

#[derive(Debug, Clone)]
pub struct LdaProjection {
    /// `d x 2`, columns ordered by decreasing discriminant ratio.
    pub directions: Array2<f64>,
    pub eigenvalues: [f64; 2],
    pub mean: Array1<f64>,
    /// `N x 2` coordinates of the centered input frames.
    pub coordinates: Array2<f64>,
}

/// Two-dimensional Fisher discriminant projection of labelled frames.
pub fn lda_projection(frames: ArrayView2<f64>, labels: &[usize]) -> Result<LdaProjection> {
    let (n, d) = frames.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} frames", labels.len())));
    }
    if d < 2 {
        return Err(Error::InvalidArgument("a two-dimensional projection needs d >= 2".into()));
    }
    if n < d + 1 {
        return Err(Error::InvalidArgument(format!("{n} frames is too few for dimension {d}")));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("at least two classes are required".into()));
    }

    let x = DMatrix::from_fn(n, d, |i, j| frames[[i, j]]);
    let mean = x.row_mean();
    let mut sw = DMatrix::<f64>::zeros(d, d);
    let mut sb = DMatrix::<f64>::zeros(d, d);
    for &c in &classes {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let xc = x.select_rows(&rows);
        let mc = xc.row_mean();
        for i in 0..xc.nrows() {
            let dev = (xc.row(i) - &mc).transpose();
            sw += &dev * dev.transpose();
        }
        let between = (&mc - &mean).transpose();
        sb += (&between * between.transpose()) * rows.len() as f64;
    }
    let eps = 1e-6 * sw.trace() / d as f64;
    for i in 0..d {
        sw[(i, i)] += eps;
    }
    let chol = sw.cholesky().ok_or(Error::SingularScatter)?;
    let l = chol.l();
    let l_inv = l.clone().try_inverse().ok_or(Error::SingularScatter)?;
    let whitened = &l_inv * &sb * l_inv.transpose();
    let sym = (&whitened + whitened.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let back = l_inv.transpose();
    let mut directions = Array2::zeros((d, 2));
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut w = &back * eig.eigenvectors.column(idx);
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularScatter);
        }
        let pivot = w.iter().copied().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            w = -w;
        }
        for i in 0..d {
            directions[[i, k]] = w[i];
        }
    }
    let mean = Array1::from_iter(mean.iter().copied());
    let centered = &frames - &mean;
    let coordinates = centered.dot(&directions);
    Ok(LdaProjection {
        directions,
        eigenvalues: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]],
        mean,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sample_rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(separation: f64, n_per: usize, d: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = sample_rng(5, 0, 0);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut frames = Array2::zeros((2 * n_per, d));
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let class = i / n_per;
            for j in 0..d {
                frames[[i, j]] = noise.sample(&mut rng) + if j == 0 && class == 1 { separation } else { 0.0 };
            }
            labels.push(class);
        }
        (frames, labels)
    }

    fn centroid(coords: &Array2<f64>, labels: &[usize], class: usize, axis: usize) -> f64 {
        let vals: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == class).map(|i| coords[[i, axis]]).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn separated_blobs_split_on_the_first_axis() {
        let (frames, labels) = blobs(20.0, 100, 8);
        let p = lda_projection(frames.view(), &labels).unwrap();
        let c0 = centroid(&p.coordinates, &labels, 0, 0);
        let c1 = centroid(&p.coordinates, &labels, 1, 0);
        let within: f64 = (0..labels.len())
            .map(|i| {
                let c = if labels[i] == 0 { c0 } else { c1 };
                (p.coordinates[[i, 0]] - c).powi(2)
            })
            .sum::<f64>()
            / (labels.len() - 2) as f64;
        assert!((c1 - c0).abs() > 5.0 * within.sqrt());
        assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
    }

    #[test]
    fn identical_means_give_coincident_centroids() {
        let (mut frames, labels) = blobs(0.0, 50, 4);
        // force identical class means exactly
        for class in 0..2 {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            for j in 0..4 {
                let m = rows.iter().map(|&i| frames[[i, j]]).sum::<f64>() / rows.len() as f64;
                for &i in &rows {
                    frames[[i, j]] -= m;
                }
            }
        }
        let p = lda_projection(frames.view(), &labels).unwrap();
        for axis in 0..2 {
            let gap = centroid(&p.coordinates, &labels, 0, axis) - centroid(&p.coordinates, &labels, 1, axis);
            assert!(gap.abs() < 1e-9);
        }
    }

    #[test]
    fn preconditions() {
        let (frames, labels) = blobs(3.0, 10, 4);
        assert!(lda_projection(frames.view(), &vec![0; labels.len()]).is_err());
        assert!(lda_projection(frames.slice(ndarray::s![..4, ..]), &labels[..4]).is_err());
        assert!(lda_projection(frames.view(), &labels[..3]).is_err());
    }
}
