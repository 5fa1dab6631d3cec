//! Network inputs and loss constants for a mini-batch of realizations.

use crate::channel::ChannelRealization;
use crate::numerics::{ComplexMatrix, RealTensor};
use crate::sysmodel::Association;

use super::HgnnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_t: usize,
    pub r: usize,
    pub k: usize,
    pub m: usize,
}

impl Dims {
    pub fn of(real: &ChannelRealization) -> Self {
        Self {
            n_t: real.g[0].cols(),
            r: real.g.len(),
            k: real.user_positions.len(),
            m: real.g[0].rows(),
        }
    }

    /// Length of one `[Re H_ik, Im H_ik]` block.
    pub fn edge_len(&self) -> usize {
        2 * self.m * self.n_t
    }

    /// Length of a raw user feature.
    pub fn user_len(&self) -> usize {
        self.r * self.edge_len()
    }
}

fn push_edge(out: &mut Vec<f64>, h: &ComplexMatrix, scale: f64) {
    out.extend(h.data().iter().map(|z| z.re / scale));
    out.extend(h.data().iter().map(|z| z.im / scale));
}

/// Raw user features `[Re H_1k, Im H_1k, .., Re H_Rk, Im H_Rk]` (entries
/// row-major), one vector per user, before standardization.
pub fn build_input_features(real: &ChannelRealization) -> Vec<Vec<f64>> {
    let d = Dims::of(real);
    (0..d.k)
        .map(|k| {
            let mut v = Vec::with_capacity(d.user_len());
            for i in 0..d.r {
                push_edge(&mut v, real.cascaded(i, k), 1.0);
            }
            v
        })
        .collect()
}

/// Inverse of [`build_input_features`] for one user: the `R` cascaded
/// channels.
pub fn features_to_cascaded(feature: &[f64], dims: Dims) -> Vec<ComplexMatrix> {
    let n = dims.m * dims.n_t;
    feature
        .chunks(2 * n)
        .map(|blk| {
            let data = (0..n).map(|j| crate::numerics::C64::new(blk[j], blk[n + j])).collect();
            ComplexMatrix::new(dims.m, dims.n_t, data).expect("block size")
        })
        .collect()
}

/// Everything the forward pass and the losses read, as constants.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub dims: Dims,
    /// `[B K, R * edge]`: sum of the other users' standardized features.
    pub user_others: RealTensor,
    /// `[B R K, 2 * edge]`, rows `(b, i, k)`: `[x_ik, sum_{j != i} x_jk]`.
    pub ris_in: RealTensor,
    /// `[B, R K * edge]`: every standardized block, `(i, k)` order.
    pub flat_in: RealTensor,
    /// `[B K R, 4 M N_t]`, rows `(b, k, i)`: real form of `H_ik / sigma` so
    /// that `[Re t, Im t] Q = [Re t^T H, Im t^T H] / sigma`.
    pub q: RealTensor,
    /// `[B K, R]` one-hot label association.
    pub labels: RealTensor,
    /// `[B K, 1]` rate weights divided by `ln 2`.
    pub rate_weights: RealTensor,
    pub p_max: f64,
}

impl Batch {
    pub fn new(
        samples: &[&ChannelRealization],
        labels: &[&Association],
        weights: &[f64],
        input_scale: f64,
        noise_power: f64,
        p_max: f64,
    ) -> Result<Self, HgnnError> {
        let first = samples.first().ok_or_else(|| HgnnError::Config("empty batch".into()))?;
        let dims = Dims::of(first);
        let Dims { n_t, r, k, m } = dims;
        if labels.len() != samples.len() || weights.len() != k {
            return Err(HgnnError::Config("labels or weights do not match the batch".into()));
        }
        if !(input_scale > 0.0) || !(noise_power > 0.0) || !(p_max > 0.0) {
            return Err(HgnnError::Config("scale, noise and power must be positive".into()));
        }
        let b = samples.len();
        let e = dims.edge_len();
        let sigma = noise_power.sqrt();
        let mut user_others = Vec::with_capacity(b * k * r * e);
        let mut ris_in = Vec::with_capacity(b * r * k * 2 * e);
        let mut flat_in = Vec::with_capacity(b * r * k * e);
        let mut q = Vec::with_capacity(b * k * r * 4 * m * n_t);
        let mut lab = Vec::with_capacity(b * k * r);
        for (s, u) in samples.iter().zip(labels) {
            if Dims::of(s) != dims || u.k() != k || u.r() != r {
                return Err(HgnnError::Config("mixed dimensions in one batch".into()));
            }
            // x[i][k]
            let x: Vec<Vec<Vec<f64>>> = (0..r)
                .map(|i| {
                    (0..k)
                        .map(|kk| {
                            let mut v = Vec::with_capacity(e);
                            push_edge(&mut v, s.cascaded(i, kk), input_scale);
                            v
                        })
                        .collect()
                })
                .collect();
            for kk in 0..k {
                for i in 0..r {
                    let mut acc = vec![0.0; e];
                    for other in (0..k).filter(|&o| o != kk) {
                        acc.iter_mut().zip(&x[i][other]).for_each(|(a, v)| *a += v);
                    }
                    user_others.extend(acc);
                }
            }
            for i in 0..r {
                for kk in 0..k {
                    ris_in.extend_from_slice(&x[i][kk]);
                    let mut acc = vec![0.0; e];
                    for j in (0..r).filter(|&j| j != i) {
                        acc.iter_mut().zip(&x[j][kk]).for_each(|(a, v)| *a += v);
                    }
                    ris_in.extend(acc);
                    flat_in.extend_from_slice(&x[i][kk]);
                }
            }
            for kk in 0..k {
                for i in 0..r {
                    let h = s.cascaded(i, kk);
                    for mm in 0..m {
                        q.extend(h.row(mm).iter().map(|z| z.re / sigma));
                        q.extend(h.row(mm).iter().map(|z| z.im / sigma));
                    }
                    for mm in 0..m {
                        q.extend(h.row(mm).iter().map(|z| -z.im / sigma));
                        q.extend(h.row(mm).iter().map(|z| z.re / sigma));
                    }
                }
                lab.extend((0..r).map(|i| (u.serving()[kk] == i) as u8 as f64));
            }
        }
        let ln2 = std::f64::consts::LN_2;
        let rate_weights: Vec<f64> = (0..b).flat_map(|_| weights.iter().map(|w| w / ln2)).collect();
        Ok(Self {
            size: b,
            dims,
            user_others: RealTensor::new(vec![b * k, r * e], user_others)?,
            ris_in: RealTensor::new(vec![b * r * k, 2 * e], ris_in)?,
            flat_in: RealTensor::new(vec![b, r * k * e], flat_in)?,
            q: RealTensor::new(vec![b * k * r, 4 * m * n_t], q)?,
            labels: RealTensor::new(vec![b * k, r], lab)?,
            rate_weights: RealTensor::new(vec![b * k, 1], rate_weights)?,
            p_max,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_indexed, ScenarioConfig};

    #[test]
    fn feature_length_and_bijection() {
        let s = ScenarioConfig::default();
        let real = sample_indexed(&s, 1, 0).unwrap();
        let f = build_input_features(&real);
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].len(), 2 * 2 * 16 * 8);
        let back = features_to_cascaded(&f[1], Dims::of(&real));
        for i in 0..2 {
            assert_eq!(&back[i], real.cascaded(i, 1));
        }
    }

    #[test]
    fn zero_channel_zero_feature() {
        let s = ScenarioConfig::default();
        let mut real = sample_indexed(&s, 1, 0).unwrap();
        for c in &mut real.cascaded {
            *c = ComplexMatrix::zeros(c.rows(), c.cols());
        }
        assert!(build_input_features(&real).iter().flatten().all(|&v| v == 0.0));
    }
}
