//! Weighted-sum-rate objective, constraint projections and association
//! matrices.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::channel::{dbm_to_watts, ChannelRealization, ScenarioConfig};
use crate::numerics::ComplexMatrix;

/// Magnitude at or below which a phase element has no direction.
pub const PHASE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SysError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error("beamformer is identically zero")]
    ZeroBeamformer,
    #[error("association score row {row} is invalid: {msg}")]
    Scores { row: usize, msg: String },
}

/// Channels plus the operating point.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub realization: ChannelRealization,
    pub weights: Vec<f64>,
    pub noise_power: f64,
    pub p_max: f64,
}

impl ProblemInstance {
    pub fn new(
        realization: ChannelRealization,
        weights: Vec<f64>,
        noise_power: f64,
        p_max: f64,
    ) -> Result<Self, SysError> {
        let k = realization.user_positions.len();
        if weights.len() != k {
            return Err(SysError::Dimension(format!("{} weights for {k} users", weights.len())));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(SysError::Instance("weights must be positive and sum to 1".into()));
        }
        if !(noise_power > 0.0) || !(p_max > 0.0) || !noise_power.is_finite() || !p_max.is_finite() {
            return Err(SysError::Instance("noise power and p_max must be positive".into()));
        }
        Ok(Self {
            realization,
            weights,
            noise_power,
            p_max,
        })
    }

    /// Equal user weights, noise from the scenario, power budget in dBm.
    pub fn equal_weights(
        realization: &ChannelRealization,
        scenario: &ScenarioConfig,
        p_max_dbm: f64,
    ) -> Result<Self, SysError> {
        let k = realization.user_positions.len();
        Self::new(
            realization.clone(),
            vec![1.0 / k as f64; k],
            scenario.noise_power(),
            dbm_to_watts(p_max_dbm),
        )
    }

    pub fn k(&self) -> usize {
        self.realization.user_positions.len()
    }

    pub fn r(&self) -> usize {
        self.realization.g.len()
    }

    pub fn m(&self) -> usize {
        self.realization.g[0].rows()
    }

    pub fn n_t(&self) -> usize {
        self.realization.g[0].cols()
    }
}

/// User-to-RIS association; user `k` is served by RIS `serving[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Association {
    r: usize,
    serving: Vec<usize>,
}

impl Association {
    pub fn new(r: usize, serving: Vec<usize>) -> Result<Self, SysError> {
        if r == 0 || serving.iter().any(|&i| i >= r) {
            return Err(SysError::Dimension(format!("serving RIS out of range 0..{r}: {serving:?}")));
        }
        Ok(Self { r, serving })
    }

    /// Validate a 0/1 matrix with one-hot rows.
    pub fn from_matrix(u: &[Vec<u8>]) -> Result<Self, SysError> {
        let r = u.first().map_or(0, |row| row.len());
        let mut serving = Vec::with_capacity(u.len());
        for (k, row) in u.iter().enumerate() {
            if row.len() != r || row.iter().any(|&v| v > 1) || row.iter().map(|&v| v as usize).sum::<usize>() != 1 {
                return Err(SysError::Dimension(format!("row {k} is not one-hot: {row:?}")));
            }
            serving.push(row.iter().position(|&v| v == 1).unwrap());
        }
        Self::new(r, serving)
    }

    pub fn k(&self) -> usize {
        self.serving.len()
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn serving(&self) -> &[usize] {
        &self.serving
    }

    pub fn matrix(&self) -> Vec<Vec<u8>> {
        self.serving
            .iter()
            .map(|&s| (0..self.r).map(|i| (i == s) as u8).collect())
            .collect()
    }

    /// Row-major one-hot weights as floats.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        self.matrix().into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect()
    }

    /// Every row-wise one-hot association for `k` users and `r` RISs, in
    /// lexicographic order of `serving`.
    pub fn enumerate(k: usize, r: usize) -> Vec<Self> {
        let total = r.pow(k as u32);
        (0..total)
            .map(|mut code| {
                let mut serving = vec![0; k];
                for s in serving.iter_mut().rev() {
                    *s = code % r;
                    code /= r;
                }
                Self { r, serving }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// `N_t x K` beamforming matrix.
    pub f: ComplexMatrix,
    /// Per-RIS phase vectors of length `M`.
    pub theta: Vec<Vec<C64>>,
    pub association: Association,
    pub wsr: f64,
}

/// `h_k = sum_i a[k][i] * theta_i^T H_ik` for arbitrary association weights.
pub fn effective_channel_weighted(
    inst: &ProblemInstance,
    assoc: &[Vec<f64>],
    theta: &[Vec<C64>],
) -> Result<Vec<Vec<C64>>, SysError> {
    let (k, r, m, n_t) = (inst.k(), inst.r(), inst.m(), inst.n_t());
    if assoc.len() != k || assoc.iter().any(|row| row.len() != r) {
        return Err(SysError::Dimension(format!("association must be {k}x{r}")));
    }
    if theta.len() != r || theta.iter().any(|t| t.len() != m) {
        return Err(SysError::Dimension(format!("theta must be {r} vectors of length {m}")));
    }
    let mut out = vec![vec![C64::new(0.0, 0.0); n_t]; k];
    for (kk, hk) in out.iter_mut().enumerate() {
        for i in 0..r {
            let a = assoc[kk][i];
            if a == 0.0 {
                continue;
            }
            let h = inst.realization.cascaded(i, kk);
            for (mm, &t) in theta[i].iter().enumerate() {
                let c = t * a;
                for (o, &x) in hk.iter_mut().zip(h.row(mm)) {
                    *o += c * x;
                }
            }
        }
    }
    Ok(out)
}

pub fn effective_channel(
    inst: &ProblemInstance,
    u: &Association,
    theta: &[Vec<C64>],
) -> Result<Vec<Vec<C64>>, SysError> {
    if u.k() != inst.k() || u.r() != inst.r() {
        return Err(SysError::Dimension(format!(
            "association is {}x{}, instance is {}x{}",
            u.k(),
            u.r(),
            inst.k(),
            inst.r()
        )));
    }
    effective_channel_weighted(inst, &u.weights(), theta)
}

/// `|h_k f_j|^2` for all pairs, `[k][j]`.
pub fn gains(h: &[Vec<C64>], f: &ComplexMatrix) -> Result<Vec<Vec<f64>>, SysError> {
    let k = h.len();
    if f.cols() != k || h.iter().any(|row| row.len() != f.rows()) {
        return Err(SysError::Dimension(format!(
            "{k} channels of length {} vs F {}x{}",
            h.first().map_or(0, |r| r.len()),
            f.rows(),
            f.cols()
        )));
    }
    Ok(h.iter()
        .map(|hk| {
            (0..k)
                .map(|j| {
                    let s: C64 = hk.iter().enumerate().map(|(n, &x)| x * f.get(n, j)).sum();
                    s.norm_sqr()
                })
                .collect()
        })
        .collect())
}

pub fn sinr(noise_power: f64, h: &[Vec<C64>], f: &ComplexMatrix) -> Result<Vec<f64>, SysError> {
    let g = gains(h, f)?;
    Ok(g.iter()
        .enumerate()
        .map(|(k, row)| {
            let interference: f64 = row.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
            row[k] / (interference + noise_power)
        })
        .collect())
}

pub fn wsr(weights: &[f64], sinrs: &[f64]) -> f64 {
    weights.iter().zip(sinrs).map(|(w, s)| w * s.ln_1p()).sum::<f64>() / std::f64::consts::LN_2
}

/// WSR of a full solution triple.
pub fn evaluate(
    inst: &ProblemInstance,
    u: &Association,
    theta: &[Vec<C64>],
    f: &ComplexMatrix,
) -> Result<f64, SysError> {
    let h = effective_channel(inst, u, theta)?;
    Ok(wsr(&inst.weights, &sinr(inst.noise_power, &h, f)?))
}

/// Scale `F` to Frobenius power exactly `p_max`.
pub fn project_power(f_raw: &ComplexMatrix, p_max: f64) -> Result<ComplexMatrix, SysError> {
    let n = f_raw.frob_norm();
    if n == 0.0 {
        return Err(SysError::ZeroBeamformer);
    }
    Ok(f_raw.scale(C64::new(p_max.sqrt() / n, 0.0)))
}

/// Project onto the unit circle. Returns the point and whether the input was
/// degenerate (replaced by `1 + 0j`).
pub fn project_unit_modulus(re: f64, im: f64) -> (C64, bool) {
    let mag = re.hypot(im);
    if mag <= PHASE_EPS {
        (C64::new(1.0, 0.0), true)
    } else {
        (C64::new(re / mag, im / mag), false)
    }
}

/// Project every element; returns the projected vector and the number of
/// degenerate elements.
pub fn project_unit_modulus_vec(raw: &[C64]) -> (Vec<C64>, usize) {
    let mut degenerate = 0;
    let out = raw
        .iter()
        .map(|z| {
            let (p, d) = project_unit_modulus(z.re, z.im);
            degenerate += d as usize;
            p
        })
        .collect();
    (out, degenerate)
}

/// Row-wise argmax; ties go to the lowest RIS index.
pub fn decode_association(scores: &[Vec<f64>]) -> Result<Association, SysError> {
    let r = scores.first().map_or(0, |row| row.len());
    let mut serving = Vec::with_capacity(scores.len());
    for (k, row) in scores.iter().enumerate() {
        if row.len() != r || r == 0 {
            return Err(SysError::Scores {
                row: k,
                msg: "ragged or empty".into(),
            });
        }
        if row.iter().any(|v| v.is_nan()) {
            return Err(SysError::Scores {
                row: k,
                msg: "NaN score".into(),
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(SysError::Scores {
                row: k,
                msg: format!("sums to {sum}"),
            });
        }
        serving.push(argmax(row));
    }
    Association::new(r, serving)
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseMode {
    /// Every user on the given RIS.
    Single(usize),
    Nearest,
    Farthest,
}

impl std::str::FromStr for CaseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" | "case2" => Ok(Self::Nearest),
            "farthest" | "case3" => Ok(Self::Farthest),
            "case1" => Ok(Self::Single(0)),
            _ => s
                .strip_prefix("single")
                .and_then(|n| n.trim_matches(|c| c == '(' || c == ')' || c == ':').parse().ok())
                .map(Self::Single)
                .ok_or_else(|| format!("unknown case mode {s:?}")),
        }
    }
}

pub fn case_association(realization: &ChannelRealization, mode: CaseMode) -> Result<Association, SysError> {
    let r = realization.g.len();
    let k = realization.user_positions.len();
    let serving = match mode {
        CaseMode::Single(i) => vec![i; k],
        CaseMode::Nearest | CaseMode::Farthest => (0..k)
            .map(|kk| {
                let d: Vec<f64> = (0..r).map(|i| realization.distance(kk, i)).collect();
                let mut best = 0;
                for i in 1..r {
                    let better = match mode {
                        CaseMode::Nearest => d[i] < d[best],
                        _ => d[i] > d[best],
                    };
                    if better {
                        best = i;
                    }
                }
                best
            })
            .collect(),
    };
    Association::new(r, serving)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_indexed, ScenarioConfig};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn instance(seed: u64) -> ProblemInstance {
        let s = ScenarioConfig::default();
        let real = sample_indexed(&s, seed, 0).unwrap();
        ProblemInstance::equal_weights(&real, &s, 20.0).unwrap()
    }

    fn phases(inst: &ProblemInstance, seed: u64) -> Vec<Vec<C64>> {
        (0..inst.r())
            .map(|i| {
                (0..inst.m())
                    .map(|m| C64::from_polar(1.0, (seed as f64 + 1.3 * i as f64 + 0.7 * m as f64).sin() * 3.0))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn scalar_identity_phase() {
        let s = ScenarioConfig {
            r: 1,
            ris_positions: vec![[30.0, 25.0]],
            m_x: 1,
            m_y: 1,
            ..ScenarioConfig::default()
        };
        let real = sample_indexed(&s, 1, 0).unwrap();
        let inst = ProblemInstance::equal_weights(&real, &s, 20.0).unwrap();
        let u = Association::new(1, vec![0, 0]).unwrap();
        let h = effective_channel(&inst, &u, &[vec![c(1.0, 0.0)]]).unwrap();
        for k in 0..2 {
            assert_eq!(h[k], real.cascaded(0, k).row(0).to_vec());
        }
    }

    #[test]
    fn masking_by_association() {
        let mut inst = instance(3);
        let th = phases(&inst, 1);
        let u = Association::new(2, vec![1, 1]).unwrap();
        let before = effective_channel(&inst, &u, &th).unwrap();
        let idx = 0; // H_{1,1}
        inst.realization.cascaded[idx] = inst.realization.cascaded[idx].scale(c(5.0, -2.0));
        assert_eq!(effective_channel(&inst, &u, &th).unwrap(), before);
    }

    #[test]
    fn effective_channel_naive_loop() {
        let inst = instance(4);
        let th = phases(&inst, 2);
        let u = Association::new(2, vec![1, 0]).unwrap();
        let h = effective_channel(&inst, &u, &th).unwrap();
        for k in 0..inst.k() {
            for n in 0..inst.n_t() {
                let mut want = c(0.0, 0.0);
                for i in 0..inst.r() {
                    let uk = (u.serving()[k] == i) as u8 as f64;
                    for m in 0..inst.m() {
                        want += uk * th[i][m] * inst.realization.cascaded(i, k).get(m, n);
                    }
                }
                assert!((h[k][n] - want).norm() <= 1e-12 * want.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn sinr_examples() {
        let noise = 1.0;
        let h = vec![vec![c(2f64.sqrt(), 0.0)]];
        let f = ComplexMatrix::column(&[c(1.0, 0.0)]);
        assert!((sinr(noise, &h, &f).unwrap()[0] - 2.0).abs() < 1e-12);
        // two users, identical channels, unit beams
        let h = vec![vec![c(1.0, 0.0)], vec![c(1.0, 0.0)]];
        let f = ComplexMatrix::row_vector(&[c(1.0, 0.0), c(1.0, 0.0)]);
        assert_eq!(sinr(noise, &h, &f).unwrap(), vec![0.5, 0.5]);
        let f0 = ComplexMatrix::zeros(1, 2);
        assert_eq!(sinr(noise, &h, &f0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn wsr_examples() {
        assert!((wsr(&[0.5, 0.5], &[1.0, 1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(wsr(&[0.5, 0.5], &[0.0, 0.0]), 0.0);
        assert!((wsr(&[1.0], &[3.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn power_projection() {
        let f = ComplexMatrix::column(&[c(2.0, 0.0), c(0.0, 0.0)]);
        assert_eq!(project_power(&f, 1.0).unwrap(), f.scale(c(0.5, 0.0)));
        let unit = ComplexMatrix::column(&[c(0.6, 0.0), c(0.0, 0.8)]);
        let again = project_power(&unit, 1.0).unwrap();
        assert!(again.add(&unit.scale(c(-1.0, 0.0))).unwrap().frob_norm() < 1e-12);
        assert_eq!(project_power(&ComplexMatrix::zeros(2, 2), 1.0), Err(SysError::ZeroBeamformer));
    }

    #[test]
    fn unit_modulus_examples() {
        let (p, d) = project_unit_modulus(3.0, 4.0);
        assert!((p - c(0.6, 0.8)).norm() < 1e-15 && !d);
        assert_eq!(project_unit_modulus(1.0, 0.0), (c(1.0, 0.0), false));
        assert_eq!(project_unit_modulus(0.0, 0.0), (c(1.0, 0.0), true));
    }

    #[test]
    fn decode_examples() {
        let u = decode_association(&[vec![0.25, 0.75], vec![0.6, 0.4]]).unwrap();
        assert_eq!(u.matrix(), vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(decode_association(&[vec![0.5, 0.5]]).unwrap().serving(), &[0]);
        assert!(decode_association(&[vec![f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn case_examples() {
        let s = ScenarioConfig::default();
        let mut real = sample_indexed(&s, 0, 0).unwrap();
        real.user_positions[0] = [40.0, 20.0];
        let real = ChannelRealization::assemble(&s, real.g, real.h, real.user_positions).unwrap();
        assert_eq!(case_association(&real, CaseMode::Nearest).unwrap().serving()[0], 0);
        assert_eq!(case_association(&real, CaseMode::Farthest).unwrap().serving()[0], 1);
        let s3 = ScenarioConfig {
            k: 3,
            ..ScenarioConfig::default()
        };
        let real3 = sample_indexed(&s3, 0, 0).unwrap();
        let u = case_association(&real3, CaseMode::Single(0)).unwrap();
        assert_eq!(u.matrix(), vec![vec![1, 0]; 3]);
        assert!(case_association(&real3, CaseMode::Single(2)).is_err());
    }

    #[test]
    fn enumerate_counts() {
        let all = Association::enumerate(2, 2);
        assert_eq!(all.len(), 4);
        assert_eq!(all[1].serving(), &[0, 1]);
    }

    #[test]
    fn case_mode_parse() {
        assert_eq!("case1".parse::<CaseMode>().unwrap(), CaseMode::Single(0));
        assert_eq!("single(1)".parse::<CaseMode>().unwrap(), CaseMode::Single(1));
        assert_eq!("nearest".parse::<CaseMode>().unwrap(), CaseMode::Nearest);
        assert!("bogus".parse::<CaseMode>().is_err());
    }

    proptest! {
        #[test]
        fn wsr_nonnegative_and_monotone(
            s in proptest::collection::vec(0.0f64..100.0, 3),
            bump in 0.0f64..10.0,
            idx in 0usize..3,
        ) {
            let w = [0.2, 0.3, 0.5];
            let base = wsr(&w, &s);
            prop_assert!(base >= 0.0);
            let mut s2 = s.clone();
            s2[idx] += bump;
            prop_assert!(wsr(&w, &s2) >= base);
        }

        #[test]
        fn power_projection_scale_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 8),
            scale in 1e-3f64..1e3,
        ) {
            prop_assume!(vals.iter().any(|v| v.abs() > 1e-3));
            let f = ComplexMatrix::new(2, 2, vals.chunks(2).map(|p| c(p[0], p[1])).collect()).unwrap();
            let a = project_power(&f, 0.1).unwrap();
            let b = project_power(&f.scale(c(scale, 0.0)), 0.1).unwrap();
            prop_assert!((a.frob_norm_sqr() - 0.1).abs() < 1e-12);
            prop_assert!(a.add(&b.scale(c(-1.0, 0.0))).unwrap().frob_norm() < 1e-12);
        }

        #[test]
        fn unit_modulus_keeps_phase(re in -10.0f64..10.0, im in -10.0f64..10.0) {
            prop_assume!(re.hypot(im) > 1e-6);
            let (p, _) = project_unit_modulus(re, im);
            prop_assert!((p.norm() - 1.0).abs() < 1e-12);
            prop_assert!((p.arg() - im.atan2(re)).abs() < 1e-12);
        }

        #[test]
        fn decoded_rows_one_hot(logits in proptest::collection::vec(-5.0f64..5.0, 6), shift in -3.0f64..3.0) {
            let softmax = |l: &[f64]| {
                let m = l.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect::<Vec<_>>()
            };
            let rows: Vec<Vec<f64>> = logits.chunks(3).map(softmax).collect();
            let shifted: Vec<Vec<f64>> = logits.chunks(3).map(|r| softmax(&r.iter().map(|x| x + shift).collect::<Vec<_>>())).collect();
            let u = decode_association(&rows).unwrap();
            for row in u.matrix() {
                prop_assert_eq!(row.iter().map(|&v| v as u32).sum::<u32>(), 1);
            }
            prop_assert_eq!(u, decode_association(&shifted).unwrap());
        }

        #[test]
        fn effective_channel_linear_in_theta(seed in 0u64..50, a in -2.0f64..2.0) {
            let inst = instance(seed);
            let u = Association::new(2, vec![0, 1]).unwrap();
            let t1 = phases(&inst, seed);
            let t2 = phases(&inst, seed + 7);
            let comb: Vec<Vec<C64>> = t1.iter().zip(&t2).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q * a).collect()).collect();
            let h1 = effective_channel(&inst, &u, &t1).unwrap();
            let h2 = effective_channel(&inst, &u, &t2).unwrap();
            let hc = effective_channel(&inst, &u, &comb).unwrap();
            for k in 0..2 {
                for n in 0..inst.n_t() {
                    let want = h1[k][n] + h2[k][n] * a;
                    prop_assert!((hc[k][n] - want).norm() <= 1e-12 * (h1[k][n].norm() + h2[k][n].norm() * a.abs()).max(1e-300));
                }
            }
        }
    }
}
