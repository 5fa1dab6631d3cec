//! Riemannian conjugate gradient over the RIS phases.
//!
//! The phases of all RISs are stacked into one vector on the product of unit
//! circles. Directions are Polak-Ribiere+ with tangent-projection transport,
//! steps are Armijo backtracking, and the retraction normalizes every entry.

use num_complex::Complex64 as C64;

use super::BaselineError;
use crate::numerics::ComplexMatrix;
use crate::sysmodel::{Association, ProblemInstance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcgConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
}

impl Default for RcgConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            armijo_c: 1e-4,
            backtrack: 0.5,
            max_halvings: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RcgOutput {
    /// Per-RIS phase vectors.
    pub theta: Vec<Vec<C64>>,
    pub wsr: f64,
    /// WSR at the start and after each accepted step.
    pub trace: Vec<f64>,
    /// The last line search exhausted its halvings.
    pub line_search_failed: bool,
}

/// WSR as a function of the stacked phases for fixed `F` and association.
pub struct PhaseObjective<'a> {
    weights: &'a [f64],
    noise: f64,
    k: usize,
    m: usize,
    /// `serving[k]`: the single RIS whose phases reach user `k`.
    serving: Vec<usize>,
    /// `a[k][j]` = `H_{serving(k), k} f_j`, length `M`.
    a: Vec<Vec<Vec<C64>>>,
}

impl<'a> PhaseObjective<'a> {
    pub fn new(inst: &'a ProblemInstance, u: &Association, f: &ComplexMatrix) -> Result<Self, BaselineError> {
        let (k, m, n_t) = (inst.k(), inst.m(), inst.n_t());
        if u.k() != k || u.r() != inst.r() || f.rows() != n_t || f.cols() != k {
            return Err(BaselineError::Dimension("association or beamformer does not match instance".into()));
        }
        let serving = u.serving().to_vec();
        let a = (0..k)
            .map(|kk| {
                let h = inst.realization.cascaded(serving[kk], kk);
                (0..k)
                    .map(|j| {
                        (0..m)
                            .map(|mm| h.row(mm).iter().enumerate().map(|(n, &x)| x * f.get(n, j)).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            weights: &inst.weights,
            noise: inst.noise_power,
            k,
            m,
            serving,
            a,
        })
    }

    fn z(&self, theta: &[C64]) -> Vec<Vec<C64>> {
        (0..self.k)
            .map(|kk| {
                let t = &theta[self.serving[kk] * self.m..(self.serving[kk] + 1) * self.m];
                self.a[kk]
                    .iter()
                    .map(|akj| t.iter().zip(akj).map(|(x, y)| x * y).sum())
                    .collect()
            })
            .collect()
    }

    pub fn value(&self, theta: &[C64]) -> f64 {
        let z = self.z(theta);
        let mut total = 0.0;
        for kk in 0..self.k {
            let t: f64 = z[kk].iter().map(|v| v.norm_sqr()).sum::<f64>() + self.noise;
            let i = t - z[kk][kk].norm_sqr();
            total += self.weights[kk] * (t / i).ln();
        }
        total / std::f64::consts::LN_2
    }

    /// Euclidean gradient, twice the Wirtinger derivative with respect to
    /// `conj(theta)`.
    pub fn gradient(&self, theta: &[C64]) -> Vec<C64> {
        let z = self.z(theta);
        let mut g = vec![C64::new(0.0, 0.0); theta.len()];
        for kk in 0..self.k {
            let t: f64 = z[kk].iter().map(|v| v.norm_sqr()).sum::<f64>() + self.noise;
            let i = t - z[kk][kk].norm_sqr();
            let c = 2.0 * self.weights[kk] / std::f64::consts::LN_2;
            let off = self.serving[kk] * self.m;
            for j in 0..self.k {
                let coef = if j == kk { z[kk][j] / t } else { z[kk][j] * (1.0 / t - 1.0 / i) };
                for (mm, &x) in self.a[kk][j].iter().enumerate() {
                    g[off + mm] += c * coef * x.conj();
                }
            }
        }
        g
    }
}

fn inner(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Project onto the tangent space at `theta`.
pub fn tangent(theta: &[C64], v: &[C64]) -> Vec<C64> {
    v.iter().zip(theta).map(|(&g, &t)| g - t * (g * t.conj()).re).collect()
}

pub fn retract(v: &[C64]) -> Vec<C64> {
    v.iter()
        .map(|z| {
            let n = z.norm();
            if n > 0.0 {
                z / n
            } else {
                C64::new(1.0, 0.0)
            }
        })
        .collect()
}

pub fn stack(theta: &[Vec<C64>]) -> Vec<C64> {
    theta.iter().flatten().copied().collect()
}

pub fn unstack(v: &[C64], m: usize) -> Vec<Vec<C64>> {
    v.chunks(m).map(|c| c.to_vec()).collect()
}

pub fn rcg_phase_solve(
    inst: &ProblemInstance,
    u: &Association,
    f: &ComplexMatrix,
    theta_init: &[Vec<C64>],
    cfg: &RcgConfig,
) -> Result<RcgOutput, BaselineError> {
    let m = inst.m();
    if theta_init.len() != inst.r() || theta_init.iter().any(|t| t.len() != m) {
        return Err(BaselineError::Dimension(format!("theta must be {} vectors of length {m}", inst.r())));
    }
    let obj = PhaseObjective::new(inst, u, f)?;
    let mut theta = retract(&stack(theta_init));
    let mut value = obj.value(&theta);
    let mut trace = vec![value];
    let mut grad = tangent(&theta, &obj.gradient(&theta));
    let mut dir = grad.clone();
    let mut failed = false;

    for _ in 0..cfg.max_iter {
        if inner(&dir, &grad) <= 0.0 {
            dir = grad.clone();
        }
        let scale = dir.iter().fold(0.0f64, |s, d| s.max(d.norm()));
        if scale == 0.0 || !scale.is_finite() {
            break;
        }
        let unit: Vec<C64> = dir.iter().map(|d| d / scale).collect();
        let slope = inner(&grad, &unit);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.max_halvings {
            let cand: Vec<C64> = theta.iter().zip(&unit).map(|(t, d)| t + d * step).collect();
            let cand = retract(&cand);
            let v = obj.value(&cand);
            if v >= value + cfg.armijo_c * step * slope {
                accepted = Some((cand, v));
                break;
            }
            step *= cfg.backtrack;
        }
        let Some((next, next_value)) = accepted else {
            failed = true;
            break;
        };
        let prev = value;
        theta = next;
        value = next_value;
        trace.push(value);

        let new_grad = tangent(&theta, &obj.gradient(&theta));
        let moved_grad = tangent(&theta, &grad);
        let moved_dir = tangent(&theta, &dir);
        let denom = inner(&grad, &grad);
        let diff: Vec<C64> = new_grad.iter().zip(&moved_grad).map(|(a, b)| a - b).collect();
        let beta = if denom > 0.0 { (inner(&new_grad, &diff) / denom).max(0.0) } else { 0.0 };
        dir = new_grad.iter().zip(&moved_dir).map(|(g, d)| g + d * beta).collect();
        grad = new_grad;

        if (value - prev).abs() <= cfg.tol * value.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(RcgOutput {
        theta: unstack(&theta, m),
        wsr: value,
        trace,
        line_search_failed: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_indexed, ScenarioConfig};
    use crate::sysmodel::{evaluate, CaseMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(s: &ScenarioConfig, seed: u64, noise: f64) -> (ProblemInstance, Association, ComplexMatrix) {
        let real = sample_indexed(s, seed, 0).unwrap();
        let k = s.k;
        let inst = ProblemInstance::new(real, vec![1.0 / k as f64; k], noise, 1.0).unwrap();
        let u = crate::sysmodel::case_association(&inst.realization, CaseMode::Nearest).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = ComplexMatrix::from_fn(s.n_t, k, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let f = crate::sysmodel::project_power(&f, 1.0).unwrap();
        (inst, u, f)
    }

    fn random_theta(r: usize, m: usize, seed: u64) -> Vec<Vec<C64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..r)
            .map(|_| (0..m).map(|_| C64::from_polar(1.0, rng.gen_range(0.0..6.3))).collect())
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = ScenarioConfig::default();
        for seed in 0..5 {
            let (mut inst, u, f) = setup(&s, seed, 1.0);
            // noise at the signal scale so the objective is far from linear
            let th = random_theta(2, 16, seed);
            let h = crate::sysmodel::effective_channel(&inst, &u, &th).unwrap();
            let g = crate::sysmodel::gains(&h, &f).unwrap();
            inst.noise_power = g.iter().flatten().sum::<f64>() / 4.0;
            let obj = PhaseObjective::new(&inst, &u, &f).unwrap();
            let x = stack(&th);
            let grad = obj.gradient(&x);
            let gmax = grad.iter().fold(0.0f64, |a, v| a.max(v.re.abs()).max(v.im.abs()));
            let step = 1e-6;
            for idx in 0..x.len() {
                for (part, dir) in [(0, C64::new(1.0, 0.0)), (1, C64::new(0.0, 1.0))] {
                    let mut p = x.clone();
                    p[idx] += dir * step;
                    let mut q = x.clone();
                    q[idx] -= dir * step;
                    let fd = (obj.value(&p) - obj.value(&q)) / (2.0 * step);
                    let an = if part == 0 { grad[idx].re } else { grad[idx].im };
                    let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6 * gmax);
                    assert!(err < 1e-5, "seed {seed} idx {idx}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn tangent_condition_and_unit_modulus() {
        let s = ScenarioConfig::default();
        let (inst, u, f) = setup(&s, 2, 1e-17);
        let th = random_theta(2, 16, 5);
        let obj = PhaseObjective::new(&inst, &u, &f).unwrap();
        let x = stack(&th);
        let g = tangent(&x, &obj.gradient(&x));
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.norm()));
        for (gi, ti) in g.iter().zip(&x) {
            assert!((gi * ti.conj()).re.abs() <= 1e-9 * gmax.max(1e-300));
        }
        let out = rcg_phase_solve(&inst, &u, &f, &th, &RcgConfig::default()).unwrap();
        for t in out.theta.iter().flatten() {
            assert!((t.norm() - 1.0).abs() < 1e-12);
        }
        for w in out.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let direct = evaluate(&inst, &u, &out.theta, &f).unwrap();
        assert!((direct - out.wsr).abs() <= 1e-9 * direct);
    }

    #[test]
    fn scalar_link_is_phase_invariant() {
        let s = ScenarioConfig {
            k: 1,
            n_t: 1,
            m_x: 1,
            m_y: 1,
            ..ScenarioConfig::default()
        };
        let (inst, u, f) = setup(&s, 4, 1e-17);
        let th = random_theta(2, 1, 1);
        let out = rcg_phase_solve(&inst, &u, &f, &th, &RcgConfig::default()).unwrap();
        let first = out.trace[0];
        assert!(out.trace.iter().all(|&v| (v - first).abs() <= 1e-12 * first));
    }

    #[test]
    fn two_element_matches_phase_grid() {
        let s = ScenarioConfig {
            k: 1,
            n_t: 2,
            m_x: 1,
            m_y: 2,
            ..ScenarioConfig::default()
        };
        for seed in 0..3 {
            let (mut inst, u, f) = setup(&s, seed, 1.0);
            inst.noise_power = {
                let h = crate::sysmodel::effective_channel(&inst, &u, &random_theta(2, 2, 0)).unwrap();
                crate::sysmodel::gains(&h, &f).unwrap()[0][0]
            };
            let out = rcg_phase_solve(&inst, &u, &f, &random_theta(2, 2, seed + 10), &RcgConfig::default()).unwrap();
            let serving = u.serving()[0];
            let mut best: f64 = 0.0;
            let n = 360;
            for a in 0..n {
                for b in 0..n {
                    let mut th = vec![vec![C64::new(1.0, 0.0); 2]; 2];
                    th[serving] = vec![
                        C64::from_polar(1.0, a as f64 * std::f64::consts::TAU / n as f64),
                        C64::from_polar(1.0, b as f64 * std::f64::consts::TAU / n as f64),
                    ];
                    best = best.max(evaluate(&inst, &u, &th, &f).unwrap());
                }
            }
            // grid resolution of one degree bounds the gap from below
            assert!(out.wsr >= best * (1.0 - 1e-4), "{} vs grid {best}", out.wsr);
            assert!(out.wsr <= best * (1.0 + 1e-3));
        }
    }
}
