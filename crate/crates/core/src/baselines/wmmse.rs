//! WMMSE beamforming for fixed effective channels.

use num_complex::Complex64 as C64;

use super::BaselineError;
use crate::numerics::ComplexMatrix;
use crate::sysmodel::{gains, sinr, wsr, ProblemInstance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmmseConfig {
    pub max_iter: usize,
    /// Stop when the relative WSR change falls below this.
    pub tol: f64,
}

impl Default for WmmseConfig {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-6 }
    }
}

/// Receiver and weight variables of the last update.
#[derive(Debug, Clone, PartialEq)]
pub struct WmmseState {
    pub chi: Vec<C64>,
    pub kappa: Vec<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct WmmseOutput {
    /// Best iterate.
    pub f: ComplexMatrix,
    pub wsr: f64,
    /// WSR of the initial point followed by every update.
    pub trace: Vec<f64>,
    pub state: WmmseState,
}

/// `chi_k` and `kappa_k` for the current beamformer.
pub fn receivers(noise_power: f64, h: &[Vec<C64>], f: &ComplexMatrix) -> Result<(Vec<C64>, Vec<f64>), BaselineError> {
    let g = gains(h, f)?;
    let k = h.len();
    let mut chi = Vec::with_capacity(k);
    let mut kappa = Vec::with_capacity(k);
    for kk in 0..k {
        let total: f64 = g[kk].iter().sum::<f64>() + noise_power;
        let hf: C64 = h[kk].iter().enumerate().map(|(n, &x)| x * f.get(n, kk)).sum();
        let c = hf / total;
        chi.push(c);
        kappa.push(1.0 / (1.0 - (c.conj() * hf).re));
    }
    Ok((chi, kappa))
}

/// `(A + lambda I)^{-1} B` and its Frobenius power.
fn regularized(a: &ComplexMatrix, b: &ComplexMatrix, lambda: f64) -> Result<(ComplexMatrix, f64), BaselineError> {
    let n = a.rows();
    let mut m = a.clone();
    for i in 0..n {
        let v = m.get(i, i) + lambda;
        m.set(i, i, v);
    }
    let x = m.solve_hpd(b)?;
    let p = x.frob_norm_sqr();
    Ok((x, p))
}

/// Beamformer update for fixed receivers and weights, with the power
/// multiplier found by bracketing and bisection.
pub fn beamformer_update(
    inst_weights: &[f64],
    p_max: f64,
    h: &[Vec<C64>],
    chi: &[C64],
    kappa: &[f64],
) -> Result<(ComplexMatrix, f64), BaselineError> {
    let n_t = h[0].len();
    let k = h.len();
    let mut a = ComplexMatrix::zeros(n_t, n_t);
    let mut b = ComplexMatrix::zeros(n_t, k);
    for kk in 0..k {
        let wk = inst_weights[kk];
        let c = wk * chi[kk].norm_sqr() * kappa[kk];
        for p in 0..n_t {
            for q in 0..n_t {
                let v = a.get(p, q) + c * h[kk][p].conj() * h[kk][q];
                a.set(p, q, v);
            }
            b.set(p, kk, wk * kappa[kk] * chi[kk] * h[kk][p].conj());
        }
    }
    let trace: f64 = (0..n_t).map(|i| a.get(i, i).re).sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(BaselineError::Bracket(format!("degenerate normal matrix, trace {trace:e}")));
    }
    let floor = 1e-10 * trace / n_t as f64;
    let (x, p) = regularized(&a, &b, floor)?;
    if p <= p_max {
        return Ok((x, floor));
    }
    let (mut lo, mut hi) = (floor, 2.0 * floor);
    let mut best = None;
    for _ in 0..200 {
        let (x, p) = regularized(&a, &b, hi)?;
        if p <= p_max {
            best = Some((x, p));
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    let Some((mut x, mut p)) = best else {
        return Err(BaselineError::Bracket(format!(
            "no feasible multiplier up to {hi:e} (trace {trace:e}, p_max {p_max:e})"
        )));
    };
    for _ in 0..200 {
        if (p_max - p) / p_max <= 1e-10 || (hi - lo) <= 1e-15 * hi {
            break;
        }
        let mid = if hi > 2.0 * lo { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        let (xm, pm) = regularized(&a, &b, mid)?;
        if pm <= p_max {
            hi = mid;
            x = xm;
            p = pm;
        } else {
            lo = mid;
        }
    }
    Ok((x, hi))
}

pub fn wmmse_solve(
    inst: &ProblemInstance,
    h: &[Vec<C64>],
    f_init: &ComplexMatrix,
    cfg: &WmmseConfig,
) -> Result<WmmseOutput, BaselineError> {
    let k = inst.k();
    if h.len() != k || f_init.cols() != k || f_init.rows() != inst.n_t() {
        return Err(BaselineError::Dimension(format!(
            "{} channels, F {}x{}, instance K={} N_t={}",
            h.len(),
            f_init.rows(),
            f_init.cols(),
            k,
            inst.n_t()
        )));
    }
    if f_init.frob_norm_sqr() > inst.p_max * (1.0 + 1e-9) {
        return Err(BaselineError::Dimension("initial beamformer violates the power budget".into()));
    }
    let rate = |f: &ComplexMatrix| -> Result<f64, BaselineError> { Ok(wsr(&inst.weights, &sinr(inst.noise_power, h, f)?)) };
    let mut f = f_init.clone();
    let mut current = rate(&f)?;
    let mut trace = vec![current];
    let mut best = (f.clone(), current);
    let mut state = WmmseState {
        chi: vec![C64::new(0.0, 0.0); k],
        kappa: vec![1.0; k],
        lambda: 0.0,
    };
    for _ in 0..cfg.max_iter {
        let (chi, kappa) = receivers(inst.noise_power, h, &f)?;
        if chi.iter().all(|c| c.norm_sqr() == 0.0) {
            // zero beamformer: restart from the matched filter
            f = matched_filter(h, inst.p_max)?;
            current = rate(&f)?;
            trace.push(current);
            continue;
        }
        let (next, lambda) = beamformer_update(&inst.weights, inst.p_max, h, &chi, &kappa)?;
        state = WmmseState { chi, kappa, lambda };
        f = next;
        let prev = current;
        current = rate(&f)?;
        trace.push(current);
        if current > best.1 {
            best = (f.clone(), current);
        }
        if (current - prev).abs() <= cfg.tol * current.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(WmmseOutput {
        f: best.0,
        wsr: best.1,
        trace,
        state,
    })
}

/// `F = [h_1^H .. h_K^H]` scaled to full power.
pub fn matched_filter(h: &[Vec<C64>], p_max: f64) -> Result<ComplexMatrix, BaselineError> {
    let n_t = h.first().map_or(0, |r| r.len());
    let f = ComplexMatrix::from_fn(n_t, h.len(), |n, k| h[k][n].conj());
    Ok(crate::sysmodel::project_power(&f, p_max)?)
}
