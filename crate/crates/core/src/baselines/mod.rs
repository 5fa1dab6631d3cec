//! Classical solvers: WMMSE beamforming, Riemannian conjugate gradient for the
//! phases, their alternation, a random-phase baseline and exhaustive
//! association search.

mod rcg;
mod wmmse;

use num_complex::Complex64 as C64;
use rand::Rng;

pub use rcg::{rcg_phase_solve, retract, stack, tangent, unstack, PhaseObjective, RcgConfig, RcgOutput};
pub use wmmse::{beamformer_update, matched_filter, receivers, wmmse_solve, WmmseConfig, WmmseOutput, WmmseState};

use crate::numerics::NumericsError;
use crate::sysmodel::{effective_channel, Association, ProblemInstance, Solution, SysError};

/// Largest association space [`brute_force_association`] will enumerate.
pub const MAX_ASSOCIATIONS: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BaselineError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("power multiplier search failed: {0}")]
    Bracket(String),
    #[error("{r}^{k} associations exceed the enumeration limit of {MAX_ASSOCIATIONS}")]
    TooManyAssociations { r: usize, k: usize },
    #[error(transparent)]
    Sys(#[from] SysError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AoConfig {
    pub max_rounds: usize,
    pub tol: f64,
    pub wmmse: WmmseConfig,
    pub rcg: RcgConfig,
}

impl AoConfig {
    pub fn standard() -> Self {
        Self {
            max_rounds: 50,
            tol: 1e-4,
            wmmse: WmmseConfig::default(),
            rcg: RcgConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AoOutput {
    pub solution: Solution,
    /// WSR of the initial point and after every round.
    pub trace: Vec<f64>,
    /// Inner WMMSE traces, one per round.
    pub wmmse_traces: Vec<Vec<f64>>,
    pub line_search_failures: usize,
}

/// Starting point: all-ones phases and the matched filter at full power.
pub fn ao_init(inst: &ProblemInstance, u: &Association) -> Result<(Vec<Vec<C64>>, crate::numerics::ComplexMatrix), BaselineError> {
    let theta = vec![vec![C64::new(1.0, 0.0); inst.m()]; inst.r()];
    let h = effective_channel(inst, u, &theta)?;
    let f = matched_filter(&h, inst.p_max)?;
    Ok((theta, f))
}

pub fn ao_solve(inst: &ProblemInstance, u: &Association, cfg: &AoConfig) -> Result<AoOutput, BaselineError> {
    let (mut theta, mut f) = ao_init(inst, u)?;
    let mut current = crate::sysmodel::evaluate(inst, u, &theta, &f)?;
    let mut trace = vec![current];
    let mut wmmse_traces = Vec::new();
    let mut failures = 0;
    let mut best = (theta.clone(), f.clone(), current);
    for _ in 0..cfg.max_rounds {
        let h = effective_channel(inst, u, &theta)?;
        let w = wmmse_solve(inst, &h, &f, &cfg.wmmse)?;
        wmmse_traces.push(w.trace);
        f = w.f;
        let r = rcg_phase_solve(inst, u, &f, &theta, &cfg.rcg)?;
        failures += r.line_search_failed as usize;
        theta = r.theta;
        let prev = current;
        current = r.wsr;
        trace.push(current);
        if current > best.2 {
            best = (theta.clone(), f.clone(), current);
        }
        if (current - prev).abs() <= cfg.tol * current.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let (theta, f, wsr) = best;
    Ok(AoOutput {
        solution: Solution {
            f,
            theta,
            association: u.clone(),
            wsr,
        },
        trace,
        wmmse_traces,
        line_search_failures: failures,
    })
}

/// Uniformly random phases followed by WMMSE beamforming.
pub fn random_phase_baseline<R: Rng + ?Sized>(
    inst: &ProblemInstance,
    u: &Association,
    cfg: &WmmseConfig,
    rng: &mut R,
) -> Result<Solution, BaselineError> {
    let theta: Vec<Vec<C64>> = (0..inst.r())
        .map(|_| {
            (0..inst.m())
                .map(|_| C64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let h = effective_channel(inst, u, &theta)?;
    let f0 = matched_filter(&h, inst.p_max)?;
    let w = wmmse_solve(inst, &h, &f0, cfg)?;
    Ok(Solution {
        f: w.f,
        theta,
        association: u.clone(),
        wsr: w.wsr,
    })
}

#[derive(Debug, Clone)]
pub struct BruteForce {
    pub best: Solution,
    /// Every association with its AO WSR, in enumeration order.
    pub table: Vec<(Association, f64)>,
}

pub fn brute_force_association(inst: &ProblemInstance, cfg: &AoConfig) -> Result<BruteForce, BaselineError> {
    let (k, r) = (inst.k(), inst.r());
    let too_many = (r as f64).powi(k as i32) > MAX_ASSOCIATIONS as f64;
    if too_many {
        return Err(BaselineError::TooManyAssociations { r, k });
    }
    let mut table = Vec::new();
    let mut best: Option<Solution> = None;
    for u in Association::enumerate(k, r) {
        let out = ao_solve(inst, &u, cfg)?;
        table.push((u, out.solution.wsr));
        if best.as_ref().map_or(true, |b| out.solution.wsr > b.wsr) {
            best = Some(out.solution);
        }
    }
    Ok(BruteForce {
        best: best.expect("at least one association"),
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_indexed, ScenarioConfig};
    use crate::sysmodel::{case_association, CaseMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inst(seed: u64) -> ProblemInstance {
        let s = ScenarioConfig::default();
        let real = sample_indexed(&s, seed, 0).unwrap();
        ProblemInstance::equal_weights(&real, &s, 20.0).unwrap()
    }

    #[test]
    fn ao_trace_monotone_and_feasible() {
        for seed in 0..5 {
            let p = inst(seed);
            let u = case_association(&p.realization, CaseMode::Nearest).unwrap();
            let out = ao_solve(&p, &u, &AoConfig::standard()).unwrap();
            for w in out.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
            for t in &out.wmmse_traces {
                for w in t.windows(2) {
                    assert!(w[1] >= w[0] - 1e-9);
                }
            }
            assert!(out.solution.f.frob_norm_sqr() <= p.p_max * (1.0 + 1e-9));
        }
    }

    #[test]
    fn random_phase_is_unit_modulus_and_seeded() {
        let p = inst(1);
        let u = case_association(&p.realization, CaseMode::Nearest).unwrap();
        let a = random_phase_baseline(&p, &u, &WmmseConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = random_phase_baseline(&p, &u, &WmmseConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(a.theta.iter().flatten().all(|t| (t.norm() - 1.0).abs() < 1e-12));
        assert_ne!(a.theta, b.theta);
    }

    #[test]
    fn random_phase_mean_below_ao() {
        let p = inst(2);
        let u = case_association(&p.realization, CaseMode::Nearest).unwrap();
        let ao = ao_solve(&p, &u, &AoConfig::standard()).unwrap().solution.wsr;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mean: f64 = (0..100)
            .map(|_| random_phase_baseline(&p, &u, &WmmseConfig::default(), &mut rng).unwrap().wsr)
            .sum::<f64>()
            / 100.0;
        assert!(mean < ao);
    }

    #[test]
    fn brute_force_enumerates_and_dominates() {
        let p = inst(3);
        let bf = brute_force_association(&p, &AoConfig::standard()).unwrap();
        assert_eq!(bf.table.len(), 4);
        let near = case_association(&p.realization, CaseMode::Nearest).unwrap();
        let near_wsr = bf.table.iter().find(|(u, _)| *u == near).unwrap().1;
        assert!(bf.best.wsr >= near_wsr);
        assert!(bf.table.iter().all(|(_, w)| bf.best.wsr >= *w));
    }

    #[test]
    fn brute_force_guard() {
        let s = ScenarioConfig {
            k: 9,
            ..ScenarioConfig::default()
        };
        let real = sample_indexed(&s, 0, 0).unwrap();
        let p = ProblemInstance::equal_weights(&real, &s, 20.0).unwrap();
        assert!(matches!(
            brute_force_association(&p, &AoConfig::standard()),
            Err(BaselineError::TooManyAssociations { .. })
        ));
    }
}
