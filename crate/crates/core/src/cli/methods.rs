//! Per-method evaluation on a set of validation samples, and the results
//! table rows.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{ao_solve, brute_force_association, random_phase_baseline, AoConfig};
use crate::channel::{ChannelRealization, ScenarioConfig};
use crate::hgnn::{evaluate, AssocMode, Network};
use crate::par;
use crate::sysmodel::{case_association, Association, CaseMode, ProblemInstance};

use super::config::Method;
use super::CliError;

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub method: String,
    pub mean_wsr: f64,
    pub std_wsr: f64,
    pub n: usize,
    /// Agreement of the chosen association with the nearest-RIS rule, for
    /// methods that choose one.
    pub assoc_match: Option<f64>,
    pub seconds: f64,
}

pub struct EvalContext<'a> {
    pub scenario: &'a ScenarioConfig,
    pub samples: &'a [ChannelRealization],
    pub p_max_dbm: f64,
    pub seed: u64,
    pub sweep_value: f64,
    pub gnn: Option<&'a Network>,
    pub dnn: Option<&'a Network>,
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn ao_case(ctx: &EvalContext, mode: CaseMode) -> Result<Vec<f64>, CliError> {
    let cfg = AoConfig::standard();
    par::try_map_range(ctx.samples.len(), |j| -> Result<f64, CliError> {
        let s = &ctx.samples[j];
        let inst = ProblemInstance::equal_weights(s, ctx.scenario, ctx.p_max_dbm)?;
        let u = case_association(s, mode)?;
        Ok(ao_solve(&inst, &u, &cfg)?.solution.wsr)
    })
}

fn nearest(samples: &[ChannelRealization]) -> Result<Vec<Association>, CliError> {
    samples.iter().map(|s| Ok(case_association(s, CaseMode::Nearest)?)).collect()
}

/// WSR per sample and the association match rate, if defined.
fn run_method(ctx: &EvalContext, method: Method) -> Result<(Vec<f64>, Option<f64>), CliError> {
    let missing = |what: &str| CliError::Config(format!("method {} needs a {what} checkpoint", method.name()));
    match method {
        Method::Gnn | Method::Dnn => {
            let net = if method == Method::Gnn { ctx.gnn.ok_or_else(|| missing("gnn")) } else { ctx.dnn.ok_or_else(|| missing("dnn")) }?;
            let labels = nearest(ctx.samples)?;
            let e = evaluate(net, ctx.scenario, ctx.samples, &labels, AssocMode::Hard, ctx.p_max_dbm)?;
            Ok((e.wsr, Some(e.match_rate)))
        }
        Method::AoCase1 => Ok((ao_case(ctx, CaseMode::Single(0))?, None)),
        Method::AoCase2 => Ok((ao_case(ctx, CaseMode::Nearest)?, None)),
        Method::AoCase3 => Ok((ao_case(ctx, CaseMode::Farthest)?, None)),
        Method::RandomPhase => {
            let cfg = AoConfig::standard().wmmse;
            let wsr = par::try_map_range(ctx.samples.len(), |j| -> Result<f64, CliError> {
                let s = &ctx.samples[j];
                let inst = ProblemInstance::equal_weights(s, ctx.scenario, ctx.p_max_dbm)?;
                let u = case_association(s, CaseMode::Nearest)?;
                let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed.wrapping_add(j as u64));
                Ok(random_phase_baseline(&inst, &u, &cfg, &mut rng)?.wsr)
            })?;
            Ok((wsr, None))
        }
        Method::BruteForce => {
            let cfg = AoConfig::standard();
            let out = par::try_map_range(ctx.samples.len(), |j| -> Result<(f64, bool), CliError> {
                let s = &ctx.samples[j];
                let inst = ProblemInstance::equal_weights(s, ctx.scenario, ctx.p_max_dbm)?;
                let bf = brute_force_association(&inst, &cfg)?;
                let near = case_association(s, CaseMode::Nearest)?;
                Ok((bf.best.wsr, bf.best.association == near))
            })?;
            let hits = out.iter().filter(|o| o.1).count();
            let rate = hits as f64 / out.len().max(1) as f64;
            Ok((out.into_iter().map(|o| o.0).collect(), Some(rate)))
        }
    }
}

pub fn evaluate_methods(ctx: &EvalContext, methods: &[Method]) -> Result<Vec<ResultRow>, CliError> {
    let mut rows = Vec::with_capacity(methods.len());
    for &m in methods {
        let start = Instant::now();
        let (wsr, assoc_match) = run_method(ctx, m)?;
        let (mean_wsr, std_wsr) = mean_std(&wsr);
        rows.push(ResultRow {
            sweep_value: ctx.sweep_value,
            method: m.name().into(),
            mean_wsr,
            std_wsr,
            n: wsr.len(),
            assoc_match,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}
