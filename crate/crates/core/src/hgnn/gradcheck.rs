//! End-to-end finite-difference check of the training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{dbm_to_watts, sample_indexed, ScenarioConfig};
use crate::numerics::{RealTensor, Tape};
use crate::sysmodel::{case_association, CaseMode};

use super::batch::{Batch, Dims};
use super::loss::{combine, loss_ce, loss_wsr};
use super::model::{Arch, Model, ModelKind};
use super::HgnnError;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Target relative accuracy; also sets the magnitude floor below which an
/// entry is compared in absolute terms.
pub const TOLERANCE: f64 = 1e-5;

/// Absolute roundoff of a central difference of a loss of magnitude `loss`:
/// a few ulps of the loss divided by the step.
pub fn fd_noise(loss: f64) -> f64 {
    4.0 * f64::EPSILON * loss.abs().max(1.0) / FD_STEP
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub seed: u64,
    /// Largest `|a - n| / max(|a|, |n|, floor)` over every parameter entry,
    /// with `floor = max(1e-6 G, fd_noise / TOLERANCE)` and `G` the largest
    /// analytic gradient magnitude.
    pub max_rel_err: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
    pub entries: usize,
    pub loss: f64,
}

/// The tiny scenario used for gradient checks: two users, two RISs, two
/// antennas and two elements per RIS.
pub fn tiny_scenario() -> ScenarioConfig {
    ScenarioConfig {
        n_t: 2,
        r: 2,
        k: 2,
        m_x: 2,
        m_y: 1,
        ..ScenarioConfig::default()
    }
}

/// Compares autodiff against central differences for every parameter of a
/// freshly initialized model (hidden width 8, four blocks) on a two-sample
/// batch, with loss `rate + eta * cross-entropy` under the soft
/// association.
pub fn grad_check(seed: u64, kind: ModelKind, eta: f64) -> Result<GradReport, HgnnError> {
    let s = tiny_scenario();
    let samples: Vec<_> = (0..2).map(|i| sample_indexed(&s, seed, i)).collect::<Result<_, _>>()?;
    let labels: Vec<_> = samples.iter().map(|r| case_association(r, CaseMode::Nearest)).collect::<Result<_, _>>()?;
    let arch = Arch {
        kind,
        dims: Dims::of(&samples[0]),
        hidden: 8,
        steps: 4,
        slope: 0.01,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::init(arch, &mut rng)?;
    let rms = crate::channel::Dataset::cascaded_rms(&samples);
    let p_max = dbm_to_watts(20.0);
    // noise comparable to the received power keeps every SINR near one
    let noise = p_max * rms * rms * (arch.dims.m as f64) / arch.dims.k as f64;
    let refs: Vec<_> = samples.iter().collect();
    let lrefs: Vec<_> = labels.iter().collect();
    let batch = Batch::new(&refs, &lrefs, &[0.5, 0.5], rms, noise, p_max)?;

    let eval = |model: &Model, grads: bool| -> Result<(f64, Vec<RealTensor>), HgnnError> {
        let mut tape = Tape::new();
        let p = if grads {
            model.params.leaves(&mut tape)
        } else {
            model.params.tensors().iter().map(|t| tape.constant(t.clone())).collect()
        };
        let h = model.forward(&mut tape, &p, &batch)?;
        let l1 = loss_wsr(&mut tape, &batch, h.f, h.theta, h.scores)?;
        let l2 = loss_ce(&mut tape, &batch.labels, h.scores, batch.size)?;
        let loss = combine(&mut tape, l1, l2, eta)?;
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        Ok((value, p.iter().map(|&v| g.take(v)).collect()))
    };

    let (loss, analytic) = eval(&model, true)?;
    let g_max = analytic.iter().map(RealTensor::max_abs).fold(0.0, f64::max);
    // entries too small for the reference to resolve are held to its noise
    let floor = (1e-6 * g_max).max(fd_noise(loss) / TOLERANCE);
    let mut worst = (0.0, String::new());
    let mut entries = 0;
    for t in 0..model.params.len() {
        for j in 0..model.params.tensors()[t].len() {
            let orig = model.params.tensors()[t].data()[j];
            model.params.tensors_mut()[t].data_mut()[j] = orig + FD_STEP;
            let (up, _) = eval(&model, false)?;
            model.params.tensors_mut()[t].data_mut()[j] = orig - FD_STEP;
            let (down, _) = eval(&model, false)?;
            model.params.tensors_mut()[t].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[t].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor).max(f64::MIN_POSITIVE);
            if err > worst.0 {
                worst = (err, model.params.names()[t].clone());
            }
            entries += 1;
        }
    }
    Ok(GradReport {
        seed,
        max_rel_err: worst.0,
        worst: worst.1,
        entries,
        loss,
    })
}
