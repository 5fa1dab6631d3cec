//! Pre-training, penalty calibration, joint training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{ao_solve, AoConfig};
use crate::channel::{dbm_to_watts, ChannelRealization, Dataset, ScenarioConfig};
use crate::numerics::{AdamState, ComplexMatrix, Tape, C64};
use crate::par;
use crate::sysmodel::{case_association, decode_association, evaluate as sys_evaluate, Association, CaseMode, ProblemInstance};

use super::batch::{Batch, Dims};
use super::loss::{combine, loss_ce, loss_wsr};
use super::model::{Arch, Model};
use super::{HgnnError, Network, TrainConfig};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Validation samples used for the penalty calibration.
pub const REFERENCE_SAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_wsr: f64,
    pub assoc_match_rate: f64,
}

/// Label associations for both splits of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub train: Vec<Association>,
    pub validation: Vec<Association>,
}

pub fn label_set(data: &Dataset, mode: CaseMode) -> Result<LabelSet, HgnnError> {
    let make = |s: &[ChannelRealization]| -> Result<Vec<Association>, HgnnError> {
        s.iter().map(|r| Ok(case_association(r, mode)?)).collect()
    };
    Ok(LabelSet {
        train: make(data.train())?,
        validation: make(data.validation())?,
    })
}

/// Which association the evaluated WSR uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssocMode {
    /// Row-wise argmax of the predicted scores.
    Hard,
    /// The supplied labels.
    Labels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub f: ComplexMatrix,
    pub theta: Vec<Vec<C64>>,
    pub scores: Vec<Vec<f64>>,
    pub association: Association,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub wsr: Vec<f64>,
    pub associations: Vec<Association>,
    pub mean_wsr: f64,
    /// Fraction of samples whose decoded association equals the label.
    pub match_rate: f64,
}

fn equal_weights(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

fn make_batch(
    net: &Network,
    scenario: &ScenarioConfig,
    samples: &[&ChannelRealization],
    labels: &[&Association],
    p_max_dbm: f64,
) -> Result<Batch, HgnnError> {
    Batch::new(
        samples,
        labels,
        &equal_weights(net.model.arch.dims.k),
        net.input_scale,
        scenario.noise_power(),
        dbm_to_watts(p_max_dbm),
    )
}

/// Forward pass without gradients, decoded per sample.
pub fn predict(
    net: &Network,
    scenario: &ScenarioConfig,
    samples: &[ChannelRealization],
    p_max_dbm: f64,
) -> Result<Vec<Prediction>, HgnnError> {
    let Dims { n_t, r, k, m } = net.model.arch.dims;
    let chunks = samples.len().div_ceil(EVAL_CHUNK);
    let parts = par::try_map_range(chunks, |c| -> Result<Vec<Prediction>, HgnnError> {
        let part = &samples[c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(samples.len())];
        let refs: Vec<&ChannelRealization> = part.iter().collect();
        let dummy = Association::new(r, vec![0; k])?;
        let labels = vec![&dummy; part.len()];
        let batch = make_batch(net, scenario, &refs, &labels, p_max_dbm)?;
        let mut tape = Tape::new();
        let p: Vec<_> = net.model.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let heads = net.model.forward(&mut tape, &p, &batch)?;
        let (fv, tv, sv) = (tape.value(heads.f), tape.value(heads.theta), tape.value(heads.scores));
        (0..part.len())
            .map(|b| {
                let row = fv.row(b);
                let f = ComplexMatrix::from_fn(n_t, k, |n, kk| C64::new(row[kk * 2 * n_t + n], row[kk * 2 * n_t + n_t + n]));
                let theta = (0..r)
                    .map(|i| {
                        let t = tv.row(b * r + i);
                        (0..m).map(|j| C64::new(t[j], t[m + j])).collect()
                    })
                    .collect();
                let scores: Vec<Vec<f64>> = (0..k).map(|kk| sv.row(b * k + kk).to_vec()).collect();
                let association = decode_association(&scores)?;
                Ok(Prediction {
                    f,
                    theta,
                    scores,
                    association,
                })
            })
            .collect()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// WSR of the network's outputs against the true channels.
pub fn evaluate(
    net: &Network,
    scenario: &ScenarioConfig,
    samples: &[ChannelRealization],
    labels: &[Association],
    mode: AssocMode,
    p_max_dbm: f64,
) -> Result<Evaluation, HgnnError> {
    if labels.len() != samples.len() {
        return Err(HgnnError::Config("one label per sample is required".into()));
    }
    let preds = predict(net, scenario, samples, p_max_dbm)?;
    let mut wsr = Vec::with_capacity(samples.len());
    let mut associations = Vec::with_capacity(samples.len());
    let mut matches = 0usize;
    for ((s, pred), label) in samples.iter().zip(preds).zip(labels) {
        let inst = ProblemInstance::equal_weights(s, scenario, p_max_dbm)?;
        let u = match mode {
            AssocMode::Hard => pred.association.clone(),
            AssocMode::Labels => label.clone(),
        };
        matches += (pred.association == *label) as usize;
        wsr.push(sys_evaluate(&inst, &u, &pred.theta, &pred.f)?);
        associations.push(pred.association);
    }
    let n = samples.len().max(1) as f64;
    Ok(Evaluation {
        mean_wsr: wsr.iter().sum::<f64>() / n,
        match_rate: matches as f64 / n,
        wsr,
        associations,
    })
}

/// Mean WSR of alternating optimization under the given associations.
pub fn reference_wsr(
    scenario: &ScenarioConfig,
    samples: &[ChannelRealization],
    labels: &[Association],
    p_max_dbm: f64,
) -> Result<f64, HgnnError> {
    if samples.is_empty() || labels.len() != samples.len() {
        return Err(HgnnError::Config("reference needs one label per sample".into()));
    }
    let cfg = AoConfig::standard();
    let wsr = par::try_map_range(samples.len(), |j| -> Result<f64, HgnnError> {
        let inst = ProblemInstance::equal_weights(&samples[j], scenario, p_max_dbm)?;
        ao_solve(&inst, &labels[j], &cfg)
            .map(|o| o.solution.wsr)
            .map_err(|e| HgnnError::Config(format!("reference solver failed on sample {j}: {e}")))
    })?;
    Ok(wsr.iter().sum::<f64>() / samples.len() as f64)
}

/// Penalty weight: pre-trained network WSR over the reference WSR, both
/// under the label association.
pub fn compute_eta(wsr_p: f64, wsr_p0: f64) -> Result<f64, HgnnError> {
    if !(wsr_p0 > 0.0) || !wsr_p0.is_finite() {
        return Err(HgnnError::DegenerateEta(wsr_p0));
    }
    if !(wsr_p > 0.0) || !wsr_p.is_finite() {
        return Err(HgnnError::DegenerateEta(wsr_p));
    }
    Ok(wsr_p / wsr_p0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Rate loss under the label association.
    Pretrain,
    /// Rate loss under the soft association plus the penalty.
    Joint,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretraining",
            Self::Joint => "training",
        }
    }
}

/// Runs epochs `net.epochs_done + 1 ..= last_epoch`.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    net: &mut Network,
    data: &Dataset,
    labels: &LabelSet,
    cfg: &TrainConfig,
    phase: Phase,
    last_epoch: usize,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &Network) -> Result<(), HgnnError>,
) -> Result<Vec<EpochMetrics>, HgnnError> {
    let train = data.train();
    if train.is_empty() || data.validation().is_empty() {
        return Err(HgnnError::Config("both splits must be non-empty".into()));
    }
    if labels.train.len() != train.len() || labels.validation.len() != data.validation().len() {
        return Err(HgnnError::Config("label count does not match the dataset".into()));
    }
    if net.adam.is_none() {
        net.adam = Some(AdamState::new(cfg.adam(), net.model.params.tensors())?);
    }
    let mode = match phase {
        Phase::Pretrain => AssocMode::Labels,
        Phase::Joint => AssocMode::Hard,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    while net.epochs_done < last_epoch {
        let epoch = net.epochs_done + 1;
        let mut rng = ChaCha8Rng::seed_from_u64((cfg.seed ^ 0x5eed_0fe9).wrapping_add(epoch as u64 * 0x9e37_79b9));
        // a fresh permutation per epoch, so resumed runs see the same batches
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |msg: String| HgnnError::Diverged {
                phase: phase.name(),
                epoch,
                batch: bi,
                msg,
            };
            let samples: Vec<&ChannelRealization> = idx.iter().map(|&j| &train[j]).collect();
            let labs: Vec<&Association> = idx.iter().map(|&j| &labels.train[j]).collect();
            let batch = make_batch(net, &data.scenario, &samples, &labs, net.p_max_dbm)?;
            let mut tape = Tape::new();
            let p = net.model.params.leaves(&mut tape);
            let heads = net.model.forward(&mut tape, &p, &batch).map_err(|e| diverged(e.to_string()))?;
            let loss = match phase {
                Phase::Pretrain => {
                    let a = tape.constant(batch.labels.clone());
                    loss_wsr(&mut tape, &batch, heads.f, heads.theta, a)
                }
                Phase::Joint => {
                    let l1 = loss_wsr(&mut tape, &batch, heads.f, heads.theta, heads.scores)?;
                    let l2 = loss_ce(&mut tape, &batch.labels, heads.scores, batch.size)?;
                    combine(&mut tape, l1, l2, net.eta)
                }
            }
            .map_err(|e| diverged(e.to_string()))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(format!("loss {value}")));
            }
            let mut grads = tape.backward(loss).map_err(|e| diverged(e.to_string()))?;
            let g: Vec<_> = p.iter().map(|&v| grads.take(v)).collect();
            let adam = net.adam.as_mut().expect("optimizer state");
            adam.step(net.model.params.tensors_mut(), &g).map_err(|e| diverged(e.to_string()))?;
            loss_sum += value;
            batches += 1;
        }
        let eval = evaluate(net, &data.scenario, data.validation(), &labels.validation, mode, net.p_max_dbm)?;
        net.epochs_done = epoch;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_wsr: eval.mean_wsr,
            assoc_match_rate: eval.match_rate,
        };
        on_epoch(&m, net)?;
        history.push(m);
    }
    Ok(history)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub network: Network,
    /// Mean alternating-optimization WSR under the labels on the reference
    /// validation samples.
    pub wsr_p0: f64,
    /// Mean WSR of the pre-trained network under the labels on the same
    /// samples.
    pub wsr_p: f64,
    pub metrics: Vec<EpochMetrics>,
}

/// Fresh network for the dataset's dimensions.
pub fn init_network(data: &Dataset, cfg: &TrainConfig) -> Result<Network, HgnnError> {
    cfg.validate()?;
    let first = data.samples.first().ok_or_else(|| HgnnError::Config("empty dataset".into()))?;
    let arch = Arch {
        kind: cfg.kind,
        dims: Dims::of(first),
        hidden: cfg.hidden,
        steps: cfg.steps,
        slope: cfg.slope,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::init(arch, &mut rng)?;
    let input_scale = Dataset::cascaded_rms(data.train());
    if !(input_scale > 0.0) {
        return Err(HgnnError::Config("training channels are all zero".into()));
    }
    Ok(Network {
        model,
        input_scale,
        eta: 0.0,
        p_max_dbm: cfg.pretrain_p_max_dbm,
        epochs_done: 0,
        adam: None,
    })
}

/// Rate-only training of a fresh network under a fixed label association at
/// `cfg.pretrain_p_max_dbm`, followed by the WSR pair that calibrates the
/// penalty.
pub fn pretrain(
    data: &Dataset,
    labels: &LabelSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &Network) -> Result<(), HgnnError>,
) -> Result<PretrainOutcome, HgnnError> {
    let mut net = init_network(data, cfg)?;
    resume_pretrain(&mut net, data, labels, cfg, on_epoch)
}

/// Continues pre-training of `net` up to `cfg.pretrain_epochs`.
pub fn resume_pretrain(
    net: &mut Network,
    data: &Dataset,
    labels: &LabelSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &Network) -> Result<(), HgnnError>,
) -> Result<PretrainOutcome, HgnnError> {
    net.p_max_dbm = cfg.pretrain_p_max_dbm;
    let metrics = run_epochs(net, data, labels, cfg, Phase::Pretrain, cfg.pretrain_epochs, on_epoch)?;
    let (wsr_p, wsr_p0) = calibration_pair(net, data, labels, cfg.pretrain_p_max_dbm)?;
    Ok(PretrainOutcome {
        network: net.clone(),
        wsr_p0,
        wsr_p,
        metrics,
    })
}

/// `(network WSR, reference WSR)` under the labels on the first
/// [`REFERENCE_SAMPLES`] validation samples.
pub fn calibration_pair(net: &Network, data: &Dataset, labels: &LabelSet, p_max_dbm: f64) -> Result<(f64, f64), HgnnError> {
    let val = data.validation();
    let n = val.len().min(REFERENCE_SAMPLES);
    let (val, lab) = (&val[..n], &labels.validation[..n]);
    let wsr_p = evaluate(net, &data.scenario, val, lab, AssocMode::Labels, p_max_dbm)?.mean_wsr;
    let wsr_p0 = reference_wsr(&data.scenario, val, lab, p_max_dbm)?;
    Ok((wsr_p, wsr_p0))
}

/// Joint training with the soft association and penalty `eta`, continuing
/// from `net` (its epoch counter and optimizer state included) up to
/// `cfg.epochs`.
pub fn train(
    net: &mut Network,
    data: &Dataset,
    labels: &LabelSet,
    eta: f64,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &Network) -> Result<(), HgnnError>,
) -> Result<Vec<EpochMetrics>, HgnnError> {
    cfg.validate()?;
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(HgnnError::Config(format!("eta {eta} must be finite and non-negative")));
    }
    net.eta = eta;
    net.p_max_dbm = cfg.p_max_dbm;
    run_epochs(net, data, labels, cfg, Phase::Joint, cfg.epochs, on_epoch)
}

/// Hands a pre-trained network over to joint training: epoch count and
/// optimizer state start afresh.
pub fn warm_start(mut net: Network) -> Network {
    net.epochs_done = 0;
    net.adam = None;
    net
}

/// Rate-only training under fixed labels at the joint operating point; used
/// for the fixed-association reference networks.
pub fn train_fixed(
    data: &Dataset,
    labels: &LabelSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &Network) -> Result<(), HgnnError>,
) -> Result<Network, HgnnError> {
    let mut net = init_network(data, cfg)?;
    net.p_max_dbm = cfg.p_max_dbm;
    run_epochs(&mut net, data, labels, cfg, Phase::Pretrain, cfg.epochs, on_epoch)?;
    Ok(net)
}
