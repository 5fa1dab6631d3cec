//! Rate and cross-entropy losses on the tape.

use crate::numerics::{Axis, RealTensor, Tape, Var};

use super::batch::Batch;
use super::HgnnError;

/// Floor applied to scores before the log in the cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

/// Negative weighted sum rate averaged over the batch, with effective
/// channels `h_k = sum_i assoc[k, i] theta_i^T H_ik`.
///
/// `f: [B, 2 N_t K]`, `theta: [B R, 2 M]`, `assoc: [B K, R]`. Channels in
/// `batch.q` are pre-divided by the noise standard deviation, so the noise
/// term is one.
pub fn loss_wsr(tape: &mut Tape, batch: &Batch, f: Var, theta: Var, assoc: Var) -> Result<Var, HgnnError> {
    let d = batch.dims;
    let (b, k, r, n_t) = (batch.size, d.k, d.r, d.n_t);
    let to_bki: Vec<usize> = (0..b * k * r).map(|j| (j / (k * r)) * r + j % r).collect();
    let th = tape.gather_rows(theta, &to_bki)?;
    let q = tape.constant(batch.q.clone());
    let g = tape.batch_vecmat(th, q)?;
    let c = tape.reshape(assoc, b * k * r, 1)?;
    let g = tape.mul(g, c)?;
    let h = tape.segment_sum(g, r)?;

    let f_rows = tape.reshape(f, b * k, 2 * n_t)?;
    let own: Vec<usize> = (0..b * k * k).map(|j| j / k).collect();
    let other: Vec<usize> = (0..b * k * k).map(|j| (j / (k * k)) * k + j % k).collect();
    let hx = tape.gather_rows(h, &own)?;
    let fx = tape.gather_rows(f_rows, &other)?;
    let hr = tape.slice_cols(hx, 0, n_t)?;
    let hi = tape.slice_cols(hx, n_t, 2 * n_t)?;
    let fr = tape.slice_cols(fx, 0, n_t)?;
    let fi = tape.slice_cols(fx, n_t, 2 * n_t)?;
    let a = tape.mul(hr, fr)?;
    let bb = tape.mul(hi, fi)?;
    let zr = tape.sub(a, bb)?;
    let zr = tape.sum(zr, Axis::Cols)?;
    let a = tape.mul(hr, fi)?;
    let bb = tape.mul(hi, fr)?;
    let zi = tape.add(a, bb)?;
    let zi = tape.sum(zi, Axis::Cols)?;
    let zr = tape.square(zr);
    let zi = tape.square(zi);
    let pw = tape.add(zr, zi)?;
    let pw = tape.reshape(pw, b * k, k)?;

    let total = tape.sum(pw, Axis::Cols)?;
    let total = tape.add_scalar(total, 1.0);
    let eye: Vec<f64> = (0..b * k).flat_map(|row| (0..k).map(move |j| (row % k == j) as u8 as f64)).collect();
    let eye = tape.constant(RealTensor::new(vec![b * k, k], eye)?);
    let sig = tape.mul(pw, eye)?;
    let sig = tape.sum(sig, Axis::Cols)?;
    let interf = tape.sub(total, sig)?;
    let sinr = tape.div(sig, interf)?;
    let rate = tape.log1p(sinr)?;
    let w = tape.constant(batch.rate_weights.clone());
    let wr = tape.mul(rate, w)?;
    let total = tape.sum_all(wr);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Cross-entropy of the scores against one-hot labels, summed over users
/// and averaged over the batch. Scores below [`CE_FLOOR`] are clamped.
pub fn loss_ce(tape: &mut Tape, labels: &RealTensor, scores: Var, batch_size: usize) -> Result<Var, HgnnError> {
    let y = tape.constant(labels.clone());
    let lg = tape.log_clamped(scores, CE_FLOOR);
    let prod = tape.mul(y, lg)?;
    let total = tape.sum_all(prod);
    Ok(tape.scale(total, -1.0 / batch_size as f64))
}

/// `loss_wsr + eta * loss_ce`.
pub fn combine(tape: &mut Tape, wsr: Var, ce: Var, eta: f64) -> Result<Var, HgnnError> {
    let pen = tape.scale(ce, eta);
    Ok(tape.add(wsr, pen)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_indexed, ScenarioConfig};
    use crate::sysmodel::{case_association, evaluate, Association, CaseMode, ProblemInstance};
    use crate::numerics::{ComplexMatrix, C64};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ce_examples() {
        let mut tape = Tape::new();
        let labels = RealTensor::from_rows(&[&[1.0, 0.0]]);
        let c = tape.constant(RealTensor::from_rows(&[&[0.5, 0.5]]));
        let l = loss_ce(&mut tape, &labels, c, 1).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let c = tape.constant(labels.clone());
        let l = loss_ce(&mut tape, &labels, c, 1).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert_eq!(tape.clamped_logs(), 1);

        let labels = RealTensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = tape.constant(RealTensor::filled(&[2, 2], 0.5));
        let l = loss_ce(&mut tape, &labels, c, 1).unwrap();
        assert!((tape.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn setup(seed: u64, p_dbm: f64) -> (ProblemInstance, Association, Batch) {
        let s = ScenarioConfig::default();
        let real = sample_indexed(&s, seed, 0).unwrap();
        let inst = ProblemInstance::equal_weights(&real, &s, p_dbm).unwrap();
        let u = case_association(&real, CaseMode::Nearest).unwrap();
        let batch = Batch::new(&[&real], &[&u], &inst.weights, 1e-6, inst.noise_power, inst.p_max).unwrap();
        (inst, u, batch)
    }

    fn random_heads(inst: &ProblemInstance, rng: &mut ChaCha8Rng) -> (ComplexMatrix, Vec<Vec<C64>>) {
        let f = ComplexMatrix::from_fn(inst.n_t(), inst.k(), |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let f = crate::sysmodel::project_power(&f, inst.p_max).unwrap();
        let theta = (0..inst.r())
            .map(|_| (0..inst.m()).map(|_| C64::from_polar(1.0, rng.gen_range(0.0..6.3))).collect())
            .collect();
        (f, theta)
    }

    fn pack(f: &ComplexMatrix, theta: &[Vec<C64>]) -> (RealTensor, RealTensor) {
        let (n_t, k) = (f.rows(), f.cols());
        let mut fv = Vec::new();
        for kk in 0..k {
            fv.extend((0..n_t).map(|n| f.get(n, kk).re));
            fv.extend((0..n_t).map(|n| f.get(n, kk).im));
        }
        let m = theta[0].len();
        let tv: Vec<f64> = theta
            .iter()
            .flat_map(|t| t.iter().map(|z| z.re).chain(t.iter().map(|z| z.im)).collect::<Vec<_>>())
            .collect();
        (RealTensor::new(vec![1, 2 * n_t * k], fv).unwrap(), RealTensor::new(vec![theta.len(), 2 * m], tv).unwrap())
    }

    #[test]
    fn hard_weights_match_system_wsr() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..5 {
            let (inst, u, batch) = setup(seed, 40.0);
            let (f, theta) = random_heads(&inst, &mut rng);
            let want = evaluate(&inst, &u, &theta, &f).unwrap();
            let (ft, tt) = pack(&f, &theta);
            let mut tape = Tape::new();
            let (fv, tv) = (tape.constant(ft), tape.constant(tt));
            let a = tape.constant(batch.labels.clone());
            let l = loss_wsr(&mut tape, &batch, fv, tv, a).unwrap();
            let got = -tape.value(l).item();
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn zero_beamformer_gives_zero_loss() {
        let (inst, _, batch) = setup(1, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, theta) = random_heads(&inst, &mut rng);
        let (_, tt) = pack(&ComplexMatrix::zeros(8, 2), &theta);
        let mut tape = Tape::new();
        let fv = tape.constant(RealTensor::zeros(&[1, 32]));
        let tv = tape.constant(tt);
        let a = tape.constant(batch.labels.clone());
        let l = loss_wsr(&mut tape, &batch, fv, tv, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn decomposition_is_exact() {
        let mut tape = Tape::new();
        let w = tape.constant(RealTensor::scalar(-1.25));
        let c = tape.constant(RealTensor::scalar(0.75));
        let l0 = combine(&mut tape, w, c, 0.0).unwrap();
        let l1 = combine(&mut tape, w, c, 0.3).unwrap();
        assert_eq!(tape.value(l0).item(), -1.25);
        assert_eq!(tape.value(l1).item(), -1.25 + 0.3 * 0.75);
        assert!((tape.value(l1).item() - tape.value(l0).item() - 0.3 * 0.75).abs() <= 4.0 * f64::EPSILON);
    }
}
