//! Heterogeneous GNN and the fully connected benchmark, both producing the
//! same three heads.

use rand::Rng;

use crate::numerics::{RealTensor, Tape, Var};

use super::batch::{Batch, Dims};
use super::params::{Init, Linear, Mlp, ParamStore};
use super::HgnnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gnn,
    Dnn,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            Self::Gnn => 0,
            Self::Dnn => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::Gnn),
            1 => Some(Self::Dnn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arch {
    pub kind: ModelKind,
    pub dims: Dims,
    pub hidden: usize,
    /// Total blocks: encoder, `steps - 2` core steps, decoder.
    pub steps: usize,
    pub slope: f64,
}

impl Arch {
    pub fn validate(&self) -> Result<(), HgnnError> {
        let d = self.dims;
        if d.n_t == 0 || d.r == 0 || d.k == 0 || d.m == 0 || self.hidden == 0 {
            return Err(HgnnError::Config("dimensions must be positive".into()));
        }
        if self.steps < 3 {
            return Err(HgnnError::Config(format!("T = {} but at least 3 blocks are needed", self.steps)));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(HgnnError::Config(format!("leaky slope {} outside [0, 1)", self.slope)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoreStep {
    pub msg_rr: Mlp,
    pub msg_ur: Mlp,
    pub up_rr: Mlp,
    pub up_ur: Mlp,
    pub msg_ru: Mlp,
    pub msg_uu: Mlp,
    pub up_ru: Mlp,
    pub up_max: Mlp,
    pub up_uu: Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GnnLayout {
    pub enc_u: Linear,
    pub enc_r: Linear,
    pub core: Vec<CoreStep>,
    pub dec_ub: Mlp,
    pub dec_rb: Mlp,
    pub dec_ur: Mlp,
    pub dec_rr: Mlp,
    pub dec_uu: Mlp,
    pub dec_ru: Mlp,
    pub head_f: Linear,
    pub head_theta: Linear,
    pub head_u: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnnLayout {
    pub layers: Vec<Linear>,
    pub head_f: Linear,
    pub head_theta: Linear,
    pub head_u: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layout {
    Gnn(GnnLayout),
    Dnn(DnnLayout),
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Heads {
    /// `[B, 2 N_t K]`, per user `[Re f_k, Im f_k]`, row norm `sqrt(p_max)`.
    pub f: Var,
    /// `[B R, 2 M]`, `[Re theta, Im theta]` on the unit circle.
    pub theta: Var,
    /// `[B K, R]` row-stochastic association scores.
    pub scores: Var,
    /// `(users [B K, D], RIS [B R, D])` after the encoder and each core step.
    pub states: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub layout: Layout,
    pub params: ParamStore,
}

fn repeat_index(groups: usize, size: usize) -> Vec<usize> {
    (0..groups * size).map(|j| j / size).collect()
}

impl Model {
    pub fn init<R: Rng>(arch: Arch, rng: &mut R) -> Result<Self, HgnnError> {
        arch.validate()?;
        let Dims { n_t, r, k, m } = arch.dims;
        let d = arch.hidden;
        let e = arch.dims.edge_len();
        let mut init = Init::new(rng);
        let layout = match arch.kind {
            ModelKind::Gnn => {
                let enc_u = init.linear("enc.user", r * e, d);
                let enc_r = init.linear("enc.ris", 2 * e, d);
                let core = (0..arch.steps - 2)
                    .map(|t| {
                        let mut mlp = |name: &str, fan_in: usize| init.mlp(&format!("core{t}.{name}"), fan_in, d, d);
                        CoreStep {
                            msg_rr: mlp("msg_rr", d),
                            msg_ur: mlp("msg_ur", d),
                            up_rr: mlp("up_rr", 2 * d),
                            up_ur: mlp("up_ur", 2 * d),
                            msg_ru: mlp("msg_ru", d),
                            msg_uu: mlp("msg_uu", d),
                            up_ru: mlp("up_ru", 2 * d),
                            up_max: mlp("up_max", d),
                            up_uu: mlp("up_uu", 2 * d),
                        }
                    })
                    .collect();
                Layout::Gnn(GnnLayout {
                    enc_u,
                    enc_r,
                    core,
                    dec_ub: init.mlp("dec.u_b", d, d, d),
                    dec_rb: init.mlp("dec.r_b", d, d, d),
                    dec_ur: init.mlp("dec.u_r", d, d, d),
                    dec_rr: init.mlp("dec.r_r", 2 * d, d, d),
                    dec_uu: init.mlp("dec.u_u", 2 * d, d, d),
                    dec_ru: init.mlp("dec.r_u", d, d, d),
                    head_f: init.linear("head.f", 2 * d, 2 * n_t),
                    head_theta: init.linear("head.theta", d, 2 * m),
                    head_u: init.linear("head.u", d, r),
                })
            }
            ModelKind::Dnn => {
                let mut layers = vec![init.linear("dnn.enc", r * k * e, d)];
                for j in 0..4 {
                    layers.push(init.linear(&format!("dnn.proc{j}"), d, d));
                }
                layers.push(init.linear("dnn.dec", d, d));
                Layout::Dnn(DnnLayout {
                    layers,
                    head_f: init.linear("head.f", d, 2 * n_t * k),
                    head_theta: init.linear("head.theta", d, 2 * m * r),
                    head_u: init.linear("head.u", d, k * r),
                })
            }
        };
        Ok(Self {
            arch,
            layout,
            params: init.store,
        })
    }

    /// Same layout with the given tensors, matched by name and shape.
    pub fn with_params(arch: Arch, named: Vec<(String, RealTensor)>) -> Result<Self, HgnnError> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Self::init(arch, &mut rng)?;
        if named.len() != model.params.len() {
            return Err(HgnnError::Config(format!(
                "{} tensors given, layout has {}",
                named.len(),
                model.params.len()
            )));
        }
        for (name, t) in named {
            let idx = model
                .params
                .index_of(&name)
                .ok_or_else(|| HgnnError::Config(format!("unknown tensor {name}")))?;
            let slot = &mut model.params.tensors_mut()[idx];
            if slot.shape() != t.shape() {
                return Err(HgnnError::Config(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Heads, HgnnError> {
        if batch.dims != self.arch.dims {
            return Err(HgnnError::Config(format!(
                "batch dims {:?} differ from model dims {:?}",
                batch.dims, self.arch.dims
            )));
        }
        match &self.layout {
            Layout::Gnn(l) => self.gnn_forward(l, tape, p, batch),
            Layout::Dnn(l) => self.dnn_forward(l, tape, p, batch),
        }
    }

    fn gnn_forward(&self, l: &GnnLayout, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Heads, HgnnError> {
        let Dims { n_t, r, k, .. } = self.arch.dims;
        let b = batch.size;
        let s = self.arch.slope;
        let rep_u = repeat_index(b, k);
        let rep_r = repeat_index(b, r);

        let x = tape.constant(batch.user_others.clone());
        let x = l.enc_u.apply(tape, p, x)?;
        let mut users = tape.leaky_relu(x, s);
        let x = tape.constant(batch.ris_in.clone());
        let x = l.enc_r.apply(tape, p, x)?;
        let x = tape.leaky_relu(x, s);
        let mut ris = tape.segment_mean(x, k)?;
        let mut states = vec![(users, ris)];

        for c in &l.core {
            // RIS side
            let xi_r = c.msg_rr.apply(tape, p, ris, s)?;
            let xi_u = c.msg_ur.apply(tape, p, users, s)?;
            let cat = tape.concat_cols(&[xi_r, ris])?;
            let rr = c.up_rr.apply(tape, p, cat, s)?;
            let mu = tape.segment_mean(xi_u, k)?;
            let mu = tape.gather_rows(mu, &rep_r)?;
            let cat = tape.concat_cols(&[mu, ris])?;
            let ur = c.up_ur.apply(tape, p, cat, s)?;
            let sum = tape.add(rr, ur)?;
            let half = tape.scale(sum, 0.5);
            let next_ris = tape.add(half, ris)?;

            // user side
            let yr = c.msg_ru.apply(tape, p, ris, s)?;
            let yu = c.msg_uu.apply(tape, p, users, s)?;
            let mr = tape.segment_mean(yr, r)?;
            let mr = tape.gather_rows(mr, &rep_u)?;
            let cat = tape.concat_cols(&[mr, users])?;
            let ru = c.up_ru.apply(tape, p, cat, s)?;
            let mx = tape.segment_max(yu, k)?;
            let mx = tape.gather_rows(mx, &rep_u)?;
            let a = c.up_max.apply(tape, p, mx, s)?;
            let cat = tape.concat_cols(&[yu, users])?;
            let bb = c.up_uu.apply(tape, p, cat, s)?;
            let uu = tape.add(a, bb)?;
            let uu = tape.scale(uu, 0.5);
            let sum = tape.add(ru, uu)?;
            let half = tape.scale(sum, 0.5);
            users = tape.add(half, users)?;
            ris = next_ris;
            states.push((users, ris));
        }

        let mu = tape.segment_mean(users, k)?;
        let mr = tape.segment_mean(ris, r)?;
        let a = l.dec_ub.apply(tape, p, mu, s)?;
        let c = l.dec_rb.apply(tape, p, mr, s)?;
        let v_b = tape.add(a, c)?;
        let v_b = tape.scale(v_b, 0.5);

        let a = l.dec_ur.apply(tape, p, mu, s)?;
        let a = tape.gather_rows(a, &rep_r)?;
        let mr_rep = tape.gather_rows(mr, &rep_r)?;
        let cat = tape.concat_cols(&[ris, mr_rep])?;
        let c = l.dec_rr.apply(tape, p, cat, s)?;
        let v_r = tape.add(a, c)?;
        let v_r = tape.scale(v_r, 0.5);

        let mu_rep = tape.gather_rows(mu, &rep_u)?;
        let cat = tape.concat_cols(&[users, mu_rep])?;
        let a = l.dec_uu.apply(tape, p, cat, s)?;
        let c = l.dec_ru.apply(tape, p, mr, s)?;
        let c = tape.gather_rows(c, &rep_u)?;
        let v_u = tape.add(a, c)?;
        let v_u = tape.scale(v_u, 0.5);

        let vb_rep = tape.gather_rows(v_b, &rep_u)?;
        let cat = tape.concat_cols(&[vb_rep, v_u])?;
        let f = l.head_f.apply(tape, p, cat)?;
        let f = tape.reshape(f, b, 2 * n_t * k)?;
        let f = tape.normalize_rows(f, batch.p_max.sqrt())?;
        let theta = l.head_theta.apply(tape, p, v_r)?;
        let theta = tape.unit_modulus(theta)?;
        let scores = l.head_u.apply(tape, p, v_u)?;
        let scores = tape.softmax(scores)?;
        Ok(Heads { f, theta, scores, states })
    }

    fn dnn_forward(&self, l: &DnnLayout, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Heads, HgnnError> {
        let Dims { r, k, m, .. } = self.arch.dims;
        let b = batch.size;
        let mut h = tape.constant(batch.flat_in.clone());
        for layer in &l.layers {
            let z = layer.apply(tape, p, h)?;
            h = tape.leaky_relu(z, self.arch.slope);
        }
        let f = l.head_f.apply(tape, p, h)?;
        let f = tape.normalize_rows(f, batch.p_max.sqrt())?;
        let theta = l.head_theta.apply(tape, p, h)?;
        let theta = tape.reshape(theta, b * r, 2 * m)?;
        let theta = tape.unit_modulus(theta)?;
        let scores = l.head_u.apply(tape, p, h)?;
        let scores = tape.reshape(scores, b * k, r)?;
        let scores = tape.softmax(scores)?;
        Ok(Heads {
            f,
            theta,
            scores,
            states: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_indexed, ChannelRealization, Dataset, ScenarioConfig};
    use crate::sysmodel::{case_association, decode_association, CaseMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenario(k: usize) -> ScenarioConfig {
        ScenarioConfig {
            k,
            n_t: 4,
            m_x: 2,
            m_y: 2,
            ..ScenarioConfig::default()
        }
    }

    fn model(kind: ModelKind, s: &ScenarioConfig, seed: u64) -> Model {
        let real = sample_indexed(s, 0, 0).unwrap();
        let arch = Arch {
            kind,
            dims: Dims::of(&real),
            hidden: 16,
            steps: 4,
            slope: 0.01,
        };
        Model::init(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch(s: &ScenarioConfig, reals: &[ChannelRealization]) -> Batch {
        let labels: Vec<_> = reals.iter().map(|r| case_association(r, CaseMode::Nearest).unwrap()).collect();
        let refs: Vec<_> = reals.iter().collect();
        let lrefs: Vec<_> = labels.iter().collect();
        let w = vec![1.0 / s.k as f64; s.k];
        Batch::new(&refs, &lrefs, &w, Dataset::cascaded_rms(reals), s.noise_power(), 0.1).unwrap()
    }

    struct Out {
        f: RealTensor,
        theta: RealTensor,
        scores: RealTensor,
        states: Vec<(RealTensor, RealTensor)>,
    }

    fn run(m: &Model, b: &Batch) -> Out {
        let mut tape = Tape::new();
        let p = m.params.leaves(&mut tape);
        let h = m.forward(&mut tape, &p, b).unwrap();
        Out {
            f: tape.value(h.f).clone(),
            theta: tape.value(h.theta).clone(),
            scores: tape.value(h.scores).clone(),
            states: h.states.iter().map(|&(u, r)| (tape.value(u).clone(), tape.value(r).clone())).collect(),
        }
    }

    #[test]
    fn shapes_and_constraints() {
        for kind in [ModelKind::Gnn, ModelKind::Dnn] {
            let s = scenario(3);
            let reals: Vec<_> = (0..5).map(|i| sample_indexed(&s, 3, i).unwrap()).collect();
            let b = batch(&s, &reals);
            let o = run(&model(kind, &s, 1), &b);
            assert_eq!(o.f.shape(), &[5, 2 * 4 * 3]);
            assert_eq!(o.theta.shape(), &[5 * 2, 2 * 4]);
            assert_eq!(o.scores.shape(), &[5 * 3, 2]);
            for row in 0..5 {
                let pw: f64 = o.f.row(row).iter().map(|v| v * v).sum();
                assert!((pw - 0.1).abs() < 1e-12);
            }
            for row in 0..10 {
                let t = o.theta.row(row);
                for j in 0..4 {
                    assert!((t[j].hypot(t[4 + j]) - 1.0).abs() < 1e-12);
                }
            }
            for row in 0..15 {
                assert!((o.scores.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            if kind == ModelKind::Gnn {
                for (u, r) in &o.states {
                    assert_eq!(u.shape(), &[15, 16]);
                    assert_eq!(r.shape(), &[10, 16]);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let s = scenario(2);
        let reals: Vec<_> = (0..3).map(|i| sample_indexed(&s, 5, i).unwrap()).collect();
        let b = batch(&s, &reals);
        let m = model(ModelKind::Gnn, &s, 2);
        let (a, c) = (run(&m, &b), run(&m, &b));
        assert_eq!(a.f, c.f);
        assert_eq!(a.theta, c.theta);
        assert_eq!(a.scores, c.scores);
    }

    #[test]
    fn user_permutation_equivariance() {
        let s = scenario(3);
        let m = model(ModelKind::Gnn, &s, 3);
        let perm = [2, 0, 1];
        for seed in 0..4 {
            let real = sample_indexed(&s, seed, 0).unwrap();
            let a = run(&m, &batch(&s, &[real.clone()]));
            let c = run(&m, &batch(&s, &[real.permute_users(&perm)]));
            let blk = 2 * 4;
            for (j, &p) in perm.iter().enumerate() {
                for q in 0..blk {
                    assert!((c.f.row(0)[j * blk + q] - a.f.row(0)[p * blk + q]).abs() < 1e-9);
                }
                for i in 0..2 {
                    assert!((c.scores.get(j, i) - a.scores.get(p, i)).abs() < 1e-9);
                }
            }
            for (x, y) in a.theta.data().iter().zip(c.theta.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dense_benchmark_is_not_equivariant() {
        let s = scenario(3);
        let m = model(ModelKind::Dnn, &s, 3);
        let perm = [2, 0, 1];
        let real = sample_indexed(&s, 7, 0).unwrap();
        let a = run(&m, &batch(&s, &[real.clone()]));
        let c = run(&m, &batch(&s, &[real.permute_users(&perm)]));
        let dev = perm
            .iter()
            .enumerate()
            .map(|(j, &p)| (c.scores.get(j, 0) - a.scores.get(p, 0)).abs())
            .fold(0.0, f64::max);
        assert!(dev > 1e-6);
    }

    #[test]
    fn zero_update_branches_leave_states_unchanged() {
        let s = scenario(2);
        let mut m = model(ModelKind::Gnn, &s, 4);
        let names: Vec<usize> = m
            .params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("core") && n.contains(".up_") && n.contains(".1."))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(names.len(), 2 * 5 * 2);
        for i in names {
            let t = &mut m.params.tensors_mut()[i];
            *t = RealTensor::zeros(t.shape());
        }
        let real = sample_indexed(&s, 1, 0).unwrap();
        let o = run(&m, &batch(&s, &[real]));
        assert_eq!(o.states.len(), 3);
        for w in o.states.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn user_encoder_excludes_own_channel() {
        let s = scenario(2);
        let m = model(ModelKind::Gnn, &s, 5);
        let real = sample_indexed(&s, 2, 0).unwrap();
        let mut bumped = real.clone();
        for i in 0..2 {
            bumped.cascaded[i * 2] = bumped.cascaded[i * 2].scale(crate::numerics::C64::new(1.7, -0.3));
        }
        let u = case_association(&real, CaseMode::Nearest).unwrap();
        let scale = Dataset::cascaded_rms(&[real.clone()]);
        let make = |r: &ChannelRealization| Batch::new(&[r], &[&u], &[0.5, 0.5], scale, s.noise_power(), 0.1).unwrap();
        let a = run(&m, &make(&real));
        let c = run(&m, &make(&bumped));
        let (ua, uc) = (&a.states[0].0, &c.states[0].0);
        assert_eq!(ua.row(0), uc.row(0));
        assert_ne!(ua.row(1), uc.row(1));
    }

    #[test]
    fn identical_channels_give_identical_ris_states() {
        let s = scenario(2);
        let m = model(ModelKind::Gnn, &s, 6);
        let mut real = sample_indexed(&s, 3, 0).unwrap();
        let same = real.cascaded[0].clone();
        for c in &mut real.cascaded {
            *c = same.clone();
        }
        let o = run(&m, &batch(&s, &[real]));
        let r = &o.states[0].1;
        assert_eq!(r.row(0), r.row(1));
    }

    #[test]
    fn checkpoint_layout_rebuild() {
        let s = scenario(2);
        let m = model(ModelKind::Gnn, &s, 7);
        let named: Vec<_> = m.params.names().iter().cloned().zip(m.params.tensors().iter().cloned()).collect();
        let back = Model::with_params(m.arch, named).unwrap();
        assert_eq!(back, m);
        let real = sample_indexed(&s, 0, 0).unwrap();
        let o = run(&m, &batch(&s, &[real]));
        let u = decode_association(&(0..2).map(|k| o.scores.row(k).to_vec()).collect::<Vec<_>>()).unwrap();
        assert_eq!(u.k(), 2);
    }
}
