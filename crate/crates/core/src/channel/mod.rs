//! mmWave channel generation for the two-RIS downlink scenario.
//!
//! Geometry is 2-D. The BS array and every RIS lie along the y axis, so the
//! directional cosine toward a point is `(y_p - y_0) / distance`. LoS paths
//! use geometric angles with elevation cosine 0; NLoS angles are uniform on
//! [-1, 1].

mod io;

use num_complex::Complex64 as C64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{ComplexMatrix, NumericsError};
use crate::par;

pub use io::{read_dataset, write_dataset, FORMAT_VERSION, MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("{what} must be positive")]
    NonPositive { what: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// BS antennas.
    pub n_t: usize,
    /// Number of RISs.
    pub r: usize,
    /// Number of users.
    pub k: usize,
    pub m_x: usize,
    pub m_y: usize,
    pub bs_position: [f64; 2],
    pub ris_positions: Vec<[f64; 2]>,
    pub user_region: Region,
    /// Paths per link: one LoS plus `paths - 1` NLoS.
    pub paths: usize,
    pub pl_a: f64,
    pub pl_b: f64,
    pub shadow_sigma_db: f64,
    pub nlos_gain_factor: f64,
    pub noise_power_dbm: f64,
    /// Scale each BS-RIS channel by `sqrt(M * N_t)` so that the steering
    /// vectors carry array gain instead of being power-normalized.
    pub array_gain: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_t: 8,
            r: 2,
            k: 2,
            m_x: 4,
            m_y: 4,
            bs_position: [0.0, 0.0],
            ris_positions: vec![[30.0, 25.0], [30.0, -25.0]],
            user_region: Region {
                x_min: 40.0,
                x_max: 50.0,
                y_min: -25.0,
                y_max: 25.0,
            },
            paths: 3,
            pl_a: 61.4,
            pl_b: 2.0,
            shadow_sigma_db: 5.8,
            nlos_gain_factor: 0.01,
            noise_power_dbm: -85.0,
            array_gain: true,
        }
    }
}

impl ScenarioConfig {
    /// RIS elements.
    pub fn m(&self) -> usize {
        self.m_x * self.m_y
    }

    pub fn noise_power(&self) -> f64 {
        dbm_to_watts(self.noise_power_dbm)
    }

    /// Square RIS of `m` elements; `m` must be a perfect square.
    pub fn with_square_ris(mut self, m: usize) -> Result<Self, ChannelError> {
        let side = (m as f64).sqrt().round() as usize;
        if side * side != m {
            return Err(ChannelError::Scenario(format!("{m} RIS elements do not form a square grid")));
        }
        self.m_x = side;
        self.m_y = side;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: String| Err(ChannelError::Scenario(m));
        if self.n_t == 0 || self.r == 0 || self.k == 0 || self.m_x == 0 || self.m_y == 0 || self.paths == 0 {
            return bad("n_t, r, k, m_x, m_y and paths must all be at least 1".into());
        }
        if self.ris_positions.len() != self.r {
            return bad(format!(
                "r = {} but {} RIS positions given",
                self.r,
                self.ris_positions.len()
            ));
        }
        let g = &self.user_region;
        if !(g.x_max > g.x_min && g.y_max > g.y_min) {
            return bad("user_region is degenerate".into());
        }
        if !(self.shadow_sigma_db >= 0.0) {
            return bad("shadow_sigma_db must be non-negative".into());
        }
        if !(self.nlos_gain_factor >= 0.0) {
            return bad("nlos_gain_factor must be non-negative".into());
        }
        let finite = [self.pl_a, self.pl_b, self.noise_power_dbm]
            .iter()
            .chain(self.bs_position.iter())
            .chain(self.ris_positions.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite constant".into());
        }
        for (i, p) in self.ris_positions.iter().enumerate() {
            if distance(*p, self.bs_position) <= 0.0 {
                return bad(format!("RIS {i} coincides with the BS"));
            }
        }
        Ok(())
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Directional cosine of `target` seen from an array at `origin` lying along
/// the y axis.
pub fn directional_cosine(origin: [f64; 2], target: [f64; 2]) -> f64 {
    (target[1] - origin[1]) / distance(origin, target)
}

/// Half-wavelength ULA response with centred indices.
pub fn steering_ula(n: usize, phi: f64) -> Result<Vec<C64>, ChannelError> {
    if n == 0 {
        return Err(ChannelError::NonPositive { what: "array size" });
    }
    let scale = 1.0 / (n as f64).sqrt();
    let centre = (n as f64 - 1.0) / 2.0;
    Ok((0..n)
        .map(|i| C64::from_polar(scale, -std::f64::consts::PI * phi * (i as f64 - centre)))
        .collect())
}

/// UPA response `a_x(phi1) ⊗ a_y(phi2)`.
pub fn steering_upa(m_x: usize, m_y: usize, phi1: f64, phi2: f64) -> Result<Vec<C64>, ChannelError> {
    let ax = steering_ula(m_x, phi1)?;
    let ay = steering_ula(m_y, phi2)?;
    Ok(ax.iter().flat_map(|&x| ay.iter().map(move |&y| x * y)).collect())
}

/// Path loss in dB.
pub fn path_loss_db(r: f64, pl_a: f64, pl_b: f64, shadowing_db: f64) -> Result<f64, ChannelError> {
    if !(r > 0.0) {
        return Err(ChannelError::NonPositive { what: "distance" });
    }
    Ok(pl_a + 10.0 * pl_b * r.log10() + shadowing_db)
}

/// Amplitude scale `10^(-PL / 20)`; the complex gain variance is its square.
pub fn path_loss_amplitude(r: f64, pl_a: f64, pl_b: f64, shadowing_db: f64) -> Result<f64, ChannelError> {
    Ok(10f64.powf(-path_loss_db(r, pl_a, pl_b, shadowing_db)? / 20.0))
}

/// Circularly symmetric complex Gaussian draw with unit variance.
pub fn cn01<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let n = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    C64::new(n.sample(rng), n.sample(rng))
}

/// One draw of every channel in the scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// BS to RIS `i`, `M x N_t`.
    pub g: Vec<ComplexMatrix>,
    /// RIS `i` to user `k` at index `i * K + k`, `1 x M`.
    pub h: Vec<ComplexMatrix>,
    /// Cascaded `diag(h_ik) G_i`, same indexing as `h`.
    pub cascaded: Vec<ComplexMatrix>,
    pub user_positions: Vec<[f64; 2]>,
    /// User `k` to RIS `i` at index `k * R + i`, metres.
    pub distances: Vec<f64>,
}

impl ChannelRealization {
    /// Rebuild the derived fields (cascaded channels and distances) from the
    /// primary ones.
    pub fn assemble(
        scenario: &ScenarioConfig,
        g: Vec<ComplexMatrix>,
        h: Vec<ComplexMatrix>,
        user_positions: Vec<[f64; 2]>,
    ) -> Result<Self, ChannelError> {
        let (r, k) = (scenario.r, scenario.k);
        if g.len() != r || h.len() != r * k || user_positions.len() != k {
            return Err(ChannelError::Scenario("realization does not match scenario counts".into()));
        }
        let mut cascaded = Vec::with_capacity(r * k);
        for i in 0..r {
            for kk in 0..k {
                cascaded.push(ComplexMatrix::diag(h[i * k + kk].data()).mul(&g[i])?);
            }
        }
        let distances = user_positions
            .iter()
            .flat_map(|&u| scenario.ris_positions.iter().map(move |&p| distance(u, p)))
            .collect();
        Ok(Self {
            g,
            h,
            cascaded,
            user_positions,
            distances,
        })
    }

    pub fn cascaded(&self, i: usize, k: usize) -> &ComplexMatrix {
        let kk = self.user_positions.len();
        &self.cascaded[i * kk + k]
    }

    pub fn h_ik(&self, i: usize, k: usize) -> &ComplexMatrix {
        let kk = self.user_positions.len();
        &self.h[i * kk + k]
    }

    pub fn distance(&self, k: usize, i: usize) -> f64 {
        let r = self.g.len();
        self.distances[k * r + i]
    }

    /// The same draw with users reordered: new user `j` is old user `perm[j]`.
    pub fn permute_users(&self, perm: &[usize]) -> Self {
        let (r, k) = (self.g.len(), self.user_positions.len());
        let pick = |v: &[ComplexMatrix]| (0..r).flat_map(|i| perm.iter().map(move |&p| i * k + p)).map(|j| v[j].clone()).collect();
        Self {
            g: self.g.clone(),
            h: pick(&self.h),
            cascaded: pick(&self.cascaded),
            user_positions: perm.iter().map(|&p| self.user_positions[p]).collect(),
            distances: perm.iter().flat_map(|&p| (0..r).map(move |i| self.distances[p * r + i])).collect(),
        }
    }

    /// Check dimensions against a scenario.
    pub fn validate(&self, s: &ScenarioConfig) -> Result<(), ChannelError> {
        let m = s.m();
        let ok = self.g.len() == s.r
            && self.g.iter().all(|g| g.rows() == m && g.cols() == s.n_t)
            && self.h.len() == s.r * s.k
            && self.h.iter().all(|h| h.rows() == 1 && h.cols() == m)
            && self.cascaded.iter().all(|c| c.rows() == m && c.cols() == s.n_t)
            && self.user_positions.len() == s.k;
        if ok {
            Ok(())
        } else {
            Err(ChannelError::Scenario("sample dimensions disagree with scenario".into()))
        }
    }
}

fn link_gains<R: Rng + ?Sized>(
    s: &ScenarioConfig,
    dist: f64,
    rng: &mut R,
) -> Result<Vec<C64>, ChannelError> {
    let shadow = if s.shadow_sigma_db > 0.0 {
        Normal::new(0.0, s.shadow_sigma_db).expect("valid sigma").sample(rng)
    } else {
        0.0
    };
    let amp = path_loss_amplitude(dist, s.pl_a, s.pl_b, shadow)?;
    Ok((0..s.paths)
        .map(|l| {
            let f = if l == 0 { 1.0 } else { s.nlos_gain_factor };
            cn01(rng) * (amp * f)
        })
        .collect())
}

/// Draw one realization.
pub fn sample_realization<R: Rng + ?Sized>(
    s: &ScenarioConfig,
    rng: &mut R,
) -> Result<ChannelRealization, ChannelError> {
    s.validate()?;
    let (m, n_t) = (s.m(), s.n_t);
    let g_scale = if s.array_gain { ((m * n_t) as f64).sqrt() } else { 1.0 };
    let reg = s.user_region;
    let users: Vec<[f64; 2]> = (0..s.k)
        .map(|_| [rng.gen_range(reg.x_min..reg.x_max), rng.gen_range(reg.y_min..reg.y_max)])
        .collect();

    let mut g = Vec::with_capacity(s.r);
    for &p in &s.ris_positions {
        let gains = link_gains(s, distance(s.bs_position, p), rng)?;
        let mut mat = ComplexMatrix::zeros(m, n_t);
        for (l, &beta) in gains.iter().enumerate() {
            let (arr, dep, elev) = if l == 0 {
                (
                    directional_cosine(p, s.bs_position),
                    directional_cosine(s.bs_position, p),
                    0.0,
                )
            } else {
                (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            };
            let ar = steering_upa(s.m_x, s.m_y, arr, elev)?;
            let at = steering_ula(n_t, dep)?;
            let c = beta * g_scale;
            for (a, &x) in ar.iter().enumerate() {
                for (b, &y) in at.iter().enumerate() {
                    let v = mat.get(a, b) + c * x * y.conj();
                    mat.set(a, b, v);
                }
            }
        }
        g.push(mat);
    }

    let mut h = Vec::with_capacity(s.r * s.k);
    for &p in &s.ris_positions {
        for &u in &users {
            let gains = link_gains(s, distance(p, u), rng)?;
            let mut row = vec![C64::new(0.0, 0.0); m];
            for (l, &beta) in gains.iter().enumerate() {
                let (az, elev) = if l == 0 {
                    (directional_cosine(p, u), 0.0)
                } else {
                    (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                };
                let a = steering_upa(s.m_x, s.m_y, az, elev)?;
                for (o, x) in row.iter_mut().zip(a) {
                    *o += beta * x.conj();
                }
            }
            h.push(ComplexMatrix::row_vector(&row));
        }
    }
    ChannelRealization::assemble(s, g, h, users)
}

/// Per-sample generator seeded with `seed + index`.
pub fn sample_indexed(s: &ScenarioConfig, seed: u64, index: u64) -> Result<ChannelRealization, ChannelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index));
    sample_realization(s, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenario: ScenarioConfig,
    pub seed: u64,
    /// The first `n_train` samples form the training split; the rest are
    /// validation.
    pub n_train: usize,
    pub samples: Vec<ChannelRealization>,
}

impl Dataset {
    pub fn generate(
        scenario: &ScenarioConfig,
        seed: u64,
        n_train: usize,
        n_val: usize,
    ) -> Result<Self, ChannelError> {
        scenario.validate()?;
        let n = n_train + n_val;
        if n == 0 {
            return Err(ChannelError::Scenario("dataset needs at least one sample".into()));
        }
        let samples = par::try_map_range(n, |i| sample_indexed(scenario, seed, i as u64))?;
        Ok(Self {
            scenario: scenario.clone(),
            seed,
            n_train,
            samples,
        })
    }

    pub fn train(&self) -> &[ChannelRealization] {
        &self.samples[..self.n_train]
    }

    pub fn validation(&self) -> &[ChannelRealization] {
        &self.samples[self.n_train..]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// RMS magnitude of every cascaded-channel entry over the given samples.
    pub fn cascaded_rms(samples: &[ChannelRealization]) -> f64 {
        let (mut acc, mut n) = (0.0, 0usize);
        for s in samples {
            for c in &s.cascaded {
                acc += c.frob_norm_sqr();
                n += c.data().len();
            }
        }
        if n == 0 {
            0.0
        } else {
            (acc / n as f64).sqrt()
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        self.scenario.validate()?;
        if self.samples.is_empty() || self.n_train > self.samples.len() {
            return Err(ChannelError::Scenario("bad sample counts".into()));
        }
        self.samples.iter().try_for_each(|s| s.validate(&self.scenario))
    }
}
